"""Schema-mapped persistent event store.

Decoded events are transformed through developer-defined mapping schemas
into flat, timestamped records keyed by their on-chain identity, persisted
to an append-only journal, and served back through filter / sort / paginate
/ group queries. Records are never mutated or deleted: everything the sync
engine writes sits below the chain's confirmation depth and is final.
"""

from __future__ import annotations

import base64
import bisect
import json
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Iterable, Sequence

from chainsync.errors import QueryError, SchemaError
from chainsync.journal import JournalWriter, read_journal
from chainsync.util import canonical_json, decode_value, encode_value, order_key

if TYPE_CHECKING:  # pragma: no cover
    from chainsync.fetcher import DecodedEvent

RecordKey = tuple[str, int, int, int]  # (chain_id, block_height, tx_index, log_index)

TARGET_TYPES = ("string", "integer", "boolean", "bytes")
TRANSFORMS = ("rename", "toString", "toInteger")
BUILTIN_COLUMNS = (
    "chain_id",
    "block_height",
    "tx_index",
    "log_index",
    "event_type",
    "schema_id",
    "block_timestamp",
)
OPERATORS = ("=", "!=", "<", "<=", ">", ">=", "contains")


@dataclass(frozen=True)
class FieldMapping:
    """One column of a mapping schema.

    transform is None (carry the source value through), one of the named
    transforms, or ("scale", n) which multiplies a numeric source by n.
    """

    target_column: str
    source_path: str
    target_type: str
    transform: str | tuple[str, int] | None = None

    def __post_init__(self) -> None:
        if self.target_type not in TARGET_TYPES:
            raise SchemaError(f"unknown target type '{self.target_type}'")
        t = self.transform
        if t is None or t in TRANSFORMS:
            return
        if isinstance(t, tuple) and len(t) == 2 and t[0] == "scale" and isinstance(t[1], int):
            return
        raise SchemaError(f"unknown transform {t!r}")

    def to_dict(self) -> dict[str, Any]:
        t: Any = self.transform
        if isinstance(t, tuple):
            t = {"scale": t[1]}
        return {
            "target_column": self.target_column,
            "source_path": self.source_path,
            "target_type": self.target_type,
            "transform": t,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "FieldMapping":
        t = d.get("transform")
        if isinstance(t, dict):
            if set(t) != {"scale"}:
                raise SchemaError(f"unknown transform {t!r}")
            t = ("scale", int(t["scale"]))
        return cls(d["target_column"], d["source_path"], d["target_type"], t)


@dataclass(frozen=True)
class MappingSchema:
    """Transformation from decoded event fields to store columns.

    One schema may serve registrations on several chains; records produced
    under it share a column layout regardless of the source chain. The time
    axis of every record is the block timestamp.
    """

    schema_id: str
    field_mappings: tuple[FieldMapping, ...]
    timestamp_source: str = "blockTimestamp"

    def __post_init__(self) -> None:
        if not self.schema_id:
            raise SchemaError("schema_id must be non-empty")
        if self.timestamp_source != "blockTimestamp":
            raise SchemaError("timestamp_source is fixed to 'blockTimestamp'")
        seen: set[str] = set()
        for m in self.field_mappings:
            if m.target_column in BUILTIN_COLUMNS or m.target_column == "stored_at":
                raise SchemaError(f"target column '{m.target_column}' is reserved")
            if m.target_column in seen:
                raise SchemaError(f"duplicate target column '{m.target_column}'")
            seen.add(m.target_column)

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(m.target_column for m in self.field_mappings)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_id": self.schema_id,
            "field_mappings": [m.to_dict() for m in self.field_mappings],
            "timestamp_source": self.timestamp_source,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MappingSchema":
        return cls(
            schema_id=d["schema_id"],
            field_mappings=tuple(FieldMapping.from_dict(m) for m in d["field_mappings"]),
            timestamp_source=d.get("timestamp_source", "blockTimestamp"),
        )

    @classmethod
    def identity_for(cls, schema_id: str, fields: Iterable[tuple[str, str]]) -> "MappingSchema":
        """Schema mapping every (name, type) field to a column of the same name."""
        return cls(schema_id, tuple(FieldMapping(n, n, t) for n, t in fields))


@dataclass(frozen=True)
class MappedRecord:
    record_key: RecordKey
    event_type: str
    schema_id: str
    columns: dict[str, Any]
    block_timestamp: int
    stored_at: float | None = None

    def value_of(self, column: str) -> Any:
        if column == "chain_id":
            return self.record_key[0]
        if column == "block_height":
            return self.record_key[1]
        if column == "tx_index":
            return self.record_key[2]
        if column == "log_index":
            return self.record_key[3]
        if column in ("event_type", "schema_id", "block_timestamp"):
            return getattr(self, column)
        return self.columns.get(column)

    def canonical(self) -> dict[str, Any]:
        """Stable dict for byte-equality comparisons; excludes stored_at,
        which is an ingestion-time diagnostic, not part of record identity."""
        return {
            "record_key": list(self.record_key),
            "event_type": self.event_type,
            "schema_id": self.schema_id,
            "block_timestamp": self.block_timestamp,
            "columns": {k: encode_value(v) for k, v in self.columns.items()},
        }

    def to_dict(self) -> dict[str, Any]:
        d = self.canonical()
        d["stored_at"] = self.stored_at
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MappedRecord":
        return cls(
            record_key=tuple(d["record_key"]),  # type: ignore[arg-type]
            event_type=d["event_type"],
            schema_id=d["schema_id"],
            columns={k: decode_value(v) for k, v in d["columns"].items()},
            block_timestamp=d["block_timestamp"],
            stored_at=d.get("stored_at"),
        )


def _transform(mapping: FieldMapping, value: Any) -> Any:
    t = mapping.transform
    if t is None or t == "rename":
        return value
    if t == "toString":
        if isinstance(value, bytes):
            return value.hex()
        if isinstance(value, bool):
            return "true" if value else "false"
        return str(value)
    if t == "toInteger":
        if isinstance(value, bool):
            return int(value)
        if isinstance(value, int):
            return value
        if isinstance(value, str):
            try:
                return int(value, 0)
            except ValueError:
                raise SchemaError(
                    f"cannot coerce {value!r} to integer for column "
                    f"'{mapping.target_column}'"
                ) from None
        raise SchemaError(f"cannot coerce {type(value).__name__} to integer")
    if isinstance(t, tuple) and t[0] == "scale":
        if isinstance(value, bool) or not isinstance(value, int):
            raise SchemaError(f"scale transform needs an integer source, got {value!r}")
        return value * t[1]
    raise SchemaError(f"unknown transform {t!r}")


def _check_type(mapping: FieldMapping, value: Any) -> Any:
    expected = mapping.target_type
    ok = (
        (expected == "string" and isinstance(value, str))
        or (expected == "integer" and isinstance(value, int) and not isinstance(value, bool))
        or (expected == "boolean" and isinstance(value, bool))
        or (expected == "bytes" and isinstance(value, bytes))
    )
    if not ok:
        raise SchemaError(
            f"column '{mapping.target_column}' expects {expected}, "
            f"got {type(value).__name__} ({value!r})"
        )
    return value


def apply_schema(event: "DecodedEvent", schema: MappingSchema) -> MappedRecord:
    """Map one decoded event to a store record under the given schema."""
    fields = dict(event.fields)
    columns: dict[str, Any] = {}
    for mapping in schema.field_mappings:
        if mapping.source_path not in fields:
            raise SchemaError(
                f"source path '{mapping.source_path}' not present in event "
                f"'{event.event_type}'"
            )
        value = _transform(mapping, fields[mapping.source_path])
        columns[mapping.target_column] = _check_type(mapping, value)
    return MappedRecord(
        record_key=event.identity,
        event_type=event.event_type,
        schema_id=schema.schema_id,
        columns=columns,
        block_timestamp=event.block_timestamp,
    )


@dataclass(frozen=True)
class QuerySpec:
    event_types: tuple[str, ...] | None = None
    filters: tuple[tuple[str, str, Any], ...] = ()
    sort: tuple[tuple[str, str], ...] = ()
    limit: int = 100
    offset: int | None = None
    cursor: str | None = None
    group_by: str | None = None
    aggregate: str | None = None         # count | min | max | sum
    aggregate_column: str | None = None  # required for min/max/sum


@dataclass
class QueryPage:
    records: list[MappedRecord] = field(default_factory=list)
    groups: list[tuple[Any, Any]] | None = None
    next_cursor: str | None = None


@dataclass
class PersistResult:
    inserted: int
    duplicates: int
    acked: list[MappedRecord] = field(default_factory=list)


def _encode_cursor(sort_values: list[Any], record_key: RecordKey) -> str:
    token = canonical_json(
        {"v": 1, "s": [encode_value(v) for v in sort_values], "k": list(record_key)}
    )
    return base64.urlsafe_b64encode(token.encode()).decode()


def _decode_cursor(token: str, n_sort: int) -> tuple[list[Any], RecordKey]:
    try:
        data = json.loads(base64.urlsafe_b64decode(token.encode()).decode())
        values = [decode_value(v) for v in data["s"]]
        key = tuple(data["k"])
        if data.get("v") != 1 or len(values) != n_sort or len(key) != 4:
            raise ValueError
        return values, key  # type: ignore[return-value]
    except Exception:
        raise QueryError("malformed cursor token") from None


class EventStore:
    """Embedded append-only record store with idempotent writes.

    The primary index is the record key; a secondary index per event type,
    ordered by block timestamp, narrows type-scoped queries. drop_hook is a
    test-only fault seam: records it selects are silently lost, which the
    per-job fetch checksum must then catch.
    """

    def __init__(
        self,
        path: str | Path,
        clock: Any = None,
        drop_hook: Callable[[MappedRecord], bool] | None = None,
    ):
        from chainsync.util import WallClock

        self._path = Path(path)
        self._clock = clock or WallClock()
        self.drop_hook = drop_hook
        self._records: dict[RecordKey, MappedRecord] = {}
        self._by_type: dict[str, list[tuple[int, RecordKey]]] = {}
        self._schemas: dict[str, MappingSchema] = {}
        self._type_schema: dict[str, str] = {}
        self._lock = threading.RLock()
        for entry in read_journal(self._path):
            rec = MappedRecord.from_dict(entry)
            if rec.record_key not in self._records:
                self._insert(rec)
        self._journal = JournalWriter(self._path)

    def _insert(self, record: MappedRecord) -> None:
        self._records[record.record_key] = record
        bisect.insort(
            self._by_type.setdefault(record.event_type, []),
            (record.block_timestamp, record.record_key),
        )

    # -- schema bookkeeping (column validation for queries) ------------------

    def bind_schema(self, event_type: str, schema: MappingSchema) -> None:
        with self._lock:
            self._schemas[schema.schema_id] = schema
            self._type_schema[event_type] = schema.schema_id

    def schema_for(self, event_type: str) -> MappingSchema | None:
        sid = self._type_schema.get(event_type)
        return self._schemas.get(sid) if sid else None

    # -- writes ---------------------------------------------------------------

    def persist(self, records: Sequence[MappedRecord]) -> PersistResult:
        """Idempotent set-union on record key; durable before returning."""
        inserted = 0
        duplicates = 0
        acked: list[MappedRecord] = []
        lines: list[dict[str, Any]] = []
        with self._lock:
            for rec in records:
                if self.drop_hook is not None and self.drop_hook(rec):
                    continue  # injected loss: no ack, no write
                existing = self._records.get(rec.record_key)
                if existing is not None:
                    duplicates += 1
                    acked.append(existing)
                    continue
                stamped = replace(rec, stored_at=self._clock.now())
                self._insert(stamped)
                lines.append(stamped.to_dict())
                inserted += 1
                acked.append(stamped)
            self._journal.append_many(lines)
        return PersistResult(inserted, duplicates, acked)

    # -- reads ----------------------------------------------------------------

    def __len__(self) -> int:
        return len(self._records)

    def get(self, key: RecordKey) -> MappedRecord | None:
        return self._records.get(key)

    def all_records(self) -> list[MappedRecord]:
        with self._lock:
            return sorted(self._records.values(), key=lambda r: r.record_key)

    def canonical_dump(self) -> list[str]:
        """Sorted canonical serialization of every record (equality oracle)."""
        with self._lock:
            return sorted(canonical_json(r.canonical()) for r in self._records.values())

    def _known_columns(self, event_types: tuple[str, ...] | None) -> set[str]:
        cols = set(BUILTIN_COLUMNS)
        if event_types:
            for t in event_types:
                schema = self.schema_for(t)
                if schema is not None:
                    cols.update(schema.columns)
        else:
            for schema in self._schemas.values():
                cols.update(schema.columns)
        return cols

    def _validate_spec(self, spec: QuerySpec) -> None:
        if spec.limit < 1:
            raise QueryError("limit must be >= 1")
        known = self._known_columns(spec.event_types)
        for col, op, _ in spec.filters:
            if op not in OPERATORS:
                raise QueryError(f"unknown operator '{op}'")
            if col not in known:
                raise QueryError(f"unknown column '{col}'")
        for col, direction in spec.sort:
            if direction not in ("asc", "desc"):
                raise QueryError(f"sort direction must be asc or desc, got '{direction}'")
            if col not in known:
                raise QueryError(f"unknown column '{col}'")
        if spec.group_by is not None:
            if spec.group_by not in known:
                raise QueryError(f"unknown column '{spec.group_by}'")
            agg = spec.aggregate or "count"
            if agg not in ("count", "min", "max", "sum"):
                raise QueryError(f"unknown aggregate '{agg}'")
            if agg != "count":
                if not spec.aggregate_column:
                    raise QueryError(f"aggregate '{agg}' needs aggregate_column")
                if spec.aggregate_column not in known:
                    raise QueryError(f"unknown column '{spec.aggregate_column}'")
            if spec.cursor is not None:
                raise QueryError("cursor pagination is not supported with group_by")

    @staticmethod
    def _matches(record: MappedRecord, filters: tuple[tuple[str, str, Any], ...]) -> bool:
        for col, op, arg in filters:
            value = record.value_of(col)
            if op == "=":
                if value != arg:
                    return False
            elif op == "!=":
                if value == arg:
                    return False
            elif op == "contains":
                if not isinstance(value, (str, bytes)):
                    return False
                try:
                    if arg not in value:
                        return False
                except TypeError:
                    return False
            else:
                ka, kb = order_key(value), order_key(arg)
                if ka[0] != kb[0]:
                    return False  # inequality across types never matches
                if op == "<" and not ka[1] < kb[1]:
                    return False
                if op == "<=" and not ka[1] <= kb[1]:
                    return False
                if op == ">" and not ka[1] > kb[1]:
                    return False
                if op == ">=" and not ka[1] >= kb[1]:
                    return False
        return True

    @staticmethod
    def _compare(
        a_vals: list[Any], a_key: RecordKey, b_vals: list[Any], b_key: RecordKey,
        directions: Sequence[str],
    ) -> int:
        for av, bv, direction in zip(a_vals, b_vals, directions):
            ka, kb = order_key(av), order_key(bv)
            if ka == kb:
                continue
            less = ka < kb
            if direction == "desc":
                less = not less
            return -1 if less else 1
        if a_key == b_key:
            return 0
        return -1 if a_key < b_key else 1

    def query(self, spec: QuerySpec) -> QueryPage:
        """Run a query against a consistent snapshot of committed records."""
        self._validate_spec(spec)
        with self._lock:
            if spec.event_types is not None:
                wanted = set(spec.event_types)
                candidates = [
                    self._records[key]
                    for t in sorted(wanted)
                    for _, key in self._by_type.get(t, [])
                ]
            else:
                candidates = list(self._records.values())
            rows = [r for r in candidates if self._matches(r, spec.filters)]

        if spec.group_by is not None:
            return self._grouped(spec, rows)

        directions = [d for _, d in spec.sort]
        def sort_values(r: MappedRecord) -> list[Any]:
            return [r.value_of(c) for c, _ in spec.sort]

        # deterministic total order: sort keys in spec order, record key breaks
        # ties; realized as stable passes from the least significant key up
        rows.sort(key=lambda r: r.record_key)
        for col, direction in reversed(spec.sort):
            rows.sort(
                key=lambda r, c=col: order_key(r.value_of(c)),
                reverse=direction == "desc",
            )

        start = 0
        if spec.cursor is not None:
            cur_vals, cur_key = _decode_cursor(spec.cursor, len(spec.sort))
            lo, hi = 0, len(rows)
            while lo < hi:  # first row strictly after the cursor position
                mid = (lo + hi) // 2
                r = rows[mid]
                if self._compare(sort_values(r), r.record_key, cur_vals, cur_key, directions) <= 0:
                    lo = mid + 1
                else:
                    hi = mid
            start = lo
        elif spec.offset:
            start = spec.offset

        page = rows[start : start + spec.limit]
        next_cursor = None
        if page and start + spec.limit < len(rows):
            last = page[-1]
            next_cursor = _encode_cursor(sort_values(last), last.record_key)
        return QueryPage(records=page, next_cursor=next_cursor)

    def _grouped(self, spec: QuerySpec, rows: list[MappedRecord]) -> QueryPage:
        agg = spec.aggregate or "count"
        buckets: dict[Any, list[MappedRecord]] = {}
        for r in rows:
            buckets.setdefault(r.value_of(spec.group_by), []).append(r)
        out: list[tuple[Any, Any]] = []
        for value in sorted(buckets, key=order_key):
            group = buckets[value]
            if agg == "count":
                out.append((value, len(group)))
                continue
            samples = [g.value_of(spec.aggregate_column) for g in group]
            samples = [s for s in samples if s is not None]
            if not samples:
                out.append((value, None))
            elif agg == "sum":
                if any(isinstance(s, bool) or not isinstance(s, int) for s in samples):
                    raise QueryError(f"sum needs integer column '{spec.aggregate_column}'")
                out.append((value, sum(samples)))
            elif agg == "min":
                out.append((value, min(samples, key=order_key)))
            else:
                out.append((value, max(samples, key=order_key)))
        start = spec.offset or 0
        return QueryPage(groups=out[start : start + spec.limit])

    def close(self) -> None:
        self._journal.close()
