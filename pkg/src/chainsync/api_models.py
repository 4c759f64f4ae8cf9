"""Pydantic request/response models for the HTTP API."""

from __future__ import annotations

from typing import Any

from pydantic import BaseModel, Field

from chainsync.registry import EventRegistration, WebhookSubscription
from chainsync.store import (
    FieldMapping,
    MappedRecord,
    MappingSchema,
    QueryPage,
    QuerySpec,
)
from chainsync.util import decode_value


class FieldMappingModel(BaseModel):
    target_column: str
    source_path: str
    target_type: str
    transform: str | dict[str, int] | None = None


class MappingSchemaModel(BaseModel):
    schema_id: str
    field_mappings: list[FieldMappingModel]
    timestamp_source: str = "blockTimestamp"

    def to_domain(self) -> MappingSchema:
        return MappingSchema.from_dict(self.model_dump())

    @classmethod
    def from_domain(cls, schema: MappingSchema) -> "MappingSchemaModel":
        return cls.model_validate(schema.to_dict())


class RegistrationCreate(BaseModel):
    chain_id: str
    contract_address: str
    event_signature: str
    init_block_height: int = Field(ge=0)
    mapping_schema: MappingSchemaModel


class BackfillStatus(BaseModel):
    planned: bool
    outstanding: list[tuple[int, int]]
    done: list[tuple[int, int]]
    complete: bool


class RegistrationOut(BaseModel):
    registration_id: str
    chain_id: str
    contract_address: str
    event_signature: str
    init_block_height: int
    synced_start_block_height: int
    synced_latest_block_height: int
    schema_id: str
    created_at: float
    halted_reason: str | None = None
    backfill: BackfillStatus | None = None

    @classmethod
    def from_domain(
        cls, reg: EventRegistration, backfill: BackfillStatus | None = None
    ) -> "RegistrationOut":
        data = reg.to_dict()
        data.pop("last_scanned_hash", None)
        return cls(**data, backfill=backfill)


class SubscriptionCreate(BaseModel):
    registration_id: str
    url: str


class SubscriptionOut(BaseModel):
    subscription_id: str
    registration_id: str
    url: str
    active: bool
    created_at: float
    secret: str | None = None  # only disclosed on creation

    @classmethod
    def from_domain(cls, sub: WebhookSubscription, with_secret: bool = False) -> "SubscriptionOut":
        data = sub.to_dict()
        if not with_secret:
            data.pop("secret")
        return cls(**data)


class QueryRequest(BaseModel):
    event_types: list[str] | None = None
    filters: list[tuple[str, str, Any]] = []
    sort: list[tuple[str, str]] = []
    limit: int = Field(default=100, ge=1)
    offset: int | None = Field(default=None, ge=0)
    cursor: str | None = None
    group_by: str | None = None
    aggregate: str | None = None
    aggregate_column: str | None = None

    def to_domain(self) -> QuerySpec:
        return QuerySpec(
            event_types=tuple(self.event_types) if self.event_types is not None else None,
            filters=tuple((c, op, decode_value(v)) for c, op, v in self.filters),
            sort=tuple((c, d) for c, d in self.sort),
            limit=self.limit,
            offset=self.offset,
            cursor=self.cursor,
            group_by=self.group_by,
            aggregate=self.aggregate,
            aggregate_column=self.aggregate_column,
        )


class RecordOut(BaseModel):
    record_key: tuple[str, int, int, int]
    event_type: str
    schema_id: str
    block_timestamp: int
    stored_at: float | None
    columns: dict[str, Any]

    @classmethod
    def from_domain(cls, record: MappedRecord) -> "RecordOut":
        return cls.model_validate(record.to_dict())


class QueryResponse(BaseModel):
    records: list[RecordOut] = []
    groups: list[tuple[Any, Any]] | None = None
    next_cursor: str | None = None

    @classmethod
    def from_domain(cls, page: QueryPage) -> "QueryResponse":
        return cls(
            records=[RecordOut.from_domain(r) for r in page.records],
            groups=page.groups,
            next_cursor=page.next_cursor,
        )


class AlarmOut(BaseModel):
    alarm_id: int
    source: str
    detail: dict[str, Any]
    at: float


class ChainHealth(BaseModel):
    chain_id: str
    latest_height: int


class HealthOut(BaseModel):
    status: str
    chains: list[ChainHealth]
    registrations: int
    queue_pending: int


class ErrorOut(BaseModel):
    detail: str
