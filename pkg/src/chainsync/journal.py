"""Append-only JSON-line journals with fsync durability.

Every persistent piece of state in the service (registrations, cursors,
checksums, records, queue entries) is an append-only journal replayed at
startup. A torn final line is the expected artifact of a hard kill and is
ignored on replay; damage anywhere earlier means the file cannot be trusted
and loading refuses, naming the file.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Iterator

from chainsync.errors import CorruptJournalError
from chainsync.util import canonical_json


class JournalWriter:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")

    def append(self, entry: dict[str, Any]) -> None:
        self._fh.write(canonical_json(entry).encode("utf-8") + b"\n")
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def append_many(self, entries: list[dict[str, Any]]) -> None:
        if not entries:
            return
        data = b"".join(canonical_json(e).encode("utf-8") + b"\n" for e in entries)
        self._fh.write(data)
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self) -> None:
        try:
            self._fh.close()
        except ValueError:
            pass


def read_journal(path: str | Path) -> Iterator[dict[str, Any]]:
    """Replay a journal, tolerating only a torn final line."""
    path = Path(path)
    if not path.exists():
        return
    raw = path.read_bytes()
    if not raw:
        return
    lines = raw.split(b"\n")
    trailing = lines.pop()  # content after the last newline; b"" when clean
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            yield json.loads(line)
        except json.JSONDecodeError:
            if i == len(lines) - 1 and not trailing:
                # torn write of the final record, no newline made it either
                return
            raise CorruptJournalError(str(path), i + 1)
    if trailing.strip():
        try:
            yield json.loads(trailing)
        except json.JSONDecodeError:
            return  # torn final line from a hard kill
