"""Exception types shared across the service."""

from __future__ import annotations


class ChainsyncError(Exception):
    """Base class for every error raised by this package."""


class UnknownChainError(ChainsyncError):
    pass


class UnknownEndpointError(ChainsyncError):
    pass


class UnknownRegistrationError(ChainsyncError):
    pass


class UnknownSubscriptionError(ChainsyncError):
    pass


class UnknownJobError(ChainsyncError):
    pass


class DuplicateRegistrationError(ChainsyncError):
    pass


class DuplicateSubscriptionError(ChainsyncError):
    pass


class DuplicateSchemaError(ChainsyncError):
    pass


class InvalidUrlError(ChainsyncError):
    pass


class MintError(ChainsyncError):
    pass


class ReorgError(ChainsyncError):
    """Reorg request violates its preconditions (bad depth, sporked chain)."""


class SporkRangeError(ChainsyncError):
    """A block range was requested from an endpoint that does not serve it.

    Carries the violating subrange so callers can report exactly which part
    of the request fell outside the endpoint's spork.
    """

    def __init__(self, message: str, endpoint_id: str, subrange: tuple[int, int]):
        super().__init__(message)
        self.endpoint_id = endpoint_id
        self.subrange = subrange


class FetchError(ChainsyncError):
    """Whole-request fetch failure, naming the subrange that failed."""

    def __init__(self, message: str, subrange: tuple[int, int] | None = None):
        super().__init__(message)
        self.subrange = subrange


class DecodeError(ChainsyncError):
    pass


class SchemaError(ChainsyncError):
    """Mapping-schema definition or application failure."""


class PersistenceError(ChainsyncError):
    pass


class QueryError(ChainsyncError):
    """Malformed query spec: unknown column, bad cursor, bad operator."""


class IncompleteBackfillError(ChainsyncError):
    pass


class ImmutableRecordError(ChainsyncError):
    """Attempt to change a checksum record whose verdicts are final."""


class CorruptJournalError(ChainsyncError):
    def __init__(self, path: str, line_no: int):
        super().__init__(f"corrupt journal {path}: line {line_no} is not valid")
        self.path = path
        self.line_no = line_no


class ConfigError(ChainsyncError):
    """Invalid service configuration; message names the offending field."""


class ScenarioError(ChainsyncError):
    pass
