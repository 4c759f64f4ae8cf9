"""chainsync - multi-chain event indexing service.

Synchronizes registered on-chain events from multiple (simulated) chains in
parallel, backfills history, persists schema-mapped records into an embedded
queryable store, verifies per-job integrity checksums, and reflects persisted
events to webhook subscribers through a durable queue.
"""

__version__ = "0.1.0"

from chainsync.errors import ChainsyncError

__all__ = ["ChainsyncError", "__version__"]
