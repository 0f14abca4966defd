"""Header catalog, database registry and lease-based lock service."""

from .catalog import CREATE_CRASH_POINTS, DEFAULT_TTL, Catalog, CatalogStats
from .journal import Journal
from .types import (
    CREATE_RESOURCE,
    Backend,
    ChunkResult,
    DatabaseEntry,
    DbState,
    EventHeader,
    EventId,
    Holder,
    LockLease,
    LockMode,
    StorageLocator,
    db_resource,
    run_resource,
)

__all__ = [
    "Backend", "Catalog", "CatalogStats", "ChunkResult", "CREATE_CRASH_POINTS", "CREATE_RESOURCE",
    "DEFAULT_TTL",
    "DatabaseEntry", "DbState", "EventHeader", "EventId", "Holder", "Journal", "LockLease",
    "LockMode", "StorageLocator", "db_resource", "run_resource",
]
