from convene.store.events import (
    EXPERIMENT_STREAM,
    SYSTEM_ACTOR,
    EventRecord,
    FileEventStore,
    MemoryEventStore,
    SnapshotStore,
)
from convene.store.export import build_archive, export_payout_csv
from convene.store.identity import IdentityRegistry
from convene.store.keys import KeyStore, load_master_key

__all__ = [
    "EXPERIMENT_STREAM",
    "SYSTEM_ACTOR",
    "EventRecord",
    "FileEventStore",
    "MemoryEventStore",
    "SnapshotStore",
    "IdentityRegistry",
    "KeyStore",
    "load_master_key",
    "build_archive",
    "export_payout_csv",
]
