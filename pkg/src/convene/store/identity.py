"""Private-to-public id registry.

Join links carry the private id; everything else in the system (events,
exports, stream frames, peer views) speaks public ids. Keeping the binding
here, outside the event log, means no export or replay path can leak it.
"""

from __future__ import annotations

import json
import threading
from pathlib import Path

from convene.errors import StorageFailure, UnknownPrivateId


class IdentityRegistry:
    def __init__(self, path: str | Path | None = None) -> None:
        self._path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._private_to_public: dict[str, str] = {}
        if self._path is not None and self._path.exists():
            try:
                self._private_to_public = json.loads(self._path.read_text(encoding="utf-8"))
            except (OSError, ValueError) as e:
                raise StorageFailure(f"corrupt identity registry: {e}") from e

    def bind(self, private_id: str, public_id: str) -> None:
        with self._lock:
            self._private_to_public[private_id] = public_id
            self._save()

    def resolve(self, private_id: str) -> str:
        with self._lock:
            public_id = self._private_to_public.get(private_id)
        if public_id is None:
            raise UnknownPrivateId("no participant for this link")
        return public_id

    def private_for(self, public_id: str) -> str | None:
        """Reverse lookup for live handles only; never exposed over the wire."""
        with self._lock:
            for private_id, bound in self._private_to_public.items():
                if bound == public_id:
                    return private_id
        return None

    def all_private_ids(self) -> list[str]:
        with self._lock:
            return list(self._private_to_public)

    def _save(self) -> None:
        if self._path is None:
            return
        try:
            tmp = self._path.with_suffix(".tmp")
            tmp.write_text(json.dumps(self._private_to_public, sort_keys=True), encoding="utf-8")
            tmp.replace(self._path)
        except OSError as e:
            raise StorageFailure(f"identity registry write failed: {e}") from e
