"""Encrypted at-rest custody of provider API keys.

Key material is encrypted with a Fernet master key supplied via the
environment (path to the key file), stored per (experimenter, providerId),
and resolved through opaque refs. Nothing in this module ever routes key
bytes toward the event store, exports, or participant payloads; callers only
see refs.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
from pathlib import Path

from cryptography.fernet import Fernet, InvalidToken

from convene.errors import AuthFailure, PermissionDenied, StorageFailure

MASTER_KEY_ENV = "CONVENE_MASTER_KEY_FILE"


def load_master_key(path: str | Path | None = None) -> bytes:
    """Fernet key from the given file, the env-named file, or ephemeral."""
    if path is None:
        env = os.environ.get(MASTER_KEY_ENV)
        if env is None:
            return Fernet.generate_key()
        path = env
    p = Path(path)
    if p.exists():
        return p.read_bytes().strip()
    key = Fernet.generate_key()
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(key + b"\n")
        p.chmod(0o600)
    except OSError as e:
        raise StorageFailure(f"cannot write master key: {e}") from e
    return key


class KeyStore:
    def __init__(self, path: str | Path | None = None, master_key: bytes | None = None) -> None:
        self._path = Path(path) if path is not None else None
        self._fernet = Fernet(master_key if master_key is not None else load_master_key())
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}  # ref -> encrypted key material
        self._owners: dict[str, tuple[str, str]] = {}  # ref -> (experimenter, providerId)
        if self._path is not None and self._path.exists():
            try:
                doc = json.loads(self._path.read_text(encoding="utf-8"))
                self._entries = doc["entries"]
                self._owners = {k: tuple(v) for k, v in doc["owners"].items()}
            except (OSError, ValueError, KeyError) as e:
                raise StorageFailure(f"corrupt key store: {e}") from e

    @staticmethod
    def _ref(experimenter: str, provider_id: str) -> str:
        digest = hashlib.sha256(f"{experimenter}\x00{provider_id}".encode()).digest()
        return "key-" + base64.urlsafe_b64encode(digest[:12]).decode().rstrip("=")

    def register(self, experimenter: str, provider_id: str, key_material: str) -> str:
        if not experimenter:
            raise PermissionDenied("key registration requires an authenticated experimenter")
        ref = self._ref(experimenter, provider_id)
        token = self._fernet.encrypt(key_material.encode("utf-8")).decode("ascii")
        with self._lock:
            self._entries[ref] = token
            self._owners[ref] = (experimenter, provider_id)
            self._save()
        return ref

    def resolve(self, ref: str, experimenter: str) -> str:
        """Decrypt for the owning experimenter only."""
        with self._lock:
            token = self._entries.get(ref)
            owner = self._owners.get(ref)
        if token is None or owner is None or owner[0] != experimenter:
            raise AuthFailure("key ref does not resolve for this experimenter")
        try:
            return self._fernet.decrypt(token.encode("ascii")).decode("utf-8")
        except InvalidToken as e:
            raise AuthFailure("key store master key mismatch") from e

    def _save(self) -> None:
        if self._path is None:
            return
        try:
            doc = {"entries": self._entries, "owners": {k: list(v) for k, v in self._owners.items()}}
            tmp = self._path.with_suffix(".tmp")
            tmp.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
            tmp.replace(self._path)
            self._path.chmod(0o600)
        except OSError as e:
            raise StorageFailure(f"key store write failed: {e}") from e
