"""Experimenter authentication: bearer tokens against a static allowlist.

The allowlist file maps experimenter identity (an email) to the SHA-256 hex
of that person's bearer token, so the file at rest never holds a usable
credential. Per-experiment roles come from the experiment config; this layer
only answers "which identity is calling".
"""

from __future__ import annotations

import hashlib
import hmac
import json
from pathlib import Path

from convene.errors import AuthFailure


def token_hash(token: str) -> str:
    return hashlib.sha256(token.encode("utf-8")).hexdigest()


class Allowlist:
    def __init__(self, identities: dict[str, str] | None = None):
        # identity -> sha256 hex of the bearer token
        self._identities = dict(identities or {})

    @classmethod
    def load(cls, path: str | Path) -> "Allowlist":
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as e:
            raise AuthFailure(f"cannot read allowlist {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise AuthFailure(f"allowlist {path} is not valid JSON: {e}") from e
        if not isinstance(doc, dict) or any(
            not isinstance(k, str) or not isinstance(v, str) for k, v in doc.items()
        ):
            raise AuthFailure(f"allowlist {path} must map identity to token hash")
        return cls(doc)

    def identity_for_token(self, token: str) -> str | None:
        """Constant-time comparison against every entry; None when unknown."""
        digest = token_hash(token)
        found = None
        for identity, expected in self._identities.items():
            if hmac.compare_digest(digest, expected):
                found = identity
        return found

    def add(self, identity: str, token: str) -> None:
        self._identities[identity] = token_hash(token)

    def to_dict(self) -> dict[str, str]:
        return dict(self._identities)


def write_allowlist(path: str | Path, tokens: dict[str, str]) -> None:
    """Persist identity -> token pairs as identity -> hash."""
    doc = {identity: token_hash(token) for identity, token in tokens.items()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
