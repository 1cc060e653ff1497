"""Identifier generation.

Two modes: secure random for live deployments, and a seeded stream for
simulations so two runs with the same seed mint identical ids.
"""

from __future__ import annotations

import random
import secrets

_PUBLIC_ALPHABET = "abcdefghjkmnpqrstuvwxyz23456789"  # no 0/O/1/l/i


class IdSource:
    """Mints the various id shapes used across the system."""

    def __init__(self, seed: int | None = None):
        self._rng = random.Random(seed) if seed is not None else None

    def _token_hex(self, nbytes: int) -> str:
        if self._rng is not None:
            return "".join(self._rng.choice("0123456789abcdef") for _ in range(nbytes * 2))
        return secrets.token_hex(nbytes)

    def private_id(self) -> str:
        """128-bit join-URL secret."""
        return self._token_hex(16)

    def public_id(self) -> str:
        """Short human-readable participant id, e.g. ``p-k7m2qx``."""
        rng = self._rng or secrets.SystemRandom()
        return "p-" + "".join(rng.choice(_PUBLIC_ALPHABET) for _ in range(6))

    def cohort_id(self) -> str:
        return "c-" + self._token_hex(4)

    def short_id(self, prefix: str) -> str:
        """Generic short id for offers, checks, alerts, messages, rounds."""
        return f"{prefix}-{self._token_hex(4)}"
