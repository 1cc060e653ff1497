"""Independent reference implementations used to check the real engine.

Deliberately written in the dumbest possible style (recount everything from
scratch, no shared data structures with the engine) so a bug in the engine
cannot hide in the oracle.
"""

from __future__ import annotations

import json


def oracle_election_winner(ballots: list[tuple[str, tuple[str, ...]]], candidates: list[str]) -> str:
    """Brute-force pairwise-majority winner.

    ballots: list of (voter, ranking). Condorcet winner if one exists, else
    highest (wins - losses) Copeland score, ties to the smallest id.
    """

    def votes_preferring(a: str, b: str) -> int:
        count = 0
        for _voter, ranking in ballots:
            if a in ranking and b in ranking:
                if list(ranking).index(a) < list(ranking).index(b):
                    count += 1
        return count

    def beats(a: str, b: str) -> bool:
        return votes_preferring(a, b) > votes_preferring(b, a)

    for a in candidates:
        if all(beats(a, b) for b in candidates if b != a):
            return a

    best_score = None
    best_ids = []
    for a in candidates:
        score = 0
        for b in candidates:
            if b == a:
                continue
            if beats(a, b):
                score += 1
            if beats(b, a):
                score -= 1
        if best_score is None or score > best_score:
            best_score = score
            best_ids = [a]
        elif score == best_score:
            best_ids.append(a)
    return sorted(best_ids)[0]


def oracle_parse_structured(raw: str, field_types: dict[str, str]) -> dict | None:
    """Reference classifier for structured-output extraction.

    Returns the first schema-valid object found scanning left to right, or
    None when no brace position yields one. Mirrors the documented contract,
    not the engine's implementation.
    """
    decoder = json.JSONDecoder()
    for start in range(len(raw)):
        if raw[start] != "{":
            continue
        try:
            candidate, _ = decoder.raw_decode(raw, start)
        except ValueError:
            continue
        if not isinstance(candidate, dict):
            continue
        if _oracle_schema_ok(candidate, field_types):
            return candidate
    return None


def _oracle_schema_ok(obj: dict, field_types: dict[str, str]) -> bool:
    for name, ftype in field_types.items():
        if name not in obj:
            return False
        value = obj[name]
        if ftype == "bool" and not isinstance(value, bool):
            return False
        if ftype == "int" and (isinstance(value, bool) or not isinstance(value, int)):
            return False
        if ftype == "real" and (isinstance(value, bool) or not isinstance(value, (int, float))):
            return False
        if ftype == "text" and not isinstance(value, str):
            return False
    return True
