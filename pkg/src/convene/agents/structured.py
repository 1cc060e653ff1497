"""Extraction of structured agent output from raw model text.

Models wrap their JSON in prose, code fences, or multiple candidate objects.
The scanner tries every ``{`` in the text and accepts the first decoded
object that satisfies the schema; everything after the winning object is
ignored. Failures return a structured parse error instead of raising so the
caller can log the attempt and retry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from convene.model.types import MANDATORY_OUTPUT_FIELDS, StructuredField

_DECODER = json.JSONDecoder()


@dataclass(frozen=True)
class ParseOutcome:
    """Either ``record`` is set (success) or ``error`` is set, never both."""

    record: dict | None = None
    error: dict | None = None  # {offset, reason}
    raw: str = ""

    @property
    def ok(self) -> bool:
        return self.record is not None


def _type_ok(value: object, field_type: str) -> bool:
    if field_type == "bool":
        return isinstance(value, bool)
    if field_type == "int":
        return isinstance(value, int) and not isinstance(value, bool)
    if field_type == "real":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if field_type == "text":
        return isinstance(value, str)
    return False


def _check_candidate(candidate: object, schema: list[StructuredField]) -> str | None:
    """Return None when the candidate satisfies the schema, else a reason."""
    if not isinstance(candidate, dict):
        return "top-level value is not an object"
    mandatory = {name for name, _, _ in MANDATORY_OUTPUT_FIELDS}
    for spec in schema:
        if spec.fieldName in candidate:
            if not _type_ok(candidate[spec.fieldName], spec.fieldType):
                return f"field {spec.fieldName!r} is not of type {spec.fieldType}"
        elif spec.fieldName in mandatory:
            return f"mandatory field {spec.fieldName!r} is missing"
    return None


def parse_structured_output(raw: str, schema: list[StructuredField]) -> ParseOutcome:
    """Scan ``raw`` for the first JSON object that satisfies ``schema``.

    The reported error describes the nearest miss: the first decodable object
    that failed validation, or the absence of any decodable object.
    """
    first_reason: str | None = None
    first_offset = -1
    offset = raw.find("{")
    while offset != -1:
        try:
            candidate, _ = _DECODER.raw_decode(raw, offset)
        except ValueError:
            offset = raw.find("{", offset + 1)
            continue
        reason = _check_candidate(candidate, schema)
        if reason is None:
            return ParseOutcome(record=candidate, raw=raw)
        if first_reason is None:
            first_reason = reason
            first_offset = offset
        offset = raw.find("{", offset + 1)
    if first_reason is None:
        first_reason = "no JSON object found"
    return ParseOutcome(error={"offset": first_offset, "reason": first_reason}, raw=raw)
