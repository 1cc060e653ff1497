"""LLM-backed agent participants and mediators."""

from convene.agents.prompts import (
    PSEUDONYM_GUARD_TEXT,
    SYSTEM_INSTRUCTIONS_TEXT,
    assemble_prompt,
    default_prompt_plan,
    render_chat_history,
)
from convene.agents.structured import ParseOutcome, parse_structured_output

__all__ = [
    "PSEUDONYM_GUARD_TEXT",
    "SYSTEM_INSTRUCTIONS_TEXT",
    "ParseOutcome",
    "assemble_prompt",
    "default_prompt_plan",
    "parse_structured_output",
    "render_chat_history",
]
