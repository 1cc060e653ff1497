"""Real-time orchestration for synchronous multi-party studies.

Cohorts of human and LLM participants move through configurable stage
sequences (chat, surveys, elections, reveals, payouts) under wait gates and
timers, with every change captured in an append-only event log.
"""

__version__ = "0.1.0"
