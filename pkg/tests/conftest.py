"""Shared fixtures: configs and runtime scaffolding used across the suite."""

from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from convene.model import parse_experiment_config


def survival_config_dict(
    cohort_size: int = 4,
    mediators: bool = True,
    wait_for_all_chat: bool = True,
) -> dict:
    """A seven-stage survival-planning experiment: pseudonym profile, brief,
    group chat with one mediator, leader election, scored leader task,
    reveal, payout tied to the elected leader's score."""
    quiz_questions = [
        {
            "id": f"q{i}",
            "kind": "multipleChoice",
            "prompt": f"Which item ranks higher? (round {i})",
            "options": [
                {"id": "mirror", "text": "Shaving mirror"},
                {"id": "map", "text": "Pacific map"},
            ],
            "correctAnswer": "mirror",
        }
        for i in range(1, 4)
    ]
    agents = [
        {
            "id": "agent-guide",
            "role": "mediator",
            "profile": {"displayName": "Guide", "avatar": "🧭"},
            "personaPrompt": "You keep the discussion moving and on topic.",
            "model": {"providerId": "scripted", "modelName": "default"},
            "wpm": 80,
        }
    ]
    return {
        "id": "exp-survival",
        "metadata": {
            "name": "Survival planning",
            "description": "Group ranking task with an elected leader",
            "publicVisibility": True,
        },
        "stages": [
            {
                "id": "profile",
                "kind": "Profile",
                "title": "Your identity",
                "kindParams": {"mode": "assignedPseudonym", "pseudonymSet": "animal"},
            },
            {
                "id": "brief",
                "kind": "Info",
                "title": "Scenario",
                "markdownBody": "Your boat sank. Rank the salvage items as a group.",
            },
            {
                "id": "chat",
                "kind": "GroupChat",
                "title": "Discuss",
                "ui": {"waitForAllParticipants": wait_for_all_chat},
                "kindParams": {"mediatorAgentIds": ["agent-guide"] if mediators else []},
            },
            {
                "id": "election",
                "kind": "RankingElection",
                "title": "Elect a leader",
                "ui": {"waitForAllParticipants": True},
                "kindParams": {"mode": "peers"},
            },
            {
                "id": "leader-task",
                "kind": "Survey",
                "title": "Leader task",
                "kindParams": {"questions": quiz_questions},
            },
            {
                "id": "reveal",
                "kind": "Reveal",
                "title": "Results",
                "ui": {"waitForAllParticipants": True},
                "kindParams": {"sources": ["election"]},
            },
            {
                "id": "payout",
                "kind": "Payout",
                "title": "Payment",
                "kindParams": {
                    "currencyUnit": "USD",
                    "items": [
                        {"kind": "fixedCompletion", "amountMinor": 500, "stageIds": ["chat"]},
                        {
                            "kind": "leaderPerformance",
                            "amountMinor": 100,
                            "electionStageId": "election",
                            "surveyStageId": "leader-task",
                        },
                    ],
                },
            },
        ],
        "agentTemplates": agents if mediators else [],
        "roles": {"owner@example.org": "creator"},
    }


@pytest.fixture
def survival_config():
    return parse_experiment_config(survival_config_dict())
