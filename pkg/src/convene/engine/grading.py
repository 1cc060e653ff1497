"""Answer grading shared by comprehension gates and payout scoring."""

from __future__ import annotations

from convene.errors import MissingAnswer
from convene.model.types import SurveyQuestion, SurveyStageParams


def answer_matches(question: SurveyQuestion, value) -> bool:
    """Exact-match grading; checkbox answers compare as sets."""
    expected = question.correctAnswer
    if expected is None:
        return False
    if question.kind == "checkbox":
        if not isinstance(value, list) or not isinstance(expected, list):
            return False
        return sorted(map(str, value)) == sorted(map(str, expected))
    return value == expected


def grade_comprehension(params: SurveyStageParams, answers: dict) -> tuple[bool, dict[str, bool]]:
    """Grade a full submission; raise MissingAnswer when questions are uncovered."""
    missing = [q.id for q in params.questions if q.id not in answers]
    if missing:
        raise MissingAnswer(missing)
    per_question = {q.id: answer_matches(q, answers[q.id]) for q in params.questions}
    return all(per_question.values()), per_question


def count_correct(params: SurveyStageParams, answers: dict) -> int:
    """Number of scored questions answered correctly (unscored questions skip)."""
    return sum(
        1
        for q in params.questions
        if q.correctAnswer is not None and q.id in answers and answer_matches(q, answers[q.id])
    )


def scored_question_count(params: SurveyStageParams) -> int:
    return sum(1 for q in params.questions if q.correctAnswer is not None)
