"""Exception hierarchy shared across the package.

Every error that can cross the API boundary carries a stable ``code`` so
clients (and tests) can match on it without parsing messages.
"""

from __future__ import annotations


class ConveneError(Exception):
    """Base class; ``code`` is a stable machine-readable identifier."""

    code = "error"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.details = details


class ConfigParseError(ConveneError):
    code = "config_parse_error"

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}", path=path)
        self.path = path


class PermissionDenied(ConveneError):
    code = "permission_denied"


class EditFrozen(ConveneError):
    code = "edit_frozen"


class UnknownParticipant(ConveneError):
    code = "unknown_participant"


class UnknownPrivateId(ConveneError):
    code = "unknown_private_id"


class UnknownCohort(ConveneError):
    code = "unknown_cohort"


class UnknownExperiment(ConveneError):
    code = "unknown_experiment"


class GateBlocked(ConveneError):
    code = "gate_blocked"


class AnswerRequired(ConveneError):
    code = "answer_required"


class AlreadyTerminal(ConveneError):
    code = "already_terminal"


class IllegalAction(ConveneError):
    code = "illegal_action"


class MissingAnswer(ConveneError):
    """A grading call did not cover every question."""

    code = "missing_answer"

    def __init__(self, question_ids):
        super().__init__(f"missing answers for: {', '.join(question_ids)}")
        self.question_ids = list(question_ids)


class EmptyCohort(ConveneError):
    code = "empty_cohort"


class CohortLocked(ConveneError):
    code = "cohort_locked"


class DestinationLocked(ConveneError):
    code = "destination_locked"


class OfferExpired(ConveneError):
    code = "offer_expired"


class NoPendingOffer(ConveneError):
    code = "no_pending_offer"


class NotAMember(ConveneError):
    code = "not_a_member"


class CheckAlreadyPending(ConveneError):
    code = "check_already_pending"


class CheckNotPending(ConveneError):
    code = "check_not_pending"


class CancelledByPause(ConveneError):
    code = "cancelled_by_pause"


class MissingStageContext(ConveneError):
    code = "missing_stage_context"

    def __init__(self, stage_id: str):
        super().__init__(f"no data for referenced stage {stage_id!r}", stage_id=stage_id)
        self.stage_id = stage_id


class NoBallots(ConveneError):
    code = "no_ballots"


class SourceIncomplete(ConveneError):
    code = "source_incomplete"

    def __init__(self, stage_id: str):
        super().__init__(f"source stage {stage_id!r} not complete", stage_id=stage_id)
        self.stage_id = stage_id


class UnresolvedReference(ConveneError):
    code = "unresolved_reference"


class NoPayoutStage(ConveneError):
    code = "no_payout_stage"


class StorageFailure(ConveneError):
    code = "storage_failure"


class AuthFailure(ConveneError):
    code = "auth_failure"


class RateLimited(ConveneError):
    code = "rate_limited"


class ProviderTimeout(ConveneError):
    code = "provider_timeout"


class TransientProviderError(ConveneError):
    code = "transient_provider_error"


class ExhaustedRetries(ConveneError):
    code = "exhausted_retries"

    def __init__(self, attempts: int, last: Exception):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


RETRYABLE_PROVIDER_ERRORS = (RateLimited, ProviderTimeout, TransientProviderError)
