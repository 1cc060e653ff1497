"""Command handlers and live orchestration for one experiment.

The runtime is the only writer to the event store. Commands validate against
current state, decide every timestamp / random draw / minted id, and append
events; the pure reducer in ``state.py`` applies them. A re-entrant lock
serializes all mutations, so any read taken under the lock sees a consistent
cross-cohort snapshot (membership is always exactly one cohort per
participant at every event boundary).

Time only moves through ``tick``: timers, deliveries, offer expiries,
attention deadlines, and lobby matching all fire there, which lets a virtual
clock drive a whole session deterministically. ``next_due`` reports the
earliest pending deadline so simulations can jump straight to it.
"""

from __future__ import annotations

import hashlib
import random
import threading
from pathlib import Path

from convene.agents.prompts import assemble_prompt
from convene.agents.structured import parse_structured_output
from convene.clock import Clock, WallClock
from convene.engine.grading import grade_comprehension
from convene.engine.matching import match_lobby
from convene.engine.records import Cohort, ParticipantRecord
from convene.engine.state import ExperimentState, apply_event, initial_state, replay
from convene.errors import (
    AlreadyTerminal,
    AnswerRequired,
    AuthFailure,
    CheckAlreadyPending,
    CheckNotPending,
    CohortLocked,
    ConfigParseError,
    ConveneError,
    DestinationLocked,
    EditFrozen,
    GateBlocked,
    IllegalAction,
    MissingAnswer,
    NoPendingOffer,
    OfferExpired,
    PermissionDenied,
    SourceIncomplete,
    UnknownCohort,
    UnknownParticipant,
    UnresolvedReference,
)
from convene.ids import IdSource
from convene.llm.gateway import (
    ChatCompletionRequest,
    ChatMessagePart,
    Gateway,
    ProviderConfig,
)
from convene.model.parse import (
    experiment_config_to_dict,
    parse_experiment_config,
    stage_to_dict,
)
from convene.model.pseudonyms import PSEUDONYM_SETS
from convene.model.types import (
    AgentSpec,
    ChatStageParams,
    ProfileStageParams,
    RankingElectionParams,
    RevealStageParams,
    RoleAssignmentParams,
    StageConfig,
    StageKind,
    SurveyQuestion,
    SurveyStageParams,
    TransferStageParams,
)
from convene.model.validate import has_errors, validate_experiment_config
from convene.presence import PresenceStore
from convene.store.events import (
    EXPERIMENT_STREAM,
    SYSTEM_ACTOR,
    EventRecord,
    FileEventStore,
    MemoryEventStore,
    SnapshotStore,
)
from convene.store.export import build_archive, export_payout_csv
from convene.store.identity import IdentityRegistry
from convene.store.keys import KeyStore
from convene.tally import build_reveal, payout_sheet

MAX_AGENT_STAGE_ATTEMPTS = 3
ATTENTION_DEADLINE_SECONDS = 60


def _word_count(text: str) -> int:
    return len(text.split())


def select_round_winner(
    selection: str,
    seed_key: str,
    candidates: list[tuple[str, AgentSpec, dict]],
) -> tuple[str, AgentSpec, dict] | None:
    """Pick the one raiser who speaks this round.

    wpmWeighted draws proportionally to typing speed from a seeded stream so
    replay picks the same winner; fastestWins takes the shortest simulated
    typing time for the drafted response, ties to the smaller agent id.
    """
    if not candidates:
        return None
    if selection == "fastestWins":
        return min(
            candidates,
            key=lambda c: (_word_count(str(c[2].get("response", ""))) / max(c[1].wpm, 1e-9), c[0]),
        )
    rng = random.Random(seed_key)
    total = sum(c[1].wpm for c in candidates)
    roll = rng.random() * total
    cumulative = 0.0
    for candidate in candidates:
        cumulative += candidate[1].wpm
        if roll < cumulative:
            return candidate
    return candidates[-1]


def _seed_int(seed: str) -> int:
    return int.from_bytes(hashlib.sha256(seed.encode("utf-8")).digest()[:8], "big")


class ExperimentRuntime:
    """One live experiment: its state, its log, and its side effects."""

    def __init__(
        self,
        store: MemoryEventStore,
        state: ExperimentState,
        registry: IdentityRegistry,
        seed: str,
        clock: Clock | None = None,
        gateway: Gateway | None = None,
        keystore: KeyStore | None = None,
        snapshots: SnapshotStore | None = None,
    ):
        self._store = store
        self._state = state
        self._registry = registry
        self._seed = seed
        self._clock = clock or WallClock()
        self._gateway = gateway
        self._keystore = keystore
        self._snapshots = snapshots
        self._lock = threading.RLock()
        self._ids = IdSource(seed=_seed_int(seed))
        self.presence = PresenceStore(state.config.settings)
        self._key_refs: dict[str, str] = {}  # providerId -> keystore ref
        self._provider_endpoints: dict[str, str] = {}
        self._last_match: dict[str, float] = {}  # cohortId -> last matching pass
        self._draining = False  # re-entrancy guard for the agent drain loop

    # -- construction --------------------------------------------------------

    @classmethod
    def create(
        cls,
        config_doc,
        actor: str,
        clock: Clock | None = None,
        data_dir: str | Path | None = None,
        seed: str | None = None,
        gateway: Gateway | None = None,
    ) -> "ExperimentRuntime":
        config = parse_experiment_config(config_doc)
        report = validate_experiment_config(config)
        if has_errors(report):
            first = next(i for i in report if i.severity == "error")
            raise ConfigParseError(first.path, first.message)
        if config.role_of(actor) != "creator":
            raise PermissionDenied(f"{actor} is not the configured creator")
        if seed is None:
            seed = IdSource().short_id("seed")
        clock = clock or WallClock()
        if data_dir is not None:
            base = Path(data_dir)
            base.mkdir(parents=True, exist_ok=True)
            store: MemoryEventStore = FileEventStore(base)
            registry = IdentityRegistry(base / "identity.json")
            keystore = KeyStore(base / "keys.json")
            snapshots = SnapshotStore(base)
        else:
            store = MemoryEventStore()
            registry = IdentityRegistry()
            keystore = KeyStore()
            snapshots = SnapshotStore()
        runtime = cls(
            store,
            initial_state(),
            registry,
            seed,
            clock=clock,
            gateway=gateway,
            keystore=keystore,
            snapshots=snapshots,
        )
        runtime._append(
            EXPERIMENT_STREAM,
            "experiment_created",
            {"configDoc": experiment_config_to_dict(config), "seed": seed},
            actor=actor,
        )
        runtime.presence = PresenceStore(runtime._state.config.settings)
        return runtime

    @classmethod
    def open(
        cls,
        data_dir: str | Path,
        clock: Clock | None = None,
        gateway: Gateway | None = None,
    ) -> "ExperimentRuntime":
        """Rebuild from the latest snapshot plus the log tail."""
        base = Path(data_dir)
        store = FileEventStore(base)
        snapshots = SnapshotStore(base)
        found = snapshots.latest()
        state = replay(store.all_events(), snapshot=found[1] if found else None)
        seed = ""
        for event in store.all_events():
            if event.kind == "experiment_created":
                seed = event.payload.get("seed", "")
                break
        runtime = cls(
            store,
            state,
            IdentityRegistry(base / "identity.json"),
            seed or "unseeded",
            clock=clock,
            gateway=gateway,
            keystore=KeyStore(base / "keys.json"),
            snapshots=snapshots,
        )
        runtime.presence = PresenceStore(state.config.settings)
        for event in store.all_events():
            if event.kind == "api_key_registered":
                runtime._key_refs[event.payload["providerId"]] = event.payload["ref"]
            elif event.kind == "provider_configured":
                runtime._provider_endpoints[event.payload["providerId"]] = event.payload["endpointUrl"]
        return runtime

    # -- internals -----------------------------------------------------------

    @property
    def state(self) -> ExperimentState:
        return self._state

    @property
    def store(self) -> MemoryEventStore:
        return self._store

    @property
    def clock(self) -> Clock:
        return self._clock

    @property
    def experiment_id(self) -> str:
        return self._state.config.id

    @property
    def seed(self) -> str:
        return self._seed

    def subscribe(self, fn):
        return self._store.subscribe(fn)

    def resolve_private_id(self, private_id: str) -> str:
        """Join-link secret -> publicId; raises UnknownPrivateId otherwise."""
        return self._registry.resolve(private_id)

    def require_role(self, actor: str, at_least: str) -> None:
        self._require_role(actor, at_least)

    def _append(self, stream_id: str, kind: str, payload: dict, actor: str = SYSTEM_ACTOR) -> EventRecord:
        event = self._store.append(stream_id, kind, payload, actor, self._clock.now())
        apply_event(self._state, event)
        if self._snapshots is not None and event.globalSeq % SnapshotStore.INTERVAL == 0:
            self._snapshots.save(event.globalSeq, self._state.to_dict())
        return event

    def _require_role(self, actor: str, at_least: str) -> None:
        if not self._state.config.has_role(actor, at_least):
            raise PermissionDenied(f"{actor} lacks the {at_least} role")

    def _participant(self, public_id: str) -> ParticipantRecord:
        record = self._state.participants.get(public_id)
        if record is None:
            raise UnknownParticipant(f"no participant {public_id!r}")
        return record

    def _cohort(self, cohort_id: str) -> Cohort:
        cohort = self._state.cohorts.get(cohort_id)
        if cohort is None:
            raise UnknownCohort(f"no cohort {cohort_id!r}")
        return cohort

    def _stage_of(self, record: ParticipantRecord) -> StageConfig | None:
        stages = self._state.config.stages
        if record.currentStageIndex >= len(stages):
            return None
        return stages[record.currentStageIndex]

    # -- experimenter commands ------------------------------------------------

    def update_metadata(self, actor: str, patch: dict) -> dict:
        with self._lock:
            self._require_role(actor, "editor")
            allowed = {
                "name",
                "description",
                "publicVisibility",
                "prolificRedirectUrl",
                "prolificCompletionCode",
                "template",
            }
            unknown = sorted(set(patch) - allowed)
            if unknown:
                raise IllegalAction(f"metadata patch has unknown keys: {', '.join(unknown)}")
            self._append(EXPERIMENT_STREAM, "metadata_updated", {"patch": dict(patch)}, actor=actor)
            return {"metadata": experiment_config_to_dict(self._state.config)["metadata"]}

    def replace_stages(self, actor: str, config_doc) -> None:
        """Full config swap; only possible while no participant has arrived."""
        with self._lock:
            self._require_role(actor, "editor")
            if self._state.stageListFrozen:
                raise EditFrozen("stage list is frozen once a participant exists")
            config = parse_experiment_config(config_doc)
            report = validate_experiment_config(config)
            if has_errors(report):
                first = next(i for i in report if i.severity == "error")
                raise ConfigParseError(first.path, first.message)
            self._append(
                EXPERIMENT_STREAM,
                "config_replaced",
                {"configDoc": experiment_config_to_dict(config)},
                actor=actor,
            )

    def register_api_key(self, actor: str, provider_id: str, key_material: str, endpoint_url: str = "") -> str:
        with self._lock:
            self._require_role(actor, "editor")
            if self._keystore is None:
                raise AuthFailure("no key store attached")
            ref = self._keystore.register(actor, provider_id, key_material)
            self._key_refs[provider_id] = ref
            if endpoint_url:
                self._provider_endpoints[provider_id] = endpoint_url
                self._append(
                    EXPERIMENT_STREAM,
                    "provider_configured",
                    {"providerId": provider_id, "endpointUrl": endpoint_url},
                    actor=actor,
                )
            self._append(
                EXPERIMENT_STREAM,
                "api_key_registered",
                {"providerId": provider_id, "ref": ref},
                actor=actor,
            )
            return ref

    def create_cohort(self, actor: str, is_lobby: bool = False) -> str:
        with self._lock:
            self._require_role(actor, "editor")
            cohort_id = self._ids.cohort_id()
            while cohort_id in self._state.cohorts:
                cohort_id = self._ids.cohort_id()
            self._append(
                cohort_id,
                "cohort_created",
                {"cohortId": cohort_id, "createdAt": self._clock.now(), "isLobby": is_lobby},
                actor=actor,
            )
            return cohort_id

    def lock_cohort(self, actor: str, cohort_id: str, locked: bool = True) -> None:
        with self._lock:
            self._require_role(actor, "editor")
            self._cohort(cohort_id)
            self._append(cohort_id, "cohort_locked", {"locked": locked}, actor=actor)

    def _assigned_profile(self, cohort: Cohort) -> dict:
        """Deterministic pseudonym pick for assigned-identity experiments."""
        for stage in self._state.config.stages:
            params = stage.kindParams
            if isinstance(params, ProfileStageParams) and params.mode == "assignedPseudonym":
                names = PSEUDONYM_SETS[params.pseudonymSet or "animal"]
                rng = random.Random(f"{self._seed}:{cohort.id}:pseudonyms")
                order = rng.sample(range(len(names)), len(names))
                taken = len(cohort.memberPublicIds)
                name, avatar = names[order[taken % len(names)]]
                repeat = taken // len(names)
                display = name if repeat == 0 else f"{name} {repeat + 1}"
                return {"displayName": display, "avatar": avatar}
        return {}

    def mint_participants(
        self,
        actor: str,
        cohort_id: str,
        count: int = 1,
        external_ids: list[str] | None = None,
    ) -> list[dict]:
        """Create participant slots; each returns a one-time join link secret."""
        with self._lock:
            self._require_role(actor, "editor")
            cohort = self._cohort(cohort_id)
            if cohort.locked:
                raise CohortLocked(f"cohort {cohort_id} is locked")
            minted = []
            for i in range(count):
                public_id = self._ids.public_id()
                while public_id in self._state.participants:
                    public_id = self._ids.public_id()
                private_id = self._ids.private_id()
                self._registry.bind(private_id, public_id)
                external = external_ids[i] if external_ids and i < len(external_ids) else None
                self._append(
                    cohort_id,
                    "participant_created",
                    {
                        "publicId": public_id,
                        "arrivalSeq": self._state.arrivalCounter + 1,
                        "externalId": external,
                        "profile": self._assigned_profile(cohort),
                    },
                    actor=actor,
                )
                record = self._state.participants[public_id]
                record.privateId = private_id
                minted.append({"privateId": private_id, "publicId": public_id})
            self._react_to_cohort(cohort_id)
            return minted

    def add_agent_participant(self, actor: str, cohort_id: str, template_id: str) -> str:
        with self._lock:
            self._require_role(actor, "editor")
            cohort = self._cohort(cohort_id)
            if cohort.locked:
                raise CohortLocked(f"cohort {cohort_id} is locked")
            template = self._state.config.agent_by_id(template_id)
            if template is None or template.role != "participant":
                raise IllegalAction(f"{template_id!r} is not a participant agent template")
            public_id = self._ids.public_id()
            while public_id in self._state.participants:
                public_id = self._ids.public_id()
            profile = self._assigned_profile(cohort) or {
                "displayName": template.profile.get("displayName", template_id),
                "avatar": template.profile.get("avatar", ""),
            }
            self._append(
                cohort_id,
                "participant_created",
                {
                    "publicId": public_id,
                    "arrivalSeq": self._state.arrivalCounter + 1,
                    "externalId": None,
                    "profile": profile,
                    "isAgent": True,
                    "agentTemplateId": template_id,
                },
                actor=actor,
            )
            self._react_to_cohort(cohort_id)
            self._drain_agents()
            return public_id

    def boot_participant(self, actor: str, public_id: str, reason: str = "facilitator") -> None:
        with self._lock:
            self._require_role(actor, "editor")
            record = self._participant(public_id)
            if record.terminal:
                raise AlreadyTerminal(f"{public_id} is already {record.status}")
            self._append(
                record.cohortId,
                "participant_booted",
                {"publicId": public_id, "reason": reason},
                actor=actor,
            )
            self._react_to_cohort(record.cohortId)
            self._drain_agents()

    def create_transfer(self, actor: str, public_id: str, to_cohort_id: str) -> dict:
        with self._lock:
            self._require_role(actor, "editor")
            record = self._participant(public_id)
            if record.terminal:
                raise AlreadyTerminal(f"{public_id} is already {record.status}")
            destination = self._cohort(to_cohort_id)
            if destination.locked:
                raise DestinationLocked(f"cohort {to_cohort_id} is locked")
            existing = self._state.offers.get(public_id)
            if existing is not None and existing.state == "pending":
                raise IllegalAction(f"{public_id} already has a pending offer")
            now = self._clock.now()
            expires = now + self._state.config.settings.transferOfferExpirySeconds
            self._append(
                to_cohort_id,
                "transfer_offer_created",
                {
                    "publicId": public_id,
                    "fromCohortId": record.cohortId,
                    "toCohortId": to_cohort_id,
                    "expiresAt": expires,
                },
                actor=actor,
            )
            return self._state.offers[public_id].to_dict()

    def send_attention_check(self, actor: str, public_id: str, deadline_seconds: int = ATTENTION_DEADLINE_SECONDS) -> str:
        with self._lock:
            self._require_role(actor, "editor")
            record = self._participant(public_id)
            if record.terminal:
                raise AlreadyTerminal(f"{public_id} is already {record.status}")
            check = self._state.attention.get(public_id)
            if check is not None and check.get("state") == "pending":
                raise CheckAlreadyPending(f"{public_id} already has a pending check")
            check_id = self._ids.short_id("chk")
            self._append(
                record.cohortId,
                "attention_check_sent",
                {
                    "publicId": public_id,
                    "checkId": check_id,
                    "sentAt": self._clock.now(),
                    "deadlineSeconds": deadline_seconds,
                },
                actor=actor,
            )
            return check_id

    def message_participants(
        self,
        actor: str,
        text: str,
        cohort_id: str | None = None,
        public_id: str | None = None,
    ) -> None:
        """Facilitator support message; log-only, fanned out over streams."""
        with self._lock:
            self._require_role(actor, "editor")
            if public_id is not None:
                stream = self._participant(public_id).cohortId
            elif cohort_id is not None:
                stream = self._cohort(cohort_id).id
            else:
                raise IllegalAction("facilitator message needs a cohort or participant target")
            self._append(
                stream,
                "facilitator_messaged",
                {
                    "cohortId": cohort_id,
                    "publicId": public_id,
                    "text": text,
                    "sentAt": self._clock.now(),
                },
                actor=actor,
            )

    def resolve_alert(self, actor: str, alert_id: str, response: str = "") -> None:
        with self._lock:
            self._require_role(actor, "editor")
            if alert_id not in self._state.alerts:
                raise IllegalAction(f"no alert {alert_id!r}")
            self._append(
                EXPERIMENT_STREAM,
                "alert_resolved",
                {"alertId": alert_id, "resolvedAt": self._clock.now(), "facilitatorResponse": response},
                actor=actor,
            )

    def pause_agent(self, actor: str, cohort_id: str, agent_id: str, paused: bool = True) -> None:
        with self._lock:
            self._require_role(actor, "editor")
            cohort = self._cohort(cohort_id)
            binding = self._state.agents.get(cohort_id, {}).get(agent_id)
            if binding is None:
                raise IllegalAction(f"no agent {agent_id!r} in cohort {cohort_id}")
            self._append(cohort_id, "agent_paused", {"agentId": agent_id, "paused": paused}, actor=actor)
            if paused:
                for key, chat in cohort.chat.items():
                    pending = chat.pendingDelivery
                    if pending is not None and pending["agentId"] == agent_id:
                        # The undelivered draft stays in the log; it just never lands.
                        self._append(
                            cohort_id,
                            "agent_delivery_cancelled",
                            {
                                "stageId": pending["stageId"],
                                "chatKey": key,
                                "messageId": pending["messageId"],
                                "reason": "cancelled_by_pause",
                            },
                            actor=actor,
                        )
            else:
                self._trigger_rounds(cohort_id)
            self._drain_agents()

    def edit_agent_template(
        self,
        actor: str,
        template_id: str,
        persona_prompt: str | None = None,
        wpm: float | None = None,
    ) -> None:
        """Live-edit an agent template; affects every future call and delivery."""
        with self._lock:
            self._require_role(actor, "editor")
            if self._state.config.agent_by_id(template_id) is None:
                raise IllegalAction(f"no agent template {template_id!r}")
            payload: dict = {"templateId": template_id}
            if persona_prompt is not None:
                payload["personaPrompt"] = persona_prompt
            if wpm is not None:
                if wpm <= 0:
                    raise IllegalAction("wpm must be positive")
                payload["wpm"] = wpm
            self._append(EXPERIMENT_STREAM, "agent_spec_updated", payload, actor=actor)

    # -- participant commands --------------------------------------------------

    def join(self, private_id: str) -> dict:
        """Resolve a join link; the first resolve marks arrival."""
        with self._lock:
            public_id = self._registry.resolve(private_id)
            record = self._participant(public_id)
            now = self._clock.now()
            if record.joinedAt is None:
                cohort = self._cohort(record.cohortId)
                if cohort.locked:
                    raise CohortLocked(f"cohort {record.cohortId} is locked")
                self._append(
                    record.cohortId,
                    "participant_joined",
                    {"publicId": public_id, "joinedAt": now},
                    actor=public_id,
                )
            self.presence.record_activity(public_id, now)
            return self.participant_view(public_id)

    def heartbeat(self, public_id: str) -> dict:
        with self._lock:
            record = self._participant(public_id)
            now = self._clock.now()
            self.presence.record_heartbeat(public_id, now)
            cohort_indices = [
                m.currentStageIndex
                for m in self._state.active_members(record.cohortId)
                if not m.isAgent
            ]
            return {
                "serverTime": now,
                "presence": self.presence.derive(
                    public_id, record.currentStageIndex, cohort_indices, now
                ).to_dict(),
            }

    def _require_live(self, public_id: str) -> ParticipantRecord:
        record = self._participant(public_id)
        if record.terminal:
            raise AlreadyTerminal(f"{public_id} is already {record.status}")
        return record

    def _validate_survey_answers(
        self,
        questions: list[SurveyQuestion],
        answers: dict,
        subjects: list[str] | None = None,
    ) -> dict:
        """Check coverage and per-kind well-formedness; returns the cleaned map."""
        if not isinstance(answers, dict):
            raise AnswerRequired("survey answers must be an object keyed by question id")
        expected: list[tuple[str, SurveyQuestion]] = []
        if subjects is None:
            expected = [(q.id, q) for q in questions]
        else:
            expected = [(f"{q.id}:{s}", q) for q in questions for s in subjects]
        missing = [key for key, _ in expected if key not in answers or answers[key] in (None, "")]
        if missing:
            raise MissingAnswer(missing)
        for key, question in expected:
            value = answers[key]
            if question.kind == "multipleChoice":
                if value not in {o["id"] for o in question.options}:
                    raise IllegalAction(f"answer {key!r} must be one of the option ids")
            elif question.kind == "checkbox":
                ids = {o["id"] for o in question.options}
                if not isinstance(value, list) or not set(value) <= ids:
                    raise IllegalAction(f"answer {key!r} must be a list of option ids")
            elif question.kind == "scale":
                bounds = question.scaleBounds
                if (
                    not isinstance(value, int)
                    or isinstance(value, bool)
                    or bounds is None
                    or not bounds.min <= value <= bounds.max
                ):
                    raise IllegalAction(f"answer {key!r} must be an integer within the scale bounds")
            elif not isinstance(value, str):
                raise IllegalAction(f"answer {key!r} must be text")
        return {key: answers[key] for key, _ in expected}

    def _survey_subjects(self, record: ParticipantRecord, params: SurveyStageParams) -> list[str]:
        cohort = self._cohort(record.cohortId)
        subjects = sorted(
            pid
            for pid in cohort.memberPublicIds
            if self._state.participants[pid].status != "booted"
        )
        if params.excludeSelf:
            subjects = [s for s in subjects if s != record.publicId]
        return subjects

    def submit_answer(self, public_id: str, answer: dict | None = None, as_actor: str | None = None) -> dict:
        """Advance one stage; the stage kind dictates what the answer must hold."""
        with self._lock:
            record = self._require_live(public_id)
            if record.status == "transferPending":
                raise IllegalAction("a pending transfer offer must be answered first")
            stage = self._stage_of(record)
            if stage is None:
                raise IllegalAction("all stages already completed")
            cohort = self._cohort(record.cohortId)
            if not self._state.gate_open(cohort, record.currentStageIndex):
                raise GateBlocked(f"stage {stage.id!r} is waiting for the group")
            now = self._clock.now()
            self.presence.record_activity(public_id, now)
            result = self._apply_stage_answer(record, stage, cohort, answer, actor=as_actor or public_id)
            if result.get("advanced"):
                self._after_advance(record)
                self._drain_agents()
            return result

    def _apply_stage_answer(
        self,
        record: ParticipantRecord,
        stage: StageConfig,
        cohort: Cohort,
        answer: dict | None,
        actor: str,
        timed_out: bool = False,
    ) -> dict:
        params = stage.kindParams
        payload_answer: dict | None = None
        passed: bool | None = None

        if stage.kind == StageKind.TERMS_OF_SERVICE:
            if not timed_out and not (isinstance(answer, dict) and answer.get("acknowledged") is True):
                raise AnswerRequired("terms must be acknowledged")
            payload_answer = {"acknowledged": True} if not timed_out else None

        elif stage.kind == StageKind.PROFILE:
            assert isinstance(params, ProfileStageParams)
            if params.mode == "selfChosen" and not timed_out:
                if not isinstance(answer, dict) or not str(answer.get("displayName", "")).strip():
                    raise AnswerRequired("a display name is required")
                profile_patch = {
                    "publicId": record.publicId,
                    "displayName": str(answer["displayName"]).strip(),
                    "avatar": str(answer.get("avatar", "")),
                    "pronouns": str(answer.get("pronouns", "")),
                }
                self._append(record.cohortId, "profile_updated", profile_patch, actor=actor)
                payload_answer = {k: v for k, v in profile_patch.items() if k != "publicId"}

        elif stage.kind in (StageKind.SURVEY, StageKind.SURVEY_PER_PARTICIPANT):
            assert isinstance(params, SurveyStageParams)
            if not timed_out:
                subjects = (
                    self._survey_subjects(record, params)
                    if stage.kind == StageKind.SURVEY_PER_PARTICIPANT
                    else None
                )
                payload_answer = self._validate_survey_answers(params.questions, answer or {}, subjects)
            else:
                payload_answer = answer or {}

        elif stage.kind == StageKind.COMPREHENSION:
            assert isinstance(params, SurveyStageParams)
            if timed_out:
                # A timer never waives comprehension: record the timeout but hold.
                return {"advanced": False, "timedOut": True}
            cleaned = self._validate_survey_answers(params.questions, answer or {})
            ok, per_question = grade_comprehension(params, cleaned)
            attempt = self._state.failedAttempts.get(f"{record.publicId}/{stage.id}", 0) + 1
            if not ok:
                self._append(
                    record.cohortId,
                    "answer_rejected",
                    {
                        "publicId": record.publicId,
                        "stageId": stage.id,
                        "perQuestion": per_question,
                        "attempt": attempt,
                    },
                    actor=actor,
                )
                return {"advanced": False, "passed": False, "perQuestion": per_question, "attempt": attempt}
            payload_answer = cleaned
            passed = True

        elif stage.kind == StageKind.RANKING_ELECTION:
            assert isinstance(params, RankingElectionParams)
            if not timed_out:
                ranking = (answer or {}).get("ranking")
                if not isinstance(ranking, list) or not all(isinstance(r, str) for r in ranking):
                    raise AnswerRequired("a ranking list is required")
                expected = set(self._state.election_candidates(cohort, stage.id))
                if params.mode == "peers" and not params.selfVoteAllowed:
                    expected.discard(record.publicId)
                if set(ranking) != expected or len(ranking) != len(expected):
                    raise IllegalAction("ranking must be a permutation of the eligible ids")
                self._append(
                    record.cohortId,
                    "ballot_cast",
                    {"stageId": stage.id, "publicId": record.publicId, "ranking": list(ranking)},
                    actor=actor,
                )
                payload_answer = {"ranking": list(ranking)}

        elif stage.kind in (StageKind.GROUP_CHAT, StageKind.PRIVATE_CHAT):
            if not timed_out and not self._state.chat_quorum_met(cohort, stage.id, record.publicId):
                raise GateBlocked("the conversation has not reached its end-chat quorum")

        elif stage.kind == StageKind.TRANSFER:
            raise IllegalAction("transfer stages advance when a transfer executes")

        elif stage.kind == StageKind.REVEAL:
            if not timed_out and stage.id not in cohort.reveals:
                raise GateBlocked("reveal data is not ready yet")

        elif stage.kind == StageKind.PAYOUT:
            if not timed_out and stage.id not in cohort.payouts:
                raise GateBlocked("payout data is not ready yet")

        # Info and RoleAssignment need nothing beyond acknowledgment.

        to_index = record.currentStageIndex + 1
        completed = to_index >= len(self._state.config.stages)
        payload = {
            "publicId": record.publicId,
            "stageId": stage.id,
            "fromIndex": record.currentStageIndex,
            "toIndex": to_index,
            "completed": completed,
        }
        if payload_answer is not None or timed_out:
            payload["answer"] = payload_answer
            payload["timedOut"] = timed_out
        if passed is not None:
            payload["passed"] = passed
            payload["attempt"] = self._state.failedAttempts.get(f"{record.publicId}/{stage.id}", 0) + 1
        self._append(record.cohortId, "participant_advanced", payload, actor=actor)
        out = {"advanced": True, "stageIndex": to_index, "completed": completed}
        if completed:
            out["redirectUrl"] = self._state.config.metadata.prolificRedirectUrl
            out["completionCode"] = self._state.config.metadata.prolificCompletionCode
        return out

    def send_chat_message(self, public_id: str, text: str, as_actor: str | None = None) -> dict:
        with self._lock:
            record = self._require_live(public_id)
            stage = self._stage_of(record)
            if stage is None or stage.kind not in (StageKind.GROUP_CHAT, StageKind.PRIVATE_CHAT):
                raise IllegalAction("not at a conversation stage")
            cohort = self._cohort(record.cohortId)
            if not self._state.gate_open(cohort, record.currentStageIndex):
                raise GateBlocked(f"stage {stage.id!r} is waiting for the group")
            text = str(text)
            if not text.strip():
                raise AnswerRequired("an empty message cannot be sent")
            now = self._clock.now()
            self.presence.record_activity(public_id, now)
            chat_key = self._state.chat_key(stage.id, public_id)
            message_id = self._ids.short_id("msg")
            self._append(
                record.cohortId,
                "chat_posted",
                {
                    "stageId": stage.id,
                    "chatKey": chat_key,
                    "messageId": message_id,
                    "senderPublicId": public_id,
                    "displayName": record.profile.displayName or public_id,
                    "avatar": record.profile.avatar,
                    "text": text,
                    "sentAt": now,
                    "deliveredAt": now,
                    "senderKind": "participant",
                },
                actor=as_actor or public_id,
            )
            self._maybe_start_round(record.cohortId, stage, chat_key)
            return {"messageId": message_id, "deliveredAt": now}

    def toggle_ready_to_end(self, public_id: str, ready: bool = True, as_actor: str | None = None) -> dict:
        with self._lock:
            record = self._require_live(public_id)
            stage = self._stage_of(record)
            if stage is None or stage.kind not in (StageKind.GROUP_CHAT, StageKind.PRIVATE_CHAT):
                raise IllegalAction("not at a conversation stage")
            chat_key = self._state.chat_key(stage.id, public_id)
            self._append(
                record.cohortId,
                "ready_toggled",
                {"stageId": stage.id, "chatKey": chat_key, "publicId": public_id, "ready": bool(ready)},
                actor=as_actor or public_id,
            )
            cohort = self._cohort(record.cohortId)
            return {"quorumMet": self._state.chat_quorum_met(cohort, stage.id, public_id)}

    def respond_transfer(self, public_id: str, accept: bool, as_actor: str | None = None) -> dict:
        with self._lock:
            record = self._require_live(public_id)
            offer = self._state.offers.get(public_id)
            if offer is None or offer.state != "pending":
                raise NoPendingOffer(f"{public_id} has no pending offer")
            now = self._clock.now()
            self.presence.record_activity(public_id, now)
            if now >= offer.expiresAt:
                self._append(
                    offer.toCohortId,
                    "transfer_offer_expired",
                    {"publicId": public_id},
                    actor=SYSTEM_ACTOR,
                )
                raise OfferExpired("the transfer offer has expired")
            if not accept:
                self._append(offer.toCohortId, "transfer_declined", {"publicId": public_id}, actor=as_actor or public_id)
                return {"state": "declined"}
            destination = self._cohort(offer.toCohortId)
            if destination.locked:
                raise DestinationLocked(f"cohort {offer.toCohortId} is locked")
            stage = self._stage_of(record)
            advance_to = (
                record.currentStageIndex + 1
                if stage is not None and stage.kind == StageKind.TRANSFER
                else None
            )
            self._append(
                offer.toCohortId,
                "transfer_executed",
                {
                    "publicId": public_id,
                    "fromCohortId": offer.fromCohortId,
                    "toCohortId": offer.toCohortId,
                    "advanceToIndex": advance_to,
                },
                actor=as_actor or public_id,
            )
            self._react_to_cohort(offer.fromCohortId)
            self._react_to_cohort(offer.toCohortId)
            self._drain_agents()
            return {"state": "accepted", "cohortId": offer.toCohortId}

    def acknowledge_attention(self, public_id: str, as_actor: str | None = None) -> dict:
        with self._lock:
            record = self._participant(public_id)
            check = self._state.attention.get(public_id)
            if check is None or check.get("state") != "pending":
                raise CheckNotPending(f"{public_id} has no pending attention check")
            now = self._clock.now()
            self.presence.record_activity(public_id, now)
            on_time = now <= check["sentAt"] + check["deadlineSeconds"]
            outcome = "passed" if on_time else "failed"
            self._append(
                record.cohortId,
                "attention_check_resolved",
                {"publicId": public_id, "checkId": check["id"], "outcome": outcome, "resolvedAt": now},
                actor=as_actor or public_id,
            )
            if not on_time:
                self._notify_attention_failure(record, check["id"])
            return {"outcome": outcome}

    def raise_alert(self, public_id: str, message: str, as_actor: str | None = None) -> str:
        with self._lock:
            record = self._participant(public_id)
            alert_id = self._ids.short_id("alert")
            self._append(
                record.cohortId,
                "alert_raised",
                {
                    "alertId": alert_id,
                    "publicId": public_id,
                    "message": str(message),
                    "raisedAt": self._clock.now(),
                },
                actor=as_actor or public_id,
            )
            return alert_id

    def _notify_attention_failure(self, record: ParticipantRecord, check_id: str) -> None:
        """Failing a check notifies the facilitator; it never boots by itself."""
        self._append(
            record.cohortId,
            "alert_raised",
            {
                "alertId": f"attn-{check_id}",
                "publicId": record.publicId,
                "message": f"{record.publicId} failed an attention check; consider booting.",
                "raisedAt": self._clock.now(),
            },
            actor=SYSTEM_ACTOR,
        )

    # -- reactions --------------------------------------------------------------

    def _after_advance(self, record: ParticipantRecord) -> None:
        stage = self._stage_of(record)
        cohort = self._cohort(record.cohortId)
        # When this very arrival opens a waitForAll gate, _react_to_cohort
        # triggers the round; doubling it here would query every agent twice
        # in the same instant. This path covers ungated chats and arrivals
        # into a gate that opened earlier.
        gate_was_open = stage is not None and (
            not stage.ui.waitForAllParticipants or stage.id in cohort.gateOpenedAt
        )
        self._react_to_cohort(record.cohortId)
        if (
            stage is not None
            and stage.kind in (StageKind.GROUP_CHAT, StageKind.PRIVATE_CHAT)
            and gate_was_open
            and self._state.gate_open(cohort, record.currentStageIndex)
        ):
            self._maybe_start_round(
                record.cohortId, stage, self._state.chat_key(stage.id, record.publicId)
            )
        if stage is not None and stage.kind == StageKind.TRANSFER:
            self._run_matching(record.cohortId)

    def _react_to_cohort(self, cohort_id: str) -> None:
        """Open any gate that just became satisfied, then build arrival data."""
        cohort = self._state.cohorts.get(cohort_id)
        if cohort is None:
            return
        config = self._state.config
        for index, stage in enumerate(config.stages):
            if not stage.ui.waitForAllParticipants:
                continue
            if stage.id in cohort.gateOpenedAt:
                continue
            members = self._state.active_members(cohort_id)
            if not members:
                continue
            if all(m.currentStageIndex >= index for m in members) and any(
                m.currentStageIndex == index for m in members
            ):
                self._append(
                    cohort_id,
                    "gate_opened",
                    {"stageId": stage.id, "openedAt": self._clock.now()},
                    actor=SYSTEM_ACTOR,
                )
                if stage.kind in (StageKind.GROUP_CHAT, StageKind.PRIVATE_CHAT):
                    self._trigger_rounds(cohort_id, only_stage=stage)
        self._build_arrivals(cohort_id)

    def _build_arrivals(self, cohort_id: str) -> None:
        """Materialize reveal/payout/role data for stages members stand at."""
        cohort = self._state.cohorts.get(cohort_id)
        if cohort is None:
            return
        config = self._state.config
        members = self._state.active_members(cohort_id)
        for index, stage in enumerate(config.stages):
            if not any(m.currentStageIndex == index for m in members):
                continue
            if not self._state.gate_open(cohort, index):
                continue
            eligible = [
                m
                for m in self._state.cohort_members(cohort_id)
                if m.status != "booted"
            ]
            if stage.kind == StageKind.REVEAL and stage.id not in cohort.reveals:
                assert isinstance(stage.kindParams, RevealStageParams)
                try:
                    snapshot = build_reveal(stage, config, cohort, eligible)
                except SourceIncomplete:
                    continue
                self._append(
                    cohort_id,
                    "reveal_built",
                    {"stageId": stage.id, "snapshot": snapshot},
                    actor=SYSTEM_ACTOR,
                )
            elif stage.kind == StageKind.PAYOUT and stage.id not in cohort.payouts:
                if not all(m.currentStageIndex >= index for m in members):
                    # Rows freeze once; wait until every live member's inputs
                    # (completions, quiz scores) are final.
                    continue
                try:
                    rows = payout_sheet(stage, config, cohort, eligible, self._seed)
                except UnresolvedReference:
                    continue
                self._append(
                    cohort_id,
                    "payout_computed",
                    {"stageId": stage.id, "rows": rows},
                    actor=SYSTEM_ACTOR,
                )
            elif stage.kind == StageKind.ROLE_ASSIGNMENT and stage.id not in cohort.roleAssignments:
                assert isinstance(stage.kindParams, RoleAssignmentParams)
                ordered = sorted(members, key=lambda m: m.arrivalSeq)
                roles = stage.kindParams.roles
                assignments = {
                    m.publicId: roles[i % len(roles)].roleId for i, m in enumerate(ordered)
                }
                self._append(
                    cohort_id,
                    "role_assigned",
                    {"stageId": stage.id, "assignments": assignments},
                    actor=SYSTEM_ACTOR,
                )

    # -- lobby matching -----------------------------------------------------------

    def _waiting_at_transfer(self, cohort_id: str) -> tuple[StageConfig | None, list[ParticipantRecord]]:
        config = self._state.config
        waiting = []
        stage_found: StageConfig | None = None
        for record in self._state.active_members(cohort_id):
            if record.status != "active":
                continue
            stage = self._stage_of(record)
            if stage is not None and stage.kind == StageKind.TRANSFER:
                waiting.append(record)
                stage_found = stage
        return stage_found, waiting

    def _run_matching(self, cohort_id: str) -> None:
        stage, waiting = self._waiting_at_transfer(cohort_id)
        if stage is None or not waiting:
            return
        cohort = self._state.cohorts.get(cohort_id)
        if cohort is None or not self._state.gate_open(cohort, self._state.config.stage_index(stage.id)):
            return
        params = stage.kindParams
        assert isinstance(params, TransferStageParams)
        now = self._clock.now()
        self._last_match[cohort_id] = now
        outcome = match_lobby(
            waiting,
            params,
            now,
            {r.publicId: r.stageArrivedAt for r in waiting},
        )
        expiry = self._state.config.settings.transferOfferExpirySeconds
        for group in outcome.groups:
            new_cohort_id = self._ids.cohort_id()
            while new_cohort_id in self._state.cohorts:
                new_cohort_id = self._ids.cohort_id()
            self._append(
                new_cohort_id,
                "cohort_created",
                {"cohortId": new_cohort_id, "createdAt": now, "isLobby": False},
                actor=SYSTEM_ACTOR,
            )
            for public_id in group:
                self._append(
                    new_cohort_id,
                    "transfer_offer_created",
                    {
                        "publicId": public_id,
                        "fromCohortId": cohort_id,
                        "toCohortId": new_cohort_id,
                        "expiresAt": now + expiry,
                    },
                    actor=SYSTEM_ACTOR,
                )
        for public_id in outcome.timed_out:
            self._append(
                cohort_id,
                "participant_booted",
                {"publicId": public_id, "reason": "lobbyTimeout"},
                actor=SYSTEM_ACTOR,
            )
        if outcome.timed_out:
            self._react_to_cohort(cohort_id)

    # -- agents --------------------------------------------------------------------

    def _template_for(self, binding_template_id: str) -> AgentSpec | None:
        spec = self._state.config.agent_by_id(binding_template_id)
        return spec.normalized() if spec is not None else None

    def _attached_agents(self, cohort_id: str, stage: StageConfig, chat_key: str) -> list[tuple[str, AgentSpec]]:
        """Mediators configured for the stage plus agent participants standing
        at it, deterministic order, paused excluded."""
        params = stage.kindParams
        mediator_templates = params.mediatorAgentIds if isinstance(params, ChatStageParams) else []
        stage_index = self._state.config.stage_index(stage.id)
        out: list[tuple[str, AgentSpec]] = []
        for agent_id, binding in sorted(self._state.agents.get(cohort_id, {}).items()):
            if binding.paused:
                continue
            template = self._template_for(binding.templateId)
            if template is None:
                continue
            record = self._state.participants.get(agent_id)
            if record is not None:
                # Agent participant: attached only while standing at this stage,
                # and for private chats only to its own transcript.
                if record.terminal or record.currentStageIndex != stage_index:
                    continue
                if stage.kind == StageKind.PRIVATE_CHAT and chat_key != self._state.chat_key(stage.id, agent_id):
                    continue
                out.append((agent_id, template))
            elif binding.templateId in mediator_templates:
                out.append((agent_id, template))
        return out

    def _members_at_stage(self, cohort_id: str, stage: StageConfig, chat_key: str) -> list[ParticipantRecord]:
        stage_index = self._state.config.stage_index(stage.id)
        members = [
            m
            for m in self._state.active_members(cohort_id)
            if m.currentStageIndex == stage_index
        ]
        if stage.kind == StageKind.PRIVATE_CHAT:
            own = chat_key.split("/", 1)[1] if "/" in chat_key else ""
            members = [m for m in members if m.publicId == own]
        return members

    def _provider_config(self, template: AgentSpec) -> ProviderConfig:
        model = template.model
        return ProviderConfig(
            providerId=model.providerId,
            modelName=model.modelName,
            endpointUrl=self._provider_endpoints.get(model.providerId, ""),
            authKeyRef=self._key_refs.get(model.providerId),
            samplingParams={
                "temperature": model.samplingParams.temperature,
                "maxOutputTokens": model.samplingParams.maxOutputTokens,
            },
        )

    def _call_agent(
        self,
        cohort_id: str,
        agent_id: str,
        template: AgentSpec,
        stage: StageConfig,
        chat_key: str | None,
        purpose: str,
        round_id: int | None = None,
    ) -> tuple[dict | None, dict]:
        """One gateway call plus its parse; always logged, never raises."""
        cohort = self._cohort(cohort_id)
        members = [m for m in self._state.cohort_members(cohort_id) if m.status != "booted"]
        binding = self._state.agents.get(cohort_id, {}).get(agent_id)
        chat = cohort.chat.get(chat_key) if chat_key else None
        log: dict = {
            "agentId": agent_id,
            "templateId": template.id,
            "stageId": stage.id,
            "chatKey": chat_key,
            "purpose": purpose,
            "roundId": round_id,
            "ok": False,
        }
        try:
            prompt = assemble_prompt(
                template,
                self._state.config,
                stage,
                cohort,
                members,
                chat,
                persona_override=binding.promptOverride if binding else None,
            )
        except ConveneError as exc:
            log["error"] = {"code": exc.code, "message": str(exc)}
            self._append(cohort_id, "agent_call_logged", log, actor=SYSTEM_ACTOR)
            return None, log
        log["prompt"] = prompt
        if self._gateway is None or not self._gateway.has_provider(template.model.providerId):
            log["error"] = {"code": "no_provider", "message": template.model.providerId}
            self._append(cohort_id, "agent_call_logged", log, actor=SYSTEM_ACTOR)
            return None, log
        request = ChatCompletionRequest(
            messages=[ChatMessagePart(role="user", content=prompt)],
            samplingParams=dict(self._provider_config(template).samplingParams),
        )
        try:
            response = self._gateway.complete(self._provider_config(template), request)
        except ConveneError as exc:
            log["error"] = {"code": exc.code, "message": str(exc)}
            self._append(cohort_id, "agent_call_logged", log, actor=SYSTEM_ACTOR)
            return None, log
        log["raw"] = response.content
        log["latencyMs"] = response.latencyMs
        log["attempts"] = response.attempts
        outcome = parse_structured_output(response.content, template.structuredOutputSchema)
        if not outcome.ok:
            log["parseError"] = outcome.error
            self._append(cohort_id, "agent_call_logged", log, actor=SYSTEM_ACTOR)
            return None, log
        log["ok"] = True
        log["parsed"] = outcome.record
        self._append(cohort_id, "agent_call_logged", log, actor=SYSTEM_ACTOR)
        return outcome.record, log

    def _passes_response_gate(self, template: AgentSpec, parsed: dict) -> bool:
        gate = template.responseGate
        if gate is None:
            return True
        value = parsed.get(gate.fieldName)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            return False
        return value >= gate.threshold

    def _trigger_rounds(self, cohort_id: str, only_stage: StageConfig | None = None) -> None:
        cohort = self._state.cohorts.get(cohort_id)
        if cohort is None:
            return
        stages = [only_stage] if only_stage is not None else self._state.config.stages
        for stage in stages:
            if stage.kind not in (StageKind.GROUP_CHAT, StageKind.PRIVATE_CHAT):
                continue
            index = self._state.config.stage_index(stage.id)
            if not self._state.gate_open(cohort, index):
                continue
            if stage.kind == StageKind.GROUP_CHAT:
                keys = [stage.id]
            else:
                keys = [
                    self._state.chat_key(stage.id, m.publicId)
                    for m in self._state.active_members(cohort_id)
                    if m.currentStageIndex == index
                ]
            for key in keys:
                self._maybe_start_round(cohort_id, stage, key)

    def _maybe_start_round(self, cohort_id: str, stage: StageConfig, chat_key: str) -> None:
        """Hand-raising: query every attached agent once, pick one winner."""
        cohort = self._cohort(cohort_id)
        chat = cohort.chat.get(chat_key)
        if chat is not None and chat.pendingDelivery is not None:
            if not chat.roundPending:
                self._append(
                    cohort_id,
                    "agent_round_deferred",
                    {"stageId": stage.id, "chatKey": chat_key},
                    actor=SYSTEM_ACTOR,
                )
            return
        index = self._state.config.stage_index(stage.id)
        if not self._state.gate_open(cohort, index):
            return
        if not self._members_at_stage(cohort_id, stage, chat_key):
            # A round needs someone at the stage to talk to.
            return
        agents = self._attached_agents(cohort_id, stage, chat_key)
        if not agents:
            return
        round_id = chat.nextRound if chat is not None else 0
        self._append(
            cohort_id,
            "agent_round_started",
            {"stageId": stage.id, "chatKey": chat_key, "roundId": round_id},
            actor=SYSTEM_ACTOR,
        )
        now = self._clock.now()
        candidates: list[tuple[str, AgentSpec, dict]] = []
        for agent_id, template in agents:
            parsed, _ = self._call_agent(
                cohort_id, agent_id, template, stage, chat_key, purpose="round", round_id=round_id
            )
            if parsed is None:
                continue
            chat_now = self._cohort(cohort_id).chat.get(chat_key)
            previous = chat_now.readyToEnd.get(agent_id) if chat_now else None
            if bool(parsed.get("readyToEndChat")) != bool(previous):
                self._append(
                    cohort_id,
                    "ready_toggled",
                    {
                        "stageId": stage.id,
                        "chatKey": chat_key,
                        "publicId": agent_id,
                        "ready": bool(parsed.get("readyToEndChat")),
                    },
                    actor=SYSTEM_ACTOR,
                )
            if parsed.get("shouldRespond") is True and self._passes_response_gate(template, parsed):
                candidates.append((agent_id, template, parsed))
        params = stage.kindParams
        selection = params.selection if isinstance(params, ChatStageParams) else "wpmWeighted"
        winner = select_round_winner(
            selection,
            f"{self._seed}:{cohort_id}:{chat_key}:round:{round_id}",
            candidates,
        )
        self._append(
            cohort_id,
            "round_selection",
            {
                "stageId": stage.id,
                "chatKey": chat_key,
                "roundId": round_id,
                "raises": [
                    {"agentId": c[0], "selected": winner is not None and c[0] == winner[0]}
                    for c in candidates
                ],
            },
            actor=SYSTEM_ACTOR,
        )
        if winner is None:
            return
        agent_id, template, parsed = winner
        params = stage.kindParams
        text = str(parsed.get("response", ""))
        words = _word_count(text)
        throttled = not (isinstance(params, ChatStageParams) and params.disableWpmThrottle)
        delay = (words / max(template.wpm, 1e-9)) * 60.0 if throttled else 0.0
        message_id = self._ids.short_id("msg")
        record = self._state.participants.get(agent_id)
        display = (
            record.profile.displayName
            if record is not None and record.profile.displayName
            else template.profile.get("displayName", template.id)
        )
        avatar = (
            record.profile.avatar
            if record is not None and record.profile.avatar
            else template.profile.get("avatar", "")
        )
        self._append(
            cohort_id,
            "agent_message_scheduled",
            {
                "stageId": stage.id,
                "chatKey": chat_key,
                "roundId": round_id,
                "agentId": agent_id,
                "templateId": template.id,
                "messageId": message_id,
                "senderPublicId": agent_id,
                "displayName": display,
                "avatar": avatar,
                "text": text,
                "wordCount": words,
                "scheduledAt": now,
                "deliverAt": now + delay,
            },
            actor=SYSTEM_ACTOR,
        )
        if delay <= 0:
            self._deliver(cohort_id, stage.id, chat_key, message_id)

    def _deliver(self, cohort_id: str, stage_id: str, chat_key: str, message_id: str) -> None:
        self._append(
            cohort_id,
            "agent_message_delivered",
            {"stageId": stage_id, "chatKey": chat_key, "messageId": message_id},
            actor=SYSTEM_ACTOR,
        )
        chat = self._state.cohorts[cohort_id].chat.get(chat_key)
        stage = self._state.config.stage_by_id(stage_id)
        if chat is not None and chat.roundPending and stage is not None:
            self._maybe_start_round(cohort_id, stage, chat_key)

    def _drain_agents(self) -> None:
        """Let agent participants finish every stage they can right now."""
        if self._gateway is None or self._draining:
            return
        self._draining = True
        try:
            progressed = True
            while progressed:
                progressed = False
                for public_id in sorted(self._state.participants):
                    record = self._state.participants[public_id]
                    if not record.isAgent or record.terminal or record.status != "active":
                        continue
                    if self._complete_agent_stage(record):
                        progressed = True
        finally:
            self._draining = False

    def _complete_agent_stage(self, record: ParticipantRecord) -> bool:
        stage = self._stage_of(record)
        if stage is None:
            return False
        cohort = self._cohort(record.cohortId)
        if not self._state.gate_open(cohort, record.currentStageIndex):
            return False
        binding = self._state.agents.get(record.cohortId, {}).get(record.publicId)
        if binding is not None and binding.paused:
            return False
        template = self._template_for(record.agentTemplateId or "")
        if template is None:
            return False
        attempts_key = f"{record.publicId}/{stage.id}"

        if stage.kind in (StageKind.GROUP_CHAT, StageKind.PRIVATE_CHAT):
            chat_key = self._state.chat_key(stage.id, record.publicId)
            chat = cohort.chat.get(chat_key)
            if chat is None or not chat.readyToEnd.get(record.publicId):
                return False
            if not self._state.chat_quorum_met(cohort, stage.id, record.publicId):
                return False
            self._apply_stage_answer(record, stage, cohort, None, actor=record.publicId)
            self._after_advance(record)
            return True

        if stage.kind == StageKind.TRANSFER:
            offer = self._state.offers.get(record.publicId)
            if offer is not None and offer.state == "pending":
                self.respond_transfer(record.publicId, accept=True)
                return True
            return False

        answer: dict | None = None
        if stage.kind == StageKind.TERMS_OF_SERVICE:
            answer = {"acknowledged": True}
        elif stage.kind == StageKind.PROFILE:
            params = stage.kindParams
            assert isinstance(params, ProfileStageParams)
            if params.mode == "selfChosen":
                answer = {
                    "displayName": record.profile.displayName
                    or template.profile.get("displayName", record.publicId),
                    "avatar": record.profile.avatar or template.profile.get("avatar", ""),
                }
        elif stage.kind in (
            StageKind.SURVEY,
            StageKind.SURVEY_PER_PARTICIPANT,
            StageKind.COMPREHENSION,
            StageKind.RANKING_ELECTION,
        ):
            if self._state.failedAttempts.get(attempts_key, 0) >= MAX_AGENT_STAGE_ATTEMPTS:
                return False
            parsed, _ = self._call_agent(
                record.cohortId, record.publicId, template, stage, None, purpose="stage"
            )
            if parsed is None:
                self._record_agent_stall(record, stage, attempts_key, "provider or parse failure")
                return False
            if stage.kind == StageKind.RANKING_ELECTION:
                answer = {"ranking": parsed.get("ranking")}
            else:
                raw_answers = parsed.get("answers")
                answer = raw_answers if isinstance(raw_answers, dict) else None
            if answer is None:
                self._record_agent_stall(record, stage, attempts_key, "output lacked the stage answer")
                return False
        elif stage.kind == StageKind.REVEAL and stage.id not in cohort.reveals:
            return False
        elif stage.kind == StageKind.PAYOUT and stage.id not in cohort.payouts:
            return False

        try:
            result = self._apply_stage_answer(record, stage, cohort, answer, actor=record.publicId)
        except ConveneError as exc:
            if isinstance(exc, GateBlocked):
                return False
            self._record_agent_stall(record, stage, attempts_key, f"{exc.code}: {exc}")
            return False
        if not result.get("advanced"):
            # Failed comprehension attempt: the rejection is already recorded.
            if self._state.failedAttempts.get(attempts_key, 0) >= MAX_AGENT_STAGE_ATTEMPTS:
                self._raise_stall_alert(record, stage)
            return True
        self._after_advance(record)
        return True

    def _record_agent_stall(self, record: ParticipantRecord, stage: StageConfig, attempts_key: str, why: str) -> None:
        attempt = self._state.failedAttempts.get(attempts_key, 0) + 1
        self._append(
            record.cohortId,
            "answer_rejected",
            {"publicId": record.publicId, "stageId": stage.id, "attempt": attempt, "reason": why},
            actor=SYSTEM_ACTOR,
        )
        if attempt >= MAX_AGENT_STAGE_ATTEMPTS:
            self._raise_stall_alert(record, stage)

    def _raise_stall_alert(self, record: ParticipantRecord, stage: StageConfig) -> None:
        alert_id = f"stall-{record.publicId}-{stage.id}"
        if alert_id in self._state.alerts:
            return
        self._append(
            record.cohortId,
            "alert_raised",
            {
                "alertId": alert_id,
                "publicId": record.publicId,
                "message": f"agent {record.publicId} is stalled at stage {stage.id}",
                "raisedAt": self._clock.now(),
            },
            actor=SYSTEM_ACTOR,
        )

    # -- time ---------------------------------------------------------------------

    def tick(self, now: float | None = None) -> int:
        """Fire everything due at or before ``now``; returns events appended."""
        with self._lock:
            if now is None:
                now = self._clock.now()
            before = self._store.head()
            self._expire_attention(now)
            self._expire_offers(now)
            self._deliver_due(now)
            self._fire_timers(now)
            self._match_due(now)
            self._drain_agents()
            return self._store.head() - before

    def _expire_attention(self, now: float) -> None:
        for public_id, check in list(self._state.attention.items()):
            if check.get("state") != "pending":
                continue
            # Inclusive: every deadline fires at its instant, so a tick at
            # exactly next_due() always makes progress.
            if now >= check["sentAt"] + check["deadlineSeconds"]:
                record = self._state.participants[public_id]
                self._append(
                    record.cohortId,
                    "attention_check_resolved",
                    {
                        "publicId": public_id,
                        "checkId": check["id"],
                        "outcome": "failed",
                        "resolvedAt": now,
                    },
                    actor=SYSTEM_ACTOR,
                )
                self._notify_attention_failure(record, check["id"])

    def _expire_offers(self, now: float) -> None:
        for public_id, offer in list(self._state.offers.items()):
            if offer.state == "pending" and now >= offer.expiresAt:
                self._append(
                    offer.toCohortId,
                    "transfer_offer_expired",
                    {"publicId": public_id},
                    actor=SYSTEM_ACTOR,
                )

    def _deliver_due(self, now: float) -> None:
        for cohort_id in sorted(self._state.cohorts):
            cohort = self._state.cohorts[cohort_id]
            for chat_key in sorted(cohort.chat):
                pending = cohort.chat[chat_key].pendingDelivery
                if pending is not None and now >= pending["deliverAt"]:
                    self._deliver(cohort_id, pending["stageId"], chat_key, pending["messageId"])

    def _timer_due_at(self, cohort: Cohort, record: ParticipantRecord) -> float | None:
        stage = self._stage_of(record)
        if stage is None or stage.ui.autoAdvanceTimerSeconds is None:
            return None
        if stage.ui.waitForAllParticipants:
            anchor = cohort.timerStartedAt.get(stage.id)
        else:
            anchor = cohort.timerStartedAt.get(f"{stage.id}:{record.publicId}")
        if anchor is None:
            return None
        return anchor + stage.ui.autoAdvanceTimerSeconds

    def _fire_timers(self, now: float) -> None:
        progressed = True
        while progressed:
            progressed = False
            for public_id in sorted(self._state.participants):
                record = self._state.participants[public_id]
                if record.terminal or record.status != "active":
                    continue
                cohort = self._state.cohorts.get(record.cohortId)
                if cohort is None:
                    continue
                due = self._timer_due_at(cohort, record)
                if due is None or now < due:
                    continue
                stage = self._stage_of(record)
                if stage is None:
                    continue
                if stage.kind == StageKind.COMPREHENSION:
                    # Soundness beats the timer: never advance without a pass.
                    continue
                if stage.kind == StageKind.TRANSFER:
                    continue
                result = self._apply_stage_answer(
                    record, stage, cohort, None, actor=SYSTEM_ACTOR, timed_out=True
                )
                if result.get("advanced"):
                    self._after_advance(record)
                    progressed = True

    def _match_due(self, now: float) -> None:
        tick_every = self._state.config.settings.lobbyMatchTickSeconds
        for cohort_id in sorted(self._state.cohorts):
            _, waiting = self._waiting_at_transfer(cohort_id)
            if not waiting:
                continue
            last = self._last_match.get(cohort_id)
            if last is None or now - last >= tick_every:
                self._run_matching(cohort_id)

    def next_due(self, now: float | None = None) -> float | None:
        """Earliest pending deadline; None when nothing is scheduled."""
        with self._lock:
            if now is None:
                now = self._clock.now()
            due: list[float] = []
            for check in self._state.attention.values():
                if check.get("state") == "pending":
                    due.append(check["sentAt"] + check["deadlineSeconds"])
            for offer in self._state.offers.values():
                if offer.state == "pending":
                    due.append(offer.expiresAt)
            for cohort in self._state.cohorts.values():
                for chat in cohort.chat.values():
                    if chat.pendingDelivery is not None:
                        due.append(chat.pendingDelivery["deliverAt"])
            for record in self._state.participants.values():
                if record.terminal or record.status != "active":
                    continue
                cohort = self._state.cohorts.get(record.cohortId)
                if cohort is None:
                    continue
                stage = self._stage_of(record)
                if stage is not None and stage.kind == StageKind.COMPREHENSION:
                    pass
                else:
                    timer = self._timer_due_at(cohort, record)
                    if timer is not None:
                        due.append(timer)
                if stage is not None and stage.kind == StageKind.TRANSFER:
                    params = stage.kindParams
                    if isinstance(params, TransferStageParams):
                        due.append(record.stageArrivedAt + params.timeoutSeconds)
                        last = self._last_match.get(record.cohortId, now)
                        due.append(last + self._state.config.settings.lobbyMatchTickSeconds)
            future = [t for t in due if t > now]
            if any(t <= now for t in due):
                return now
            return min(future) if future else None

    # -- views -----------------------------------------------------------------

    def _peer_summaries(self, record: ParticipantRecord, now: float) -> list[dict]:
        cohort_indices = [
            m.currentStageIndex
            for m in self._state.active_members(record.cohortId)
            if not m.isAgent
        ]
        peers = []
        for member in self._state.cohort_members(record.cohortId):
            if member.publicId == record.publicId:
                continue
            if member.isAgent:
                flag = "agent"
            elif member.terminal:
                flag = member.status
            else:
                flag = self.presence.derive(
                    member.publicId, member.currentStageIndex, cohort_indices, now
                ).statusFlag
            peers.append(
                {
                    "publicId": member.publicId,
                    "displayName": member.profile.displayName,
                    "avatar": member.profile.avatar,
                    "pronouns": member.profile.pronouns,
                    "stageIndex": member.currentStageIndex,
                    "statusFlag": flag,
                }
            )
        return peers

    def participant_view(self, public_id: str) -> dict:
        """Everything the participant screen needs, nothing it must not see."""
        with self._lock:
            record = self._participant(public_id)
            now = self._clock.now()
            config = self._state.config
            cohort = self._cohort(record.cohortId)
            stage = self._stage_of(record)
            view: dict = {
                "participant": record.to_dict(),
                "stageIndex": record.currentStageIndex,
                "stageCount": len(config.stages),
                "completed": record.status == "completed",
                "status": record.status,
                "peers": self._peer_summaries(record, now),
                "serverTime": now,
            }
            if record.status == "completed":
                view["redirectUrl"] = config.metadata.prolificRedirectUrl
                view["completionCode"] = config.metadata.prolificCompletionCode
            offer = self._state.offers.get(public_id)
            if offer is not None and offer.state == "pending":
                view["transferOffer"] = offer.to_dict()
            check = self._state.attention.get(public_id)
            if check is not None and check.get("state") == "pending":
                view["attentionCheck"] = dict(check)
            if stage is None:
                return view
            gate_open = self._state.gate_open(cohort, record.currentStageIndex)
            view["stage"] = stage_to_dict(stage)
            view["gateOpen"] = gate_open
            if stage.ui.autoAdvanceTimerSeconds is not None:
                deadline = self._timer_due_at(cohort, record)
                if deadline is not None:
                    view["timerDeadline"] = deadline
            if stage.kind in (StageKind.GROUP_CHAT, StageKind.PRIVATE_CHAT) and gate_open:
                chat_key = self._state.chat_key(stage.id, public_id)
                chat = cohort.chat.get(chat_key)
                view["chat"] = chat.to_dict() if chat is not None else None
                if view["chat"] is not None:
                    # The undelivered draft is internal; readers only see a
                    # typing signal.
                    pending = view["chat"].pop("pendingDelivery", None)
                    view["chat"]["typing"] = bool(pending)
                view["quorumMet"] = self._state.chat_quorum_met(cohort, stage.id, public_id)
            elif stage.kind == StageKind.RANKING_ELECTION:
                params = stage.kindParams
                assert isinstance(params, RankingElectionParams)
                candidates = set(self._state.election_candidates(cohort, stage.id))
                if params.mode == "peers" and not params.selfVoteAllowed:
                    candidates.discard(public_id)
                election = cohort.elections.get(stage.id)
                # Running tallies stay hidden until a reveal stage shows them.
                view["election"] = {
                    "candidates": sorted(candidates),
                    "submitted": bool(election and public_id in election.ballots),
                }
            elif stage.kind == StageKind.REVEAL:
                view["reveal"] = cohort.reveals.get(stage.id)
            elif stage.kind == StageKind.PAYOUT:
                rows = cohort.payouts.get(stage.id, {})
                view["payout"] = rows.get(public_id)
            elif stage.kind == StageKind.ROLE_ASSIGNMENT:
                assignments = cohort.roleAssignments.get(stage.id, {})
                role_id = assignments.get(public_id)
                params = stage.kindParams
                assert isinstance(params, RoleAssignmentParams)
                role = next((r for r in params.roles if r.roleId == role_id), None)
                if role is not None:
                    view["role"] = {"roleId": role.roleId, "name": role.name, "markdownBody": role.markdownBody}
            return view

    def dashboard(self, actor: str) -> dict:
        """Experimenter overview; includes debug-only running tallies."""
        with self._lock:
            self._require_role(actor, "reader")
            now = self._clock.now()
            config = self._state.config
            cohorts = []
            for cohort_id in sorted(self._state.cohorts):
                cohort = self._state.cohorts[cohort_id]
                cohort_indices = [
                    m.currentStageIndex
                    for m in self._state.active_members(cohort_id)
                    if not m.isAgent
                ]
                members = []
                for member in self._state.cohort_members(cohort_id):
                    if member.isAgent:
                        flag = "agent"
                    elif member.terminal:
                        flag = member.status
                    else:
                        flag = self.presence.derive(
                            member.publicId, member.currentStageIndex, cohort_indices, now
                        ).statusFlag
                    members.append(
                        {
                            "publicId": member.publicId,
                            "displayName": member.profile.displayName,
                            "externalId": member.externalId,
                            "status": member.status,
                            "stageIndex": member.currentStageIndex,
                            "statusFlag": flag,
                            "isAgent": member.isAgent,
                        }
                    )
                cohorts.append(
                    {
                        "id": cohort_id,
                        "locked": cohort.locked,
                        "isLobby": cohort.isLobby,
                        "members": members,
                        "gateOpenedAt": dict(cohort.gateOpenedAt),
                        "debugTallies": {
                            sid: election.result for sid, election in cohort.elections.items()
                        },
                        "agents": {
                            aid: binding.to_dict()
                            for aid, binding in sorted(self._state.agents.get(cohort_id, {}).items())
                        },
                    }
                )
            return {
                "experimentId": config.id,
                "metadata": experiment_config_to_dict(config)["metadata"],
                "stageIds": [s.id for s in config.stages],
                "cohorts": cohorts,
                "alerts": [dict(a) for _, a in sorted(self._state.alerts.items())],
                "attentionStats": dict(self._state.attentionStats),
                "offers": {
                    pid: offer.to_dict()
                    for pid, offer in sorted(self._state.offers.items())
                    if offer.state == "pending"
                },
                "stageListFrozen": self._state.stageListFrozen,
            }

    def search(self, actor: str, query: str) -> list[dict]:
        with self._lock:
            self._require_role(actor, "reader")
            needle = query.strip().lower()
            hits = []
            if not needle:
                return hits
            for public_id in sorted(self._state.participants):
                record = self._state.participants[public_id]
                haystacks = [
                    record.publicId,
                    record.externalId or "",
                    record.profile.displayName,
                    record.cohortId,
                ]
                if any(needle in h.lower() for h in haystacks):
                    hits.append(
                        {
                            "publicId": record.publicId,
                            "externalId": record.externalId,
                            "displayName": record.profile.displayName,
                            "cohortId": record.cohortId,
                            "status": record.status,
                            "stageIndex": record.currentStageIndex,
                        }
                    )
            return hits

    def membership_snapshot(self) -> dict[str, list[str]]:
        """publicId -> cohorts listing it; consistency checks lean on this."""
        with self._lock:
            found: dict[str, list[str]] = {pid: [] for pid in self._state.participants}
            for cohort_id, cohort in self._state.cohorts.items():
                for pid in cohort.memberPublicIds:
                    found.setdefault(pid, []).append(cohort_id)
            return found

    def export_archive(self, actor: str) -> bytes:
        with self._lock:
            self._require_role(actor, "reader")
            return build_archive(self._state, self._store.all_events())

    def export_payouts(self, actor: str) -> str:
        with self._lock:
            self._require_role(actor, "reader")
            return export_payout_csv(self._state)
