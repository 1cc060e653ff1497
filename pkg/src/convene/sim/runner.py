"""Headless simulation: scripted humans driving a real runtime on a virtual clock.

The loop is event-driven, not polled: every scripted actor is either due at a
known instant or parked until an event lands on its cohort's stream. Between
steps the clock jumps straight to the next scheduled instant (actor action,
message delivery, timer, offer expiry), so a 30 s typing delay costs
microseconds. Everything is seeded, so two runs of the same plan produce
byte-identical event logs.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from convene.clock import VirtualClock
from convene.engine.records import TERMINAL_STATUSES
from convene.engine.runtime import ExperimentRuntime
from convene.errors import (
    AlreadyTerminal,
    AnswerRequired,
    ConveneError,
    GateBlocked,
    IllegalAction,
    MissingAnswer,
    NoPendingOffer,
    OfferExpired,
)
from convene.llm.gateway import Gateway, ScriptedProvider
from convene.model.types import (
    ProfileStageParams,
    StageConfig,
    StageKind,
    SurveyStageParams,
)
from convene.sim.plan import STOP_MAX_SIM_SECONDS, SimulationPlan


class SimulationStalled(ConveneError):
    """Nothing scheduled, nothing due, and the stop condition is unmet."""


class ScriptError(ConveneError):
    """A scripted action the engine rejected as malformed; the plan is wrong."""


@dataclass
class SimulationResult:
    completed: bool
    reason: str  # allTerminal | maxSimSeconds | stalled
    simSeconds: float
    cohortsCompleted: int
    cohortCount: int
    messagesExchanged: int
    payoutTotalMinor: int
    eventCount: int

    def summary_line(self) -> str:
        total = f"{self.payoutTotalMinor // 100}.{self.payoutTotalMinor % 100:02d}"
        return (
            f"simulate: {self.reason}; cohorts {self.cohortsCompleted}/{self.cohortCount} complete, "
            f"{self.messagesExchanged} messages, payouts {total}, "
            f"{self.eventCount} events, {self.simSeconds:.1f} sim-seconds"
        )


class ScriptedActor:
    """One simulated human working through its script.

    An actor is due (`next_at` set) or parked (`next_at` None). Parked actors
    are re-armed when an event lands on their cohort. A step performs at most
    one action; acting re-arms with the script's jitter so multi-part stages
    (chat messages, readiness vote, advance) spread over several instants.
    """

    def __init__(self, runner: "SimulationRunner", script, external_id: str, public_id: str, private_id: str):
        self._runner = runner
        self.script = script
        self.external_id = external_id
        self.public_id = public_id
        self._private_id = private_id
        self._rng = random.Random(f"{runner.plan.seed}:{external_id}")
        self.next_at: float | None = 0.0 + self._delay()
        self.joined = False
        self.done = False
        self._sent: dict[str, int] = {}  # chat stage id -> messages posted
        self._ready: set[str] = set()
        self._attempts: dict[str, int] = {}  # comprehension stage id -> tries

    def _delay(self) -> float:
        jitter = self.script.jitterSeconds
        return self._rng.uniform(0.0, jitter) if jitter > 0 else 0.0

    def _arm(self, now: float) -> None:
        self.next_at = now + self._delay()

    def wake(self, now: float) -> None:
        if not self.done and self.next_at is None:
            self._arm(now)

    def _spec(self, stage_id: str) -> dict:
        return self.script.stages.get(stage_id, {})

    def step(self, now: float) -> bool:
        """Perform the next scripted action; returns whether anything happened."""
        self.next_at = None
        if self.done:
            return False
        runtime = self._runner.runtime
        try:
            if not self.joined:
                runtime.join(self._private_id)
                self.joined = True
                self._arm(now)
                return True
            view = runtime.participant_view(self.public_id)
        except AlreadyTerminal:
            self.done = True
            return False
        if view["status"] in TERMINAL_STATUSES:
            self.done = True
            return False
        if view.get("attentionCheck") is not None:
            if not self.script.acknowledgeAttention:
                return False  # deliberately ignore; the deadline will fire
            runtime.acknowledge_attention(self.public_id)
            self._arm(now)
            return True
        if view.get("transferOffer") is not None:
            return self._answer_offer(runtime, view, now)
        if view["status"] == "transferPending":
            return False
        stage_dict = view.get("stage")
        if stage_dict is None or not view.get("gateOpen", False):
            return False
        stage = self._runner.stage_by_id[stage_dict["id"]]
        return self._act_on_stage(runtime, stage, view, now)

    def _answer_offer(self, runtime: ExperimentRuntime, view: dict, now: float) -> bool:
        accept = True
        transfer_stage = self._runner.transfer_stage
        if transfer_stage is not None:
            accept = bool(self._spec(transfer_stage.id).get("accept", True))
        try:
            runtime.respond_transfer(self.public_id, accept)
        except (NoPendingOffer, OfferExpired):
            return False
        self._arm(now)
        return True

    def _submit(self, runtime: ExperimentRuntime, answer: dict | None, now: float) -> bool:
        """Shared submit path: advance re-arms, a closed quorum/source parks."""
        try:
            runtime.submit_answer(self.public_id, answer)
        except GateBlocked:
            return False
        except (AnswerRequired, MissingAnswer, IllegalAction) as e:
            raise ScriptError(f"{self.external_id}: engine rejected scripted answer: {e}") from e
        self._arm(now)
        return True

    def _act_on_stage(self, runtime: ExperimentRuntime, stage: StageConfig, view: dict, now: float) -> bool:
        spec = self._spec(stage.id)
        kind = stage.kind

        if kind == StageKind.TERMS_OF_SERVICE:
            return self._submit(runtime, {"acknowledged": True}, now)

        if kind == StageKind.PROFILE:
            params = stage.kindParams
            assert isinstance(params, ProfileStageParams)
            if params.mode == "selfChosen":
                answer = {
                    "displayName": spec["displayName"],
                    "avatar": spec.get("avatar", ""),
                    "pronouns": spec.get("pronouns", ""),
                }
                return self._submit(runtime, answer, now)
            return self._submit(runtime, None, now)

        if kind in (StageKind.INFO, StageKind.ROLE_ASSIGNMENT, StageKind.REVEAL, StageKind.PAYOUT):
            return self._submit(runtime, None, now)

        if kind == StageKind.SURVEY:
            return self._submit(runtime, dict(spec["answers"]), now)

        if kind == StageKind.SURVEY_PER_PARTICIPANT:
            return self._submit(runtime, self._per_subject_answers(stage, view, spec), now)

        if kind == StageKind.COMPREHENSION:
            return self._submit(runtime, self._comprehension_answers(stage, spec), now)

        if kind == StageKind.RANKING_ELECTION:
            return self._submit(runtime, {"ranking": self._ranking(stage, view, spec)}, now)

        if kind in (StageKind.GROUP_CHAT, StageKind.PRIVATE_CHAT):
            return self._act_in_chat(runtime, stage, view, spec, now)

        if kind == StageKind.TRANSFER:
            return False  # matched, offered, or booted by the engine

        return False

    def _per_subject_answers(self, stage: StageConfig, view: dict, spec: dict) -> dict:
        params = stage.kindParams
        assert isinstance(params, SurveyStageParams)
        subjects = sorted(
            p["publicId"] for p in view.get("peers", []) if p["statusFlag"] != "booted"
        )
        if not params.excludeSelf:
            subjects = sorted(subjects + [self.public_id])
        template = spec["answers"]
        return {f"{qid}:{subject}": value for qid, value in template.items() for subject in subjects}

    def _comprehension_answers(self, stage: StageConfig, spec: dict) -> dict:
        attempts = spec.get("attempts")
        if isinstance(attempts, list) and attempts:
            index = min(self._attempts.get(stage.id, 0), len(attempts) - 1)
            self._attempts[stage.id] = self._attempts.get(stage.id, 0) + 1
            return dict(attempts[index])
        return dict(spec["answers"])

    def _ranking(self, stage: StageConfig, view: dict, spec: dict) -> list[str]:
        """Scripted order by externalId, projected onto the live candidate set.

        Candidates the script never named (agent peers, substitutes) keep a
        deterministic place at the tail, so the ballot is always a complete
        permutation of whatever the engine currently offers.
        """
        candidates = list(view.get("election", {}).get("candidates", []))
        preferred: list[str] = []
        for name in spec.get("ranking", []):
            public = self._runner.public_for_external(self.public_id, name)
            if public in candidates and public not in preferred:
                preferred.append(public)
        tail = sorted(c for c in candidates if c not in preferred)
        return preferred + tail

    def _act_in_chat(self, runtime: ExperimentRuntime, stage: StageConfig, view: dict, spec: dict, now: float) -> bool:
        messages = spec.get("messages", [])
        sent = self._sent.get(stage.id, 0)
        if sent < len(messages):
            runtime.send_chat_message(self.public_id, str(messages[sent]))
            self._sent[stage.id] = sent + 1
            self._arm(now)
            return True
        if stage.id not in self._ready:
            runtime.toggle_ready_to_end(self.public_id, True)
            self._ready.add(stage.id)
            self._arm(now)
            return True
        return self._submit(runtime, None, now)


class SimulationRunner:
    """Owns the runtime, the cast, and the virtual-clock agenda loop."""

    def __init__(self, plan: SimulationPlan, data_dir=None):
        self.plan = plan
        self.clock = VirtualClock(0.0)
        self.gateway = Gateway(self.clock)
        provider = ScriptedProvider.from_script(plan.providerScript)
        for template in plan.config.agentTemplates:
            self.gateway.register(template.model.providerId, provider)
        creator = next(
            (identity for identity, role in plan.config.roles.items() if role == "creator"),
            None,
        )
        if creator is None:
            raise ScriptError("the experiment config names no creator role")
        self.creator = creator
        self.runtime = ExperimentRuntime.create(
            plan.config_doc,
            actor=creator,
            clock=self.clock,
            data_dir=data_dir,
            seed=plan.seed,
            gateway=self.gateway,
        )
        self.stage_by_id = {s.id: s for s in plan.config.stages}
        self.transfer_stage = next(
            (s for s in plan.config.stages if s.kind == StageKind.TRANSFER), None
        )
        self.actors: list[ScriptedActor] = []
        self._external_map: dict[str, dict[str, str]] = {}  # cohortId -> externalId -> publicId
        self._woken_streams: set[str] = set()
        self.runtime.subscribe(lambda record: self._woken_streams.add(record.streamId))
        self._cast()

    def _cast(self) -> None:
        """One cohort per plan.cohortCount, each with the full scripted roster."""
        for index in range(self.plan.cohortCount):
            cohort_id = self.runtime.create_cohort(self.creator)
            externals = [f"{s.externalId}.{index}" for s in self.plan.participants]
            minted = self.runtime.mint_participants(
                self.creator, cohort_id, count=len(externals), external_ids=externals
            )
            mapping: dict[str, str] = {}
            for script, slot in zip(self.plan.participants, minted):
                mapping[script.externalId] = slot["publicId"]
                self.actors.append(
                    ScriptedActor(self, script, f"{script.externalId}.{index}", slot["publicId"], slot["privateId"])
                )
            self._external_map[cohort_id] = mapping

    def public_for_external(self, asking_public_id: str, external_name: str) -> str | None:
        """Resolve a script's peer name inside the asker's current cohort."""
        cohort_id = self.runtime.state.participants[asking_public_id].cohortId
        return self._external_map.get(cohort_id, {}).get(external_name)

    # -- stop conditions ----------------------------------------------------

    def _all_terminal(self) -> bool:
        return all(
            p.status in TERMINAL_STATUSES for p in self.runtime.state.participants.values()
        )

    def _apply_wakes(self, now: float) -> None:
        if not self._woken_streams:
            return
        streams = self._woken_streams
        self._woken_streams = set()
        participants = self.runtime.state.participants
        for actor in self.actors:
            if actor.done or actor.next_at is not None:
                continue
            record = participants.get(actor.public_id)
            if record is not None and record.cohortId in streams:
                actor.wake(now)

    def run(self) -> SimulationResult:
        limit = (
            self.plan.stopCondition.maxSimSeconds
            if self.plan.stopCondition.kind == STOP_MAX_SIM_SECONDS
            else None
        )
        reason = "allTerminal"
        completed = True
        while True:
            now = self.clock.now()
            for actor in self.actors:
                if actor.next_at is not None and actor.next_at <= now:
                    actor.step(now)
            self.runtime.tick(now)
            self._apply_wakes(now)
            if self._all_terminal():
                break
            agenda = [a.next_at for a in self.actors if a.next_at is not None]
            due = self.runtime.next_due(now)
            if due is not None:
                agenda.append(due)
            if not agenda:
                reason, completed = "stalled", False
                break
            upcoming = min(agenda)
            if limit is not None and upcoming > limit:
                self.clock.advance_to(limit)
                self.runtime.tick(limit)
                reason, completed = "maxSimSeconds", self._all_terminal()
                break
            if upcoming > now:
                self.clock.advance_to(upcoming)
        return self._result(reason, completed)

    def _result(self, reason: str, completed: bool) -> SimulationResult:
        state = self.runtime.state
        cohorts_done = 0
        for cohort in state.cohorts.values():
            members = [state.participants[pid] for pid in cohort.memberPublicIds]
            if members and all(m.status in TERMINAL_STATUSES for m in members):
                cohorts_done += 1
        messages = sum(
            1
            for e in self.runtime.store.all_events()
            if e.kind in ("chat_posted", "agent_message_delivered")
        )
        payout_total = sum(
            row["totalMinor"]
            for cohort in state.cohorts.values()
            for rows in cohort.payouts.values()
            for row in rows.values()
        )
        return SimulationResult(
            completed=completed,
            reason=reason,
            simSeconds=self.clock.now(),
            cohortsCompleted=cohorts_done,
            cohortCount=len(state.cohorts),
            messagesExchanged=messages,
            payoutTotalMinor=payout_total,
            eventCount=self.runtime.store.head(),
        )

    def archive(self) -> bytes:
        return self.runtime.export_archive(self.creator)

    def payout_csv(self) -> str:
        return self.runtime.export_payouts(self.creator)


def run_simulation(plan: SimulationPlan, data_dir=None) -> tuple[SimulationResult, SimulationRunner]:
    runner = SimulationRunner(plan, data_dir=data_dir)
    result = runner.run()
    return result, runner
