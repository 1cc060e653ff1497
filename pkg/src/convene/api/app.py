"""HTTP + WebSocket surface over the experiment runtime.

Request/response actions ride HTTP; streams ride one multiplexed WebSocket
per session carrying {topic, sequence, payload} frames. Experimenters
authenticate with a bearer token checked against a static allowlist file;
participants authenticate solely by the private id inside their join URL.
Unknown join ids answer after a uniform artificial delay so response timing
does not reveal which ids exist.
"""

from __future__ import annotations

import asyncio
import threading
import time
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import Depends, FastAPI, Query, Request, Response, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse, PlainTextResponse

from convene.api.auth import Allowlist
from convene.api.schemas import (
    ActionAck,
    AgentTemplatePatch,
    AttentionRequest,
    BootRequest,
    CreateCohortRequest,
    CreateCohortResponse,
    CreateExperimentRequest,
    CreateExperimentResponse,
    CreateTransferRequest,
    LockRequest,
    MessageRequest,
    MetadataPatchRequest,
    MintParticipantsRequest,
    MintParticipantsResponse,
    MintedSlot,
    ParticipantActionRequest,
    PauseAgentRequest,
    RegisterKeyRequest,
    RegisterKeyResponse,
    ReplaceStagesRequest,
    ResolveAlertRequest,
)
from convene.api.streams import (
    StreamHub,
    Subscription,
    TOPIC_COHORT,
    TOPIC_DEBUG,
    TOPIC_PARTICIPANT,
    cohort_topic,
    debug_topic,
    participant_topic,
)
from convene.clock import Clock, WallClock
from convene.engine.runtime import ExperimentRuntime
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
    UnknownCohort,
    UnknownExperiment,
    UnknownParticipant,
    UnknownPrivateId,
)
from convene.llm.gateway import Gateway

# HTTP status per engine error family; anything unmapped is a 400.
ERROR_STATUS = {
    ConfigParseError: 400,
    AnswerRequired: 400,
    MissingAnswer: 400,
    IllegalAction: 400,
    PermissionDenied: 403,
    AuthFailure: 401,
    UnknownExperiment: 404,
    UnknownCohort: 404,
    UnknownParticipant: 404,
    UnknownPrivateId: 404,
    EditFrozen: 409,
    CohortLocked: 409,
    DestinationLocked: 409,
    GateBlocked: 409,
    AlreadyTerminal: 409,
    CheckAlreadyPending: 409,
    CheckNotPending: 409,
    NoPendingOffer: 409,
    OfferExpired: 410,
}

UNKNOWN_ID_DELAY_SECONDS = 0.05


def _status_for(error: ConveneError) -> int:
    for klass, status in ERROR_STATUS.items():
        if isinstance(error, klass):
            return status
    return 400


class ExperimentHost:
    """Everything the endpoints share: runtimes, auth, streams, clocks."""

    def __init__(
        self,
        allowlist: Allowlist,
        clock: Clock | None = None,
        data_root: str | Path | None = None,
        gateway_factory=None,
        unknown_id_delay: float = UNKNOWN_ID_DELAY_SECONDS,
    ):
        self.allowlist = allowlist
        self.clock = clock or WallClock()
        self.data_root = Path(data_root) if data_root is not None else None
        self.gateway_factory = gateway_factory or (lambda: Gateway(self.clock))
        self.unknown_id_delay = unknown_id_delay
        self.hub = StreamHub()
        self.runtimes: dict[str, ExperimentRuntime] = {}
        self._lock = threading.Lock()

    # -- runtime registry ---------------------------------------------------

    def mount(self, runtime: ExperimentRuntime) -> None:
        experiment_id = runtime.experiment_id
        with self._lock:
            self.runtimes[experiment_id] = runtime

        def members_of(cohort_id: str) -> list[str]:
            cohort = runtime.state.cohorts.get(cohort_id)
            if cohort is None:
                return []
            return [
                pid
                for pid in cohort.memberPublicIds
                if not runtime.state.participants[pid].isAgent
            ]

        self.hub.register_experiment(experiment_id, members_of)
        runtime.subscribe(lambda event: self.hub.publish(experiment_id, event))

    def create_experiment(self, identity: str, config_doc: dict, seed: str | None) -> ExperimentRuntime:
        data_dir = None
        if self.data_root is not None:
            experiment_id = str(config_doc.get("id", "experiment"))
            data_dir = self.data_root / experiment_id
        runtime = ExperimentRuntime.create(
            config_doc,
            actor=identity,
            clock=self.clock,
            data_dir=data_dir,
            seed=seed,
            gateway=self.gateway_factory(),
        )
        self.mount(runtime)
        return runtime

    def open_existing(self) -> int:
        """Mount every experiment directory under the data root."""
        if self.data_root is None or not self.data_root.exists():
            return 0
        mounted = 0
        for events_file in sorted(self.data_root.glob("*/events.jsonl")):
            runtime = ExperimentRuntime.open(
                events_file.parent, clock=self.clock, gateway=self.gateway_factory()
            )
            self.mount(runtime)
            mounted += 1
        return mounted

    # -- lookups --------------------------------------------------------------

    def runtime_for(self, experiment_id: str) -> ExperimentRuntime:
        runtime = self.runtimes.get(experiment_id)
        if runtime is None:
            raise UnknownExperiment(f"no experiment {experiment_id!r}")
        return runtime

    def runtime_for_cohort(self, cohort_id: str) -> ExperimentRuntime:
        for runtime in self.runtimes.values():
            if cohort_id in runtime.state.cohorts:
                return runtime
        raise UnknownCohort(f"no cohort {cohort_id!r}")

    def runtime_for_public(self, public_id: str) -> ExperimentRuntime:
        for runtime in self.runtimes.values():
            if public_id in runtime.state.participants:
                return runtime
        raise UnknownParticipant(f"no participant {public_id!r}")

    def resolve_private(self, private_id: str) -> tuple[ExperimentRuntime, str]:
        for runtime in self.runtimes.values():
            try:
                return runtime, runtime.resolve_private_id(private_id)
            except UnknownPrivateId:
                continue
        # Uniform delay: misses cost the same regardless of near-hits.
        if self.unknown_id_delay > 0:
            time.sleep(self.unknown_id_delay)
        raise UnknownPrivateId("unknown join link")

    def tick_all(self) -> int:
        fired = 0
        for runtime in list(self.runtimes.values()):
            fired += runtime.tick()
        return fired


class Ticker(threading.Thread):
    """Wall-clock pump for deliveries, timers, expiries in serve mode."""

    def __init__(self, host: ExperimentHost, interval: float):
        super().__init__(daemon=True, name="convene-ticker")
        self._host = host
        self._interval = interval
        self._stop = threading.Event()

    def run(self) -> None:
        while not self._stop.wait(self._interval):
            self._host.tick_all()

    def stop(self) -> None:
        self._stop.set()


def create_app(
    host: ExperimentHost,
    tick_interval: float | None = None,
) -> FastAPI:
    @asynccontextmanager
    async def lifespan(app: FastAPI):
        ticker = None
        if tick_interval is not None and tick_interval > 0:
            ticker = Ticker(host, tick_interval)
            ticker.start()
        app.state.ticker = ticker
        yield
        if ticker is not None:
            ticker.stop()

    app = FastAPI(title="convene", docs_url=None, redoc_url=None, lifespan=lifespan)
    app.state.host = host

    @app.exception_handler(ConveneError)
    async def _engine_error(request: Request, error: ConveneError):
        return JSONResponse(
            status_code=_status_for(error),
            content={"error": type(error).__name__, "message": str(error)},
        )

    def identity(request: Request) -> str:
        header = request.headers.get("authorization", "")
        if not header.lower().startswith("bearer "):
            raise AuthFailure("missing bearer token")
        found = host.allowlist.identity_for_token(header[7:].strip())
        if found is None:
            raise AuthFailure("unrecognized token")
        return found

    # -- experimenter: experiments -------------------------------------------

    @app.post("/experiments", response_model=CreateExperimentResponse)
    def create_experiment(body: CreateExperimentRequest, who: str = Depends(identity)):
        runtime = host.create_experiment(who, body.config, body.seed)
        return CreateExperimentResponse(experimentId=runtime.experiment_id, seed=runtime.seed)

    @app.patch("/experiments/{experiment_id}/metadata")
    def patch_metadata(experiment_id: str, body: MetadataPatchRequest, who: str = Depends(identity)):
        return host.runtime_for(experiment_id).update_metadata(who, body.as_patch())

    @app.post("/experiments/{experiment_id}/stages")
    def replace_stages(experiment_id: str, body: ReplaceStagesRequest, who: str = Depends(identity)):
        host.runtime_for(experiment_id).replace_stages(who, body.config)
        return {"ok": True}

    @app.post("/experiments/{experiment_id}/cohorts", response_model=CreateCohortResponse)
    def create_cohort(experiment_id: str, body: CreateCohortRequest, who: str = Depends(identity)):
        cohort_id = host.runtime_for(experiment_id).create_cohort(who, is_lobby=body.isLobby)
        return CreateCohortResponse(cohortId=cohort_id)

    @app.get("/experiments/{experiment_id}/dashboard")
    def dashboard(experiment_id: str, who: str = Depends(identity)):
        return host.runtime_for(experiment_id).dashboard(who)

    @app.get("/experiments/{experiment_id}/search")
    def search(experiment_id: str, q: str = Query(default=""), who: str = Depends(identity)):
        return {"matches": host.runtime_for(experiment_id).search(who, q)}

    @app.post("/experiments/{experiment_id}/export")
    def export_archive(experiment_id: str, who: str = Depends(identity)):
        payload = host.runtime_for(experiment_id).export_archive(who)
        return Response(
            content=payload,
            media_type="application/zip",
            headers={"Content-Disposition": f'attachment; filename="{experiment_id}.zip"'},
        )

    @app.get("/experiments/{experiment_id}/payouts.csv")
    def export_payouts(experiment_id: str, who: str = Depends(identity)):
        return PlainTextResponse(
            host.runtime_for(experiment_id).export_payouts(who), media_type="text/csv"
        )

    @app.post("/experiments/{experiment_id}/keys", response_model=RegisterKeyResponse)
    def register_key(experiment_id: str, body: RegisterKeyRequest, who: str = Depends(identity)):
        ref = host.runtime_for(experiment_id).register_api_key(
            who, body.providerId, body.keyMaterial, body.endpointUrl
        )
        return RegisterKeyResponse(ref=ref)

    @app.post("/experiments/{experiment_id}/agents/{agent_id}/pause")
    def pause_agent(
        experiment_id: str, agent_id: str, body: PauseAgentRequest, who: str = Depends(identity)
    ):
        host.runtime_for(experiment_id).pause_agent(who, body.cohortId, agent_id, body.paused)
        return {"ok": True}

    @app.patch("/experiments/{experiment_id}/agent-templates/{template_id}")
    def edit_agent_template(
        experiment_id: str, template_id: str, body: AgentTemplatePatch, who: str = Depends(identity)
    ):
        host.runtime_for(experiment_id).edit_agent_template(
            who,
            template_id,
            prompt_plan=body.promptPlan,
            persona_prompt=body.personaPrompt,
            wpm=body.wpm,
            sampling_params=body.samplingParams,
        )
        return {"ok": True}

    @app.post("/experiments/{experiment_id}/alerts/{alert_id}/resolve")
    def resolve_alert(
        experiment_id: str, alert_id: str, body: ResolveAlertRequest, who: str = Depends(identity)
    ):
        host.runtime_for(experiment_id).resolve_alert(who, alert_id, body.response)
        return {"ok": True}

    # -- experimenter: cohorts ------------------------------------------------

    @app.post("/cohorts/{cohort_id}/participants", response_model=MintParticipantsResponse)
    def mint_participants(cohort_id: str, body: MintParticipantsRequest, who: str = Depends(identity)):
        runtime = host.runtime_for_cohort(cohort_id)
        minted = runtime.mint_participants(who, cohort_id, body.count, body.externalIds)
        return MintParticipantsResponse(
            participants=[
                MintedSlot(
                    publicId=slot["publicId"],
                    privateId=slot["privateId"],
                    joinUrl=f"/join/{slot['privateId']}",
                )
                for slot in minted
            ]
        )

    @app.post("/cohorts/{cohort_id}/transfers")
    def create_transfer(cohort_id: str, body: CreateTransferRequest, who: str = Depends(identity)):
        runtime = host.runtime_for_cohort(cohort_id)
        return runtime.create_transfer(who, body.publicId, cohort_id)

    @app.post("/cohorts/{cohort_id}/lock")
    def lock_cohort(cohort_id: str, body: LockRequest, who: str = Depends(identity)):
        host.runtime_for_cohort(cohort_id).lock_cohort(who, cohort_id, body.locked)
        return {"ok": True}

    @app.post("/cohorts/{cohort_id}/agents")
    def add_agent(cohort_id: str, body: dict, who: str = Depends(identity)):
        template_id = str(body.get("templateId", ""))
        runtime = host.runtime_for_cohort(cohort_id)
        public_id = runtime.add_agent_participant(who, cohort_id, template_id)
        return {"publicId": public_id}

    @app.post("/cohorts/{cohort_id}/messages")
    def message_cohort(cohort_id: str, body: MessageRequest, who: str = Depends(identity)):
        runtime = host.runtime_for_cohort(cohort_id)
        runtime.message_participants(who, body.text, cohort_id=cohort_id)
        return {"ok": True}

    # -- experimenter: participants -------------------------------------------

    @app.post("/participants/{public_id}/boot")
    def boot(public_id: str, body: BootRequest, who: str = Depends(identity)):
        host.runtime_for_public(public_id).boot_participant(who, public_id, body.reason)
        return {"ok": True}

    @app.post("/participants/{public_id}/attention")
    def send_attention(public_id: str, body: AttentionRequest, who: str = Depends(identity)):
        check_id = host.runtime_for_public(public_id).send_attention_check(
            who, public_id, body.deadlineSeconds
        )
        return {"checkId": check_id}

    @app.post("/participants/{public_id}/message")
    def message_participant(public_id: str, body: MessageRequest, who: str = Depends(identity)):
        runtime = host.runtime_for_public(public_id)
        runtime.message_participants(who, body.text, public_id=public_id)
        return {"ok": True}

    @app.get("/participants/{public_id}/view")
    def view_as_participant(public_id: str, who: str = Depends(identity)):
        runtime = host.runtime_for_public(public_id)
        runtime.require_role(who, "editor")
        return runtime.participant_view(public_id)

    @app.post("/participants/{public_id}/actions", response_model=ActionAck)
    def act_on_behalf(public_id: str, body: ParticipantActionRequest, who: str = Depends(identity)):
        runtime = host.runtime_for_public(public_id)
        runtime.require_role(who, "editor")
        result = _dispatch_action(runtime, public_id, body, as_actor=who)
        return ActionAck(sequence=runtime.store.head(), result=result)

    # -- participant surface ---------------------------------------------------

    @app.get("/join/{private_id}")
    def join(private_id: str):
        runtime, public_id = host.resolve_private(private_id)
        view = runtime.join(private_id)
        view["publicId"] = public_id
        return view

    @app.post("/join/{private_id}/actions", response_model=ActionAck)
    def participant_action(private_id: str, body: ParticipantActionRequest):
        runtime, public_id = host.resolve_private(private_id)
        result = _dispatch_action(runtime, public_id, body, as_actor=None)
        return ActionAck(sequence=runtime.store.head(), result=result)

    # -- streams ----------------------------------------------------------------

    @app.websocket("/stream")
    async def stream(
        socket: WebSocket,
        token: str | None = Query(default=None),
        privateId: str | None = Query(default=None),
    ):
        await socket.accept()
        loop = asyncio.get_running_loop()
        queue: asyncio.Queue = asyncio.Queue()

        def deliver(frame: dict) -> None:
            loop.call_soon_threadsafe(queue.put_nowait, frame)

        subscription = Subscription(deliver)
        experimenter: str | None = None
        runtime: ExperimentRuntime | None = None

        if privateId is not None:
            try:
                runtime, public_id = host.resolve_private(privateId)
            except UnknownPrivateId:
                await socket.close(code=4404)
                return
            subscription.participant_id = public_id
            state = runtime.state

            def cohort_of(pid: str) -> str | None:
                record = state.participants.get(pid)
                return record.cohortId if record is not None else None

            subscription.cohort_of = cohort_of
            subscription.topics.add(participant_topic(public_id))
        elif token is not None:
            experimenter = host.allowlist.identity_for_token(token)
            if experimenter is None:
                await socket.close(code=4401)
                return
        else:
            await socket.close(code=4401)
            return

        host.hub.attach(subscription)
        try:
            receiver = asyncio.create_task(socket.receive_json())
            sender = asyncio.create_task(queue.get())
            while True:
                done, _ = await asyncio.wait(
                    {receiver, sender}, return_when=asyncio.FIRST_COMPLETED
                )
                if sender in done:
                    await socket.send_json(sender.result())
                    sender = asyncio.create_task(queue.get())
                if receiver in done:
                    message = receiver.result()
                    await _handle_stream_message(
                        socket, host, subscription, experimenter, message
                    )
                    receiver = asyncio.create_task(socket.receive_json())
        except (WebSocketDisconnect, RuntimeError):
            pass
        finally:
            host.hub.detach(subscription)
            for task in (receiver, sender):
                task.cancel()

    return app


def _dispatch_action(
    runtime: ExperimentRuntime,
    public_id: str,
    body: ParticipantActionRequest,
    as_actor: str | None,
) -> dict:
    """Route one participant action envelope to the engine."""
    if body.action == "submitAnswer":
        return runtime.submit_answer(public_id, body.answer, as_actor=as_actor)
    if body.action == "sendChatMessage":
        return runtime.send_chat_message(public_id, body.text or "", as_actor=as_actor)
    if body.action == "acceptTransfer":
        accept = True if body.accept is None else bool(body.accept)
        return runtime.respond_transfer(public_id, accept, as_actor=as_actor)
    if body.action == "acknowledgeAttentionCheck":
        return runtime.acknowledge_attention(public_id, as_actor=as_actor)
    if body.action == "raiseAlert":
        alert_id = runtime.raise_alert(public_id, body.text or "", as_actor=as_actor)
        return {"alertId": alert_id}
    if body.action == "heartbeat":
        return runtime.heartbeat(public_id)
    if body.action == "endChatVote":
        ready = True if body.ready is None else bool(body.ready)
        return runtime.toggle_ready_to_end(public_id, ready, as_actor=as_actor)
    raise IllegalAction(f"unknown action {body.action!r}")


async def _handle_stream_message(
    socket: WebSocket,
    host: ExperimentHost,
    subscription: Subscription,
    experimenter: str | None,
    message: dict,
) -> None:
    """Subscribe/resync control messages from the client side of the socket."""
    kind = message.get("type")
    if kind == "subscribe":
        topic = str(message.get("topic", ""))
        if not _may_subscribe(host, subscription, experimenter, topic):
            await socket.send_json({"type": "denied", "topic": topic})
            return
        subscription.topics.add(topic)
        await socket.send_json({"type": "subscribed", "topic": topic})
    elif kind == "resync":
        after = int(message.get("afterSequence", 0))
        for experiment_id, runtime in host.runtimes.items():
            frames = host.hub.replay_frames(
                experiment_id,
                runtime.store.all_events(),
                lambda cohort_id: [],
                after_sequence=after,
            )
            for topic, sequence, payload in frames:
                if subscription.wants(topic):
                    await socket.send_json(
                        {"topic": topic, "sequence": sequence, "payload": payload}
                    )
        await socket.send_json({"type": "resynced"})


def _may_subscribe(
    host: ExperimentHost,
    subscription: Subscription,
    experimenter: str | None,
    topic: str,
) -> bool:
    """Participants get only their own topics; experimenters need a role."""
    if experimenter is None:
        pid = subscription.participant_id
        if pid is None:
            return False
        if topic == participant_topic(pid):
            return True
        if subscription.cohort_of is not None and topic == cohort_topic(subscription.cohort_of(pid) or ""):
            return True
        return False
    family, _, key = topic.partition("/")
    if family == TOPIC_DEBUG:
        runtime = host.runtimes.get(key)
        return runtime is not None and runtime.state.config.has_role(experimenter, "reader")
    if family == TOPIC_COHORT:
        try:
            runtime = host.runtime_for_cohort(key)
        except UnknownCohort:
            return False
        return runtime.state.config.has_role(experimenter, "reader")
    if family == TOPIC_PARTICIPANT:
        try:
            runtime = host.runtime_for_public(key)
        except UnknownParticipant:
            return False
        return runtime.state.config.has_role(experimenter, "editor")
    return False
