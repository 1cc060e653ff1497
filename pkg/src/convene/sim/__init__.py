from convene.sim.plan import (
    ParticipantScript,
    SimulationPlan,
    StopCondition,
    load_simulation_plan,
    parse_simulation_plan,
    validate_simulation_plan,
)
from convene.sim.runner import (
    ScriptedActor,
    SimulationResult,
    SimulationRunner,
    SimulationStalled,
    run_simulation,
)

__all__ = [
    "ParticipantScript",
    "ScriptedActor",
    "SimulationPlan",
    "SimulationResult",
    "SimulationRunner",
    "SimulationStalled",
    "StopCondition",
    "load_simulation_plan",
    "parse_simulation_plan",
    "run_simulation",
    "validate_simulation_plan",
]
