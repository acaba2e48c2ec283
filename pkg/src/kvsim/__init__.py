"""SLO-aware KV-cache offloading: cost model, planner, and serving simulator."""

from .core import (
    DEFAULT_BLOCK_SIZE,
    Plan,
    PlacementMatrix,
    RequestState,
    RequestStatus,
    SloConfig,
    SystemProfile,
    blocks_for_tokens,
    per_layer_compute,
)
from .latency import (
    CapacityReport,
    LatencyBreakdown,
    TransferTask,
    batch_decode_latency,
    batch_decode_latency_fast,
    blocks_to_fetch,
    capacity_check,
    prefetch_buffer_requirement,
    reconfiguration_delta,
)
from .planner import (
    DistanceChoice,
    Infeasible,
    ViolationForecast,
    candidate_space,
    enumerate_distances,
    forecast_violations,
    solve,
    solve_one_step_ahead,
)
from .controller import (
    Trigger,
    TriggerState,
    check_triggers,
    ewma_update,
    select_pause_victim,
    try_resume,
)
from .policies import PolicyKind, PolicyOptions, make_policy
from .engine import RunConfig, Simulation, run
from .metrics import MetricsReport, collect_metrics
from .workload import LengthSpec, Trace, TraceRequest, generate, load, save

__all__ = [name for name in dir() if not name.startswith("_")]
