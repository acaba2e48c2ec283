"""Re-planning triggers and the pause/resume fallback policy.

The installed plan carries its own expiry step, which guards against KV
growth. Two runtime signals can invalidate it earlier: a change in batch
composition, and observed step latency drifting from the prediction by
more than a configured fraction (evidence of contention, answered by an
EWMA refresh of the profiled costs). When even a fresh solve comes back
infeasible, the engine pauses the request whose total KV blocks plus
deposited tokens is largest: it frees the most memory while its deposit
keeps the user-visible stream alive the longest.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

from .core import RequestState, RequestStatus, SloConfig, SystemProfile
from .planner import Infeasible, solve


class Trigger(Enum):
    NONE = "none"
    REPLAN_PROFILE = "replan_profile"
    REPLAN_BATCH = "replan_batch"
    REPLAN_EXPIRY = "replan_expiry"


@dataclass(frozen=True)
class TriggerState:
    """Running profile estimates maintained across decode steps."""

    last_predicted_latency_ms: float
    ewma_compute_ms: float
    ewma_bandwidth: float
    active_expiry: int | None = None

    def __post_init__(self) -> None:
        if self.ewma_compute_ms <= 0 or self.ewma_bandwidth <= 0:
            raise ValueError("EWMA estimates must be strictly positive")


class ExhaustedBatchError(RuntimeError):
    """No decoding request left to pause."""


def check_triggers(
    observed_latency_ms: float,
    predicted_ms: float,
    batch_changed: bool,
    current_step: int,
    expiry: int | float,
    threshold: float,
) -> Trigger:
    """Decide whether (and why) to re-run the placement solver.

    Priority: a batch change invalidates the forecast most fundamentally,
    then a profile mismatch, then plain plan expiry.
    """
    if predicted_ms <= 0:
        raise ValueError("predicted latency must be > 0")
    if batch_changed:
        return Trigger.REPLAN_BATCH
    if abs(observed_latency_ms - predicted_ms) > threshold * predicted_ms:
        return Trigger.REPLAN_PROFILE
    if current_step >= expiry:
        return Trigger.REPLAN_EXPIRY
    return Trigger.NONE


def ewma_update(
    state: TriggerState,
    observed_compute_ms: float,
    observed_bandwidth: float,
    decay: float,
) -> TriggerState:
    """Blend fresh observations into the profile estimates."""
    if not (0 < decay <= 1):
        raise ValueError("decay must be in (0, 1]")
    return replace(
        state,
        ewma_compute_ms=decay * observed_compute_ms + (1 - decay) * state.ewma_compute_ms,
        ewma_bandwidth=decay * observed_bandwidth + (1 - decay) * state.ewma_bandwidth,
    )


def select_pause_victim(batch: list[RequestState], num_layers: int) -> int:
    """Pick the decoding request with the largest KV-plus-deposit footprint.

    Score is total KV blocks (blocks per layer times layer count) plus the
    deposited token count; ties go to the earliest arrival, then lowest id.
    """
    eligible = [r for r in batch if r.status == RequestStatus.DECODING]
    if not eligible:
        raise ExhaustedBatchError("no decoding request available to pause")
    return min(
        eligible,
        key=lambda r: (
            -(r.blocks_per_layer * num_layers + r.deposit_balance),
            r.arrival_time_ms,
            r.id,
        ),
    ).id


def try_resume(
    paused: list[RequestState],
    batch: list[RequestState],
    profile: SystemProfile,
    slo: SloConfig,
    current_step: int,
    deposit_snapshot=None,
):
    """First paused request (in pause order) that fits a feasible plan.

    Returns ``(request_id, plan)`` or ``None``. Each candidate is tested by
    solving for the batch plus the candidate, with the other paused
    requests still counted against the violation cap.
    """
    for i, candidate in enumerate(paused):
        others = tuple(p for j, p in enumerate(paused) if j != i)
        result = solve(list(batch) + [candidate], profile, slo, current_step,
                       paused=others, deposit_snapshot=deposit_snapshot)
        if not isinstance(result, Infeasible):
            return candidate.id, result
    return None
