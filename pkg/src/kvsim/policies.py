"""Placement policies: the adaptive solver-driven one and five baselines.

Baselines reproduce the placement disciplines of existing offloading
systems behind the same engine interface:

* ``deepspeed_like``  - keep nothing resident, stage every layer through
  the prefetch buffer.
* ``flexgen_like``    - one uniform stride for all requests, chosen
  offline against the configured worst case and never changed.
* ``flexgen_plus``    - uniform stride re-selected whenever the batch
  composition changes.
* ``slo_aware_uniform`` - uniform stride, preferring the smallest GPU
  footprint that still meets the TBT target, re-selected on batch change.
* ``dynamic_heuristic`` - per-request strides, greedily minimizing the
  number of offloaded layers under the capacity bound, every step.

Baselines run without the token deposit and without pause/resume unless
explicitly grafted on; when their placement cannot fit, the engine falls
back to reactive preemption (whole-request KV drop).
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .core import PlacementMatrix, Plan, RequestState, SloConfig, SystemProfile
from .latency import batch_decode_latency_fast, capacity_check
from .planner import DistanceChoice, enumerate_distances


class PolicyKind(Enum):
    ORBIT = "orbit"
    DEEPSPEED_LIKE = "deepspeed_like"
    FLEXGEN_LIKE = "flexgen_like"
    FLEXGEN_PLUS = "flexgen_plus"
    SLO_AWARE_UNIFORM = "slo_aware_uniform"
    DYNAMIC_HEURISTIC = "dynamic_heuristic"


@dataclass(frozen=True)
class PolicyOptions:
    """Per-policy knobs surfaced on the CLI."""

    static_stride: int | None = None  # flexgen_like; None = select offline
    deposit: bool | None = None  # None = policy default
    victim: str = "largest"  # largest | random | shortest (orbit fallback)
    worst_case_tokens: int | None = None  # flexgen_like offline sizing; None = token cap


class PlacementInfeasible(RuntimeError):
    """The policy cannot produce a capacity-feasible placement."""


def _uniform_stride_choices(num_layers: int) -> list[int | None]:
    """Stride alphabet for the uniform baselines (endpoints included)."""
    return [c.stride for c in enumerate_distances(num_layers)]


def _uniform_placement(batch, num_layers: int, stride: int | None) -> PlacementMatrix:
    ids = [r.id for r in batch]
    return PlacementMatrix.from_strides(ids, num_layers, [stride] * len(batch))


def plan_deepspeed(batch: list[RequestState], profile: SystemProfile) -> PlacementMatrix:
    """Everything offloaded; execution lives entirely in the prefetch buffer."""
    placement = PlacementMatrix.all_offloaded([r.id for r in batch], profile.num_layers)
    if batch:
        demand = sum(r.blocks_per_layer for r in batch)
        if demand > profile.gpu_block_budget:
            raise PlacementInfeasible(
                f"single-layer demand {demand} exceeds budget {profile.gpu_block_budget}"
            )
    return placement


def plan_uniform_static(
    batch: list[RequestState], profile: SystemProfile, distance: int
) -> PlacementMatrix:
    """The fixed offline stride applied to every request, growth included."""
    if distance < 1:
        raise ValueError("distance must be >= 1")
    return _uniform_placement(batch, profile.num_layers, distance)


def _best_uniform_stride(batch, profile, strides=None):
    """Latency-minimal capacity-feasible uniform stride, or None if nothing fits."""
    if strides is None:
        strides = _uniform_stride_choices(profile.num_layers)
    best = None
    for stride in strides:
        placement = _uniform_placement(batch, profile.num_layers, stride)
        report = capacity_check(placement, batch, profile.gpu_block_budget)
        if not report.feasible:
            continue
        breakdown = batch_decode_latency_fast(placement, batch, profile)
        key = (
            breakdown.total_latency_ms,
            breakdown.blocks_fetched,
            DistanceChoice(stride).sort_key(profile.num_layers),
        )
        if best is None or key < best[0]:
            best = (key, stride, placement, breakdown)
    return best


def select_static_stride(profile: SystemProfile, max_batch: int, token_cap: int) -> int:
    """Offline stride selection against the worst expected workload.

    The worst case is a full batch at the per-batch token cap, evenly
    split. If even full offload cannot hold that batch, stride 1 is
    returned and the engine's preemption path deals with overload.
    """
    per_request = max(1, token_cap // max_batch)
    synthetic = [
        RequestState(
            id=i,
            arrival_time_ms=0.0,
            prompt_tokens=per_request,
            target_output_tokens=1,
            block_size=profile.block_size,
        )
        for i in range(max_batch)
    ]
    best = _best_uniform_stride(synthetic, profile)
    if best is None:
        return 1
    stride = best[1]
    return profile.num_layers + 1 if stride is None else stride


def plan_flexgen_plus(batch: list[RequestState], profile: SystemProfile) -> PlacementMatrix:
    """Best uniform stride for the batch as it stands right now."""
    best = _best_uniform_stride(batch, profile)
    if best is None:
        raise PlacementInfeasible("no uniform stride fits the GPU block budget")
    return best[2]


def plan_slo_aware_uniform(
    batch: list[RequestState], profile: SystemProfile, slo: SloConfig
) -> PlacementMatrix:
    """Smallest-footprint uniform stride that still meets the TBT target.

    Candidates are scanned from most offloaded to fully resident; the
    first feasible one whose predicted latency fits the target wins. When
    the target is unreachable the latency-minimal stride is used instead.
    """
    strides = _uniform_stride_choices(profile.num_layers)
    by_footprint = sorted(
        strides, key=lambda s: -DistanceChoice(s).offload_count(profile.num_layers)
    )
    for stride in by_footprint:
        placement = _uniform_placement(batch, profile.num_layers, stride)
        if not capacity_check(placement, batch, profile.gpu_block_budget).feasible:
            continue
        breakdown = batch_decode_latency_fast(placement, batch, profile)
        if breakdown.total_latency_ms <= slo.tbt_target_ms:
            return placement
    best = _best_uniform_stride(batch, profile, strides)
    if best is None:
        raise PlacementInfeasible("no uniform stride fits the GPU block budget")
    return best[2]


def plan_dynamic_heuristic(batch: list[RequestState], profile: SystemProfile) -> PlacementMatrix:
    """Greedy per-request strides minimizing the offloaded layer count.

    Requests are visited in descending KV size (id-ascending on ties) and
    each takes the fewest-offload choice that keeps the assignment
    feasible, with every not-yet-assigned request conservatively held at
    full offload.
    """
    if not batch:
        return PlacementMatrix.all_resident([], profile.num_layers)
    choices = enumerate_distances(profile.num_layers)  # offload count ascending
    order = sorted(range(len(batch)), key=lambda i: (-batch[i].blocks_per_layer, batch[i].id))
    assigned: dict[int, int | None] = {}
    ids = [r.id for r in batch]

    def trial_strides():
        return [assigned.get(i, 1) for i in range(len(batch))]

    for i in order:
        placed = False
        for choice in choices:
            assigned[i] = choice.stride
            placement = PlacementMatrix.from_strides(ids, profile.num_layers, trial_strides())
            if capacity_check(placement, batch, profile.gpu_block_budget).feasible:
                placed = True
                break
        if not placed:
            raise PlacementInfeasible("infeasible even at full offload")
    return PlacementMatrix.from_strides(ids, profile.num_layers, trial_strides())


# ---------------------------------------------------------------------------
# engine-facing drivers


class BaselinePolicy:
    """Wraps one baseline planning function behind the engine interface."""

    uses_pause_resume = False

    def __init__(self, kind: PolicyKind, profile: SystemProfile, slo: SloConfig,
                 options: PolicyOptions, max_batch: int, token_cap: int):
        self.kind = kind
        self.profile = profile
        self.slo = slo
        self.options = options
        self.uses_deposit = bool(options.deposit) if options.deposit is not None else False
        self.replan_every_step = kind == PolicyKind.DYNAMIC_HEURISTIC
        if kind == PolicyKind.FLEXGEN_LIKE:
            worst = options.worst_case_tokens or token_cap
            self.static_stride = (
                options.static_stride
                if options.static_stride is not None
                else select_static_stride(profile, max_batch, worst)
            )
        else:
            self.static_stride = None

    def build_placement(self, batch: list[RequestState]) -> PlacementMatrix:
        if self.kind == PolicyKind.DEEPSPEED_LIKE:
            return plan_deepspeed(batch, self.profile)
        if self.kind == PolicyKind.FLEXGEN_LIKE:
            placement = plan_uniform_static(batch, self.profile, self.static_stride)
            if not capacity_check(placement, batch, self.profile.gpu_block_budget).feasible:
                raise PlacementInfeasible("static stride no longer fits")
            return placement
        if self.kind == PolicyKind.FLEXGEN_PLUS:
            return plan_flexgen_plus(batch, self.profile)
        if self.kind == PolicyKind.SLO_AWARE_UNIFORM:
            placement = plan_slo_aware_uniform(batch, self.profile, self.slo)
            if not capacity_check(placement, batch, self.profile.gpu_block_budget).feasible:
                raise PlacementInfeasible("no uniform stride fits")
            return placement
        if self.kind == PolicyKind.DYNAMIC_HEURISTIC:
            return plan_dynamic_heuristic(batch, self.profile)
        raise ValueError(f"not a baseline: {self.kind}")

    def plan(self, batch: list[RequestState], current_step: int) -> Plan:
        placement = self.build_placement(batch)
        predicted = batch_decode_latency_fast(placement, batch, self.profile)
        return Plan(
            placement=placement,
            predicted_latency=predicted,
            decode_window=1,
            expiry_step=None,
            feasible=True,
        )


class OrbitPolicy:
    """Solver-driven adaptive policy with deposit and pause/resume."""

    uses_pause_resume = True
    replan_every_step = False

    def __init__(self, profile: SystemProfile, slo: SloConfig, options: PolicyOptions):
        self.kind = PolicyKind.ORBIT
        self.profile = profile
        self.slo = slo
        self.options = options
        self.uses_deposit = options.deposit if options.deposit is not None else True
        self.victim = options.victim


def make_policy(kind: PolicyKind, profile: SystemProfile, slo: SloConfig,
                options: PolicyOptions | None = None, max_batch: int = 4,
                token_cap: int = 32768):
    options = options or PolicyOptions()
    if kind == PolicyKind.ORBIT:
        return OrbitPolicy(profile, slo, options)
    return BaselinePolicy(kind, profile, slo, options, max_batch, token_cap)
