"""Batch decode latency, stalls, transfer volume and capacity feasibility.

The decode-step schedule simulated here: model layers execute strictly in
order, each taking the same compute time; offloaded KV slabs are fetched
from host memory by one asynchronous stream per request, transfers share
the bus bandwidth equally and redistribute the freed share when the
smallest transfer finishes. A layer whose KV is still in flight when the
previous layer's compute ends stalls the pipeline, and the stall pushes
every later layer back by the same amount.

Launch rule (evaluated at each layer boundary, including time zero): a
request with no transfer in flight starts fetching its next offloaded
layer if either that layer is the one about to execute, or the current
layer's KV is resident on GPU. While a request executes a layer out of
the prefetch buffer it must not launch another transfer, since that could
overwrite buffered data in use; consecutive offloaded layers therefore
serialize their fetches.

``batch_decode_latency`` runs this schedule in exact rational arithmetic
so the fixed numeric oracles can assert equality rather than closeness.
``batch_decode_latency_fast`` is the float twin used on the hot paths
(engine steps, violation forecasts); it must stay behaviourally identical
and is property-tested against the exact path.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

from .core import PlacementMatrix, RequestState, SystemProfile, per_layer_compute

# Float-path slack for "transfer completed by the window end". Exact-boundary
# completions (transfer time commensurate with compute) must resolve the same
# way as in rational arithmetic, where t == W counts as completed.
_BOUNDARY_EPS = 1e-9


@dataclass(frozen=True)
class LatencyBreakdown:
    """One decode iteration's predicted cost for a whole batch.

    ``stall_transfer_units`` restates the total stall in units of one
    block-transfer time (stall * bandwidth), the unit the fixed numeric
    oracles count in.
    """

    total_latency_ms: float
    total_compute_ms: float
    total_stall_ms: float
    per_layer_stall_ms: tuple[float, ...]
    blocks_fetched: int
    stall_transfer_units: float


@dataclass
class TransferTask:
    """A single host-to-GPU fetch: one layer's KV slab for one request."""

    request: int
    dest_layer: int
    size: int
    remaining: float

    def __post_init__(self) -> None:
        if not (0 <= self.remaining <= self.size):
            raise ValueError("remaining must lie in [0, size]")


@dataclass(frozen=True)
class CapacityReport:
    resident_blocks: int
    prefetch_buffer: int
    budget: int
    feasible: bool


class DimensionMismatch(ValueError):
    """Placement shape does not match the batch or layer count."""


def _check_dims(placement: PlacementMatrix, batch: list[RequestState], num_layers: int) -> None:
    if placement.batch_size != len(batch):
        raise DimensionMismatch(
            f"placement covers {placement.batch_size} requests, batch has {len(batch)}"
        )
    if placement.num_layers != num_layers:
        raise DimensionMismatch(
            f"placement spans {placement.num_layers} layers, profile has {num_layers}"
        )
    for idx, req in enumerate(batch):
        if placement.request_ids[idx] != req.id:
            raise DimensionMismatch(
                f"placement row {idx} is for request {placement.request_ids[idx]}, "
                f"batch has {req.id}"
            )


def blocks_to_fetch(placement: PlacementMatrix, batch: list[RequestState]) -> int:
    """Total blocks that must cross the bus in one decode iteration."""
    _check_dims(placement, batch, placement.num_layers)
    total = 0
    for idx, req in enumerate(batch):
        total += req.blocks_per_layer * sum(1 for v in placement.rows[idx] if v == 0)
    return total


def prefetch_buffer_requirement(placement: PlacementMatrix, batch: list[RequestState]) -> int:
    """Reserved GPU blocks: the heaviest single layer's offloaded demand."""
    _check_dims(placement, batch, placement.num_layers)
    worst = 0
    for layer in range(placement.num_layers):
        demand = sum(
            req.blocks_per_layer
            for idx, req in enumerate(batch)
            if placement.rows[idx][layer] == 0
        )
        worst = max(worst, demand)
    return worst


def capacity_check(
    placement: PlacementMatrix, batch: list[RequestState], budget: int
) -> CapacityReport:
    """Resident blocks plus the prefetch buffer must fit the GPU budget."""
    if budget < 0:
        raise ValueError("budget must be >= 0")
    _check_dims(placement, batch, placement.num_layers)
    resident = 0
    for idx, req in enumerate(batch):
        resident += req.blocks_per_layer * sum(placement.rows[idx])
    buffer = prefetch_buffer_requirement(placement, batch)
    return CapacityReport(
        resident_blocks=resident,
        prefetch_buffer=buffer,
        budget=budget,
        feasible=resident + buffer <= budget,
    )


def _simulate_stalls(sizes, offload_lists, num_layers, comp, bandwidth, exact):
    """Run the decode-step transfer schedule; returns per-layer stalls.

    ``sizes[r]`` is request r's blocks per layer, ``offload_lists[r]`` its
    offloaded layers in ascending order. With ``exact`` the arithmetic is
    Fraction-exact; otherwise floats with a small completion slack.
    """
    num = Fraction if exact else float
    comp_n = num(comp)
    bw = num(bandwidth)
    zero = num(0)
    nreq = len(sizes)
    offload_sets = [set(ls) for ls in offload_lists]

    in_flight: dict[int, list] = {}  # r -> [dest_layer, remaining]
    nxt = [0] * nreq
    stalls = []

    for layer in range(1, num_layers + 1):
        # Boundary promotions. A request idle on the bus launches its next
        # fetch when it targets this very layer or the current layer's KV
        # is resident (the prefetch buffer is free to receive).
        for r in range(nreq):
            if r in in_flight or nxt[r] >= len(offload_lists[r]):
                continue
            dest = offload_lists[r][nxt[r]]
            if dest == layer or layer not in offload_sets[r]:
                in_flight[r] = [dest, num(sizes[r])]
                nxt[r] += 1

        stall = zero
        if in_flight:
            # Equal-share completion times: with the active set sorted by
            # remaining size, the j-th finisher (1-based) completes at
            # t_j = t_{j-1} + (rem_j - rem_{j-1}) * (n - j + 1) / B.
            order = sorted(in_flight.items(), key=lambda kv: (kv[1][1], kv[1][0], kv[0]))
            n = len(order)
            finish_at = {}
            t = zero
            prev = zero
            for j, (rid, (_dest, rem)) in enumerate(order):
                t = t + (rem - prev) * (n - j) / bw
                finish_at[rid] = t
                prev = rem
            blockers = [rid for rid, (dest, _rem) in in_flight.items() if dest == layer]
            if blockers:
                stall = max(finish_at[rid] for rid in blockers)

            # Advance every stream through the whole window (stall + compute).
            window = stall + comp_n
            slack = zero if exact else _BOUNDARY_EPS * (1.0 + window)
            done = [rid for rid in finish_at if finish_at[rid] <= window + slack]
            k = len(done)
            if k < n:
                # Survivors all received the k-th finisher's size plus an
                # equal share of the remaining window.
                base = order[k - 1][1][1] if k > 0 else zero
                t_k = finish_at[order[k - 1][0]] if k > 0 else zero
                served = base + (window - t_k) * bw / (n - k)
                for rid, entry in in_flight.items():
                    if rid in finish_at and finish_at[rid] > window + slack:
                        entry[1] = entry[1] - served
            for rid in done:
                del in_flight[rid]

        stalls.append(stall)

    assert not in_flight and all(n == len(ls) for n, ls in zip(nxt, offload_lists))
    return stalls


def _schedule_inputs(placement: PlacementMatrix, batch: list[RequestState]):
    sizes = [req.blocks_per_layer for req in batch]
    offload_lists = [list(placement.offloaded_layers(i)) for i in range(len(batch))]
    return sizes, offload_lists


def batch_decode_latency(
    placement: PlacementMatrix, batch: list[RequestState], profile: SystemProfile
) -> LatencyBreakdown:
    """Exact decode-iteration latency for a batch under a placement.

    The caller is responsible for capacity feasibility; this only prices
    the schedule. The computation is exact over rationals, so equal plans
    produce bit-identical results.
    """
    _check_dims(placement, batch, profile.num_layers)
    if profile.bandwidth_blocks_per_ms <= 0:
        raise ValueError("bandwidth must be > 0")
    sizes, offload_lists = _schedule_inputs(placement, batch)
    total_tokens = sum(req.total_tokens for req in batch)
    comp = per_layer_compute(profile, total_tokens)
    stalls = _simulate_stalls(
        sizes, offload_lists, profile.num_layers, comp, profile.bandwidth_blocks_per_ms,
        exact=True,
    )
    comp_total = Fraction(comp) * profile.num_layers
    stall_total = sum(stalls, Fraction(0))
    fetched = sum(s * len(ls) for s, ls in zip(sizes, offload_lists))
    total_compute = float(comp_total)
    total_stall = float(stall_total)
    return LatencyBreakdown(
        total_latency_ms=total_compute + total_stall,
        total_compute_ms=total_compute,
        total_stall_ms=total_stall,
        per_layer_stall_ms=tuple(float(s) for s in stalls),
        blocks_fetched=fetched,
        stall_transfer_units=float(stall_total * Fraction(profile.bandwidth_blocks_per_ms)),
    )


def batch_decode_latency_fast(
    placement: PlacementMatrix, batch: list[RequestState], profile: SystemProfile
) -> LatencyBreakdown:
    """Float twin of ``batch_decode_latency`` for hot paths."""
    _check_dims(placement, batch, profile.num_layers)
    sizes, offload_lists = _schedule_inputs(placement, batch)
    total_tokens = sum(req.total_tokens for req in batch)
    comp = per_layer_compute(profile, total_tokens)
    stalls = _simulate_stalls(
        sizes, offload_lists, profile.num_layers, comp, profile.bandwidth_blocks_per_ms,
        exact=False,
    )
    total_compute = comp * profile.num_layers
    total_stall = sum(stalls)
    fetched = sum(s * len(ls) for s, ls in zip(sizes, offload_lists))
    return LatencyBreakdown(
        total_latency_ms=total_compute + total_stall,
        total_compute_ms=total_compute,
        total_stall_ms=total_stall,
        per_layer_stall_ms=tuple(stalls),
        blocks_fetched=fetched,
        stall_transfer_units=total_stall * profile.bandwidth_blocks_per_ms,
    )


def reconfiguration_delta(
    old: PlacementMatrix, new: PlacementMatrix, batch: list[RequestState]
) -> tuple[int, int]:
    """Block movement needed to switch placements: (host->gpu, gpu->host).

    Both matrices must cover the same batch in the same order. Only flips
    of existing entries count; rows for requests present in one matrix
    but not the other are a batch change, not a reconfiguration.
    """
    if old.request_ids != new.request_ids or old.num_layers != new.num_layers:
        raise DimensionMismatch("placements describe different batches")
    _check_dims(new, batch, new.num_layers)
    host_to_gpu = 0
    gpu_to_host = 0
    for idx, req in enumerate(batch):
        for a, b in zip(old.rows[idx], new.rows[idx]):
            if a == 0 and b == 1:
                host_to_gpu += req.blocks_per_layer
            elif a == 1 and b == 0:
                gpu_to_host += req.blocks_per_layer
    return host_to_gpu, gpu_to_host
