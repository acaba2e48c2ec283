"""Placement search: distance pruning, violation forecasting, solving.

A free binary layout over (request, layer) pairs explodes as
``2 ** (R * L)``; restricting each request to evenly spaced offload
strides collapses it to one representative stride per distinct offload
count, at most ``2 * floor(sqrt(L)) - 1`` of them, plus the two endpoints
(fully resident, offload-every-layer). ``solve`` enumerates the resulting
product space exhaustively, prunes by GPU capacity, enforces the windowed
violation cap, and picks the latency-minimal survivor; the window length
is then extended greedily while the cap still holds, which is where the
plan's expiry step comes from.

The candidate sweep runs on a vectorized float evaluator mirroring
``latency.batch_decode_latency_fast``; equivalence between the two is
property-tested. Ranking resolution is one nanosecond, far below any
modeled effect.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .core import (
    PlacementMatrix,
    Plan,
    RequestState,
    SloConfig,
    SystemProfile,
    blocks_for_tokens,
    per_layer_compute,
)
from .latency import _BOUNDARY_EPS, _simulate_stalls, batch_decode_latency_fast

_CHUNK = 65536
_RANK_EPS = 1e-9


@dataclass(frozen=True)
class DistanceChoice:
    """One per-request placement option: an offload stride or full residency.

    Stride ``k`` offloads layers ``{k, 2k, ...}`` (1-indexed), i.e. exactly
    ``L // k`` of them; ``stride=None`` keeps everything resident.
    """

    stride: int | None

    def __post_init__(self) -> None:
        if self.stride is not None and self.stride < 1:
            raise ValueError("stride must be >= 1 or None for resident")

    @property
    def is_resident(self) -> bool:
        return self.stride is None

    def is_endpoint(self, num_layers: int) -> bool:
        return self.stride is None or self.stride == 1 or self.stride > num_layers

    def offload_count(self, num_layers: int) -> int:
        if self.stride is None:
            return 0
        return num_layers // self.stride

    def offloaded_layers(self, num_layers: int) -> tuple[int, ...]:
        if self.stride is None:
            return ()
        return tuple(range(self.stride, num_layers + 1, self.stride))

    def sort_key(self, num_layers: int) -> int:
        # Resident sorts after every stride in the lexicographic tie-break.
        return num_layers + 1 if self.stride is None else self.stride


RESIDENT = DistanceChoice(None)


@dataclass(frozen=True)
class Infeasible:
    """Solver verdict: no placement satisfies the constraints."""

    reason: str = ""


def enumerate_distances(num_layers: int) -> tuple[DistanceChoice, ...]:
    """All placement options for one request, ordered by offload count.

    Between the endpoints there is one representative stride per distinct
    offload count ``L // k`` over ``k = 2..L`` (the largest stride with
    that count, which spaces the offloaded layers widest). The number of
    non-endpoint options is at most ``2 * floor(sqrt(L)) - 1``.
    """
    if num_layers < 1:
        raise ValueError("num_layers must be >= 1")
    counts = sorted({num_layers // k for k in range(2, num_layers + 1)})
    choices = [RESIDENT]
    choices.extend(DistanceChoice(num_layers // c) for c in counts)
    choices.append(DistanceChoice(1))
    return tuple(choices)


def candidate_space(batch, num_layers: int, distances=None):
    """Yield every per-request distance assignment as a placement matrix."""
    if not batch:
        raise ValueError("batch must be non-empty")
    if distances is None:
        distances = enumerate_distances(num_layers)
    ids = [req.id for req in batch]
    for combo in itertools.product(distances, repeat=len(batch)):
        yield PlacementMatrix.from_strides(ids, num_layers, [c.stride for c in combo])


@dataclass(frozen=True)
class ViolationForecast:
    """Predicted per-step violation counts over a decode window.

    ``truncated_at`` is the 1-based step at which the placement stops
    fitting GPU capacity as the KV grows; entries past it are absent.
    """

    per_step_failures: tuple[int, ...]
    window: int
    truncated_at: int | None = None

    def average(self, steps: int | None = None) -> float:
        k = len(self.per_step_failures) if steps is None else steps
        if k == 0:
            return 0.0
        if k > len(self.per_step_failures):
            raise ValueError("forecast shorter than requested window")
        return sum(self.per_step_failures[:k]) / k


def forecast_violations(
    placement: PlacementMatrix,
    batch: list[RequestState],
    profile: SystemProfile,
    slo: SloConfig,
    horizon: int,
    deposit_snapshot=None,
    paused: tuple[RequestState, ...] = (),
) -> ViolationForecast:
    """Simulate the next ``horizon`` steps under a fixed placement.

    Each step grows every decoding request by one token (block demand
    jumps at block boundaries), re-prices the batch latency, and evolves a
    per-request deposit balance: a step faster than the TBT target banks
    margin, a slower one spends it. A violation is charged to a request
    only when the step is late and its simulated deposit is empty. Paused
    requests drain their deposit at wall-clock rate and count one failure
    per step once it empties. A capacity overflow truncates the forecast.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    if deposit_snapshot is None:
        deposit_snapshot = {r.id: r.deposit_balance for r in list(batch) + list(paused)}
    tbt = slo.tbt_target_ms
    bs = profile.block_size
    nl = profile.num_layers
    budget = profile.gpu_block_budget

    base_tokens = [req.total_tokens for req in batch]
    offload_lists = [list(placement.offloaded_layers(i)) for i in range(len(batch))]
    row_resident = [sum(row) for row in placement.rows]
    balance = {r.id: float(deposit_snapshot.get(r.id, 0)) for r in batch}
    paused_balance = {r.id: float(deposit_snapshot.get(r.id, 0)) for r in paused}

    per_step: list[int] = []
    truncated_at = None

    for t in range(1, horizon + 1):
        tokens = [bt + (t - 1) for bt in base_tokens]
        sizes = [blocks_for_tokens(tok, bs) for tok in tokens]

        resident = sum(s * rr for s, rr in zip(sizes, row_resident))
        buffer = 0
        for layer in range(nl):
            demand = sum(
                sizes[i] for i in range(len(batch)) if placement.rows[i][layer] == 0
            )
            buffer = max(buffer, demand)
        if resident + buffer > budget:
            truncated_at = t
            break

        comp = per_layer_compute(profile, sum(tokens))
        stalls = _simulate_stalls(
            sizes, offload_lists, nl, comp, profile.bandwidth_blocks_per_ms, exact=False
        )
        latency = comp * nl + sum(stalls)

        fails = 0
        late = latency > tbt
        for req in batch:
            bal = balance[req.id] + 1.0 - latency / tbt
            if late and bal < 0.0:
                fails += 1
            balance[req.id] = max(bal, 0.0)
        for req in paused:
            bal = paused_balance[req.id] - latency / tbt
            if bal < 0.0:
                fails += 1
            paused_balance[req.id] = max(bal, 0.0)
        per_step.append(fails)

    return ViolationForecast(tuple(per_step), horizon, truncated_at)


# ---------------------------------------------------------------------------
# vectorized candidate evaluation


class _ChoiceTables:
    """Per-choice arrays shared by capacity and latency sweeps."""

    def __init__(self, choices, num_layers: int):
        self.choices = choices
        c = len(choices)
        self.count = np.array([ch.offload_count(num_layers) for ch in choices], dtype=np.int64)
        self.mask = np.zeros((c, num_layers), dtype=np.int64)  # 1 = offloaded
        jmax = max(1, int(self.count.max()))
        self.dests = np.zeros((c, jmax), dtype=np.int64)
        for i, ch in enumerate(choices):
            layers = ch.offloaded_layers(num_layers)
            for l in layers:
                self.mask[i, l - 1] = 1
            self.dests[i, : len(layers)] = layers
        self.jmax = jmax
        self.sort_key = np.array([ch.sort_key(num_layers) for ch in choices], dtype=np.int64)


def _vector_latencies(tables: _ChoiceTables, idx: np.ndarray, sizes, comp: float, bw: float,
                      num_layers: int) -> np.ndarray:
    """Decode latency for many stride candidates at once.

    Mirrors ``latency._simulate_stalls`` (float flavour) with the candidate
    axis vectorized; ``idx[c, r]`` selects request ``r``'s choice.
    """
    n, r_count = idx.shape
    rem = np.zeros((n, r_count))
    dest = np.zeros((n, r_count), dtype=np.int64)
    ptr = np.zeros((n, r_count), dtype=np.int64)
    stall_tot = np.zeros(n)
    counts_nr = tables.count[idx]
    sizes_row = np.broadcast_to(np.asarray(sizes, dtype=float)[None, :], (n, r_count))

    for layer in range(1, num_layers + 1):
        if not (ptr < counts_nr).any() and not (rem > 0.0).any():
            break  # every transfer done; the rest is pure compute
        nd = tables.dests[idx, np.minimum(ptr, tables.jmax - 1)]
        elig = (
            (rem <= 0.0)
            & (ptr < counts_nr)
            & ((nd == layer) | (tables.mask[idx, layer - 1] == 0))
        )
        if elig.any():
            rem = np.where(elig, sizes_row, rem)
            dest = np.where(elig, nd, dest)
            ptr = ptr + elig

        active = rem > 0.0
        nact = active.sum(axis=1)
        if not nact.any():
            continue
        a = np.where(active, rem, np.inf)
        order = np.argsort(a, axis=1, kind="stable")
        sa = np.take_along_axis(a, order, axis=1)
        sa_fin = np.where(np.isfinite(sa), sa, 0.0)
        j = np.arange(r_count)
        valid = j[None, :] < nact[:, None]
        mult = np.clip(nact[:, None] - j, 0, None)
        prev = np.concatenate([np.zeros((n, 1)), sa_fin[:, :-1]], axis=1)
        seg = np.where(valid, (sa_fin - prev) * mult, 0.0)
        t = np.cumsum(seg, axis=1) / bw

        blocking = (dest == layer) & active
        blk_sorted = np.take_along_axis(blocking, order, axis=1)
        stall = np.max(np.where(blk_sorted & valid, t, 0.0), axis=1)
        window = stall + comp
        slack = _BOUNDARY_EPS * (1.0 + window)

        done = valid & (t <= (window + slack)[:, None])
        k = done.sum(axis=1)
        k_idx = np.maximum(k - 1, 0)[:, None]
        base = np.where(k > 0, np.take_along_axis(sa_fin, k_idx, axis=1)[:, 0], 0.0)
        t_k = np.where(k > 0, np.take_along_axis(t, k_idx, axis=1)[:, 0], 0.0)
        surv = nact - k
        served = np.where(surv > 0, base + (window - t_k) * bw / np.maximum(surv, 1), 0.0)

        done_orig = np.zeros_like(active)
        np.put_along_axis(done_orig, order, done, axis=1)
        rem = np.where(done_orig, 0.0, np.where(active, rem - served[:, None], rem))
        rem = np.where(active & ~done_orig & (rem <= 0.0), 0.0, rem)
        dest = np.where(rem > 0.0, dest, 0)
        stall_tot += stall

    return comp * num_layers + stall_tot


def _iter_candidate_chunks(num_choices: int, batch_size: int):
    total = num_choices**batch_size
    shape = (num_choices,) * batch_size
    for start in range(0, total, _CHUNK):
        flat = np.arange(start, min(start + _CHUNK, total))
        yield np.stack(np.unravel_index(flat, shape), axis=1)


def _feasible_candidates(tables, batch, profile):
    """Capacity-filter the whole candidate space."""
    sizes = np.array([req.blocks_per_layer for req in batch], dtype=np.int64)
    nl = profile.num_layers
    budget = profile.gpu_block_budget
    resident_factor = nl - tables.count

    keep_idx = []
    keep_fetch = []
    for idx in _iter_candidate_chunks(len(tables.choices), len(batch)):
        resident = np.zeros(len(idx), dtype=np.int64)
        fetch = np.zeros(len(idx), dtype=np.int64)
        for r in range(len(batch)):
            ch = idx[:, r]
            resident += sizes[r] * resident_factor[ch]
            fetch += sizes[r] * tables.count[ch]
        rough = resident <= budget  # necessary even with a zero buffer
        if not rough.any():
            continue
        idx = idx[rough]
        resident = resident[rough]
        fetch = fetch[rough]
        demand = np.zeros((len(idx), nl), dtype=np.int64)
        for r in range(len(batch)):
            demand += sizes[r] * tables.mask[idx[:, r]]
        ok = resident + demand.max(axis=1) <= budget
        if ok.any():
            keep_idx.append(idx[ok])
            keep_fetch.append(fetch[ok])
    if not keep_idx:
        return None
    return np.concatenate(keep_idx), np.concatenate(keep_fetch), sizes


class _CandidateRanker:
    """Capacity-feasible candidates in (latency, fetch, lex) order, lazily.

    The exact latency sweep is the expensive part, so candidates are
    evaluated in chunks ordered by a latency lower bound (bus work
    ``fetch / bandwidth`` cannot exceed the step latency, nor can pure
    compute). A ranked entry is handed out only once every unevaluated
    candidate's bound exceeds it, which keeps the order exact while
    skipping most of the space whenever the walk stops early.
    """

    def __init__(self, tables, batch, profile):
        self.tables = tables
        self.empty = True
        found = _feasible_candidates(tables, batch, profile)
        if found is None:
            return
        self.empty = False
        idx, fetch, sizes = found
        self.idx = idx
        self.fetch = fetch
        self.sizes = sizes.astype(float)
        self.profile = profile
        self.comp = per_layer_compute(profile, sum(r.total_tokens for r in batch))
        bw = profile.bandwidth_blocks_per_ms
        lower = np.maximum(self.comp * profile.num_layers, fetch / bw)
        self.lb_order = np.argsort(lower, kind="stable")
        self.lb_sorted = lower[self.lb_order]
        self.pos = 0
        self.lex = np.stack(
            [tables.sort_key[idx[:, r]] for r in range(idx.shape[1])], axis=1
        )
        self._ranked_rows = None
        self._ranked_lat = None

    def _expand(self) -> None:
        take = self.lb_order[self.pos : self.pos + _CHUNK]
        self.pos += len(take)
        lat = _vector_latencies(
            self.tables, self.idx[take], self.sizes, self.comp,
            self.profile.bandwidth_blocks_per_ms, self.profile.num_layers,
        )
        if self._ranked_rows is None:
            rows, lats = self.idx[take], lat
            fetch, lex = self.fetch[take], self.lex[take]
        else:
            rows = np.concatenate([self._ranked_rows, self.idx[take]])
            lats = np.concatenate([self._ranked_lat, lat])
            fetch = np.concatenate([self._ranked_fetch, self.fetch[take]])
            lex = np.concatenate([self._ranked_lex, self.lex[take]])
        keys = tuple(lex[:, r] for r in reversed(range(lex.shape[1])))
        order = np.lexsort(keys + (fetch, np.round(lats / _RANK_EPS)))
        self._ranked_rows = rows[order]
        self._ranked_lat = lats[order]
        self._ranked_fetch = fetch[order]
        self._ranked_lex = lex[order]

    def get(self, k: int):
        """k-th best candidate as (choice indices, latency), or None."""
        if self.empty:
            return None
        while True:
            have = 0 if self._ranked_rows is None else len(self._ranked_rows)
            exhausted = self.pos >= len(self.lb_sorted)
            if have > k and (
                exhausted or self._ranked_lat[k] + _RANK_EPS < self.lb_sorted[self.pos]
            ):
                return self._ranked_rows[k], self._ranked_lat[k]
            if exhausted:
                return None if have <= k else (self._ranked_rows[k], self._ranked_lat[k])
            self._expand()


def _build_plan(placement, batch, profile, slo, current_step, forecast):
    cap = slo.violation_cap
    fails = forecast.per_step_failures
    delta = slo.window_min
    while (
        delta < slo.window_max
        and delta < len(fails)
        and sum(fails[: delta + 1]) <= cap * (delta + 1) + 1e-9
    ):
        delta += 1
    predicted = batch_decode_latency_fast(placement, batch, profile)
    return Plan(
        placement=placement,
        predicted_latency=predicted,
        decode_window=delta,
        expiry_step=current_step + delta,
        feasible=True,
    )


def solve(
    batch: list[RequestState],
    profile: SystemProfile,
    slo: SloConfig,
    current_step: int,
    paused: tuple[RequestState, ...] = (),
    deposit_snapshot=None,
):
    """Pick the latency-minimal feasible placement and its decode window.

    Candidates failing the capacity bound at current sizes are dropped;
    among the rest, the first (best-ranked) one whose forecast over
    ``window_min`` steps keeps the average violation count within the cap
    wins. Returns ``Infeasible`` when nothing passes, which is the
    controller's cue to pause a request. ``deposit_snapshot`` overrides the
    per-request deposit balances seeding the forecast (the engine passes
    fractional pacing slack here).
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    tables = _ChoiceTables(enumerate_distances(profile.num_layers), profile.num_layers)
    ranker = _CandidateRanker(tables, batch, profile)
    if ranker.empty:
        return Infeasible("no placement fits the GPU block budget")
    ids = [req.id for req in batch]
    cap = slo.violation_cap
    snapshot = deposit_snapshot or {}
    tbt = slo.tbt_target_ms
    balances = [float(snapshot.get(r.id, r.deposit_balance)) for r in batch]
    paused_bal = [float(snapshot.get(p.id, p.deposit_balance)) for p in paused]

    k = 0
    while True:
        entry = ranker.get(k)
        if entry is None:
            return Infeasible("violation cap unsatisfiable for every placement")
        row, lat = entry
        k += 1
        # Exact pre-rejection: failure counts are non-decreasing over the
        # window (sizes grow, balances only drain once late), so a
        # first-step overload already exceeds any window average.
        fails1 = 0
        if lat > tbt:
            fails1 += sum(1 for b in balances if b + 1.0 - lat / tbt < 0.0)
        fails1 += sum(1 for b in paused_bal if b - lat / tbt < 0.0)
        if fails1 > cap + 1e-9:
            continue
        strides = [tables.choices[c].stride for c in row]
        placement = PlacementMatrix.from_strides(ids, profile.num_layers, strides)
        forecast = forecast_violations(
            placement, batch, profile, slo, slo.window_min,
            deposit_snapshot=deposit_snapshot, paused=tuple(paused),
        )
        if len(forecast.per_step_failures) < slo.window_min:
            continue
        if sum(forecast.per_step_failures) > cap * slo.window_min + 1e-9:
            continue
        full = forecast_violations(
            placement, batch, profile, slo, slo.window_max,
            deposit_snapshot=deposit_snapshot, paused=tuple(paused),
        )
        return _build_plan(placement, batch, profile, slo, current_step, full)


def solve_one_step_ahead(
    batch: list[RequestState],
    profile: SystemProfile,
    slo: SloConfig,
    current_step: int,
    paused: tuple[RequestState, ...] = (),
    deposit_snapshot=None,
):
    """Solve against next step's token counts; install the plan one step later."""
    ahead = [replace(req, generated_tokens=req.generated_tokens + 1) for req in batch]
    result = solve(ahead, profile, slo, current_step + 1, paused=paused,
                   deposit_snapshot=deposit_snapshot)
    if isinstance(result, Infeasible):
        return result
    placement = PlacementMatrix(
        tuple(req.id for req in batch), profile.num_layers, result.placement.rows
    )
    return Plan(
        placement=placement,
        predicted_latency=result.predicted_latency,
        decode_window=result.decode_window,
        expiry_step=result.expiry_step,
        feasible=True,
    )


def solve_capacity_only(
    batch: list[RequestState],
    profile: SystemProfile,
    slo: SloConfig,
    current_step: int,
):
    """Latency-minimal placement under the capacity bound alone.

    Fallback used when the violation cap cannot be met for any batch (for
    example when several paused requests have exhausted their deposits but
    the machine would otherwise sit idle). The window comes from capacity
    growth only.
    """
    if not batch:
        raise ValueError("batch must be non-empty")
    tables = _ChoiceTables(enumerate_distances(profile.num_layers), profile.num_layers)
    ranker = _CandidateRanker(tables, batch, profile)
    if ranker.empty:
        return Infeasible("no placement fits the GPU block budget")
    ids = [req.id for req in batch]
    row, _lat = ranker.get(0)
    strides = [tables.choices[c].stride for c in row]
    placement = PlacementMatrix.from_strides(ids, profile.num_layers, strides)
    forecast = forecast_violations(placement, batch, profile, slo, slo.window_max)
    horizon = len(forecast.per_step_failures)
    delta = max(1, min(horizon, slo.window_max))
    predicted = batch_decode_latency_fast(placement, batch, profile)
    return Plan(
        placement=placement,
        predicted_latency=predicted,
        decode_window=delta,
        expiry_step=current_step + delta,
        feasible=True,
    )
