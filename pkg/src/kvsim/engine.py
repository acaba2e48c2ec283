"""Deterministic discrete-event execution of the serving loop.

The engine ties everything together: arrivals queue up, admitted requests
prefill while decoding pauses, decode steps are priced by the latency
model plus any reconfiguration charge, plans install at step boundaries,
token deposits pace deliveries, and the pause/resume fallback kicks in
when the solver reports infeasibility.

The clock is integer microseconds. Every run produces an in-memory event
log (one record per event) from which all metrics derive, so a saved log
can be re-rendered into the same report later. Identical inputs give a
bit-identical log.
"""

from __future__ import annotations

import heapq
import random
from collections import deque
from dataclasses import dataclass

from .controller import (
    ExhaustedBatchError,
    Trigger,
    TriggerState,
    check_triggers,
    ewma_update,
    select_pause_victim,
    try_resume,
)
from .core import (
    PlacementMatrix,
    Plan,
    RequestState,
    RequestStatus,
    SloConfig,
    SystemProfile,
    blocks_for_tokens,
    per_layer_compute,
)
from .latency import batch_decode_latency_fast, capacity_check, prefetch_buffer_requirement
from .metrics import MetricsReport, collect_metrics
from .planner import Infeasible, solve, solve_capacity_only
from .policies import OrbitPolicy, PlacementInfeasible, PolicyKind, make_policy
from .workload import Trace

# Same-time events resolve in this fixed kind order, then by sequence number.
ARRIVAL, PREFILL_DONE, DECODE_STEP_DONE, PLAN_READY, TOKEN_RELEASE = range(5)

_MAX_EVENTS = 50_000_000


class ConfigurationError(ValueError):
    """The run cannot make progress with these inputs."""


class CapacityError(RuntimeError):
    """A plan would overcommit the GPU block budget (planner bug)."""


@dataclass
class RunConfig:
    max_batch: int = 4
    batch_token_cap: int = 32768
    scheduler: str = "fcfs"  # fcfs | srtf
    seed: int = 0
    solver_overhead_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.max_batch < 1:
            raise ConfigurationError("max_batch must be >= 1")
        if self.batch_token_cap < 1:
            raise ConfigurationError("batch_token_cap must be >= 1")
        if self.scheduler not in ("fcfs", "srtf"):
            raise ConfigurationError(f"unknown scheduler {self.scheduler!r}")


def _ms_to_us(ms: float) -> int:
    return int(round(ms * 1000.0))


class TokenDeposit:
    """Per-request delivery buffer that paces tokens at the TBT target.

    While tokens are queued, deliveries land exactly one TBT interval
    apart; a token generated after the queue drained and past the deadline
    goes out immediately (that is the visible violation). When disabled
    the deposit degenerates to delivery-at-generation.
    """

    def __init__(self, tbt_us: int, enabled: bool = True):
        self.tbt_us = tbt_us
        self.enabled = enabled
        self.queue: deque[tuple[int, int]] = deque()  # (seq, gen_us)
        self.last_delivery_us: int | None = None
        self.epoch = 0  # bumping it invalidates scheduled releases
        self.release_scheduled = False

    @property
    def balance(self) -> int:
        return len(self.queue)

    def delivery_due(self, gen_us: int) -> int:
        if self.last_delivery_us is None:
            return gen_us
        return max(gen_us, self.last_delivery_us + self.tbt_us)

    def push(self, seq: int, gen_us: int) -> None:
        self.queue.append((seq, gen_us))

    def pop(self, now_us: int) -> tuple[int, int]:
        seq, gen = self.queue.popleft()
        self.last_delivery_us = now_us
        return seq, gen

    def flush(self, now_us: int) -> list[tuple[int, int]]:
        out = list(self.queue)
        self.queue.clear()
        if out:
            self.last_delivery_us = now_us
        self.epoch += 1
        self.release_scheduled = False
        return out


GPU, HOST, REMOVABLE = "g", "h", "r"


class BlockTable:
    """Per (request, layer) KV location: GPU, host, or removable.

    Removable marks a paused request's still-resident layers; they leave
    the GPU lazily, only when live placements need the space, which keeps
    a later resume cheap. The physical invariant is
    gpu + removable + buffer reservation <= budget.
    """

    def __init__(self, num_layers: int, budget: int):
        self.num_layers = num_layers
        self.budget = budget
        self.locations: dict[int, list[str]] = {}
        self.blocks: dict[int, int] = {}
        self.buffer_reservation = 0
        self._pause_seq: dict[int, int] = {}
        self._next_pause_seq = 0

    def add_request(self, request_id: int, row, blocks: int) -> None:
        self.locations[request_id] = [GPU if v else HOST for v in row]
        self.blocks[request_id] = blocks

    def drop_request(self, request_id: int) -> None:
        self.locations.pop(request_id, None)
        self.blocks.pop(request_id, None)
        self._pause_seq.pop(request_id, None)

    def mark_removable(self, request_id: int, blocks: int = 0) -> None:
        if request_id not in self.locations:
            # paused before any placement was installed: the prefill KV went
            # straight to host memory, nothing resident to mark
            self.add_request(request_id, [0] * self.num_layers, blocks)
        locs = self.locations[request_id]
        for i, loc in enumerate(locs):
            if loc == GPU:
                locs[i] = REMOVABLE
        self._pause_seq[request_id] = self._next_pause_seq
        self._next_pause_seq += 1

    def clear_pause(self, request_id: int) -> None:
        self._pause_seq.pop(request_id, None)

    def _count(self, kind: str) -> int:
        total = 0
        for rid, locs in self.locations.items():
            b = self.blocks[rid]
            total += b * sum(1 for loc in locs if loc == kind)
        return total

    def gpu_blocks(self) -> int:
        return self._count(GPU)

    def removable_blocks(self) -> int:
        return self._count(REMOVABLE)

    def evict_for_space(self) -> int:
        """Demand-driven eviction: flip removable layers to host until the
        physical invariant holds. Latest-paused requests lose layers first
        (the earliest-paused resumes first under FIFO), deepest layer first.
        """
        evicted = 0
        need = self.gpu_blocks() + self.buffer_reservation + self.removable_blocks() - self.budget
        if need <= 0:
            return 0
        order = sorted(self._pause_seq, key=lambda rid: -self._pause_seq[rid])
        for rid in order:
            locs = self.locations[rid]
            b = self.blocks[rid]
            for layer in range(self.num_layers - 1, -1, -1):
                if need <= 0:
                    return evicted
                if locs[layer] == REMOVABLE:
                    locs[layer] = HOST
                    need -= b
                    evicted += b
        return evicted

    def audit_ok(self) -> bool:
        return (
            self.gpu_blocks() + self.removable_blocks() + self.buffer_reservation
            <= self.budget
        )


def apply_plan(
    plan: Plan, block_table: BlockTable, batch: list[RequestState], profile: SystemProfile
) -> float:
    """Install a placement; returns the reconfiguration charge in ms.

    Host-to-GPU flips are priced as transfer work for the next step;
    evictions and rows for freshly admitted requests (whose KV is written
    straight to its placed location during prefill) are free. Re-applying
    the current placement costs nothing and just refreshes block counts
    and the prefetch buffer reservation.
    """
    placement = plan.placement
    charge_blocks = 0
    for idx, req in enumerate(batch):
        row = placement.rows[idx]
        block_table.blocks[req.id] = req.blocks_per_layer
        if req.id not in block_table.locations:
            block_table.add_request(req.id, row, req.blocks_per_layer)
            continue
        locs = block_table.locations[req.id]
        for layer in range(placement.num_layers):
            want = row[layer]
            cur = locs[layer]
            if want == 1 and cur == HOST:
                charge_blocks += req.blocks_per_layer
                locs[layer] = GPU
            elif want == 1 and cur == REMOVABLE:
                locs[layer] = GPU
            elif want == 0 and cur in (GPU, REMOVABLE):
                locs[layer] = HOST
    block_table.buffer_reservation = prefetch_buffer_requirement(placement, batch)
    if block_table.gpu_blocks() + block_table.buffer_reservation > block_table.budget:
        raise CapacityError("plan overcommits the GPU block budget")
    block_table.evict_for_space()
    assert block_table.audit_ok()
    return charge_blocks / profile.bandwidth_blocks_per_ms


class Simulation:
    """Single-owner deterministic run of one trace under one policy."""

    def __init__(self, trace: Trace, policy, profile: SystemProfile, slo: SloConfig,
                 config: RunConfig | None = None):
        self.profile = profile
        self.slo = slo
        self.config = config or RunConfig()
        self.policy = policy
        self.rng = random.Random(self.config.seed)

        self.requests: dict[int, RequestState] = {}
        self.heap: list = []
        self._seq = 0
        self.log: list[dict] = []

        self.waiting: list[RequestState] = []
        self.batch: list[RequestState] = []
        self.prefilling: list[RequestState] = []
        self.paused: list[RequestState] = []
        self.deposits: dict[int, TokenDeposit] = {}
        self.table = BlockTable(profile.num_layers, profile.gpu_block_budget)

        self.active_plan: Plan | None = None
        self.ready_plan: Plan | None = None
        self.solve_in_flight = False
        self.trigger_state: TriggerState | None = None
        self.steps_done = 0
        self._last_latency_ms = 0.0
        self._step_scheduled = False
        self._prefill_pending = False
        self.now_us = 0

        tbt_us = _ms_to_us(slo.tbt_target_ms)
        for i, treq in enumerate(trace.requests):
            worst_blocks = blocks_for_tokens(
                treq.prompt_tokens + treq.output_tokens, profile.block_size
            )
            if worst_blocks > profile.gpu_block_budget:
                raise ConfigurationError(
                    f"request {i}: single-layer demand {worst_blocks} blocks exceeds "
                    f"the GPU budget {profile.gpu_block_budget}"
                )
            if treq.prompt_tokens + treq.output_tokens > self.config.batch_token_cap:
                raise ConfigurationError(
                    f"request {i}: {treq.prompt_tokens + treq.output_tokens} tokens "
                    f"exceed the batch token cap {self.config.batch_token_cap}"
                )
            req = RequestState(
                id=i,
                arrival_time_ms=float(treq.arrival_ms),
                prompt_tokens=treq.prompt_tokens,
                target_output_tokens=treq.output_tokens,
                block_size=profile.block_size,
            )
            self.requests[i] = req
            self.deposits[i] = TokenDeposit(tbt_us, enabled=self.policy.uses_deposit)
            self._push(treq.arrival_ms * 1000, ARRIVAL, (i,))

        self._record(0, "run_header", None, {
            "policy": self.policy.kind.value,
            "seed": self.config.seed,
            "tbt_ms": slo.tbt_target_ms,
            "tpot_ms": slo.tpot_target_ms,
            "budget": profile.gpu_block_budget,
            "num_layers": profile.num_layers,
            "block_size": profile.block_size,
            "scheduler": self.config.scheduler,
            "deposit": self.policy.uses_deposit,
            "requests": len(trace.requests),
        })

    # -- plumbing ----------------------------------------------------------

    def _push(self, time_us: int, kind: int, payload: tuple) -> None:
        self._seq += 1
        heapq.heappush(self.heap, (int(time_us), kind, self._seq, payload))

    def _record(self, time_us: int, kind: str, request_id, payload: dict) -> None:
        self.log.append(
            {"time_us": int(time_us), "kind": kind, "request_id": request_id,
             "payload": payload}
        )

    @property
    def _next_step(self) -> int:
        return self.steps_done + 1

    # -- main loop ---------------------------------------------------------

    def execute(self) -> list[dict]:
        handlers = {
            ARRIVAL: self._on_arrival,
            PREFILL_DONE: self._on_prefill_done,
            DECODE_STEP_DONE: self._on_step_done,
            PLAN_READY: self._on_plan_ready,
            TOKEN_RELEASE: self._on_token_release,
        }
        events = 0
        while self.heap:
            events += 1
            if events > _MAX_EVENTS:
                raise RuntimeError("event budget exhausted; simulation is not draining")
            time_us, kind, _seq, payload = heapq.heappop(self.heap)
            self.now_us = time_us
            handlers[kind](time_us, *payload)
        unfinished = [r.id for r in self.requests.values() if r.status != RequestStatus.FINISHED]
        if unfinished:
            raise RuntimeError(f"run ended with unfinished requests: {unfinished}")
        return self.log

    # -- event handlers ----------------------------------------------------

    def _on_arrival(self, t: int, request_id: int) -> None:
        req = self.requests[request_id]
        self.waiting.append(req)
        self._record(t, "arrival", request_id, {
            "prompt": req.prompt_tokens, "output": req.target_output_tokens,
        })
        if self.heap and self.heap[0][0] == t and self.heap[0][1] == ARRIVAL:
            return  # coalesce same-instant arrivals into one admission pass
        if not self._step_scheduled and not self._prefill_pending:
            self._try_admit(t)

    def _on_prefill_done(self, t: int, ids: tuple) -> None:
        self._prefill_pending = False
        for rid in ids:
            req = self.requests[rid]
            req.transition_to(RequestStatus.DECODING)
            self.batch.append(req)
        self.prefilling = []
        self._record(t, "prefill_done", None, {"ids": list(ids)})
        self._boundary(t, batch_changed=True, completions=False)

    def _on_step_done(self, t: int) -> None:
        self._step_scheduled = False
        self.steps_done += 1
        observed = self._last_latency_ms
        for req in list(self.batch):
            req.record_generated_token()
            self.table.blocks[req.id] = req.blocks_per_layer
            self._deposit_token(req, t)
        finished = [r for r in self.batch if r.generated_tokens >= r.target_output_tokens]
        for req in finished:
            self._finish(req, t)
        self._boundary(t, batch_changed=bool(finished), completions=bool(finished),
                       observed=observed)

    def _on_plan_ready(self, t: int, plan: Plan) -> None:
        self.ready_plan = plan
        self.solve_in_flight = False

    def _on_token_release(self, t: int, request_id: int, epoch: int) -> None:
        deposit = self.deposits[request_id]
        if epoch != deposit.epoch or not deposit.queue:
            return
        seq, gen = deposit.pop(t)
        deposit.release_scheduled = False
        req = self.requests[request_id]
        req.deposit_balance = deposit.balance
        req.deposit_delivery_cursor_us = t
        self._record(t, "deliver", request_id, {"seq": seq, "gen_us": gen, "burst": False})
        if deposit.queue:
            deposit.release_scheduled = True
            self._push(t + deposit.tbt_us, TOKEN_RELEASE, (request_id, deposit.epoch))

    # -- deposit ------------------------------------------------------------

    def _deposit_slack(self, req: RequestState, now_us: int) -> float:
        """Remaining pacing slack of a request's deposit, in TBT units.

        The integer queue length overstates the masking headroom (a token
        generated at this very boundary is queued but already due), so the
        solver is fed the time until the queue would drain instead.
        """
        dep = self.deposits[req.id]
        if not dep.enabled:
            return 0.0
        if not dep.queue:
            if dep.last_delivery_us is None:
                return 0.0
            return max(0.0, (dep.last_delivery_us + dep.tbt_us - now_us) / dep.tbt_us)
        first_due = dep.delivery_due(dep.queue[0][1])
        drained_at = first_due + (len(dep.queue) - 1) * dep.tbt_us
        return max(0.0, (drained_at - now_us) / dep.tbt_us)

    def _slack_snapshot(self, now_us: int) -> dict[int, float]:
        return {
            r.id: self._deposit_slack(r, now_us)
            for r in self.batch + self.paused
        }

    def _deposit_token(self, req: RequestState, gen_us: int) -> None:
        deposit = self.deposits[req.id]
        seq = req.generated_tokens
        if not deposit.enabled:
            deposit.last_delivery_us = gen_us
            req.deposit_delivery_cursor_us = gen_us
            self._record(gen_us, "deliver", req.id, {"seq": seq, "gen_us": gen_us,
                                                     "burst": False})
            return
        due = deposit.delivery_due(gen_us)
        deposit.push(seq, gen_us)
        req.deposit_balance = deposit.balance
        if not deposit.release_scheduled:
            deposit.release_scheduled = True
            self._push(due, TOKEN_RELEASE, (req.id, deposit.epoch))

    def _finish(self, req: RequestState, t: int) -> None:
        """Flush the deposit in one burst; no violations accrue past finish."""
        deposit = self.deposits[req.id]
        for seq, gen in deposit.flush(t):
            self._record(t, "deliver", req.id, {"seq": seq, "gen_us": gen, "burst": True})
        req.deposit_balance = 0
        req.deposit_delivery_cursor_us = t
        req.transition_to(RequestStatus.FINISHED)
        self.batch.remove(req)
        self.table.drop_request(req.id)
        self._record(t, "finish", req.id, {})

    # -- admission / pause / resume / preemption ----------------------------

    def _queue_order(self, req: RequestState):
        if self.config.scheduler == "srtf":
            return (req.target_output_tokens - req.generated_tokens, req.arrival_time_ms, req.id)
        return (req.arrival_time_ms, req.id)

    def _try_admit(self, t: int) -> bool:
        if self._prefill_pending or not self.waiting:
            return False
        self.waiting.sort(key=self._queue_order)
        occupancy = len(self.batch) + len(self.paused)
        projected = sum(r.prompt_tokens + r.target_output_tokens
                        for r in self.batch + self.paused)
        admitted: list[RequestState] = []
        while self.waiting and occupancy + len(admitted) < self.config.max_batch:
            head = self.waiting[0]
            head_tokens = head.prompt_tokens + head.target_output_tokens
            if projected + head_tokens > self.config.batch_token_cap:
                break
            projected += head_tokens
            admitted.append(self.waiting.pop(0))
        if not admitted:
            return False
        duration_ms = sum(r.total_tokens for r in admitted) * self.profile.prefill_per_token_ms
        for req in admitted:
            req.transition_to(RequestStatus.PREFILLING)
        self.prefilling = admitted
        self._prefill_pending = True
        ids = tuple(r.id for r in admitted)
        self._record(t, "prefill_start", None,
                     {"ids": list(ids), "duration_us": _ms_to_us(duration_ms)})
        self._push(t + _ms_to_us(duration_ms), PREFILL_DONE, (ids,))
        return True

    def _select_victim(self) -> int:
        mode = getattr(self.policy, "victim", "largest")
        eligible = [r for r in self.batch if r.status == RequestStatus.DECODING]
        if not eligible:
            raise ExhaustedBatchError("no decoding request available")
        if mode == "largest":
            return select_pause_victim(self.batch, self.profile.num_layers)
        if mode == "shortest":
            return min(
                eligible,
                key=lambda r: (
                    r.blocks_per_layer * self.profile.num_layers + r.deposit_balance,
                    r.arrival_time_ms,
                    r.id,
                ),
            ).id
        if mode == "random":
            return self.rng.choice(sorted(r.id for r in eligible))
        raise ConfigurationError(f"unknown victim policy {mode!r}")

    def _do_pause(self, request_id: int, t: int) -> None:
        req = self.requests[request_id]
        req.transition_to(RequestStatus.PAUSED)
        self.batch.remove(req)
        self.paused.append(req)
        self.table.mark_removable(request_id, req.blocks_per_layer)
        self._record(t, "pause", request_id, {})

    def _do_resume(self, request_id: int, t: int) -> None:
        req = self.requests[request_id]
        req.transition_to(RequestStatus.DECODING)
        self.paused.remove(req)
        self.batch.append(req)
        self.table.clear_pause(request_id)
        self._record(t, "resume", request_id, {})

    def _preempt_youngest(self, t: int) -> None:
        """Reactive preemption: requeue the latest admission, KV dropped whole."""
        victim = self.batch[-1]
        victim.transition_to(RequestStatus.QUEUED)
        self.batch.remove(victim)
        self.table.drop_request(victim.id)
        self.waiting.append(victim)
        self._record(t, "preempt", victim.id, {})

    # -- boundary logic -----------------------------------------------------

    def _boundary(self, t: int, batch_changed: bool, completions: bool,
                  observed: float | None = None) -> None:
        if completions and self.paused and self.batch:
            res = try_resume(self.paused, self.batch, self.profile, self.slo,
                             self._next_step, deposit_snapshot=self._slack_snapshot(t))
            if res is not None:
                self._do_resume(res[0], t)
                batch_changed = True
        if self.waiting and self._try_admit(t):
            return  # decode pauses during prefill
        if not self.batch:
            if self.paused:
                # Idle machine with paused work: resume the earliest paused
                # request unconditionally so the system always drains.
                self._do_resume(self.paused[0].id, t)
                batch_changed = True
            else:
                return
        if isinstance(self.policy, OrbitPolicy):
            plan, charge_ms = self._plan_orbit(t, batch_changed, observed)
        else:
            plan, charge_ms = self._plan_baseline(t, batch_changed)
        self._schedule_step(t, plan, charge_ms)

    # -- adaptive policy ----------------------------------------------------

    def _plan_orbit(self, t: int, batch_changed: bool, observed: float | None):
        if self.active_plan is None or batch_changed:
            trigger = Trigger.REPLAN_BATCH
        else:
            predicted = self.active_plan.predicted_latency.total_latency_ms
            expiry = self.active_plan.expiry_step
            trigger = check_triggers(
                observed if observed is not None else predicted,
                predicted,
                False,
                self._next_step,
                expiry if expiry is not None else float("inf"),
                self.slo.profile_mismatch_threshold,
            )
        if trigger == Trigger.NONE:
            return self._install(self.active_plan, t)

        self._record(t, "replan", None, {"reason": trigger.value})
        if trigger == Trigger.REPLAN_PROFILE:
            comp = per_layer_compute(self.profile, sum(r.total_tokens for r in self.batch))
            state = self.trigger_state or TriggerState(
                last_predicted_latency_ms=self.active_plan.predicted_latency.total_latency_ms,
                ewma_compute_ms=comp,
                ewma_bandwidth=self.profile.bandwidth_blocks_per_ms,
            )
            self.trigger_state = ewma_update(
                state, comp, self.profile.bandwidth_blocks_per_ms, self.profile.ewma_decay
            )

        stale_usable = (
            self.active_plan is not None
            and trigger in (Trigger.REPLAN_PROFILE, Trigger.REPLAN_EXPIRY)
            and capacity_check(self.active_plan.placement, self.batch,
                               self.profile.gpu_block_budget).feasible
        )
        delayed = (
            self.config.solver_overhead_ms > 0
            and observed is not None
            and self.config.solver_overhead_ms >= observed
            and stale_usable
        )
        if delayed:
            # Solver overhead does not fit under the previous step: keep the
            # old plan for one more step and install the result when ready.
            if self.ready_plan is not None:
                plan, self.ready_plan = self.ready_plan, None
                if plan.placement.request_ids == tuple(r.id for r in self.batch):
                    return self._install(plan, t)
            if not self.solve_in_flight:
                plan = self._solve_with_fallback(t)
                self.solve_in_flight = True
                self._push(t + _ms_to_us(self.config.solver_overhead_ms), PLAN_READY, (plan,))
            return self._install(self.active_plan, t)
        return self._install(self._solve_with_fallback(t), t)

    def _solve_with_fallback(self, t: int) -> Plan:
        snapshot = self._slack_snapshot(t)
        result = solve(self.batch, self.profile, self.slo, self._next_step,
                       paused=tuple(self.paused), deposit_snapshot=snapshot)
        while isinstance(result, Infeasible) and len(self.batch) > 1:
            try:
                victim = self._select_victim()
            except ExhaustedBatchError:
                break
            self._do_pause(victim, t)
            result = solve(self.batch, self.profile, self.slo, self._next_step,
                           paused=tuple(self.paused), deposit_snapshot=snapshot)
        if isinstance(result, Infeasible):
            # A lone request cannot benefit from pausing (the machine would
            # just idle); serve it under the capacity-only best placement.
            result = solve_capacity_only(self.batch, self.profile, self.slo,
                                         self._next_step)
            if isinstance(result, Infeasible):
                raise ConfigurationError("budget below any single request's demand")
        return result

    # -- baselines ----------------------------------------------------------

    def _plan_baseline(self, t: int, batch_changed: bool):
        policy = self.policy
        plan = self.active_plan
        needs_build = (
            plan is None
            or batch_changed
            or policy.replan_every_step
            or plan.placement.request_ids != tuple(r.id for r in self.batch)
        )
        while True:
            if needs_build:
                try:
                    plan = policy.plan(self.batch, self._next_step)
                except PlacementInfeasible:
                    plan = self._baseline_overflow(t)
                    if plan is None:
                        continue
            if self._placement_fits(plan):
                break
            needs_build = True
            plan = self._baseline_overflow(t)
            if plan is not None:
                break
        return self._install(plan, t)

    def _placement_fits(self, plan: Plan | None) -> bool:
        if plan is None:
            return False
        if plan.placement.request_ids != tuple(r.id for r in self.batch):
            return False
        return capacity_check(plan.placement, self.batch,
                              self.profile.gpu_block_budget).feasible

    def _baseline_overflow(self, t: int):
        """Reactive overload handling for baselines.

        Preempt the youngest request and retry; a lone request that still
        does not fit the policy's discipline runs at full offload, which
        run-start validation guarantees to fit.
        """
        if len(self.batch) > 1:
            self._preempt_youngest(t)
            return None
        placement = PlacementMatrix.all_offloaded([r.id for r in self.batch],
                                                  self.profile.num_layers)
        predicted = batch_decode_latency_fast(placement, self.batch, self.profile)
        return Plan(placement=placement, predicted_latency=predicted,
                    decode_window=1, expiry_step=None, feasible=True)

    # -- install and step scheduling ----------------------------------------

    def _install(self, plan: Plan, t: int):
        if plan is None:
            raise RuntimeError("no plan to install")
        charge_ms = apply_plan(plan, self.table, self.batch, self.profile)
        self.active_plan = plan
        return plan, charge_ms

    def _schedule_step(self, t: int, plan: Plan, charge_ms: float) -> None:
        breakdown = batch_decode_latency_fast(plan.placement, self.batch, self.profile)
        duration_us = max(1, _ms_to_us(breakdown.total_latency_ms + charge_ms))
        assert self.table.audit_ok()
        self._record(t, "step", None, {
            "index": self._next_step,
            "latency_us": _ms_to_us(breakdown.total_latency_ms),
            "charge_us": _ms_to_us(charge_ms),
            "ids": [r.id for r in self.batch],
            "tokens": sum(r.total_tokens for r in self.batch),
            "gpu": self.table.gpu_blocks(),
            "removable": self.table.removable_blocks(),
            "buffer": self.table.buffer_reservation,
            "budget": self.profile.gpu_block_budget,
            "rows": [list(row) for row in plan.placement.rows],
            "predicted_us": _ms_to_us(plan.predicted_latency.total_latency_ms),
        })
        self._last_latency_ms = breakdown.total_latency_ms
        self._step_scheduled = True
        self._push(t + duration_us, DECODE_STEP_DONE, ())


def run(trace: Trace, policy_kind, profile: SystemProfile, slo: SloConfig,
        config: RunConfig | None = None, policy_options=None) -> MetricsReport:
    """Execute a full trace and aggregate the run log into a report."""
    cfg = config or RunConfig()
    if isinstance(policy_kind, PolicyKind):
        policy = make_policy(policy_kind, profile, slo, policy_options,
                             max_batch=cfg.max_batch, token_cap=cfg.batch_token_cap)
    else:
        policy = policy_kind
    sim = Simulation(trace, policy, profile, slo, cfg)
    log = sim.execute()
    return collect_metrics(log)
