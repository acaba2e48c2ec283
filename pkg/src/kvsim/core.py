"""Core domain types shared by every part of the simulator.

Conventions used throughout the package:

* KV cache is sized in fixed-size blocks (16 tokens per block by default,
  the paged-cache layout). A request holds the same number of blocks on
  every layer, so one integer per request (``blocks_per_layer``) is enough.
* Placements are binary: entry 1 keeps a (request, layer) KV slab resident
  on the GPU, entry 0 offloads it to host memory.
* Time is float milliseconds in the cost model; the event engine converts
  to integer microseconds at its own boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from .latency import LatencyBreakdown

DEFAULT_BLOCK_SIZE = 16


def blocks_for_tokens(tokens: int, block_size: int) -> int:
    """KV blocks needed to hold ``tokens`` tokens (ceiling division).

    Zero tokens need zero blocks; a single token already claims a block.
    """
    if tokens < 0:
        raise ValueError(f"token count must be >= 0, got {tokens}")
    if block_size < 1:
        raise ValueError(f"block size must be >= 1, got {block_size}")
    return -(-tokens // block_size)


class RequestStatus(Enum):
    QUEUED = "queued"
    PREFILLING = "prefilling"
    DECODING = "decoding"
    PAUSED = "paused"
    FINISHED = "finished"


# DECODING -> QUEUED is the reactive-preemption path used by the static
# baselines (whole-request KV drop, request re-enters the wait queue).
_ALLOWED_TRANSITIONS = {
    RequestStatus.QUEUED: {RequestStatus.PREFILLING},
    RequestStatus.PREFILLING: {RequestStatus.DECODING},
    RequestStatus.DECODING: {
        RequestStatus.PAUSED,
        RequestStatus.FINISHED,
        RequestStatus.QUEUED,
    },
    RequestStatus.PAUSED: {RequestStatus.DECODING},
    RequestStatus.FINISHED: set(),
}


@dataclass
class RequestState:
    """One serving request as the engine tracks it.

    ``blocks_per_layer`` is kept equal to
    ``blocks_for_tokens(prompt_tokens + generated_tokens, block_size)`` by
    ``sync_blocks``; callers that mutate token counts must call it.
    """

    id: int
    arrival_time_ms: float
    prompt_tokens: int
    target_output_tokens: int
    block_size: int = DEFAULT_BLOCK_SIZE
    generated_tokens: int = 0
    blocks_per_layer: int = field(init=False)
    deposit_balance: int = 0
    deposit_delivery_cursor_us: int | None = None
    status: RequestStatus = RequestStatus.QUEUED

    def __post_init__(self) -> None:
        if self.prompt_tokens < 1 or self.target_output_tokens < 1:
            raise ValueError("prompt and output token counts must be >= 1")
        self.blocks_per_layer = blocks_for_tokens(self.total_tokens, self.block_size)

    @property
    def total_tokens(self) -> int:
        return self.prompt_tokens + self.generated_tokens

    @property
    def remaining_tokens(self) -> int:
        return self.target_output_tokens - self.generated_tokens

    def sync_blocks(self) -> None:
        self.blocks_per_layer = blocks_for_tokens(self.total_tokens, self.block_size)

    def record_generated_token(self) -> None:
        if self.generated_tokens >= self.target_output_tokens:
            raise ValueError(f"request {self.id} already produced its target output")
        self.generated_tokens += 1
        self.sync_blocks()

    def transition_to(self, new: RequestStatus) -> None:
        if new not in _ALLOWED_TRANSITIONS[self.status]:
            raise ValueError(f"request {self.id}: illegal {self.status.value} -> {new.value}")
        self.status = new


@dataclass(frozen=True)
class PlacementMatrix:
    """Binary GPU/host placement for a batch over all model layers.

    ``rows[i][l - 1] == 1`` keeps request ``request_ids[i]``'s KV for layer
    ``l`` (1-indexed) resident on GPU; 0 offloads it to host memory.
    """

    request_ids: tuple[int, ...]
    num_layers: int
    rows: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.rows) != len(self.request_ids):
            raise ValueError("one placement row per request required")
        for row in self.rows:
            if len(row) != self.num_layers:
                raise ValueError("placement rows must span all layers")
            if any(v not in (0, 1) for v in row):
                raise ValueError("placement entries must be 0 or 1")

    @property
    def batch_size(self) -> int:
        return len(self.request_ids)

    def resident(self, index: int, layer: int) -> bool:
        return self.rows[index][layer - 1] == 1

    def row_for(self, request_id: int) -> tuple[int, ...]:
        return self.rows[self.request_ids.index(request_id)]

    def offloaded_layers(self, index: int) -> tuple[int, ...]:
        return tuple(l for l in range(1, self.num_layers + 1) if self.rows[index][l - 1] == 0)

    @classmethod
    def all_resident(cls, request_ids, num_layers: int) -> "PlacementMatrix":
        row = tuple([1] * num_layers)
        return cls(tuple(request_ids), num_layers, tuple(row for _ in request_ids))

    @classmethod
    def all_offloaded(cls, request_ids, num_layers: int) -> "PlacementMatrix":
        row = tuple([0] * num_layers)
        return cls(tuple(request_ids), num_layers, tuple(row for _ in request_ids))

    @classmethod
    def from_strides(cls, request_ids, num_layers: int, strides) -> "PlacementMatrix":
        """Build a placement from per-request offload strides.

        Stride ``k`` offloads layers ``{k, 2k, ...}`` (1-indexed); ``None``
        keeps every layer resident. A stride larger than the layer count
        degenerates to fully resident.
        """
        rows = []
        for k in strides:
            if k is None:
                rows.append(tuple([1] * num_layers))
                continue
            if k < 1:
                raise ValueError(f"stride must be >= 1, got {k}")
            rows.append(tuple(0 if (l % k == 0) else 1 for l in range(1, num_layers + 1)))
        return cls(tuple(request_ids), num_layers, tuple(rows))


@dataclass(frozen=True)
class SystemProfile:
    """Calibrated cost model of one serving instance.

    Per-layer decode compute is linear in the total token count of the
    batch and identical for every layer (repeating layer groups make the
    per-layer costs interchangeable). Bandwidth is expressed directly in
    KV blocks per millisecond; whoever calibrates the profile owns the
    bytes-per-block conversion.
    """

    num_layers: int
    compute_base_ms: float
    compute_per_token_ms: float
    bandwidth_blocks_per_ms: float
    gpu_block_budget: int
    block_size: int = DEFAULT_BLOCK_SIZE
    prefill_per_token_ms: float = 0.02
    ewma_decay: float = 0.25

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.compute_base_ms <= 0:
            raise ValueError("compute_base_ms must be > 0")
        if self.compute_per_token_ms < 0:
            raise ValueError("compute_per_token_ms must be >= 0")
        if self.bandwidth_blocks_per_ms <= 0:
            raise ValueError("bandwidth_blocks_per_ms must be > 0")
        if self.gpu_block_budget < 1:
            raise ValueError("gpu_block_budget must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.prefill_per_token_ms < 0:
            raise ValueError("prefill_per_token_ms must be >= 0")
        if not (0 < self.ewma_decay <= 1):
            raise ValueError("ewma_decay must be in (0, 1]")

    def to_text(self) -> str:
        lines = ["# kvsim system profile"]
        for key in _PROFILE_FIELDS:
            lines.append(f"{key} = {getattr(self, key)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SystemProfile":
        values: dict[str, str] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"profile line {lineno}: expected 'key = value', got {raw!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in _PROFILE_FIELDS:
                raise ValueError(f"profile line {lineno}: unknown field {key!r}")
            values[key] = val.strip()
        missing = [k for k in _PROFILE_FIELDS if k not in values]
        if missing:
            raise ValueError(f"profile missing fields: {', '.join(missing)}")
        kwargs = {k: _PROFILE_FIELDS[k](values[k]) for k in _PROFILE_FIELDS}
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SystemProfile":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


_PROFILE_FIELDS = {
    "num_layers": int,
    "compute_base_ms": float,
    "compute_per_token_ms": float,
    "bandwidth_blocks_per_ms": float,
    "gpu_block_budget": int,
    "block_size": int,
    "prefill_per_token_ms": float,
    "ewma_decay": float,
}


def per_layer_compute(profile: SystemProfile, total_batch_tokens: int) -> float:
    """Decode compute per layer, in ms, for a batch holding the given tokens."""
    if total_batch_tokens < 0:
        raise ValueError("total_batch_tokens must be >= 0")
    return profile.compute_base_ms + profile.compute_per_token_ms * total_batch_tokens


@dataclass(frozen=True)
class SloConfig:
    """Latency targets plus the planner's feasibility knobs.

    ``violation_cap`` is the per-step violation budget enforced on the
    window average; ``window_min``/``window_max`` bound the self-determined
    decode window; ``profile_mismatch_threshold`` is the relative gap that
    triggers a re-plan when observed latency drifts from the prediction.
    """

    tbt_target_ms: float
    tpot_target_ms: float
    violation_cap: float = 1.0
    window_min: int = 4
    window_max: int = 32
    profile_mismatch_threshold: float = 0.2

    def __post_init__(self) -> None:
        if self.tbt_target_ms <= 0 or self.tpot_target_ms <= 0:
            raise ValueError("latency targets must be > 0")
        if self.violation_cap < 0:
            raise ValueError("violation_cap must be >= 0")
        if self.window_min < 1 or self.window_min > self.window_max:
            raise ValueError("need 1 <= window_min <= window_max")
        if self.profile_mismatch_threshold < 0:
            raise ValueError("profile_mismatch_threshold must be >= 0")


@dataclass(frozen=True)
class Plan:
    """A placement plus its predicted cost and validity window.

    ``expiry_step`` is the absolute decode-step index at which the plan
    stops being trusted (``creation_step + decode_window``); ``None`` marks
    a static plan that never self-expires.
    """

    placement: PlacementMatrix
    predicted_latency: "LatencyBreakdown"
    decode_window: int
    expiry_step: int | None
    feasible: bool = True
