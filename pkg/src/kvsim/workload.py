"""Synthetic trace generation and trace file I/O.

Inter-arrival times are gamma-distributed with mean ``60000 / rate`` ms
and shape ``1 / cv**2``, so ``cv=1`` recovers a Poisson process and
larger values dial up burstiness. Request lengths default to log-normal
draws with a heavy right tail; fixed lengths are available for
deterministic scenarios.

Trace files are one CSV record per request (``arrival_ms,prompt_tokens,
output_tokens``) after a ``#``-prefixed header of ``key=value`` metadata.
The serialization is canonical: ``load(save(t))`` round-trips
byte-for-byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class TraceRequest:
    arrival_ms: int
    prompt_tokens: int
    output_tokens: int

    def __post_init__(self) -> None:
        if self.arrival_ms < 0:
            raise ValueError("arrival_ms must be >= 0")
        if self.prompt_tokens < 1 or self.output_tokens < 1:
            raise ValueError("token counts must be >= 1")


@dataclass(frozen=True)
class Trace:
    requests: tuple[TraceRequest, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        last = 0
        for req in self.requests:
            if req.arrival_ms < last:
                raise ValueError("arrival times must be non-decreasing")
            last = req.arrival_ms

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return self.requests == other.requests and self.metadata == other.metadata


@dataclass(frozen=True)
class LengthSpec:
    """Prompt/output length distribution. ``kind`` is lognormal or fixed."""

    kind: str = "lognormal"
    prompt_median: float = 512.0
    prompt_sigma: float = 0.9
    output_median: float = 80.0
    output_sigma: float = 0.7
    max_prompt: int = 4096
    max_output: int = 512
    fixed_prompt: int = 512
    fixed_output: int = 64

    def __post_init__(self) -> None:
        if self.kind not in ("lognormal", "fixed"):
            raise ValueError(f"unknown length spec kind {self.kind!r}")
        if self.kind == "lognormal":
            if self.prompt_median < 1 or self.output_median < 1:
                raise ValueError("medians must be >= 1")
            if self.prompt_sigma < 0 or self.output_sigma < 0:
                raise ValueError("sigmas must be >= 0")
        if self.max_prompt < 1 or self.max_output < 1:
            raise ValueError("length caps must be >= 1")


def generate(seed: int, rate: float, cv: float, length_spec: LengthSpec, count: int) -> Trace:
    """Deterministic synthetic trace: gamma arrivals, configured lengths."""
    if rate <= 0:
        raise ValueError("rate must be > 0 requests/min")
    if cv <= 0:
        raise ValueError("cv must be > 0")
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = np.random.default_rng(seed)
    mean_gap_ms = 60000.0 / rate
    shape = 1.0 / (cv * cv)
    scale = mean_gap_ms / shape

    gaps = rng.gamma(shape, scale, size=count)
    arrivals = np.cumsum(gaps)

    if length_spec.kind == "fixed":
        prompts = np.full(count, length_spec.fixed_prompt, dtype=np.int64)
        outputs = np.full(count, length_spec.fixed_output, dtype=np.int64)
    else:
        prompts = rng.lognormal(np.log(length_spec.prompt_median), length_spec.prompt_sigma, count)
        outputs = rng.lognormal(np.log(length_spec.output_median), length_spec.output_sigma, count)
        prompts = np.clip(np.rint(prompts), 1, length_spec.max_prompt).astype(np.int64)
        outputs = np.clip(np.rint(outputs), 1, length_spec.max_output).astype(np.int64)

    requests = tuple(
        TraceRequest(int(round(a)), int(p), int(o))
        for a, p, o in zip(arrivals, prompts, outputs)
    )
    metadata = {
        "seed": str(seed),
        "rate": repr(rate),
        "cv": repr(cv),
        "kind": length_spec.kind,
    }
    if length_spec.kind == "lognormal":
        metadata.update(
            prompt_median=repr(length_spec.prompt_median),
            prompt_sigma=repr(length_spec.prompt_sigma),
            output_median=repr(length_spec.output_median),
            output_sigma=repr(length_spec.output_sigma),
            max_prompt=str(length_spec.max_prompt),
            max_output=str(length_spec.max_output),
        )
    else:
        metadata.update(
            fixed_prompt=str(length_spec.fixed_prompt),
            fixed_output=str(length_spec.fixed_output),
        )
    return Trace(requests, metadata)


class TraceFormatError(ValueError):
    pass


def serialize(trace: Trace) -> str:
    header = " ".join(f"{k}={trace.metadata[k]}" for k in sorted(trace.metadata))
    lines = [f"# {header}".rstrip(), "# fields=arrival_ms,prompt_tokens,output_tokens"]
    for req in trace.requests:
        lines.append(f"{req.arrival_ms},{req.prompt_tokens},{req.output_tokens}")
    return "\n".join(lines) + "\n"


def save(trace: Trace, path) -> None:
    Path(path).write_text(serialize(trace), encoding="utf-8")


def load(path) -> Trace:
    requests = []
    metadata: dict = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            for pair in body.split():
                if "=" in pair:
                    key, _, val = pair.partition("=")
                    if key != "fields":
                        metadata[key] = val
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise TraceFormatError(f"{path}:{lineno}: expected 3 fields, got {len(parts)}")
        try:
            arrival, prompt, output = (int(p) for p in parts)
        except ValueError as exc:
            raise TraceFormatError(f"{path}:{lineno}: non-integer field ({exc})") from None
        if prompt < 1 or output < 1:
            raise TraceFormatError(f"{path}:{lineno}: token counts must be >= 1")
        if arrival < 0:
            raise TraceFormatError(f"{path}:{lineno}: arrival must be >= 0")
        if requests and arrival < requests[-1].arrival_ms:
            raise TraceFormatError(f"{path}:{lineno}: arrivals must be non-decreasing")
        requests.append(TraceRequest(arrival, prompt, output))
    return Trace(tuple(requests), metadata)
