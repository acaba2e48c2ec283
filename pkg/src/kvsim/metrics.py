"""Turn a run log into delivery series and aggregate metrics.

Everything here derives from the event log alone, so a saved log file can
be re-rendered into the identical report. TBT is the gap between
consecutive delivered tokens of one request and is judged per token; TPOT
is a request's mean per-token latency over its delivery span and is
judged per request. Backend violations count generation-time gaps above
the target, visible violations count delivery-time gaps; the token
deposit can only convert backend violations into masked ones, never the
reverse.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass


def percentile(sorted_values: list[float], pct: float) -> float:
    """Nearest-rank percentile on an already sorted list (0 if empty)."""
    if not sorted_values:
        return 0.0
    if not (0 < pct <= 100):
        raise ValueError("pct must lie in (0, 100]")
    rank = max(1, math.ceil(pct / 100.0 * len(sorted_values)))
    return sorted_values[rank - 1]


@dataclass(frozen=True)
class MetricsReport:
    policy: str
    seed: int
    scheduler: str
    tbt_target_ms: float
    tpot_target_ms: float
    requests_total: int
    requests_finished: int
    tokens_delivered: int
    tbt_attainment: float
    tbt_p50_ms: float
    tbt_p95_ms: float
    tbt_p99_ms: float
    tpot_attainment: float
    tpot_p50_ms: float
    tpot_p95_ms: float
    tpot_p99_ms: float
    visible_violations: int
    backend_violations: int
    throughput_rpm: float
    e2e_mean_ms: float
    e2e_p95_ms: float
    ttft_mean_ms: float
    ttft_p95_ms: float
    gpu_util_mean: float
    decode_steps: int
    replans: int
    pauses: int
    resumes: int
    preemptions: int
    sim_duration_ms: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def per_request_series(records: list[dict]) -> dict[int, list[dict]]:
    """Delivery records grouped by request, in delivery order."""
    series: dict[int, list[dict]] = {}
    for rec in records:
        if rec["kind"] == "deliver":
            series.setdefault(rec["request_id"], []).append(rec)
    return series


def delivery_series_csv(records: list[dict]) -> str:
    """Per-token delivery table: one comma-separated row per token."""
    lines = ["request_id,seq,generated_ms,delivered_ms,gap_ms,burst"]
    for rid, recs in sorted(per_request_series(records).items()):
        prev = None
        for rec in recs:
            t_ms = rec["time_us"] / 1000.0
            gen_ms = rec["payload"]["gen_us"] / 1000.0
            gap = "" if prev is None else f"{t_ms - prev:.3f}"
            burst = int(bool(rec["payload"]["burst"]))
            lines.append(f"{rid},{rec['payload']['seq']},{gen_ms:.3f},{t_ms:.3f},{gap},{burst}")
            prev = t_ms
    return "\n".join(lines) + "\n"


def collect_metrics(records: list[dict]) -> MetricsReport:
    """Aggregate a complete run log into the metrics report."""
    header = next(r for r in records if r["kind"] == "run_header")["payload"]
    tbt = header["tbt_ms"]
    tpot_target = header["tpot_ms"]

    arrivals: dict[int, int] = {}
    finishes: dict[int, int] = {}
    counts = {"replan": 0, "pause": 0, "resume": 0, "preempt": 0}
    steps: list[dict] = []
    for rec in records:
        kind = rec["kind"]
        if kind == "arrival":
            arrivals[rec["request_id"]] = rec["time_us"]
        elif kind == "finish":
            finishes[rec["request_id"]] = rec["time_us"]
        elif kind == "step":
            steps.append(rec["payload"])
        elif kind in counts:
            counts[kind] += 1

    series = per_request_series(records)
    tbt_gaps_ms: list[float] = []
    tpots_ms: list[float] = []
    visible = 0
    backend = 0
    attained_gaps = 0
    ttfts: list[float] = []
    tokens_delivered = 0
    for rid, recs in sorted(series.items()):
        tokens_delivered += len(recs)
        times = [r["time_us"] for r in recs]
        gens = [r["payload"]["gen_us"] for r in recs]
        if rid in arrivals:
            ttfts.append((times[0] - arrivals[rid]) / 1000.0)
        for i in range(1, len(times)):
            gap_ms = (times[i] - times[i - 1]) / 1000.0
            gen_gap_ms = (gens[i] - gens[i - 1]) / 1000.0
            tbt_gaps_ms.append(gap_ms)
            if gap_ms <= tbt:
                attained_gaps += 1
            else:
                visible += 1
            if gen_gap_ms > tbt:
                backend += 1
        if len(times) >= 2:
            tpots_ms.append((times[-1] - times[0]) / 1000.0 / (len(times) - 1))
        else:
            tpots_ms.append(0.0)

    gaps_sorted = sorted(tbt_gaps_ms)
    tpot_sorted = sorted(tpots_ms)
    e2e = sorted(
        (finishes[rid] - arrivals[rid]) / 1000.0 for rid in finishes if rid in arrivals
    )
    ttft_sorted = sorted(ttfts)

    util_weighted = 0.0
    weight = 0.0
    for step in steps:
        dur = step["latency_us"] + step["charge_us"]
        used = step["gpu"] + step["removable"] + step["buffer"]
        util_weighted += dur * (used / step["budget"])
        weight += dur
    duration_us = max((r["time_us"] for r in records), default=0)
    duration_min = duration_us / 60_000_000.0

    return MetricsReport(
        policy=header["policy"],
        seed=header["seed"],
        scheduler=header["scheduler"],
        tbt_target_ms=tbt,
        tpot_target_ms=tpot_target,
        requests_total=header["requests"],
        requests_finished=len(finishes),
        tokens_delivered=tokens_delivered,
        tbt_attainment=(attained_gaps / len(tbt_gaps_ms)) if tbt_gaps_ms else 1.0,
        tbt_p50_ms=percentile(gaps_sorted, 50),
        tbt_p95_ms=percentile(gaps_sorted, 95),
        tbt_p99_ms=percentile(gaps_sorted, 99),
        tpot_attainment=(
            sum(1 for v in tpots_ms if v <= tpot_target) / len(tpots_ms) if tpots_ms else 1.0
        ),
        tpot_p50_ms=percentile(tpot_sorted, 50),
        tpot_p95_ms=percentile(tpot_sorted, 95),
        tpot_p99_ms=percentile(tpot_sorted, 99),
        visible_violations=visible,
        backend_violations=backend,
        throughput_rpm=(len(finishes) / duration_min) if duration_min > 0 else 0.0,
        e2e_mean_ms=_mean(e2e),
        e2e_p95_ms=percentile(e2e, 95),
        ttft_mean_ms=_mean(ttft_sorted),
        ttft_p95_ms=percentile(ttft_sorted, 95),
        gpu_util_mean=(util_weighted / weight) if weight > 0 else 0.0,
        decode_steps=len(steps),
        replans=counts["replan"],
        pauses=counts["pause"],
        resumes=counts["resume"],
        preemptions=counts["preempt"],
        sim_duration_ms=duration_us / 1000.0,
    )


def save_log(records: list[dict], path) -> None:
    """Newline-delimited JSON, one record per event."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_log(path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: bad log record ({exc})") from None
    return records
