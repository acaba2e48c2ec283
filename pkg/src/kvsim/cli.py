"""Command-line front end: trace generation, runs, sweeps, report rendering.

Every command is deterministic under fixed seeds and inputs; output files
are byte-stable so downstream tooling can diff them.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import defaults, workload
from .core import SloConfig, SystemProfile
from .engine import ConfigurationError, RunConfig, Simulation
from .metrics import collect_metrics, delivery_series_csv, load_log, save_log
from .policies import PolicyKind, PolicyOptions, make_policy

_POLICY_NAMES = [k.value for k in PolicyKind]


def _load_profile(path: str | None) -> SystemProfile:
    if path is None:
        return defaults.DEFAULT_PROFILE
    return SystemProfile.load(path)


def _build_slo(args, profile: SystemProfile) -> SloConfig:
    if getattr(args, "tbt_ms", None):
        tbt = args.tbt_ms
        tpot = args.tpot_ms if args.tpot_ms else tbt
        return SloConfig(tbt_target_ms=tbt, tpot_target_ms=tpot)
    return defaults.default_slo(profile, scale=args.slo_scale)


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trace", required=True, help="trace file to replay")
    p.add_argument("--profile", default=None, help="profile file (default: built-in)")
    p.add_argument("--slo-scale", type=float, default=defaults.DEFAULT_SLO_SCALE,
                   help="multiplier on the derived base TBT/TPOT target")
    p.add_argument("--tbt-ms", type=float, default=None, help="explicit TBT target (ms)")
    p.add_argument("--tpot-ms", type=float, default=None, help="explicit TPOT target (ms)")
    p.add_argument("--max-batch", type=int, default=4)
    p.add_argument("--token-cap", type=int, default=32768)
    p.add_argument("--scheduler", choices=["fcfs", "srtf"], default="fcfs")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deposit", choices=["default", "on", "off"], default="default",
                   help="graft the token deposit onto baselines, or disable it")
    p.add_argument("--victim", choices=["largest", "random", "shortest"], default="largest")
    p.add_argument("--static-stride", type=int, default=None,
                   help="flexgen_like only: fixed offload stride")
    p.add_argument("--worst-case-tokens", type=int, default=None,
                   help="flexgen_like only: batch tokens assumed for offline "
                        "stride selection (default: the batch token cap)")


def _policy_options(args) -> PolicyOptions:
    deposit = None if args.deposit == "default" else (args.deposit == "on")
    return PolicyOptions(static_stride=args.static_stride, deposit=deposit,
                         victim=args.victim,
                         worst_case_tokens=args.worst_case_tokens)


def _run_once(trace, policy_name, profile, slo, args):
    config = RunConfig(max_batch=args.max_batch, batch_token_cap=args.token_cap,
                       scheduler=args.scheduler, seed=args.seed)
    policy = make_policy(PolicyKind(policy_name), profile, slo, _policy_options(args),
                         max_batch=config.max_batch, token_cap=config.batch_token_cap)
    sim = Simulation(trace, policy, profile, slo, config)
    log = sim.execute()
    return collect_metrics(log), log


def cmd_gen_trace(args) -> int:
    if args.fixed_prompt is not None or args.fixed_output is not None:
        if args.fixed_prompt is None or args.fixed_output is None:
            print("error: --fixed-prompt and --fixed-output go together", file=sys.stderr)
            return 2
        spec = workload.LengthSpec(kind="fixed", fixed_prompt=args.fixed_prompt,
                                   fixed_output=args.fixed_output)
    else:
        spec = workload.LengthSpec(
            kind="lognormal",
            prompt_median=args.prompt_median, prompt_sigma=args.prompt_sigma,
            output_median=args.output_median, output_sigma=args.output_sigma,
            max_prompt=args.max_prompt, max_output=args.max_output,
        )
    try:
        trace = workload.generate(args.seed, args.rate, args.cv, spec, args.count)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    workload.save(trace, args.out)
    n = len(trace.requests)
    if n:
        mean_prompt = sum(r.prompt_tokens for r in trace.requests) / n
        mean_output = sum(r.output_tokens for r in trace.requests) / n
        span_min = trace.requests[-1].arrival_ms / 60000.0
        realized = n / span_min if span_min > 0 else float("nan")
        print(f"wrote {args.out}: {n} requests, mean prompt {mean_prompt:.1f}, "
              f"mean output {mean_output:.1f}, realized rate {realized:.2f} req/min")
    else:
        print(f"wrote {args.out}: empty trace")
    return 0


def cmd_simulate(args) -> int:
    profile = _load_profile(args.profile)
    slo = _build_slo(args, profile)
    try:
        trace = workload.load(args.trace)
        report, log = _run_once(trace, args.policy, profile, slo, args)
    except (ConfigurationError, workload.TraceFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    report_text = report.to_json()
    if args.report:
        Path(args.report).write_text(report_text, encoding="utf-8")
    else:
        sys.stdout.write(report_text)
    if args.deliveries:
        Path(args.deliveries).write_text(delivery_series_csv(log), encoding="utf-8")
    if args.event_log:
        save_log(log, args.event_log)
    return 0


def cmd_compare(args) -> int:
    profile = _load_profile(args.profile)
    try:
        trace = workload.load(args.trace)
    except (workload.TraceFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    scales = [float(s) for s in args.slo_scales.split(",")]
    bad = [p for p in policies if p not in _POLICY_NAMES]
    if bad:
        print(f"error: unknown policies {bad}; choose from {_POLICY_NAMES}", file=sys.stderr)
        return 2

    header = ("policy,slo_scale,tbt_attainment,tpot_attainment,tbt_p95_ms,tbt_p99_ms,"
              "throughput_rpm,e2e_mean_ms,gpu_util_mean,status")
    rows = [header]
    for policy_name in policies:
        for scale in scales:
            slo = defaults.default_slo(profile, scale=scale)
            try:
                report, _log = _run_once(trace, policy_name, profile, slo, args)
                rows.append(
                    f"{policy_name},{scale},{report.tbt_attainment:.6f},"
                    f"{report.tpot_attainment:.6f},{report.tbt_p95_ms:.3f},"
                    f"{report.tbt_p99_ms:.3f},{report.throughput_rpm:.4f},"
                    f"{report.e2e_mean_ms:.3f},{report.gpu_util_mean:.6f},ok"
                )
            except (ConfigurationError, ValueError) as exc:
                rows.append(f"{policy_name},{scale},,,,,,,,failed: {exc}")
    table = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(table, encoding="utf-8")
    else:
        sys.stdout.write(table)
    return 0


def cmd_report(args) -> int:
    try:
        log = load_log(args.event_log)
        report = collect_metrics(log)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kvsim",
        description="SLO-aware KV offloading simulator and placement planner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-trace", help="generate a synthetic trace file")
    g.add_argument("--out", required=True)
    g.add_argument("--rate", type=float, required=True, help="requests per minute")
    g.add_argument("--cv", type=float, default=1.0, help="inter-arrival burstiness")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--prompt-median", type=float, default=512.0)
    g.add_argument("--prompt-sigma", type=float, default=0.9)
    g.add_argument("--output-median", type=float, default=80.0)
    g.add_argument("--output-sigma", type=float, default=0.7)
    g.add_argument("--max-prompt", type=int, default=4096)
    g.add_argument("--max-output", type=int, default=512)
    g.add_argument("--fixed-prompt", type=int, default=None)
    g.add_argument("--fixed-output", type=int, default=None)
    g.set_defaults(func=cmd_gen_trace)

    s = sub.add_parser("simulate", help="run one policy over a trace")
    _add_run_options(s)
    s.add_argument("--policy", choices=_POLICY_NAMES, required=True)
    s.add_argument("--report", default=None, help="write the report JSON here")
    s.add_argument("--deliveries", default=None, help="write per-token delivery CSV here")
    s.add_argument("--event-log", default=None, help="write the full event log here")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="sweep policies x SLO scales over one trace")
    _add_run_options(c)
    c.add_argument("--policies", default=",".join(_POLICY_NAMES))
    c.add_argument("--slo-scales", default="1.0,1.5,2.5")
    c.add_argument("--out", default=None, help="write the comparison CSV here")
    c.set_defaults(func=cmd_compare)

    r = sub.add_parser("report", help="re-render a saved event log into a report")
    r.add_argument("--event-log", required=True)
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
