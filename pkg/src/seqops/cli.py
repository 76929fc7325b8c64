"""Command line entry point: ``seqops run | sweep | diagnose | plot``.

Exit codes: 0 success, 1 a diagnostic check failed, 2 invalid configuration or
arguments, 3 missing or unreadable trace files.
"""
from __future__ import annotations

import argparse
import csv
import glob
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diagnostics, svg
from .config import ConfigError, ExperimentConfig
from .learner import ALGORITHMS, RunTrace, run
from .policy import load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_TRACES = 0, 1, 2, 3
SWEEP_AXES = ("k", "alpha", "lambda", "algorithm")

log = logging.getLogger("seqops")


class TraceError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# file layout


def trace_path(out: Path, algorithm: str, seed: int) -> Path:
    return out / f"trace_{algorithm}_s{seed}.jsonl"


def checkpoint_dir(out: Path, algorithm: str, seed: int) -> Path:
    return out / f"policies_{algorithm}_s{seed}"


def resolve_out(arg: str | None, cfg: ExperimentConfig) -> Path:
    env_out = os.environ.get("SEQOPS_OUT")
    return Path(env_out or arg or cfg.run.out)


def summary_stats(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


# ---------------------------------------------------------------------------
# running


def _run_one(cfg: ExperimentConfig, seed: int, out: Path) -> str:
    env = cfg.build_env()
    trace = run(env, cfg.learner_config(seed, cfg.build_prior(env)))
    out.mkdir(parents=True, exist_ok=True)
    path = trace_path(out, trace.algorithm, seed)
    trace.to_jsonl(path)
    cdir = checkpoint_dir(out, trace.algorithm, seed)
    cdir.mkdir(exist_ok=True)
    for j, pol in enumerate(trace.policies):
        save_checkpoint(pol, cdir / f"round_{j}.csv")
    return str(path)


def run_seeds(cfg: ExperimentConfig, seeds, out: Path, jobs: int = 1) -> list[Path]:
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            paths = list(pool.map(_run_one, [cfg] * len(seeds), seeds, [out] * len(seeds)))
    else:
        paths = [_run_one(cfg, s, out) for s in seeds]
    return [Path(p) for p in paths]


def write_summary(out: Path, algorithm: str, traces) -> dict:
    finals = [t.final_risk for t in traces]
    mean, std = summary_stats(finals)
    summary = {"algorithm": algorithm, "num_seeds": len(finals),
               "seeds": [t.seed for t in traces], "final_risks": finals,
               "mean_final_risk": mean, "std_final_risk": std}
    (out / f"summary_{algorithm}.json").write_text(json.dumps(summary, indent=2) + "\n")
    with open(out / f"summary_{algorithm}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "num_seeds", "mean_final_risk", "std_final_risk"])
        w.writerow([algorithm, len(finals), repr(mean), repr(std)])
    return summary


def _seeds(cfg, seed_base):
    return [seed_base + i for i in range(cfg.run.num_seeds)]


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = resolve_out(args.out, cfg)
    jobs = args.jobs or cfg.run.jobs
    paths = run_seeds(cfg, _seeds(cfg, args.seed_base), out, jobs)
    traces = [RunTrace.from_jsonl(p) for p in paths]
    summary = write_summary(out, cfg.learner.algorithm, traces)
    if cfg.run.emit_plots:
        (out / "risk.svg").write_text(svg.render_risk_chart(svg.group_series(traces)))
    print(f"{summary['algorithm']}: final risk {summary['mean_final_risk']:.4f} "
          f"+/- {summary['std_final_risk']:.4f} over {summary['num_seeds']} seeds; "
          f"traces in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweeps


def _parse_value(axis, text):
    if axis == "algorithm":
        if text not in ALGORITHMS:
            raise ConfigError("--values", f"unknown algorithm {text!r}; expected one of {ALGORITHMS}")
        return text
    try:
        return int(text) if axis == "k" else float(text)
    except ValueError:
        raise ConfigError("--values", f"{text!r} is not a valid {axis} value") from None


def _apply(cfg: ExperimentConfig, axis, value, algorithm) -> ExperimentConfig:
    cfg = cfg.with_learner(algorithm=algorithm)
    if axis == "k":
        return cfg.with_learner(rounds=value)
    if axis == "lambda":
        return cfg.with_learner(lambda_rule="fixed", lambda_value=value)
    if axis == "alpha":
        new = replace(cfg, policy=replace(cfg.policy, alpha=value))
        new.validate()
        return new
    return cfg


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.axis not in SWEEP_AXES:
        raise ConfigError("--axis", f"expected one of {SWEEP_AXES}")
    raw = [v.strip() for v in (args.values or "").split(",") if v.strip()]
    if not raw:
        raise ConfigError("--values", "no sweep values given")
    values = [_parse_value(args.axis, v) for v in raw]
    if args.axis == "algorithm":
        algorithms = [None]
    elif args.algorithms:
        algorithms = [a.strip() for a in args.algorithms.split(",") if a.strip()]
    else:
        algorithms = [cfg.learner.algorithm]
    for a in algorithms:
        if a is not None and a not in ALGORITHMS:
            raise ConfigError("--algorithms", f"unknown algorithm {a!r}")
    out = resolve_out(args.out, cfg)
    out.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs or cfg.run.jobs
    rows = []
    for algo in algorithms:
        for value in values:
            algorithm = value if args.axis == "algorithm" else algo
            point = _apply(cfg, args.axis, value, algorithm)
            sub = out / f"{args.axis}={value}" / algorithm
            paths = run_seeds(point, _seeds(point, args.seed_base), sub, jobs)
            traces = [RunTrace.from_jsonl(p) for p in paths]
            write_summary(sub, algorithm, traces)
            mean, std = summary_stats([t.final_risk for t in traces])
            rows.append([value, algorithm, len(traces), repr(mean), repr(std)])
            print(f"{args.axis}={value} {algorithm}: {mean:.4f} +/- {std:.4f}")
    table = out / f"sweep_{args.axis}.csv"
    with open(table, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([args.axis, "algorithm", "num_seeds", "mean_final_risk", "std_final_risk"])
        w.writerows(rows)
    print(f"table written to {table}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# diagnostics


def _load_traces(paths) -> list[RunTrace]:
    traces = []
    for p in paths:
        try:
            traces.append(RunTrace.from_jsonl(p))
        except (OSError, ValueError) as exc:
            raise TraceError(f"cannot read trace {p}: {exc}") from None
    return traces


def cmd_diagnose(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    out = resolve_out(args.out, cfg)
    paths = sorted(out.glob("trace_*_s*.jsonl"))
    if not paths:
        raise TraceError(f"no trace files in {out}")
    env = cfg.build_env()
    failures = 0
    for path, trace in zip(paths, _load_traces(paths)):
        cdir = checkpoint_dir(out, trace.algorithm, trace.seed)
        lines = []
        for rec in trace.records:
            j = rec["round"]
            try:
                policy = load_checkpoint(cdir / f"round_{j}.csv")
            except (OSError, ValueError) as exc:
                raise TraceError(f"missing policy checkpoint for {path.name} round {j}: {exc}") \
                    from None
            env_round = j if env.drift is not None else None
            snap = diagnostics.theory_snapshot(env, policy, j, env_round=env_round)
            rep = diagnostics.check_acceleration_lemma(env, policy, 0.0, env_round)
            record = json.loads(snap.to_json())
            record.update(kind="snapshot", algorithm=trace.algorithm, seed=trace.seed,
                          lemma_lhs=_num(rep.lhs), lemma_rhs=_num(rep.rhs),
                          lemma_margin=_num(rep.margin), lemma_holds=rep.holds,
                          lemma_skipped=rep.skipped)
            if rep.skipped is None and not rep.holds:
                failures += 1
            lines.append(json.dumps(record, sort_keys=True))
        target = out / f"diagnostics_{trace.algorithm}_s{trace.seed}.jsonl"
        target.write_text("\n".join(lines) + "\n")
        print(f"{path.name}: {len(lines)} snapshots -> {target.name}")
    if failures:
        print(f"{failures} lemma checks failed", file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


def _num(v):
    return None if isinstance(v, float) and not math.isfinite(v) else v


def cmd_plot(args) -> int:
    paths = sorted(glob.glob(args.traces))
    if not paths:
        raise TraceError(f"no traces match {args.traces!r}")
    traces = _load_traces(paths)
    target = Path(args.out_path)
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(svg.render_risk_chart(svg.group_series(traces), args.title))
    print(f"chart of {len(traces)} traces written to {target}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqops",
                                     description="Sequential off-policy learning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment config file")
        p.add_argument("--out", default=None, help="output directory (SEQOPS_OUT overrides)")
        p.add_argument("--jobs", type=int, default=None, help="seeds run concurrently")
        p.add_argument("--seed-base", type=int, default=0, help="first seed")

    p = sub.add_parser("run", help="run the configured learner over several seeds")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a one-axis sweep at fixed budget")
    common(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True, help="comma separated axis values")
    p.add_argument("--algorithms", default=None, help="comma separated algorithms")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("diagnose", help="oracle diagnostics for stored traces")
    common(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("plot", help="SVG chart of risk per round")
    p.add_argument("--traces", required=True, help="glob of trace files")
    p.add_argument("--out", dest="out_path", required=True, help="output SVG path")
    p.add_argument("--title", default="Risk per round")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", None) is not None and args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACES


if __name__ == "__main__":
    sys.exit(main())
