"""Command-line entry point: ``entrosim {train,verify-theory,sweep-schedules,eval,config}``.

Exit codes: 0 success, 1 runtime failure (or a failed theory gate), 2 bad
configuration or checkpoint.  ``ENTROSIM_OUT`` overrides the output directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import Config, ConfigError, load, render, run_config
from .controllers import SCHEDULE_FAMILIES
from .policy import CheckpointError, load_checkpoint
from .rng import StreamFactory
from .tasks import TaskSpec
from .theory import (GAP_HEADER, SUMMARY_HEADER, TRIAL_HEADER, TheorySettings,
                     confidence_gap_experiment, condition_rate_by_vocab,
                     sign_agreement_experiment, taylor_order_ratios)
from .trainer import (EVAL_HEADER, METRICS_HEADER, RunConfig, ScheduleConfig,
                      TrainingAborted, csv_line, evaluate_pass_at_k, train)

log = logging.getLogger("entrosim")

SWEEP_HEADER = ("family", "seed", "steps", "final_reward", "final_entropy",
                "late_entropy_var", "tracking_frac")
TAYLOR_HEADER = ("lr", "median_err", "median_err_half", "ratio")
VOCAB_HEADER = ("vocab_size", "condition_rate", "agreement_given_condition")
TRACKING_TOL = 0.15
WARMUP_STEPS = 50


# ---------------------------------------------------------------------------
# output plumbing


def output_dir(cfg: Config, sub: str = "") -> Path:
    base = Path(os.environ.get("ENTROSIM_OUT") or cfg["run.out_dir"])
    out = base / sub if sub else base
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, command: str, cfg: Config, outputs: Sequence[str],
                   status: str) -> Path:
    """Resolved config, seed, version and declared outputs, as JSON."""
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg["run.seed"],
        "overrides": cfg.overrides,
        "config": render(cfg),
        "outputs": sorted(outputs),
        "status": status,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(out: Path) -> Optional[dict]:
    path = out / "manifest.json"
    if not path.exists():
        return None
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return None


def write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(csv_line(row))
    return path


def late_variance(trace: Sequence[float], fraction: float = 0.2) -> float:
    arr = np.asarray(trace, dtype=float)
    if arr.size == 0:
        return float("nan")
    start = int(math.floor((1.0 - fraction) * arr.size))
    return float(arr[start:].var())


def tracking_fraction(rows, tol: float = TRACKING_TOL, warmup: int = WARMUP_STEPS) -> float:
    """Share of post-warmup steps whose batch entropy is within ``tol`` of the target."""
    tail = [r for r in rows if r.step >= warmup]
    if not tail:
        return float("nan")
    return float(np.mean([abs(r.batch_entropy - r.target_mid) <= tol for r in tail]))


# ---------------------------------------------------------------------------
# train


def planned_outputs(rc: RunConfig, figures: bool) -> list[str]:
    names = ["manifest.json", "metrics.csv"]
    if rc.run.eval_every:
        names.append("eval.csv")
    if rc.run.checkpoint_every:
        names += [f"ckpt_{s:06d}.bin" for s in range(rc.run.checkpoint_every, rc.run.steps + 1,
                                                      rc.run.checkpoint_every)]
    if figures:
        names.append("training.png")
    return names


def run_training(cfg: Config, out: Path, command: str = "train"):
    rc = run_config(cfg)
    figures = cfg["run.figures"]
    outputs = planned_outputs(rc, figures)
    write_manifest(out, command, cfg, outputs, "running")
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")

        def on_step(row):
            fh.write(csv_line(row.values()))

        try:
            result = train(rc, out, on_step)
        except TrainingAborted:
            fh.flush()
            write_manifest(out, command, cfg, outputs, "failed")
            raise
    if rc.run.eval_every:
        write_csv(out / "eval.csv", EVAL_HEADER, result.evals)
    if figures:
        from .report import training_figure
        training_figure(result.rows, out / "training.png",
                        f"{rc.controller.kind}, {rc.schedule.family} schedule")
    write_manifest(out, command, cfg, outputs, "complete")
    return result


def cmd_train(args, cfg: Config) -> int:
    out = output_dir(cfg)
    result = run_training(cfg, out)
    last = result.rows[-1] if result.rows else None
    if last is not None:
        print(f"steps={len(result.rows)} reward={last.mean_reward:.4f} "
              f"entropy={last.batch_entropy:.4f} out={out}")
    return 0


# ---------------------------------------------------------------------------
# verify-theory


def theory_settings(cfg: Config, variant: Optional[str] = None) -> TheorySettings:
    """Trials run against the same initial policy a training run would start from."""
    rc = run_config(cfg)
    policy = replace(rc.policy, variant=variant) if variant else rc.policy
    return TheorySettings(
        seed=rc.run.seed,
        task=rc.task,
        policy=policy,
        lr_grid=cfg["run.lr_grid"],
        trials=cfg["run.trials"],
        group_size=rc.run.group_size,
        max_len=rc.run.max_len,
    )


def cmd_verify_theory(args, cfg: Config) -> int:
    out = output_dir(cfg)
    figures = cfg["run.figures"]
    outputs = ["manifest.json", "theory_trials.csv", "theory_summary.csv", "taylor.csv",
               "condition_by_vocab.csv", "confidence_gap.csv"]
    if figures:
        outputs.append("sign_agreement.png")
    write_manifest(out, "verify-theory", cfg, outputs, "running")
    settings = theory_settings(cfg, args.variant)

    records, summaries = sign_agreement_experiment(settings)
    write_csv(out / "theory_trials.csv", TRIAL_HEADER, (r.values() for r in records))
    write_csv(out / "theory_summary.csv", SUMMARY_HEADER, (s.values() for s in summaries))
    for s in summaries:
        print(f"{s.estimator:17s} lr={s.lr:<8g} condition={s.condition_rate:.3f} "
              f"agreement|condition={s.agreement_given_condition:.4f} "
              f"ll={s.mean_log_likelihood:.3f} baseline={s.mean_baseline:.3f}")

    positive = [lr for lr in settings.lr_grid if lr > 0]
    taylor_rows = []
    for lr in positive:
        e1, e2 = taylor_order_ratios(settings, lr, trials=min(100, settings.trials))
        taylor_rows.append((lr, e1, e2, e1 / e2 if e2 > 0 else float("nan")))
    write_csv(out / "taylor.csv", TAYLOR_HEADER, taylor_rows)

    smallest = min(positive) if positive else 0.0
    small = replace(settings, trials=min(200, settings.trials))
    write_csv(out / "condition_by_vocab.csv", VOCAB_HEADER,
              condition_rate_by_vocab(small, (4, 8, 16, 32), smallest))

    gap_cfg = run_config(cfg.with_values(controller__kind="none"))
    gap_cfg.estimator = "group-normalized"
    gap = confidence_gap_experiment(gap_cfg)
    write_csv(out / "confidence_gap.csv", GAP_HEADER, (g.values() for g in gap))
    if figures:
        from .report import sign_agreement_figure
        sign_agreement_figure(summaries, out / "sign_agreement.png")
    write_manifest(out, "verify-theory", cfg, outputs, "complete")

    gate_lr = min(settings.lr_grid)
    failing = [s for s in summaries if s.lr == gate_lr and s.agreement_given_condition < 0.99]
    if failing:
        names = ", ".join(s.estimator for s in failing)
        print(f"sign-agreement gate failed at lr={gate_lr:g}: {names}", file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# sweep-schedules


def sweep_schedule(cfg: Config, family: str) -> ScheduleConfig:
    half = cfg["schedule.band_halfwidth"]
    if family == "constant":
        level = cfg["run.sweep_constant"]
        return ScheduleConfig("constant", level, level, half)
    return ScheduleConfig(family, cfg["run.sweep_start"], cfg["run.sweep_end"], half)


def cmd_sweep_schedules(args, cfg: Config) -> int:
    families = cfg["run.families"]
    for fam in families:
        if fam not in SCHEDULE_FAMILIES:
            raise ConfigError(f"run.families: unknown family {fam!r}", "run.families")
    base = output_dir(cfg)
    runs = [(fam, seed) for fam in families for seed in cfg["run.seeds"]]
    figures = cfg["run.figures"]
    outputs = ["manifest.json", "sweep_summary.csv", "sweep_metrics.csv"]
    outputs += [f"sweep/{fam}_seed{seed}/metrics.csv" for fam, seed in runs]
    outputs += [f"sweep/{fam}_seed{seed}/manifest.json" for fam, seed in runs]
    if figures:
        outputs.append("sweep.png")
    write_manifest(base, "sweep-schedules", cfg, outputs, "running")

    # a schedule only matters to a controller that follows it
    controller = cfg["controller.kind"]
    if controller == "none":
        controller = "entrocraft"
    summary, combined, traces = [], [], {}
    for fam, seed in runs:
        sched = sweep_schedule(cfg, fam)
        run_cfg = cfg.with_values(**{
            "controller__kind": controller,
            "run__seed": seed, "schedule__family": sched.family, "schedule__start": sched.start,
            "schedule__end": sched.end, "run__figures": False, "run__checkpoint_every": 0,
            "run__eval_every": 0,
        })
        out = base / "sweep" / f"{fam}_seed{seed}"
        out.mkdir(parents=True, exist_ok=True)
        manifest = read_manifest(out)
        if manifest is None or manifest.get("status") != "complete" \
                or manifest.get("config") != render(run_cfg):
            run_training(run_cfg, out, "sweep-schedules")
        else:
            print(f"skip {fam} seed {seed}: complete run found")
        rows = read_metrics(out / "metrics.csv")
        entropy = [r.batch_entropy for r in rows]
        traces[f"{fam}/{seed}"] = entropy
        summary.append((fam, seed, len(rows),
                        float(np.mean([r.mean_reward for r in rows[-max(1, len(rows) // 20):]])),
                        entropy[-1] if entropy else float("nan"),
                        late_variance(entropy), tracking_fraction(rows)))
        combined.extend((fam, seed) + r.values() for r in rows)
    write_csv(base / "sweep_summary.csv", SWEEP_HEADER, summary)
    write_csv(base / "sweep_metrics.csv", ("family", "seed") + METRICS_HEADER, combined)
    if figures:
        from .report import sweep_figure
        sweep_figure(traces, base / "sweep.png")
    write_manifest(base, "sweep-schedules", cfg, outputs, "complete")
    for row in summary:
        print(f"{row[0]:9s} seed={row[1]} final_reward={row[3]:.4f} "
              f"late_var={row[5]:.3e} tracking={row[6]:.3f}")
    return 0


def read_metrics(path: Path):
    """Metrics rows back from a CSV written by :func:`run_training`."""
    from .trainer import MetricsRow
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if tuple(header) != METRICS_HEADER:
            raise RuntimeError(f"{path}: unexpected metrics header")
        for line in fh:
            f = line.rstrip("\n").split(",")
            num = lambda s: float(s) if s else float("nan")
            rows.append(MetricsRow(int(f[0]), int(f[1]), num(f[2]), num(f[3]), num(f[4]),
                                   int(f[5]), num(f[6]), int(f[7]), num(f[8]), num(f[9]),
                                   num(f[10])))
    return rows


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    try:
        params = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise ConfigError(f"bad checkpoint {args.checkpoint}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from None
    task = TaskSpec(kind=args.task, operand_count=args.operands, bit_count=args.bits)
    streams = StreamFactory(args.seed)
    mk, pk = evaluate_pass_at_k(params, task, args.prompts, args.K, args.temperature, streams,
                                args.max_len)
    row = ("", task.kind, args.K, mk, pk)
    print(f"mean@{args.K}={mk:.4f} pass@{args.K}={pk:.4f}")
    base = Path(os.environ.get("ENTROSIM_OUT") or args.out)
    base.mkdir(parents=True, exist_ok=True)
    path = base / "eval.csv"
    new = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as fh:
        if new:
            fh.write(",".join(EVAL_HEADER) + "\n")
        fh.write(csv_line(row))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="entrosim", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", help="config file of 'section.key = value' lines")
        p.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                       help="replace one config value (repeatable)")
        return p

    with_config(sub.add_parser("train", help="run one training job"))
    vt = with_config(sub.add_parser("verify-theory", help="measure the entropy sign law"))
    vt.add_argument("--variant", choices=("tabular", "mlp"), default=None,
                    help="policy family for the trials (default: policy.variant)")
    with_config(sub.add_parser("sweep-schedules", help="train every schedule family x seed "
                                                       "(entrocraft unless another controller is set)"))
    with_config(sub.add_parser("config", help="print the resolved config"))

    ev = sub.add_parser("eval", help="pass@K of a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--task", choices=("modular-sum", "parity"), default="modular-sum")
    ev.add_argument("--operands", type=int, default=2)
    ev.add_argument("--bits", type=int, default=3)
    ev.add_argument("--K", "-k", type=int, default=32)
    ev.add_argument("--temperature", type=float, default=0.6)
    ev.add_argument("--prompts", type=int, default=64)
    ev.add_argument("--max-len", type=int, default=2)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--out", default="out")
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval":
            if args.K < 1 or args.temperature <= 0 or args.prompts < 1:
                raise ConfigError("eval needs K >= 1, temperature > 0 and prompts >= 1")
            return cmd_eval(args)
        cfg = load(args.config, args.override)
        if args.command == "config":
            sys.stdout.write(render(cfg))
            return 0
        run_config(cfg)          # validate before any output is written
        handler = {"train": cmd_train, "verify-theory": cmd_verify_theory,
                   "sweep-schedules": cmd_sweep_schedules}[args.command]
        return handler(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingAborted as exc:
        print(f"runtime error: {exc} (step {exc.step})", file=sys.stderr)
        return 1
    except (RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
