"""Command-line front end: run, bench, ablate, plotdata, selftest.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from .config import DEFAULT_SEEDS, RunConfig, config_to_dict, load_config, save_config
from .errors import DoloopError, MissingLogs
from .runner import RunResult, run_experiment, write_experiment
from .stats import bonferroni_threshold, cohens_d, paired_t_test, summarize

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class CliParser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit(2); usage errors are 1 here
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(USAGE_EXIT)


def build_parser() -> CliParser:
    parser = CliParser(prog="doloop", description="Closed-loop causal experimental design runner.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--env", choices=["scm5", "scm15", "duffing", "archive"], help="environment name")
        p.add_argument("--scm-path", help="custom SCM description file (JSON)")
        p.add_argument("--seeds", help="comma-separated seed list (default 42,123,456,789,1011)")
        p.add_argument("--episodes", type=int, help="fixed episode budget (default: run to convergence)")
        p.add_argument("--jobs", type=int, help="parallel seed workers")
        p.add_argument("--outdir", help="output root directory (default runs)")
        p.add_argument("--warm", type=int, help="warm-start intervention count")
        p.add_argument("--probe-mode", choices=["oracle", "self"], help="lookahead probe source")
        p.add_argument("--select-by", choices=["reward", "gain"], help="execute argmax of total reward or raw info gain")
        p.add_argument("--pairs-per-step", choices=["one", "all"], help="preference pairs formed per episode")
        p.add_argument("--score-baselines", action="store_true", default=None, help="score even unscored baseline candidates")
        p.add_argument("--no-pernode-convergence", action="store_true", default=None, help="ablation: fixed 100-episode budget")
        p.add_argument("--no-root-learner", action="store_true", default=None, help="ablation: roots as zero-input predictors on all rows")
        p.add_argument("--no-dpo", action="store_true", default=None, help="ablation: freeze the policy after warm start")
        p.add_argument("--no-diversity", action="store_true", default=None, help="ablation: drop the diversity reward term")

    p_run = sub.add_parser("run", help="run one policy on one environment")
    add_common(p_run)
    p_run.add_argument("--policy", help="random | roundrobin | maxvar | random-lookahead | dpo | ppo")

    p_bench = sub.add_parser("bench", help="compare policies at an equal episode budget")
    add_common(p_bench)
    p_bench.add_argument("--policies", default="dpo,random,roundrobin,maxvar", help="comma list; first entry is the candidate method")
    p_bench.add_argument("--budget", type=int, default=171, help="episodes per run (default 171)")

    p_ablate = sub.add_parser("ablate", help="full configuration plus single-component removals")
    add_common(p_ablate)
    p_ablate.add_argument("--budget", type=int, help="fixed budget for the full config (default: convergence)")

    p_plot = sub.add_parser("plotdata", help="emit tidy CSVs from a finished run directory")
    p_plot.add_argument("run_dir", help="directory produced by `doloop run`")

    sub.add_parser("selftest", help="run the built-in gradient and semantics checks")
    return parser


def apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    cfg = dataclasses.replace(cfg)
    if getattr(args, "env", None):
        cfg.env.name = args.env
    if getattr(args, "scm_path", None):
        cfg.env.scm_path = args.scm_path
    if getattr(args, "policy", None):
        cfg.policy = args.policy
    if getattr(args, "seeds", None):
        cfg.seeds = tuple(int(s) for s in args.seeds.split(","))
    if getattr(args, "episodes", None) is not None:
        cfg.episodes = args.episodes
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "outdir", None):
        cfg.outdir = args.outdir
    if getattr(args, "warm", None) is not None:
        cfg.loop.warm_interventions = args.warm
    if getattr(args, "probe_mode", None):
        cfg.probe.mode = args.probe_mode
    if getattr(args, "select_by", None):
        cfg.loop.select_by = args.select_by
    if getattr(args, "pairs_per_step", None):
        cfg.dpo.pairs_per_step = args.pairs_per_step
    if getattr(args, "score_baselines", None):
        cfg.loop.score_baselines = True
    for flag in ("no_pernode_convergence", "no_root_learner", "no_dpo", "no_diversity"):
        if getattr(args, flag, None):
            setattr(cfg.ablation, flag, True)
    return cfg


def load_base_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(cfg, args)


def _stamp(prefix: str) -> str:
    return f"{prefix}_{time.strftime('%Y%m%d-%H%M%S')}"


def cmd_run(args) -> int:
    cfg = load_base_config(args)
    outdir = Path(cfg.outdir) / _stamp(f"{cfg.env.name}_{cfg.policy}")
    results, summary = write_experiment(cfg, outdir)
    print(f"wrote {outdir}")
    loss = summary["total_loss"]
    print(f"{cfg.policy} on {cfg.env.name}: loss mean {loss['mean']:.4f} +/- {loss['std']:.4f}, median {loss['median']:.4f}")
    return 0


BENCH_COLUMNS = (
    "method",
    "episodes",
    "mean",
    "std",
    "ci_lo",
    "ci_hi",
    "median",
    "improvement_pct",
    "p_value",
    "significant",
    "cohens_d",
)


def bench_rows(per_policy: dict[str, list[RunResult]], budget: int) -> list[dict]:
    """Comparison table: the first policy is the method, the rest are baselines."""
    names = list(per_policy)
    method = names[0]
    method_losses = np.array([r.total_loss for r in per_policy[method]])
    m_comparisons = max(1, len(names) - 1)
    alpha = bonferroni_threshold(0.05, m_comparisons)
    rows = []
    for name in names:
        losses = np.array([r.total_loss for r in per_policy[name]])
        s = summarize(losses)
        row = {
            "method": name,
            "episodes": budget,
            "mean": s.mean,
            "std": s.std,
            "ci_lo": s.ci_lo,
            "ci_hi": s.ci_hi,
            "median": s.median,
            "improvement_pct": "",
            "p_value": "",
            "significant": "",
            "cohens_d": "",
        }
        if name != method:
            base_mean = losses.mean()
            row["improvement_pct"] = 100.0 * (base_mean - method_losses.mean()) / base_mean if base_mean != 0 else float("inf")
            try:
                _, p = paired_t_test(method_losses, losses)
                row["p_value"] = p
                row["significant"] = bool(p < alpha)
            except DoloopError:
                row["p_value"] = float("nan")
                row["significant"] = False
            d = cohens_d(losses, method_losses)
            row["cohens_d"] = "inf" if np.isinf(d) else d
        rows.append(row)
    return rows


def _format_cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_table(rows: list[dict], columns: tuple[str, ...], outdir: Path, name: str) -> None:
    with open(outdir / f"{name}.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)
    widths = {c: max(len(c), *(len(_format_cell(r[c])) for r in rows)) for c in columns}
    lines = ["  ".join(c.ljust(widths[c]) for c in columns)]
    for r in rows:
        lines.append("  ".join(_format_cell(r[c]).ljust(widths[c]) for c in columns))
    text = "\n".join(lines)
    (outdir / f"{name}.txt").write_text(text + "\n")
    print(text)


def cmd_bench(args) -> int:
    cfg = load_base_config(args)
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if len(policies) < 2:
        print("error: bench needs at least two policies", file=sys.stderr)
        return USAGE_EXIT
    outdir = Path(cfg.outdir) / _stamp(f"bench_{cfg.env.name}")
    outdir.mkdir(parents=True, exist_ok=True)
    cfg.episodes = args.budget
    per_policy: dict[str, list[RunResult]] = {}
    for policy in policies:
        pcfg = dataclasses.replace(cfg, policy=policy)
        results, summary = run_experiment(pcfg, str(outdir / policy))
        per_policy[policy] = results
        (outdir / policy / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    save_config(cfg, outdir / "resolved_config.json")
    write_table(bench_rows(per_policy, args.budget), BENCH_COLUMNS, outdir, "bench")
    print(f"wrote {outdir}")
    return 0


ABLATION_ROWS = (
    ("full", {}),
    ("no_pernode_convergence", {"no_pernode_convergence": True}),
    ("no_root_learner", {"no_root_learner": True}),
    ("no_dpo", {"no_dpo": True}),
    ("no_diversity", {"no_diversity": True}),
)

ABLATE_COLUMNS = ("variant", "episodes", "mean", "std", "median", "degradation_pct")


def cmd_ablate(args) -> int:
    cfg = load_base_config(args)
    cfg.policy = "dpo"
    if args.budget is not None:
        cfg.episodes = args.budget
    outdir = Path(cfg.outdir) / _stamp(f"ablate_{cfg.env.name}")
    outdir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, outdir / "resolved_config.json")
    rows = []
    full_mean = None
    for variant, flags in ABLATION_ROWS:
        vcfg = dataclasses.replace(cfg, ablation=dataclasses.replace(cfg.ablation, **flags))
        results, summary = run_experiment(vcfg, str(outdir / variant))
        (outdir / variant / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
        loss = summary["total_loss"]
        if variant == "full":
            full_mean = loss["mean"]
        rows.append(
            {
                "variant": variant,
                "episodes": int(np.mean(summary["episodes"])),
                "mean": loss["mean"],
                "std": loss["std"],
                "median": loss["median"],
                "degradation_pct": ""
                if variant == "full" or not full_mean
                else 100.0 * (loss["mean"] - full_mean) / full_mean,
            }
        )
    write_table(rows, ABLATE_COLUMNS, outdir, "ablate")
    print(f"wrote {outdir}")
    return 0


def cmd_plotdata(args) -> int:
    run_dir = Path(args.run_dir)
    seed_dirs = sorted(run_dir.glob("seed*"))
    if not seed_dirs:
        raise MissingLogs(f"{run_dir} holds no seed directories")
    out = run_dir / "plotdata"
    out.mkdir(exist_ok=True)
    for seed_dir in seed_dirs:
        log_path = seed_dir / "episodes.jsonl"
        if not log_path.exists():
            raise MissingLogs(f"{seed_dir} is missing episodes.jsonl")
        logs = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
        if not logs:
            raise MissingLogs(f"{log_path} is empty")
        result = json.loads((seed_dir / "result.json").read_text())
        tag = seed_dir.name

        n = len(logs[0]["ledger"])
        with open(out / f"loss_curve_{tag}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode"] + [f"node{i}" for i in range(n)])
            for log in logs:
                writer.writerow([log["episode"]] + [repr(v) for v in log["ledger"]])

        with open(out / f"histogram_{tag}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node", "count"])
            for i, c in enumerate(result["histogram"]):
                writer.writerow([i, c])

        with open(out / f"reward_components_{tag}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["episode", "info_gain", "importance", "diversity", "total"])
            for log in logs:
                executed = log["executed"]
                breakdown = next(
                    (c["breakdown"] for c in log["candidates"] if c["breakdown"] is not None and c["node"] == executed["node"] and c["value"] == executed["value"]),
                    None,
                )
                if breakdown is not None:
                    writer.writerow([log["episode"]] + [repr(breakdown[k]) for k in ("info_gain", "importance", "diversity", "total")])
    print(f"wrote {out}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else RUNTIME_EXIT


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "run": cmd_run,
        "bench": cmd_bench,
        "ablate": cmd_ablate,
        "plotdata": cmd_plotdata,
        "selftest": cmd_selftest,
    }
    try:
        return handlers[args.command](args)
    except DoloopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
