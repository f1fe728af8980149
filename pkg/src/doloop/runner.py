"""Seeded experiment runs, seed-level parallelism, and run summaries."""
from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archive import load_archive, load_regime_spec, generate_synthetic_archive
from .config import RunConfig, config_to_dict
from .envs import ArchiveEnvironment, DuffingEnvironment, ScmEnvironment, make_environment
from .errors import UnknownEnvironment
from .orchestrator import ConvergenceConfig, ExperimentLoop, make_policy_handle
from .scm import load_scm_config
from .stats import Summary, summarize


@dataclass
class RunResult:
    seed: int
    env_name: str
    policy_name: str
    episodes: int
    convergence_episode: int | None
    final_ledger: list[float]
    total_loss: float
    histogram: list[int]
    warm_rows: int
    exec_rows: int
    probe_rows: int
    extra: dict

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def build_environment(cfg: RunConfig, seed_rng: np.random.Generator | None = None):
    """Instantiate the configured environment with learner knobs attached."""
    learner_kwargs = {
        "lr": cfg.learner.lr,
        "root_lr": cfg.learner.root_lr,
        "dropout_p": cfg.learner.dropout_p,
        "roots_as_predictors": cfg.ablation.no_root_learner,
    }
    train_cfg = {
        "steps": cfg.learner.steps_per_episode,
        "minibatch": cfg.learner.minibatch,
        "window": cfg.learner.buffer_window,
    }
    spec = cfg.env
    common = {"learner_kwargs": learner_kwargs, "train_cfg": train_cfg}
    if spec.scm_path:
        return ScmEnvironment(load_scm_config(spec.scm_path), f"scm:{spec.scm_path}", value_range=spec.value_range, **common)
    if spec.name in ("scm5", "scm15"):
        return make_environment(spec.name, value_range=spec.value_range, **common)
    if spec.name == "duffing":
        return DuffingEnvironment(spec.duffing, value_range=spec.value_range, **common)
    if spec.name == "archive":
        if spec.archive_csv:
            archive = load_archive(spec.archive_csv, load_regime_spec(spec.archive_regimes))
        else:
            archive = generate_synthetic_archive(spec.archive_rows, spec.archive_n_regimes, np.random.default_rng(spec.archive_seed))
        return ArchiveEnvironment(archive, **common)
    raise UnknownEnvironment(f"no environment named {spec.name!r}")


def effective_convergence(cfg: RunConfig) -> ConvergenceConfig:
    conv = dataclasses.replace(cfg.convergence)
    if cfg.ablation.no_pernode_convergence:
        conv.enabled = False
    return conv


def effective_budget(cfg: RunConfig) -> int | None:
    if cfg.ablation.no_pernode_convergence and cfg.episodes is None:
        return 100  # ablated runs use the fixed short budget
    return cfg.episodes


def run_single(cfg: RunConfig, seed: int, outdir: str | None = None) -> RunResult:
    """One fully seeded run: warm start, loop, metrics, optional log files."""
    reward_cfg = dataclasses.replace(cfg.reward)
    if cfg.ablation.no_diversity:
        reward_cfg.diversity_weight = 0.0

    root = np.random.default_rng(seed)
    env_rng, policy_rng, loop_rng = root.spawn(3)
    env = build_environment(cfg, env_rng)
    handle = make_policy_handle(
        cfg.policy, env, policy_rng, dpo_cfg=cfg.dpo, ppo_cfg=cfg.ppo, frozen_dpo=cfg.ablation.no_dpo
    )
    loop = ExperimentLoop(
        env,
        handle,
        loop_rng,
        loop_cfg=cfg.loop,
        reward_cfg=reward_cfg,
        probe_cfg=cfg.probe,
        conv_cfg=effective_convergence(cfg),
    )
    loop.warm_start()
    convergence_episode = loop.run(effective_budget(cfg))

    result = RunResult(
        seed=seed,
        env_name=env.name,
        policy_name=cfg.policy,
        episodes=loop.t,
        convergence_episode=convergence_episode,
        final_ledger=[float(v) for v in loop.problem.ledger],
        total_loss=float(np.sum(loop.problem.ledger)),
        histogram=[int(c) for c in loop.history.node_counts],
        warm_rows=loop.warm_rows,
        exec_rows=loop.exec_rows,
        probe_rows=loop.probe_rows,
        extra=env.extra_metrics(loop.problem, loop.history),
    )
    if outdir is not None:
        seed_dir = Path(outdir) / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        with open(seed_dir / "episodes.jsonl", "w") as fh:
            for log in loop.logs:
                fh.write(json.dumps(log.as_dict()) + "\n")
        (seed_dir / "result.json").write_text(json.dumps(result.as_dict(), indent=2) + "\n")
        _write_loss_matrix(loop, env, seed_dir / "loss_curves.csv")
    return result


def _write_loss_matrix(loop, env, path: Path) -> None:
    """Episode-by-node loss matrix for plotting (one column per action node)."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode"] + list(env.action_names))
        for log in loop.logs:
            writer.writerow([log.episode] + [repr(v) for v in log.ledger])


def _run_single_star(args) -> RunResult:
    return run_single(*args)


def run_experiment(cfg: RunConfig, outdir: str | None = None) -> tuple[list[RunResult], dict]:
    """Run every configured seed (optionally in parallel) and summarize.

    Results always come back in seed order regardless of scheduling.
    """
    tasks = [(cfg, seed, outdir) for seed in cfg.seeds]
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_single_star, tasks))
    else:
        results = [_run_single_star(t) for t in tasks]
    return results, summarize_results(results)


def summarize_results(results: list[RunResult]) -> dict:
    losses = [r.total_loss for r in results]
    s: Summary = summarize(losses)
    out = {
        "n_seeds": len(results),
        "seeds": [r.seed for r in results],
        "total_loss": {
            "values": losses,
            "mean": s.mean,
            "std": s.std,
            "median": s.median,
            "ci95": [s.ci_lo, s.ci_hi],
        },
        "episodes": [r.episodes for r in results],
        "convergence_episodes": [r.convergence_episode for r in results],
        "histograms": [r.histogram for r in results],
        "warm_rows": [r.warm_rows for r in results],
        "exec_rows": [r.exec_rows for r in results],
        "probe_rows": [r.probe_rows for r in results],
    }
    for key in ("collider_parent_fraction", "coupling_error", "coupling_estimate"):
        vals = [r.extra.get(key) for r in results if key in r.extra]
        if vals:
            out[key] = {"values": vals, "mean": float(np.mean(vals)), "median": float(np.median(vals))}
    return out


def write_experiment(cfg: RunConfig, outdir: str | Path) -> tuple[list[RunResult], dict]:
    """run_experiment plus the standard file layout (resolved config, summary)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "resolved_config.json").write_text(json.dumps(config_to_dict(cfg), indent=2) + "\n")
    results, summary = run_experiment(cfg, str(outdir))
    (outdir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return results, summary
