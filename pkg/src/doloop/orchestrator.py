"""The closed experimental loop: score candidate interventions by cloned-learner
lookahead, execute the best one, update learner and policy, track convergence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import Intervention
from .errors import UnknownPolicy, UnscoredCandidate
from .policy import (
    Candidate,
    History,
    StateFeatures,
    TrainablePolicy,
    ValueGrid,
    featurize,
    propose_max_variance,
    propose_random,
    propose_round_robin,
)
from .trainers import (
    DpoConfig,
    PpoBatch,
    PpoConfig,
    ValueCritic,
    all_preference_pairs,
    dpo_update,
    make_preference_pairs,
    ppo_update,
    refresh_reference,
)

MAXVAR_GRID = np.arange(-5.0, 6.0, 1.0)
MAXVAR_PASSES = 8


def _fork(rng: np.random.Generator) -> np.random.Generator:
    """A full copy of the generator (state and seed sequence): callers that
    should see identical draws (matched candidate probes) each get their own."""
    import copy

    return copy.deepcopy(rng)


@dataclass(frozen=True)
class RewardBreakdown:
    """The three-term candidate reward: information gain plus weighted node
    importance and exploration diversity."""

    info_gain: float
    importance: float
    diversity: float
    total: float

    def as_dict(self) -> dict:
        return {
            "info_gain": self.info_gain,
            "importance": self.importance,
            "diversity": self.diversity,
            "total": self.total,
        }


@dataclass
class RewardConfig:
    importance_weight: float = 0.1
    diversity_weight: float = 0.05


@dataclass
class ProbeConfig:
    m_probe: int = 16
    g_steps: int = 5
    repeats: int = 2  # probe replications averaged per candidate (noise control)
    mode: str = "oracle"  # "oracle" samples the environment, "self" the learner
    m_context: int = 32  # replay rows mixed into probe training to anchor the fit
    lr: float = 5e-4  # probe step size (plain clipped gradient steps)
    clip_norm: float = 5.0  # probe gradient-norm ceiling keeps the measurement first-order
    optimizer: str = "sgd"  # "sgd" keeps the measured change first-order; "adam" reuses the training rule

    def __post_init__(self):
        if self.mode not in ("oracle", "self"):
            raise ValueError("probe mode must be 'oracle' or 'self'")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("probe optimizer must be 'sgd' or 'adam'")


@dataclass
class ConvergenceConfig:
    threshold: float = 0.1
    window: int = 10
    min_episodes: int = 40
    max_episodes: int = 250
    enabled: bool = True

    def thresholds(self, n_nodes: int) -> np.ndarray:
        return np.full(n_nodes, self.threshold)


@dataclass
class LoopConfig:
    k_candidates: int = 4
    temperature: float = 0.7
    n_exec: int = 8
    warm_interventions: int = 200
    warm_train_steps: int = 5
    warm_teacher_pool: int = 12  # random candidates ranked per warm step for cloning
    bc_lr: float = 1e-3
    bc_epochs: int = 5
    # Execution follows the raw info-gain argmax; preference pairs still rank
    # by the full three-term reward. "reward" switches execution to the
    # total-reward argmax instead.
    select_by: str = "gain"
    teacher_select: str = "gain"  # warm-start cloning target: argmax info gain or total reward
    lr_decay: float = 0.0  # optional in-loop anneal fraction of the learner lr
    consolidation_steps: int = 3000  # post-loop fit of the full final buffer (annealed lr)
    score_baselines: bool = False

    def __post_init__(self):
        if self.select_by not in ("reward", "gain"):
            raise ValueError("select_by must be 'reward' or 'gain'")
        if self.teacher_select not in ("reward", "gain"):
            raise ValueError("teacher_select must be 'reward' or 'gain'")


# -- reward components ------------------------------------------------------


def node_importance(node: int, ledger: np.ndarray) -> float:
    """Share of the total ledger loss carried by the candidate node."""
    ledger = np.asarray(ledger, dtype=np.float64)
    total = float(ledger.sum())
    if total == 0.0:
        return 0.0
    return float(ledger[node] / total)


def diversity(node: int, value: float, history: History, grid: ValueGrid | None) -> float:
    """Half under-sampled-node bonus, half (node, value-bin) novelty."""
    count_frac = history.node_counts[node] / max(1, history.total)
    bin_idx = grid.nearest_bin(value) if grid is not None else 0
    c = history.bin_counts.get((node, bin_idx), 0)
    novelty = 1.0 if c == 0 else 1.0 / (1.0 + c)
    return float(0.5 * (1.0 - count_frac) + 0.5 * novelty)


def probe_baseline(problem, probe_cfg: ProbeConfig, context) -> float:
    """Total held-out loss after the context-only training the probes share.

    Subtracting this baseline removes the context's own effect, so candidates
    scored against the same context are compared purely on their probe rows.
    Without context the baseline is simply the current total.
    """
    if context is None:
        return problem.total()
    clone = problem.clone()
    clone.train_probe(None, probe_cfg.g_steps, context=context, lr=probe_cfg.lr, use_sgd=probe_cfg.optimizer == "sgd", clip=probe_cfg.clip_norm)
    clone.evaluate()
    return clone.total()


def estimate_info_gain(
    candidate: Candidate,
    problem,
    env,
    probe_cfg: ProbeConfig,
    rng: np.random.Generator,
    context: tuple[np.ndarray, np.ndarray] | None = None,
    baseline: float | None = None,
) -> tuple[float, int]:
    """Lookahead: train a cloned learner on a small probe drawn under the
    candidate and report the drop in total held-out loss.

    Probe rows train together with `context` replay rows (the clone's shared
    buffer exists exactly so probes land in context); the baseline is the
    matching context-only outcome. The main learner is untouched. Returns
    (delta, probe rows consumed).
    """
    if baseline is None:
        baseline = probe_baseline(problem, probe_cfg, context)
    deltas = []
    rows = 0
    for _ in range(max(1, probe_cfg.repeats)):
        clone = problem.clone()
        if probe_cfg.mode == "oracle":
            probe = env.probe(candidate.intervention, probe_cfg.m_probe, rng)
        else:
            probe = problem.self_probe(candidate.intervention, probe_cfg.m_probe, rng)
        clone.ingest(probe)
        clone.train_probe(probe, probe_cfg.g_steps, context=context, lr=probe_cfg.lr, use_sgd=probe_cfg.optimizer == "sgd", clip=probe_cfg.clip_norm)
        clone.evaluate()
        deltas.append(baseline - clone.total())
        rows += probe.n_rows
    return float(np.mean(deltas)), rows


def score(
    candidate: Candidate,
    problem,
    env,
    history: History,
    reward_cfg: RewardConfig,
    probe_cfg: ProbeConfig,
    rng: np.random.Generator,
    grid: ValueGrid | None,
    context: tuple[np.ndarray, np.ndarray] | None = None,
    baseline: float | None = None,
) -> tuple[RewardBreakdown, int]:
    delta, probe_rows = estimate_info_gain(candidate, problem, env, probe_cfg, rng, context=context, baseline=baseline)
    w = node_importance(candidate.intervention.node, problem.ledger)
    d = diversity(candidate.intervention.node, candidate.intervention.value, history, grid)
    total = delta + reward_cfg.importance_weight * w + reward_cfg.diversity_weight * d
    return RewardBreakdown(float(delta), float(w), float(d), float(total)), probe_rows


# -- convergence --------------------------------------------------------------


def check_convergence(ledger_history: list[np.ndarray], cfg: ConvergenceConfig) -> bool:
    """Converged iff at least min_episodes ran and the last `window` ledgers
    put every node below its threshold."""
    if not ledger_history:
        return False
    episodes = len(ledger_history)
    if episodes < cfg.min_episodes or episodes < cfg.window:
        return False
    thresholds = cfg.thresholds(len(ledger_history[-1]))
    return all(np.all(np.asarray(led) < thresholds) for led in ledger_history[-cfg.window :])


# -- policy handles -----------------------------------------------------------


class PolicyHandle:
    """Uniform proposal surface over baselines and trainable policies."""

    name = "base"
    trainable = False
    needs_scoring = False

    def propose(self, features: StateFeatures, problem, t: int, K: int, temperature: float, rng: np.random.Generator) -> list[Candidate]:
        raise NotImplementedError

    def episode_update(self, outcome: "EpisodeOutcome") -> dict:
        return {}


class RandomHandle(PolicyHandle):
    name = "random"

    def __init__(self, n_actions: int, value_range, has_value: bool):
        self.n_actions = n_actions
        self.value_range = value_range
        self.has_value = has_value

    def propose(self, features, problem, t, K, temperature, rng):
        return propose_random(self.n_actions, self.value_range, 1, rng, with_value=self.has_value)


class RandomLookaheadHandle(RandomHandle):
    """Random proposals, identical scoring and argmax selection as the
    trainable loop: isolates the value of lookahead without learning."""

    name = "random-lookahead"
    needs_scoring = True

    def propose(self, features, problem, t, K, temperature, rng):
        return propose_random(self.n_actions, self.value_range, K, rng, with_value=self.has_value)


class RoundRobinHandle(PolicyHandle):
    name = "roundrobin"

    def __init__(self, n_actions: int, has_value: bool):
        self.n_actions = n_actions
        self.has_value = has_value

    def propose(self, features, problem, t, K, temperature, rng):
        cand = propose_round_robin(t, self.n_actions)
        if not self.has_value:
            cand = Candidate(Intervention(cand.intervention.node, 0.0), cand.log_prob)
        return [cand]


class MaxVarianceHandle(PolicyHandle):
    name = "maxvar"

    def __init__(self, n_actions: int):
        self.n_actions = n_actions

    def propose(self, features, problem, t, K, temperature, rng):
        refs = reference_values(problem)
        return [
            propose_max_variance(
                problem.learner,
                MAXVAR_GRID,
                MAXVAR_PASSES,
                rng,
                parent_refs=refs,
                action_nodes=range(self.n_actions),
            )
        ]


class DpoHandle(PolicyHandle):
    name = "dpo"
    trainable = True
    needs_scoring = True

    def __init__(self, policy: TrainablePolicy, cfg: DpoConfig, frozen: bool = False):
        self.policy = policy
        self.cfg = cfg
        self.frozen = frozen  # --no-dpo ablation: propose but never update
        self.reference = policy.snapshot()

    def propose(self, features, problem, t, K, temperature, rng):
        return self.policy.propose(features, K, temperature, rng)

    def episode_update(self, outcome: "EpisodeOutcome") -> dict:
        if self.frozen:
            return {"dpo_loss": None, "dpo_margin": None, "n_pairs": 0}
        if self.cfg.pairs_per_step == "all":
            pairs = all_preference_pairs(outcome.candidates, outcome.features)
        else:
            pair = make_preference_pairs(outcome.candidates, outcome.features)
            pairs = [pair] if pair is not None else []
        metrics = dpo_update(self.policy, self.reference, pairs, self.cfg)
        self.reference = refresh_reference(self.policy, self.reference, outcome.episode_number, self.cfg.ref_period)
        return metrics


class PpoHandle(PolicyHandle):
    name = "ppo"
    trainable = True
    needs_scoring = True

    def __init__(self, policy: TrainablePolicy, critic: ValueCritic, cfg: PpoConfig):
        self.policy = policy
        self.critic = critic
        self.cfg = cfg
        self.batch = PpoBatch()

    def propose(self, features, problem, t, K, temperature, rng):
        return self.policy.propose(features, K, temperature, rng)

    def episode_update(self, outcome: "EpisodeOutcome") -> dict:
        executed = outcome.executed
        self.batch.add(outcome.features, executed.intervention, executed.log_prob, executed.breakdown.total)
        if len(self.batch) < self.cfg.rollout:
            return {"ppo_pending": len(self.batch)}
        self.batch.bootstrap = self.critic.value(outcome.next_features)
        metrics = ppo_update(self.policy, self.critic, self.batch, self.cfg)
        self.batch = PpoBatch()
        return metrics


def reference_values(problem) -> np.ndarray:
    """Per-learner-node reference inputs for grid sweeps: the column means of
    the first (observational) validation block."""
    block = problem.validation.blocks[0][0]
    return block.mean(axis=0)


def make_policy_handle(
    name: str,
    env,
    rng: np.random.Generator,
    dpo_cfg: DpoConfig | None = None,
    ppo_cfg: PpoConfig | None = None,
    frozen_dpo: bool = False,
) -> PolicyHandle:
    grid = ValueGrid(*env.value_range) if env.has_value else ValueGrid()
    if name == "random":
        return RandomHandle(env.n_actions, env.value_range, env.has_value)
    if name == "random-lookahead":
        return RandomLookaheadHandle(env.n_actions, env.value_range, env.has_value)
    if name == "roundrobin":
        return RoundRobinHandle(env.n_actions, env.has_value)
    if name == "maxvar":
        if env.name == "archive":
            raise UnknownPolicy("maxvar needs a value grid; archive actions have none")
        return MaxVarianceHandle(env.n_actions)
    children = env.action_children
    if name == "dpo":
        policy = TrainablePolicy(env.n_actions, rng, grid=grid, value_head=env.has_value, action_children=children)
        return DpoHandle(policy, dpo_cfg or DpoConfig(), frozen=frozen_dpo)
    if name == "ppo":
        policy = TrainablePolicy(env.n_actions, rng, grid=grid, value_head=env.has_value, action_children=children)
        critic = ValueCritic(3 * env.n_actions + 1, rng)
        return PpoHandle(policy, critic, ppo_cfg or PpoConfig())
    raise UnknownPolicy(f"no policy named {name!r}")


# -- the loop -----------------------------------------------------------------


@dataclass
class EpisodeOutcome:
    """Everything a trainer needs from one episode."""

    episode_number: int  # 1-based
    features: StateFeatures
    next_features: StateFeatures
    candidates: list[Candidate]
    executed: Candidate


@dataclass
class EpisodeLog:
    episode: int
    candidates: list[dict]
    executed: dict
    ledger: list[float]
    total_loss: float
    policy_metrics: dict
    probe_rows: int
    exec_rows: int

    def as_dict(self) -> dict:
        return {
            "episode": self.episode,
            "candidates": self.candidates,
            "executed": self.executed,
            "ledger": self.ledger,
            "total_loss": self.total_loss,
            "policy_metrics": self.policy_metrics,
            "probe_rows": self.probe_rows,
            "exec_rows": self.exec_rows,
        }


class ExperimentLoop:
    """One seeded run: warm start, then episodes until budget or convergence."""

    def __init__(
        self,
        env,
        handle: PolicyHandle,
        rng: np.random.Generator,
        loop_cfg: LoopConfig | None = None,
        reward_cfg: RewardConfig | None = None,
        probe_cfg: ProbeConfig | None = None,
        conv_cfg: ConvergenceConfig | None = None,
    ):
        self.env = env
        self.handle = handle
        self.loop_cfg = loop_cfg or LoopConfig()
        self.reward_cfg = reward_cfg or RewardConfig()
        self.probe_cfg = probe_cfg or ProbeConfig()
        self.conv_cfg = conv_cfg or ConvergenceConfig()
        problem_rng, self.warm_rng, self.episode_rng = rng.spawn(3)
        self.problem = env.make_problem(problem_rng)
        self.grid = ValueGrid(*env.value_range) if env.has_value else None
        self.history = History(env.n_actions)
        self.ledger_history: list[np.ndarray] = []
        self.logs: list[EpisodeLog] = []
        self.warm_rows = 0
        self.exec_rows = 0
        self.probe_rows = 0
        self.t = 0
        self.t_max = self.conv_cfg.max_episodes

    # -- warm start -----------------------------------------------------------

    def warm_start(self, n: int | None = None) -> None:
        """Execute n uniform-random interventions to seed the learner; fit a
        trainable policy by behavior-cloning the best-scoring of K random
        candidates at each step."""
        cfg = self.loop_cfg
        n = cfg.warm_interventions if n is None else n
        self.problem.evaluate()
        if n == 0:
            return
        bc_pairs: list[tuple[StateFeatures, Intervention]] = []
        warm_history = History(self.env.n_actions)
        for step in range(n):
            step_rng = self.warm_rng.spawn(1)[0]
            k = cfg.warm_teacher_pool if self.handle.trainable else 1
            candidates = propose_random(self.env.n_actions, self.env.value_range, k, step_rng, with_value=self.env.has_value)
            if self.handle.trainable:
                features = featurize(self.problem.ledger, warm_history, step, n)
                context = self.problem.sample_context(step_rng, self.probe_cfg.m_context)
                baseline = probe_baseline(self.problem, self.probe_cfg, context)
                probe_seed = step_rng.spawn(1)[0]
                best, best_key = None, -np.inf
                for cand in candidates:
                    # matched probe streams: candidates share exogenous draws
                    breakdown, rows = score(
                        cand,
                        self.problem,
                        self.env,
                        warm_history,
                        self.reward_cfg,
                        self.probe_cfg,
                        _fork(probe_seed),
                        self.grid,
                        context=context,
                        baseline=baseline,
                    )
                    self.probe_rows += rows
                    key = breakdown.info_gain if cfg.teacher_select == "gain" else breakdown.total
                    if key > best_key:
                        best, best_key = cand, key
                teacher = best.intervention if self.env.has_value else Intervention(best.intervention.node, 0.0)
                bc_pairs.append((features, self._snap(teacher)))
            executed = candidates[0]
            ds = self.env.execute(executed.intervention, cfg.n_exec, step_rng)
            self.warm_rows += ds.n_rows
            self.problem.ingest(ds)
            self.problem.train_episode(step_rng, steps=cfg.warm_train_steps)
            self.problem.evaluate()
            warm_history.record(executed.intervention.node, self._bin(executed.intervention.value))
        if self.handle.trainable and bc_pairs:
            self._behavior_clone(bc_pairs)

    def _snap(self, iv: Intervention) -> Intervention:
        """Snap a continuous teacher value onto the policy grid for cloning."""
        if self.grid is None:
            return Intervention(iv.node, 0.0)
        return Intervention(iv.node, float(self.grid.centers[self.grid.nearest_bin(iv.value)]))

    def _bin(self, value: float) -> int:
        return self.grid.nearest_bin(value) if self.grid is not None else 0

    def _behavior_clone(self, pairs: list[tuple[StateFeatures, Intervention]]) -> None:
        from .nn import Adam

        policy = self.handle.policy
        order = np.arange(len(pairs))
        for _ in range(self.loop_cfg.bc_epochs):
            self.warm_rng.shuffle(order)
            for i in order:
                features, iv = pairs[i]
                _, grads = policy.log_prob_grads(features, iv)
                policy.adam.step(policy.params, {k: -g for k, g in grads.items()}, self.loop_cfg.bc_lr)
        # fresh optimizer state for the preference/value phase
        policy.adam = Adam(policy.params)
        if isinstance(self.handle, DpoHandle):
            self.handle.reference = policy.snapshot()

    # -- episodes ---------------------------------------------------------------

    def run_episode(self) -> EpisodeLog:
        cfg = self.loop_cfg
        ep_rng = self.episode_rng.spawn(1)[0]
        features = featurize(self.problem.ledger, self.history, self.t, self.t_max)
        candidates = self.handle.propose(features, self.problem, self.t, cfg.k_candidates, cfg.temperature, ep_rng)

        probe_rows = 0
        if self.handle.needs_scoring or cfg.score_baselines:
            context = self.problem.sample_context(ep_rng, self.probe_cfg.m_context)
            baseline = probe_baseline(self.problem, self.probe_cfg, context)
            probe_seed = ep_rng.spawn(1)[0]
            for cand in candidates:
                # matched probe streams: candidates share exogenous draws
                breakdown, rows = score(
                    cand,
                    self.problem,
                    self.env,
                    self.history,
                    self.reward_cfg,
                    self.probe_cfg,
                    _fork(probe_seed),
                    self.grid,
                    context=context,
                    baseline=baseline,
                )
                cand.breakdown = breakdown
                probe_rows += rows
            key = (lambda c: c.breakdown.total) if cfg.select_by == "reward" else (lambda c: c.breakdown.info_gain)
            executed = max(candidates, key=key)
        else:
            executed = candidates[0]

        ds = self.env.execute(executed.intervention, cfg.n_exec, ep_rng)
        self.problem.ingest(ds)
        lr_scale = 1.0 - cfg.lr_decay * min(1.0, self.t / max(1, self.t_max))
        self.problem.train_episode(ep_rng, lr_scale=lr_scale)
        ledger = self.problem.evaluate()
        self.history.record(executed.intervention.node, self._bin(executed.intervention.value))
        self.ledger_history.append(ledger)

        next_features = featurize(ledger, self.history, self.t + 1, self.t_max)
        outcome = EpisodeOutcome(self.t + 1, features, next_features, candidates, executed)
        metrics = self.handle.episode_update(outcome)

        log = EpisodeLog(
            episode=self.t,
            candidates=[
                {
                    "node": c.intervention.node,
                    "value": c.intervention.value,
                    "log_prob": c.log_prob,
                    "breakdown": c.breakdown.as_dict() if c.breakdown is not None else None,
                }
                for c in candidates
            ],
            executed=executed.intervention.as_dict(),
            ledger=[float(v) for v in ledger],
            total_loss=float(np.sum(ledger)),
            policy_metrics=metrics,
            probe_rows=probe_rows,
            exec_rows=ds.n_rows,
        )
        self.logs.append(log)
        self.probe_rows += probe_rows
        self.exec_rows += ds.n_rows
        self.t += 1
        return log

    def run(self, budget: int | None = None) -> int | None:
        """Run episodes until the budget (exactly) or convergence; returns the
        1-based convergence episode, or None. Afterwards the learner gets one
        annealed consolidation fit of its final buffer, so the reported losses
        reflect what the gathered data supports rather than the optimizer's
        constant-rate noise floor."""
        limit = budget if budget is not None else self.conv_cfg.max_episodes
        self.t_max = limit
        convergence_episode = None
        while self.t < limit:
            self.run_episode()
            if convergence_episode is None and check_convergence(self.ledger_history, self.conv_cfg):
                convergence_episode = self.t
                if budget is None and self.conv_cfg.enabled:
                    break
        self.consolidate()
        return convergence_episode

    def consolidate(self, steps: int | None = None) -> None:
        steps = self.loop_cfg.consolidation_steps if steps is None else steps
        if steps <= 0:
            return
        chunks = 25
        for chunk in range(chunks):
            u = chunk / max(1, chunks - 1)
            # quadratic anneal with a deep tail so the scalar root models
            # settle onto their buffer optimum instead of jittering around it
            scale = max(0.005, (1.0 - u) ** 2)
            self.problem.train_consolidation(self.episode_rng, steps=max(1, steps // chunks), lr_scale=scale)
        self.problem.evaluate()
