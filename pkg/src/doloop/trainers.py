"""Policy training rules: preference-based (DPO) and value-based (PPO).

Both trainers consume the same scored-candidate stream; only the update rule
differs, which is exactly the comparison the benchmark isolates.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVariance, LengthMismatch, UnscoredCandidate
from .nn import Adam, relu, uniform_init
from .policy import Candidate, StateFeatures, TrainablePolicy


@dataclass(frozen=True)
class PreferencePair:
    """Winner/loser candidates with the state snapshot they were compared under."""

    features: StateFeatures
    winner: Candidate
    loser: Candidate


@dataclass
class DpoConfig:
    beta: float = 0.1
    lr: float = 1e-5
    ref_period: int = 25  # episodes between reference snapshots
    pairs_per_step: str = "one"  # "one" = best-vs-worst, "all" = every ordered pairing

    def __post_init__(self):
        if self.beta <= 0 or self.ref_period < 1:
            raise ValueError("need beta > 0 and ref_period >= 1")
        if self.pairs_per_step not in ("one", "all"):
            raise ValueError("pairs_per_step must be 'one' or 'all'")


@dataclass
class PpoConfig:
    gae_lambda: float = 0.95
    clip_eps: float = 0.2
    discount: float = 0.99
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 4
    rollout: int = 8  # episodes per update batch
    lr: float = 3e-4

    def __post_init__(self):
        if not (0 < self.gae_lambda <= 1) or self.clip_eps <= 0:
            raise ValueError("need 0 < lambda <= 1 and clip_eps > 0")


REWARD_TIE_EPS = 1e-9


def make_preference_pairs(candidates: list[Candidate], features: StateFeatures) -> PreferencePair | None:
    """Best-vs-worst pair by total reward; None on ties or identical actions.

    Identical winner and loser interventions would produce an exactly zero
    DPO gradient, so they are skipped like reward ties.
    """
    if len(candidates) < 2:
        return None
    for c in candidates:
        if c.breakdown is None:
            raise UnscoredCandidate("all candidates must carry a reward breakdown")
    totals = np.array([c.breakdown.total for c in candidates])
    w, l = int(np.argmax(totals)), int(np.argmin(totals))
    if totals[w] - totals[l] < REWARD_TIE_EPS:
        return None
    if candidates[w].intervention == candidates[l].intervention:
        return None
    return PreferencePair(features, candidates[w], candidates[l])


def all_preference_pairs(candidates: list[Candidate], features: StateFeatures) -> list[PreferencePair]:
    """Every ordered pairing with a strict reward gap (pairs_per_step='all')."""
    pairs = []
    for i, a in enumerate(candidates):
        for b in candidates[i + 1 :]:
            if a.breakdown is None or b.breakdown is None:
                raise UnscoredCandidate("all candidates must carry a reward breakdown")
            gap = a.breakdown.total - b.breakdown.total
            if abs(gap) < REWARD_TIE_EPS or a.intervention == b.intervention:
                continue
            w, l = (a, b) if gap > 0 else (b, a)
            pairs.append(PreferencePair(features, w, l))
    return pairs


def _pair_margin(policy: TrainablePolicy, reference: TrainablePolicy, pair: PreferencePair, beta: float) -> float:
    lp_w = policy.log_prob(pair.features, pair.winner.intervention)
    lp_l = policy.log_prob(pair.features, pair.loser.intervention)
    ref_w = reference.log_prob(pair.features, pair.winner.intervention)
    ref_l = reference.log_prob(pair.features, pair.loser.intervention)
    return beta * ((lp_w - ref_w) - (lp_l - ref_l))


def dpo_loss(
    policy: TrainablePolicy,
    reference: TrainablePolicy,
    pair: PreferencePair,
    beta: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """-log sigmoid(beta * margin) and its gradient w.r.t. the policy only."""
    lp_w, g_w = policy.log_prob_grads(pair.features, pair.winner.intervention)
    lp_l, g_l = policy.log_prob_grads(pair.features, pair.loser.intervention)
    ref_w = reference.log_prob(pair.features, pair.winner.intervention)
    ref_l = reference.log_prob(pair.features, pair.loser.intervention)
    z = (lp_w - ref_w) - (lp_l - ref_l)
    loss = float(np.logaddexp(0.0, -beta * z))
    # d/dz of softplus(-beta z) = -beta * sigmoid(-beta z)
    coeff = -beta / (1.0 + np.exp(beta * z))
    grads = {k: coeff * (g_w[k] - g_l[k]) for k in g_w}
    return loss, grads


def dpo_update(
    policy: TrainablePolicy,
    reference: TrainablePolicy,
    pairs: list[PreferencePair],
    cfg: DpoConfig,
) -> dict:
    """One Adam step on the mean pair loss; returns pre-update metrics."""
    if not pairs:
        return {"dpo_loss": None, "dpo_margin": None, "n_pairs": 0}
    losses, margins = [], []
    acc: dict[str, np.ndarray] | None = None
    for pair in pairs:
        loss, grads = dpo_loss(policy, reference, pair, cfg.beta)
        losses.append(loss)
        margins.append(_pair_margin(policy, reference, pair, cfg.beta))
        if acc is None:
            acc = grads
        else:
            for k in acc:
                acc[k] += grads[k]
    assert acc is not None
    for k in acc:
        acc[k] /= len(pairs)
    policy.adam.step(policy.params, acc, cfg.lr)
    return {
        "dpo_loss": float(np.mean(losses)),
        "dpo_margin": float(np.mean(margins)),
        "n_pairs": len(pairs),
    }


def refresh_reference(
    policy: TrainablePolicy,
    reference: TrainablePolicy,
    episode: int,
    period: int,
) -> TrainablePolicy:
    """Snapshot the policy as the new reference on refresh episodes."""
    if period < 1:
        raise ValueError("period must be >= 1")
    if episode % period == 0:
        return policy.snapshot()
    return reference


def compute_gae(
    rewards,
    values,
    lam: float,
    discount: float,
    bootstrap: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimation; `bootstrap` is the value after the last step."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape:
        raise LengthMismatch("rewards and values must have equal length")
    T = rewards.size
    next_values = np.append(values[1:], bootstrap)
    deltas = rewards + discount * next_values - values
    advantages = np.empty(T)
    running = 0.0
    for t in range(T - 1, -1, -1):
        running = deltas[t] + discount * lam * running
        advantages[t] = running
    return advantages, advantages + values


class ValueCritic:
    """Small MLP from the flat state features to a scalar value estimate."""

    def __init__(self, n_features: int, rng: np.random.Generator, hidden: int = 64):
        self.params = {
            "w1": uniform_init(rng, n_features, (n_features, hidden)),
            "b1": np.zeros(hidden),
            "w2": uniform_init(rng, hidden, (hidden,)),
            "b2": np.zeros(1),
        }
        self.adam = Adam(self.params)

    def value(self, features: StateFeatures) -> float:
        h = relu(features.vector @ self.params["w1"] + self.params["b1"])
        return float(h @ self.params["w2"] + self.params["b2"][0])

    def loss_grads(self, feature_block: np.ndarray, targets: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        z1 = feature_block @ self.params["w1"] + self.params["b1"]
        h = relu(z1)
        v = h @ self.params["w2"] + self.params["b2"][0]
        err = v - targets
        loss = float(np.mean(err**2))
        dv = 2.0 * err / err.size
        dh = np.outer(dv, self.params["w2"])
        dz1 = dh * (z1 > 0)
        grads = {
            "w1": feature_block.T @ dz1,
            "b1": dz1.sum(axis=0),
            "w2": h.T @ dv,
            "b2": np.array([dv.sum()]),
        }
        return loss, grads


@dataclass
class PpoBatch:
    """On-policy transitions: one entry per executed episode step."""

    features: list[StateFeatures] = field(default_factory=list)
    interventions: list = field(default_factory=list)
    old_log_probs: list[float] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    bootstrap: float = 0.0

    def add(self, features: StateFeatures, intervention, log_prob: float, reward: float) -> None:
        self.features.append(features)
        self.interventions.append(intervention)
        self.old_log_probs.append(float(log_prob))
        self.rewards.append(float(reward))

    def __len__(self) -> int:
        return len(self.rewards)


def ppo_surrogate_grads(
    policy: TrainablePolicy,
    features: StateFeatures,
    intervention,
    old_log_prob: float,
    advantage: float,
    clip_eps: float,
) -> tuple[float, dict[str, np.ndarray]]:
    """Clipped-surrogate value and gradient for one transition.

    Returns the surrogate itself (to be maximized); the caller negates.
    """
    lp, glp = policy.log_prob_grads(features, intervention)
    ratio = float(np.exp(lp - old_log_prob))
    clipped_ratio = float(np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps))
    unclipped = ratio * advantage
    clipped = clipped_ratio * advantage
    if unclipped <= clipped:
        surrogate = unclipped
        coeff = ratio * advantage  # d(ratio*A)/dlp = ratio*A
    else:
        surrogate = clipped
        in_band = (1.0 - clip_eps) < ratio < (1.0 + clip_eps)
        coeff = ratio * advantage if in_band else 0.0
    grads = {k: coeff * v for k, v in glp.items()}
    return surrogate, grads


def ppo_update(
    policy: TrainablePolicy,
    critic: ValueCritic,
    batch: PpoBatch,
    cfg: PpoConfig,
) -> dict:
    """Clipped-surrogate PPO with critic MSE and entropy bonus.

    Advantages are computed once from the critic at update start, then
    `cfg.epochs` full passes update actor and critic.
    """
    T = len(batch)
    if T == 0:
        return {"ppo_policy_loss": None, "ppo_value_loss": None, "ppo_entropy": None}
    values = np.array([critic.value(f) for f in batch.features])
    advantages, returns = compute_gae(batch.rewards, values, cfg.gae_lambda, cfg.discount, batch.bootstrap)
    feature_block = np.vstack([f.vector for f in batch.features])

    policy_loss = value_loss = mean_entropy = 0.0
    for _ in range(cfg.epochs):
        acc: dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in policy.params.items()}
        surr_total = ent_total = 0.0
        for t in range(T):
            surr, g_surr = ppo_surrogate_grads(
                policy, batch.features[t], batch.interventions[t], batch.old_log_probs[t], float(advantages[t]), cfg.clip_eps
            )
            ent, g_ent = policy.entropy_grads(batch.features[t])
            surr_total += surr
            ent_total += ent
            for k in acc:
                # minimize -(surrogate + entropy bonus)
                acc[k] -= (g_surr[k] + cfg.entropy_coef * g_ent[k]) / T
        policy.adam.step(policy.params, acc, cfg.lr)

        v_loss, v_grads = critic.loss_grads(feature_block, returns)
        critic.adam.step(critic.params, {k: cfg.value_coef * g for k, g in v_grads.items()}, cfg.lr)

        policy_loss = -(surr_total / T)
        value_loss = v_loss
        mean_entropy = ent_total / T
    return {
        "ppo_policy_loss": float(policy_loss),
        "ppo_value_loss": float(value_loss),
        "ppo_entropy": float(mean_entropy),
    }
