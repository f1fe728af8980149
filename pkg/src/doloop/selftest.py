"""Fast built-in property checks runnable from the CLI (`doloop selftest`).

These mirror the heavier pytest suites: gradient correctness against central
finite differences, do-intervention semantics, and the GAE recursion oracle.
"""
from __future__ import annotations

import numpy as np

from .dataset import Intervention
from .learner import NodePredictor, RootModel
from .policy import History, StateFeatures, TrainablePolicy, ValueGrid, featurize
from .scm import build_benchmark_5node, sample
from .trainers import DpoConfig, PreferencePair, compute_gae, dpo_loss

FD_H = 1e-5
REL_TOL = 1e-4


def rel_err(a: float, n: float) -> float:
    scale = max(abs(a), abs(n))
    if scale < 1e-6:
        return 0.0
    return abs(a - n) / scale


def fd_check(loss_fn, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
    """Max relative error between analytic grads and central differences."""
    worst = 0.0
    for key, p in params.items():
        flat = p.ravel()
        g = grads[key].ravel()
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + FD_H
            up = loss_fn()
            flat[i] = keep - FD_H
            down = loss_fn()
            flat[i] = keep
            worst = max(worst, rel_err(g[i], (up - down) / (2 * FD_H)))
    return worst


def check_predictor_gradients(n_cases: int = 5, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        model = NodePredictor(2, rng)
        X = rng.normal(size=(6, 2))
        t = rng.normal(size=6)
        _, grads = model.loss_grads(X, t)
        worst = max(worst, fd_check(lambda: model.loss_grads(X, t)[0], model.params, grads))
    return worst < REL_TOL, f"max rel err {worst:.2e}"


def check_root_gradients(n_cases: int = 5, seed: int = 1) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        model = RootModel()
        model.params["mu"][0] = rng.normal()
        model.params["log_sigma"][0] = rng.normal(scale=0.3)
        x = rng.normal(size=16)
        _, grads = model.loss_grads(x)
        worst = max(worst, fd_check(lambda: model.loss_grads(x)[0], model.params, grads))
    return worst < REL_TOL, f"max rel err {worst:.2e}"


def _random_policy_state(rng, n_nodes=4):
    policy = TrainablePolicy(n_nodes, rng, grid=ValueGrid(-5, 5, 9))
    hist = History(n_nodes)
    for _ in range(3):
        hist.record(int(rng.integers(n_nodes)), int(rng.integers(9)))
    ledger = rng.uniform(0.1, 3.0, size=n_nodes)
    features = featurize(ledger, hist, 3, 10)
    return policy, features


def check_policy_gradients(n_cases: int = 5, seed: int = 2) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        policy, features = _random_policy_state(rng)
        iv = Intervention(int(rng.integers(4)), float(policy.grid.centers[rng.integers(9)]))
        _, grads = policy.log_prob_grads(features, iv)
        worst = max(worst, fd_check(lambda: policy.log_prob(features, iv), policy.params, grads))
    return worst < REL_TOL, f"max rel err {worst:.2e}"


def check_dpo_gradients(n_cases: int = 3, seed: int = 3) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_cases):
        policy, features = _random_policy_state(rng)
        reference, _ = _random_policy_state(rng)
        from .policy import Candidate

        w = Candidate(Intervention(0, float(policy.grid.centers[1])), 0.0)
        l = Candidate(Intervention(1, float(policy.grid.centers[5])), 0.0)
        pair = PreferencePair(features, w, l)
        beta = DpoConfig().beta
        _, grads = dpo_loss(policy, reference, pair, beta)
        worst = max(worst, fd_check(lambda: dpo_loss(policy, reference, pair, beta)[0], policy.params, grads))
    return worst < REL_TOL, f"max rel err {worst:.2e}"


def check_do_semantics(seed: int = 4) -> tuple[bool, str]:
    scm = build_benchmark_5node(noise_std=0.0)
    rng = np.random.default_rng(seed)
    ds = sample(scm, Intervention(0, 1.0), 64, rng)
    x2 = ds.column(1)
    x3 = ds.column(2)
    ok = bool(np.all(ds.column(0) == 1.0)) and np.allclose(x2, 3.0) and np.allclose(x3, 0.5 - 3.0 + np.sin(3.0))
    return ok, "do(X1=1) closed form"


def check_gae_oracle(seed: int = 5) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    lam, gamma = 0.95, 0.99
    rewards = rng.normal(size=10)
    values = rng.normal(size=10)
    adv, _ = compute_gae(rewards, values, lam, gamma)
    nxt = np.append(values[1:], 0.0)
    deltas = rewards + gamma * nxt - values
    brute = np.array([sum((gamma * lam) ** k * deltas[t + k] for k in range(10 - t)) for t in range(10)])
    worst = float(np.max(np.abs(adv - brute)))
    return worst < 1e-12, f"max abs err {worst:.2e}"


ALL_CHECKS = (
    ("predictor-gradients", check_predictor_gradients),
    ("root-gradients", check_root_gradients),
    ("policy-gradients", check_policy_gradients),
    ("dpo-gradients", check_dpo_gradients),
    ("do-semantics", check_do_semantics),
    ("gae-oracle", check_gae_oracle),
)


def run_selftest(verbose: bool = True) -> bool:
    all_ok = True
    for name, fn in ALL_CHECKS:
        ok, detail = fn()
        all_ok &= ok
        if verbose:
            print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    return all_ok
