"""Intervention-proposal policies.

The trainable policy scores nodes with a weight-shared per-node encoder (so it
is equivariant under node relabeling and works for any graph size) and picks
intervention values from a fixed 41-bin grid, which gives exact
log-probabilities for preference and policy-gradient training. Random,
round-robin, and max-variance baselines share the Candidate currency.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .dataset import Intervention
from .errors import LedgerUninitialized, ValueNotOnGrid
from .learner import MechanismLearner
from .nn import Adam, load_tensor_map, log_softmax, relu, save_tensor_map, softmax, uniform_init

if TYPE_CHECKING:
    from .orchestrator import RewardBreakdown

N_VALUE_BINS = 41
POLICY_HIDDEN = 64
# per-node encoder inputs: normalized loss, count fraction, last-intervened
# flag, progress, mean normalized loss over the node's children, and the
# node's child count scaled by the graph's max degree
PER_NODE_FEATURES = 6


class ValueGrid:
    """Uniform bin centers over the intervention range (default 41 on [-5, 5])."""

    def __init__(self, lo: float = -5.0, hi: float = 5.0, n_bins: int = N_VALUE_BINS):
        if not hi > lo:
            raise ValueError("need hi > lo")
        self.lo, self.hi, self.n_bins = float(lo), float(hi), int(n_bins)
        self.centers = np.linspace(lo, hi, n_bins)
        self.step = self.centers[1] - self.centers[0]

    def bin_index(self, value: float) -> int:
        """Exact bin of an on-grid value; off-grid (beyond 1e-9 snap) is an error."""
        idx = int(round((value - self.lo) / self.step))
        if not (0 <= idx < self.n_bins) or abs(self.centers[idx] - value) > 1e-9:
            raise ValueNotOnGrid(f"{value} is not a bin center")
        return idx

    def nearest_bin(self, value: float) -> int:
        """Closest bin for arbitrary values (used for history bookkeeping)."""
        return int(np.clip(round((value - self.lo) / self.step), 0, self.n_bins - 1))


@dataclass
class History:
    """Executed-intervention bookkeeping: per-node counts, (node, bin) counts, last node."""

    n_nodes: int
    node_counts: np.ndarray = field(default=None)  # type: ignore[assignment]
    bin_counts: dict = field(default_factory=dict)
    last_node: int = -1
    total: int = 0

    def __post_init__(self):
        if self.node_counts is None:
            self.node_counts = np.zeros(self.n_nodes, dtype=int)

    def record(self, node: int, bin_idx: int) -> None:
        self.node_counts[node] += 1
        self.bin_counts[(node, bin_idx)] = self.bin_counts.get((node, bin_idx), 0) + 1
        self.last_node = node
        self.total += 1


@dataclass(frozen=True)
class StateFeatures:
    """Flat policy input of length 3n+1; per-node blocks are recoverable."""

    vector: np.ndarray
    n_nodes: int

    def per_node(self) -> np.ndarray:
        """(n, 4) matrix of [normalized loss, count fraction, last flag, progress]."""
        n = self.n_nodes
        v = self.vector
        progress = np.full(n, v[3 * n])
        return np.column_stack([v[:n], v[n : 2 * n], v[2 * n : 3 * n], progress])


def featurize(ledger: np.ndarray, history: History, t: int, t_max: int) -> StateFeatures:
    """Squash the ledger and history into the fixed policy input vector."""
    ledger = np.asarray(ledger, dtype=np.float64)
    if ledger.size == 0 or not np.all(np.isfinite(ledger)):
        raise LedgerUninitialized("ledger must be evaluated before featurizing")
    n = ledger.size
    losses = ledger / (1.0 + ledger)
    counts = history.node_counts / max(1, history.total)
    last = np.zeros(n)
    if 0 <= history.last_node < n:
        last[history.last_node] = 1.0
    progress = min(1.0, t / max(1, t_max))
    return StateFeatures(np.concatenate([losses, counts, last, [progress]]), n)


@dataclass
class Candidate:
    """A proposed intervention with its proposal log-probability and, once
    scored, its reward breakdown."""

    intervention: Intervention
    log_prob: float
    breakdown: "RewardBreakdown | None" = None


class TrainablePolicy:
    """Two softmax heads (node, value bin) over a shared per-node encoder.

    Node logits come from a weight-shared MLP applied to each node's feature
    block, so the policy is equivariant under consistent node relabeling and
    scales to any graph size. The known graph enters only through per-node
    aggregates of the shared features (children losses and degree), which is
    what lets the policy express parent-of-a-struggling-mechanism strategies.
    Bin logits come from the mean-pooled hidden state; `value_head` is
    switched off for environments whose actions carry no value (archive
    regime selection).
    """

    def __init__(
        self,
        n_nodes: int,
        rng: np.random.Generator,
        grid: ValueGrid | None = None,
        value_head: bool = True,
        action_children: list[list[int]] | None = None,
    ):
        self.n_nodes = n_nodes
        self.value_head = value_head
        self.grid = grid if grid is not None else ValueGrid()
        self.action_children = [list(c) for c in action_children] if action_children else [[] for _ in range(n_nodes)]
        if len(self.action_children) != n_nodes:
            raise ValueError("action_children length must match n_nodes")
        self._max_degree = max(1, max((len(c) for c in self.action_children), default=0))
        n_bins = self.grid.n_bins
        self.params = {
            "enc_w": uniform_init(rng, PER_NODE_FEATURES, (PER_NODE_FEATURES, POLICY_HIDDEN)),
            "enc_b": np.zeros(POLICY_HIDDEN),
            "node_w": uniform_init(rng, POLICY_HIDDEN, (POLICY_HIDDEN,)),
            "node_b": np.zeros(1),
            "bin_w": uniform_init(rng, POLICY_HIDDEN, (POLICY_HIDDEN, n_bins)),
            "bin_b": np.zeros(n_bins),
        }
        self.adam = Adam(self.params)

    # -- forward ----------------------------------------------------------

    def _per_node_inputs(self, features: StateFeatures) -> np.ndarray:
        base = features.per_node()
        losses = base[:, 0]
        child_loss = np.zeros(self.n_nodes)
        child_frac = np.zeros(self.n_nodes)
        for i, children in enumerate(self.action_children):
            if children:
                child_loss[i] = losses[children].mean()
                child_frac[i] = len(children) / self._max_degree
        return np.column_stack([base, child_loss, child_frac])

    def _encode(self, features: StateFeatures):
        U = self._per_node_inputs(features)
        Z = U @ self.params["enc_w"] + self.params["enc_b"]
        H = relu(Z)
        node_logits = H @ self.params["node_w"] + self.params["node_b"][0]
        pooled = H.mean(axis=0)
        bin_logits = pooled @ self.params["bin_w"] + self.params["bin_b"]
        return {"U": U, "Z": Z, "H": H, "pooled": pooled, "node_logits": node_logits, "bin_logits": bin_logits}

    def logits(self, features: StateFeatures) -> tuple[np.ndarray, np.ndarray]:
        cache = self._encode(features)
        return cache["node_logits"], cache["bin_logits"]

    def propose(
        self,
        features: StateFeatures,
        K: int,
        temperature: float,
        rng: np.random.Generator,
    ) -> list[Candidate]:
        """K independent draws at the sampling temperature.

        Stored log-probabilities are always at temperature 1 so downstream
        preference ratios compare the untempered policies.
        """
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        node_logits, bin_logits = self.logits(features)
        p_node = softmax(node_logits / temperature)
        lp_node = log_softmax(node_logits)
        if self.value_head:
            p_bin = softmax(bin_logits / temperature)
            lp_bin = log_softmax(bin_logits)
        out = []
        for _ in range(K):
            node = int(rng.choice(self.n_nodes, p=p_node))
            if self.value_head:
                b = int(rng.choice(self.grid.n_bins, p=p_bin))
                out.append(Candidate(Intervention(node, float(self.grid.centers[b])), float(lp_node[node] + lp_bin[b])))
            else:
                out.append(Candidate(Intervention(node, 0.0), float(lp_node[node])))
        return out

    def log_prob(self, features: StateFeatures, intervention: Intervention) -> float:
        node_logits, bin_logits = self.logits(features)
        lp = float(log_softmax(node_logits)[intervention.node])
        if self.value_head:
            lp += float(log_softmax(bin_logits)[self.grid.bin_index(intervention.value)])
        return lp

    # -- gradients --------------------------------------------------------

    def _backward(self, cache, d_node_logits: np.ndarray, d_bin_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Push gradients w.r.t. both logit vectors back to the parameters."""
        H, U, Z = cache["H"], cache["U"], cache["Z"]
        n = self.n_nodes
        grads = {
            "node_w": H.T @ d_node_logits,
            "node_b": np.array([d_node_logits.sum()]),
            "bin_w": np.outer(cache["pooled"], d_bin_logits),
            "bin_b": d_bin_logits.copy(),
        }
        dH = np.outer(d_node_logits, self.params["node_w"])
        dH += (self.params["bin_w"] @ d_bin_logits) / n
        dZ = dH * (Z > 0)
        grads["enc_w"] = U.T @ dZ
        grads["enc_b"] = dZ.sum(axis=0)
        return grads

    def log_prob_grads(self, features: StateFeatures, intervention: Intervention) -> tuple[float, dict[str, np.ndarray]]:
        """log pi(intervention | features) and its gradient w.r.t. the parameters."""
        cache = self._encode(features)
        p = softmax(cache["node_logits"])
        d_node = -p
        d_node[intervention.node] += 1.0
        lp = float(log_softmax(cache["node_logits"])[intervention.node])
        d_bin = np.zeros(self.grid.n_bins)
        if self.value_head:
            b = self.grid.bin_index(intervention.value)
            q = softmax(cache["bin_logits"])
            d_bin = -q
            d_bin[b] += 1.0
            lp += float(log_softmax(cache["bin_logits"])[b])
        return lp, self._backward(cache, d_node, d_bin)

    def entropy_grads(self, features: StateFeatures) -> tuple[float, dict[str, np.ndarray]]:
        """Summed entropy of the node head (and value head when present)."""
        cache = self._encode(features)
        p = softmax(cache["node_logits"])
        logp = log_softmax(cache["node_logits"])
        h_node = float(-np.sum(p * logp))
        d_node = -p * (logp + h_node)
        total = h_node
        d_bin = np.zeros(self.grid.n_bins)
        if self.value_head:
            q = softmax(cache["bin_logits"])
            logq = log_softmax(cache["bin_logits"])
            h_bin = float(-np.sum(q * logq))
            d_bin = -q * (logq + h_bin)
            total += h_bin
        return total, self._backward(cache, d_node, d_bin)

    # -- lifecycle --------------------------------------------------------

    def snapshot(self) -> "TrainablePolicy":
        """Frozen deep copy (reference policy / evaluation)."""
        dup = TrainablePolicy.__new__(TrainablePolicy)
        dup.n_nodes = self.n_nodes
        dup.value_head = self.value_head
        dup.grid = self.grid
        dup.action_children = [list(c) for c in self.action_children]
        dup._max_degree = self._max_degree
        dup.params = {k: v.copy() for k, v in self.params.items()}
        dup.adam = self.adam.copy()
        return dup

    def save(self, path) -> None:
        meta = {
            "n_nodes": self.n_nodes,
            "value_head": self.value_head,
            "grid": [self.grid.lo, self.grid.hi, self.grid.n_bins],
        }
        save_tensor_map(self.params, path, meta)

    def load(self, path) -> None:
        tensors, meta = load_tensor_map(path)
        if meta.get("n_nodes") != self.n_nodes:
            raise ValueNotOnGrid("checkpoint head size does not match environment")
        for k in self.params:
            self.params[k][...] = tensors[k]


# -- baselines ------------------------------------------------------------


def propose_random(
    n_nodes: int,
    value_range: tuple[float, float],
    K: int,
    rng: np.random.Generator,
    with_value: bool = True,
) -> list[Candidate]:
    """Uniform node, uniform continuous value. The stored log_prob uses the
    density convention -(ln n + ln width), not a grid pmf."""
    lo, hi = value_range
    lp = -(np.log(n_nodes) + (np.log(hi - lo) if with_value else 0.0))
    out = []
    for _ in range(K):
        node = int(rng.integers(0, n_nodes))
        value = float(rng.uniform(lo, hi)) if with_value else 0.0
        out.append(Candidate(Intervention(node, value), float(lp)))
    return out


ROUND_ROBIN_VALUES = (-4.0, -2.0, 0.0, 2.0, 4.0)


def propose_round_robin(t: int, n_nodes: int, value_schedule: tuple[float, ...] = ROUND_ROBIN_VALUES) -> Candidate:
    """Deterministic cycle: node t mod n, value advancing once per full node sweep."""
    node = t % n_nodes
    value = value_schedule[(t // n_nodes) % len(value_schedule)]
    return Candidate(Intervention(node, float(value)), 0.0)


def propose_max_variance(
    learner: MechanismLearner,
    grid_values: np.ndarray,
    T: int,
    rng: np.random.Generator,
    parent_refs: np.ndarray | None = None,
    action_nodes=None,
) -> Candidate:
    """Grid argmax of MC-dropout variance, summed over the candidate node's
    children predictions; ties break to the lowest node then lowest value.

    `parent_refs` supplies the values held fixed for a child's other parents
    (defaults to zeros); `action_nodes` restricts the candidate nodes when the
    learner graph is wider than the action space.
    """
    graph = learner.graph
    if parent_refs is None:
        parent_refs = np.zeros(graph.n_nodes)
    if action_nodes is None:
        action_nodes = range(graph.n_nodes)
    action_nodes = list(action_nodes)
    best = (action_nodes[0], float(grid_values[0]))
    best_score = -np.inf
    for node in action_nodes:
        children = [c for c in graph.children[node] if not learner.is_root_model(c)]
        for v in grid_values:
            score = 0.0
            for child in children:
                pvec = np.array([v if p == node else parent_refs[p] for p in graph.parents[child]])
                score += learner.mc_dropout_variance(child, pvec, T, rng)
            if score > best_score + 1e-15:
                best_score = score
                best = (node, float(v))
    return Candidate(Intervention(*best), 0.0)
