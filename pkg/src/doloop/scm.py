"""Ground-truth structural causal models: closed-form mechanisms and do-sampling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Dataset, Intervention
from .errors import ConfigError, ValueOutOfRange
from .graph import CausalGraph, validate_graph

# Term algebra for Analytic mechanisms: each term is (op, parent_slot, coeff)
# with op one of "lin", "sin", "sq". The slot indexes into the node's sorted
# parent list, not the global node list.
ANALYTIC_OPS = ("lin", "sin", "sq")


@dataclass(frozen=True)
class Root:
    """Exogenous node: value ~ Normal(mean, std^2)."""

    mean: float
    std: float

    def __post_init__(self):
        if self.std <= 0:
            raise ConfigError("root std must be positive")


@dataclass(frozen=True)
class Linear:
    """value = weights . parents + intercept + Normal(0, noise_std^2)."""

    weights: tuple[float, ...]
    intercept: float
    noise_std: float

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")


@dataclass(frozen=True)
class Analytic:
    """value = intercept + sum of closed-form terms + Normal(0, noise_std^2)."""

    terms: tuple[tuple[str, int, float], ...]
    intercept: float
    noise_std: float

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigError("noise_std must be nonnegative")
        for op, _, _ in self.terms:
            if op not in ANALYTIC_OPS:
                raise ConfigError(f"unknown analytic op {op!r}")


Mechanism = Root | Linear | Analytic


def mechanism_value(mech: Mechanism, parent_values: np.ndarray) -> np.ndarray:
    """Noise-free mechanism output for a (n_parents, n_samples) parent block."""
    parent_values = np.atleast_2d(np.asarray(parent_values, dtype=np.float64))
    if isinstance(mech, Root):
        raise ConfigError("roots have no parent mechanism")
    if isinstance(mech, Linear):
        if len(mech.weights) != parent_values.shape[0]:
            raise ConfigError("weight count does not match parent count")
        return np.asarray(mech.weights) @ parent_values + mech.intercept
    out = np.full(parent_values.shape[1], mech.intercept, dtype=np.float64)
    for op, slot, coeff in mech.terms:
        p = parent_values[slot]
        if op == "lin":
            out += coeff * p
        elif op == "sin":
            out += coeff * np.sin(p)
        else:
            out += coeff * p**2
    return out


def mechanism_arity(mech: Mechanism) -> int | None:
    """Declared parent count, or None when the form does not pin it (Analytic)."""
    if isinstance(mech, Root):
        return 0
    if isinstance(mech, Linear):
        return len(mech.weights)
    return None


class OracleScm:
    """The ground-truth environment: a DAG plus one closed-form mechanism per node."""

    def __init__(self, graph: CausalGraph, mechanisms: list[Mechanism] | tuple[Mechanism, ...]):
        if len(mechanisms) != graph.n_nodes:
            raise ConfigError("need one mechanism per node")
        for i, mech in enumerate(mechanisms):
            arity = mechanism_arity(mech)
            n_parents = len(graph.parents[i])
            if isinstance(mech, Root) and n_parents != 0:
                raise ConfigError(f"node {i} has parents but a Root mechanism")
            if not isinstance(mech, Root) and n_parents == 0:
                raise ConfigError(f"node {i} is a root but has a parent mechanism")
            if arity is not None and arity != n_parents and not isinstance(mech, Root):
                raise ConfigError(f"node {i}: mechanism arity {arity} != parent count {n_parents}")
            if isinstance(mech, Analytic):
                for _, slot, _ in mech.terms:
                    if not (0 <= slot < n_parents):
                        raise ConfigError(f"node {i}: term references parent slot {slot}")
        self.graph = graph
        self.mechanisms = tuple(mechanisms)

    @property
    def node_names(self) -> tuple[str, ...]:
        return self.graph.node_names


def sample(
    scm: OracleScm,
    intervention: Intervention | None,
    n: int,
    rng: np.random.Generator,
    value_range: tuple[float, float] = (-5.0, 5.0),
) -> Dataset:
    """Draw n joint samples, optionally under do(node = value).

    Nodes are evaluated in topological order; the intervened node is pinned to
    the constant (no noise), which severs its incoming edges by construction.
    Each node consumes its own child stream of `rng`, so matched seeds yield
    matched exogenous draws across different interventions (common random
    numbers for candidate comparisons).
    """
    if n < 1:
        raise ValueOutOfRange("need at least one sample")
    if intervention is not None:
        lo, hi = value_range
        if not (lo <= intervention.value <= hi):
            raise ValueOutOfRange(f"intervention value {intervention.value} outside [{lo}, {hi}]")
        if not (0 <= intervention.node < scm.graph.n_nodes):
            raise ValueOutOfRange(f"intervention node {intervention.node} outside graph")

    # per-node streams derived from drawn seeds: matched parent states give
    # matched exogenous draws regardless of where the generator came from
    node_rngs = [np.random.default_rng(s) for s in rng.integers(2**63, size=scm.graph.n_nodes)]
    values = np.zeros((n, scm.graph.n_nodes), order="F")
    for i in scm.graph.topo_order:
        if intervention is not None and i == intervention.node:
            values[:, i] = intervention.value
            continue
        mech = scm.mechanisms[i]
        if isinstance(mech, Root):
            values[:, i] = node_rngs[i].normal(mech.mean, mech.std, size=n)
        else:
            parent_block = values[:, list(scm.graph.parents[i])].T
            col = mechanism_value(mech, parent_block)
            if mech.noise_std > 0:
                col = col + node_rngs[i].normal(0.0, mech.noise_std, size=n)
            values[:, i] = col
    return Dataset(values, scm.node_names, intervention=intervention)


def build_benchmark_5node(noise_std: float = 0.01) -> OracleScm:
    """Two roots, a linear node, a trig collider, and a disconnected quadratic chain."""
    graph = validate_graph(
        edges=[(0, 1), (0, 2), (1, 2), (3, 4)],
        n_nodes=5,
        node_names=("X1", "X2", "X3", "X4", "X5"),
    )
    mechanisms = [
        Root(mean=0.0, std=1.0),
        Linear(weights=(2.0,), intercept=1.0, noise_std=noise_std),
        # X3 = 0.5*X1 - X2 + sin(X2); parents sorted as (X1, X2) -> slots (0, 1)
        Analytic(terms=(("lin", 0, 0.5), ("lin", 1, -1.0), ("sin", 1, 1.0)), intercept=0.0, noise_std=noise_std),
        Root(mean=2.0, std=1.0),
        Analytic(terms=(("sq", 0, 0.2),), intercept=0.0, noise_std=noise_std),
    ]
    return OracleScm(graph, mechanisms)


# Fifteen-node benchmark: 4 roots feeding three layers of two-parent colliders.
# Weights were drawn once from a seeded generator on [-2, 2] excluding
# (-0.3, 0.3) and are frozen here for reproducibility.
_COLLIDER_WEIGHTS = (
    (-0.7572, -1.5249, -1.7932),
    (-1.9866, -1.5344, 1.2772),
    (-0.814, 1.8269, -0.786),
    (0.374, -1.5359, 1.8818),
    (1.9402, 1.4718, 0.6528),
    (-0.3543, 0.989, 0.4508),
    (-1.7939, 1.7384, -1.8407),
    (-0.7613, -1.5013, 0.7841),
    (-1.7277, 0.9478, 1.0335),
    (-0.3333, -1.9542, 1.6644),
    (0.3219, -1.6393, -1.9084),
)

_15NODE_NAMES = ("R1", "R2", "R3", "R4", "A", "C1", "B", "C2", "D", "C3", "E", "F", "C4", "C5", "C6")

_15NODE_EDGES_BY_NAME = (
    ("R1", "A"), ("R2", "A"),
    ("R2", "C1"), ("R3", "C1"),
    ("R3", "B"), ("R4", "B"),
    ("R1", "C2"), ("A", "C2"),
    ("A", "D"), ("C1", "D"),
    ("C1", "C3"), ("B", "C3"),
    ("B", "E"), ("R4", "E"),
    ("C2", "F"), ("D", "F"),
    ("D", "C4"), ("C3", "C4"),
    ("C3", "C5"), ("E", "C5"),
    ("C4", "C6"), ("C5", "C6"),
)


def build_benchmark_15node(noise_std: float = 0.01) -> OracleScm:
    """Collider-dense benchmark: 4 standard-normal roots, 11 two-parent colliders.

    Collider mechanisms cycle through three functional forms (affine, linear
    plus sine, linear plus square) with the frozen weight table above.
    """
    names = _15NODE_NAMES
    idx = {name: i for i, name in enumerate(names)}
    edges = [(idx[p], idx[c]) for p, c in _15NODE_EDGES_BY_NAME]
    graph = validate_graph(edges, n_nodes=len(names), node_names=names)

    mechanisms: list[Mechanism] = []
    collider_rank = 0
    for i in range(graph.n_nodes):
        if i in graph.roots:
            mechanisms.append(Root(mean=0.0, std=1.0))
            continue
        w1, w2, b = _COLLIDER_WEIGHTS[collider_rank]
        form = collider_rank % 3
        if form == 0:
            mechanisms.append(Linear(weights=(w1, w2), intercept=b, noise_std=noise_std))
        elif form == 1:
            mechanisms.append(Analytic(terms=(("lin", 0, w1), ("sin", 1, 1.0)), intercept=0.0, noise_std=noise_std))
        else:
            mechanisms.append(Analytic(terms=(("lin", 0, w1), ("sq", 1, 0.2)), intercept=0.0, noise_std=noise_std))
        collider_rank += 1
    return OracleScm(graph, mechanisms)


def _mechanism_to_dict(mech: Mechanism) -> dict:
    if isinstance(mech, Root):
        return {"kind": "root", "mean": mech.mean, "std": mech.std}
    if isinstance(mech, Linear):
        return {"kind": "linear", "weights": list(mech.weights), "intercept": mech.intercept, "noise_std": mech.noise_std}
    return {
        "kind": "analytic",
        "terms": [[op, slot, coeff] for op, slot, coeff in mech.terms],
        "intercept": mech.intercept,
        "noise_std": mech.noise_std,
    }


def _mechanism_from_dict(d: dict) -> Mechanism:
    kind = d.get("kind")
    if kind == "root":
        return Root(mean=float(d["mean"]), std=float(d["std"]))
    if kind == "linear":
        return Linear(weights=tuple(float(w) for w in d["weights"]), intercept=float(d["intercept"]), noise_std=float(d["noise_std"]))
    if kind == "analytic":
        return Analytic(
            terms=tuple((str(op), int(slot), float(coeff)) for op, slot, coeff in d["terms"]),
            intercept=float(d["intercept"]),
            noise_std=float(d["noise_std"]),
        )
    raise ConfigError(f"unknown mechanism kind {kind!r}")


def save_scm_config(scm: OracleScm, path: str | Path) -> None:
    """Write the declarative SCM description (nodes, edges, mechanisms) as JSON."""
    doc = {
        "nodes": list(scm.node_names),
        "edges": sorted([p, c] for p, c in scm.graph.edges),
        "mechanisms": [_mechanism_to_dict(m) for m in scm.mechanisms],
    }
    Path(path).write_text(json.dumps(doc, indent=2))


def load_scm_config(path: str | Path) -> OracleScm:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    for key in ("nodes", "edges", "mechanisms"):
        if key not in doc:
            raise ConfigError(f"{path}: missing {key!r}")
    names = tuple(str(n) for n in doc["nodes"])
    graph = validate_graph([(int(p), int(c)) for p, c in doc["edges"]], len(names), names)
    mechanisms = [_mechanism_from_dict(d) for d in doc["mechanisms"]]
    return OracleScm(graph, mechanisms)
