"""Environment adapters: one uniform surface over the SCM oracles, the Duffing
chain, and the archive, plus the learning problem each one induces.

An Environment executes interventions and builds a Problem; a Problem owns the
learner, the frozen validation data, and the per-action loss ledger the policy
observes. Action indices always range over the environment's action names
(graph nodes, oscillators, or regimes).
"""
from __future__ import annotations

import numpy as np

from .archive import Archive, RegimeQuery, generate_synthetic_archive, query
from .dataset import Dataset, Intervention
from .duffing import Clamp, CouplingEstimator, DuffingParams, sample_trajectory
from .errors import ProbeModeUnavailable, UnknownEnvironment, ValueOutOfRange
from .graph import validate_graph
from .learner import OBSERVATIONAL, MechanismLearner, ValidationSet, init_learner
from .scm import OracleScm, Root, build_benchmark_5node, build_benchmark_15node, load_scm_config, sample

VALIDATION_OBS_ROWS = 200
VALIDATION_DO_ROWS = 40
VALIDATION_GRID = (-4.0, -2.0, 0.0, 2.0, 4.0)


def _dataset_tag(ds: Dataset) -> int:
    return OBSERVATIONAL if ds.intervention is None else ds.intervention.node


def _sample_context(learner: MechanismLearner, rng: np.random.Generator, n: int, window: int):
    """Uniform draw of replay rows (with tags) from the recent buffer window."""
    if n <= 0:
        return None
    values, tags = learner.buffer.recent(window)
    if values.shape[0] == 0:
        return None
    idx = rng.integers(0, values.shape[0], size=min(n, values.shape[0]))
    return values[idx], tags[idx]


def _stack_probe(probe_values: np.ndarray | None, probe_tag: int, context):
    """Combine probe rows with context rows; None when both sides are empty."""
    if probe_values is None:
        return context
    tags = np.full(probe_values.shape[0], probe_tag, dtype=int)
    if context is None:
        return probe_values, tags
    ctx_values, ctx_tags = context
    return np.vstack([probe_values, ctx_values]), np.concatenate([tags, ctx_tags])


class ScmProblem:
    """Learning problem over an oracle SCM: the learner's graph is the truth."""

    def __init__(self, scm: OracleScm, learner: MechanismLearner, validation: ValidationSet, train_cfg: dict):
        self.scm = scm
        self.learner = learner
        self.validation = validation
        self.train_cfg = train_cfg

    @property
    def ledger(self) -> np.ndarray:
        return self.learner.ledger

    def ingest(self, ds: Dataset) -> None:
        self.learner.ingest(ds)

    def train_episode(self, rng: np.random.Generator, steps: int | None = None, lr_scale: float = 1.0) -> None:
        kwargs = dict(self.train_cfg)
        if steps is not None:
            kwargs["steps"] = steps
        self.learner.train_episode(rng, lr_scale=lr_scale, **kwargs)

    def train_consolidation(self, rng: np.random.Generator, steps: int, lr_scale: float) -> None:
        """Final-fit pass over the entire buffer rather than the recency window."""
        kwargs = dict(self.train_cfg)
        kwargs["steps"] = steps
        kwargs["window"] = 10**9
        self.learner.train_episode(rng, lr_scale=lr_scale, **kwargs)

    def sample_context(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray] | None:
        return _sample_context(self.learner, rng, n, self.train_cfg.get("window", 2048))

    def train_probe(self, ds: Dataset | None, steps: int, context=None, lr: float = 1e-3, use_sgd: bool = True, clip: float = 5.0) -> None:
        """Full-batch updates on the probe rows anchored by context replay rows.

        `ds=None` trains on the context alone (the lookahead baseline)."""
        stacked = _stack_probe(ds.values if ds is not None else None, _dataset_tag(ds) if ds is not None else 0, context)
        if stacked is None:
            return
        values, tags = stacked
        for _ in range(steps):
            for node in range(self.learner.graph.n_nodes):
                if use_sgd:
                    self.learner.probe_step_rows(node, values, tags, lr, clip)
                else:
                    self.learner._step_rows(node, values, tags, lr)

    def evaluate(self) -> np.ndarray:
        return self.learner.evaluate(self.validation)

    def total(self) -> float:
        return self.learner.total_loss()

    def clone(self) -> "ScmProblem":
        return ScmProblem(self.scm, self.learner.clone(), self.validation, self.train_cfg)

    def self_probe(self, iv: Intervention, m: int, rng: np.random.Generator) -> Dataset:
        """Ancestral sampling from the learner's own model under the candidate."""
        graph = self.learner.graph
        values = np.zeros((m, graph.n_nodes), order="F")
        for i in graph.topo_order:
            if i == iv.node:
                values[:, i] = iv.value
            elif self.learner.is_root_model(i):
                model = self.learner.models[i]
                values[:, i] = rng.normal(model.mu, model.sigma, size=m)
            else:
                X = values[:, list(graph.parents[i])]
                values[:, i] = self.learner.predict(i, X)
        return Dataset(values, graph.node_names, intervention=iv)


class ScmEnvironment:
    def __init__(self, scm: OracleScm, name: str, value_range=(-5.0, 5.0), learner_kwargs=None, train_cfg=None):
        self.scm = scm
        self.name = name
        self.value_range = tuple(value_range)
        self.has_value = True
        self.action_names = scm.node_names
        self.learner_kwargs = learner_kwargs or {}
        self.train_cfg = train_cfg or {}
        self.supports_self_probe = True

    @property
    def n_actions(self) -> int:
        return len(self.action_names)

    @property
    def action_children(self) -> list[list[int]]:
        return [list(c) for c in self.scm.graph.children]

    def execute(self, iv: Intervention, n: int, rng: np.random.Generator) -> Dataset:
        return sample(self.scm, iv, n, rng, self.value_range)

    def probe(self, iv: Intervention, m: int, rng: np.random.Generator) -> Dataset:
        return sample(self.scm, iv, m, rng, self.value_range)

    def make_problem(self, rng: np.random.Generator) -> ScmProblem:
        learner_rng, val_rng = rng.spawn(2)
        learner = init_learner(self.scm.graph, learner_rng, **self.learner_kwargs)
        validation = self._build_validation(val_rng)
        return ScmProblem(self.scm, learner, validation, self.train_cfg)

    def _build_validation(self, rng: np.random.Generator) -> ValidationSet:
        """Frozen held-out set: observational block plus do(parent = u) blocks
        on the coarse value grid for every node that parents a non-root."""
        blocks = [(sample(self.scm, None, VALIDATION_OBS_ROWS, rng).values, OBSERVATIONAL)]
        parents_of_nonroots = sorted({p for i in range(self.scm.graph.n_nodes) for p in self.scm.graph.parents[i]})
        for p in parents_of_nonroots:
            for u in VALIDATION_GRID:
                ds = sample(self.scm, Intervention(p, u), VALIDATION_DO_ROWS, rng, self.value_range)
                blocks.append((ds.values, p))
        return ValidationSet(blocks)

    def extra_metrics(self, problem, history) -> dict:
        out = {}
        if self.name == "scm5" and history.total > 0:
            out["collider_parent_fraction"] = float((history.node_counts[0] + history.node_counts[1]) / history.total)
        return out


def transitions_from_trajectory(ds: Dataset, n_osc: int) -> tuple[np.ndarray, int]:
    """Stack a trajectory into (current positions, next positions) rows.

    Returns the (T-1, 2n) block and the provenance tag in predictor-index
    space (n + clamped oscillator, or OBSERVATIONAL).
    """
    V = ds.values
    block = np.hstack([V[:-1], V[1:]])
    tag = OBSERVATIONAL if ds.intervention is None else n_osc + ds.intervention.node
    return block, tag


class DuffingProblem:
    """Snapshot-prediction problem over the oscillator chain.

    The learner graph doubles each oscillator into a current node (root) and a
    next-snapshot node whose parents are the current neighbors; the ledger
    exposed to the policy covers the next-snapshot predictors only. A separate
    linear readout recovers the coupling constant.
    """

    def __init__(self, params: DuffingParams, learner: MechanismLearner, validation: ValidationSet, train_cfg: dict):
        self.params = params
        self.learner = learner
        self.validation = validation
        self.train_cfg = train_cfg
        self.coupling = CouplingEstimator(params)

    @property
    def ledger(self) -> np.ndarray:
        return self.learner.ledger[self.params.n_osc :]

    def ingest(self, ds: Dataset) -> None:
        block, tag = transitions_from_trajectory(ds, self.params.n_osc)
        iv = None if tag == OBSERVATIONAL else Intervention(tag, ds.intervention.value)
        names = tuple(f"c{i}" for i in range(self.params.n_osc)) + tuple(f"n{i}" for i in range(self.params.n_osc))
        if iv is not None:
            # the "intervened" transition column is the clamped next-position: constant
            self.learner.ingest(Dataset(block, names, intervention=iv))
        else:
            self.learner.ingest(Dataset(block, names))
        self.coupling.ingest(ds)

    def train_episode(self, rng: np.random.Generator, steps: int | None = None, lr_scale: float = 1.0) -> None:
        kwargs = dict(self.train_cfg)
        if steps is not None:
            kwargs["steps"] = steps
        self.learner.train_episode(rng, lr_scale=lr_scale, **kwargs)

    def train_consolidation(self, rng: np.random.Generator, steps: int, lr_scale: float) -> None:
        """Final-fit pass over the entire buffer rather than the recency window."""
        kwargs = dict(self.train_cfg)
        kwargs["steps"] = steps
        kwargs["window"] = 10**9
        self.learner.train_episode(rng, lr_scale=lr_scale, **kwargs)

    def sample_context(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray] | None:
        return _sample_context(self.learner, rng, n, self.train_cfg.get("window", 2048))

    def train_probe(self, ds: Dataset | None, steps: int, context=None, lr: float = 1e-3, use_sgd: bool = True, clip: float = 5.0) -> None:
        if ds is not None:
            block, tag = transitions_from_trajectory(ds, self.params.n_osc)
            stacked = _stack_probe(block, tag, context)
        else:
            stacked = _stack_probe(None, 0, context)
        if stacked is None:
            return
        values, tags = stacked
        for _ in range(steps):
            for node in range(self.learner.graph.n_nodes):
                if use_sgd:
                    self.learner.probe_step_rows(node, values, tags, lr, clip)
                else:
                    self.learner._step_rows(node, values, tags, lr)

    def evaluate(self) -> np.ndarray:
        self.learner.evaluate(self.validation)
        return self.ledger.copy()

    def total(self) -> float:
        return float(np.sum(self.ledger))

    def clone(self) -> "DuffingProblem":
        dup = DuffingProblem.__new__(DuffingProblem)
        dup.params = self.params
        dup.learner = self.learner.clone()
        dup.validation = self.validation
        dup.train_cfg = self.train_cfg
        # clones only score lookahead probes; give them a private scratch
        # estimator so probe rows never leak into the main coupling readout
        dup.coupling = CouplingEstimator(self.params)
        return dup

    def self_probe(self, iv, m, rng):
        raise ProbeModeUnavailable("the oscillator learner has no generative form")

    def coupling_estimate(self) -> float:
        return self.coupling.estimate()


def duffing_learner_graph(n_osc: int):
    """2n-node graph: current positions are roots; next positions depend on
    the current neighbors."""
    edges = []
    for i in range(n_osc):
        for j in (i - 1, i + 1):
            if 0 <= j < n_osc:
                edges.append((j, n_osc + i))
    names = tuple(f"x{i + 1}" for i in range(n_osc)) + tuple(f"x{i + 1}'" for i in range(n_osc))
    return validate_graph(edges, 2 * n_osc, names)


class DuffingEnvironment:
    def __init__(self, params: DuffingParams | None = None, value_range=(-5.0, 5.0), learner_kwargs=None, train_cfg=None):
        self.params = params or DuffingParams()
        self.name = "duffing"
        self.value_range = tuple(value_range)
        self.has_value = True
        self.action_names = tuple(f"x{i + 1}" for i in range(self.params.n_osc))
        self.learner_kwargs = learner_kwargs or {}
        self.train_cfg = train_cfg or {}
        self.supports_self_probe = False

    @property
    def n_actions(self) -> int:
        return self.params.n_osc

    @property
    def action_children(self) -> list[list[int]]:
        n = self.params.n_osc
        return [[j for j in (i - 1, i + 1) if 0 <= j < n] for i in range(n)]

    def _clamp(self, iv: Intervention) -> Clamp:
        lo, hi = self.value_range
        if not (lo <= iv.value <= hi):
            raise ValueOutOfRange(f"clamp value {iv.value} outside [{lo}, {hi}]")
        return Clamp(iv.node, iv.value)

    def execute(self, iv: Intervention, n: int, rng: np.random.Generator) -> Dataset:
        horizon = self.params.burn_in + n * self.params.stride
        return sample_trajectory(self.params, self._clamp(iv), horizon, rng)

    def probe(self, iv: Intervention, m: int, rng: np.random.Generator) -> Dataset:
        # lookahead only ranks candidates; a shorter burn-in keeps probes cheap
        burn = min(self.params.burn_in, 800)
        horizon = burn + m * self.params.stride
        return sample_trajectory(self.params, self._clamp(iv), horizon, rng, burn_in=burn)

    def make_problem(self, rng: np.random.Generator) -> DuffingProblem:
        learner_rng, val_rng = rng.spawn(2)
        graph = duffing_learner_graph(self.params.n_osc)
        learner = init_learner(graph, learner_rng, **self.learner_kwargs)
        problem = DuffingProblem(self.params, learner, self._build_validation(val_rng), self.train_cfg)
        return problem

    def _build_validation(self, rng: np.random.Generator, n_rows: int = 40) -> ValidationSet:
        """Two free trajectories plus one clamp per oscillator per coarse value."""
        n = self.params.n_osc
        horizon = self.params.burn_in + n_rows * self.params.stride
        blocks = []
        for _ in range(2):
            ds = sample_trajectory(self.params, None, horizon, rng)
            blocks.append(transitions_from_trajectory(ds, n))
        for osc in range(n):
            for v in (-2.0, 0.0, 2.0):
                ds = sample_trajectory(self.params, Clamp(osc, v), horizon, rng)
                blocks.append(transitions_from_trajectory(ds, n))
        return ValidationSet(blocks)

    def extra_metrics(self, problem: DuffingProblem, history) -> dict:
        try:
            k_hat = problem.coupling_estimate()
        except Exception:
            return {}
        return {
            "coupling_estimate": k_hat,
            "coupling_error": abs(k_hat - self.params.coupling),
        }


class ArchiveProblem:
    """Single-mechanism regression with a per-regime loss ledger.

    The learner models target = f(features) with one predictor; every regime
    gets its own held-out rows, so the ledger the policy sees is per-regime.
    """

    def __init__(self, archive: Archive, learner: MechanismLearner, regime_validation: list[np.ndarray], train_cfg: dict):
        self.archive = archive
        self.learner = learner
        self.regime_validation = regime_validation
        self.train_cfg = train_cfg
        self._ledger = np.full(archive.n_regimes, np.inf)

    @property
    def ledger(self) -> np.ndarray:
        return self._ledger

    @property
    def target_node(self) -> int:
        return len(self.archive.feature_names)

    def ingest(self, ds: Dataset) -> None:
        self.learner.ingest(ds)

    def train_episode(self, rng: np.random.Generator, steps: int | None = None, lr_scale: float = 1.0) -> None:
        kwargs = dict(self.train_cfg)
        if steps is not None:
            kwargs["steps"] = steps
        self.learner.train_episode(rng, lr_scale=lr_scale, **kwargs)

    def train_consolidation(self, rng: np.random.Generator, steps: int, lr_scale: float) -> None:
        """Final-fit pass over the entire buffer rather than the recency window."""
        kwargs = dict(self.train_cfg)
        kwargs["steps"] = steps
        kwargs["window"] = 10**9
        self.learner.train_episode(rng, lr_scale=lr_scale, **kwargs)

    def sample_context(self, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray] | None:
        return _sample_context(self.learner, rng, n, self.train_cfg.get("window", 2048))

    def train_probe(self, ds: Dataset | None, steps: int, context=None, lr: float = 1e-3, use_sgd: bool = True, clip: float = 5.0) -> None:
        stacked = _stack_probe(ds.values if ds is not None else None, _dataset_tag(ds) if ds is not None else 0, context)
        if stacked is None:
            return
        values, tags = stacked
        for _ in range(steps):
            if use_sgd:
                self.learner.probe_step_rows(self.target_node, values, tags, lr, clip)
            else:
                self.learner._step_rows(self.target_node, values, tags, lr)

    def evaluate(self) -> np.ndarray:
        t = self.target_node
        for r, block in enumerate(self.regime_validation):
            pred = self.learner.predict(t, block[:, :t])
            self._ledger[r] = float(np.mean((pred - block[:, t]) ** 2))
        return self._ledger.copy()

    def total(self) -> float:
        return float(np.sum(self._ledger))

    def clone(self) -> "ArchiveProblem":
        dup = ArchiveProblem.__new__(ArchiveProblem)
        dup.archive = self.archive
        dup.learner = self.learner.clone()
        dup.regime_validation = self.regime_validation
        dup.train_cfg = self.train_cfg
        dup._ledger = self._ledger.copy()
        return dup

    def self_probe(self, iv, m, rng):
        raise ProbeModeUnavailable("regime queries have no learner generative form")


class ArchiveEnvironment:
    def __init__(self, archive: Archive, learner_kwargs=None, train_cfg=None, n_val_rows: int = 100):
        self.archive = archive
        self.name = "archive"
        self.has_value = False
        self.value_range = (-5.0, 5.0)  # unused; kept for a uniform surface
        self.action_names = tuple(r.label for r in archive.regimes)
        self.learner_kwargs = learner_kwargs or {}
        self.train_cfg = train_cfg or {}
        self.n_val_rows = n_val_rows
        self.supports_self_probe = False

    @property
    def n_actions(self) -> int:
        return self.archive.n_regimes

    @property
    def action_children(self) -> list[list[int]]:
        return [[] for _ in range(self.archive.n_regimes)]

    def execute(self, iv: Intervention, n: int, rng: np.random.Generator) -> Dataset:
        return query(self.archive, RegimeQuery(iv.node, n), rng)

    def probe(self, iv: Intervention, m: int, rng: np.random.Generator) -> Dataset:
        return query(self.archive, RegimeQuery(iv.node, m), rng)

    def make_problem(self, rng: np.random.Generator) -> ArchiveProblem:
        learner_rng, val_rng = rng.spawn(2)
        n_feat = len(self.archive.feature_names)
        edges = [(i, n_feat) for i in range(n_feat)]
        graph = validate_graph(edges, n_feat + 1, self.archive.columns)
        learner = init_learner(graph, learner_rng, **self.learner_kwargs)
        validation = [
            query(self.archive, RegimeQuery(r, self.n_val_rows), val_rng).values
            for r in range(self.archive.n_regimes)
        ]
        return ArchiveProblem(self.archive, learner, validation, self.train_cfg)

    def extra_metrics(self, problem, history) -> dict:
        return {}


def make_environment(name: str, rng: np.random.Generator | None = None, **kwargs):
    """Environment factory keyed by the CLI name."""
    if name == "scm5":
        return ScmEnvironment(build_benchmark_5node(), "scm5", **kwargs)
    if name == "scm15":
        return ScmEnvironment(build_benchmark_15node(), "scm15", **kwargs)
    if name == "duffing":
        return DuffingEnvironment(**kwargs)
    if name == "archive":
        archive = kwargs.pop("archive", None)
        if archive is None:
            gen_rng = rng if rng is not None else np.random.default_rng(0)
            archive = generate_synthetic_archive(kwargs.pop("n_rows", 1200), kwargs.pop("regimes", 4), gen_rng)
        return ArchiveEnvironment(archive, **kwargs)
    if name.startswith("scm:"):
        return ScmEnvironment(load_scm_config(name[4:]), name, **kwargs)
    raise UnknownEnvironment(f"no environment named {name!r}")
