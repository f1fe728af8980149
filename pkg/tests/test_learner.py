import math

import numpy as np
import pytest

from conftest import REL_TOL, finite_diff_check

from doloop.dataset import Dataset, Intervention
from doloop.errors import EmptyBatch, RootHasNoPredictor
from doloop.graph import validate_graph
from doloop.learner import (
    HIDDEN_WIDTH,
    MechanismLearner,
    NodePredictor,
    RootModel,
    ValidationSet,
    init_learner,
)
from doloop.nn import ADAM_EPS
from doloop.scm import build_benchmark_5node, sample


def rng(seed=0):
    return np.random.default_rng(seed)


def make_learner(seed=0, **kw):
    return init_learner(build_benchmark_5node().graph, rng(seed), **kw)


def obs_dataset(n=64, seed=1, noise=0.01):
    return sample(build_benchmark_5node(noise_std=noise), None, n, rng(seed))


class TestInit:
    def test_same_seed_identical_parameters(self):
        a, b = make_learner(7), make_learner(7)
        for ma, mb in zip(a.models, b.models):
            for k in ma.params:
                assert np.array_equal(ma.params[k], mb.params[k])

    def test_hidden_shape_for_two_parent_node(self):
        learner = make_learner()
        assert learner.models[2].params["w1"].shape == (2, HIDDEN_WIDTH)

    def test_root_init_standard_normal(self):
        learner = make_learner()
        root = learner.models[0]
        assert root.mu == 0.0
        assert root.sigma == 1.0

    def test_ledger_starts_at_sentinel(self):
        learner = make_learner()
        assert np.all(np.isinf(learner.ledger))


class TestPredict:
    def test_zero_weights_output_bias(self):
        learner = make_learner()
        model = learner.models[1]
        for k in ("w1", "w2", "w3"):
            model.params[k][...] = 0.0
        model.params["b3"][0] = 1.25
        assert learner.predict(1, np.array([3.0])) == pytest.approx(1.25)

    def test_deterministic_without_dropout(self):
        learner = make_learner()
        a = learner.predict(2, np.array([0.5, 1.0]))
        b = learner.predict(2, np.array([0.5, 1.0]))
        assert a == b

    def test_root_has_no_predictor(self):
        learner = make_learner()
        with pytest.raises(RootHasNoPredictor):
            learner.predict(0, np.array([]))

    def test_linear_mechanism_recovery(self):
        # 500 zero-noise rows of X2 = 2*X1 + 1 over a grid; predictions at
        # -4, 0, 4 land within 0.1 of the truth
        model = NodePredictor(1, rng(3))
        X = np.linspace(-5, 5, 500).reshape(-1, 1)
        y = 2.0 * X[:, 0] + 1.0
        for _ in range(3000):
            _, grads = model.loss_grads(X, y)
            model.adam.step(model.params, grads, 2e-3)
        for x, target in [(-4.0, -7.0), (0.0, 1.0), (4.0, 9.0)]:
            assert model.forward(np.array([[x]]))[0] == pytest.approx(target, abs=0.1)


class TestTrainStep:
    def test_first_adam_step_is_lr_sized(self):
        learner = make_learner()
        model = learner.models[1]
        before = {k: v.copy() for k, v in model.params.items()}
        ds = obs_dataset()
        learner.train_step(1, ds, lr=2e-3)
        for k in before:
            delta = np.abs(model.params[k] - before[k])
            grads_nonzero = delta > 0
            # first-step Adam moves each touched coordinate by ~lr exactly
            assert np.all(delta[grads_nonzero] <= 2e-3 * (1.0 + 1e-6) + ADAM_EPS)

    def test_zero_gradient_leaves_parameters(self):
        model = NodePredictor(1, rng(1))
        X = np.array([[1.0], [2.0]])
        y = model.forward(X)  # perfect fit by construction
        before = {k: v.copy() for k, v in model.params.items()}
        loss, grads = model.loss_grads(X, y)
        assert loss == 0.0
        model.adam.step(model.params, grads, 2e-3)
        for k in before:
            assert np.array_equal(model.params[k], before[k])

    def test_root_mle_convergence(self):
        learner = make_learner()
        draws = rng(5).normal(2.0, 1.0, size=1000)
        block = np.zeros((1000, 5))
        block[:, 0] = draws
        ds = Dataset(block, build_benchmark_5node().node_names)
        for _ in range(500):
            learner.train_step(0, ds)
        assert learner.models[0].mu == pytest.approx(2.0, abs=0.1)
        assert learner.models[0].sigma == pytest.approx(draws.std(), abs=0.15)

    def test_empty_batch_raises(self):
        learner = make_learner()
        with pytest.raises(Exception):
            Dataset(np.empty((0, 5)), build_benchmark_5node().node_names)
        with pytest.raises(EmptyBatch):
            learner.train_step(0, _EmptyBatchStub())

    def test_200_steps_reduce_loss_on_fixed_noiseless_data(self):
        # net reduction over the block of steps (Adam is not per-step monotone)
        model = NodePredictor(2, rng(9))
        X = rng(10).normal(size=(64, 2))
        y = 0.5 * X[:, 0] - X[:, 1]
        first, _ = model.loss_grads(X, y)
        for _ in range(200):
            loss, grads = model.loss_grads(X, y)
            if all(np.all(g == 0) for g in grads.values()):
                return
            model.adam.step(model.params, grads, 2e-3)
        final, _ = model.loss_grads(X, y)
        assert final < first


class _EmptyBatchStub:
    n_rows = 0
    intervention = None
    values = np.empty((0, 5))


class TestRootRule:
    def test_interventional_rows_filtered_exactly(self):
        scm = build_benchmark_5node()
        mixed_rows = []
        tags = []
        for seed, iv in [(1, None), (2, Intervention(0, 3.0)), (3, None)]:
            ds = sample(scm, iv, 40, rng(seed))
            mixed_rows.append(ds.values)
            tags.append(np.full(40, -1 if iv is None else iv.node))
        values = np.vstack(mixed_rows)
        tagv = np.concatenate(tags)

        a = make_learner(4)
        b = make_learner(4)
        a._step_rows(0, values, tagv)
        keep = tagv != 0
        b._step_rows(0, values[keep], tagv[keep])
        for k in a.models[0].params:
            assert np.array_equal(a.models[0].params[k], b.models[0].params[k])

    def test_filter_disabled_for_ablated_roots(self):
        learner = make_learner(4, roots_as_predictors=True)
        ds = sample(build_benchmark_5node(), Intervention(0, 3.0), 40, rng(2))
        loss = learner.train_step(0, ds)
        assert math.isfinite(loss)  # ablated root trains on pinned rows too


class TestEvaluate:
    def build_validation(self):
        scm = build_benchmark_5node()
        blocks = [(sample(scm, None, 100, rng(20)).values, -1)]
        for p in (0, 1, 3):
            for u in (-4.0, 0.0, 4.0):
                blocks.append((sample(scm, Intervention(p, u), 20, rng(int(30 + p * 10 + u))).values, p))
        return ValidationSet(blocks)

    def test_perfect_learner_zero_loss(self):
        # zero-noise oracle data, predictors replaced by the true mechanisms
        scm = build_benchmark_5node(noise_std=0.0)
        learner = init_learner(scm.graph, rng(0))
        val = ValidationSet([(sample(scm, None, 50, rng(1)).values, -1)])

        class Oracle:
            def __init__(self, mech, parents):
                self.mech = mech
                self.parents = parents

            def forward(self, X, dropout_rng=None):
                from doloop.scm import mechanism_value

                return mechanism_value(self.mech, np.atleast_2d(X).T)

        for i in (1, 2, 4):
            learner.models[i] = Oracle(scm.mechanisms[i], scm.graph.parents[i])
        obs = val.blocks[0][0]
        learner.models[0].params["mu"][0] = obs[:, 0].mean()
        learner.models[0].params["log_sigma"][0] = math.log(obs[:, 0].std())
        learner.models[3].params["mu"][0] = obs[:, 3].mean()
        learner.models[3].params["log_sigma"][0] = math.log(obs[:, 3].std())
        ledger = learner.evaluate(val)
        assert np.all(ledger < 1e-12)

    def test_constant_zero_predictor_loss_is_nine(self):
        # do(X1=1) rows: X2 = 3 (+/- noise); a constant-zero predictor scores 9
        learner = make_learner()
        model = learner.models[1]
        for k in model.params:
            model.params[k][...] = 0.0
        ds = sample(build_benchmark_5node(), Intervention(0, 1.0), 400, rng(3))
        val = ValidationSet([(ds.values, 0)])
        ledger = learner.evaluate(val)
        assert ledger[1] == pytest.approx(9.0, abs=0.05)

    def test_total_is_sum(self):
        learner = make_learner()
        ledger = learner.evaluate(self.build_validation())
        assert learner.total_loss() == pytest.approx(float(np.sum(ledger)))

    def test_evaluate_reads_only(self):
        learner = make_learner()
        before = {
            i: {k: v.copy() for k, v in m.params.items()} for i, m in enumerate(learner.models)
        }
        learner.evaluate(self.build_validation())
        for i, m in enumerate(learner.models):
            for k in m.params:
                assert np.array_equal(m.params[k], before[i][k])

    def test_nodes_skip_rows_pinned_on_them(self):
        learner = make_learner()
        val = self.build_validation()
        rows = val.rows_excluding(0)
        tagged0 = sum(v.shape[0] for v, tag in val.blocks if tag == 0)
        assert rows.shape[0] == val.n_rows - tagged0


class TestCloneAndBuffer:
    def test_clone_isolated(self):
        learner = make_learner()
        learner.ingest(obs_dataset(128, 1))
        clone = learner.clone()
        before = {k: v.copy() for k, v in learner.models[1].params.items()}
        ledger_before = learner.ledger.copy()
        for _ in range(50):
            clone.train_episode(rng(3), steps=5)
        for k in before:
            assert np.array_equal(learner.models[1].params[k], before[k])
        assert np.array_equal(learner.ledger, ledger_before)

    def test_clone_predictions_match(self):
        learner = make_learner()
        clone = learner.clone()
        x = np.array([0.3, -1.2])
        assert learner.predict(2, x) == clone.predict(2, x)

    def test_clone_buffer_appends_privately(self):
        learner = make_learner()
        learner.ingest(obs_dataset(32, 1))
        clone = learner.clone()
        clone.ingest(obs_dataset(16, 2))
        assert learner.buffer.n_rows == 32
        assert clone.buffer.n_rows == 48

    def test_buffer_recency_window(self):
        learner = make_learner()
        for seed in range(5):
            learner.ingest(obs_dataset(32, seed))
        values, tags = learner.buffer.recent(50)
        assert values.shape == (50, 5)
        last = obs_dataset(32, 4).values
        assert np.array_equal(values[-32:], last)


class TestMcDropout:
    def test_zero_dropout_zero_variance(self):
        learner = make_learner(0, dropout_p=0.0)
        assert learner.mc_dropout_variance(2, np.array([0.5, 0.5]), 16, rng(1)) == 0.0

    def test_variance_nonnegative_and_reproducible(self):
        learner = make_learner()
        a = learner.mc_dropout_variance(2, np.array([1.0, -1.0]), 12, rng(7))
        b = learner.mc_dropout_variance(2, np.array([1.0, -1.0]), 12, rng(7))
        assert a >= 0.0
        assert a == b

    def test_requires_two_passes(self):
        learner = make_learner()
        with pytest.raises(EmptyBatch):
            learner.mc_dropout_variance(2, np.array([0.0, 0.0]), 1, rng(0))

    def test_root_raises(self):
        learner = make_learner()
        with pytest.raises(RootHasNoPredictor):
            learner.mc_dropout_variance(0, np.array([]), 4, rng(0))


class TestGradients:
    def test_predictor_gradients_match_finite_differences(self):
        worst = 0.0
        checked = 0
        g = rng(123)
        while checked < 25:
            model = NodePredictor(2, g)
            X = g.normal(size=(5, 2))
            y = g.normal(size=5)
            z1 = X @ model.params["w1"] + model.params["b1"]
            z2 = np.maximum(z1, 0.0) @ model.params["w2"] + model.params["b2"]
            if np.any(np.abs(z1) < 1e-3) or np.any(np.abs(z2) < 1e-3):
                continue  # keep finite differences away from relu kinks
            checked += 1
            _, grads = model.loss_grads(X, y)
            worst = max(worst, finite_diff_check(lambda: model.loss_grads(X, y)[0], model.params, grads))
        assert worst < REL_TOL

    def test_root_nll_gradients_match_finite_differences(self):
        worst = 0.0
        g = rng(321)
        for _ in range(25):
            model = RootModel()
            model.params["mu"][0] = g.normal()
            model.params["log_sigma"][0] = g.normal(scale=0.5)
            x = g.normal(size=12)
            _, grads = model.loss_grads(x)
            worst = max(worst, finite_diff_check(lambda: model.loss_grads(x)[0], model.params, grads))
        assert worst < REL_TOL


class TestCheckpoint:
    def test_save_load_roundtrip(self, tmp_path):
        learner = make_learner(5)
        learner.ingest(obs_dataset(64, 1))
        learner.train_episode(rng(2), steps=10)
        path = tmp_path / "learner.json"
        learner.evaluate(TestEvaluate().build_validation())
        learner.save(path)
        other = make_learner(99)
        other.load(path)
        x = np.array([0.7, -0.3])
        assert other.predict(2, x) == learner.predict(2, x)
        assert np.allclose(other.ledger, learner.ledger)
