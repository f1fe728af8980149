import math

import numpy as np
import pytest
from scipy import stats

from doloop.dataset import Intervention, load_dataset_csv, save_dataset_csv
from doloop.errors import ValueOutOfRange
from doloop.graph import descendants
from doloop.scm import (
    Analytic,
    Linear,
    Root,
    build_benchmark_5node,
    build_benchmark_15node,
    load_scm_config,
    mechanism_value,
    sample,
    save_scm_config,
)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestMechanisms:
    def test_x3_closed_form_at_zero_sine(self):
        scm = build_benchmark_5node()
        # X3 at (X1=2, X2=0): 0.5*2 - 0 + sin(0) = 1
        out = mechanism_value(scm.mechanisms[2], np.array([[2.0], [0.0]]))
        assert out[0] == pytest.approx(1.0, abs=1e-12)

    def test_x5_quadratic(self):
        scm = build_benchmark_5node()
        out = mechanism_value(scm.mechanisms[4], np.array([[5.0]]))
        assert out[0] == pytest.approx(5.0, abs=1e-12)

    def test_x2_noise_std(self):
        scm = build_benchmark_5node()
        assert scm.mechanisms[1].noise_std == 0.01

    def test_linear_vectorized(self):
        mech = Linear(weights=(2.0,), intercept=1.0, noise_std=0.0)
        out = mechanism_value(mech, np.array([[-1.0, 0.0, 3.0]]))
        assert np.allclose(out, [-1.0, 1.0, 7.0])


class TestSampling:
    def test_do_x1_zero_noise_closed_form(self):
        scm = build_benchmark_5node(noise_std=0.0)
        ds = sample(scm, Intervention(0, 1.0), 50, rng(3))
        assert np.all(ds.column(0) == 1.0)
        assert np.allclose(ds.column(1), 3.0)
        assert np.allclose(ds.column(2), 0.5 * 1.0 - 3.0 + math.sin(3.0))

    def test_do_x3_constant_column(self):
        scm = build_benchmark_5node()
        ds = sample(scm, Intervention(2, 0.0), 200, rng(4))
        assert np.all(ds.column(2) == 0.0)

    def test_observational_x4_mean(self):
        # X4 ~ N(2, 1): the sample mean over 10000 draws stays within 3 standard errors
        scm = build_benchmark_5node()
        ds = sample(scm, None, 10000, rng(42))
        assert abs(ds.column(3).mean() - 2.0) < 3.0 / math.sqrt(10000)

    def test_zero_noise_sampling_is_deterministic(self):
        scm = build_benchmark_5node(noise_std=0.0)
        a = sample(scm, None, 20, rng(7))
        # zero-noise non-root columns equal the closed-form evaluation exactly
        x1 = a.column(0)
        assert np.array_equal(a.column(1), 2.0 * x1 + 1.0)
        assert np.array_equal(a.column(4), 0.2 * a.column(3) ** 2)

    def test_same_seed_same_dataset(self):
        scm = build_benchmark_5node()
        a = sample(scm, Intervention(1, 2.0), 64, rng(11))
        b = sample(scm, Intervention(1, 2.0), 64, rng(11))
        assert np.array_equal(a.values, b.values)

    def test_value_out_of_range(self):
        scm = build_benchmark_5node()
        with pytest.raises(ValueOutOfRange):
            sample(scm, Intervention(0, 9.0), 10, rng(0))
        with pytest.raises(ValueOutOfRange):
            sample(scm, None, 0, rng(0))

    def test_nondescendants_unaffected_ks(self):
        # do(X1=3) leaves the X4 and X5 marginals untouched: two-sample KS at
        # the 1% level should reject about 1% of the time; allow slack
        scm = build_benchmark_5node()
        failures = 0
        trials = 0
        nondesc = sorted({3, 4} - descendants(scm.graph, 0))
        assert nondesc == [3, 4]
        for seed in range(20):
            obs = sample(scm, None, 2000, rng(1000 + seed))
            do = sample(scm, Intervention(0, 3.0), 2000, rng(5000 + seed))
            for node in nondesc:
                trials += 1
                p = stats.ks_2samp(obs.column(node), do.column(node)).pvalue
                if p < 0.01:
                    failures += 1
        assert failures <= math.ceil(trials * 0.05)


class TestBenchmark15:
    def test_counts(self):
        scm = build_benchmark_15node()
        g = scm.graph
        assert g.n_nodes == 15
        assert len(g.roots) == 4
        colliders = [i for i in range(g.n_nodes) if len(g.parents[i]) >= 2]
        assert len(colliders) == 11

    def test_every_endogenous_node_has_two_parents(self):
        g = build_benchmark_15node().graph
        for i in range(g.n_nodes):
            if i not in g.roots:
                assert len(g.parents[i]) == 2

    def test_acyclic(self):
        g = build_benchmark_15node().graph
        assert len(g.topo_order) == g.n_nodes

    def test_mechanism_weights_frozen(self):
        a = build_benchmark_15node()
        b = build_benchmark_15node()
        for ma, mb in zip(a.mechanisms, b.mechanisms):
            assert ma == mb


class TestSerialization:
    def test_dataset_csv_roundtrip(self, tmp_path):
        scm = build_benchmark_5node()
        ds = sample(scm, Intervention(1, -2.5), 17, rng(9))
        ds.seed = 9
        path = tmp_path / "block.csv"
        save_dataset_csv(ds, path)
        back = load_dataset_csv(path)
        assert np.array_equal(back.values, ds.values)
        assert back.columns == ds.columns
        assert back.intervention == ds.intervention
        assert back.seed == 9

    def test_scm_config_roundtrip(self, tmp_path):
        scm = build_benchmark_15node()
        path = tmp_path / "scm.json"
        save_scm_config(scm, path)
        back = load_scm_config(path)
        assert back.graph == scm.graph
        assert back.mechanisms == scm.mechanisms

    def test_loaded_scm_samples_identically(self, tmp_path):
        scm = build_benchmark_5node()
        path = tmp_path / "scm.json"
        save_scm_config(scm, path)
        back = load_scm_config(path)
        a = sample(scm, None, 32, rng(5))
        b = sample(back, None, 32, rng(5))
        assert np.array_equal(a.values, b.values)

    def test_root_and_analytic_validation(self):
        with pytest.raises(Exception):
            Root(mean=0.0, std=0.0)
        with pytest.raises(Exception):
            Analytic(terms=(("cube", 0, 1.0),), intercept=0.0, noise_std=0.0)
