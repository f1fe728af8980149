import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import REL_TOL, finite_diff_check

from doloop.dataset import Intervention
from doloop.errors import LedgerUninitialized, ValueNotOnGrid
from doloop.learner import init_learner
from doloop.nn import softmax
from doloop.policy import (
    History,
    TrainablePolicy,
    ValueGrid,
    featurize,
    propose_max_variance,
    propose_random,
    propose_round_robin,
)
from doloop.scm import build_benchmark_5node


def rng(seed=0):
    return np.random.default_rng(seed)


def make_history(n=5, picks=()):
    h = History(n)
    for node, b in picks:
        h.record(node, b)
    return h


def make_policy(seed=0, n=5, children=None, **kw):
    return TrainablePolicy(n, rng(seed), action_children=children, **kw)


class TestFeaturize:
    def test_cold_start_vector(self):
        f = featurize(np.zeros(5), make_history(), 0, 100)
        assert f.vector.shape == (16,)
        assert np.all(f.vector == 0.0)

    def test_loss_squashing_limits(self):
        f = featurize(np.array([1e12, 0.0, 1.0, 3.0, 0.0]), make_history(), 0, 10)
        assert f.vector[0] == pytest.approx(1.0, abs=1e-9)
        assert f.vector[2] == pytest.approx(0.5)

    def test_feature_length_3n_plus_1(self):
        for n in (3, 5, 15):
            f = featurize(np.ones(n), make_history(n), 2, 10)
            assert f.vector.shape == (3 * n + 1,)

    def test_counts_last_and_progress(self):
        h = make_history(picks=[(2, 0), (2, 1), (4, 0)])
        f = featurize(np.ones(5), h, 5, 10)
        assert f.vector[5 + 2] == pytest.approx(2 / 3)
        assert f.vector[10 + 4] == 1.0  # one-hot of the last intervened node
        assert f.vector[15] == 0.5

    def test_uninitialized_ledger_raises(self):
        with pytest.raises(LedgerUninitialized):
            featurize(np.full(5, np.inf), make_history(), 0, 10)

    def test_entries_in_unit_interval(self):
        h = make_history(picks=[(0, 1)] * 7 + [(3, 2)] * 2)
        f = featurize(np.array([0.1, 5.0, 80.0, 0.0, 2.0]), h, 9, 20)
        assert np.all(f.vector >= 0.0)
        assert np.all(f.vector <= 1.0)


class TestValueGrid:
    def test_default_grid(self):
        g = ValueGrid()
        assert g.n_bins == 41
        assert g.centers[0] == -5.0
        assert g.centers[-1] == 5.0
        assert g.step == pytest.approx(0.25)

    def test_bin_index_snaps_within_tolerance(self):
        g = ValueGrid()
        assert g.bin_index(0.25) == 21
        assert g.bin_index(0.25 + 5e-10) == 21
        with pytest.raises(ValueNotOnGrid):
            g.bin_index(0.3)

    def test_nearest_bin_clips(self):
        g = ValueGrid()
        assert g.nearest_bin(100.0) == 40
        assert g.nearest_bin(-100.0) == 0
        assert g.nearest_bin(0.1) == 20


class TestProposal:
    def features(self, seed=1):
        h = make_history(picks=[(0, 3), (1, 10)])
        return featurize(rng(seed).uniform(0, 2, 5), h, 2, 100)

    def test_uniform_policy_log_prob(self):
        policy = make_policy()
        for k in policy.params:
            policy.params[k][...] = 0.0
        cands = policy.propose(self.features(), 4, 0.7, rng(2))
        for c in cands:
            assert c.log_prob == pytest.approx(-(math.log(5) + math.log(41)), abs=1e-12)

    def test_temperature_limit_collapses_to_argmax(self):
        policy = make_policy(3)
        f = self.features()
        cands = policy.propose(f, 6, 1e-9, rng(5))
        first = cands[0].intervention
        assert all(c.intervention == first for c in cands)
        node_logits, bin_logits = policy.logits(f)
        assert first.node == int(np.argmax(node_logits))
        assert first.value == pytest.approx(policy.grid.centers[int(np.argmax(bin_logits))])

    def test_k_candidates_on_bin_centers(self):
        policy = make_policy(4)
        cands = policy.propose(self.features(), 4, 0.7, rng(6))
        assert len(cands) == 4
        for c in cands:
            policy.grid.bin_index(c.intervention.value)  # must not raise

    def test_propose_reproducible(self):
        policy = make_policy(4)
        f = self.features()
        a = policy.propose(f, 4, 0.7, rng(9))
        b = policy.propose(f, 4, 0.7, rng(9))
        assert [c.intervention for c in a] == [c.intervention for c in b]

    def test_log_prob_normalizes(self):
        policy = make_policy(8)
        f = self.features()
        total = 0.0
        for node in range(5):
            for center in policy.grid.centers:
                total += math.exp(policy.log_prob(f, Intervention(node, float(center))))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_log_prob_of_samples_finite_and_nonpositive(self):
        policy = make_policy(3)
        cands = policy.propose(self.features(), 8, 0.7, rng(1))
        for c in cands:
            assert math.isfinite(c.log_prob)
            assert c.log_prob <= 0.0

    def test_argmax_invariant_to_logit_scaling(self):
        policy = make_policy(11)
        f = self.features()
        node_logits, bin_logits = policy.logits(f)
        for scale in (0.3, 2.0, 17.0):
            assert np.argmax(softmax(node_logits * scale)) == np.argmax(node_logits)
            assert np.argmax(softmax(bin_logits * scale)) == np.argmax(bin_logits)

    def test_value_off_grid_raises(self):
        policy = make_policy()
        with pytest.raises(ValueNotOnGrid):
            policy.log_prob(self.features(), Intervention(0, 0.37))

    def test_no_value_head_mode(self):
        policy = make_policy(2, n=4, value_head=False)
        h = make_history(4)
        f = featurize(np.ones(4), h, 0, 10)
        cands = policy.propose(f, 4, 0.7, rng(3))
        for c in cands:
            assert c.intervention.value == 0.0
        total = sum(math.exp(policy.log_prob(f, Intervention(i, 0.0))) for i in range(4))
        assert total == pytest.approx(1.0, abs=1e-12)


class TestEquivariance:
    def test_relabeling_permutes_proposals(self):
        children = [[1, 2], [2], [], [4], []]
        perm = np.array([3, 0, 4, 1, 2])  # new index of each old node
        inv = np.argsort(perm)
        policy = make_policy(5, children=children)

        permuted_children = [[] for _ in range(5)]
        for old, ch in enumerate(children):
            permuted_children[perm[old]] = sorted(perm[c] for c in ch)
        other = make_policy(99, children=permuted_children)
        other.params = {k: v.copy() for k, v in policy.params.items()}

        ledger = np.array([0.2, 1.5, 0.01, 3.0, 0.4])
        h = make_history(picks=[(1, 5), (3, 2)])
        f = featurize(ledger, h, 4, 50)

        ledger_p = ledger[inv]
        h_p = make_history(picks=[(int(perm[1]), 5), (int(perm[3]), 2)])
        f_p = featurize(ledger_p, h_p, 4, 50)

        logits, bins = policy.logits(f)
        logits_p, bins_p = other.logits(f_p)
        assert np.allclose(logits_p, logits[inv])
        assert np.allclose(bins_p, bins)


class TestGradients:
    def test_log_prob_gradients_match_finite_differences(self):
        worst = 0.0
        g = rng(52)
        for _ in range(20):
            policy = TrainablePolicy(4, g, grid=ValueGrid(-5, 5, 9), action_children=[[1], [2], [], []])
            h = History(4)
            for _ in range(3):
                h.record(int(g.integers(4)), int(g.integers(9)))
            f = featurize(g.uniform(0.05, 3.0, 4), h, 2, 9)
            iv = Intervention(int(g.integers(4)), float(policy.grid.centers[g.integers(9)]))
            _, grads = policy.log_prob_grads(f, iv)
            worst = max(worst, finite_diff_check(lambda: policy.log_prob(f, iv), policy.params, grads))
        assert worst < REL_TOL

    def test_entropy_gradients_match_finite_differences(self):
        g = rng(53)
        policy = TrainablePolicy(4, g, grid=ValueGrid(-5, 5, 7))
        h = History(4)
        h.record(1, 2)
        f = featurize(g.uniform(0.1, 2.0, 4), h, 1, 7)
        _, grads = policy.entropy_grads(f)
        worst = finite_diff_check(lambda: policy.entropy_grads(f)[0], policy.params, grads)
        assert worst < REL_TOL


class TestBaselines:
    def test_random_values_in_range(self):
        cands = propose_random(5, (-5.0, 5.0), 200, rng(3))
        for c in cands:
            assert -5.0 <= c.intervention.value <= 5.0
        expected = -(math.log(5) + math.log(10.0))
        assert cands[0].log_prob == pytest.approx(expected)

    def test_random_node_frequencies(self):
        n = 5
        draws = 100_000
        cands = propose_random(n, (-5.0, 5.0), draws, rng(7))
        counts = np.bincount([c.intervention.node for c in cands], minlength=n)
        p = 1.0 / n
        sigma = math.sqrt(draws * p * (1 - p))
        for c in counts:
            assert abs(c - draws * p) < 3 * sigma

    def test_round_robin_cycle(self):
        assert propose_round_robin(0, 5).intervention.node == 0
        assert propose_round_robin(5, 5).intervention.node == 0
        assert propose_round_robin(7, 5).intervention.node == 2

    def test_round_robin_value_schedule_cycles(self):
        seen = {propose_round_robin(t, 5).intervention.value for t in range(25)}
        assert seen == {-4.0, -2.0, 0.0, 2.0, 4.0}

    def test_max_variance_tie_break_with_zero_dropout(self):
        learner = init_learner(build_benchmark_5node().graph, rng(1), dropout_p=0.0)
        grid = np.arange(-5.0, 6.0, 1.0)
        cand = propose_max_variance(learner, grid, 8, rng(2))
        assert cand.intervention == Intervention(0, -5.0)

    def test_max_variance_value_on_grid(self):
        learner = init_learner(build_benchmark_5node().graph, rng(1))
        grid = np.arange(-5.0, 6.0, 1.0)
        cand = propose_max_variance(learner, grid, 8, rng(2))
        assert cand.intervention.value in set(grid)

    def test_higher_dropout_more_variance(self):
        wins = 0
        for seed in range(20):
            low = init_learner(build_benchmark_5node().graph, rng(3), dropout_p=0.02)
            high = init_learner(build_benchmark_5node().graph, rng(3), dropout_p=0.4)
            x = np.array([1.0, 1.0])
            v_low = low.mc_dropout_variance(2, x, 12, rng(100 + seed))
            v_high = high.mc_dropout_variance(2, x, 12, rng(100 + seed))
            if v_high >= v_low:
                wins += 1
        assert wins >= 15


class TestCheckpoint:
    def test_policy_save_load(self, tmp_path):
        policy = make_policy(3, children=[[1], [], [], [], []])
        path = tmp_path / "policy.json"
        policy.save(path)
        other = make_policy(77, children=[[1], [], [], [], []])
        other.load(path)
        h = make_history(picks=[(0, 1)])
        f = featurize(np.ones(5), h, 1, 10)
        assert policy.log_prob(f, Intervention(2, 0.25)) == other.log_prob(f, Intervention(2, 0.25))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_probabilities_sum_to_one(logits):
    p = softmax(np.array(logits))
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p >= 0.0)
