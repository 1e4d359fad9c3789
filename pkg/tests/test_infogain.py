import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igbnn import gradcheck, infogain, network
from igbnn.infogain import IGConfig
from igbnn.network import NetworkShape
from igbnn.tensor import Recording

LN2 = math.log(2.0)


def random_probs(rng, n, k, batch=None, temperature=3.0):
    size = (n, k) if batch is None else (n, batch, k)
    return network.softmax_np(rng.normal(0, temperature, size=size))


class TestEntropy:
    def test_one_hot(self):
        assert infogain.entropy([0.0, 1.0, 0.0]) == 0.0

    @pytest.mark.parametrize("k", [2, 3, 10])
    def test_uniform(self, k):
        assert infogain.entropy(np.full(k, 1 / k)) == pytest.approx(math.log(k), abs=1e-14)

    def test_half_half(self):
        assert infogain.entropy([0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)

    def test_invalid(self):
        with pytest.raises(ValueError):
            infogain.entropy([-0.1, 1.1])
        with pytest.raises(ValueError):
            infogain.entropy([0.5, 0.6])


class TestInformationGain:
    def test_identical_particles(self):
        p = np.tile([0.2, 0.3, 0.5], (4, 1))
        assert infogain.information_gain(p) == pytest.approx(0.0, abs=1e-15)

    def test_single_particle(self):
        assert infogain.information_gain([[0.1, 0.9]]) == 0.0

    def test_opposing_one_hots(self):
        assert infogain.information_gain([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(LN2, abs=1e-15)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(0)
        probs = random_probs(rng, 4, 3, batch=6)
        batch = infogain.information_gain_batch(probs)
        for b in range(6):
            assert batch[b] == pytest.approx(infogain.information_gain(probs[:, b]), abs=1e-15)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 8), st.integers(2, 6), st.floats(0.1, 20))
    def test_bounds_and_permutation(self, seed, n, k, temp):
        rng = np.random.default_rng(seed)
        p = random_probs(rng, n, k, temperature=temp)
        ig = infogain.information_gain(p)
        assert -1e-12 <= ig <= math.log(k) + 1e-12
        assert infogain.information_gain(p[rng.permutation(n)]) == pytest.approx(ig, abs=1e-14)

    def test_graph_matches_numpy(self):
        rng = np.random.default_rng(3)
        logits = rng.normal(0, 2, size=(5, 7, 3))
        np.testing.assert_allclose(infogain.ig_graph(logits).data,
                                   infogain.information_gain_batch(network.softmax_np(logits)), atol=1e-13)

    def test_graph_saturated_logits_finite(self):
        logits = np.array([[[200.0, -200.0]], [[-200.0, 200.0]]])
        ig = infogain.ig_graph(logits).data
        assert np.isfinite(ig).all() and ig[0] == pytest.approx(LN2, abs=1e-9)


class TestPenalty:
    def test_identical(self):
        p = random_probs(np.random.default_rng(1), 3, 4, batch=5)
        assert infogain.ig_penalty(p, p) == 0.0

    def test_ln2_vs_zero(self):
        clean = np.array([[1.0, 0.0], [0.0, 1.0]])
        adv = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert infogain.ig_penalty(clean, adv) == pytest.approx(LN2, abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_probs(rng, 3, 3, batch=4), random_probs(rng, 3, 3, batch=4)
        assert infogain.ig_penalty(a, b) == infogain.ig_penalty(b, a)
        assert infogain.ig_penalty(a, b, mode="batch_mean") <= infogain.ig_penalty(a, b) + 1e-15

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            infogain.ig_penalty(np.full((2, 3, 2), 0.5), np.full((2, 4, 2), 0.5))


class TestConfig:
    def test_defaults(self):
        assert IGConfig().lam == 5.0 and IGConfig().entropy_floor == 1e-12

    @pytest.mark.parametrize("kwargs", [dict(lam=-1.0), dict(entropy_floor=1e-3), dict(penalty="max")])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            IGConfig(**kwargs)

    def test_negative_allowed_for_inversion(self):
        assert IGConfig(lam=-5.0, allow_negative=True).lam == -5.0


class TestLIG:
    shape = NetworkShape((2, 8, 3))

    def _setup(self, seed=0, n=3, batch=6):
        rng = np.random.default_rng(seed)
        theta = np.stack([network.init_params(self.shape, seed * 10 + i) for i in range(n)])
        x = rng.uniform(size=(batch, 2))
        x_adv = np.clip(x + rng.uniform(-0.1, 0.1, size=x.shape), 0, 1)
        y = rng.integers(0, 3, size=batch)
        return theta, x, x_adv, y

    def test_lambda_zero_is_adv_ce(self):
        theta, x, x_adv, y = self._setup()
        terms = infogain.l_ig(self.shape, theta, x, x_adv, y, IGConfig(lam=0.0))
        ce = np.mean([network.cross_entropy(network.forward(self.shape, t, x_adv), y).item() for t in theta])
        assert terms.total.item() == pytest.approx(ce, abs=1e-14)

    def test_clean_equals_adv(self):
        theta, x, _, y = self._setup(1)
        terms = infogain.l_ig(self.shape, theta, x, x, y, IGConfig(lam=7.0))
        assert terms.penalty.item() == 0.0
        assert terms.total.item() == pytest.approx(network.cross_entropy(
            network.forward(self.shape, theta, x), y).item(), abs=1e-14)

    @pytest.mark.parametrize("mode", ["per_instance", "batch_mean"])
    def test_recomposition(self, mode):
        theta, x, x_adv, y = self._setup(2)
        cfg = IGConfig(lam=5.0, penalty=mode)
        terms = infogain.l_ig(self.shape, theta, x, x_adv, y, cfg)
        ce = np.mean([network.cross_entropy(network.forward(self.shape, t, x_adv), y).item() for t in theta])
        pc = network.softmax_np(network.forward(self.shape, theta, x).data)
        pa = network.softmax_np(network.forward(self.shape, theta, x_adv).data)
        pen = infogain.ig_penalty(pc, pa, mode=mode)
        assert terms.total.item() == pytest.approx(ce + 5.0 * pen, abs=1e-12)

    def test_lambda_zero_penalty_has_no_gradient_path(self):
        theta, x, x_adv, y = self._setup(3)
        rec = Recording()
        leaf = rec.leaf(theta)
        t0 = infogain.l_ig(self.shape, leaf, x, x_adv, y, IGConfig(lam=0.0))
        (g0,) = rec.grad(t0.total, [leaf])
        rec = Recording()
        leaf = rec.leaf(theta)
        (g_ce,) = rec.grad(network.cross_entropy(network.forward(self.shape, leaf, x_adv), y), [leaf])
        np.testing.assert_array_equal(g0, g_ce)

    def test_gradient_matches_finite_differences(self):
        report = gradcheck.run_suite(seed=7, ops=("l_ig",), l_ig_cases=10)
        assert report.passed, report.lines()

    def test_single_particle_vector(self):
        theta, x, x_adv, y = self._setup(4, n=1)
        terms = infogain.l_ig(self.shape, theta[0], x, x_adv, y, IGConfig())
        assert terms.penalty.item() == pytest.approx(0.0, abs=1e-12)
