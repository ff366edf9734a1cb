import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_error
from tatl.errors import DimensionError, RangeError
from tatl.losses import LossConfig, batch_loss, combined_loss, jaccard_loss, tversky_loss


def dice_form(pred, target, alpha):
    """Smoothed Dice loss written directly from set sizes."""
    p = np.ravel(pred).astype(float)
    y = np.ravel(target).astype(float)
    return 1 - (alpha + (p * y).sum()) / (alpha + 0.5 * (p.sum() + y.sum()))


class TestHandValues:
    def test_tversky(self):
        assert tversky_loss([1.0], [0])[0] == pytest.approx(1 - 1 / 1.4, abs=1e-9)
        assert tversky_loss([0.5, 0.5], [1, 0])[0] == pytest.approx(0.25, abs=1e-9)

    def test_jaccard(self):
        assert jaccard_loss(np.full(4, 0.5), np.ones(4))[0] == pytest.approx(0.4, abs=1e-9)
        assert jaccard_loss([1.0], [0])[0] == pytest.approx(0.5, abs=1e-9)

    def test_combined(self):
        expected = 0.5 * (1 - 1 / 1.4) + 0.5 * 0.5
        assert combined_loss([1.0], [0])[0] == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.392857142857, abs=1e-9)

    @pytest.mark.parametrize("loss", [tversky_loss, jaccard_loss, combined_loss])
    def test_perfect_prediction_is_zero(self, loss, rng):
        y = (rng.random((6, 5)) < 0.5).astype(np.uint8)
        assert loss(y.astype(float), y)[0] == 0.0
        assert loss(np.zeros(7), np.zeros(7))[0] == 0.0

    def test_degenerate_weights(self, rng):
        p, y = rng.random(30), (rng.random(30) < 0.3)
        cfg = LossConfig(lambda1=1.0, lambda2=0.0)
        v, g = combined_loss(p, y, cfg)
        tv, tg = tversky_loss(p, y, cfg)
        assert v == tv
        np.testing.assert_array_equal(g, tg)


class TestErrors:
    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            tversky_loss([0.1, 0.2], [1])

    def test_out_of_range(self):
        with pytest.raises(RangeError):
            jaccard_loss([1.2], [1])

    @pytest.mark.parametrize("kw", [{"alpha": 0}, {"beta": 0}, {"beta": 1}, {"lambda1": -1}])
    def test_bad_config(self, kw):
        with pytest.raises(RangeError):
            LossConfig(**kw)


@pytest.mark.parametrize("loss", [tversky_loss, jaccard_loss, combined_loss])
def test_gradients_match_finite_differences(loss):
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(1, 257))
        p = rng.uniform(0.01, 0.99, n)
        y = (rng.random(n) < rng.random()).astype(np.uint8)
        cfg = LossConfig(alpha=rng.uniform(0.5, 2), beta=rng.uniform(0.1, 0.9))
        _, g = loss(p, y, cfg)
        num = numeric_grad(lambda q: loss(q, y, cfg)[0], p, 1e-5)
        worst = max(worst, rel_error(g, num))
    assert worst <= 1e-4


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 64), st.floats(0.1, 3.0))
def test_tversky_half_beta_is_dice(seed, n, alpha):
    rng = np.random.default_rng(seed)
    p = (rng.random(n) < 0.5).astype(float)
    y = (rng.random(n) < 0.5).astype(np.uint8)
    v, _ = tversky_loss(p, y, LossConfig(alpha=alpha, beta=0.5))
    assert v == pytest.approx(dice_form(p, y, alpha), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 128))
def test_values_in_unit_interval(seed, n):
    rng = np.random.default_rng(seed)
    p = rng.random(n)
    y = (rng.random(n) < 0.5).astype(np.uint8)
    for loss in (tversky_loss, jaccard_loss):
        v, _ = loss(p, y)
        assert 0.0 <= v < 1.0


def test_linear_in_weights(rng):
    p, y = rng.random(50), (rng.random(50) < 0.4)
    v1, g1 = combined_loss(p, y, LossConfig(lambda1=0.3, lambda2=0.7))
    v3, g3 = combined_loss(p, y, LossConfig(lambda1=0.9, lambda2=2.1))
    assert v3 == pytest.approx(3 * v1, rel=1e-12)
    np.testing.assert_allclose(g3, 3 * g1, rtol=1e-12)


def test_batch_loss_is_mean(rng):
    p = rng.random((3, 4, 4))
    y = (rng.random((3, 4, 4)) < 0.5).astype(np.uint8)
    v, g = batch_loss(p, y)
    per = [combined_loss(p[i], y[i]) for i in range(3)]
    assert v == pytest.approx(np.mean([x[0] for x in per]), abs=1e-15)
    np.testing.assert_allclose(g[1], per[1][1] / 3)
