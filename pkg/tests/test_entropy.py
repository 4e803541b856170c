import math

import mpmath
import numpy as np
import pytest
import torch

from aiocodec.entropy import (
    SIGMA_MIN, FactorizedPrior, GaussianParams, HyperDecoder, HyperEncoder, SpatialContext,
    checkerboard_mask, factorized_rate, gaussian_interval_prob, quantize, rate_estimate,
)

mpmath.mp.dps = 50


def interval_prob_oracle(v, mu, sigma, width):
    # lower-tail form avoids cancellation of two CDF values near 1
    d = -abs(mpmath.mpf(v) - mpmath.mpf(mu))
    half = mpmath.mpf(width) / 2
    s = mpmath.mpf(sigma)
    return mpmath.ncdf((d + half) / s) - mpmath.ncdf((d - half) / s)


class TestQuantize:
    def test_values_on_grid_and_idempotent(self):
        y = torch.randn(2, 4, 3, 3) * 5
        q = torch.tensor([0.5, 1.0, 1.7, 3.0])
        yh = quantize(y, q)
        k = yh / q.view(1, -1, 1, 1)
        assert torch.allclose(k, torch.round(k), atol=1e-5)
        assert torch.equal(quantize(yh, q), yh)
        assert ((yh - y).abs() <= q.view(1, -1, 1, 1) / 2 + 1e-6).all()

    def test_unit_step_is_rounding(self):
        y = torch.tensor([-1.5, -0.4, 0.49, 2.6])
        assert torch.equal(quantize(y.view(1, 4, 1, 1), torch.ones(4)).view(-1), torch.round(y))

    def test_train_and_infer_forward_agree(self):
        y = torch.randn(1, 3, 4, 4)
        q = torch.tensor([0.3, 0.9, 2.0])
        assert torch.equal(quantize(y, q, "train"), quantize(y, q, "infer"))

    def test_straight_through_gradients_match_bypass(self, float64):
        y = torch.randn(1, 3, 4, 4, requires_grad=True)
        q = torch.tensor([0.3, 0.9, 2.0], requires_grad=True)
        w = torch.randn(1, 3, 4, 4)
        (quantize(y, q, "train") * w).sum().backward()
        # bypass: rounding treated as a constant offset r = round(y/q) - y/q
        qv = q.detach().view(1, -1, 1, 1)
        r = torch.round(y.detach() / qv) - y.detach() / qv
        torch.testing.assert_close(y.grad, w)
        torch.testing.assert_close(q.grad, (w * r).sum(dim=(0, 2, 3)))

    def test_rejects_bad_step_and_mode(self):
        with pytest.raises(ValueError):
            quantize(torch.zeros(1, 2, 1, 1), torch.tensor([1.0, 0.0]))
        with pytest.raises(ValueError):
            quantize(torch.zeros(1, 1, 1, 1), torch.ones(1), "noise")


def test_checkerboard_mask():
    m = checkerboard_mask(5, 4)
    assert m[0, 0] and not m[0, 1] and not m[1, 0] and m[1, 1]
    assert int(m.sum()) == 10
    for i in range(5):
        for j in range(4):
            assert bool(m[i, j]) == ((i + j) % 2 == 0)


class TestIntervalProbability:
    @pytest.mark.parametrize("v, mu, sigma, width", [
        (0.0, 0.0, 1.0, 1.0), (3.0, 0.2, 0.5, 1.0), (-7.0, 1.0, 1.3, 0.5),
        (12.0, 0.0, 1.0, 1.0), (0.4, 0.4, 1e-4, 0.25), (100.0, -3.0, 40.0, 2.0),
    ])
    def test_high_precision_oracle(self, v, mu, sigma, width, float64):
        got = gaussian_interval_prob(torch.tensor(v), torch.tensor(mu), torch.tensor(sigma), width).item()
        expected = float(interval_prob_oracle(v, mu, sigma, width))
        assert got == pytest.approx(expected, rel=1e-9, abs=1e-300)

    def test_exactly_symmetric(self, float64):
        d = torch.arange(50) / 8.0
        a = gaussian_interval_prob(1.0 + d, torch.tensor(1.0), torch.tensor(0.7), 1.0)
        b = gaussian_interval_prob(1.0 - d, torch.tensor(1.0), torch.tensor(0.7), 1.0)
        assert torch.equal(a, b)

    def test_lattice_sums_to_one(self, float64):
        k = torch.arange(-60, 61, dtype=torch.float64)
        p = gaussian_interval_prob(k * 0.5, torch.tensor(0.3), torch.tensor(2.0), 0.5)
        assert p.sum().item() == pytest.approx(1.0, abs=1e-12)


def test_rate_estimate_matches_oracle(float64):
    rng = np.random.default_rng(5)
    mu = torch.tensor(rng.normal(0, 2, (1, 2, 3, 3)))
    sigma = torch.tensor(rng.uniform(0.2, 3, (1, 2, 3, 3)))
    q = torch.tensor([0.5, 1.5])
    k = torch.tensor(rng.integers(-4, 5, (1, 2, 3, 3))).double()
    y_hat = k * q.view(1, -1, 1, 1)
    mask = checkerboard_mask(3, 3)
    expected_all = 0.0
    expected_masked = 0.0
    for c in range(2):
        for i in range(3):
            for j in range(3):
                p = interval_prob_oracle(float(y_hat[0, c, i, j]), float(mu[0, c, i, j]),
                                         float(sigma[0, c, i, j]), float(q[c]))
                b = -float(mpmath.log(max(p, mpmath.mpf(2) ** -16), 2))
                expected_all += b
                if mask[i, j]:
                    expected_masked += b
    params = GaussianParams(mu, sigma)
    assert rate_estimate(y_hat, params, q).item() == pytest.approx(expected_all, rel=1e-10)
    assert rate_estimate(y_hat, params, q, mask).item() == pytest.approx(expected_masked, rel=1e-10)


def test_rate_probability_floor(float64):
    # a far-tail symbol costs at most 16 bits in the estimate
    params = GaussianParams(torch.zeros(1, 1, 1, 1), torch.full((1, 1, 1, 1), 0.1))
    bits = rate_estimate(torch.full((1, 1, 1, 1), 50.0), params, torch.ones(1))
    assert bits.item() == pytest.approx(16.0)


def test_factorized_rate(float64):
    prior = FactorizedPrior(2, init_scale=4.0)
    mu, sigma = prior.params()
    assert torch.allclose(sigma, torch.full((2,), 4.0))
    z = torch.tensor([[[[0.0, 3.0]], [[-2.0, 1.0]]]])
    expected = sum(-math.log2(float(interval_prob_oracle(v, 0.0, 4.0, 1.0))) for v in (0, 3, -2, 1))
    assert factorized_rate(z, prior).item() == pytest.approx(expected, rel=1e-10)


@pytest.mark.parametrize("h, w", [(1, 1), (2, 3), (4, 4), (5, 7), (8, 6)])
def test_hyper_shapes(h, w):
    enc, dec = HyperEncoder(16, 8), HyperDecoder(16, 8)
    z = enc(torch.randn(1, 16, h, w))
    assert z.shape == (1, 8, math.ceil(h / 4), math.ceil(w / 4))
    p = dec(torch.round(z), (h, w))
    assert p.mu.shape == p.sigma.shape == (1, 16, h, w)
    assert (p.sigma >= SIGMA_MIN).all()


def test_spatial_context_ignores_non_anchor_values():
    ctx = SpatialContext(8)
    base = GaussianParams(torch.randn(1, 8, 6, 5), torch.rand(1, 8, 6, 5) + 0.1)
    mask = checkerboard_mask(6, 5)
    y1 = torch.randn(1, 8, 6, 5)
    y2 = torch.where(mask, y1, torch.randn(1, 8, 6, 5) * 10)
    a, b = ctx(y1, base, mask), ctx(y2, base, mask)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.sigma, b.sigma)
    with pytest.raises(Exception):
        ctx(y1, base, checkerboard_mask(5, 5))


def test_sigma_floor_applies():
    ctx = SpatialContext(2)
    with torch.no_grad():
        ctx.fuse.weight.zero_()
        ctx.fuse.bias.fill_(-100.0)
    base = GaussianParams(torch.zeros(1, 2, 2, 2), torch.ones(1, 2, 2, 2))
    out = ctx(torch.zeros(1, 2, 2, 2), base, checkerboard_mask(2, 2))
    assert (out.sigma == SIGMA_MIN).all()
