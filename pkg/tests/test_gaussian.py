import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from locdreamer.numkit import (
    DiagonalGaussian,
    Tensor,
    backward,
    gaussian_kl,
    gaussian_log_pdf,
    reparameterize,
)
from oracles import central_difference, mc_gaussian_kl, trapezoid_density_mass


def gauss(mean, std):
    return DiagonalGaussian(Tensor(np.atleast_1d(np.asarray(mean, dtype=float))),
                            Tensor(np.atleast_1d(np.asarray(std, dtype=float))))


def test_kl_identical_is_zero():
    q = gauss([0.0, 1.0], [1.0, 2.0])
    p = gauss([0.0, 1.0], [1.0, 2.0])
    assert gaussian_kl(q, p).item() == pytest.approx(0.0, abs=1e-15)


def test_kl_unit_mean_shift():
    # Monte-Carlo oracle agrees with the closed form at tol 1e-2.
    kl = gaussian_kl(gauss(1.0, 1.0), gauss(0.0, 1.0)).item()
    assert kl == pytest.approx(0.5, abs=1e-12)
    assert kl == pytest.approx(mc_gaussian_kl(1.0, 1.0, 0.0, 1.0), abs=1e-2)


def test_kl_stddev_ratio_against_monte_carlo():
    kl = gaussian_kl(gauss(0.0, 2.0), gauss(0.0, 1.0)).item()
    assert kl == pytest.approx(mc_gaussian_kl(0.0, 2.0, 0.0, 1.0), abs=1e-2)


def test_kl_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        gaussian_kl(gauss([0.0, 0.0], [1.0, 1.0]), gauss(0.0, 1.0))


@settings(max_examples=100, deadline=None)
@given(
    mq=st.lists(st.floats(-5, 5), min_size=1, max_size=4),
    data=st.data(),
)
def test_kl_nonnegative(mq, data):
    n = len(mq)
    sq = data.draw(st.lists(st.floats(0.01, 5), min_size=n, max_size=n))
    mp = data.draw(st.lists(st.floats(-5, 5), min_size=n, max_size=n))
    sp = data.draw(st.lists(st.floats(0.01, 5), min_size=n, max_size=n))
    assert gaussian_kl(gauss(mq, sq), gauss(mp, sp)).item() >= -1e-12


def test_kl_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    vals = rng.uniform(0.5, 1.5, size=(4, 3))

    def loss_for(block):
        q = DiagonalGaussian(Tensor(np.asarray(block[0]), requires_grad=True),
                             Tensor(np.asarray(block[1]), requires_grad=True))
        p = DiagonalGaussian(Tensor(np.asarray(block[2]), requires_grad=True),
                             Tensor(np.asarray(block[3]), requires_grad=True))
        return gaussian_kl(q, p), q, p

    kl, q, p = loss_for(vals)
    backward(kl)
    for i, tensor in enumerate([q.mean, q.stddev, p.mean, p.stddev]):
        fd = central_difference(
            lambda v, i=i: loss_for(np.concatenate([vals[:i], v[None], vals[i + 1:]]))[0].item(),
            vals[i].copy(),
        )
        np.testing.assert_allclose(tensor.grad, fd, rtol=1e-5, atol=1e-8)


def test_log_pdf_at_mean_unit_stddev():
    lp = gaussian_log_pdf(np.array([0.3]), gauss(0.3, 1.0)).item()
    assert lp == pytest.approx(-0.5 * np.log(2 * np.pi))


def test_log_pdf_one_stddev_away():
    at_mean = gaussian_log_pdf(np.array([2.0]), gauss(2.0, 0.7)).item()
    off = gaussian_log_pdf(np.array([2.7]), gauss(2.0, 0.7)).item()
    assert off == pytest.approx(at_mean - 0.5)


def test_log_pdf_sums_over_dimensions():
    d2 = gaussian_log_pdf(np.array([1.0, -1.0]), gauss([0.0, 0.5], [1.0, 2.0])).item()
    d1a = gaussian_log_pdf(np.array([1.0]), gauss(0.0, 1.0)).item()
    d1b = gaussian_log_pdf(np.array([-1.0]), gauss(0.5, 2.0)).item()
    assert d2 == pytest.approx(d1a + d1b)


def test_density_integrates_to_one():
    g = gauss(1.3, 0.42)
    mass = trapezoid_density_mass(
        lambda x: gaussian_log_pdf(np.array([x]), g).item(), mean=1.3, std=0.42)
    assert mass == pytest.approx(1.0, abs=1e-3)


def test_reparameterize_zero_noise_is_mean():
    g = gauss([1.0, 2.0], [3.0, 4.0])
    np.testing.assert_array_equal(reparameterize(g, np.zeros(2)).data, [1.0, 2.0])


def test_reparameterize_unit_noise_adds_stddev():
    g = gauss([1.0, 2.0], [3.0, 4.0])
    np.testing.assert_array_equal(reparameterize(g, np.ones(2)).data, [4.0, 6.0])


def test_reparameterize_stddev_gradient_equals_noise():
    noise = np.array([0.7, -1.1])
    std0 = np.array([1.0, 2.0])

    def loss_for(sv):
        g = DiagonalGaussian(Tensor(np.array([0.0, 0.0])), Tensor(np.asarray(sv), requires_grad=True))
        return reparameterize(g, noise).sum(), g

    loss, g = loss_for(std0)
    backward(loss)
    np.testing.assert_allclose(g.stddev.grad, noise, rtol=1e-12)
    fd = central_difference(lambda v: loss_for(v)[0].item(), std0.copy())
    np.testing.assert_allclose(g.stddev.grad, fd, rtol=1e-6)


def test_stddev_must_be_positive():
    with pytest.raises(ValueError):
        gauss([0.0], [0.0])
