"""Independent oracles shared across the test suite.

These deliberately avoid the library's own differentiation and closed-form
paths: gradients come from central finite differences, expectations from
Monte Carlo or quadrature, and distributions from brute-force enumeration.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar f at x by central differences, one entry at a time."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a-b| / max(1, |a|, |b|), elementwise."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def mc_gaussian_kl(mu_q, sd_q, mu_p, sd_p, n: int = 10 ** 6, seed: int = 0) -> float:
    """Monte-Carlo estimate of KL(q || p) = E_q[log q(z) - log p(z)]."""
    rng = np.random.default_rng(seed)
    mu_q = np.atleast_1d(np.asarray(mu_q, dtype=np.float64))
    sd_q = np.atleast_1d(np.asarray(sd_q, dtype=np.float64))
    mu_p = np.atleast_1d(np.asarray(mu_p, dtype=np.float64))
    sd_p = np.atleast_1d(np.asarray(sd_p, dtype=np.float64))
    z = mu_q + sd_q * rng.standard_normal((n, mu_q.size))

    def logpdf(z, mu, sd):
        return (-0.5 * ((z - mu) / sd) ** 2 - np.log(sd) - 0.5 * np.log(2 * np.pi)).sum(axis=1)

    return float(np.mean(logpdf(z, mu_q, sd_q) - logpdf(z, mu_p, sd_p)))


def trapezoid_density_mass(logpdf_1d, mean: float, std: float, half_width: float = 10.0,
                           n: int = 20001) -> float:
    """Integral of exp(logpdf) over a wide 1-d grid around the mean."""
    xs = np.linspace(mean - half_width * std, mean + half_width * std, n)
    ys = np.array([math.exp(logpdf_1d(x)) for x in xs])
    return float(np.trapezoid(ys, xs))


def adam_reference(x0: float, grads: list[float], lr: float, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8,
                   weight_decay: float = 0.0) -> float:
    """Textbook Adam with decoupled weight decay, scalar parameter."""
    x, m, v = x0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mh = m / (1 - beta1 ** t)
        vh = v / (1 - beta2 ** t)
        x = x - lr * (mh / (math.sqrt(vh) + eps) + weight_decay * x)
    return x


def plackett_luce_subset_probs(logits: np.ndarray, k: int) -> dict[frozenset, float]:
    """Exact subset probabilities of sequential softmax sampling w/o replacement.

    Enumerates every ordered k-tuple and sums the sequential categorical
    probabilities into its unordered subset.
    """
    logits = np.asarray(logits, dtype=np.float64)
    n = logits.size
    probs: dict[frozenset, float] = {}
    for order in itertools.permutations(range(n), k):
        remaining = list(range(n))
        p = 1.0
        for idx in order:
            w = np.exp(logits[remaining] - logits[remaining].max())
            p *= w[remaining.index(idx)] / w.sum()
            remaining.remove(idx)
        key = frozenset(order)
        probs[key] = probs.get(key, 0.0) + p
    return probs


def grid_log_marginal_1anchor(prior_mean, prior_std, anchor, d_obs, sigma_fn,
                              nodes: int = 14) -> float:
    """log p(d) = log E_{z~prior}[ N(d | dist(z, anchor), sigma_fn(z)^2) ].

    Gauss-Hermite product quadrature over the 4-dim Gaussian prior.
    `sigma_fn` maps an (n, 4) batch of states to (n,) positive stddevs.
    """
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    grids = np.meshgrid(*([x] * 4), indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    wgt = np.ones(pts.shape[0])
    for i in range(4):
        wgt *= w[np.unravel_index(np.arange(pts.shape[0]), (nodes,) * 4)[i]]
    wgt /= (2 * np.pi) ** 2  # hermegauss weights integrate against e^{-x^2/2}
    z = prior_mean + prior_std * pts
    mu_d = np.linalg.norm(z[:, :2] - np.asarray(anchor), axis=1)
    sd_d = sigma_fn(z)
    like = np.exp(-0.5 * ((d_obs - mu_d) / sd_d) ** 2) / (sd_d * np.sqrt(2 * np.pi))
    return float(np.log(np.sum(wgt * like)))


def gauss_hermite_expectation(mean, std, fn, nodes: int = 14) -> float:
    """E_{z ~ N(mean, diag(std^2))}[fn(z)] over a 4-dim Gaussian."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    grids = np.meshgrid(*([x] * 4), indexing="ij")
    pts = np.stack([g.reshape(-1) for g in grids], axis=1)
    wgt = np.ones(pts.shape[0])
    for i in range(4):
        wgt *= w[np.unravel_index(np.arange(pts.shape[0]), (nodes,) * 4)[i]]
    wgt /= (2 * np.pi) ** 2
    z = mean + std * pts
    return float(np.sum(wgt * fn(z)))
