"""Shared test utilities: instance builders and independent oracles."""

from __future__ import annotations

import numpy as np
from scipy.optimize import brentq

from riemix import model as gm
from riemix import spd
from riemix.spd import TangentVector


def random_params(d: int, k: int, rng: np.random.Generator, spread: float = 2.0) -> gm.GmmParams:
    weights = rng.dirichlet(np.full(k, 5.0))
    means = spread * rng.standard_normal((k, d))
    covs = [spd.random_spd(d, rng) for _ in range(k)]
    return gm.GmmParams(weights, means, covs)


def small_instance(seed: int, d: int = 2, k: int = 2, m: int = 30, penalized: bool = True):
    """Random data + random point on the manifold, with a data-driven penalty."""
    rng = np.random.default_rng(seed)
    x = 1.5 * rng.standard_normal((m, d)) + rng.standard_normal(d)
    data = gm.augment(x)
    cfg = gm.build_penalty_config(data) if penalized else None
    params = random_params(d, k, rng)
    theta = gm.forward_transform(params)
    return theta, data, cfg, rng


def classical_log_likelihood(params: gm.GmmParams, x: np.ndarray) -> float:
    """Brute-force mixture log-likelihood via the standard Gaussian pdf."""
    from scipy.stats import multivariate_normal

    total = 0.0
    for xi in x:
        mix = sum(
            params.weights[j]
            * multivariate_normal.pdf(xi, params.means[j], params.covariances[j].entries)
            for j in range(params.n_components)
        )
        total += np.log(mix)
    return float(total)


def tangent_basis(theta) -> list[TangentVector]:
    """Metric-orthonormal basis of the tangent space at theta."""
    n = theta.block_dim
    k = theta.n_components
    raw = []
    for j in range(k):
        for r in range(n):
            for c in range(r, n):
                e = np.zeros((n, n))
                e[r, c] = e[c, r] = 1.0
                blocks = [np.zeros((n, n)) for _ in range(k)]
                blocks[j] = e
                raw.append(TangentVector(blocks, np.zeros(k - 1)))
    for r in range(k - 1):
        e = np.zeros(k - 1)
        e[r] = 1.0
        raw.append(TangentVector([np.zeros((n, n))] * k, e))
    ortho: list[TangentVector] = []
    for v in raw:
        for u in ortho:
            v = v - spd.inner_product(theta, u, v) * u
        nv = spd.norm(theta, v)
        if nv > 1e-10:
            ortho.append((1.0 / nv) * v)
    return ortho


def exact_tr_coordinates(h: np.ndarray, g: np.ndarray, delta: float) -> np.ndarray:
    """Exact Euclidean trust-region minimizer of g.s + 0.5 s.H.s, ||s|| <= delta."""
    w, q = np.linalg.eigh(h)
    gt = q.T @ g
    if w.min() > 0.0:
        s = -gt / w
        if np.linalg.norm(s) <= delta:
            return q @ s
    lam_floor = max(0.0, -float(w.min()))

    def boundary_norm(lam: float) -> float:
        dd = w + lam
        with np.errstate(divide="ignore"):
            comp = np.where(dd > 0.0, gt / dd, np.inf)
        return float(np.linalg.norm(comp))

    eps = 1e-13 * max(1.0, lam_floor)
    if boundary_norm(lam_floor + eps) < delta:
        # hard case: pad with a minimal-eigenvalue direction
        dd = w + lam_floor
        mask = dd > 1e-10
        s_part = np.where(mask, -gt / np.where(mask, dd, 1.0), 0.0)
        z = np.zeros_like(g)
        z[int(np.argmin(w))] = 1.0
        tau = np.sqrt(max(delta**2 - float(s_part @ s_part), 0.0))
        return q @ (s_part + tau * z)

    hi = lam_floor + max(1.0, float(np.linalg.norm(g)) / delta)
    while boundary_norm(hi) > delta:
        hi *= 2.0
    lam = brentq(lambda l: boundary_norm(l) - delta, lam_floor + eps, hi, xtol=1e-14)
    return q @ (-gt / (w + lam))


def dense_tr_decrease(theta, grad: TangentVector, hvp, delta: float) -> float:
    """Model decrease of the exact trust-region solution (dense oracle)."""
    basis = tangent_basis(theta)
    dim = len(basis)
    h_cols = [hvp(u) for u in basis]
    h = np.empty((dim, dim))
    g = np.empty(dim)
    for i, u in enumerate(basis):
        g[i] = spd.inner_product(theta, grad, u)
        for j in range(dim):
            h[i, j] = spd.inner_product(theta, u, h_cols[j])
    h = 0.5 * (h + h.T)
    s = exact_tr_coordinates(h, g, delta)
    return float(-(g @ s + 0.5 * s @ h @ s))
