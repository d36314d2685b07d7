"""k-means++ initialization and the (penalized) EM baseline.

The E-step reuses the same responsibility computation as the Riemannian
solver (through the forward-transformed point), so both solvers score
iterates identically.  With map_mode on, the M-step maximizes the
penalty-augmented surrogate in closed form:

    alpha_j  = (N_j + zeta) / (m + K zeta)
    mu_j     = (sum_i f_ij x_i + kappa beta lambda) / (N_j + kappa beta)
    Sigma_j  = (scatter_j + gamma Lambda
                + kappa beta (mu_j - lambda)(mu_j - lambda)^T) / (N_j + rho)

with N_j = sum_i f_ij and scatter_j the responsibility-weighted scatter
about mu_j.  These are the stationary conditions of the same penalized
objective the trust-region solver maximizes, so the penalized average
log-likelihood is nondecreasing across iterations.  With a disabled
penalty the updates reduce to plain EM.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import model as gm
from .model import Dataset, GmmParams, PenaltyConfig, forward_transform
from .rtr import FitReport, IterRecord
from .spd import SpdMatrix


class TooFewPoints(ValueError):
    """Fewer observations than requested components."""


class DegenerateComponent(RuntimeError):
    """A component lost essentially all responsibility mass."""


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 1500
    all_diff_tol: float = 1e-10
    map_mode: bool = True
    cov_floor: float | None = None  # None: 1e-8 * tr(sample cov) / d

    def __post_init__(self):
        if self.all_diff_tol <= 0.0:
            raise ValueError("all_diff_tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass(frozen=True)
class KppConfig:
    seed: int = 0
    n_candidates: int = 1

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ValueError("n_candidates must be positive")


def _floored_cov(scatter: np.ndarray, floor: float) -> SpdMatrix | None:
    try:
        return SpdMatrix(scatter + floor * np.eye(scatter.shape[0]))
    except Exception:
        return None


def kmeanspp_init(data: Dataset, n_components: int, cfg: KppConfig | None = None) -> GmmParams:
    """Squared-distance-weighted seeding, one Lloyd assignment, moment estimates.

    Per-cluster covariances are the assigned points' scatter floored to
    SPD; clusters with fewer than two points fall back to the shared data
    covariance.  Deterministic for a fixed seed.
    """
    cfg = cfg if cfg is not None else KppConfig()
    x = data.points
    m, d = x.shape
    k = n_components
    if m < k:
        raise TooFewPoints(f"{m} observations cannot seed {k} components")
    rng = np.random.default_rng(cfg.seed)

    seed_idx = [int(rng.integers(m))]
    dist2 = np.sum((x - x[seed_idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = float(dist2.sum())
        if total <= 0.0:
            # duplicates exhausted the potential; take any unchosen point
            remaining = np.setdiff1d(np.arange(m), seed_idx)
            choice = int(remaining[rng.integers(remaining.size)])
        else:
            cands = rng.choice(m, size=cfg.n_candidates, p=dist2 / total)
            best, best_pot = None, np.inf
            for c in cands:
                pot = float(np.minimum(dist2, np.sum((x - x[c]) ** 2, axis=1)).sum())
                if pot < best_pot:
                    best, best_pot = int(c), pot
            choice = best
        seed_idx.append(choice)
        dist2 = np.minimum(dist2, np.sum((x - x[choice]) ** 2, axis=1))

    seeds = x[seed_idx]
    d2 = ((x[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)

    shared = np.atleast_2d(np.cov(x, rowvar=False, ddof=0))
    floor = 1e-8 * float(np.trace(shared)) / d
    shared_spd = SpdMatrix(shared + max(floor, 1e-12) * np.eye(d))

    counts = np.bincount(labels, minlength=k).astype(float)
    means = np.empty((k, d))
    covs = []
    for j in range(k):
        members = x[labels == j]
        if members.shape[0] == 0:
            means[j] = seeds[j]
            covs.append(shared_spd)
            continue
        means[j] = members.mean(axis=0)
        if members.shape[0] < 2:
            covs.append(shared_spd)
            continue
        centered = members - means[j]
        cov = _floored_cov(centered.T @ centered / members.shape[0], max(floor, 1e-12))
        covs.append(cov if cov is not None else shared_spd)

    if np.any(counts == 0):
        weights = (counts + 1.0) / (m + k)  # degenerate-cluster guard
    else:
        weights = counts / m
    return GmmParams(weights, means, covs)


def fit_em(
    data: Dataset,
    init: GmmParams,
    cfg: EmConfig | None = None,
    penalty: PenaltyConfig | None = None,
) -> FitReport:
    """Expectation-maximization from init; MAP updates unless map_mode is off."""
    cfg = cfg if cfg is not None else EmConfig()
    start = time.perf_counter()
    x = data.points
    m, d = x.shape
    k = init.n_components
    params = init
    theta = forward_transform(params)
    obj = gm.penalized_objective(theta, data, penalty)

    map_on = cfg.map_mode and penalty is not None
    if map_on:
        zeta = penalty.zeta_weight
        rho = penalty.rho
        kb = penalty.kappa * penalty.beta
        lam = penalty.lambda_vec
        prior_scatter = penalty.gamma * penalty.lambda_mat
    floor = cfg.cov_floor
    if floor is None:
        floor = 1e-8 * float(np.trace(np.atleast_2d(np.cov(x, rowvar=False, ddof=0)))) / d

    trace: list[IterRecord] = []
    termination = "max_iters"
    n_iters = 0
    for t in range(cfg.max_iters):
        resp = gm.responsibilities(theta, data)
        f = resp.f
        counts = f.sum(axis=0)
        if not map_on and np.any(counts < 1e-12):
            raise DegenerateComponent(f"component mass collapsed at iteration {t}")

        means = np.empty((k, d))
        covs = []
        if map_on:
            weights = (counts + zeta) / (m + k * zeta)
            for j in range(k):
                mu = (f[:, j] @ x + kb * lam) / (counts[j] + kb)
                centered = x - mu
                scatter = centered.T @ (f[:, j : j + 1] * centered)
                diff = mu - lam
                sigma = (scatter + prior_scatter + kb * np.outer(diff, diff)) / (counts[j] + rho)
                means[j] = mu
                cov = _floored_cov(sigma, 0.0)
                if cov is None:
                    cov = _floored_cov(sigma, floor)
                if cov is None:
                    raise DegenerateComponent(f"component {j} covariance not PD at iteration {t}")
                covs.append(cov)
        else:
            weights = counts / m
            for j in range(k):
                mu = f[:, j] @ x / counts[j]
                centered = x - mu
                sigma = centered.T @ (f[:, j : j + 1] * centered) / counts[j]
                means[j] = mu
                cov = _floored_cov(sigma, 0.0)
                if cov is None:
                    cov = _floored_cov(sigma, floor)
                if cov is None:
                    raise DegenerateComponent(f"component {j} covariance not PD at iteration {t}")
                covs.append(cov)

        params = GmmParams(weights, means, covs)
        theta = forward_transform(params)
        obj_new = gm.penalized_objective(theta, data, penalty)
        n_iters = t + 1
        trace.append(IterRecord(t=t, objective=obj_new, accepted=True))
        if abs(obj_new - obj) / m < cfg.all_diff_tol:
            obj = obj_new
            termination = "all_diff"
            break
        obj = obj_new

    return FitReport(
        params=params,
        theta=theta,
        trace=tuple(trace),
        wall_time_s=time.perf_counter() - start,
        termination=termination,
        solver="em",
        n_iterations=n_iters,
        n_accepted=n_iters,
        final_objective=obj,
        final_all=gm.objective(theta, data) / m,
        final_all_penalized=obj / m,
        final_grad_norm=None,
    )
