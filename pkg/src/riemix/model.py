"""Reformulated, penalized Gaussian mixture objective.

The classical mixture parameters (weights alpha_j, means mu_j,
covariances Sigma_j in dimension d) are mapped to augmented covariance
blocks

    S_j = [[Sigma_j + mu_j mu_j^T, mu_j],
           [mu_j^T,                1   ]]

of size d+1 together with log-ratio weights eta_j = log(alpha_j/alpha_K),
and the data is augmented to y_i = (x_i, 1).  The mixture log-likelihood
then becomes a sum of zero-mean Gaussian terms over the y_i, which is the
objective all solvers in this package maximize.  A Wishart-style log
prior on each S_j and a Dirichlet-style term on eta make the objective
bounded from above.

Everything here evaluates densities in log space; unnormalized component
values are never materialized.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .spd import SpdMatrix, ThetaPoint

LOG_2PI = float(np.log(2.0 * np.pi))


class EmptyData(ValueError):
    """Zero observations."""


class DegenerateBlock(ValueError):
    """A recovered covariance block is not positive definite."""


class DegenerateData(ValueError):
    """Sample statistics too degenerate to build a penalty from."""


@dataclass(frozen=True)
class Dataset:
    """Observations plus their augmented copies y_i = (x_i, 1)."""

    points: np.ndarray
    augmented: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def augment(points) -> Dataset:
    """Append the constant-one column that turns x_i into y_i = (x_i, 1)."""
    x = np.asarray(points, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"expected an m x d matrix, got shape {x.shape}")
    if x.shape[0] == 0:
        raise EmptyData("need at least one observation")
    if x.shape[1] == 0:
        raise ValueError("need at least one feature")
    if not np.all(np.isfinite(x)):
        raise ValueError("observations must be finite")
    y = np.hstack([x, np.ones((x.shape[0], 1))])
    x = x.copy()
    x.setflags(write=False)
    y.setflags(write=False)
    return Dataset(points=x, augmented=y)


@dataclass(frozen=True)
class GmmParams:
    """Classical mixture parameters (weights, means, SPD covariances)."""

    weights: np.ndarray
    means: np.ndarray
    covariances: tuple[SpdMatrix, ...]

    def __init__(self, weights, means, covariances):
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        mu = np.atleast_2d(np.asarray(means, dtype=float))
        covs = tuple(c if isinstance(c, SpdMatrix) else SpdMatrix(c) for c in covariances)
        k = len(covs)
        if w.shape != (k,) or mu.shape[0] != k:
            raise ValueError("weights, means and covariances disagree on K")
        d = covs[0].dim
        if mu.shape[1] != d or any(c.dim != d for c in covs):
            raise ValueError("means and covariances disagree on d")
        if np.any(w <= 0.0):
            raise ValueError("weights must be strictly positive")
        if abs(float(w.sum()) - 1.0) > 1e-10:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        w = w.copy()
        mu = mu.copy()
        w.setflags(write=False)
        mu.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", covs)

    @property
    def n_components(self) -> int:
        return len(self.covariances)

    @property
    def dim(self) -> int:
        return self.covariances[0].dim


def weights_from_eta(eta: np.ndarray) -> np.ndarray:
    """Softmax of (eta_1, ..., eta_{K-1}, 0)."""
    full = np.append(np.asarray(eta, dtype=float), 0.0)
    full = full - full.max()
    e = np.exp(full)
    return e / e.sum()


def eta_from_weights(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    return np.log(w[:-1] / w[-1])


def forward_transform(params: GmmParams) -> ThetaPoint:
    """Classical parameters -> manifold point (block map above plus eta)."""
    d = params.dim
    blocks = []
    for mu, cov in zip(params.means, params.covariances):
        s = np.empty((d + 1, d + 1))
        s[:d, :d] = cov.entries + np.outer(mu, mu)
        s[:d, d] = mu
        s[d, :d] = mu
        s[d, d] = 1.0
        blocks.append(SpdMatrix(s))
    return ThetaPoint(blocks, eta_from_weights(params.weights))


def backward_transform(theta: ThetaPoint) -> GmmParams:
    """Manifold point -> classical parameters.

    The block map fixes S[d, d] = 1 only at maximizers, so intermediate
    iterates are normalized by the actual bottom-right entry to keep this
    a total map.  Raises DegenerateBlock if a recovered covariance is not
    positive definite.
    """
    d = theta.block_dim - 1
    means = []
    covs = []
    for j, s in enumerate(theta.s_blocks):
        e = s.entries
        scale = e[d, d]
        if scale <= 0.0:
            raise DegenerateBlock(f"block {j} has non-positive corner entry {scale!r}")
        mu = e[:d, d] / scale
        sigma = e[:d, :d] / scale - np.outer(mu, mu)
        try:
            covs.append(SpdMatrix(sigma))
        except Exception as exc:
            raise DegenerateBlock(f"block {j} yields a non-PD covariance") from exc
        means.append(mu)
    return GmmParams(weights_from_eta(theta.eta), np.array(means), covs)


def log_component_density(y, s: SpdMatrix) -> float:
    """log q(y; S) for the rescaled zero-mean Gaussian on augmented points.

    q(y; S) = sqrt(2 pi) e^(1/2) N(y; 0, S); with S the block image of
    (mu, Sigma) and y = (x, 1), q(y; S) equals the ordinary Gaussian
    density N(x; mu, Sigma).
    """
    y = np.asarray(y, dtype=float)
    d = s.dim - 1
    quad = float(y @ s.solve(y))
    return 0.5 * (1.0 - quad) - 0.5 * d * LOG_2PI - 0.5 * s.log_det()


def component_density(y, s: SpdMatrix) -> float:
    return float(np.exp(log_component_density(y, s)))


def log_density_matrix(theta: ThetaPoint, data: Dataset) -> np.ndarray:
    """(m, K) matrix of log h_ij = log alpha_j + log q(y_i; S_j)."""
    y = data.augmented
    d = data.dim
    out = np.empty((y.shape[0], theta.n_components))
    log_alpha = np.log(weights_from_eta(theta.eta))
    for j, s in enumerate(theta.s_blocks):
        q = s.solve(y.T)
        quad = np.einsum("ij,ij->j", y.T, q)
        out[:, j] = log_alpha[j] + 0.5 * (1.0 - quad) - 0.5 * d * LOG_2PI - 0.5 * s.log_det()
    return out


@dataclass(frozen=True)
class Responsibilities:
    """Posterior component probabilities f and per-row log normalizers."""

    f: np.ndarray
    row_logsum: np.ndarray


def responsibilities(theta: ThetaPoint, data: Dataset) -> Responsibilities:
    log_h = log_density_matrix(theta, data)
    row_logsum = logsumexp(log_h, axis=1)
    f = np.exp(log_h - row_logsum[:, None])
    return Responsibilities(f=f, row_logsum=row_logsum)


def objective(theta: ThetaPoint, data: Dataset) -> float:
    """Reformulated log-likelihood sum_i log sum_j h_ij."""
    return float(logsumexp(log_density_matrix(theta, data), axis=1).sum())


@dataclass(frozen=True)
class PenaltyConfig:
    """Hyperparameters of the boundedness penalty.

    The matrix penalty on each block is

        psi(S, Psi) = -(rho/2) log det S - (beta/2) tr(Psi S^-1)

    with Psi assembled from the location/scatter statistics (lambda_vec,
    lambda_mat) as

        Psi = [[(gamma/beta) Lambda + kappa lambda lambda^T, kappa lambda],
               [kappa lambda^T,                               kappa      ]]

    and rho tied to the other scalars by rho = gamma (d + nu + 1) + beta,
    which keeps the maximizer correspondence of the reformulation intact.
    The weight penalty is phi(eta, zeta), see penalty_weight_term.

    A disabled penalty is expressed as rho = beta = gamma = zeta = 0 with
    a placeholder SPD psi_matrix (the block identity is only enforced
    when beta != 0, since Psi enters the objective scaled by beta).
    """

    psi_matrix: SpdMatrix
    rho: float
    beta: float
    gamma: float
    kappa: float
    nu: float
    lambda_vec: np.ndarray
    lambda_mat: np.ndarray
    zeta_weight: float

    def __init__(self, psi_matrix, rho, beta, gamma, kappa, nu, lambda_vec, lambda_mat, zeta_weight):
        psi = psi_matrix if isinstance(psi_matrix, SpdMatrix) else SpdMatrix(psi_matrix)
        d = psi.dim - 1
        lam = np.atleast_1d(np.asarray(lambda_vec, dtype=float))
        lam_mat = np.asarray(lambda_mat, dtype=float)
        if lam.shape != (d,) or lam_mat.shape != (d, d):
            raise ValueError("lambda_vec / lambda_mat shapes disagree with psi_matrix")
        if zeta_weight < 0.0:
            raise ValueError("zeta_weight must be nonnegative")
        if abs(rho - (gamma * (d + nu + 1.0) + beta)) > 1e-12 * max(1.0, abs(rho)):
            raise ValueError("rho must equal gamma*(d + nu + 1) + beta")
        if beta != 0.0:
            expected = assemble_psi(beta, gamma, kappa, lam, lam_mat)
            if not np.allclose(psi.entries, expected, rtol=1e-12, atol=1e-12):
                raise ValueError("psi_matrix does not match its block formula")
        lam = lam.copy()
        lam_mat = lam_mat.copy()
        lam.setflags(write=False)
        lam_mat.setflags(write=False)
        object.__setattr__(self, "psi_matrix", psi)
        object.__setattr__(self, "rho", float(rho))
        object.__setattr__(self, "beta", float(beta))
        object.__setattr__(self, "gamma", float(gamma))
        object.__setattr__(self, "kappa", float(kappa))
        object.__setattr__(self, "nu", float(nu))
        object.__setattr__(self, "lambda_vec", lam)
        object.__setattr__(self, "lambda_mat", lam_mat)
        object.__setattr__(self, "zeta_weight", float(zeta_weight))

    @property
    def dim(self) -> int:
        return self.psi_matrix.dim - 1


def assemble_psi(beta, gamma, kappa, lambda_vec, lambda_mat) -> np.ndarray:
    d = lambda_vec.shape[0]
    psi = np.empty((d + 1, d + 1))
    psi[:d, :d] = (gamma / beta) * lambda_mat + kappa * np.outer(lambda_vec, lambda_vec)
    psi[:d, d] = kappa * lambda_vec
    psi[d, :d] = kappa * lambda_vec
    psi[d, d] = kappa
    return psi


def build_penalty_config(
    data: Dataset,
    *,
    gamma: float = 0.01,
    beta: float = 0.01,
    kappa: float | None = None,
    nu: float | None = None,
    zeta: float = 1.0,
    lambda_vec=None,
    lambda_mat=None,
    full_covariance: bool = False,
) -> PenaltyConfig:
    """Penalty built from sample statistics of the data.

    lambda_vec defaults to the sample mean and lambda_mat to the diagonal
    of the sample covariance (the diagonal keeps Psi well-conditioned for
    small m; pass full_covariance=True for the full matrix).  The scalar
    defaults are weak relative to the m likelihood terms but enough for
    boundedness; every value can be overridden.

    kappa defaults to rho / beta = 1 + gamma (d + nu + 1) / beta.  At a
    stationary point each block satisfies
    S = (sum_i f_i y_i y_i^T + beta Psi) / (N + rho), whose corner entry
    is (N + beta kappa) / (N + rho); the default pins that to exactly 1,
    so the penalized maximizers keep the classical-parameter block form
    and coincide with the fixed points of the penalized M-step.
    """
    x = data.points
    if data.n_samples < 2:
        raise ValueError("need at least two observations for sample statistics")
    d = data.dim
    if nu is None:
        nu = float(d)
    if kappa is None:
        kappa = 1.0 + gamma * (d + nu + 1.0) / beta
    if lambda_vec is None:
        lambda_vec = x.mean(axis=0)
    lambda_vec = np.asarray(lambda_vec, dtype=float)
    if lambda_mat is None:
        cov = np.cov(x, rowvar=False, ddof=1).reshape(d, d)
        if np.any(np.diag(cov) <= 0.0):
            raise DegenerateData("a zero-variance column cannot seed the penalty")
        lambda_mat = cov if full_covariance else np.diag(np.diag(cov))
    lambda_mat = np.asarray(lambda_mat, dtype=float)
    rho = gamma * (d + nu + 1.0) + beta
    psi = SpdMatrix(assemble_psi(beta, gamma, kappa, lambda_vec, lambda_mat))
    return PenaltyConfig(psi, rho, beta, gamma, kappa, nu, lambda_vec, lambda_mat, zeta)


def zero_penalty(dim: int) -> PenaltyConfig:
    """Disabled penalty for dimension-d data: every term evaluates to zero."""
    return PenaltyConfig(
        psi_matrix=SpdMatrix(np.eye(dim + 1)),
        rho=0.0,
        beta=0.0,
        gamma=0.0,
        kappa=0.0,
        nu=float(dim),
        lambda_vec=np.zeros(dim),
        lambda_mat=np.zeros((dim, dim)),
        zeta_weight=0.0,
    )


def penalty_matrix_term(s: SpdMatrix, cfg: PenaltyConfig) -> float:
    """psi(S, Psi) = -(rho/2) log det S - (beta/2) tr(Psi S^-1)."""
    if cfg.rho == 0.0 and cfg.beta == 0.0:
        return 0.0
    trace = float(np.sum(cfg.psi_matrix.entries * s.inverse()))
    return -0.5 * cfg.rho * s.log_det() - 0.5 * cfg.beta * trace


def penalty_weight_term(eta: np.ndarray, zeta_weight: float) -> float:
    """phi(eta, zeta) = zeta (sum_j eta_j - K log sum_k exp(eta_k)), eta_K = 0."""
    if zeta_weight == 0.0:
        return 0.0
    eta = np.asarray(eta, dtype=float)
    k = eta.shape[0] + 1
    full = np.append(eta, 0.0)
    return float(zeta_weight * (eta.sum() - k * logsumexp(full)))


def penalty_total(theta: ThetaPoint, cfg: PenaltyConfig) -> float:
    total = penalty_weight_term(theta.eta, cfg.zeta_weight)
    for s in theta.s_blocks:
        total += penalty_matrix_term(s, cfg)
    return total


def penalized_objective(theta: ThetaPoint, data: Dataset | None, cfg: PenaltyConfig | None) -> float:
    """Full objective: data term plus all penalties.

    data=None evaluates the penalty alone; cfg=None the data term alone.
    """
    value = objective(theta, data) if data is not None else 0.0
    if cfg is not None:
        value += penalty_total(theta, cfg)
    return value
