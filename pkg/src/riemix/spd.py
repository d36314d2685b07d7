"""Dense SPD linear algebra and the geometry of the product manifold.

The solvers optimize over points ``theta = ((S_1, ..., S_K), eta)`` where
each ``S_j`` is a symmetric positive definite matrix of size (d+1) and
``eta`` is a free Euclidean vector of length K-1.  Tangent vectors carry
one symmetric matrix per block plus an eta vector.  The metric on each
SPD block is the affine-invariant one,

    <xi, chi>_S = tr(S^-1 xi S^-1 chi),

and the eta part is Euclidean; the total inner product is the sum over
blocks.  The retraction is the geodesic exponential map
``S -> S exp(S^-1 xi)``, evaluated in the congruence form
``S^(1/2) exp(S^(-1/2) xi S^(-1/2)) S^(1/2)`` so the result is symmetric
by construction and positive definite for every symmetric tangent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg


class NotPositiveDefinite(ValueError):
    """Cholesky factorization failed: the matrix is not strictly PD."""


def _as_square(entries) -> np.ndarray:
    m = np.asarray(entries, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if m.shape[0] < 1:
        raise ValueError("matrix must be at least 1x1")
    return m


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def cholesky(m) -> np.ndarray:
    """Lower-triangular factor L with L @ L.T = m.

    Raises NotPositiveDefinite iff some pivot is non-positive, which is
    the definiteness test used throughout: failure signals the boundary
    of the SPD cone.
    """
    a = _as_square(m)
    try:
        return scipy.linalg.cholesky(a, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc


class SpdMatrix:
    """Symmetric positive definite matrix with a cached Cholesky factor.

    Entries are symmetrized on construction (round-off in e.g. Hessian
    assembly makes exact symmetry too strict a requirement) and the
    Cholesky factor is computed eagerly: it is the definiteness witness,
    so construction fails for anything outside the open SPD cone.
    Instances are immutable and safe to share across threads.
    """

    __slots__ = ("entries", "chol")

    def __init__(self, entries):
        m = _symmetrize(_as_square(entries))
        L = cholesky(m)
        m.setflags(write=False)
        L.setflags(write=False)
        self.entries = m
        self.chol = L

    @classmethod
    def _from_cholesky(cls, lower: np.ndarray) -> "SpdMatrix":
        """Assemble from a known lower-triangular factor with positive diagonal.

        Used where the factor is available by construction (retraction);
        the factor itself is the definiteness witness.
        """
        if np.any(np.diag(lower) <= 0.0) or not np.all(np.isfinite(lower)):
            raise NotPositiveDefinite("factor has non-positive or non-finite pivots")
        obj = cls.__new__(cls)
        m = _symmetrize(lower @ lower.T)
        lower = np.ascontiguousarray(lower)
        m.setflags(write=False)
        lower.setflags(write=False)
        obj.entries = m
        obj.chol = lower
        return obj

    @property
    def dim(self) -> int:
        return self.entries.shape[0]

    def solve(self, b) -> np.ndarray:
        """Solve self @ x = b via the cached Cholesky factor."""
        return scipy.linalg.cho_solve((self.chol, True), np.asarray(b, dtype=float))

    def inverse(self) -> np.ndarray:
        return self.solve(np.eye(self.dim))

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def __repr__(self) -> str:
        return f"SpdMatrix(dim={self.dim})"


@dataclass(frozen=True)
class SymMatrix:
    """Symmetric matrix, the tangent object of one SPD block."""

    entries: np.ndarray

    def __init__(self, entries):
        m = _symmetrize(_as_square(entries))
        m.setflags(write=False)
        object.__setattr__(self, "entries", m)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


def log_det(m: SpdMatrix) -> float:
    """log det(m), computed as 2 * sum(log diag(chol))."""
    return m.log_det()


def spd_solve(m: SpdMatrix, b) -> np.ndarray:
    """m^-1 @ b through the cached factorization (never forms m^-1 b densely)."""
    return m.solve(b)


def _expm_sym(a: np.ndarray) -> np.ndarray:
    """exp of a symmetric matrix via eigendecomposition; exactly symmetric."""
    w, v = scipy.linalg.eigh(a)
    return _symmetrize((v * np.exp(w)) @ v.T)


def sym_expm(m) -> SpdMatrix:
    """Matrix exponential of a symmetric matrix; the result is SPD.

    Uses a symmetric eigendecomposition rather than scaling-and-squaring:
    blocks are small and the eigenvector route keeps the output symmetric
    to the last bit.
    """
    a = m.entries if isinstance(m, SymMatrix) else _symmetrize(_as_square(m))
    return SpdMatrix(_expm_sym(a))


@dataclass(frozen=True)
class ThetaPoint:
    """Point ((S_1, ..., S_K), eta) on the product manifold.

    The last mixture component's eta is fixed at zero and not stored, so
    ``eta`` has length K-1 (empty for K=1).
    """

    s_blocks: tuple[SpdMatrix, ...]
    eta: np.ndarray

    def __init__(self, s_blocks, eta):
        blocks = tuple(s_blocks)
        if not blocks:
            raise ValueError("need at least one component block")
        dim = blocks[0].dim
        if any(b.dim != dim for b in blocks):
            raise ValueError("all blocks must share one dimension")
        e = np.atleast_1d(np.asarray(eta, dtype=float))
        if e.shape != (len(blocks) - 1,):
            raise ValueError(f"eta must have length K-1={len(blocks) - 1}, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("eta must be finite")
        e.setflags(write=False)
        object.__setattr__(self, "s_blocks", blocks)
        object.__setattr__(self, "eta", e)

    @property
    def n_components(self) -> int:
        return len(self.s_blocks)

    @property
    def block_dim(self) -> int:
        return self.s_blocks[0].dim


@dataclass(frozen=True)
class TangentVector:
    """Tangent vector ((xi_S_1, ..., xi_S_K), xi_eta) at some ThetaPoint."""

    s_blocks: tuple[SymMatrix, ...]
    eta: np.ndarray

    def __init__(self, s_blocks, eta):
        blocks = tuple(b if isinstance(b, SymMatrix) else SymMatrix(b) for b in s_blocks)
        if not blocks:
            raise ValueError("need at least one block")
        e = np.atleast_1d(np.asarray(eta, dtype=float))
        if e.shape != (len(blocks) - 1,):
            raise ValueError(f"eta must have length K-1={len(blocks) - 1}, got {e.shape}")
        e.setflags(write=False)
        object.__setattr__(self, "s_blocks", blocks)
        object.__setattr__(self, "eta", e)

    @property
    def n_components(self) -> int:
        return len(self.s_blocks)

    @classmethod
    def zero(cls, theta: ThetaPoint) -> "TangentVector":
        n = theta.block_dim
        return cls(
            [SymMatrix(np.zeros((n, n))) for _ in theta.s_blocks],
            np.zeros(theta.n_components - 1),
        )

    def __add__(self, other: "TangentVector") -> "TangentVector":
        return TangentVector(
            [SymMatrix(a.entries + b.entries) for a, b in zip(self.s_blocks, other.s_blocks)],
            self.eta + other.eta,
        )

    def __sub__(self, other: "TangentVector") -> "TangentVector":
        return TangentVector(
            [SymMatrix(a.entries - b.entries) for a, b in zip(self.s_blocks, other.s_blocks)],
            self.eta - other.eta,
        )

    def __mul__(self, scalar: float) -> "TangentVector":
        c = float(scalar)
        return TangentVector([SymMatrix(c * b.entries) for b in self.s_blocks], c * self.eta)

    __rmul__ = __mul__

    def __neg__(self) -> "TangentVector":
        return self * -1.0


def shapes_match(theta: ThetaPoint, xi: TangentVector) -> bool:
    return (
        xi.n_components == theta.n_components
        and all(b.dim == theta.block_dim for b in xi.s_blocks)
        and xi.eta.shape == theta.eta.shape
    )


def tangent_dimension(theta: ThetaPoint) -> int:
    """Dimension of the tangent space: K * n(n+1)/2 + (K-1)."""
    n = theta.block_dim
    return theta.n_components * (n * (n + 1)) // 2 + theta.n_components - 1


def inner_product(theta: ThetaPoint, xi: TangentVector, chi: TangentVector) -> float:
    """Riemannian inner product: sum_j tr(S_j^-1 xi_j S_j^-1 chi_j) + xi_eta . chi_eta."""
    total = float(xi.eta @ chi.eta)
    for s, x, c in zip(theta.s_blocks, xi.s_blocks, chi.s_blocks):
        a = s.solve(x.entries)
        b = s.solve(c.entries)
        total += float(np.sum(a * b.T))
    return total


def norm(theta: ThetaPoint, xi: TangentVector) -> float:
    # the metric is positive definite, but round-off can drive tiny
    # quadratic forms a hair below zero
    return float(np.sqrt(max(inner_product(theta, xi, xi), 0.0)))


def retract(theta: ThetaPoint, xi: TangentVector) -> ThetaPoint:
    """Geodesic retraction: blocks S_j exp(S_j^-1 xi_j), eta + xi_eta.

    Each block is evaluated in the symmetric-congruence form
    S^(1/2) exp(W) S^(1/2) with W = S^(-1/2) xi S^(-1/2), equal to
    S exp(S^-1 xi) in exact arithmetic, with S^(1/2) from a symmetric
    eigendecomposition.  The product is realized as A A^T with
    A = S^(1/2) exp(W/2) and its Cholesky factor is taken from a QR of
    A^T, so the result stays inside the SPD cone for tangent steps of any
    size that does not underflow the exponential.
    """
    blocks = []
    for s, x in zip(theta.s_blocks, xi.s_blocks):
        w, v = scipy.linalg.eigh(s.entries)
        sqrt_w = np.sqrt(w)
        root = (v * sqrt_w) @ v.T
        inv_root = (v / sqrt_w) @ v.T
        inner = _symmetrize(inv_root @ x.entries @ inv_root)
        ww, vv = scipy.linalg.eigh(inner)
        half = root @ (vv * np.exp(0.5 * ww)) @ vv.T  # S^(1/2) exp(W/2)
        _, r = np.linalg.qr(half.T)
        signs = np.sign(np.diag(r))
        if np.any(signs == 0.0):
            raise NotPositiveDefinite("retraction step underflowed the SPD cone")
        blocks.append(SpdMatrix._from_cholesky((signs[:, None] * r).T))
    return ThetaPoint(blocks, theta.eta + xi.eta)


def spd_geodesic_distance(a: SpdMatrix, b: SpdMatrix) -> float:
    """Affine-invariant distance ||log(A^(-1/2) B A^(-1/2))||_F.

    Computed from the generalized eigenvalues of (B, A), which are the
    eigenvalues of A^(-1/2) B A^(-1/2).
    """
    if a.dim != b.dim:
        raise ValueError("matrices must share a dimension")
    w = scipy.linalg.eigh(b.entries, a.entries, eigvals_only=True)
    return float(np.sqrt(np.sum(np.log(w) ** 2)))


def random_symmetric(dim: int, rng: np.random.Generator, scale: float = 1.0) -> SymMatrix:
    m = rng.standard_normal((dim, dim))
    return SymMatrix(scale * _symmetrize(m))


def random_spd(dim: int, rng: np.random.Generator) -> SpdMatrix:
    a = rng.standard_normal((dim, dim))
    return SpdMatrix(a @ a.T + dim * np.eye(dim))


def random_tangent(
    theta: ThetaPoint, rng: np.random.Generator, unit: bool = True
) -> TangentVector:
    """Random tangent vector at theta; normalized to metric norm 1 by default."""
    xi = TangentVector(
        [random_symmetric(theta.block_dim, rng) for _ in theta.s_blocks],
        rng.standard_normal(theta.n_components - 1),
    )
    if unit:
        xi = xi * (1.0 / norm(theta, xi))
    return xi
