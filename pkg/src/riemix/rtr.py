"""Riemannian Newton trust-region solver.

The outer loop minimizes f = -(penalized objective) over the product
manifold: at each iterate it builds the quadratic model

    m(s) = f(theta) + <grad f, s> + 1/2 <H[s], s>,

solves it approximately inside the ball ||s|| <= Delta_t with a truncated
conjugate gradient method, and accepts the retracted candidate when the
actual-to-predicted decrease ratio rho_t clears the rejection threshold.
The radius shrinks by tau1 when rho_t < omega1 and grows by tau2 (capped
at Delta_bar) when rho_t > omega2 and the step hit the ball boundary.

tCG terminates on the residual test ||r_k|| <= ||r_0|| min(||r_0||^delta,
kappa), on negative curvature, on crossing the trust-region boundary, or
on an iteration cap; in the first boundary/curvature cases the step is
extended to the ball along the current direction.  An inverse-Hessian
approximation assembled from the previous subproblem's CG pairs by the
LBFGS two-loop recursion can precondition the solve; successive systems
vary slowly enough that the pairs are reused with their coordinates
reinterpreted at the new point rather than parallel-transported.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import model as gm
from . import spd
from .derivatives import build_workspace, hessian_vector_product, riemannian_gradient
from .model import Dataset, GmmParams, PenaltyConfig, forward_transform
from .spd import TangentVector, ThetaPoint


class ZeroGradient(ValueError):
    """No descent information to size the initial radius from."""


class InitializationError(ValueError):
    """The initial parameters cannot be placed on the manifold."""


@dataclass(frozen=True)
class TcgConfig:
    """Inner-solver settings.

    delta_exponent is the superlinear termination exponent (must stay
    below 1 for the superlinear local rate), kappa the linear-phase
    residual fraction.  max_inner defaults to the tangent-space dimension.

    subspace_refinement controls what happens with the conjugate
    directions gathered before termination: "off" returns the classic
    truncated step, "exit" (default) additionally solves the subproblem
    exactly over their span and returns the better step, and "full"
    keeps running the direction recurrence (without stepping) up to
    max_inner before that solve, which recovers the exact subproblem
    solution once the directions span the tangent space.  Termination
    reasons are unaffected.
    """

    delta_exponent: float = 0.9
    kappa: float = 0.1
    max_inner: int | None = None
    precondition: bool = True
    lbfgs_memory: int = 10
    subspace_refinement: str = "exit"

    def __post_init__(self):
        if not 0.0 < self.delta_exponent <= 1.0:
            raise ValueError("delta_exponent must lie in (0, 1]")
        if not 0.0 < self.kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")
        if self.max_inner is not None and self.max_inner < 1:
            raise ValueError("max_inner must be positive")
        if self.lbfgs_memory < 1:
            raise ValueError("lbfgs_memory must be positive")
        if self.subspace_refinement not in ("off", "exit", "full"):
            raise ValueError("subspace_refinement must be off, exit or full")


@dataclass(frozen=True)
class TrConfig:
    """Outer-loop settings; defaults follow the usual trust-region choices.

    delta0=None sizes the initial radius from the model along steepest
    descent; delta_max=None caps the radius at ten times the initial one.
    rho_prime must be strictly positive so accepted steps strictly
    improve the objective.  Termination: average-log-likelihood change
    below all_diff_tol on an accepted step, gradient norm below grad_tol
    (0 disables), or max_iters.
    """

    delta0: float | None = None
    delta_max: float | None = None
    rho_prime: float = 0.1
    omega1: float = 0.25
    omega2: float = 0.75
    tau1: float = 0.25
    tau2: float = 2.0
    max_iters: int = 1500
    grad_tol: float = 0.0
    all_diff_tol: float = 1e-10
    reset_precond_on_reject: bool = False
    tcg: TcgConfig = field(default_factory=TcgConfig)

    def __post_init__(self):
        if not 0.0 < self.rho_prime < 0.25:
            raise ValueError("rho_prime must lie in (0, 1/4)")
        if not 0.0 <= self.omega1 <= self.omega2 <= 1.0:
            raise ValueError("need 0 <= omega1 <= omega2 <= 1")
        if not 0.0 < self.tau1 <= 0.25:
            raise ValueError("tau1 must lie in (0, 1/4]")
        if self.tau2 <= 1.0:
            raise ValueError("tau2 must exceed 1")
        if self.delta0 is not None and self.delta0 <= 0.0:
            raise ValueError("delta0 must be positive")
        if self.delta_max is not None and self.delta_max <= 0.0:
            raise ValueError("delta_max must be positive")
        if self.max_iters < 0 or self.all_diff_tol < 0 or self.grad_tol < 0:
            raise ValueError("iteration and tolerance settings must be nonnegative")


@dataclass(frozen=True)
class IterRecord:
    """One outer iteration of either solver.

    The trust-region fields are None in records produced by EM.
    min_weight and block_norm_ratio are convergence-theory diagnostics:
    the smallest mixing weight and max_j ||S_j||_F / ||Psi||_F at the
    iterate, the two quantities whose boundedness the global-convergence
    assumptions require.
    """

    t: int
    objective: float
    accepted: bool
    grad_norm: float | None = None
    delta: float | None = None
    rho: float | None = None
    step_norm: float | None = None
    tcg_iterations: int | None = None
    tcg_stop_reason: str | None = None
    min_weight: float | None = None
    block_norm_ratio: float | None = None


@dataclass(frozen=True)
class FitReport:
    """Final model plus the per-iteration trace of the fit."""

    params: GmmParams
    theta: ThetaPoint
    trace: tuple[IterRecord, ...]
    wall_time_s: float
    termination: str
    solver: str
    n_iterations: int
    n_accepted: int
    final_objective: float
    final_all: float
    final_all_penalized: float
    final_grad_norm: float | None


@dataclass
class TcgResult:
    step: TangentVector
    stop_reason: str
    iterations: int
    model_decrease: float
    pairs: list[tuple[TangentVector, TangentVector]]
    cauchy_fallback: bool


def _boundary_tau(theta: ThetaPoint, s: TangentVector, p: TangentVector, delta: float) -> float:
    """Positive root of ||s + tau p||_theta = delta (requires ||s|| <= delta)."""
    a = spd.inner_product(theta, p, p)
    b = 2.0 * spd.inner_product(theta, s, p)
    c = spd.inner_product(theta, s, s) - delta * delta
    disc = max(b * b - 4.0 * a * c, 0.0)
    return (-b + np.sqrt(disc)) / (2.0 * a)


def _dense_tr_coordinates(h: np.ndarray, g: np.ndarray, delta: float) -> np.ndarray:
    """Exact minimizer of g.c + 0.5 c.H.c over ||c|| <= delta (coordinates).

    Eigendecomposition plus a bisection on the boundary multiplier; the
    hard case pads with a minimal-eigenvalue direction.
    """
    w, q = np.linalg.eigh(h)
    gt = q.T @ g
    if w[0] > 0.0:
        c = -gt / w
        if np.linalg.norm(c) <= delta:
            return q @ c

    lam_floor = max(0.0, -float(w[0]))

    def radius(lam: float) -> float:
        dd = w + lam
        with np.errstate(divide="ignore"):
            comp = np.where(dd > 0.0, gt / dd, np.inf)
        return float(np.linalg.norm(comp))

    eps = 1e-13 * max(1.0, lam_floor)
    if radius(lam_floor + eps) < delta:
        dd = w + lam_floor
        usable = dd > 1e-12 * max(1.0, lam_floor)
        c = np.where(usable, -gt / np.where(usable, dd, 1.0), 0.0)
        pad = np.zeros_like(g)
        pad[0] = 1.0
        c = c + np.sqrt(max(delta**2 - float(c @ c), 0.0)) * pad
        return q @ c

    lo, hi = lam_floor + eps, lam_floor + max(1.0, float(np.linalg.norm(g)) / delta)
    while radius(hi) > delta:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if radius(mid) > delta:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return q @ (-gt / (w + hi))


def _subspace_step(theta, grad, dirs, delta: float):
    """Exact subproblem solve over span of the gathered (p, H p) pairs.

    Directions are normalized before projecting so the rank filter is
    scale-free.  Returns (step, model decrease) or None when the span is
    numerically empty.
    """
    basis = []
    for p, hp in dirs:
        nn = spd.norm(theta, p)
        if nn > 0.0:
            basis.append(((1.0 / nn) * p, (1.0 / nn) * hp))
    if not basis:
        return None
    n = len(basis)
    gram = np.empty((n, n))
    hmat = np.empty((n, n))
    gvec = np.empty(n)
    for i, (pi, _) in enumerate(basis):
        gvec[i] = spd.inner_product(theta, grad, pi)
        for j, (pj, hpj) in enumerate(basis):
            gram[i, j] = spd.inner_product(theta, pi, pj)
            hmat[i, j] = spd.inner_product(theta, pi, hpj)
    gram = 0.5 * (gram + gram.T)
    hmat = 0.5 * (hmat + hmat.T)
    w, v = np.linalg.eigh(gram)
    keep = w > 1e-12 * w.max()
    if not np.any(keep):
        return None
    t = v[:, keep] / np.sqrt(w[keep])
    h2 = t.T @ hmat @ t
    h2 = 0.5 * (h2 + h2.T)
    g2 = t.T @ gvec
    c2 = _dense_tr_coordinates(h2, g2, delta)
    coeffs = t @ c2
    step = coeffs[0] * basis[0][0]
    for i in range(1, n):
        step = step + coeffs[i] * basis[i][0]
    decrease = -float(g2 @ c2 + 0.5 * c2 @ h2 @ c2)
    return step, decrease


def solve_subproblem_tcg(
    theta: ThetaPoint,
    grad,
    hvp,
    delta: float,
    cfg: TcgConfig,
    precond=None,
) -> TcgResult:
    """Truncated CG on the trust-region model, metric inner products throughout.

    grad and hvp describe the function being minimized.  Returns a step
    with ||s|| <= delta whose model decrease is never below the Cauchy
    (steepest-descent) decrease: if a preconditioned run ends short of
    it, the Cauchy point is returned instead.
    """
    inner = lambda u, v: spd.inner_product(theta, u, v)
    g = grad
    g_norm2 = inner(g, g)
    g_norm = float(np.sqrt(g_norm2))
    if g_norm == 0.0 or delta <= 0.0:
        raise ValueError("tCG needs a nonzero gradient and positive radius")

    prec = precond if precond is not None else (lambda v: v)
    s = 0.0 * g
    model_value = 0.0
    r = g
    z = prec(r)
    rz = inner(r, z)
    p = -1.0 * z
    target = g_norm * min(g_norm**cfg.delta_exponent, cfg.kappa)
    max_inner = cfg.max_inner if cfg.max_inner is not None else spd.tangent_dimension(theta)

    g_hg = None
    dirs: list[tuple[TangentVector, TangentVector]] = []
    if precond is not None:
        hg = hvp(g)
        g_hg = inner(hg, g)
        dirs.append((g, hg))

    pairs: list[tuple[TangentVector, TangentVector]] = []
    stop = "max_inner"
    iterations = 0
    truncated = False  # boundary/curvature exit happened; s is frozen
    for k in range(max_inner):
        hp = hvp(p)
        dirs.append((p, hp))
        php = inner(p, hp)
        if g_hg is None:
            g_hg = php  # p0 = -g when unpreconditioned
        if not truncated:
            iterations = k + 1
            rp = -rz  # <r, p> for the current conjugate direction
            if php <= 0.0:
                tau = _boundary_tau(theta, s, p, delta)
                model_value += tau * rp + 0.5 * tau * tau * php
                s = s + tau * p
                stop = "negative curvature"
                truncated = True
            else:
                alpha = rz / php
                s_new = s + alpha * p
                if spd.norm(theta, s_new) >= delta:
                    tau = _boundary_tau(theta, s, p, delta)
                    model_value += tau * rp + 0.5 * tau * tau * php
                    s = s + tau * p
                    stop = "boundary"
                    truncated = True
                else:
                    pairs.append((alpha * p, alpha * hp))
                    s = s_new
                    model_value += alpha * rp + 0.5 * alpha * alpha * php
                    r = r + alpha * hp
                    if spd.norm(theta, r) <= target:
                        stop = "residual"
                        break
                    z = prec(r)
                    rz_new = inner(r, z)
                    beta = rz_new / rz
                    p = -1.0 * z + beta * p
                    rz = rz_new
                    continue
        if truncated and cfg.subspace_refinement != "full":
            break
        # "full": keep the direction recurrence running (without stepping)
        # so the later subspace solve sees a larger Krylov space
        if abs(php) <= 1e-18 * max(rz, 1e-30):
            break
        alpha = rz / php
        r = r + alpha * hp
        z = prec(r)
        rz_new = inner(r, z)
        if rz_new <= 1e-30:
            break
        beta = rz_new / rz
        p = -1.0 * z + beta * p
        rz = rz_new

    model_decrease = -model_value
    if cfg.subspace_refinement != "off" and (truncated or stop == "max_inner"):
        refined = _subspace_step(theta, g, dirs, delta)
        if refined is not None and refined[1] > model_decrease:
            s, model_decrease = refined

    # steepest-descent (Cauchy) decrease as the floor for step quality
    if g_hg > 0.0:
        tau_c = min(g_norm2 / g_hg, delta / g_norm)
    else:
        tau_c = delta / g_norm
    cauchy_decrease = tau_c * g_norm2 - 0.5 * tau_c * tau_c * g_hg
    cauchy_fallback = False
    if model_decrease < cauchy_decrease * (1.0 - 1e-10):
        s = -tau_c * g
        model_decrease = cauchy_decrease
        cauchy_fallback = True

    return TcgResult(
        step=s,
        stop_reason=stop,
        iterations=iterations,
        model_decrease=model_decrease,
        pairs=pairs,
        cauchy_fallback=cauchy_fallback,
    )


def lbfgs_preconditioner(theta: ThetaPoint, pairs, memory: int):
    """Inverse-Hessian operator from (step, gradient-change) tangent pairs.

    Two-loop recursion with all inner products in the metric at theta.
    Pairs whose curvature <s, y> is not safely positive are skipped; with
    no usable pairs the identity (None) is returned.  The operator is
    symmetric positive definite with respect to the metric.
    """
    kept = []
    for s_vec, y_vec in pairs:
        sy = spd.inner_product(theta, s_vec, y_vec)
        if sy > 1e-12 * spd.norm(theta, s_vec) * spd.norm(theta, y_vec):
            kept.append((s_vec, y_vec, sy))
    kept = kept[-memory:]
    if not kept:
        return None

    _, y_last, sy_last = kept[-1]
    gamma = sy_last / spd.inner_product(theta, y_last, y_last)

    def apply(v: TangentVector) -> TangentVector:
        q = v
        coeffs = []
        for s_vec, y_vec, sy in reversed(kept):
            a = spd.inner_product(theta, s_vec, q) / sy
            q = q - a * y_vec
            coeffs.append(a)
        q = gamma * q
        for (s_vec, y_vec, sy), a in zip(kept, reversed(coeffs)):
            b = spd.inner_product(theta, y_vec, q) / sy
            q = q + (a - b) * s_vec
        return q

    return apply


def initial_radius(theta: ThetaPoint, grad, hvp, delta_max: float | None = None) -> float:
    """Radius from the model minimizer along steepest descent.

    For positive curvature this is the Cauchy step length
    ||g||^3 / <H[g], g>; otherwise ||g||.  A closed-form stand-in for the
    iterative model-trust strategy, clipped below at 1e-4 and above at
    delta_max when given.
    """
    g_norm2 = spd.inner_product(theta, grad, grad)
    g_norm = float(np.sqrt(g_norm2))
    if g_norm == 0.0:
        raise ZeroGradient("cannot size a radius from a zero gradient")
    g_hg = spd.inner_product(theta, hvp(grad), grad)
    delta = g_norm2 * g_norm / g_hg if g_hg > 0.0 else g_norm
    delta = max(delta, 1e-4)
    if delta_max is not None:
        delta = min(delta, delta_max)
    return delta


def fit_rntr(
    data: Dataset,
    init: GmmParams,
    cfg: TrConfig | None = None,
    penalty: PenaltyConfig | None = None,
) -> FitReport:
    """Fit a mixture by the Newton trust-region loop starting from init."""
    cfg = cfg if cfg is not None else TrConfig()
    start = time.perf_counter()
    try:
        theta = forward_transform(init)
    except Exception as exc:
        raise InitializationError(f"invalid initial parameters: {exc}") from exc

    m = data.n_samples
    psi_norm = (
        float(np.linalg.norm(penalty.psi_matrix.entries)) if penalty is not None else 1.0
    )

    def prepare(point: ThetaPoint):
        ws = build_workspace(point, data)
        gres = riemannian_gradient(point, data, penalty, ws)

        def hvp_f(v: TangentVector) -> TangentVector:
            return -1.0 * hessian_vector_product(point, v, data, penalty, ws)

        return ws, gres, hvp_f

    ws, gres, hvp_f = prepare(theta)

    delta_bar = cfg.delta_max
    if cfg.delta0 is not None:
        delta = cfg.delta0
    elif gres.norm > 0.0:
        delta = initial_radius(theta, -1.0 * gres.grad, hvp_f, delta_bar)
    else:
        delta = 1.0
    if delta_bar is None:
        delta_bar = 10.0 * delta
    delta = min(delta, delta_bar)

    pairs: deque = deque(maxlen=cfg.tcg.lbfgs_memory)
    trace: list[IterRecord] = []
    termination = "max_iters"
    n_accepted = 0

    t = 0
    while t < cfg.max_iters:
        if gres.norm == 0.0 or (cfg.grad_tol > 0.0 and gres.norm < cfg.grad_tol):
            termination = "grad_tol"
            break

        precond = None
        if cfg.tcg.precondition and pairs:
            precond = lbfgs_preconditioner(theta, list(pairs), cfg.tcg.lbfgs_memory)
        sub = solve_subproblem_tcg(theta, -1.0 * gres.grad, hvp_f, delta, cfg.tcg, precond)

        try:
            theta_new = spd.retract(theta, sub.step)
            obj_new = gm.penalized_objective(theta_new, data, penalty)
        except spd.NotPositiveDefinite:
            # candidate numerically escaped the cone: treat as a failed
            # step so the radius shrinks
            theta_new, obj_new = None, -np.inf
        actual = obj_new - gres.objective_value  # f-decrease equals objective increase
        if not np.isfinite(actual):
            rho = -np.inf
        elif sub.model_decrease < 1e-14 * abs(gres.objective_value):
            rho = 1.0 if actual >= 0.0 else 0.0
        else:
            rho = actual / sub.model_decrease

        delta_used = delta
        on_boundary = sub.stop_reason in ("negative curvature", "boundary")
        if rho < cfg.omega1:
            delta = cfg.tau1 * delta
        elif rho > cfg.omega2 and on_boundary:
            delta = min(cfg.tau2 * delta, delta_bar)

        accepted = rho > cfg.rho_prime
        trace.append(
            IterRecord(
                t=t,
                objective=gres.objective_value,
                accepted=accepted,
                grad_norm=gres.norm,
                delta=delta_used,
                rho=rho,
                step_norm=spd.norm(theta, sub.step),
                tcg_iterations=sub.iterations,
                tcg_stop_reason=sub.stop_reason,
                min_weight=float(ws.alphas.min()),
                block_norm_ratio=max(
                    float(np.linalg.norm(s.entries)) for s in theta.s_blocks
                )
                / psi_norm,
            )
        )

        if cfg.reset_precond_on_reject and not accepted:
            pairs.clear()
        else:
            pairs.extend(sub.pairs)

        t += 1
        if accepted:
            n_accepted += 1
            all_diff = abs(obj_new - gres.objective_value) / m
            theta = theta_new
            ws, gres, hvp_f = prepare(theta)
            if all_diff < cfg.all_diff_tol:
                termination = "all_diff"
                break

    # score the reported classical parameters, not the raw iterate: the
    # block map fixes the corner entries to 1 only in the limit, so the
    # two can differ by O(grad^2) at termination
    params = gm.backward_transform(theta)
    theta_reported = forward_transform(params)
    return FitReport(
        params=params,
        theta=theta,
        trace=tuple(trace),
        wall_time_s=time.perf_counter() - start,
        termination=termination,
        solver="rntr",
        n_iterations=t,
        n_accepted=n_accepted,
        final_objective=gres.objective_value,
        final_all=gm.objective(theta_reported, data) / m,
        final_all_penalized=gm.penalized_objective(theta_reported, data, penalty) / m,
        final_grad_norm=gres.norm,
    )
