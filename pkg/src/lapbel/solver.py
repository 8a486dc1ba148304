"""Non-restarted GMRES and the end-to-end Laplace-Beltrami solve."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelKind
from .operators import DensityVector, LayerOperatorSet
from .surface import averaging_w

__all__ = ["SolveConfig", "SolveReport", "GmresBreakdown", "gmres",
           "solve_laplace_beltrami"]


class GmresBreakdown(RuntimeError):
    """Arnoldi norm underflow that is not a happy breakdown."""


@dataclass
class SolveConfig:
    formulation: str = "a3"
    eps: float = 1e-6
    eps_gmres: float = 1e-8
    max_iter: int = 100

    def __post_init__(self):
        if self.eps_gmres < 1e-14:
            raise ValueError("eps_gmres must be >= 1e-14")


@dataclass
class SolveReport:
    sigma: DensityVector
    u: DensityVector
    residual_history: list
    n_iter: int
    converged: bool
    t_q: float
    t_mv_total: float
    t_s: float
    mean_u: float
    mean_subtracted: float = 0.0


def gmres(apply_fn, rhs, tol=1e-8, max_iter=100):
    """Full-orthogonalization GMRES (no restarts).

    Returns (x, residual_history, converged). The history holds the
    relative preconditioned residuals, one per iteration; a happy
    breakdown counts as convergence.
    """
    rhs = np.asarray(rhs, dtype=float)
    n = rhs.size
    bnorm = float(np.linalg.norm(rhs))
    if bnorm == 0.0:
        return np.zeros(n), [0.0], True
    max_iter = min(max_iter, n)
    q = np.zeros((max_iter + 1, n))
    h = np.zeros((max_iter + 1, max_iter))
    cs = np.zeros(max_iter)
    sn = np.zeros(max_iter)
    g = np.zeros(max_iter + 1)
    g[0] = bnorm
    q[0] = rhs / bnorm
    history = []
    converged = False
    k_used = 0
    for k in range(max_iter):
        # copy: an apply_fn returning its argument must not let the MGS
        # updates overwrite the stored basis vector
        v = np.array(apply_fn(q[k]), dtype=float, copy=True)
        for j in range(k + 1):  # modified Gram-Schmidt
            h[j, k] = np.dot(q[j], v)
            v -= h[j, k] * q[j]
        h[k + 1, k] = np.linalg.norm(v)
        happy = h[k + 1, k] <= 1e-14 * bnorm
        if not happy:
            q[k + 1] = v / h[k + 1, k]
        # apply stored rotations, then the new one
        for j in range(k):
            t = cs[j] * h[j, k] + sn[j] * h[j + 1, k]
            h[j + 1, k] = -sn[j] * h[j, k] + cs[j] * h[j + 1, k]
            h[j, k] = t
        denom = np.hypot(h[k, k], h[k + 1, k])
        if denom == 0.0:
            raise GmresBreakdown("zero diagonal in the Arnoldi least squares")
        cs[k] = h[k, k] / denom
        sn[k] = h[k + 1, k] / denom
        h[k, k] = denom
        h[k + 1, k] = 0.0
        g[k + 1] = -sn[k] * g[k]
        g[k] = cs[k] * g[k]
        history.append(abs(g[k + 1]) / bnorm)
        k_used = k + 1
        if history[-1] <= tol or happy:
            converged = True
            break
    y = np.linalg.solve(np.triu(h[:k_used, :k_used]), g[:k_used])
    x = y @ q[:k_used]
    return x, history, converged


def solve_laplace_beltrami(opset: LayerOperatorSet, f,
                           cfg: SolveConfig | None = None) -> SolveReport:
    """Solve the surface Poisson problem for the data f.

    The discrete mean of f is subtracted once at entry (and recorded); the
    right-hand side is S[f] for A1/A2 and f itself for A3, matching the
    representations u = S[sigma] and u = S^2[sigma].
    """
    if cfg is None:
        cfg = SolveConfig(formulation=opset.formulation, eps=opset.eps)
    if cfg.formulation.lower() != opset.formulation:
        raise ValueError("config formulation does not match the operator set")
    disc = opset.disc
    fvals = np.asarray(
        f.values if isinstance(f, DensityVector) else f, dtype=float)
    mean_f = averaging_w(disc, fvals)
    fvals = fvals - mean_f

    t0 = time.perf_counter()
    if opset.formulation in ("a1", "a2"):
        rhs = opset.apply_layer(KernelKind.SINGLE_LAYER, fvals)
    else:
        rhs = fvals
    if not np.any(fvals):
        n = disc.nnodes
        return SolveReport(
            sigma=DensityVector(np.zeros(n), "sigma"),
            u=DensityVector(np.zeros(n), "solution_u"),
            residual_history=[0.0], n_iter=0, converged=True,
            t_q=opset.t_q, t_mv_total=opset.t_mv_total,
            t_s=time.perf_counter() - t0, mean_u=0.0,
            mean_subtracted=mean_f)
    mv0 = opset.t_mv_total
    sigma, history, converged = gmres(opset.apply, rhs, cfg.eps_gmres,
                                      cfg.max_iter)
    u = opset.evaluate_solution(sigma)
    t_s = time.perf_counter() - t0
    return SolveReport(
        sigma=DensityVector(sigma, "sigma"),
        u=DensityVector(u, "solution_u"),
        residual_history=history,
        n_iter=len(history),
        converged=converged,
        t_q=opset.t_q,
        t_mv_total=opset.t_mv_total - mv0,
        t_s=t_s,
        mean_u=averaging_w(disc, u),
        mean_subtracted=mean_f,
    )
