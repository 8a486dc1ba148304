"""Polynomial machinery on the reference simplex T0 = {u,v >= 0, u+v <= 1}.

Provides the orthonormal Koornwinder basis (and its derivatives), collapsed
Gauss quadrature rules, an interior interpolation node family selected by
QR column pivoting (approximate Fekete points), and the node-to-coefficient
transforms everything else in the package is built on.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import qr
from scipy.special import eval_jacobi, roots_jacobi, roots_legendre

__all__ = [
    "basis_size",
    "koornwinder",
    "koornwinder_derivs",
    "triangle_rule",
    "interpolation_nodes",
    "ReferenceElement",
    "reference_element",
    "split4",
    "CHILD_TRIANGLES",
]


def basis_size(order: int) -> int:
    """Dimension of polynomials of total degree < order in two variables."""
    return order * (order + 1) // 2


def _degree_pairs(order):
    return [(k, d - k) for d in range(order) for k in range(d + 1)]


def _collapsed(u, v):
    # a-coordinate degenerates at the apex v=1; clamp keeps evaluation finite
    # (only display sampling ever lands there).
    vm = np.minimum(v, 1.0 - 1e-14)
    a = 2.0 * u / (1.0 - vm) - 1.0
    b = 2.0 * v - 1.0
    return a, b, vm


def _jacobi_table(nmax, alpha, x):
    """P_0..P_nmax of the Jacobi (alpha, 0) family at x, shape (npts, nmax+1).

    Three-term recurrence; much faster than per-degree scipy calls on the
    large point batches the adaptive quadrature produces.
    """
    out = np.empty((x.size, nmax + 1))
    out[:, 0] = 1.0
    if nmax >= 1:
        out[:, 1] = ((alpha + 2.0) * x + alpha) / 2.0
    for n in range(2, nmax + 1):
        c0 = 2.0 * n * (n + alpha) * (2 * n + alpha - 2)
        c1 = (2 * n + alpha - 1) * (2 * n + alpha) * (2 * n + alpha - 2)
        c2 = (2 * n + alpha - 1) * alpha * alpha
        c3 = 2.0 * (n + alpha - 1) * (n - 1) * (2 * n + alpha)
        out[:, n] = ((c1 * x + c2) * out[:, n - 1] - c3 * out[:, n - 2]) / c0
    return out


def koornwinder(order, u, v):
    """Evaluate the orthonormal Koornwinder basis at points (u, v).

    Returns an array of shape (npts, basis_size(order)); column (k, l) is
    sqrt(2(2k+1)(k+l+1)) * P_k(a) * (1-v)^k * P_l^(2k+1,0)(b) in collapsed
    coordinates, orthonormal with respect to the area measure on T0.
    """
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    a, b, vm = _collapsed(u, v)
    one_m_v = 1.0 - vm
    out = np.empty((u.size, basis_size(order)))
    leg = _jacobi_table(order - 1, 0.0, a)
    powv = np.ones_like(u)
    cols = {}
    for k in range(order):
        q = _jacobi_table(order - 1 - k, 2.0 * k + 1.0, b)
        pk = leg[:, k] * powv
        for l in range(order - k):
            norm = np.sqrt(2.0 * (2 * k + 1) * (k + l + 1))
            cols[(k, l)] = norm * pk * q[:, l]
        powv = powv * one_m_v
    for j, (k, l) in enumerate(_degree_pairs(order)):
        out[:, j] = cols[(k, l)]
    return out


def _djacobi(n, alpha, beta, x):
    if n == 0:
        return np.zeros_like(x)
    return 0.5 * (n + alpha + beta + 1) * eval_jacobi(n - 1, alpha + 1, beta + 1, x)


def koornwinder_derivs(order, u, v):
    """Evaluate (psi, dpsi/du, dpsi/dv) for the basis of `koornwinder`.

    Returns three arrays of shape (npts, basis_size(order)).
    """
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    a, b, vm = _collapsed(u, v)
    one_m_v = 1.0 - vm
    nb = basis_size(order)
    val = np.empty((u.size, nb))
    du = np.empty((u.size, nb))
    dv = np.empty((u.size, nb))
    for j, (k, l) in enumerate(_degree_pairs(order)):
        norm = np.sqrt(2.0 * (2 * k + 1) * (k + l + 1))
        pk = eval_jacobi(k, 0, 0, a)
        dpk = _djacobi(k, 0, 0, a)
        ql = eval_jacobi(l, 2 * k + 1, 0, b)
        dql = _djacobi(l, 2 * k + 1, 0, b)
        fk = one_m_v**k
        fk1 = one_m_v ** (k - 1) if k >= 1 else np.zeros_like(u)
        val[:, j] = norm * pk * fk * ql
        du[:, j] = norm * 2.0 * dpk * fk1 * ql
        # da/dv = (1+a)/(1-v); d/dv[(1-v)^k] = -k (1-v)^(k-1); db/dv = 2
        dv[:, j] = norm * (
            dpk * (1.0 + a) * fk1 * ql
            - k * pk * fk1 * ql
            + 2.0 * pk * fk * dql
        )
    return val, du, dv


@lru_cache(maxsize=64)
def triangle_rule(n: int):
    """Collapsed Gauss rule on T0, exact for total degree <= 2n-1.

    Tensor product of n-point Gauss-Legendre (radial) and n-point
    Gauss-Jacobi(1,0) (collapse direction). Returns (points (n*n, 2),
    weights (n*n,)); weights sum to area(T0) = 1/2 and are positive.
    """
    xa, wa = roots_legendre(n)
    xb, wb = roots_jacobi(n, 1.0, 0.0)
    A, B = np.meshgrid(xa, xb, indexing="ij")
    WA, WB = np.meshgrid(wa, wb, indexing="ij")
    v = (1.0 + B) / 2.0
    u = (1.0 + A) * (1.0 - B) / 4.0
    w = WA * WB / 8.0
    pts = np.column_stack([u.ravel(), v.ravel()])
    return pts, w.ravel()


@lru_cache(maxsize=32)
def interpolation_nodes(order: int):
    """Interior interpolation nodes for total degree < order (approximate Fekete).

    Candidates are a collapsed Gauss grid (strictly interior, with an
    O(1/order^2) margin from the boundary); QR with column pivoting on the
    Koornwinder Vandermonde picks the basis_size(order) best-conditioned
    subset. Deterministic for a given order.
    """
    if order < 2 or order > 12:
        raise ValueError(f"order must be in [2, 12], got {order}")
    nb = basis_size(order)
    # candidate pool: two collapsed-Gauss grids, filtered to keep a
    # Gauss-like distance from the boundary (nearby patches then see
    # targets no closer than ~0.2/p^1.5 edge lengths, bounding the
    # adaptive quadrature depth) without hurting conditioning
    margin = 0.2 / order**1.5
    cand = np.vstack([triangle_rule(order + 3)[0],
                      triangle_rule(order + 5)[0]])
    bary = np.minimum(cand.min(axis=1), 1.0 - cand.sum(axis=1))
    cand = cand[bary >= margin]
    psi = koornwinder(order, cand[:, 0], cand[:, 1])
    _, _, piv = qr(psi.T, pivoting=True, mode="economic")
    chosen = _positivize(order, cand, psi, list(piv[:nb]))
    return cand[np.sort(chosen)]


def _interp_weights(order, psi_sel):
    """Smooth-rule weights composed with interpolation, on T0."""
    rp, rw = triangle_rule(order + 1)
    interp = koornwinder(order, rp[:, 0], rp[:, 1]) @ np.linalg.inv(psi_sel)
    return interp.T @ rw


def _positivize(order, cand, psi, chosen, max_sweeps=200):
    """Greedy node swaps until the composed quadrature weights are positive.

    QR column pivoting optimizes conditioning but the interpolatory weights
    can come out slightly negative; swapping negative-weight nodes against
    the unused candidates fixes that at a small conditioning cost. The
    score prefers the largest minimum weight and breaks ties toward better
    conditioning.
    """
    nb = len(chosen)
    target = 0.02 * 0.5 / nb
    pool = [i for i in range(len(cand)) if i not in set(chosen)]
    stuck = 0
    for sweep in range(max_sweeps):
        w = _interp_weights(order, psi[chosen])
        wmin = w.min()
        if wmin >= target:
            break
        # cycle through the offending nodes, not only the single worst
        offenders = np.argsort(w)
        worst = int(offenders[sweep % max(1, (w < target).sum())])
        best = None
        for j, c in enumerate(pool):
            trial = list(chosen)
            trial[worst] = c
            mat = psi[trial]
            sign, logdet = np.linalg.slogdet(mat)
            if sign == 0 or logdet < -60:
                continue
            condv = np.linalg.cond(mat)
            if condv > 250.0:
                continue
            wt = _interp_weights(order, mat)
            score = (round(float(wt.min()) / target, 2), -condv)
            if best is None or score > best[0]:
                best = (score, j, float(wt.min()))
        if best is None:
            stuck += 1
            if stuck > 3:
                break
            continue
        score, j, new_min = best
        if new_min <= wmin and stuck > 3:
            break
        if new_min > wmin or (w < target).sum() > 1:
            pool[j], chosen[worst] = chosen[worst], pool[j]
            stuck = 0
        else:
            stuck += 1
    return _polish_conditioning(order, psi, chosen, pool, target)


def _polish_conditioning(order, psi, chosen, pool, target, sweeps=25):
    """Swap high-leverage nodes to reduce cond(V) while keeping the
    quadrature weights above the positivity target."""
    for _ in range(sweeps):
        mat = psi[chosen]
        cond0 = np.linalg.cond(mat)
        if cond0 < 30.0:
            break
        lev = np.abs(np.linalg.inv(mat)).sum(axis=0)
        order_try = np.argsort(lev)[::-1][:6]
        best = None
        for worst in order_try:
            for j, c in enumerate(pool):
                trial = list(chosen)
                trial[int(worst)] = c
                m2 = psi[trial]
                sign, _ = np.linalg.slogdet(m2)
                if sign == 0:
                    continue
                c2 = np.linalg.cond(m2)
                if c2 >= cond0 * 0.98:
                    continue
                if _interp_weights(order, m2).min() < target:
                    continue
                if best is None or c2 < best[0]:
                    best = (c2, int(worst), j)
        if best is None:
            break
        _, worst, j = best
        pool[j], chosen[worst] = chosen[worst], pool[j]
    return chosen


# child triangles of the uniform 4-way split, as (3, 2) vertex arrays
CHILD_TRIANGLES = (
    np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]]),
    np.array([[0.5, 0.0], [1.0, 0.0], [0.5, 0.5]]),
    np.array([[0.0, 0.5], [0.5, 0.5], [0.0, 1.0]]),
    np.array([[0.5, 0.0], [0.5, 0.5], [0.0, 0.5]]),
)


def split4(verts):
    """Split a triangle (3, 2 array of vertices) into its 4 uniform children."""
    m01 = 0.5 * (verts[0] + verts[1])
    m12 = 0.5 * (verts[1] + verts[2])
    m20 = 0.5 * (verts[2] + verts[0])
    return (
        np.array([verts[0], m01, m20]),
        np.array([m01, verts[1], m12]),
        np.array([m20, m12, verts[2]]),
        np.array([m01, m12, m20]),
    )


def _map_to_tri(verts, refpts):
    """Affine map of reference points on T0 into the triangle `verts`."""
    return (
        verts[0]
        + np.outer(refpts[:, 0], verts[1] - verts[0])
        + np.outer(refpts[:, 1], verts[2] - verts[0])
    )


@dataclass(frozen=True)
class ReferenceElement:
    """Precomputed operators for one interpolation order on T0.

    Attributes
    ----------
    order : int
        Polynomial order p; the basis spans total degree < p.
    nodes : (nb, 2) array
        Interpolation nodes.
    vand, vinv : (nb, nb) arrays
        Koornwinder Vandermonde at the nodes and its inverse
        (values -> coefficients).
    dmat_u, dmat_v : (nb, nb) arrays
        Spectral differentiation at the nodes (values -> derivative values).
    rule_pts, rule_wts : arrays
        Order-2p collapsed Gauss rule used for smooth quadrature weights.
    over_pts : (4 nb_o, 2) array
        Oversample points: the node family mapped into the 4 child triangles.
    over_interp : (4 nb_o, nb) array
        Values at nodes -> values at the oversample points.
    over_order : int
        Family order used for the oversample points (order, or order+1 if
        the same-order set collides with the interpolation nodes).
    """

    order: int
    nodes: np.ndarray
    vand: np.ndarray
    vinv: np.ndarray
    dmat_u: np.ndarray
    dmat_v: np.ndarray
    rule_pts: np.ndarray
    rule_wts: np.ndarray
    weight_interp: np.ndarray
    over_pts: np.ndarray
    over_interp: np.ndarray
    over_order: int

    @property
    def nnodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def noversampled(self) -> int:
        return self.over_pts.shape[0]

    def interp_matrix(self, u, v):
        """Values at nodes -> values at arbitrary points (npts, nb)."""
        return koornwinder(self.order, u, v) @ self.vinv

    def coeff_eval(self, coeffs, u, v):
        """Evaluate a coefficient expansion at points; coeffs (..., nb, m)."""
        return koornwinder(self.order, u, v) @ coeffs


@lru_cache(maxsize=32)
def reference_element(order: int) -> ReferenceElement:
    """Build (and cache) the ReferenceElement for a given order."""
    nodes = interpolation_nodes(order)
    nb = basis_size(order)
    psi, dpu, dpv = koornwinder_derivs(order, nodes[:, 0], nodes[:, 1])
    vinv = np.linalg.inv(psi)
    rule_pts, rule_wts = triangle_rule(order + 1)  # exact degree <= 2p+1
    weight_interp = koornwinder(order, rule_pts[:, 0], rule_pts[:, 1]) @ vinv

    over_order = order
    over = np.vstack([_map_to_tri(t, interpolation_nodes(over_order))
                      for t in CHILD_TRIANGLES])
    # oversample points may not collide with the nodes (kernel evaluations
    # between the two sets appear in the near-correction subtraction)
    dmin = np.sqrt(
        ((over[:, None, :] - nodes[None, :, :]) ** 2).sum(-1)).min()
    if dmin < 1e-6:
        over_order = order + 1
        over = np.vstack([_map_to_tri(t, interpolation_nodes(over_order))
                          for t in CHILD_TRIANGLES])
        dmin = np.sqrt(
            ((over[:, None, :] - nodes[None, :, :]) ** 2).sum(-1)).min()
        if dmin < 1e-6:
            raise RuntimeError("oversample nodes collide with interpolation nodes")
    over_interp = koornwinder(order, over[:, 0], over[:, 1]) @ vinv
    return ReferenceElement(
        order=order,
        nodes=nodes,
        vand=psi,
        vinv=vinv,
        dmat_u=dpu @ vinv,
        dmat_v=dpv @ vinv,
        rule_pts=rule_pts,
        rule_wts=rule_wts,
        weight_interp=weight_interp,
        over_pts=over,
        over_interp=over_interp,
        over_order=over_order,
    )
