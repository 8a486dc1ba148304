"""High-order piecewise-polynomial surface discretizations.

A surface is a disjoint union of curved triangular patches, each the image
of the reference simplex under a chart whose components (and first
derivatives) are stored as Koornwinder coefficient expansions. Nodes carry
full first-fundamental-form data plus mean curvature; a 4x oversampled
node set with smooth quadrature weights serves far-field summation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simplex import (
    CHILD_TRIANGLES,
    basis_size,
    koornwinder,
    interpolation_nodes,
    reference_element,
    triangle_rule,
)

__all__ = [
    "DegeneratePatchError",
    "Patch",
    "GeometryJet",
    "SurfaceDiscretization",
    "build_from_coefficients",
    "mean_curvature",
    "surface_gradient",
    "surface_divergence",
    "interpolate_to_oversampled",
    "surface_integral",
    "averaging_w",
]

MIN_JACOBIAN = 1e-14


class DegeneratePatchError(RuntimeError):
    """A patch chart has |X_u x X_v| below the degeneracy floor."""


@dataclass(frozen=True)
class Patch:
    """One curved triangular patch: coefficient expansions over T0."""

    order: int
    coeffs_x: np.ndarray      # (nb, 3)
    coeffs_dxdu: np.ndarray   # (nb, 3)
    coeffs_dxdv: np.ndarray   # (nb, 3)

    def evaluate(self, u, v):
        return koornwinder(self.order, u, v) @ self.coeffs_x

    def evaluate_derivs(self, u, v):
        psi = koornwinder(self.order, u, v)
        return psi @ self.coeffs_dxdu, psi @ self.coeffs_dxdv


@dataclass(frozen=True)
class GeometryJet:
    """Pointwise differential geometry at one node."""

    position: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    normal: np.ndarray
    metric: np.ndarray        # (2, 2)
    inv_metric: np.ndarray    # (2, 2)
    sqrt_det_g: float
    mean_curvature: float


@dataclass
class SurfaceDiscretization:
    """Nodes, weights, per-node geometry and the oversampled node set.

    All arrays are immutable after construction; every operation below is
    read-only, so a discretization is safe to share across threads.
    """

    order: int
    coeffs_x: np.ndarray       # (npat, nb, 3)
    coeffs_dxdu: np.ndarray
    coeffs_dxdv: np.ndarray
    node_family: str
    nodes: np.ndarray          # (N, 3)
    node_patch: np.ndarray     # (N,)
    node_uv: np.ndarray        # (N, 2)
    tangents_u: np.ndarray     # (N, 3)
    tangents_v: np.ndarray
    normals: np.ndarray
    metric: np.ndarray         # (N, 2, 2)
    inv_metric: np.ndarray
    sqrt_det_g: np.ndarray     # (N,)
    curvature: np.ndarray      # (N,) mean curvature
    weights: np.ndarray        # (N,)
    over_nodes: np.ndarray     # (Nover, 3)
    over_patch: np.ndarray
    over_uv: np.ndarray
    over_normals: np.ndarray
    over_weights: np.ndarray
    metadata: dict = field(default_factory=dict)

    # -- sizes ---------------------------------------------------------
    @property
    def npatches(self) -> int:
        return self.coeffs_x.shape[0]

    @property
    def nnodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def noversampled(self) -> int:
        return self.over_nodes.shape[0]

    @property
    def nodes_per_patch(self) -> int:
        return basis_size(self.order)

    @property
    def area(self) -> float:
        return float(self.weights.sum())

    def patch(self, i: int) -> Patch:
        return Patch(self.order, self.coeffs_x[i], self.coeffs_dxdu[i],
                     self.coeffs_dxdv[i])

    @property
    def patches(self):
        return [self.patch(i) for i in range(self.npatches)]

    def jet(self, i: int) -> GeometryJet:
        return GeometryJet(
            position=self.nodes[i], tangent_u=self.tangents_u[i],
            tangent_v=self.tangents_v[i], normal=self.normals[i],
            metric=self.metric[i], inv_metric=self.inv_metric[i],
            sqrt_det_g=float(self.sqrt_det_g[i]),
            mean_curvature=float(self.curvature[i]))

    # patch bounding spheres (used by the near map)
    def patch_bounds(self):
        nb = self.nodes_per_patch
        pos = self.nodes.reshape(self.npatches, nb, 3)
        over = self.over_nodes.reshape(self.npatches, -1, 3)
        allpts = np.concatenate([pos, over], axis=1)
        centers = allpts.mean(axis=1)
        radii = np.sqrt(((allpts - centers[:, None, :]) ** 2).sum(-1)).max(axis=1)
        return centers, radii

    def mesh_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(np.int64(self.order).tobytes())
        h.update(self.coeffs_x.tobytes())
        return h.hexdigest()[:16]

    # -- per-patch spectral calculus ------------------------------------
    def _per_patch(self, f):
        return np.asarray(f, dtype=float).reshape(self.npatches,
                                                  self.nodes_per_patch)

    def patch_derivatives(self, f):
        """(df/du, df/dv) at the nodes by per-patch spectral differentiation."""
        ref = reference_element(self.order)
        fp = self._per_patch(f)
        dfu = fp @ ref.dmat_u.T
        dfv = fp @ ref.dmat_v.T
        return dfu.ravel(), dfv.ravel()


def build_from_coefficients(order, coeffs_x, coeffs_dxdu, coeffs_dxdv,
                            node_family="afekete", metadata=None,
                            consistency_tol=0.2):
    """Assemble a SurfaceDiscretization from per-patch chart expansions.

    Nodes, tangents, metric, curvature, smooth weights and the oversampled
    set all derive from the expansions. Raises DegeneratePatchError when
    |X_u x X_v| < 1e-14 anywhere, and ValueError when the stored derivative
    expansions disagree grossly with the differentiated chart expansion
    (wiring errors; agreement to truncation error is expected, not exact).
    """
    coeffs_x = np.asarray(coeffs_x, dtype=float)
    coeffs_dxdu = np.asarray(coeffs_dxdu, dtype=float)
    coeffs_dxdv = np.asarray(coeffs_dxdv, dtype=float)
    npat, nb, _ = coeffs_x.shape
    if nb != basis_size(order):
        raise ValueError("coefficient arrays do not match the stated order")
    ref = reference_element(order)

    psi_nodes = ref.vand
    nodes = psi_nodes @ coeffs_x
    xu = psi_nodes @ coeffs_dxdu
    xv = psi_nodes @ coeffs_dxdv

    # chart consistency: derivative expansions vs differentiated interpolant.
    # They agree to truncation error only, so the tolerance follows the
    # coefficient-spectrum tail (top total degree): resolved charts are
    # checked tightly, under-resolved ones loosely.
    xu_spec = np.einsum("ij,pjc->pic", ref.dmat_u, psi_nodes @ coeffs_x)
    xv_spec = np.einsum("ij,pjc->pic", ref.dmat_v, psi_nodes @ coeffs_x)
    scale = max(np.abs(xu).max(), np.abs(xv).max()) + 1e-300
    mismatch = max(np.abs(xu_spec - xu).max(),
                   np.abs(xv_spec - xv).max()) / scale
    ntop = order  # entries of total degree order-1 sit at the tail
    tail = np.linalg.norm(coeffs_x[:, -ntop:, :]) / \
        (np.linalg.norm(coeffs_x) + 1e-300)
    tol = max(consistency_tol, 60.0 * tail * order)
    if mismatch > tol:
        raise ValueError(
            f"stored chart derivatives disagree with the differentiated "
            f"chart expansion (relative mismatch {mismatch:.2e}, allowed "
            f"{tol:.2e}); check coefficient wiring")

    cross = np.cross(xu, xv)
    jac = np.linalg.norm(cross, axis=-1)
    if jac.min() < MIN_JACOBIAN:
        raise DegeneratePatchError(
            f"degenerate patch: min |X_u x X_v| = {jac.min():.3e}")
    normals = cross / jac[..., None]

    g11 = np.einsum("pic,pic->pi", xu, xu)
    g12 = np.einsum("pic,pic->pi", xu, xv)
    g22 = np.einsum("pic,pic->pi", xv, xv)
    det = g11 * g22 - g12 * g12
    metric = np.stack([np.stack([g11, g12], -1), np.stack([g12, g22], -1)], -2)
    inv = np.empty_like(metric)
    inv[..., 0, 0] = g22 / det
    inv[..., 0, 1] = -g12 / det
    inv[..., 1, 0] = -g12 / det
    inv[..., 1, 1] = g11 / det

    # mean curvature by spectral differentiation of the stored tangents:
    # H = -(1/2) g^{ij} (n . d2X/du_i du_j); unit sphere with outward
    # normal gives H = +1 (the sign the layer-potential identities need)
    du, dv = ref.dmat_u, ref.dmat_v
    xuu = np.einsum("ij,pjc->pic", du, xu)
    xuv = 0.5 * (np.einsum("ij,pjc->pic", dv, xu)
                 + np.einsum("ij,pjc->pic", du, xv))
    xvv = np.einsum("ij,pjc->pic", dv, xv)
    b11 = np.einsum("pic,pic->pi", normals, xuu)
    b12 = np.einsum("pic,pic->pi", normals, xuv)
    b22 = np.einsum("pic,pic->pi", normals, xvv)
    curvature = -0.5 * (inv[..., 0, 0] * b11 + 2 * inv[..., 0, 1] * b12
                        + inv[..., 1, 1] * b22)

    # smooth weights: order-2p rule composed with interpolation so weights
    # sit at the nodes
    psi_rule = koornwinder(order, ref.rule_pts[:, 0], ref.rule_pts[:, 1])
    xur = psi_rule @ coeffs_dxdu
    xvr = psi_rule @ coeffs_dxdv
    jr = np.linalg.norm(np.cross(xur, xvr), axis=-1)
    weights = np.einsum("qi,pq->pi", ref.weight_interp, jr * ref.rule_wts)

    # oversampled nodes: same-order family on the 4 child triangles
    over_uv_ref = ref.over_pts
    psi_over = koornwinder(order, over_uv_ref[:, 0], over_uv_ref[:, 1])
    over_nodes = psi_over @ coeffs_x
    over_xu = psi_over @ coeffs_dxdu
    over_xv = psi_over @ coeffs_dxdv
    over_cross = np.cross(over_xu, over_xv)
    over_jac = np.linalg.norm(over_cross, axis=-1)
    if over_jac.min() < MIN_JACOBIAN:
        raise DegeneratePatchError("degenerate patch at oversampled nodes")
    over_normals = over_cross / over_jac[..., None]

    # oversampled weights: the same composed rule on each child triangle
    nover_loc = over_uv_ref.shape[0] // 4
    onodes = interpolation_nodes(ref.over_order)
    over_vinv = np.linalg.inv(koornwinder(
        ref.over_order, onodes[:, 0], onodes[:, 1]))
    w_interp_o = koornwinder(
        ref.over_order, ref.rule_pts[:, 0], ref.rule_pts[:, 1]) @ over_vinv
    over_weights = np.empty((npat, over_uv_ref.shape[0]))
    for k, tri in enumerate(CHILD_TRIANGLES):
        quv = tri[0] + np.outer(ref.rule_pts[:, 0], tri[1] - tri[0]) \
            + np.outer(ref.rule_pts[:, 1], tri[2] - tri[0])
        psi_q = koornwinder(order, quv[:, 0], quv[:, 1])
        jq = np.linalg.norm(np.cross(psi_q @ coeffs_dxdu,
                                     psi_q @ coeffs_dxdv), axis=-1)
        over_weights[:, k * nover_loc:(k + 1) * nover_loc] = np.einsum(
            "qi,pq->pi", w_interp_o, jq * ref.rule_wts * 0.25)

    node_patch = np.repeat(np.arange(npat), nb)
    node_uv = np.tile(ref.nodes, (npat, 1))
    over_patch = np.repeat(np.arange(npat), over_uv_ref.shape[0])
    over_uv = np.tile(over_uv_ref, (npat, 1))

    md = dict(metadata or {})
    md.setdefault("node_family", node_family)
    md.setdefault("oversampling", 4)
    return SurfaceDiscretization(
        order=order, coeffs_x=coeffs_x, coeffs_dxdu=coeffs_dxdu,
        coeffs_dxdv=coeffs_dxdv, node_family=node_family,
        nodes=nodes.reshape(-1, 3), node_patch=node_patch, node_uv=node_uv,
        tangents_u=xu.reshape(-1, 3), tangents_v=xv.reshape(-1, 3),
        normals=normals.reshape(-1, 3),
        metric=metric.reshape(-1, 2, 2), inv_metric=inv.reshape(-1, 2, 2),
        sqrt_det_g=jac.ravel(), curvature=curvature.ravel(),
        weights=weights.ravel(),
        over_nodes=over_nodes.reshape(-1, 3), over_patch=over_patch,
        over_uv=over_uv, over_normals=over_normals.reshape(-1, 3),
        over_weights=over_weights.ravel(), metadata=md)


def build_from_samples(order, x_samples, dxdu_samples, dxdv_samples,
                       node_family="afekete", metadata=None):
    """Build from chart samples at the interpolation nodes.

    Arrays have shape (npat, nb, 3); coefficients come from the inverse
    Vandermonde. Used by the analytic geometry generators.
    """
    ref = reference_element(order)
    cx = np.einsum("ij,pjc->pic", ref.vinv, x_samples)
    cu = np.einsum("ij,pjc->pic", ref.vinv, dxdu_samples)
    cv = np.einsum("ij,pjc->pic", ref.vinv, dxdv_samples)
    return build_from_coefficients(order, cx, cu, cv,
                                   node_family=node_family, metadata=metadata)


# ---------------------------------------------------------------------------
# surface calculus at the nodes


def mean_curvature(disc: SurfaceDiscretization) -> np.ndarray:
    """Per-node mean curvature (stored at build; +1 on the outward unit
    sphere under this package's sign convention)."""
    return disc.curvature.copy()


def surface_gradient(disc: SurfaceDiscretization, f) -> np.ndarray:
    """Tangential gradient of a node-sampled scalar, shape (N, 3)."""
    dfu, dfv = disc.patch_derivatives(f)
    a = disc.inv_metric[:, 0, 0] * dfu + disc.inv_metric[:, 0, 1] * dfv
    b = disc.inv_metric[:, 1, 0] * dfu + disc.inv_metric[:, 1, 1] * dfv
    return a[:, None] * disc.tangents_u + b[:, None] * disc.tangents_v


def surface_divergence(disc: SurfaceDiscretization, field_xyz,
                       return_flag=False):
    """Surface divergence of a tangential vector field sampled at nodes.

    The normal component is projected out first; a warning flag is set
    when max |F.n| exceeds 1e-8 * max |F|. Returns div (and the flag when
    return_flag=True).
    """
    F = np.asarray(field_xyz, dtype=float)
    fn = np.einsum("ik,ik->i", F, disc.normals)
    scale = np.abs(F).max() + 1e-300
    nontangential = np.abs(fn).max() > 1e-8 * scale
    Ft = F - fn[:, None] * disc.normals
    # chart components via the inverse metric
    fu = np.einsum("ik,ik->i", Ft, disc.tangents_u)
    fv = np.einsum("ik,ik->i", Ft, disc.tangents_v)
    f1 = disc.inv_metric[:, 0, 0] * fu + disc.inv_metric[:, 0, 1] * fv
    f2 = disc.inv_metric[:, 1, 0] * fu + disc.inv_metric[:, 1, 1] * fv
    sg = disc.sqrt_det_g
    d1u, _ = disc.patch_derivatives(sg * f1)
    _, d2v = disc.patch_derivatives(sg * f2)
    div = (d1u + d2v) / sg
    if return_flag:
        return div, nontangential
    return div


def interpolate_to_oversampled(disc: SurfaceDiscretization, f) -> np.ndarray:
    """Node samples -> samples at the oversampled nodes (per-patch
    polynomial interpolation)."""
    ref = reference_element(disc.order)
    fp = disc._per_patch(f)
    return (fp @ ref.over_interp.T).ravel()


def surface_integral(disc: SurfaceDiscretization, f) -> float:
    return float(np.dot(disc.weights, np.asarray(f, dtype=float)))


def averaging_w(disc: SurfaceDiscretization, f) -> float:
    """The mean-value functional W[f] = (1/|Gamma|) integral of f."""
    return surface_integral(disc, f) / disc.area
