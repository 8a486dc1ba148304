"""Hodge decomposition of tangential fields and harmonic vector field bases.

A tangential field F splits as F = grad_Gamma(alpha) + n x grad_Gamma(beta)
+ H with the two potentials obtained from the Laplace-Beltrami solves

    lap alpha = div_Gamma F,      lap beta = -div_Gamma (n x F),

sharing one LayerOperatorSet (the quadrature corrections are reused across
the two solves). On a genus-g surface the harmonic parts of g random
fields, together with their n x rotations, give a 2g-dimensional basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre as npleg

from .operators import DensityVector, LayerOperatorSet
from .solver import SolveConfig, SolveReport, solve_laplace_beltrami
from .surface import (
    SurfaceDiscretization,
    averaging_w,
    surface_divergence,
    surface_gradient,
    surface_integral,
)

__all__ = ["TangentialField", "HodgeResult", "GramRankError",
           "random_legendre_field", "current_source_field",
           "hodge_decompose", "harmonic_basis", "legendre_degree"]


class GramRankError(RuntimeError):
    """The candidate harmonic fields are numerically rank deficient."""


@dataclass
class TangentialField:
    """A tangential vector field sampled at the nodes (N, 3)."""

    values: np.ndarray
    tangency_residual: float = 0.0

    @classmethod
    def project(cls, disc: SurfaceDiscretization, vfield):
        """Tangential projection -n x n x V = V - (V.n)n."""
        v = np.asarray(vfield, dtype=float)
        vn = np.einsum("ik,ik->i", v, disc.normals)
        f = v - vn[:, None] * disc.normals
        resid = float(np.abs(np.einsum("ik,ik->i", f, disc.normals)).max())
        scale = np.abs(f).max() + 1e-300
        return cls(values=f, tangency_residual=resid / scale)

    def rotate(self, disc) -> "TangentialField":
        """n x F (the second harmonic partner of a harmonic F)."""
        return TangentialField(np.cross(disc.normals, self.values),
                               self.tangency_residual)

    def l2_norm(self, disc) -> float:
        return float(np.sqrt(surface_integral(
            disc, np.einsum("ik,ik->i", self.values, self.values))))


@dataclass
class HodgeResult:
    alpha: DensityVector
    beta: DensityVector
    grad_alpha: TangentialField
    rot_beta: TangentialField
    harmonic: TangentialField
    div_h_norm: float
    div_nxh_norm: float
    n_iter: tuple
    converged: bool
    t_s: float
    reports: tuple


def legendre_degree(genus: int) -> int:
    """Per-axis Legendre degree for the random fields: ceil((2g)^(1/3)) + 3."""
    return int(np.ceil((2.0 * genus) ** (1.0 / 3.0))) + 3


def random_legendre_field(disc: SurfaceDiscretization, genus: int,
                          half_extent: float, seed: int) -> TangentialField:
    """Tangential projection of a random tensor-Legendre vector field.

    Each component of V is sum c_lmn P_l(x/2L) P_m(y/2L) P_n(z/2L) with
    coefficients uniform in (-1, 1) from the given seed; the degree rule
    follows the genus. The surface must sit inside (-L, L)^3.
    """
    if np.abs(disc.nodes).max() >= half_extent:
        raise ValueError(
            f"surface extends to {np.abs(disc.nodes).max():.3f}, outside "
            f"(-L, L)^3 with L = {half_extent}")
    deg = legendre_degree(genus)
    rng = np.random.default_rng(seed)
    coeffs = rng.uniform(-1.0, 1.0, size=(3, deg + 1, deg + 1, deg + 1))
    xs = disc.nodes / (2.0 * half_extent)
    px = np.stack([npleg.legvander(xs[:, 0], deg),
                   npleg.legvander(xs[:, 1], deg),
                   npleg.legvander(xs[:, 2], deg)])
    v = np.einsum("clmn,il,im,in->ic", coeffs, px[0], px[1], px[2],
                  optimize=True)
    return TangentialField.project(disc, v)


def current_source_field(disc: SurfaceDiscretization, x0, ell
                         ) -> TangentialField:
    """Tangential projection of the current-loop field l x (x-x0)/|x-x0|^3."""
    x0 = np.asarray(x0, dtype=float)
    ell = np.asarray(ell, dtype=float)
    d = disc.nodes - x0[None, :]
    dist = np.linalg.norm(d, axis=1)
    centers, radii = disc.patch_bounds()
    if dist.min() < radii.mean():
        import warnings
        warnings.warn("current source x0 is within a patch scale of the "
                      "surface; the projected field may be under-resolved")
    v = np.cross(ell[None, :], d) / dist[:, None] ** 3
    return TangentialField.project(disc, v)


def hodge_decompose(opset: LayerOperatorSet, field: TangentialField,
                    cfg: SolveConfig | None = None) -> HodgeResult:
    """Split a tangential field into gradient, rotated-gradient and
    harmonic parts via two Laplace-Beltrami solves on a shared operator
    set."""
    disc = opset.disc
    f = field.values
    rhs_alpha = surface_divergence(disc, f)
    nxf = np.cross(disc.normals, f)
    rhs_beta = -surface_divergence(disc, nxf)

    rep_a = solve_laplace_beltrami(opset, rhs_alpha, cfg)
    rep_b = solve_laplace_beltrami(opset, rhs_beta, cfg)

    grad_alpha = surface_gradient(disc, rep_a.u.values)
    rot_beta = np.cross(disc.normals, surface_gradient(disc, rep_b.u.values))
    h = f - grad_alpha - rot_beta

    def _l2(vals):
        return float(np.sqrt(max(surface_integral(disc, vals * vals), 0.0)))

    div_h = surface_divergence(disc, h)
    div_nxh = surface_divergence(disc, np.cross(disc.normals, h))
    return HodgeResult(
        alpha=DensityVector(rep_a.u.values, "solution_u"),
        beta=DensityVector(rep_b.u.values, "solution_u"),
        grad_alpha=TangentialField(grad_alpha),
        rot_beta=TangentialField(rot_beta),
        harmonic=TangentialField.project(disc, h),
        div_h_norm=_l2(div_h),
        div_nxh_norm=_l2(div_nxh),
        n_iter=(rep_a.n_iter, rep_b.n_iter),
        converged=rep_a.converged and rep_b.converged,
        t_s=rep_a.t_s + rep_b.t_s,
        reports=(rep_a, rep_b),
    )


def _gram(disc, fields):
    g = np.empty((len(fields), len(fields)))
    for i, fi in enumerate(fields):
        for j, fj in enumerate(fields):
            g[i, j] = surface_integral(
                disc, np.einsum("ik,ik->i", fi.values, fj.values))
    return g


def harmonic_basis(opset: LayerOperatorSet, genus: int, seeds,
                   half_extent: float, cfg: SolveConfig | None = None,
                   rank_tol: float = 1e-3):
    """2g harmonic fields {H_i} + {n x H_i} from g random seed fields.

    Raises GramRankError (suggesting fresh seeds) when the Gram matrix of
    the candidates falls below the requested numerical rank.
    """
    if genus < 1:
        return []
    seeds = list(seeds)
    if len(seeds) != genus:
        raise ValueError(f"need exactly {genus} seeds, got {len(seeds)}")
    disc = opset.disc
    fields = []
    for s in seeds:
        f = random_legendre_field(disc, genus, half_extent, s)
        res = hodge_decompose(opset, f, cfg)
        fields.append(res.harmonic)
    fields = fields + [h.rotate(disc) for h in fields]
    gram = _gram(disc, fields)
    sv = np.linalg.svd(gram, compute_uv=False)
    if sv[-1] < rank_tol * sv[0]:
        raise GramRankError(
            f"harmonic candidates have numerical rank < {2 * genus} "
            f"(sigma_min/sigma_max = {sv[-1] / sv[0]:.2e}); retry with "
            "different seeds")
    return fields
