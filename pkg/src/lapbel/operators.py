"""Discretized layer operators and the three Laplace-Beltrami formulations.

A LayerOperatorSet owns the near corrections for one formulation's kernel
kinds and evaluates

    A1 = div S grad_Gamma S + S W S
    A2 = -I/4 + D^2 - S (S'' + D' + 2 H S') + S W S
    A3 = -I/4 + (S')^2 - (S'' + D' + 2 H S') S + W S^2

with exactly two multi-density far-field evaluations per application (the
far sums run through the point FMM, or through direct summation for the
oracle path). Operators compose right to left as written; the identity
terms are added explicitly, never folded into quadrature, which is what
keeps the discretized systems numerically second kind. Dense assembly for
spectral studies reproduces the direct-summation path as matrices.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import fmm as fmm_mod
from .kernels import FOUR_PI, KernelKind, kernel_matrix
from .quadrature import NearMap, build_near_map, compute_corrections
from .surface import SurfaceDiscretization, interpolate_to_oversampled
from .simplex import reference_element

__all__ = [
    "FORMULATIONS",
    "DensityVector",
    "LayerOperatorSet",
    "apply_layer",
    "assemble_dense",
]

FORMULATIONS = {
    "a1": (KernelKind.SINGLE_LAYER, KernelKind.GRAD_S1, KernelKind.GRAD_S2,
           KernelKind.GRAD_S3),
    "a2": (KernelKind.SINGLE_LAYER, KernelKind.DOUBLE_LAYER,
           KernelKind.SPRIME, KernelKind.SPP_PLUS_DPRIME),
    "a3": (KernelKind.SINGLE_LAYER, KernelKind.SPRIME,
           KernelKind.SPP_PLUS_DPRIME),
}

GRADS = (KernelKind.GRAD_S1, KernelKind.GRAD_S2, KernelKind.GRAD_S3)


@dataclass
class DensityVector:
    """N scalar samples at the discretization nodes with a role tag."""

    values: np.ndarray
    role: str = "intermediate"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if not np.all(np.isfinite(self.values)):
            raise ValueError("density contains non-finite entries")


def _values(density):
    if isinstance(density, DensityVector):
        return density.values
    return np.asarray(density, dtype=float).ravel()


class LayerOperatorSet:
    """Corrections + geometry + far-field machinery for one formulation.

    Immutable after construction; apply_* methods are safe to call
    concurrently. Timing accumulates in .t_q (corrections build) and
    .t_mv_total / .n_apply (operator applications).
    """

    def __init__(self, disc: SurfaceDiscretization, formulation: str,
                 eps: float, eta: float = 2.0, use_fmm: bool = True,
                 near: NearMap | None = None, extra_kinds=()):
        self.disc = disc
        self.formulation = formulation.lower()
        if self.formulation not in FORMULATIONS:
            raise ValueError(f"unknown formulation {formulation!r}")
        self.eps = float(eps)
        self.use_fmm = use_fmm
        self.near = near if near is not None else build_near_map(disc, eta)
        kinds = list(dict.fromkeys(
            list(FORMULATIONS[self.formulation]) + list(extra_kinds)))
        self.corrections, self.t_q = compute_corrections(
            disc, self.near, kinds, eps)
        self.t_mv_total = 0.0
        self.n_apply = 0
        self._plan = None
        # scaled oversample data shared by all far evaluations
        self._wover = disc.over_weights
        self._overn = disc.over_normals
        # S[1], stored once for the SWS term of A1
        self.phi0 = self.apply_layer(KernelKind.SINGLE_LAYER,
                                     np.ones(disc.nnodes))

    # -- far field -------------------------------------------------------
    def _far(self, charges, dipoles, outputs):
        if self.use_fmm:
            if self._plan is None:
                self._plan = fmm_mod.FmmPlan(self.disc.over_nodes,
                                             self.disc.nodes, self.eps)
            c_act = None if charges is None else \
                np.abs(charges).max(axis=1) > 0
            d_act = None if dipoles is None else \
                np.abs(dipoles).max(axis=(1, 2)) > 0
            return self._plan.apply(charges, dipoles, outputs, c_act, d_act)
        src = fmm_mod.FmmSources(self.disc.over_nodes, charges, dipoles)
        return fmm_mod.evaluate_direct(src, self.disc.nodes, outputs)

    def _oversample(self, f):
        return interpolate_to_oversampled(self.disc, f)

    def corr(self, kind):
        if kind not in self.corrections:
            raise KeyError(f"corrections for {kind} were not built "
                           f"(formulation {self.formulation})")
        return self.corrections[kind].matrix

    # -- single layer-operator application (one FMM call) ----------------
    def apply_layer(self, kind: KernelKind, density) -> np.ndarray:
        """Locally corrected application of one layer operator."""
        tau = _values(density)
        tilde = self._oversample(tau)
        w = self._wover * tilde
        if kind in (KernelKind.SINGLE_LAYER, KernelKind.SPRIME) or kind in GRADS:
            out = self._far(w[None, :], None,
                            ("pot", "grad") if kind is not KernelKind.SINGLE_LAYER
                            else ("pot",))
            if kind is KernelKind.SINGLE_LAYER:
                far = out.pot[0]
            elif kind is KernelKind.SPRIME:
                far = np.einsum("ik,ik->i", self.disc.normals, out.grad[0])
            else:
                far = out.grad[0][:, GRADS.index(kind)]
        elif kind is KernelKind.DOUBLE_LAYER:
            dip = (w[:, None] * self._overn)[None]
            out = self._far(None, dip, ("pot",))
            far = out.pot[0]
        elif kind is KernelKind.SPP_PLUS_DPRIME:
            dip = (w[:, None] * self._overn)[None]
            out = self._far(np.vstack([w[None], np.zeros_like(w)[None]]),
                            np.concatenate([np.zeros_like(dip), dip]),
                            ("pot", "grad", "hess"))
            n = self.disc.normals
            far = np.einsum("ij,ijk,ik->i", n, out.hess[0], n) \
                + np.einsum("ik,ik->i", n, out.grad[1])
        else:
            raise ValueError(kind)
        return far / FOUR_PI + self.corr(kind) @ tau

    # -- formulations -----------------------------------------------------
    def apply(self, tau) -> np.ndarray:
        return getattr(self, f"apply_{self.formulation}")(tau)

    def apply_a1(self, tau) -> np.ndarray:
        """div S grad_Gamma S tau + S W S tau (two FMM calls: 1 + 3 charge
        densities, potential and gradient each)."""
        t0 = time.perf_counter()
        disc = self.disc
        tau = _values(tau)
        w = self._wover * self._oversample(tau)
        out1 = self._far(w[None], None, ("pot", "grad"))
        s_tau = out1.pot[0] / FOUR_PI + self.corr(KernelKind.SINGLE_LAYER) @ tau
        grad_s = out1.grad[0] / FOUR_PI
        grad_s += np.column_stack([self.corr(k) @ tau for k in GRADS])

        # tangential projection onto the chart (P_t = g^{ij} x_i x_j^T)
        gu = np.einsum("ik,ik->i", grad_s, disc.tangents_u)
        gv = np.einsum("ik,ik->i", grad_s, disc.tangents_v)
        a = disc.inv_metric[:, 0, 0] * gu + disc.inv_metric[:, 0, 1] * gv
        b = disc.inv_metric[:, 1, 0] * gu + disc.inv_metric[:, 1, 1] * gv
        mu = a[:, None] * disc.tangents_u + b[:, None] * disc.tangents_v

        charges = np.stack([self._wover * self._oversample(mu[:, l])
                            for l in range(3)])
        out2 = self._far(charges, None, ("pot", "grad"))
        div = np.zeros(disc.nnodes)
        for l, kind in enumerate(GRADS):
            div += out2.grad[l][:, l] / FOUR_PI + self.corr(kind) @ mu[:, l]
        eta = float(np.dot(s_tau, disc.weights) / disc.weights.sum())
        result = div + eta * self.phi0
        self.t_mv_total += time.perf_counter() - t0
        self.n_apply += 1
        return result

    def apply_a2(self, tau) -> np.ndarray:
        """-tau/4 + D^2 - S(S''+D'+2HS') + SWS (two FMM calls: charge+dipole
        with pot/grad/hess, then charge+dipole with pot)."""
        t0 = time.perf_counter()
        disc = self.disc
        tau = _values(tau)
        w = self._wover * self._oversample(tau)
        dip = (w[:, None] * self._overn)
        charges1 = np.stack([w, np.zeros_like(w)])
        dipoles1 = np.stack([np.zeros_like(dip), dip])
        out1 = self._far(charges1, dipoles1, ("pot", "grad", "hess"))
        n = disc.normals
        s_tau = out1.pot[0] / FOUR_PI + self.corr(KernelKind.SINGLE_LAYER) @ tau
        d_tau = out1.pot[1] / FOUR_PI + self.corr(KernelKind.DOUBLE_LAYER) @ tau
        sp_tau = np.einsum("ik,ik->i", n, out1.grad[0]) / FOUR_PI \
            + self.corr(KernelKind.SPRIME) @ tau
        sppdp_tau = (np.einsum("ij,ijk,ik->i", n, out1.hess[0], n)
                     + np.einsum("ik,ik->i", n, out1.grad[1])) / FOUR_PI \
            + self.corr(KernelKind.SPP_PLUS_DPRIME) @ tau

        ws = float(np.dot(disc.weights, s_tau) / disc.weights.sum())
        mu1 = d_tau
        mu2 = -sppdp_tau - 2.0 * disc.curvature * sp_tau + ws

        wmu1 = self._wover * self._oversample(mu1)
        wmu2 = self._wover * self._oversample(mu2)
        charges2 = np.stack([np.zeros_like(wmu2), wmu2])
        dipoles2 = np.stack([wmu1[:, None] * self._overn,
                             np.zeros((disc.noversampled, 3))])
        out2 = self._far(charges2, dipoles2, ("pot",))
        d_mu1 = out2.pot[0] / FOUR_PI + self.corr(KernelKind.DOUBLE_LAYER) @ mu1
        s_mu2 = out2.pot[1] / FOUR_PI + self.corr(KernelKind.SINGLE_LAYER) @ mu2
        result = -tau / 4.0 + s_mu2 + d_mu1
        self.t_mv_total += time.perf_counter() - t0
        self.n_apply += 1
        return result

    def apply_a3(self, tau) -> np.ndarray:
        """-tau/4 + (S')^2 - (S''+D'+2HS')S + WS^2 (two FMM calls: one
        charge density with pot/grad, then 2 charges + 1 dipole with
        pot/grad/hess)."""
        t0 = time.perf_counter()
        disc = self.disc
        tau = _values(tau)
        w = self._wover * self._oversample(tau)
        out1 = self._far(w[None], None, ("pot", "grad"))
        n = disc.normals
        s_tau = out1.pot[0] / FOUR_PI + self.corr(KernelKind.SINGLE_LAYER) @ tau
        sp_tau = np.einsum("ik,ik->i", n, out1.grad[0]) / FOUR_PI \
            + self.corr(KernelKind.SPRIME) @ tau

        mu1 = sp_tau
        mu2 = s_tau
        wmu1 = self._wover * self._oversample(mu1)
        wmu2 = self._wover * self._oversample(mu2)
        zero = np.zeros_like(wmu1)
        charges2 = np.stack([wmu1, wmu2, zero])
        dipoles2 = np.zeros((3, disc.noversampled, 3))
        dipoles2[2] = wmu2[:, None] * self._overn
        out2 = self._far(charges2, dipoles2, ("pot", "grad", "hess"))
        sp_mu1 = np.einsum("ik,ik->i", n, out2.grad[0]) / FOUR_PI \
            + self.corr(KernelKind.SPRIME) @ mu1
        s_mu2 = out2.pot[1] / FOUR_PI + self.corr(KernelKind.SINGLE_LAYER) @ mu2
        sp_mu2 = np.einsum("ik,ik->i", n, out2.grad[1]) / FOUR_PI \
            + self.corr(KernelKind.SPRIME) @ mu2
        sppdp_mu2 = (np.einsum("ij,ijk,ik->i", n, out2.hess[1], n)
                     + np.einsum("ik,ik->i", n, out2.grad[2])) / FOUR_PI \
            + self.corr(KernelKind.SPP_PLUS_DPRIME) @ mu2

        eta = float(np.dot(disc.weights, s_mu2) / disc.weights.sum())
        result = -tau / 4.0 + sp_mu1 - sppdp_mu2 \
            - 2.0 * disc.curvature * sp_mu2 + eta
        self.t_mv_total += time.perf_counter() - t0
        self.n_apply += 1
        return result

    def evaluate_solution(self, sigma) -> np.ndarray:
        """u from the solved density: S[sigma] for A1/A2, S^2[sigma] for A3."""
        u = self.apply_layer(KernelKind.SINGLE_LAYER, sigma)
        if self.formulation == "a3":
            u = self.apply_layer(KernelKind.SINGLE_LAYER, u)
        return u


def apply_layer(opset: LayerOperatorSet, kind, density) -> DensityVector:
    """Module-level convenience wrapper around LayerOperatorSet.apply_layer."""
    return DensityVector(opset.apply_layer(KernelKind(kind), density))


# ---------------------------------------------------------------------------
# dense assembly (direct-summation path as matrices)


def _layer_matrices(disc, kinds, corrections):
    """Dense N x N operator matrices: smooth far part + corrections."""
    ref = reference_element(disc.order)
    nb = disc.nodes_per_patch
    npat = disc.npatches
    n = disc.nnodes
    # interpolation: nodes -> oversampled, as a sparse block structure
    # applied densely per patch block
    mats = {}
    block = 2048
    over = disc.over_nodes
    overn = disc.over_normals
    w = disc.over_weights
    for kind in kinds:
        mats[kind] = np.empty((n, n))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        tgt = disc.nodes[lo:hi]
        tgtn = disc.normals[lo:hi]
        for kind in kinds:
            kf = kernel_matrix(kind, tgt, over, target_normals=tgtn,
                               source_normals=overn) * w[None, :]
            kf = kf.reshape(hi - lo, npat, -1)
            mats[kind][lo:hi] = np.einsum(
                "tpq,qb->tpb", kf, ref.over_interp).reshape(hi - lo, n)
    for kind in kinds:
        mats[kind] += corrections[kind].matrix.toarray()
    return mats


def assemble_dense(disc: SurfaceDiscretization, formulation: str, eps: float,
                   eta: float = 2.0, near: NearMap | None = None,
                   corrections=None, size_guard: int = 10000) -> np.ndarray:
    """Dense matrix of the chosen formulation via the direct path.

    Column k equals the formulation applied to the unit density e_k with
    direct summation; matvecs with the returned matrix match apply_* up to
    far-field tolerance.
    """
    n = disc.nnodes
    if n > size_guard:
        raise ValueError(f"dense assembly guarded at N = {size_guard}")
    formulation = formulation.lower()
    kinds = FORMULATIONS[formulation]
    if near is None:
        near = build_near_map(disc, eta)
    if corrections is None:
        corrections, _ = compute_corrections(disc, near, kinds, eps)
    mats = _layer_matrices(disc, kinds, corrections)
    wq = disc.weights
    wsum = wq.sum()
    eye = np.eye(n)
    if formulation == "a1":
        ms = mats[KernelKind.SINGLE_LAYER]
        grads = [mats[k] for k in GRADS]
        # tangential projector applied between the two gradient passes
        proj = _tangent_projector(disc)
        a1 = np.zeros((n, n))
        for l in range(3):
            mid = np.zeros((n, n))
            for m in range(3):
                mid += proj[:, l, m][:, None] * grads[m]
            a1 += grads[l] @ mid
        a1 += (ms @ (np.outer(np.ones(n), wq) / wsum)) @ ms
        return a1
    if formulation == "a2":
        ms = mats[KernelKind.SINGLE_LAYER]
        md = mats[KernelKind.DOUBLE_LAYER]
        msp = mats[KernelKind.SPRIME]
        mspp = mats[KernelKind.SPP_PLUS_DPRIME]
        h = disc.curvature
        sws = (ms @ (np.outer(np.ones(n), wq) / wsum)) @ ms
        return -eye / 4.0 + md @ md - ms @ (mspp + 2.0 * h[:, None] * msp) \
            + sws
    if formulation == "a3":
        ms = mats[KernelKind.SINGLE_LAYER]
        msp = mats[KernelKind.SPRIME]
        mspp = mats[KernelKind.SPP_PLUS_DPRIME]
        h = disc.curvature
        wss = (np.outer(np.ones(n), wq) / wsum) @ (ms @ ms)
        return -eye / 4.0 + msp @ msp - (mspp + 2.0 * h[:, None] * msp) @ ms \
            + wss
    raise ValueError(formulation)


def _tangent_projector(disc):
    """Per-node tangential projector P = g^{ij} x_i x_j^T, shape (N, 3, 3)."""
    xu = disc.tangents_u
    xv = disc.tangents_v
    gi = disc.inv_metric
    return (
        gi[:, 0, 0, None, None] * xu[:, :, None] * xu[:, None, :]
        + gi[:, 0, 1, None, None] * xu[:, :, None] * xv[:, None, :]
        + gi[:, 1, 0, None, None] * xv[:, :, None] * xu[:, None, :]
        + gi[:, 1, 1, None, None] * xv[:, :, None] * xv[:, None, :]
    )
