"""Pointwise Laplace layer-potential kernels.

All kernels carry the physical 1/(4 pi) normalization of the free-space
Green's function G(x, y) = 1/(4 pi |x - y|). The hypersingular pair
S'' + D' is only ever evaluated as a single combined kernel; the 1/r^3
singularities cancel analytically and the combination is weakly singular
on a smooth surface.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

FOUR_PI = 4.0 * np.pi

__all__ = ["KernelKind", "eval_kernel", "kernel_matrix", "SingularEvaluation"]


class SingularEvaluation(ValueError):
    """Raised when a kernel is evaluated at (numerically) coincident points."""


class KernelKind(Enum):
    SINGLE_LAYER = "s"
    DOUBLE_LAYER = "d"
    SPRIME = "sprime"
    GRAD_S1 = "grads1"
    GRAD_S2 = "grads2"
    GRAD_S3 = "grads3"
    SPP_PLUS_DPRIME = "spp_plus_dprime"

    @property
    def needs_target_normal(self) -> bool:
        return self in (KernelKind.SPRIME, KernelKind.SPP_PLUS_DPRIME)

    @property
    def needs_source_normal(self) -> bool:
        return self in (KernelKind.DOUBLE_LAYER, KernelKind.SPP_PLUS_DPRIME)


def _components(kind, r, r2, nx, ny):
    """Kernel value given r = x - y (..., 3) and unit normals (broadcastable)."""
    invr = 1.0 / np.sqrt(r2)
    invr3 = invr / r2
    if kind is KernelKind.SINGLE_LAYER:
        return invr / FOUR_PI
    if kind is KernelKind.DOUBLE_LAYER:
        # grad_y G . n(y) = (r . n_y) / (4 pi |r|^3)
        return np.einsum("...k,...k->...", r, ny) * invr3 / FOUR_PI
    if kind is KernelKind.SPRIME:
        return -np.einsum("...k,...k->...", r, nx) * invr3 / FOUR_PI
    if kind is KernelKind.GRAD_S1:
        return -r[..., 0] * invr3 / FOUR_PI
    if kind is KernelKind.GRAD_S2:
        return -r[..., 1] * invr3 / FOUR_PI
    if kind is KernelKind.GRAD_S3:
        return -r[..., 2] * invr3 / FOUR_PI
    if kind is KernelKind.SPP_PLUS_DPRIME:
        # n_x . (grad_x grad_x G) . (n_x - n_y); the shared-Hessian form is
        # stable near the diagonal because the difference n_x - n_y is O(|r|)
        dn = nx - ny
        rnx = np.einsum("...k,...k->...", r, nx)
        rdn = np.einsum("...k,...k->...", r, dn)
        ndn = np.einsum("...k,...k->...", nx, dn)
        return (3.0 * rnx * rdn / r2 - ndn) * invr3 / FOUR_PI
    raise ValueError(f"unknown kernel kind {kind!r}")


def eval_kernel(kind, x, y, n_x=None, n_y=None):
    """Evaluate one layer-potential kernel at target x, source y.

    Parameters broadcast; x, y are points (..., 3) and n_x, n_y unit normals
    where the kind requires them. Raises SingularEvaluation when
    |x - y| < 1e-300.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = x - y
    r2 = np.einsum("...k,...k->...", r, r)
    if np.any(np.sqrt(r2) < 1e-300):
        raise SingularEvaluation("kernel evaluated at coincident points")
    if kind.needs_target_normal and n_x is None:
        raise ValueError(f"{kind} requires the target normal")
    if kind.needs_source_normal and n_y is None:
        raise ValueError(f"{kind} requires the source normal")
    nx = None if n_x is None else np.asarray(n_x, dtype=float)
    ny = None if n_y is None else np.asarray(n_y, dtype=float)
    return _components(kind, r, r2, nx, ny)


def kernel_matrix(kind, targets, sources, target_normals=None, source_normals=None):
    """Dense kernel matrix K[i, j] = kernel(x_i, y_j), shape (nt, ns)."""
    x = np.asarray(targets, dtype=float)[:, None, :]
    y = np.asarray(sources, dtype=float)[None, :, :]
    nx = None
    ny = None
    if target_normals is not None:
        nx = np.asarray(target_normals, dtype=float)[:, None, :]
    if source_normals is not None:
        ny = np.asarray(source_normals, dtype=float)[None, :, :]
    r = x - y
    r2 = np.einsum("...k,...k->...", r, r)
    if np.any(np.sqrt(r2) < 1e-300):
        raise SingularEvaluation("kernel matrix with coincident target/source")
    return _components(kind, r, r2, nx, ny)
