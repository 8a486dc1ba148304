"""Numba kernels for grouped multi-density point sums (1/r, no 4 pi).

Groups partition the targets (each leaf box owns its targets), so the
parallel loop over groups writes disjoint output rows. Sources per group
carry charges and dipole vectors for every density; potentials, gradients
and Hessians accumulate according to the requested output level.
"""

from __future__ import annotations

import warnings

import numpy as np
from numba import NumbaWarning, njit, prange

warnings.filterwarnings("ignore", message=".*TBB.*", category=NumbaWarning)


@njit(cache=True, parallel=True, fastmath=True)
def grouped_direct(t_xyz, t_out, t_off, s_xyz, s_c, s_v, s_off,
                   use_c, use_d, level, pot, grad, hess):
    """Accumulate sums of c/r + v.r/r^3 (and derivatives) per group.

    t_xyz (ntf, 3) with output rows t_out (ntf,); groups delimited by
    t_off/s_off; s_c (nd, nsf), s_v (nd, nsf, 3). level: 0 pot, 1 +grad,
    2 +hess. Coincident pairs (r = 0) are skipped.
    """
    ng = t_off.shape[0] - 1
    nd = s_c.shape[0]
    for gp in prange(ng):
        for ti in range(t_off[gp], t_off[gp + 1]):
            tx = t_xyz[ti, 0]
            ty = t_xyz[ti, 1]
            tz = t_xyz[ti, 2]
            row = t_out[ti]
            for si in range(s_off[gp], s_off[gp + 1]):
                r0 = tx - s_xyz[si, 0]
                r1 = ty - s_xyz[si, 1]
                r2 = tz - s_xyz[si, 2]
                rr = r0 * r0 + r1 * r1 + r2 * r2
                if rr == 0.0:
                    continue
                invr = 1.0 / np.sqrt(rr)
                invr3 = invr / rr
                invr5 = invr3 / rr
                for l in range(nd):
                    if use_c[l]:
                        c = s_c[l, si]
                        if c != 0.0:
                            pot[l, row] += c * invr
                            if level >= 1:
                                grad[l, row, 0] -= c * r0 * invr3
                                grad[l, row, 1] -= c * r1 * invr3
                                grad[l, row, 2] -= c * r2 * invr3
                            if level >= 2:
                                ci5 = 3.0 * c * invr5
                                hess[l, row, 0, 0] += ci5 * r0 * r0 - c * invr3
                                hess[l, row, 1, 1] += ci5 * r1 * r1 - c * invr3
                                hess[l, row, 2, 2] += ci5 * r2 * r2 - c * invr3
                                hess[l, row, 0, 1] += ci5 * r0 * r1
                                hess[l, row, 0, 2] += ci5 * r0 * r2
                                hess[l, row, 1, 2] += ci5 * r1 * r2
                    if use_d[l]:
                        v0 = s_v[l, si, 0]
                        v1 = s_v[l, si, 1]
                        v2 = s_v[l, si, 2]
                        vr = v0 * r0 + v1 * r1 + v2 * r2
                        pot[l, row] += vr * invr3
                        if level >= 1:
                            vr3 = 3.0 * vr * invr5
                            grad[l, row, 0] += v0 * invr3 - vr3 * r0
                            grad[l, row, 1] += v1 * invr3 - vr3 * r1
                            grad[l, row, 2] += v2 * invr3 - vr3 * r2
                        if level >= 2:
                            invr7 = invr5 / rr
                            w15 = 15.0 * vr * invr7
                            i5 = 3.0 * invr5
                            hess[l, row, 0, 0] += w15 * r0 * r0 \
                                - i5 * (2.0 * v0 * r0 + vr)
                            hess[l, row, 1, 1] += w15 * r1 * r1 \
                                - i5 * (2.0 * v1 * r1 + vr)
                            hess[l, row, 2, 2] += w15 * r2 * r2 \
                                - i5 * (2.0 * v2 * r2 + vr)
                            hess[l, row, 0, 1] += w15 * r0 * r1 \
                                - i5 * (v0 * r1 + v1 * r0)
                            hess[l, row, 0, 2] += w15 * r0 * r2 \
                                - i5 * (v0 * r2 + v2 * r0)
                            hess[l, row, 1, 2] += w15 * r1 * r2 \
                                - i5 * (v1 * r2 + v2 * r1)


def run_grouped_direct(t_xyz, t_out, t_off, s_xyz, s_c, s_v, s_off,
                       use_c, use_d, want, nd, ntargets):
    """Wrapper allocating outputs and symmetrizing the Hessian."""
    level = 2 if "hess" in want else (1 if "grad" in want else 0)
    pot = np.zeros((nd, ntargets))
    grad = np.zeros((nd, ntargets, 3)) if level >= 1 else np.zeros((nd, 0, 3))
    hess = np.zeros((nd, ntargets, 3, 3)) if level >= 2 \
        else np.zeros((nd, 0, 3, 3))
    grouped_direct(
        np.ascontiguousarray(t_xyz), t_out, t_off,
        np.ascontiguousarray(s_xyz),
        np.ascontiguousarray(s_c), np.ascontiguousarray(s_v), s_off,
        use_c, use_d, level, pot, grad, hess)
    if level >= 2:
        hess[:, :, 1, 0] = hess[:, :, 0, 1]
        hess[:, :, 2, 0] = hess[:, :, 0, 2]
        hess[:, :, 2, 1] = hess[:, :, 1, 2]
    out = {"pot": pot}
    if "grad" in want:
        out["grad"] = grad
    if "hess" in want:
        out["hess"] = hess
    return out
