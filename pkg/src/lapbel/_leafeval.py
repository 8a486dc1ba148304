"""Fused numba kernel for adaptive-quadrature leaf evaluation.

One call evaluates a batch of leaf triangles: rule-point mapping, the
Koornwinder basis by recurrence, chart geometry, all requested layer
kernels, and the basis-weighted accumulation, without numpy temporaries.
The basis columns come out in k-major order; the caller permutes them to
the package's degree-major layout.
"""

from __future__ import annotations

import warnings

import numpy as np
from numba import NumbaWarning, njit, prange

warnings.filterwarnings("ignore", message=".*TBB.*", category=NumbaWarning)

FOUR_PI = 4.0 * np.pi

# kind codes (keep in sync with quadrature._KIND_CODES)
K_S, K_D, K_SP, K_G1, K_G2, K_G3, K_SPPDP = 0, 1, 2, 3, 4, 5, 6


@njit(cache=True, inline="always")
def _basis_kmajor(order, u, v, psi, leg):
    """Koornwinder basis at one point, k-major layout, into psi[nb]."""
    vm = min(v, 1.0 - 1e-14)
    a = 2.0 * u / (1.0 - vm) - 1.0
    b = 2.0 * v - 1.0
    one_m_v = 1.0 - vm
    # legendre values P_0..P_{order-1}(a)
    leg[0] = 1.0
    if order > 1:
        leg[1] = a
    for n in range(2, order):
        leg[n] = ((2 * n - 1) * a * leg[n - 1] - (n - 1) * leg[n - 2]) / n
    col = 0
    powv = 1.0
    for k in range(order):
        alpha = 2.0 * k + 1.0
        lk = leg[k] * powv
        qm1 = 1.0
        qm2 = 0.0
        for l in range(order - k):
            if l == 0:
                q = 1.0
            elif l == 1:
                q = ((alpha + 2.0) * b + alpha) / 2.0
            else:
                c0 = 2.0 * l * (l + alpha) * (2 * l + alpha - 2)
                c1 = (2 * l + alpha - 1) * (2 * l + alpha) * (2 * l + alpha - 2)
                c2 = (2 * l + alpha - 1) * alpha * alpha
                c3 = 2.0 * (l + alpha - 1) * (l - 1) * (2 * l + alpha)
                q = ((c1 * b + c2) * qm1 - c3 * qm2) / c0
            psi[col] = np.sqrt(2.0 * (2 * k + 1) * (k + l + 1)) * lk * q
            col += 1
            qm2 = qm1
            qm1 = q
        powv *= one_m_v
    return col


@njit(cache=True, parallel=True, fastmath=True)
def eval_leaves(order, nb, rule, rule_w, duffy, verts, xs, nxs, patch_ids,
                coeffs, kind_codes, psi0, use_shift, out, mind, diam):
    """Evaluate all items in the batch; fills out (ni, nk, nb) k-major."""
    ni = verts.shape[0]
    nq = rule.shape[0]
    nk = kind_codes.shape[0]
    for i in prange(ni):
        v00 = verts[i, 0, 0]
        v01 = verts[i, 0, 1]
        e1u = verts[i, 1, 0] - v00
        e1v = verts[i, 1, 1] - v01
        e2u = verts[i, 2, 0] - v00
        e2v = verts[i, 2, 1] - v01
        area2 = abs(e1u * e2v - e1v * e2u)
        x0 = xs[i, 0]
        x1 = xs[i, 1]
        x2 = xs[i, 2]
        n0 = nxs[i, 0]
        n1 = nxs[i, 1]
        n2 = nxs[i, 2]
        pid = patch_ids[i]
        psi = np.empty(nb)
        leg = np.empty(order)
        ys = np.empty((nq, 3))
        md2 = 1e300
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for q in range(nq):
            aq = rule[q, 0]
            bq = rule[q, 1]
            if duffy:
                du = (1.0 - bq) * e1u + bq * e2u
                dv = (1.0 - bq) * e1v + bq * e2v
                uu = v00 + aq * du
                vv = v01 + aq * dv
            else:
                uu = v00 + aq * e1u + bq * e2u
                vv = v01 + aq * e1v + bq * e2v
            _basis_kmajor(order, uu, vv, psi, leg)
            g0 = 0.0
            g1 = 0.0
            g2 = 0.0
            g3 = 0.0
            g4 = 0.0
            g5 = 0.0
            g6 = 0.0
            g7 = 0.0
            g8 = 0.0
            for bcol in range(nb):
                pb = psi[bcol]
                g0 += pb * coeffs[pid, bcol, 0]
                g1 += pb * coeffs[pid, bcol, 1]
                g2 += pb * coeffs[pid, bcol, 2]
                g3 += pb * coeffs[pid, bcol, 3]
                g4 += pb * coeffs[pid, bcol, 4]
                g5 += pb * coeffs[pid, bcol, 5]
                g6 += pb * coeffs[pid, bcol, 6]
                g7 += pb * coeffs[pid, bcol, 7]
                g8 += pb * coeffs[pid, bcol, 8]
            cr0 = g4 * g8 - g5 * g7
            cr1 = g5 * g6 - g3 * g8
            cr2 = g3 * g7 - g4 * g6
            jac = np.sqrt(cr0 * cr0 + cr1 * cr1 + cr2 * cr2)
            ny0 = cr0 / jac
            ny1 = cr1 / jac
            ny2 = cr2 / jac
            r0 = x0 - g0
            r1 = x1 - g1
            r2c = x2 - g2
            rr = r0 * r0 + r1 * r1 + r2c * r2c
            if rr < 1e-280:
                rr = 1e-280
            if rr < md2:
                md2 = rr
            ys[q, 0] = g0
            ys[q, 1] = g1
            ys[q, 2] = g2
            c0 += g0
            c1 += g1
            c2 += g2
            invr = 1.0 / np.sqrt(rr)
            invr3 = invr / rr
            w = rule_w[q] * area2 * jac
            for k in range(nk):
                code = kind_codes[k]
                if code == K_S:
                    ker = invr / FOUR_PI
                elif code == K_D:
                    ker = (r0 * ny0 + r1 * ny1 + r2c * ny2) * invr3 / FOUR_PI
                elif code == K_SP:
                    ker = -(r0 * n0 + r1 * n1 + r2c * n2) * invr3 / FOUR_PI
                elif code == K_G1:
                    ker = -r0 * invr3 / FOUR_PI
                elif code == K_G2:
                    ker = -r1 * invr3 / FOUR_PI
                elif code == K_G3:
                    ker = -r2c * invr3 / FOUR_PI
                else:
                    d0 = n0 - ny0
                    d1 = n1 - ny1
                    d2 = n2 - ny2
                    rnx = r0 * n0 + r1 * n1 + r2c * n2
                    rdn = r0 * d0 + r1 * d1 + r2c * d2
                    ndn = n0 * d0 + n1 * d1 + n2 * d2
                    ker = (3.0 * rnx * rdn / rr - ndn) * invr3 / FOUR_PI
                kw = ker * w
                if use_shift[k]:
                    for bcol in range(nb):
                        out[i, k, bcol] += kw * (psi[bcol] - psi0[i, bcol])
                else:
                    for bcol in range(nb):
                        out[i, k, bcol] += kw * psi[bcol]
        c0 /= nq
        c1 /= nq
        c2 /= nq
        dm2 = 0.0
        for q in range(nq):
            t0 = ys[q, 0] - c0
            t1 = ys[q, 1] - c1
            t2 = ys[q, 2] - c2
            dd = t0 * t0 + t1 * t1 + t2 * t2
            if dd > dm2:
                dm2 = dd
        mind[i] = np.sqrt(md2)
        diam[i] = 2.0 * np.sqrt(dm2)
