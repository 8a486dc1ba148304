"""Analytic geometry generators: sphere, torus, twisted torus.

Each generator triangulates a parameter domain, samples the chart and its
exact first derivatives at the interpolation nodes of every triangle, and
assembles a SurfaceDiscretization. Outward orientation is enforced (and
asserted through the divergence-theorem volume ∫ n.x da = 3V > 0).
"""

from __future__ import annotations

import numpy as np

from .simplex import reference_element, split4
from .surface import SurfaceDiscretization, build_from_samples

__all__ = ["build_sphere", "build_torus", "build_twisted_torus",
           "TWISTED_TORUS_COEFFS"]


def _refine_triangles(tris, nrefine):
    for _ in range(nrefine):
        out = []
        for t in tris:
            out.extend(split4(t))
        tris = out
    return [np.asarray(t, dtype=float) for t in tris]


def _sample_patches(order, tris, chart):
    """Sample chart(X2d) and derivatives on each affine triangle.

    chart maps 2D parameter points (n, 2) to (X, dX/dp1, dX/dp2) in 3D;
    the affine map from T0 composes in.
    """
    ref = reference_element(order)
    uv = ref.nodes
    xs, xus, xvs = [], [], []
    for t in tris:
        p = t[0] + np.outer(uv[:, 0], t[1] - t[0]) + np.outer(uv[:, 1], t[2] - t[0])
        x, d1, d2 = chart(p)
        e1 = t[1] - t[0]
        e2 = t[2] - t[0]
        xs.append(x)
        xus.append(d1 * e1[0] + d2 * e1[1])
        xvs.append(d1 * e2[0] + d2 * e2[1])
    return (np.array(xs), np.array(xus), np.array(xvs))


def _check_outward(disc: SurfaceDiscretization, name: str):
    vol3 = float(np.dot(disc.weights,
                        np.einsum("ik,ik->i", disc.nodes, disc.normals)))
    if vol3 <= 0:
        raise AssertionError(
            f"{name} generator produced inward orientation (3V = {vol3:.3e})")


def build_sphere(order: int, nrefine: int) -> SurfaceDiscretization:
    """Unit sphere from a radially projected triangulated cube.

    Each of the 6 faces splits into 2 triangles refined nrefine times
    uniformly: 12 * 4^nrefine patches. Chart derivatives are the analytic
    derivatives of the radial projection.
    """
    if not (2 <= order <= 12):
        raise ValueError("order must be in [2, 12]")
    if nrefine < 0:
        raise ValueError("nrefine must be >= 0")

    faces = []
    for axis in range(3):
        for sign in (1.0, -1.0):
            n = np.zeros(3)
            n[axis] = sign
            e1 = np.zeros(3)
            e1[(axis + 1) % 3] = 1.0
            e2 = np.cross(n, e1)
            faces.append((n, e1, e2))

    base = [np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0]]),
            np.array([[-1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])]
    tris2d = _refine_triangles(base, nrefine)

    xs, xus, xvs = [], [], []
    for n, e1, e2 in faces:
        def chart(p, n=n, e1=e1, e2=e2):
            c = n[None, :] + np.outer(p[:, 0], e1) + np.outer(p[:, 1], e2)
            r = np.linalg.norm(c, axis=1, keepdims=True)
            x = c / r
            # d(c/|c|) = (I - x x^T)/|c| applied to dc
            def proj(dc):
                return (dc - x * np.einsum("ik,ik->i", x, dc)[:, None]) / r
            return x, proj(np.broadcast_to(e1, c.shape)), \
                proj(np.broadcast_to(e2, c.shape))
        x, xu, xv = _sample_patches(order, tris2d, chart)
        xs.append(x)
        xus.append(xu)
        xvs.append(xv)
    disc = build_from_samples(order, np.concatenate(xs), np.concatenate(xus),
                              np.concatenate(xvs),
                              metadata={"geometry": "sphere",
                                        "nrefine": nrefine})
    _check_outward(disc, "sphere")
    return disc


def _param_grid_triangles(nu: int, nv: int, flip: bool = False):
    """Split [0, 2pi]^2 into nu x nv quads, two triangles each.

    flip reverses the triangle orientation; both torus charts have inward
    cross(X_u, X_v) in their natural (u, v) order, so they pass flip=True
    to get outward normals.
    """
    du = 2 * np.pi / nu
    dv = 2 * np.pi / nv
    tris = []
    for i in range(nu):
        for j in range(nv):
            u0, v0 = i * du, j * dv
            a = [u0, v0]
            b = [u0 + du, v0]
            c = [u0 + du, v0 + dv]
            d = [u0, v0 + dv]
            if flip:
                tris.append(np.array([a, c, b]))
                tris.append(np.array([a, d, c]))
            else:
                tris.append(np.array([a, b, c]))
                tris.append(np.array([a, c, d]))
    return tris


def build_torus(order: int, nu: int, nv: int, R: float, r: float
                ) -> SurfaceDiscretization:
    """Standard torus ((R + r cos u) cos v, (R + r cos u) sin v, r sin u)."""
    if R <= r or r <= 0:
        raise ValueError("torus requires R > r > 0")
    if nu < 4 or nv < 4:
        raise ValueError("nu, nv must be >= 4")

    def chart(p):
        u, v = p[:, 0], p[:, 1]
        cu, su = np.cos(u), np.sin(u)
        cv, sv = np.cos(v), np.sin(v)
        ring = R + r * cu
        x = np.column_stack([ring * cv, ring * sv, r * su])
        dxdu = np.column_stack([-r * su * cv, -r * su * sv, r * cu])
        dxdv = np.column_stack([-ring * sv, ring * cv, np.zeros_like(u)])
        return x, dxdu, dxdv

    xs, xus, xvs = _sample_patches(
        order, _param_grid_triangles(nu, nv, flip=True), chart)
    disc = build_from_samples(order, xs, xus, xvs,
                              metadata={"geometry": "torus", "R": R, "r": r,
                                        "nu": nu, "nv": nv})
    _check_outward(disc, "torus")
    return disc


# twisted torus Fourier coefficients delta_{i,j}, i, j in [-1, 2]
TWISTED_TORUS_COEFFS = {
    (-1, -1): 0.17, (-1, 0): 0.11, (0, 0): 1.0, (1, 0): 4.5,
    (2, 0): -0.25, (0, 1): 0.01, (2, 1): -0.45,
}


def build_twisted_torus(order: int, nu: int, nv: int) -> SurfaceDiscretization:
    """Genus-1 twisted torus given by a small Fourier sum over [0, 2pi]^2.

    X(u,v) = sum_ij delta_ij (cos v cos((1-i)u + jv),
                              sin v cos((1-i)u + jv),
                              sin((1-i)u + jv)).
    """
    if nu < 4 or nv < 4:
        raise ValueError("nu, nv must be >= 4")

    def chart(p):
        u, v = p[:, 0], p[:, 1]
        x = np.zeros((len(u), 3))
        dxdu = np.zeros((len(u), 3))
        dxdv = np.zeros((len(u), 3))
        cv, sv = np.cos(v), np.sin(v)
        for (i, j), d in TWISTED_TORUS_COEFFS.items():
            w = (1 - i) * u + j * v
            cw, sw = np.cos(w), np.sin(w)
            x += d * np.column_stack([cv * cw, sv * cw, sw])
            dxdu += d * np.column_stack([-cv * sw * (1 - i),
                                         -sv * sw * (1 - i), cw * (1 - i)])
            dxdv += d * np.column_stack([-sv * cw - cv * sw * j,
                                         cv * cw - sv * sw * j, cw * j])
        return x, dxdu, dxdv

    xs, xus, xvs = _sample_patches(
        order, _param_grid_triangles(nu, nv, flip=True), chart)
    disc = build_from_samples(order, xs, xus, xvs,
                              metadata={"geometry": "twisted-torus",
                                        "nu": nu, "nv": nv})
    _check_outward(disc, "twisted-torus")
    return disc
