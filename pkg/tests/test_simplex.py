import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapbel import simplex as sx


def test_rule_exactness():
    # integral of u^a v^b over T0 is a! b! / (a+b+2)!
    from math import factorial
    pts, w = sx.triangle_rule(6)
    for a in range(6):
        for b in range(6 - a):
            exact = factorial(a) * factorial(b) / factorial(a + b + 2)
            got = float((w * pts[:, 0] ** a * pts[:, 1] ** b).sum())
            assert abs(got - exact) <= 1e-14 * max(1.0, exact)
    assert w.min() > 0
    assert abs(w.sum() - 0.5) < 1e-14


@pytest.mark.parametrize("p", [2, 4, 5, 8, 12])
def test_koornwinder_orthonormal(p):
    pts, w = sx.triangle_rule(p + 2)
    psi = sx.koornwinder(p, pts[:, 0], pts[:, 1])
    gram = (psi * w[:, None]).T @ psi
    assert np.abs(gram - np.eye(gram.shape[0])).max() < 1e-13


def test_koornwinder_derivatives_match_fd():
    rng = np.random.default_rng(0)
    uv = rng.uniform(0.05, 0.4, size=(40, 2))
    val, du, dv = sx.koornwinder_derivs(6, uv[:, 0], uv[:, 1])
    h = 1e-6
    dun = (sx.koornwinder(6, uv[:, 0] + h, uv[:, 1])
           - sx.koornwinder(6, uv[:, 0] - h, uv[:, 1])) / (2 * h)
    dvn = (sx.koornwinder(6, uv[:, 0], uv[:, 1] + h)
           - sx.koornwinder(6, uv[:, 0], uv[:, 1] - h)) / (2 * h)
    assert np.abs(du - dun).max() < 1e-7
    assert np.abs(dv - dvn).max() < 1e-7


@pytest.mark.parametrize("p", range(2, 13))
def test_nodes_interior_and_conditioned(p):
    re = sx.reference_element(p)
    nodes = re.nodes
    assert nodes.shape == (sx.basis_size(p), 2)
    bary_margin = min(nodes.min(), (1.0 - nodes.sum(axis=1)).min())
    assert bary_margin > 1e-3
    assert np.linalg.cond(re.vand) < 200.0
    # oversample points stay clear of the interpolation nodes
    d = np.sqrt(((re.over_pts[:, None] - nodes[None]) ** 2).sum(-1))
    assert d.min() > 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=2, max_value=8), st.randoms(use_true_random=False))
def test_interpolation_reproduces_polynomials(p, rnd):
    rng = np.random.default_rng(rnd.randint(0, 2**31))
    re = sx.reference_element(p)
    coeff = rng.standard_normal(sx.basis_size(p))
    vals = re.vand @ coeff
    pts = rng.uniform(0.0, 1.0, size=(30, 2))
    pts[:, 1] *= 1.0 - pts[:, 0]
    interp = re.interp_matrix(pts[:, 0], pts[:, 1]) @ vals
    direct = sx.koornwinder(p, pts[:, 0], pts[:, 1]) @ coeff
    assert np.abs(interp - direct).max() < 1e-11 * max(1.0, np.abs(direct).max())


def test_spectral_differentiation_exact_for_polynomials():
    p = 6
    re = sx.reference_element(p)
    u, v = re.nodes[:, 0], re.nodes[:, 1]
    f = 1.0 + 2 * u - v + 3 * u * v - u**2 * v**2  # degree 4 < p
    dfdu = 2.0 + 3 * v - 2 * u * v**2
    dfdv = -1.0 + 3 * u - 2 * u**2 * v
    assert np.abs(re.dmat_u @ f - dfdu).max() < 1e-11
    assert np.abs(re.dmat_v @ f - dfdv).max() < 1e-11


def test_split4_partitions_area():
    tris = sx.split4(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]))
    def area(t):
        return 0.5 * abs(np.cross(t[1] - t[0], t[2] - t[0]))
    assert abs(sum(area(t) for t in tris) - 0.5) < 1e-15
    assert all(abs(area(t) - 0.125) < 1e-15 for t in tris)


def test_weight_interp_gives_positive_total():
    re = sx.reference_element(5)
    w_nodes = re.weight_interp.T @ re.rule_wts
    assert abs(w_nodes.sum() - 0.5) < 1e-13
