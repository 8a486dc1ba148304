import numpy as np
import pytest

from lapbel.kernels import FOUR_PI, KernelKind, SingularEvaluation, eval_kernel, kernel_matrix


def test_single_layer_value():
    x = np.array([1.0, 0.0, 0.0])
    y = np.zeros(3)
    assert eval_kernel(KernelKind.SINGLE_LAYER, x, y) == pytest.approx(1 / FOUR_PI)


def test_grad_s_value():
    x = np.array([2.0, 0.0, 0.0])
    y = np.zeros(3)
    # grad_x G = -x / (4 pi |x|^3)
    assert eval_kernel(KernelKind.GRAD_S1, x, y) == pytest.approx(-1 / (16 * np.pi))
    assert eval_kernel(KernelKind.GRAD_S2, x, y) == pytest.approx(0.0)
    assert eval_kernel(KernelKind.GRAD_S3, x, y) == pytest.approx(0.0)


def test_spp_plus_dprime_cancels_for_equal_normals():
    n = np.array([0.0, 0.0, 1.0])
    x = np.array([0.3, -0.2, 0.0])
    y = np.array([-0.5, 0.1, 0.0])  # x - y perpendicular to n
    val = eval_kernel(KernelKind.SPP_PLUS_DPRIME, x, y, n_x=n, n_y=n)
    assert abs(val) < 1e-15


def test_coincident_points_raise():
    x = np.zeros(3)
    with pytest.raises(SingularEvaluation):
        eval_kernel(KernelKind.SINGLE_LAYER, x, x)


def _hessian_g(x, y):
    r = x - y
    rn = np.linalg.norm(r)
    return (3 * np.outer(r, r) / rn**2 - np.eye(3)) / (FOUR_PI * rn**3)


def test_harmonicity_of_hessian():
    rng = np.random.default_rng(1)
    for _ in range(20):
        x = rng.standard_normal(3)
        y = rng.standard_normal(3)
        if np.linalg.norm(x - y) < 0.1:
            continue
        h = _hessian_g(x, y)
        assert abs(np.trace(h)) < 1e-12 * np.abs(h).max()


def test_gradient_antisymmetry_and_fd():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(3) + np.array([2.0, 0, 0])
    y = rng.standard_normal(3)

    def g(x_):
        return 1.0 / (FOUR_PI * np.linalg.norm(x_ - y))

    step = 1e-5 * np.linalg.norm(x - y)
    for axis, kind in enumerate((KernelKind.GRAD_S1, KernelKind.GRAD_S2,
                                 KernelKind.GRAD_S3)):
        e = np.zeros(3)
        e[axis] = step
        fd = (g(x + e) - g(x - e)) / (2 * step)
        assert eval_kernel(kind, x, y) == pytest.approx(fd, rel=1e-8)


def test_spp_plus_dprime_matches_finite_differences():
    # combined kernel = n_x.(Hess_x G).n_x + n_x.(grad_x grad_y G).n_y
    rng = np.random.default_rng(3)
    x = np.array([1.1, 0.2, -0.3])
    y = np.array([-0.4, 0.5, 0.6])
    nx = rng.standard_normal(3)
    nx /= np.linalg.norm(nx)
    ny = rng.standard_normal(3)
    ny /= np.linalg.norm(ny)
    h = _hessian_g(x, y)
    expect = nx @ h @ nx - nx @ h @ ny  # grad_x grad_y G = -Hess_x G
    got = eval_kernel(KernelKind.SPP_PLUS_DPRIME, x, y, n_x=nx, n_y=ny)
    assert got == pytest.approx(expect, rel=1e-13)


def test_double_layer_sign_gauss_center():
    # for the unit sphere the kernel integrates to -1 at the center
    rng = np.random.default_rng(4)
    npts = 40000
    v = rng.standard_normal((npts, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    vals = kernel_matrix(KernelKind.DOUBLE_LAYER, np.zeros((1, 3)), v,
                         source_normals=v)
    total = vals.sum() * (4 * np.pi / npts)
    assert total == pytest.approx(-1.0, abs=2e-2)


def test_kernel_matrix_matches_pointwise():
    rng = np.random.default_rng(5)
    t = rng.standard_normal((4, 3)) + np.array([4.0, 0, 0])
    s = rng.standard_normal((5, 3))
    ns = rng.standard_normal((5, 3))
    ns /= np.linalg.norm(ns, axis=1, keepdims=True)
    nt = rng.standard_normal((4, 3))
    nt /= np.linalg.norm(nt, axis=1, keepdims=True)
    for kind in KernelKind:
        mat = kernel_matrix(kind, t, s, target_normals=nt, source_normals=ns)
        for i in range(4):
            for j in range(5):
                assert mat[i, j] == pytest.approx(
                    eval_kernel(kind, t[i], s[j], n_x=nt[i], n_y=ns[j]), rel=1e-14)
