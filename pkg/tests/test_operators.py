import numpy as np
import pytest

from lapbel import shapes
from lapbel.harmonics import real_ynm
from lapbel.kernels import KernelKind
from lapbel.operators import (DensityVector, FORMULATIONS, LayerOperatorSet,
                              assemble_dense)


@pytest.fixture(scope="module")
def sphere():
    return shapes.build_sphere(4, 1)


@pytest.fixture(scope="module")
def opsets(sphere):
    return {form: LayerOperatorSet(sphere, form, 1e-6, use_fmm=False)
            for form in ("a1", "a2", "a3")}


def test_formulation_kind_lists():
    assert set(FORMULATIONS["a1"]) == {
        KernelKind.SINGLE_LAYER, KernelKind.GRAD_S1, KernelKind.GRAD_S2,
        KernelKind.GRAD_S3}
    assert set(FORMULATIONS["a2"]) == {
        KernelKind.SINGLE_LAYER, KernelKind.DOUBLE_LAYER, KernelKind.SPRIME,
        KernelKind.SPP_PLUS_DPRIME}
    assert set(FORMULATIONS["a3"]) == {
        KernelKind.SINGLE_LAYER, KernelKind.SPRIME,
        KernelKind.SPP_PLUS_DPRIME}


def test_missing_correction_raises(opsets):
    with pytest.raises(KeyError):
        opsets["a3"].corr(KernelKind.DOUBLE_LAYER)


def test_apply_layer_single_on_constant(opsets, sphere):
    s1 = opsets["a2"].apply_layer(KernelKind.SINGLE_LAYER,
                                  np.ones(sphere.nnodes))
    assert np.abs(s1 - 1.0).max() < 5e-3


def test_constants_map_to_one(opsets, sphere):
    # A_k[1] = SWS[1] (or WS^2[1]) = 1: the Calderon combinations
    # annihilate constants up to discretization error
    ones = np.ones(sphere.nnodes)
    for form, tol in (("a1", 0.08), ("a2", 0.2), ("a3", 0.6)):
        r = opsets[form].apply(ones)
        assert np.abs(r - 1.0).max() < tol, form


def test_sphere_eigenrelation_a2_a3(opsets, sphere):
    y = real_ynm(2, 1, sphere.nodes)
    lam = -2 * 3 / 25.0
    for form in ("a2", "a3"):
        r = opsets[form].apply(y)
        err = np.linalg.norm(r - lam * y) / np.linalg.norm(y)
        assert err < 2e-2, form


def test_a1_equals_a2_on_smooth_density(opsets, sphere):
    y = real_ynm(1, 0, sphere.nodes)
    r1 = opsets["a1"].apply(y)
    r2 = opsets["a2"].apply(y)
    scale = np.abs(r2).max()
    assert np.abs(r1 - r2).max() < 0.05 * scale


def test_two_fmm_calls_with_four_densities(sphere):
    opset = LayerOperatorSet(sphere, "a2", 1e-5, use_fmm=True)
    calls = []
    original = opset._far

    def spy(charges, dipoles, outputs):
        nd = charges.shape[0] if charges is not None else dipoles.shape[0]
        calls.append(nd)
        return original(charges, dipoles, outputs)

    opset._far = spy
    opset.apply(np.ones(sphere.nnodes))
    assert len(calls) == 2
    assert sum(calls) == 4
    for form in ("a1", "a3"):
        o = LayerOperatorSet(sphere, form, 1e-5, use_fmm=True, near=opset.near)
        calls.clear()
        o._far = (lambda orig: lambda c, d, out: (
            calls.append(c.shape[0] if c is not None else d.shape[0]),
            orig(c, d, out))[1])(o._far)
        o.apply(np.ones(sphere.nnodes))
        assert len(calls) == 2, form
        assert sum(calls) == 4, form


def test_fmm_direct_interchangeable(sphere):
    eps = 1e-5
    direct = LayerOperatorSet(sphere, "a3", eps, use_fmm=False)
    fast = LayerOperatorSet(sphere, "a3", eps, use_fmm=True,
                            near=direct.near)
    y = real_ynm(3, 2, sphere.nodes)
    rd = direct.apply(y)
    rf = fast.apply(y)
    assert np.abs(rd - rf).max() <= 10 * eps * max(1.0, np.abs(rd).max())


def test_dense_matches_apply(sphere):
    for form in ("a1", "a2", "a3"):
        opset = LayerOperatorSet(sphere, form, 1e-5, use_fmm=False)
        mat = assemble_dense(sphere, form, 1e-5, near=opset.near,
                             corrections=opset.corrections)
        rng = np.random.default_rng(3)
        tau = rng.standard_normal(sphere.nnodes)
        direct = opset.apply(tau)
        viamat = mat @ tau
        scale = np.abs(direct).max()
        assert np.abs(viamat - direct).max() < 1e-10 * scale, form


def test_dense_a2_symmetric_after_weight_similarity(sphere):
    mat = assemble_dense(sphere, "a2", 1e-5)
    w = np.sqrt(sphere.weights)
    sym = w[:, None] * mat / w[None, :]
    asym = np.abs(sym - sym.T).max() / np.abs(sym).max()
    assert asym < 0.02


def test_dense_size_guard():
    d = shapes.build_sphere(3, 0)
    with pytest.raises(ValueError):
        assemble_dense(d, "a2", 1e-5, size_guard=10)


def test_density_vector_validation():
    with pytest.raises(ValueError):
        DensityVector(np.array([1.0, np.nan]))
    dv = DensityVector(np.arange(3.0), role="sigma")
    assert dv.role == "sigma"
