import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lapbel import shapes, surface
from lapbel.simplex import basis_size


@pytest.fixture(scope="module")
def sphere41():
    return shapes.build_sphere(4, 1)


@pytest.fixture(scope="module")
def sphere52():
    return shapes.build_sphere(5, 2)


@pytest.fixture(scope="module")
def sphere53():
    return shapes.build_sphere(5, 3)


@pytest.fixture(scope="module")
def torus():
    return shapes.build_torus(4, 8, 8, 2.0, 0.5)


def test_sphere_counts_and_radius(sphere41):
    assert sphere41.npatches == 48
    assert sphere41.nnodes == 48 * basis_size(4)
    assert sphere41.noversampled == 4 * sphere41.nnodes
    r = np.linalg.norm(sphere41.nodes, axis=1)
    assert np.abs(r - 1.0).max() < 1e-14


def test_sphere_area_convergence():
    errs = []
    for k in (0, 1, 2):
        d = shapes.build_sphere(4, k)
        errs.append(abs(d.area - 4 * np.pi) / (4 * np.pi))
    assert errs[0] < 1e-1
    # factor >= 2^(p-1) per refinement
    assert errs[0] / errs[1] >= 2 ** 3
    assert errs[1] / errs[2] >= 2 ** 3


def test_sphere_normals_point_outward(sphere41):
    assert np.abs(sphere41.normals - sphere41.nodes).max() < 1e-13


def test_jet_invariants(sphere41):
    d = sphere41
    # normal = normalized cross product
    cr = np.cross(d.tangents_u, d.tangents_v)
    cr /= np.linalg.norm(cr, axis=1, keepdims=True)
    assert np.abs(cr - d.normals).max() < 1e-13
    # metric entries are the exact dot products
    assert np.abs(d.metric[:, 0, 0]
                  - np.einsum("ik,ik->i", d.tangents_u, d.tangents_u)).max() == 0.0
    # g g^-1 = I
    prod = np.einsum("ijk,ikl->ijl", d.metric, d.inv_metric)
    assert np.abs(prod - np.eye(2)).max() < 1e-10
    jet = d.jet(17)
    assert jet.sqrt_det_g > 0


def test_sphere_mean_curvature_converges_to_one():
    h1 = shapes.build_sphere(5, 1).curvature
    h2 = shapes.build_sphere(5, 2).curvature
    e1 = np.abs(h1 - 1.0).max()
    e2 = np.abs(h2 - 1.0).max()
    assert e2 < 0.05
    assert e1 / e2 > 4.0


def test_torus_area_and_outer_curvature(torus):
    # area = 4 pi^2 R r
    assert abs(torus.area - 4 * np.pi ** 2) < 1e-3 * 4 * np.pi ** 2
    # |H| at the outer equator: (R + 2r) / (2 r (R + r)) = 1.2
    rho = np.hypot(torus.nodes[:, 0], torus.nodes[:, 1])
    i = int(np.argmax(rho))
    assert abs(abs(torus.curvature[i]) - 1.2) < 0.05


def test_torus_parameter_error():
    with pytest.raises(ValueError):
        shapes.build_torus(4, 8, 8, 1.0, 1.0)


def test_twisted_torus_seams_and_selfconvergence():
    d1 = shapes.build_twisted_torus(4, 8, 8)
    d2 = shapes.build_twisted_torus(4, 16, 16)
    assert abs(d1.area - d2.area) / d2.area < 10 ** -(4 - 2)
    # normals orthogonal to tangents
    assert np.abs(np.einsum("ik,ik->i", d1.normals, d1.tangents_u)).max() < 1e-12


def test_twisted_torus_matches_paper_config():
    # order 9 with 600 patches gives the 27,000-node configuration
    assert 600 * basis_size(9) == 27000


def test_surface_gradient_of_constant(sphere41):
    g = surface.surface_gradient(sphere41, np.ones(sphere41.nnodes))
    assert np.abs(g).max() < 1e-12


def test_surface_gradient_of_z(sphere53):
    d = sphere53
    f = d.nodes[:, 2]
    g = surface.surface_gradient(d, f)
    expect = -f[:, None] * d.normals
    expect[:, 2] += 1.0
    err = np.linalg.norm(g - expect, axis=1)
    # edge nodes carry a larger constant; the L2 error sits at the nominal
    # order h^(p-2)
    assert np.sqrt(surface.surface_integral(d, err ** 2)) \
        < 10.0 ** -(d.order - 2)
    assert err.max() < 10 * 10.0 ** -(d.order - 2)
    # tangency
    assert np.abs(np.einsum("ik,ik->i", g, d.normals)).max() < 1e-12


def test_surface_divergence_theorem(sphere52):
    d = sphere52
    f = d.nodes[:, 2]
    g = surface.surface_gradient(d, f)
    div = surface.surface_divergence(d, g)
    total = surface.surface_integral(d, div)
    assert abs(total) < 1e-2 * np.abs(g).max()


def test_surface_divergence_eigenvalue(sphere52, sphere53):
    errs = []
    for d in (sphere52, sphere53):
        f = d.nodes[:, 2]
        div = surface.surface_divergence(d, surface.surface_gradient(d, f))
        errs.append(np.sqrt(surface.surface_integral(d, (div + 2 * f) ** 2)
                            / d.area))
    assert errs[1] < 10.0 ** -(sphere53.order - 3)
    assert errs[0] / errs[1] > 2 ** (sphere53.order - 3)


def test_surface_divergence_zero_field(sphere41):
    div = surface.surface_divergence(sphere41, np.zeros((sphere41.nnodes, 3)))
    assert np.all(div == 0.0)


def test_surface_divergence_warns_on_normal_component(sphere41):
    div, flag = surface.surface_divergence(sphere41, sphere41.normals,
                                           return_flag=True)
    assert flag


def test_interpolate_to_oversampled_constant(sphere41):
    vals = surface.interpolate_to_oversampled(sphere41,
                                              np.full(sphere41.nnodes, 3.5))
    assert np.abs(vals - 3.5).max() < 1e-13


def test_interpolate_to_oversampled_smooth(sphere52, sphere53):
    errs = []
    for d in (sphere52, sphere53):
        f = np.cos(d.nodes[:, 0])
        vals = surface.interpolate_to_oversampled(d, f)
        errs.append(np.abs(vals - np.cos(d.over_nodes[:, 0])).max())
    assert errs[1] < 10.0 ** -(sphere53.order - 1)
    assert errs[0] / errs[1] > 2 ** (sphere53.order - 1) / 2


@settings(max_examples=10, deadline=None)
@given(st.integers(min_value=0, max_value=2 ** 31 - 1))
def test_oversample_reproduces_patch_polynomials(seed):
    d = shapes.build_sphere(3, 0)
    rng = np.random.default_rng(seed)
    # a random degree-<p polynomial in the reference coordinates per patch
    coeff = rng.standard_normal(basis_size(3))
    from lapbel.simplex import koornwinder
    f = (koornwinder(3, d.node_uv[:, 0], d.node_uv[:, 1]) * coeff).sum(1)
    vals = surface.interpolate_to_oversampled(d, f)
    exact = (koornwinder(3, d.over_uv[:, 0], d.over_uv[:, 1]) * coeff).sum(1)
    assert np.abs(vals - exact).max() < 1e-11 * max(1, np.abs(exact).max())


def test_integral_and_averaging(sphere52):
    d = sphere52
    assert surface.averaging_w(d, np.ones(d.nnodes)) == pytest.approx(1.0)
    z2 = d.nodes[:, 2] ** 2
    assert surface.surface_integral(d, z2) == pytest.approx(
        4 * np.pi / 3, rel=10.0 ** -(d.order - 1))
    from lapbel.harmonics import real_ynm
    y20 = real_ynm(2, 0, d.nodes)
    assert abs(surface.averaging_w(d, y20)) < 10.0 ** -(d.order - 1)


def test_mean_curvature_op_matches_stored(sphere41):
    assert np.array_equal(surface.mean_curvature(sphere41),
                          sphere41.curvature)


def test_patch_view(sphere41):
    p = sphere41.patch(3)
    uv = sphere41.node_uv[3 * sphere41.nodes_per_patch]
    x = p.evaluate([uv[0]], [uv[1]])[0]
    assert np.abs(x - sphere41.nodes[3 * sphere41.nodes_per_patch]).max() < 1e-12


def test_degenerate_chart_rejected():
    from lapbel.surface import DegeneratePatchError, build_from_samples
    nb = basis_size(3)
    x = np.zeros((1, nb, 3))
    x[0, :, 0] = np.linspace(0, 1, nb)  # a segment: X_v = 0
    with pytest.raises((DegeneratePatchError, ValueError)):
        build_from_samples(3, x, np.ones((1, nb, 3)), np.zeros((1, nb, 3)))
