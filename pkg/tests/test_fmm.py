import numpy as np
import pytest

from lapbel import fmm


def test_direct_coulomb():
    src = fmm.FmmSources(np.zeros((1, 3)), charges=np.ones((1, 1)))
    res = fmm.evaluate_direct(src, np.array([[1.0, 0, 0]]), ("pot", "grad"))
    assert res.pot[0, 0] == pytest.approx(1.0)
    assert res.grad[0, 0] == pytest.approx([-1.0, 0, 0])


def test_direct_dipole():
    dip = np.zeros((1, 1, 3))
    dip[0, 0] = [0, 0, 1.0]
    src = fmm.FmmSources(np.zeros((1, 3)), dipoles=dip)
    res = fmm.evaluate_direct(src, np.array([[0.0, 0, 2.0]]), ("pot",))
    # -v . grad_x 1/|x| = v.x/|x|^3 = 2/8
    assert res.pot[0, 0] == pytest.approx(0.25)


def test_direct_skips_coincident():
    pos = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    src = fmm.FmmSources(pos, charges=np.ones((1, 2)))
    res = fmm.evaluate_direct(src, pos, ("pot",))
    assert res.pot[0, 0] == pytest.approx(1.0)  # only the other charge


def test_direct_zero_density_stays_zero():
    rng = np.random.default_rng(0)
    pos = rng.uniform(-1, 1, (50, 3))
    ch = rng.standard_normal((3, 50))
    ch[1] = 0.0
    src = fmm.FmmSources(pos, charges=ch)
    res = fmm.evaluate_direct(src, rng.uniform(2, 3, (20, 3)), ("pot",))
    assert np.all(res.pot[1] == 0.0)
    assert np.abs(res.pot[0]).max() > 0


def _rel_errs(res, ref, nd, names):
    errs = []
    for name in names:
        a, b = getattr(res, name), getattr(ref, name)
        for l in range(nd):
            scale = np.abs(b[l]).max()
            errs.append(np.abs(a[l] - b[l]).max() / scale)
    return max(errs)


def _random_cloud(m, nt, seed=0):
    rng = np.random.default_rng(seed)
    pos = rng.uniform(0, 1, (m, 3))
    tgt = rng.uniform(0, 1, (nt, 3))
    return rng, pos, tgt


@pytest.mark.parametrize("eps", [1e-3, 1e-6, 1e-9])
def test_fmm_matches_direct(eps):
    rng, pos, tgt = _random_cloud(3000, 800, seed=42)
    nd = 2
    ch = rng.standard_normal((nd, 3000))
    ch[1] = 0
    dip = rng.standard_normal((nd, 3000, 3))
    dip[0] = 0
    src = fmm.FmmSources(pos, ch, dip)
    ref = fmm.evaluate_direct(src, tgt, ("pot", "grad", "hess"))
    res = fmm.evaluate_fmm(src, tgt, eps, ("pot", "grad", "hess"))
    assert _rel_errs(res, ref, nd, ("pot", "grad", "hess")) <= eps


def test_fmm_all_zero_returns_zero():
    _, pos, tgt = _random_cloud(500, 100)
    src = fmm.FmmSources(pos, charges=np.zeros((2, 500)))
    res = fmm.evaluate_fmm(src, tgt, 1e-6, ("pot", "grad"))
    assert np.all(res.pot == 0)
    assert np.all(res.grad == 0)


def test_fmm_translation_invariance():
    rng, pos, tgt = _random_cloud(2000, 400, seed=7)
    ch = rng.standard_normal((1, 2000))
    shift = np.array([123.4, -55.5, 17.0])
    r1 = fmm.evaluate_fmm(fmm.FmmSources(pos, ch), tgt, 1e-6, ("pot",))
    r2 = fmm.evaluate_fmm(fmm.FmmSources(pos + shift, ch), tgt + shift,
                          1e-6, ("pot",))
    scale = np.abs(r1.pot).max()
    assert np.abs(r1.pot - r2.pot).max() <= 10 * 1e-6 * scale


def test_fmm_multi_density_consistency():
    rng, pos, tgt = _random_cloud(2500, 300, seed=8)
    nd = 3
    ch = rng.standard_normal((nd, 2500))
    src_all = fmm.FmmSources(pos, ch)
    res_all = fmm.evaluate_fmm(src_all, tgt, 1e-6, ("pot",))
    for l in range(nd):
        res_one = fmm.evaluate_fmm(fmm.FmmSources(pos, ch[l:l + 1]), tgt,
                                   1e-6, ("pot",))
        scale = np.abs(res_one.pot[0]).max()
        assert np.abs(res_all.pot[l] - res_one.pot[0]).max() <= 1e-6 * scale


def test_fmm_hessian_symmetric_and_harmonic():
    rng, pos, tgt = _random_cloud(2000, 300, seed=9)
    ch = rng.standard_normal((1, 2000))
    res = fmm.evaluate_fmm(fmm.FmmSources(pos, ch), tgt, 1e-6, ("pot", "hess"))
    h = res.hess[0]
    assert np.abs(h - np.swapaxes(h, -1, -2)).max() <= 1e-10 * np.abs(h).max()
    tr = np.trace(h, axis1=-2, axis2=-1)
    assert np.abs(tr).max() <= 10 * 1e-6 * np.abs(h).max()


def test_fmm_nonuniform_cloud():
    # strong clustering exercises the adaptive W/X lists
    rng = np.random.default_rng(11)
    a = rng.normal(0, 0.01, (1500, 3))
    b = rng.uniform(-1, 1, (1500, 3))
    pos = np.vstack([a, b])
    tgt = np.vstack([rng.normal(0, 0.01, (300, 3)), rng.uniform(-1, 1, (300, 3))])
    ch = rng.standard_normal((1, 3000))
    src = fmm.FmmSources(pos, ch)
    ref = fmm.evaluate_direct(src, tgt, ("pot", "grad"))
    res = fmm.evaluate_fmm(src, tgt, 1e-6, ("pot", "grad"), ncrit=40)
    assert _rel_errs(res, ref, 1, ("pot", "grad")) <= 1e-6


def test_fmm_eps_out_of_range():
    _, pos, tgt = _random_cloud(100, 10)
    src = fmm.FmmSources(pos, charges=np.ones((1, 100)))
    with pytest.raises(ValueError):
        fmm.evaluate_fmm(src, tgt, 1e-2)


def test_capacity_error_on_pathological_clustering():
    pos = np.zeros((200000, 3))  # all points coincident
    pos[-1] = [1.0, 0, 0]
    src = fmm.FmmSources(pos, charges=np.ones((1, 200000)))
    with pytest.raises(fmm.FmmCapacityError):
        fmm.evaluate_fmm(src, np.array([[2.0, 0, 0]]), 1e-6, ncrit=100)
