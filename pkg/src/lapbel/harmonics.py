"""Spherical-harmonic test data for the unit-sphere studies."""

from __future__ import annotations

import numpy as np

try:
    from scipy.special import sph_harm_y as _sph
    def _eval_ynm(n, m, theta, phi):
        return _sph(n, m, theta, phi)
except ImportError:  # scipy < 1.15
    from scipy.special import sph_harm as _sph_old
    def _eval_ynm(n, m, theta, phi):
        return _sph_old(m, n, phi, theta)

__all__ = ["angles", "real_ynm", "random_expansion"]


def angles(points):
    """(theta, phi) of unit-sphere points (colatitude, azimuth)."""
    x = np.asarray(points, dtype=float)
    r = np.linalg.norm(x, axis=1)
    theta = np.arccos(np.clip(x[:, 2] / r, -1.0, 1.0))
    phi = np.arctan2(x[:, 1], x[:, 0])
    return theta, phi


def real_ynm(n, m, points):
    """Re Y_n^m at points on the unit sphere."""
    theta, phi = angles(points)
    return np.real(_eval_ynm(n, m, theta, phi))


def random_expansion(points, nmax, seed):
    """Seeded random expansion f = Re sum c_nm Y_nm (n in 1..nmax, m >= 0)
    with coefficients uniform in (-0.5, 0.5) + i(-0.5, 0.5).

    Returns (f, u) with u the exact mean-zero solution of lap u = f on the
    unit sphere: u = Re sum -c_nm Y_nm / (n (n+1)).
    """
    theta, phi = angles(points)
    rng = np.random.default_rng(seed)
    f = np.zeros(len(theta))
    u = np.zeros(len(theta))
    for n in range(1, nmax + 1):
        for m in range(0, n + 1):
            c = rng.uniform(-0.5, 0.5) + 1j * rng.uniform(-0.5, 0.5)
            y = _eval_ynm(n, m, theta, phi)
            f += np.real(c * y)
            u -= np.real(c * y) / (n * (n + 1))
    return f, u
