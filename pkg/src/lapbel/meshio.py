"""Mesh file format and legacy-VTK output.

The mesh format is this package's own (text, versioned): a header line
followed by the three Koornwinder coefficient blocks per patch. See
docs/FORMAT.md for the exact layout.
"""

from __future__ import annotations

import numpy as np

from .simplex import basis_size, koornwinder
from .surface import SurfaceDiscretization, build_from_coefficients

__all__ = ["write_mesh", "read_mesh", "write_vtk"]

MAGIC = "lbmesh"
VERSION = 1


def write_mesh(path, disc: SurfaceDiscretization):
    """Write the patch chart expansions in the lbmesh text format."""
    nb = basis_size(disc.order)
    with open(path, "w") as fh:
        fh.write(f"{MAGIC} {VERSION} npat {disc.npatches} order {disc.order} "
                 f"family {disc.node_family}\n")
        for p in range(disc.npatches):
            for block in (disc.coeffs_x, disc.coeffs_dxdu, disc.coeffs_dxdv):
                for b in range(nb):
                    fh.write("%.17g %.17g %.17g\n" % tuple(block[p, b]))


def read_mesh(path) -> SurfaceDiscretization:
    """Read an lbmesh file and rebuild the full discretization."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 8 or header[0] != MAGIC:
            raise ValueError(f"{path}: not an lbmesh file")
        if int(header[1]) != VERSION:
            raise ValueError(f"{path}: unsupported lbmesh version {header[1]}")
        if header[2] != "npat" or header[4] != "order" or header[6] != "family":
            raise ValueError(f"{path}: malformed lbmesh header")
        npat = int(header[3])
        order = int(header[5])
        family = header[7]
        nb = basis_size(order)
        data = np.loadtxt(fh).reshape(npat, 3, nb, 3)
    return build_from_coefficients(
        order, data[:, 0], data[:, 1], data[:, 2], node_family=family,
        metadata={"source": str(path)})


def _display_lattice(k):
    """Uniform lattice of (k+1)(k+2)/2 points and k^2 triangles on T0."""
    pts = []
    index = {}
    for i in range(k + 1):
        for j in range(k + 1 - i):
            index[(i, j)] = len(pts)
            pts.append((i / k, j / k))
    tris = []
    for i in range(k):
        for j in range(k - i):
            a = index[(i, j)]
            b = index[(i + 1, j)]
            c = index[(i, j + 1)]
            tris.append((a, b, c))
            if i + j < k - 1:
                d = index[(i + 1, j + 1)]
                tris.append((b, d, c))
    return np.array(pts), np.array(tris, dtype=np.int64)


def write_vtk(path, disc: SurfaceDiscretization, point_data=None,
              refine: int = 2):
    """Legacy ASCII VTK unstructured grid of the surface.

    Each patch is drawn as refine^2 flat triangles on a display lattice;
    node-sampled scalar/vector fields in point_data are interpolated onto
    the lattice.
    """
    point_data = point_data or {}
    pts2, tris = _display_lattice(max(1, refine))
    psi = koornwinder(disc.order, pts2[:, 0], pts2[:, 1])
    from .simplex import reference_element
    ref = reference_element(disc.order)
    interp = psi @ ref.vinv                     # node values -> lattice
    npat = disc.npatches
    nb = disc.nodes_per_patch
    nloc = pts2.shape[0]

    verts = (psi @ disc.coeffs_x).reshape(npat * nloc, 3)
    cells = (tris[None, :, :] + (np.arange(npat) * nloc)[:, None, None]
             ).reshape(-1, 3)

    fields = {}
    for name, arr in point_data.items():
        arr = np.asarray(arr, dtype=float)
        per_patch = arr.reshape(npat, nb, -1)
        fields[name] = np.einsum("qb,pbc->pqc", interp,
                                 per_patch).reshape(npat * nloc, -1)

    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("lapbel surface\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {len(verts)} double\n")
        for v in verts:
            fh.write("%.10g %.10g %.10g\n" % tuple(v))
        fh.write(f"CELLS {len(cells)} {4 * len(cells)}\n")
        for c in cells:
            fh.write("3 %d %d %d\n" % tuple(c))
        fh.write(f"CELL_TYPES {len(cells)}\n")
        fh.write("5\n" * len(cells))
        if fields:
            fh.write(f"POINT_DATA {len(verts)}\n")
            for name, arr in fields.items():
                if arr.shape[1] == 1:
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for v in arr[:, 0]:
                        fh.write("%.10g\n" % v)
                elif arr.shape[1] == 3:
                    fh.write(f"VECTORS {name} double\n")
                    for v in arr:
                        fh.write("%.10g %.10g %.10g\n" % tuple(v))
                else:
                    raise ValueError(
                        f"field {name!r} must be scalar or 3-vector")
