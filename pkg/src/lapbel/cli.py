"""Command-line experiment runners.

Subcommands: convergence (sphere accuracy/order study), secondkind (dense
spectra and GMRES histories), hodge (harmonic vector fields), fmm-bench
(far-field accuracy/scaling), solve (one Laplace-Beltrami solve). Every
run writes a manifest.json with the resolved configuration, geometry hash
and package version next to its CSV/VTK outputs. Exit code 0 covers
completed runs even when a solver stalls (stalls are data); configuration
and I/O errors exit nonzero.
"""

from __future__ import annotations

import csv
import json
import os
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from . import harmonics, meshio, shapes
from .hodge import (TangentialField, current_source_field, harmonic_basis,
                    hodge_decompose, random_legendre_field)
from .operators import FORMULATIONS, LayerOperatorSet, assemble_dense
from .solver import SolveConfig, gmres, solve_laplace_beltrami
from .surface import surface_integral

GEOMETRIES = ("sphere", "torus", "twisted-torus")


def _read_config_file(path):
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _build_geometry(geometry, order, refine, nu, nv, ring_radius, tube_radius):
    if geometry.startswith("mesh:"):
        return meshio.read_mesh(geometry[5:])
    if geometry == "sphere":
        return shapes.build_sphere(order, refine)
    if geometry == "torus":
        return shapes.build_torus(order, nu, nv, ring_radius, tube_radius)
    if geometry == "twisted-torus":
        return shapes.build_twisted_torus(order, nu, nv)
    raise click.UsageError(f"unknown geometry {geometry!r}")


def _write_manifest(outdir, command, params, disc=None):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in params.items()},
    }
    if disc is not None:
        manifest["geometry_hash"] = disc.mesh_hash()
        manifest["N"] = disc.nnodes
        manifest["npatches"] = disc.npatches
    with open(outdir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return outdir


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _common(f):
    f = click.option("--eps", type=float, default=1e-6, show_default=True,
                     help="quadrature/FMM tolerance")(f)
    f = click.option("--eps-gmres", type=float, default=None,
                     help="GMRES relative-residual tolerance (default: eps)")(f)
    f = click.option("--seed", type=int, default=7, show_default=True)(f)
    f = click.option("--out", "outdir", type=click.Path(), default="out",
                     show_default=True)(f)
    f = click.option("--threads", type=int, default=None,
                     help="numba thread count")(f)
    f = click.option("--config", "config_file", type=click.Path(exists=True),
                     default=None, help="key=value defaults file")(f)
    return f


def _apply_common(ctx, threads, config_file):
    if config_file:
        defaults = _read_config_file(config_file)
        for key, val in defaults.items():
            if key in ctx.params and ctx.get_parameter_source(key).name == "DEFAULT":
                ctx.params[key] = type(ctx.params[key])(val) \
                    if ctx.params[key] is not None else val
    if threads:
        import numba
        numba.set_num_threads(threads)


@click.group()
@click.version_option(__version__)
def main():
    """Laplace-Beltrami integral-equation solver toolkit."""


@main.command()
@click.option("--order", "-p", type=int, default=5, show_default=True)
@click.option("--refine", "-k", "refines", type=int, multiple=True,
              default=(1, 2, 3), show_default=True,
              help="sphere refinement levels (repeatable)")
@click.option("--formulation", type=click.Choice(["a1", "a2", "a3"]),
              multiple=True, default=("a3",), show_default=True)
@click.option("--data-order", type=int, default=8, show_default=True,
              help="max spherical-harmonic order of the synthetic data")
@_common
@click.pass_context
def convergence(ctx, order, refines, formulation, data_order, eps, eps_gmres,
                seed, outdir, threads, config_file):
    """Sphere self-convergence study (accuracy, orders, timings)."""
    _apply_common(ctx, threads, config_file)
    eps_gmres = eps_gmres or eps
    outdir = _write_manifest(outdir, "convergence", ctx.params)
    rows = []
    click.echo("formulation p N t_q t_mv t_s n_iter eps_s rho_c")
    for form in formulation:
        prev = None
        for k in refines:
            disc = shapes.build_sphere(order, k)
            f, u_exact = harmonics.random_expansion(disc.nodes, data_order,
                                                    seed)
            opset = LayerOperatorSet(disc, form, eps)
            cfg = SolveConfig(formulation=form, eps=eps, eps_gmres=eps_gmres)
            rep = solve_laplace_beltrami(opset, f, cfg)
            err2 = surface_integral(disc, (rep.u.values - u_exact) ** 2)
            den2 = surface_integral(disc, f ** 2)
            eps_s = float(np.sqrt(max(err2, 0.0) / den2))
            rho = "" if prev is None else f"{np.log2(prev / eps_s):.2f}"
            rows.append([form, order, disc.nnodes, f"{rep.t_q:.2f}",
                         f"{rep.t_mv_total:.2f}", f"{rep.t_s:.2f}",
                         rep.n_iter if rep.converged else rep.n_iter,
                         f"{eps_s:.6e}", rho, rep.converged])
            click.echo(" ".join(str(v) for v in rows[-1]))
            prev = eps_s
    _write_csv(outdir / "convergence.csv",
               ["formulation", "p", "N", "t_q", "t_mv", "t_s", "n_iter",
                "eps_s", "rho_c", "converged"], rows)
    click.echo(f"wrote {outdir / 'convergence.csv'}")


@main.command("secondkind")
@click.option("--order", "-p", type=int, default=4, show_default=True)
@click.option("--refine", "-k", "refines", type=int, multiple=True,
              default=(2, 3), show_default=True)
@click.option("--data-order", type=int, default=4, show_default=True)
@click.option("--eps", type=float, default=5e-8, show_default=True)
@click.option("--eps-gmres", type=float, default=1e-14, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--out", "outdir", type=click.Path(), default="out",
              show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--config", "config_file", type=click.Path(exists=True),
              default=None)
@click.pass_context
def secondkind(ctx, order, refines, data_order, eps, eps_gmres, seed, outdir,
               threads, config_file):
    """Dense spectra + GMRES histories for A1 vs A2 (numerical
    second-kindness study)."""
    _apply_common(ctx, threads, config_file)
    outdir = _write_manifest(outdir, "secondkind", ctx.params)
    spec_rows = []
    hist_rows = []
    summary = {}
    from .kernels import KernelKind
    from .operators import _layer_matrices
    from .quadrature import build_near_map, compute_corrections
    for k in refines:
        disc = shapes.build_sphere(order, k)
        f, _ = harmonics.random_expansion(disc.nodes, data_order, seed)
        f = f - surface_integral(disc, f) / disc.area
        near = build_near_map(disc, 2.0)
        corr, _tq = compute_corrections(disc, near,
                                        [KernelKind.SINGLE_LAYER], eps)
        ms = _layer_matrices(disc, [KernelKind.SINGLE_LAYER], corr)[
            KernelKind.SINGLE_LAYER]
        rhs = ms @ f     # u = S[sigma] for both formulations
        for form in ("a1", "a2"):
            t0 = time.perf_counter()
            mat = assemble_dense(disc, form, eps, near=near)
            t_asm = time.perf_counter() - t0
            sv = np.linalg.svd(mat, compute_uv=False)
            for i, s in enumerate(sv):
                spec_rows.append([form, disc.nnodes, i, f"{s:.8e}"])
            x, hist, conv = gmres(lambda v: mat @ v, rhs, eps_gmres, 100)
            for i, r in enumerate(hist):
                hist_rows.append([form, disc.nnodes, i + 1, f"{r:.8e}"])
            summary[f"{form}_N{disc.nnodes}"] = {
                "sigma_min": float(sv[-1]), "sigma_max": float(sv[0]),
                "cond": float(sv[0] / sv[-1]), "n_iter": len(hist),
                "converged": bool(conv), "t_assemble": t_asm,
                "final_residual": float(hist[-1])}
            click.echo(f"{form} N={disc.nnodes}: cond={sv[0]/sv[-1]:.3e} "
                       f"iters={len(hist)} resid={hist[-1]:.2e}")
    _write_csv(outdir / "singular_values.csv",
               ["formulation", "N", "index", "sigma"], spec_rows)
    _write_csv(outdir / "gmres_residuals.csv",
               ["formulation", "N", "iteration", "residual"], hist_rows)
    with open(outdir / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
    click.echo(f"wrote {outdir}")


@main.command()
@click.option("--geometry", type=str, default="twisted-torus",
              show_default=True)
@click.option("--order", "-p", type=int, default=5, show_default=True)
@click.option("--nu", type=int, default=12, show_default=True)
@click.option("--nv", type=int, default=12, show_default=True)
@click.option("--ring-radius", type=float, default=2.0, show_default=True)
@click.option("--tube-radius", type=float, default=0.5, show_default=True)
@click.option("--field", type=click.Choice(["current", "legendre"]),
              default="current", show_default=True)
@click.option("--half-extent", type=float, default=8.0, show_default=True)
@click.option("--vtk/--no-vtk", default=True, show_default=True)
@_common
@click.pass_context
def hodge(ctx, geometry, order, nu, nv, ring_radius, tube_radius, field,
          half_extent, vtk, eps, eps_gmres, seed, outdir, threads,
          config_file):
    """Hodge decomposition / harmonic field computation on a genus-1
    surface."""
    _apply_common(ctx, threads, config_file)
    eps_gmres = eps_gmres or eps
    disc = _build_geometry(geometry, order, 0, nu, nv, ring_radius,
                           tube_radius)
    outdir = _write_manifest(outdir, "hodge", ctx.params, disc)
    opset = LayerOperatorSet(disc, "a3", eps)
    cfg = SolveConfig(formulation="a3", eps=eps, eps_gmres=eps_gmres)
    if field == "current":
        f = current_source_field(disc, (0.2, 0.2, 0.2), (0.0, 1.0, 1.0))
    else:
        f = random_legendre_field(disc, 1, half_extent, seed)
    res = hodge_decompose(opset, f, cfg)
    hnorm = res.harmonic.l2_norm(disc)
    rows = [[order, disc.nnodes, res.n_iter[0], res.n_iter[1],
             f"{opset.t_q:.2f}", f"{res.t_s:.2f}", f"{res.div_h_norm:.6e}",
             f"{res.div_nxh_norm:.6e}", f"{hnorm:.6e}", res.converged]]
    _write_csv(outdir / "hodge.csv",
               ["p", "N", "n_iter_alpha", "n_iter_beta", "t_q", "t_s",
                "div_H_norm", "div_nxH_norm", "H_norm", "converged"], rows)
    click.echo(f"N={disc.nnodes} iters={res.n_iter} "
               f"div_H={res.div_h_norm:.3e} div_nxH={res.div_nxh_norm:.3e} "
               f"|H|={hnorm:.5f}")
    if vtk:
        meshio.write_vtk(outdir / "hodge_fields.vtk", disc, {
            "F": f.values, "grad_alpha": res.grad_alpha.values,
            "rot_beta": res.rot_beta.values, "H": res.harmonic.values,
            "F_mag": np.linalg.norm(f.values, axis=1),
            "H_mag": np.linalg.norm(res.harmonic.values, axis=1),
        })
        click.echo(f"wrote {outdir / 'hodge_fields.vtk'}")


@main.command("fmm-bench")
@click.option("--sizes", type=int, multiple=True,
              default=(10000, 20000, 40000), show_default=True)
@click.option("--nd", type=int, default=2, show_default=True)
@click.option("--eps", type=float, default=1e-6, show_default=True)
@click.option("--seed", type=int, default=7, show_default=True)
@click.option("--out", "outdir", type=click.Path(), default="out",
              show_default=True)
@click.option("--threads", type=int, default=None)
@click.option("--config", "config_file", type=click.Path(exists=True),
              default=None)
@click.pass_context
def fmm_bench(ctx, sizes, nd, eps, seed, outdir, threads, config_file):
    """Accuracy (vs direct, subsampled) and wall-time scaling of the FMM."""
    from . import fmm as fmm_mod
    _apply_common(ctx, threads, config_file)
    outdir = _write_manifest(outdir, "fmm-bench", ctx.params)
    rng = np.random.default_rng(seed)
    # warm the JIT kernels so the scaling ratios measure the algorithm
    warm = fmm_mod.FmmSources(rng.uniform(0, 1, (500, 3)),
                              rng.standard_normal((1, 500)))
    fmm_mod.evaluate_fmm(warm, rng.uniform(0, 1, (500, 3)), eps,
                         ("pot", "grad"), ncrit=60)
    rows = []
    prev_t = None
    for m in sizes:
        pos = rng.uniform(0, 1, (m, 3))
        tgt = rng.uniform(0, 1, (m, 3))
        charges = rng.standard_normal((nd, m))
        dipoles = rng.standard_normal((nd, m, 3))
        src = fmm_mod.FmmSources(pos, charges, dipoles)
        t0 = time.perf_counter()
        res = fmm_mod.evaluate_fmm(src, tgt, eps, ("pot", "grad"))
        dt = time.perf_counter() - t0
        sub = rng.choice(m, size=min(100, m), replace=False)
        ref = fmm_mod.evaluate_direct(src, tgt[sub], ("pot", "grad"))
        err = 0.0
        for l in range(nd):
            err = max(err, np.abs(res.pot[l][sub] - ref.pot[l]).max()
                      / np.abs(ref.pot[l]).max())
            err = max(err, np.abs(res.grad[l][sub] - ref.grad[l]).max()
                      / np.abs(ref.grad[l]).max())
        ratio = "" if prev_t is None else f"{dt / prev_t:.2f}"
        rows.append([m, nd, eps, f"{dt:.3f}", f"{err:.3e}", ratio])
        click.echo(f"M={m} t={dt:.3f}s err={err:.2e} ratio={ratio}")
        prev_t = dt
    _write_csv(outdir / "fmm_bench.csv",
               ["M", "nd", "eps", "t_wall", "max_rel_err", "time_ratio"],
               rows)


@main.command()
@click.option("--geometry", type=str, default="sphere", show_default=True)
@click.option("--order", "-p", type=int, default=4, show_default=True)
@click.option("--refine", "-k", type=int, default=1, show_default=True)
@click.option("--nu", type=int, default=12, show_default=True)
@click.option("--nv", type=int, default=12, show_default=True)
@click.option("--ring-radius", type=float, default=2.0, show_default=True)
@click.option("--tube-radius", type=float, default=0.5, show_default=True)
@click.option("--formulation", type=click.Choice(["a1", "a2", "a3"]),
              default="a3", show_default=True)
@click.option("--data-order", type=int, default=4, show_default=True,
              help="spherical-harmonic data order (sphere only)")
@click.option("--vtk/--no-vtk", default=False, show_default=True)
@_common
@click.pass_context
def solve(ctx, geometry, order, refine, nu, nv, ring_radius, tube_radius,
          formulation, data_order, vtk, eps, eps_gmres, seed, outdir,
          threads, config_file):
    """One Laplace-Beltrami solve; emits the report as JSON (and VTK)."""
    _apply_common(ctx, threads, config_file)
    eps_gmres = eps_gmres or eps
    disc = _build_geometry(geometry, order, refine, nu, nv, ring_radius,
                           tube_radius)
    outdir = _write_manifest(outdir, "solve", ctx.params, disc)
    if geometry == "sphere":
        f, u_exact = harmonics.random_expansion(disc.nodes, data_order, seed)
    else:
        x = disc.nodes
        f = x[:, 0] * x[:, 1] * x[:, 2]
        u_exact = None
    opset = LayerOperatorSet(disc, formulation, eps)
    cfg = SolveConfig(formulation=formulation, eps=eps, eps_gmres=eps_gmres)
    rep = solve_laplace_beltrami(opset, f, cfg)
    report = {
        "N": disc.nnodes, "n_iter": rep.n_iter, "converged": rep.converged,
        "t_q": rep.t_q, "t_mv": rep.t_mv_total, "t_s": rep.t_s,
        "mean_u": rep.mean_u, "residuals": [float(r) for r in
                                            rep.residual_history],
    }
    if u_exact is not None:
        err2 = surface_integral(disc, (rep.u.values - u_exact) ** 2)
        report["eps_s"] = float(np.sqrt(max(err2, 0.0)
                                        / surface_integral(disc, f ** 2)))
    with open(outdir / "solve.json", "w") as fh:
        json.dump(report, fh, indent=1)
    click.echo(json.dumps({k: v for k, v in report.items()
                           if k != "residuals"}, indent=1))
    if vtk:
        meshio.write_vtk(outdir / "solution.vtk", disc,
                         {"f": f, "u": rep.u.values,
                          "sigma": rep.sigma.values})


if __name__ == "__main__":
    main()
