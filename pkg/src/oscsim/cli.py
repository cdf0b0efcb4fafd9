"""Command line entry point (``oscsim``)."""
from __future__ import annotations

import logging
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import ROD_DENSITY, ROD_JV, ConfigError, load_config
from .macro import ConvergenceError, MacroModel
from .mesh import (MeshError, build_complex_mesh, build_line_mesh, build_rod_mesh,
                   extract_interface, interface_length, load_mesh, write_mesh)
from .micro import MicroModel
from .params import DeviceParams, ParameterError, kdiss_hemisphere, kdiss_normal, table1, table2
from .postprocess import (bias_grid, export_fields, extract_voc_jsc, jv_sweep, VocUndefined,
                          write_curve)

GEOMETRIES = {"jv": ROD_JV, "density": ROD_DENSITY}


def _parse_sets(sets) -> dict:
    out = {}
    for item in sets:
        if "=" not in item:
            raise click.BadParameter(f"expected KEY=VALUE, got {item!r}", param_hint="--set")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _params(preset: str, sets, **fixed) -> DeviceParams:
    base = table1(V_appl=0.0) if preset == "table1" else table2()
    data = _parse_sets(sets)
    data.update({k: v for k, v in fixed.items() if v is not None})
    try:
        return DeviceParams.from_mapping(data, base=base)
    except ParameterError as exc:
        raise click.BadParameter(str(exc)) from exc


def _mesh(mesh_file, geometry):
    if mesh_file:
        return load_mesh(Path(mesh_file))
    g = GEOMETRIES[geometry]
    return build_rod_mesh(g["L_cell"], g["L_elec"], g["L_R"], g["W_R"], g["n_rods"],
                          alpha_deg=g["alpha_deg"], target_h=g["target_h"])


def _fail(msg: str, code: int = 1):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def main(verbose):
    """Organic solar cell drift-diffusion simulator."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# -- mesh ------------------------------------------------------------------------------------

@main.group()
def mesh():
    """Generate or validate meshes."""


@mesh.command("line")
@click.option("--length", type=float, default=100e-9, show_default=True)
@click.option("--elements", type=int, default=400, show_default=True)
@click.option("--interface", "interface_position", type=float, default=50e-9, show_default=True)
@click.option("--slab-half-width", type=float, default=None,
              help="Label a slab of this half width around the interface.")
@click.option("--slab-elements", type=int, default=16, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
def mesh_line(length, elements, interface_position, slab_half_width, slab_elements, output):
    """1D two-phase mesh."""
    try:
        m = build_line_mesh(length, elements, interface_position, slab_half_width, slab_elements)
    except MeshError as exc:
        _fail(str(exc))
    _write(m, output)


@mesh.command("rod")
@click.option("--geometry", type=click.Choice(sorted(GEOMETRIES)), default="jv",
              show_default=True, help="Preset providing defaults for the options below.")
@click.option("--L-cell", "L_cell", type=float)
@click.option("--L-elec", "L_elec", type=float)
@click.option("--L-R", "L_R", type=float)
@click.option("--W-R", "W_R", type=float)
@click.option("--rods", "n_rods", type=int)
@click.option("--alpha", "alpha_deg", type=float, help="Rod incidence angle in degrees.")
@click.option("--h", "target_h", type=float, help="Target element size.")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
def mesh_rod(geometry, output, **over):
    """2D interpenetrating-rod mesh."""
    g = {**GEOMETRIES[geometry], **{k: v for k, v in over.items() if v is not None}}
    try:
        m = build_rod_mesh(g["L_cell"], g["L_elec"], g["L_R"], g["W_R"], g["n_rods"],
                           alpha_deg=g["alpha_deg"], target_h=g["target_h"])
    except MeshError as exc:
        _fail(str(exc))
    _write(m, output)


@mesh.command("complex")
@click.option("--size", type=float, default=150e-9, show_default=True)
@click.option("--pixels", type=int, default=60, show_default=True)
@click.option("--seed", type=int, default=18, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
def mesh_complex(size, pixels, seed, output):
    """Random two-phase morphology on a square cell."""
    _write(build_complex_mesh(size, n=pixels, seed=seed), output)


@mesh.command("validate")
@click.argument("path", type=click.Path(exists=True, dir_okay=False))
def mesh_validate(path):
    """Parse and validate a mesh file; print a summary."""
    try:
        m = load_mesh(Path(path))
    except MeshError as exc:
        _fail(str(exc))
    _summary(m)


def _write(m, output):
    with open(output, "w") as fh:
        write_mesh(m, fh)
    _summary(m)


def _summary(m):
    click.echo(f"dim={m.dim} nodes={m.n_nodes} elements={m.n_elements}")
    try:
        click.echo(f"interface_length={interface_length(extract_interface(m)):.6e}")
    except MeshError as exc:
        click.echo(f"interface: {exc}")


# -- solve / sweep -------------------------------------------------------------------------

_common = [
    click.option("--mesh", "mesh_file", type=click.Path(exists=True, dir_okay=False),
                 help="Mesh file; default is a generated rod device."),
    click.option("--geometry", type=click.Choice(sorted(GEOMETRIES)), default="jv",
                 show_default=True),
    click.option("--preset", type=click.Choice(["table1", "table2"]), default="table2",
                 show_default=True),
    click.option("--kdiss", "kdiss_model", type=click.Choice(["constant", "A", "B", "C"])),
    click.option("--Q", "Q", type=float, help="Exciton generation rate [1/(m^3 s)]."),
    click.option("--set", "sets", multiple=True, metavar="KEY=VALUE",
                 help="Override any device parameter."),
    click.option("--tol", type=float, default=1e-6, show_default=True),
]


def common(f):
    for opt in reversed(_common):
        f = opt(f)
    return f


@main.command()
@common
@click.option("--V", "V_appl", type=float, default=0.0, show_default=True)
@click.option("--model", type=click.Choice(["macro", "micro"]), default="macro", show_default=True)
@click.option("--fields", type=click.Path(dir_okay=False),
              help="Write node fields to <FIELDS>_nodes.csv and <FIELDS>_polaron.csv.")
def solve(mesh_file, geometry, preset, kdiss_model, Q, sets, tol, V_appl, model, fields):
    """Steady solve at one applied bias."""
    from .timestep import steady_solve

    prm = _params(preset, sets, kdiss_model=kdiss_model, Q=Q, V_appl=V_appl)
    m = _mesh(mesh_file, geometry)
    try:
        mod = (MicroModel if model == "micro" else MacroModel)(m, prm)
        y, rep = steady_solve(mod, tol=tol)
    except (ConvergenceError, MeshError) as exc:
        _fail(str(exc))
    I_C, I_A = mod.contact_currents(y)
    click.echo(f"iterations={rep.iterations}")
    click.echo(f"j={mod.photocurrent(y):.10e}")
    click.echo(f"j_tot={mod.total_current(y):.10e}")
    click.echo(f"contact_balance={abs(I_C + I_A) / max(abs(I_C), 1e-300):.3e}")
    if fields:
        for p in export_fields(mod, y, fields):
            click.echo(f"wrote {p}")


@main.command()
@common
@click.option("--start", type=float, default=0.0, show_default=True)
@click.option("--stop", type=float, default=1.0, show_default=True)
@click.option("--step", type=float, default=0.05, show_default=True)
@click.option("--fine-step", type=float, default=0.005, show_default=True,
              help="Step within 0.05 V of flat band (0 disables refinement).")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
def sweep(mesh_file, geometry, preset, kdiss_model, Q, sets, tol, start, stop, step,
          fine_step, output):
    """Steady J-V sweep with continuation; writes a CSV curve."""
    prm = _params(preset, sets, kdiss_model=kdiss_model, Q=Q)
    m = _mesh(mesh_file, geometry)
    V = bias_grid(start, stop, step, flat_band=-prm.V_bi, fine_step=fine_step)
    curve = jv_sweep(MacroModel(m, prm), V, tol=tol)
    write_curve(curve, output)
    click.echo(f"points={len(curve)} failures={len(curve.failures)}")
    try:
        voc, jsc = extract_voc_jsc(curve)
        click.echo(f"Voc={voc:.6f} Jsc={jsc:.6e}")
    except (VocUndefined, ValueError) as exc:
        click.echo(f"Voc/Jsc: {exc}")


# -- experiments -----------------------------------------------------------------------------

@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(file_okay=False), required=True)
def experiment(config, output):
    """Run a named experiment suite from a YAML config (or a previous manifest)."""
    from .experiments import run_experiment

    try:
        cfg = load_config(config)
    except ConfigError as exc:
        _fail(f"invalid config: {exc}", 2)
    out = run_experiment(cfg, output)
    click.echo(f"outputs in {out}")


@main.command()
@click.option("--E-max", "E_max", type=float, default=1e8, show_default=True)
@click.option("--count", type=int, default=41, show_default=True)
@click.option("--angles", default="0,30,60,90,120,150,180", show_default=True,
              help="Comma separated angles between field and normal [deg].")
@click.option("--T", "T", type=float, default=300.0, show_default=True)
@click.option("--eps-r", type=float, default=4.0, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False))
def kdiss(E_max, count, angles, T, eps_r, output):
    """Tabulate normalized dissociation rates (normal vs hemisphere model)."""
    prm = table2().with_(T=T, eps_r_a=eps_r, eps_r_d=eps_r)
    E = np.linspace(0.0, E_max, count)
    lines = ["angle_deg,E,normal,hemisphere"]
    for a in (float(x) for x in angles.split(",")):
        r = math.radians(a)
        En, Et = E * math.cos(r), np.abs(E * math.sin(r))
        kc = np.asarray(kdiss_normal(prm, En, Et)) / prm.k_diss0
        kb = np.asarray(kdiss_hemisphere(prm, En, Et)) / prm.k_diss0
        lines += [f"{a:.17g},{e:.17g},{c:.17g},{b:.17g}" for e, c, b in zip(E, kc, kb)]
    text = "\n".join(lines) + "\n"
    if output:
        Path(output).write_text(text)
    else:
        click.echo(text, nl=False)


if __name__ == "__main__":
    main()
