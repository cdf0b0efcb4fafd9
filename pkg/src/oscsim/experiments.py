"""Named experiment suites driven by resolved configurations.

Every runner writes CSV tables into the output directory; :func:`run_experiment`
adds ``manifest.yaml`` (the resolved configuration plus provenance), which
can be passed back to :func:`run_experiment` to reproduce the outputs.
"""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, device_params, dump_config, resolve
from .macro import ConvergenceError, MacroModel, newton_solve
from .mesh import (build_complex_mesh, build_line_mesh, build_rod_mesh, extract_interface,
                   interface_length, write_mesh)
from .micro import MicroModel
from .params import kdiss_hemisphere, kdiss_normal
from .postprocess import (bias_grid, carrier_totals, export_fields, jv_sweep, voc_jsc,
                          write_curve)
from .timestep import march, steady_solve

log = logging.getLogger(__name__)


def write_rows(path: Path, header: list[str], rows, comment: str = "") -> Path:
    """CSV with 17 significant digits for floats; ``comment`` lines prefixed by '#'."""
    with open(path, "w", newline="") as fh:
        for line in comment.splitlines():
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([("%.17g" % v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def solve_steady(model: MacroModel, y0=None, tol: float = 1e-6, max_iter: int = 60):
    """Warm-started Newton with the pseudo-transient fallback of :func:`steady_solve`."""
    if y0 is not None:
        y, rep = newton_solve(model, y0, tol=tol, max_iter=max_iter, eliminate_polaron=True)
        if rep.converged:
            return y, rep
    return steady_solve(model, None, tol=tol, max_iter=max_iter)


def _line_mesh(m: dict, H: float):
    return build_line_mesh(m["length"], m["n_elements"], m["interface_position"],
                           slab_half_width=H, slab_elements=m["slab_elements"])


def _rod_mesh(g: dict, **over):
    g = {**g, **over}
    return build_rod_mesh(g["L_cell"], g["L_elec"], g["L_R"], g["W_R"], g["n_rods"],
                          alpha_deg=g.get("alpha_deg", 90.0), target_h=g["target_h"])


# -- runners ---------------------------------------------------------------------------------

def _micro_macro_1d(cfg, out: Path) -> list[Path]:
    V = cfg["V_appl"]
    tol = cfg["solver"]["tol"]
    rows = []
    for H in cfg["H_values"]:
        prm = device_params(cfg["params"], H=H, V_appl=V)
        mesh = _line_mesh(cfg["mesh"], H)
        micro, macro = MicroModel(mesh, prm), MacroModel(mesh, prm)
        j_mi = micro.photocurrent(solve_steady(micro, tol=tol)[0])
        j_ma = macro.photocurrent(solve_steady(macro, tol=tol)[0])
        rows.append((H, j_mi, j_ma, (j_ma - j_mi) / j_mi))
        log.info("H=%.3e micro=%.6e macro=%.6e", H, j_mi, j_ma)
    return [write_rows(out / "discrepancy.csv", ["H", "j_micro", "j_macro", "rel_diff"], rows,
                       "steady photocurrent density [A/m^2] vs slab half width H [m]")]


def _transient_1d(cfg, out: Path) -> list[Path]:
    H = cfg["H"]
    files = []
    for V in cfg["V_values"]:
        prm = device_params(cfg["params"], H=H, V_appl=V,
                            k_diss0=_table1_kdiss(cfg, V))
        mesh = _line_mesh(cfg["mesh"], H)
        trajs = {}
        for cls in (MicroModel, MacroModel):
            tr = march(cls(mesh, prm), cfg["t_end"], rtol=cfg["rtol"], dt0=cfg["dt0"])
            trajs[cls.kind] = tr
            files.append(write_rows(out / f"trajectory_{cls.kind}_V{V:g}.csv", ["t", "j"],
                                    zip(tr.times, tr.photocurrent),
                                    "photocurrent density [A/m^2] vs time [s]"))
        t_stop = min(trajs["micro"].times[-1], trajs["macro"].times[-1])
        s = cfg["samples"]
        tt = np.logspace(math.log10(s["t_min"]), math.log10(t_stop), s["count"])
        a, b = trajs["micro"].sample(tt), trajs["macro"].sample(tt)
        j_ss = abs(trajs["micro"].photocurrent[-1])
        rows = [(t, x, y, (y - x) / x if x else float("inf"), (y - x) / j_ss)
                for t, x, y in zip(tt, a, b)]
        files.append(write_rows(out / f"transient_V{V:g}.csv",
                                ["t", "j_micro", "j_macro", "rel_diff", "diff_over_steady"], rows,
                                "j_tot [A/m^2] sampled on a log time grid [s]"))
    return files


def _table1_kdiss(cfg, V) -> float:
    vals = cfg["k_diss0_values"]
    if len(vals) != len(cfg["V_values"]):
        raise ConfigError("k_diss0_values", "needs one entry per V_values entry")
    return vals[cfg["V_values"].index(V)]


def _jv_rods(cfg, out: Path) -> list[Path]:
    mesh = _rod_mesh(cfg["geometry"])
    biases = bias_grid(**cfg["bias"])
    files, rows = [], []
    for Q in cfg["Q_values"]:
        for model in cfg["models"]:
            prm = device_params(cfg["params"], kdiss_model=model, Q=Q)
            curve = jv_sweep(MacroModel(mesh, prm), biases, **cfg["solver"])
            files.append(write_curve(curve, out / f"jv_{model}_Q{Q:.3e}.csv",
                                     f"rod device, Q = {Q!r} 1/(m^3 s)"))
            j0 = curve.current[np.flatnonzero(curve.bias == 0.0)]
            rows.append((model, Q, float(j0[0]) if j0.size else float("nan"), len(curve.failures)))
    files.append(write_rows(out / "jsc.csv", ["model", "Q", "jsc", "failures"], rows))
    return files


def _density_fields(cfg, out: Path) -> list[Path]:
    mesh = _rod_mesh(cfg["geometry"])
    files, rows = [], []
    for model in cfg["models"]:
        prm = device_params(cfg["params"], kdiss_model=model, V_appl=cfg["V_appl"])
        mod = MacroModel(mesh, prm)
        y, _ = solve_steady(mod, **cfg["solver"])
        files += export_fields(mod, y, out / f"fields_{model}")
        tot = carrier_totals(mod, y)
        rows.append((model, tot["electrons"], tot["holes"], mod.photocurrent(y)))
    files.append(write_rows(out / "totals.csv", ["model", "electrons", "holes", "j"], rows,
                            "carrier content per unit depth [1/m], current density [A/m^2]"))
    return files


def _voc_jsc_vs_q(cfg, out: Path) -> list[Path]:
    mesh = _rod_mesh(cfg["geometry"])
    files = []
    for model in cfg["models"]:
        rows = []
        prev = None
        for Q in cfg["Q_values"]:
            prm = device_params(cfg["params"], kdiss_model=model, Q=Q)
            warm = {} if prev is None else {"v_guess": prev.voc, "y_guess": prev.y_oc,
                                             "y0": prev.y_sc}
            try:
                prev = voc_jsc(MacroModel(mesh, prm), v_step=cfg["v_step"],
                               tol=cfg["solver"]["tol"], **warm)
                voc, jsc = prev.voc, prev.jsc
            except (ConvergenceError, ValueError) as exc:
                log.warning("Voc/Jsc failed for model %s, Q=%.3e: %s", model, Q, exc)
                voc, jsc, prev = float("nan"), float("nan"), None
            rows.append((Q, voc, jsc))
        files.append(write_rows(out / f"voc_jsc_{model}.csv", ["Q", "voc", "jsc"], rows,
                                "Q [1/(m^3 s)], Voc [V], Jsc [A/m^2]"))
    return files


def _jsc_row(mesh, cfg, models):
    js = []
    for model in models:
        prm = device_params(cfg["params"], kdiss_model=model, V_appl=0.0)
        mod = MacroModel(mesh, prm)
        y, _ = solve_steady(mod, **cfg["solver"])
        js.append(mod.photocurrent(y))
    return js


def _interface_length_sweep(cfg, out: Path) -> list[Path]:
    g = cfg["geometry"]
    cases = [(0.0, 0)] if cfg["biplanar"] else []
    for W in cfg["W_R_values"]:
        n = int(round(g["L_elec"] / (2.0 * W)))
        if not math.isclose(n * 2.0 * W, g["L_elec"], rel_tol=1e-9):
            raise ConfigError("W_R_values", f"W_R={W!r} does not tile L_elec with period 2 W_R")
        cases.append((W, n))
    rows = []
    for W, n in cases:
        mesh = _rod_mesh(g, W_R=W if n else g["L_elec"], n_rods=n)
        length = interface_length(extract_interface(mesh))
        rows.append((W, n, length, *_jsc_row(mesh, cfg, cfg["models"])))
    header = ["W_R", "n_rods", "interface_length"] + [f"jsc_{m}" for m in cfg["models"]]
    return [write_rows(out / "jsc_vs_length.csv", header, rows,
                       "lengths [m] per unit depth of one periodic cell, Jsc [A/m^2]")]


def _angle_sweep(cfg, out: Path) -> list[Path]:
    rows = []
    for alpha in cfg["alpha_values"]:
        mesh = _rod_mesh(cfg["geometry"], alpha_deg=alpha)
        length = interface_length(extract_interface(mesh))
        rows.append((alpha, length, *_jsc_row(mesh, cfg, cfg["models"])))
    header = ["alpha_deg", "interface_length"] + [f"jsc_{m}" for m in cfg["models"]]
    return [write_rows(out / "jsc_vs_angle.csv", header, rows, "Jsc [A/m^2]")]


def _complex_morphology(cfg, out: Path) -> list[Path]:
    mo = cfg["morphology"]
    mesh = build_complex_mesh(mo["size"], n=mo["n"], seed=mo["seed"],
                              correlation=mo["correlation"], bias=mo["bias"])
    with open(out / "mesh.oscmesh", "w") as fh:
        write_mesh(mesh, fh)
    files = [out / "mesh.oscmesh"]
    length = interface_length(extract_interface(mesh))
    rows = []
    biases = bias_grid(**cfg["bias"])
    for model in cfg["models"]:
        prm = device_params(cfg["params"], kdiss_model=model)
        base = MacroModel(mesh, prm)
        curve = jv_sweep(base, biases, keep_states=True, **cfg["solver"])
        files.append(write_curve(curve, out / f"jv_{model}.csv",
                                 f"complex morphology, interface length {length!r} m"))
        i0 = np.flatnonzero(curve.bias == 0.0)
        if i0.size:
            files += export_fields(base, curve.states[i0[0]], out / f"fields_{model}")
            rows.append((model, float(curve.current[i0[0]])))
    files.append(write_rows(out / "jsc.csv", ["model", "jsc"], rows,
                            f"interface length {length!r} m"))
    return files


def _kdiss_table(cfg, out: Path) -> list[Path]:
    prm = device_params(cfg["params"])
    E = np.linspace(0.0, cfg["E_max"], cfg["E_count"])
    rows = []
    for ang in cfg["angles_deg"]:
        a = math.radians(ang)
        En, Et = E * math.cos(a), np.abs(E * math.sin(a))
        kc = np.asarray(kdiss_normal(prm, En, Et)) / prm.k_diss0
        kb = np.asarray(kdiss_hemisphere(prm, En, Et)) / prm.k_diss0
        rows += [(ang, e, c, b) for e, c, b in zip(E, kc, kb)]
    return [write_rows(out / "kdiss.csv", ["angle_deg", "E", "normal", "hemisphere"], rows,
                       "normalized dissociation rate k/k(0) vs |E| [V/m] at an angle to the normal")]


RUNNERS = {
    "micro_macro_1d": _micro_macro_1d,
    "transient_1d": _transient_1d,
    "jv_rods": _jv_rods,
    "density_fields": _density_fields,
    "voc_jsc_vs_q": _voc_jsc_vs_q,
    "interface_length_sweep": _interface_length_sweep,
    "angle_sweep": _angle_sweep,
    "complex_morphology": _complex_morphology,
    "kdiss_table": _kdiss_table,
}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(config: dict, output_dir) -> Path:
    """Resolve ``config``, run its suite and write outputs plus ``manifest.yaml``.

    Returns the output directory.
    """
    cfg = resolve(config)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = RUNNERS[cfg["kind"]](cfg, out)
    manifest = dict(cfg)
    manifest["provenance"] = {
        "code_version": __version__,
        "outputs": {p.name: _sha256(p) for p in files},
    }
    (out / "manifest.yaml").write_text(dump_config(manifest))
    return out
