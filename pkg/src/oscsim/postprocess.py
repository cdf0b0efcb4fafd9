"""Device observables: J-V curves, Voc/Jsc extraction and field export."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .macro import BdfContext, ConvergenceError, MacroModel, newton_solve
from .mesh import Mesh

log = logging.getLogger(__name__)


class VocUndefined(ValueError):
    """The signed current does not change sign over the swept biases."""


@dataclass
class JVCurve:
    """Steady current-voltage characteristic.

    ``current`` is the signed photocurrent density (positive when the
    device delivers power); ``j_tot`` is its magnitude.
    """
    bias: np.ndarray
    current: np.ndarray
    reports: list = field(default_factory=list)
    kdiss_model: str = ""
    failures: list = field(default_factory=list)   # (bias, message)

    def __post_init__(self):
        self.bias = np.asarray(self.bias, dtype=float)
        self.current = np.asarray(self.current, dtype=float)
        if self.bias.shape != self.current.shape:
            raise ValueError("bias and current lengths differ")
        if np.any(np.diff(self.bias) <= 0):
            raise ValueError("biases must be strictly increasing")
        if not np.all(np.isfinite(self.current)):
            raise ValueError("non-finite current in J-V curve")

    @property
    def j_tot(self) -> np.ndarray:
        return np.abs(self.current)

    def __len__(self):
        return self.bias.size


def total_current(model: MacroModel, y: np.ndarray, contact: str = "cathode",
                  bdf: BdfContext | None = None) -> float:
    """Contact-averaged magnitude of the normal current density (A/m^2).

    Steady states (``bdf`` None or steady) use conduction current only.
    """
    return model.total_current(y, bdf, contact)


def bias_grid(start: float = 0.0, stop: float = 1.0, step: float = 0.05,
              flat_band: float | None = 0.6, fine_step: float = 0.005,
              fine_window: float = 0.05) -> np.ndarray:
    """Uniform bias list refined to ``fine_step`` within ``fine_window`` of flat band."""
    n = int(round((stop - start) / step))
    V = [start + k * step for k in range(n + 1)]
    if flat_band is not None and fine_step > 0:
        lo = max(start, flat_band - fine_window)
        hi = min(stop, flat_band + fine_window)
        m = int(round((hi - lo) / fine_step))
        V += [lo + k * fine_step for k in range(m + 1)]
    V = np.round(np.asarray(V), 12)
    return np.unique(V[(V >= start - 1e-12) & (V <= stop + 1e-12)])


def _continuation_solve(model: MacroModel, V_from: float, V_to: float, y: np.ndarray,
                        tol: float, max_iter: int, max_splits: int):
    """Reach ``V_to`` from a converged state at ``V_from``, bisecting the bias step on failure."""
    targets = [V_to]
    V_cur = V_from
    splits = 0
    rep = None
    while targets:
        V = targets[-1]
        mod = model.at_bias(V)
        y_new, rep = newton_solve(mod, y, tol=tol, max_iter=max_iter, eliminate_polaron=True)
        if rep.converged:
            y, V_cur = y_new, V
            targets.pop()
            continue
        if splits >= max_splits:
            return None, rep
        splits += 1
        targets.append(0.5 * (V_cur + V))
    return y, rep


def jv_sweep(model: MacroModel, biases, y0: np.ndarray | None = None, *, tol: float = 1e-6,
             max_iter: int = 60, max_splits: int = 6, keep_states: bool = False) -> JVCurve:
    """Steady J-V sweep with warm starts.

    Each bias is reached from the previous converged state; a failing
    step is bisected up to ``max_splits`` times.  Points that still fail
    are recorded in ``failures`` and skipped.
    """
    biases = np.asarray(biases, dtype=float)
    if np.any(np.diff(biases) <= 0):
        raise ValueError("biases must be strictly increasing")
    V_prev = None
    y = y0
    V_out, J_out, reports, failures, states = [], [], [], [], []
    for V in biases:
        mod = model.at_bias(V)
        if y is None:
            y_new, rep = newton_solve(mod, mod.initial_state(), tol=tol, max_iter=max_iter,
                                      eliminate_polaron=True)
            if not rep.converged:
                from .timestep import steady_solve
                try:
                    y_new, rep = steady_solve(mod, tol=tol, max_iter=max_iter)
                except ConvergenceError as exc:
                    y_new, rep = None, exc.report
        else:
            y_new, rep = _continuation_solve(model, V_prev, V, y, tol, max_iter, max_splits)
        if y_new is None or not rep.converged:
            msg = rep.message if rep is not None else "failed"
            log.warning("J-V point V=%.4f failed: %s", V, msg)
            failures.append((float(V), msg))
            continue
        y, V_prev = y_new, V
        V_out.append(float(V))
        J_out.append(mod.photocurrent(y))
        reports.append(rep)
        if keep_states:
            states.append(y.copy())
    curve = JVCurve(np.array(V_out), np.array(J_out), reports, model.params.kdiss_model, failures)
    if keep_states:
        curve.states = states
    return curve


def extract_voc_jsc(curve: JVCurve) -> tuple[float, float]:
    """Open-circuit voltage and short-circuit current density.

    ``Jsc = |j(V=0)|``; ``Voc`` is the first zero of the signed current,
    located by linear interpolation between the bracketing biases.
    """
    V, J = curve.bias, curve.current
    at0 = np.flatnonzero(np.abs(V) < 1e-12)
    if at0.size == 0:
        raise ValueError("curve has no point at V = 0")
    jsc = float(abs(J[at0[0]]))
    s = np.sign(J)
    idx = np.flatnonzero(s[:-1] * s[1:] <= 0)
    idx = [i for i in idx if not (J[i] == 0 and J[i + 1] == 0)]
    if not idx:
        raise VocUndefined("signed current has no zero crossing over the swept biases")
    i = idx[0]
    if J[i] == J[i + 1]:
        return float(V[i]), jsc
    voc = V[i] - J[i] * (V[i + 1] - V[i]) / (J[i + 1] - J[i])
    return float(voc), jsc


@dataclass
class VocJsc:
    voc: float
    jsc: float
    y_sc: np.ndarray     # short-circuit state
    y_oc: np.ndarray     # state at the last Voc root-search evaluation
    solves: int


def voc_jsc(model: MacroModel, y0: np.ndarray | None = None, v_step: float = 0.05,
            v_max: float = 3.0, tol: float = 1e-6, xtol: float = 1e-5, max_splits: int = 6,
            v_guess: float | None = None, y_guess: np.ndarray | None = None) -> VocJsc:
    """Jsc at V = 0 and Voc from bias stepping plus a bracketed root search.

    ``y0`` warm-starts the short-circuit solve.  With ``v_guess`` and
    ``y_guess`` (for instance the Voc state of a neighbouring generation
    rate) the bracket search starts there instead of at V = 0.
    """
    count = [0]

    def solve_at(v, y):
        count[0] += 1
        m = model.at_bias(v)
        return newton_solve(m, y, tol=tol, eliminate_polaron=True)

    mod = model.at_bias(0.0)
    y, rep = newton_solve(mod, mod.initial_state() if y0 is None else y0, tol=tol,
                          eliminate_polaron=True)
    count[0] += 1
    if not rep.converged:
        from .timestep import steady_solve
        y, rep = steady_solve(mod, tol=tol)
    y_sc = y
    jsc = mod.photocurrent(y)
    if jsc <= 0:
        raise VocUndefined("current is not positive at short circuit")

    V, j = 0.0, jsc
    if v_guess is not None and y_guess is not None and v_guess > 0:
        yg, r = solve_at(v_guess, y_guess)
        if r.converged:
            V, y, j = v_guess, yg, model.at_bias(v_guess).photocurrent(yg)

    def step(V0, y0_, dv):
        y1, r = _continuation_solve(model, V0, V0 + dv, y0_, tol, 60, max_splits)
        count[0] += 1
        if y1 is None:
            raise ConvergenceError(f"bias stepping failed beyond V={V0:.4f}: {r.message}", r)
        return V0 + dv, y1, model.at_bias(V0 + dv).photocurrent(y1)

    if j > 0:
        while j > 0:
            if V + v_step > v_max + 1e-12:
                raise VocUndefined(f"no current sign change below {v_max} V")
            V_lo, y_lo = V, y
            V, y, j = step(V, y, v_step)
        V_hi = V
    else:
        while j <= 0:
            if V - v_step < -1e-12:
                raise VocUndefined("current changes sign at negative bias")
            V_hi = V
            V, y, j = step(V, y, -v_step)
        V_lo, y_lo = V, y
    guess = {"y": y_lo}

    def f(v):
        yy, r = solve_at(v, guess["y"])
        if not r.converged:
            raise ConvergenceError(f"Voc search failed at V={v}: {r.message}", r)
        guess["y"] = yy
        return model.at_bias(v).photocurrent(yy)

    voc = brentq(f, V_lo, V_hi, xtol=xtol)
    return VocJsc(float(voc), float(jsc), y_sc, guess["y"], count[0])


def carrier_totals(model: MacroModel, y: np.ndarray) -> dict[str, float]:
    """Integrated electron and hole content per unit depth (1/m in 2D)."""
    N = model.N
    full = model.full(y)
    return {"electrons": float(model.M_n @ full[2 * N:3 * N]),
            "holes": float(model.M_p @ full[3 * N:4 * N])}


# -- field export ----------------------------------------------------------------------

_UNITS = {"x": "m", "y": "m", "e": "1/m^3", "n": "1/m^3", "p": "1/m^3", "phi": "V", "P": "1/m^2"}


def _write_table(path: Path, columns: dict[str, np.ndarray], comment: str = "") -> None:
    names = list(columns)
    with open(path, "w", newline="") as fh:
        for line in comment.splitlines():
            fh.write(f"# {line}\n")
        fh.write("# units: " + ", ".join(f"{k}[{_UNITS.get(k, '-')}]" for k in names) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*(np.asarray(columns[k]) for k in names)):
            w.writerow(["%.17g" % v for v in row])


def read_table(path) -> dict[str, np.ndarray]:
    """Read a table written by this module (comment lines start with '#')."""
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body]) if body else np.empty((0, len(header)))
    return {k: data[:, j] for j, k in enumerate(header)}


def export_fields(model: MacroModel, y: np.ndarray, path, comment: str = "") -> list[Path]:
    """Write nodal e, n, p, phi and interface-node P with coordinates.

    Produces ``<path>_nodes.csv`` and ``<path>_polaron.csv``.  Densities
    outside their phase are written as 0.
    """
    path = Path(path)
    mesh: Mesh = model.mesh
    parts = model.split(y)
    coords = {"x": mesh.nodes[:, 0]}
    if mesh.dim == 2:
        coords["y"] = mesh.nodes[:, 1]
    cols = dict(coords)
    for k in ("e", "n", "p", "phi"):
        cols[k] = parts[k]
    nodes_file = path.with_name(path.name + "_nodes.csv")
    _write_table(nodes_file, cols, comment)
    src = np.asarray(model.source_nodes)
    pcols = {k: v[src] for k, v in coords.items()}
    pcols["P"] = parts["P"][src]
    pol_file = path.with_name(path.name + "_polaron.csv")
    _write_table(pol_file, pcols, comment)
    return [nodes_file, pol_file]


def read_fields(path) -> dict[str, dict[str, np.ndarray]]:
    path = Path(path)
    return {"nodes": read_table(path.with_name(path.name + "_nodes.csv")),
            "polaron": read_table(path.with_name(path.name + "_polaron.csv"))}


def write_curve(curve: JVCurve, path, comment: str = "") -> Path:
    path = Path(path)
    names = ["V", "j", "j_tot", "iterations"]
    its = [r.iterations for r in curve.reports] if curve.reports else [0] * len(curve)
    with open(path, "w", newline="") as fh:
        for line in comment.splitlines():
            fh.write(f"# {line}\n")
        fh.write(f"# kdiss_model: {curve.kdiss_model}\n")
        fh.write("# units: V[V], j[A/m^2] (signed, positive = extracted), j_tot[A/m^2]\n")
        for v, msg in curve.failures:
            fh.write(f"# failed: V={v:.17g} {msg}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for v, j, it in zip(curve.bias, curve.current, its):
            w.writerow(["%.17g" % v, "%.17g" % j, "%.17g" % abs(j), str(it)])
    return path
