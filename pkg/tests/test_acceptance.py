"""Acceptance criteria AC1-AC10.

Every test is tagged with its criterion; the terminal summary prints one
PASS/FAIL line per criterion followed by the measured quantities.  Run only
this suite with ``pytest tests/test_acceptance.py -v``.  Device solves are
slow on a single core (the whole file takes about an hour).

Every converged steady state produced here goes through :func:`audit`,
whose results AC9 checks at the end of the module.
"""
import math

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp

from oscsim.fem import Assembler
from oscsim.linsolve import factorize
from oscsim.macro import BdfContext, MacroModel, newton_solve
from oscsim.mesh import (ACCEPTOR, DONOR, Mesh, build_line_mesh, build_rod_mesh, extract_interface,
                         interface_length, structured_mesh)
from oscsim.micro import MicroModel
from oscsim.params import (beta_factor, cone_weight_integral, kdiss_averaged_A, kdiss_cone,
                           kdiss_hemisphere, kdiss_normal, params_A, table1, table2)
from oscsim.postprocess import jv_sweep, voc_jsc
from oscsim.timestep import march, steady_solve

pytestmark = pytest.mark.slow

MODELS = ("A", "B", "C")
Q_LOW, Q_HIGH = 1.53e23, 1.53e25

# rod device used for the J-V and Voc/Jsc studies
ROD_JV = dict(L_cell=150e-9, L_elec=50e-9, L_R=79e-9, W_R=6.25e-9, n_rods=4,
                target_h=1.5625e-9)
# wide cell of the morphology studies
WIDE = dict(L_cell=150e-9, L_elec=150e-9, L_R=75e-9, target_h=1.5625e-9)


def acceptance(name, title):
    return pytest.mark.acceptance(name, title=title)


# -- conservation audit ------------------------------------------------------------------

AUDITS: list[dict] = []


def audit(label: str, mod: MacroModel, y: np.ndarray) -> dict:
    """Conservation and positivity measures of a converged steady state.

    Interface measures are taken on folded rows: periodic partners share one
    pair unknown, so only the sum of their node rows balances.  The flux
    mismatch is relative to the gross exchange (dissociation plus
    recombination), the scale the solver tolerance acts on; at high
    generation the net exchange is a small difference of the two.
    """
    N = mod.N
    I_C, I_A = mod.contact_currents(y)
    full = mod.full(y)
    e, P, n, p = (full[k * N:(k + 1) * N] for k in range(4))
    neg = max(max(-v.min(), 0.0) / max(v.max(), 1e-300) for v in (e, P, n, p))
    co = mod.coefficients(full)
    Wk, Wg = mod._lump_source(co.k_diss), mod._lump_source(co.gamma)
    prm = mod.params
    rec = mod.h_src * Wg * n * p
    diss_total, rec_total = float(np.sum(Wk * P)), float(np.sum(rec))
    net = diss_total - rec_total
    out_n, out_p = mod.interface_flux_balance(y)
    mismatch = max(abs(out_n - net), abs(out_p - net))
    flux = mismatch / max(diss_total + rec_total, 1e-300)
    sl = mod.dofmap.block("P")

    def fold_pair(v):
        z = np.zeros(5 * N)
        z[N:2 * N] = v
        return mod.dofmap.fold_vector(z)[sl]

    R = mod.node_residual(full, BdfContext.steady(), co)
    gain = mod.W * mod.h_src / prm.tau_diss * e + rec
    loss = Wk * P + mod.W * prm.k_rec * P
    pair = float(np.abs(fold_pair(R[N:2 * N])).max() / max(fold_pair(gain + loss).max(), 1e-300))
    out = {"label": label,
           "balance": abs(I_C + I_A) / max(abs(I_C), abs(I_A), 1e-300),
           "negative": neg, "flux": flux, "flux_net": mismatch / max(abs(net), 1e-300),
           "pair": pair, "trivial": abs(net) == 0.0}
    AUDITS.append(out)
    return out


def converged_steady(mod, y0=None, label=""):
    if y0 is not None:
        y, rep = newton_solve(mod, y0, eliminate_polaron=True)
        if not rep.converged:
            y, rep = steady_solve(mod)
    else:
        y, rep = steady_solve(mod)
    assert rep.converged, f"{label}: {rep.message}"
    audit(label, mod, y)
    return y


# -- AC1 ---------------------------------------------------------------------------------

H_VALUES = (0.125e-9, 0.25e-9, 0.5e-9, 1e-9, 2e-9)


@pytest.fixture(scope="module")
def discrepancy():
    rel = {}
    for H in H_VALUES:
        prm = table1(0.0, H=H)
        mesh = build_line_mesh(100e-9, 400, 50e-9, H, slab_elements=16)
        j = {}
        for cls in (MicroModel, MacroModel):
            mod = cls(mesh, prm)
            j[cls.kind] = mod.photocurrent(converged_steady(mod, label=f"AC1 {cls.kind} H={H}"))
        rel[H] = (j["macro"] - j["micro"]) / j["micro"]
    return rel


@acceptance("AC1", "micro vs macro steady photocurrent, 1D")
def test_ac1_discrepancy_below_ten_percent(discrepancy, record):
    record("rel. diff: " + ", ".join(f"H={H * 1e9:g}nm {r:+.2%}" for H, r in discrepancy.items()))
    bad = {H: r for H, r in discrepancy.items() if not abs(r) < 0.10}
    assert not bad, f"discrepancy >= 10% at H = {sorted(bad)}"


@acceptance("AC1", "micro vs macro steady photocurrent, 1D")
def test_ac1_discrepancy_decreases_with_H(discrepancy):
    a = np.abs([discrepancy[H] for H in sorted(discrepancy)])
    assert np.all(np.diff(a) > 0)


# -- AC2 ---------------------------------------------------------------------------------

@pytest.fixture(scope="module", params=[0.0, 0.6], ids=["V0", "V0.6"])
def transients(request):
    V = request.param
    H = 0.25e-9
    prm = table1(V, H=H)
    mesh = build_line_mesh(100e-9, 200, 50e-9, H, slab_elements=8)
    out = {}
    for cls in (MicroModel, MacroModel):
        tr = march(cls(mesh, prm), 1e-3)
        assert tr.steady
        out[cls.kind] = tr
    return V, out


@acceptance("AC2", "micro vs macro transient turn-on, pointwise within 10%")
def test_ac2_transient_pointwise(transients, record):
    V, tr = transients
    mi, ma = tr["micro"], tr["macro"]
    # whole transient: from the first step of either run to the later steady time
    t0 = max(mi.times[1], ma.times[1])
    t1 = max(mi.times[-1], ma.times[-1])
    tt = np.logspace(math.log10(t0), math.log10(t1), 400)
    a = np.interp(tt, mi.times, mi.j_tot, right=mi.j_tot[-1])
    b = np.interp(tt, ma.times, ma.j_tot, right=ma.j_tot[-1])
    rel = np.abs(b - a) / a
    norm = np.abs(b - a) / a[-1]
    k = int(np.argmax(rel))
    record(f"V={V}: max pointwise rel. diff {rel.max():.1%} at t={tt[k]:.2e}s; "
           f"after t={tt[np.argmax(rel < 0.1)]:.2e}s below 10%; "
           f"max diff / steady value {norm.max():.2%}; steady rel. diff {rel[-1]:.2%}")
    assert rel.max() < 0.10


# -- AC3 ---------------------------------------------------------------------------------

P2 = table2()


@acceptance("AC3", "dissociation-rate models")
def test_ac3a_exact_at_zero_field():
    k0 = P2.k_diss0
    assert kdiss_normal(P2, 0.0) == k0
    assert kdiss_hemisphere(P2, 0.0, 0.0) == k0
    assert kdiss_averaged_A(P2, 0.0) == k0
    for tm in (1e-3, 0.5, math.pi / 2):
        assert kdiss_cone(P2, 0.0, 0.0, theta_max=tm) == k0


@acceptance("AC3", "dissociation-rate models")
def test_ac3b_cone_weight_normalized(record):
    tms = np.random.default_rng(20).uniform(1e-3, math.pi / 2, 20)
    err = max(abs(cone_weight_integral(t) - 1.0) for t in tms)
    record(f"cone weight normalization: max |int w - 1| = {err:.1e} over 20 angles")
    assert err < 1e-8


@acceptance("AC3", "dissociation-rate models")
def test_ac3c_narrow_cone_limit(record):
    E = np.linspace(-1e8, 1e8, 41)
    for ang in (0.0, 0.4, 1.0):
        En, Et = E * math.cos(ang), np.abs(E * math.sin(ang))
        dev = np.abs(kdiss_cone(P2, En, Et, theta_max=1e-4) / kdiss_normal(P2, En) - 1).max()
        assert dev < 1e-3
    record(f"narrow cone vs normal model: max rel. dev {dev:.1e}")


@acceptance("AC3", "dissociation-rate models")
def test_ac3d_hemisphere_quadrature_oracle(record):
    A = params_A(P2)
    th = np.linspace(0.0, math.pi / 2, 400001)
    worst = 0.0
    for En in (-1e8, -1e7, -1e5, 1e5, 1e7, 1e8):
        f = np.sin(th) * beta_factor(En * np.cos(th), A)
        ref = float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(th)))
        got = float(kdiss_hemisphere(P2, En, 0.0)) / P2.k_diss0
        worst = max(worst, abs(got - ref) / ref)
    record(f"hemisphere vs trapezoid oracle: max rel. err {worst:.1e}")
    assert worst < 1e-6


@acceptance("AC3", "dissociation-rate models")
def test_ac3e_hemisphere_less_variable(record):
    ang = np.linspace(0.0, math.pi, 37)
    ratios = []
    for E in np.linspace(2.5e6, 1e8, 40):
        En, Et = E * np.cos(ang), np.abs(E * np.sin(ang))
        b = np.ptp(kdiss_hemisphere(P2, En, Et))
        c = np.ptp(kdiss_normal(P2, En))
        ratios.append(b / c)
        assert b < c
    record(f"spread ratio hemisphere/normal over |E| <= 1e8 V/m: max {max(ratios):.3f}")


# -- AC4 / AC5 ---------------------------------------------------------------------------

JV_BIASES = np.round(np.concatenate([np.arange(0.0, 0.55, 0.05), np.arange(0.55, 0.65, 0.005),
                                     np.arange(0.65, 1.0001, 0.05)]), 4)


@pytest.fixture(scope="module")
def jv_mesh():
    return build_rod_mesh(**ROD_JV)


@pytest.fixture(scope="module")
def jv_curves(jv_mesh):
    curves = {}
    for model, Q in [(m, Q_LOW) for m in MODELS] + [("B", Q_HIGH)]:
        base = MacroModel(jv_mesh, table2(model, Q=Q))
        curve = jv_sweep(base, JV_BIASES, keep_states=True)
        for V, y in zip(curve.bias, curve.states):
            audit(f"AC4 {model} Q={Q:.2e} V={V}", base.at_bias(float(V)), y)
        curves[model, Q] = curve
    return curves


@acceptance("AC4", "rod-device J-V shape")
def test_ac4_sweeps_complete(jv_curves):
    for key, c in jv_curves.items():
        assert not c.failures, key
        assert np.allclose(c.bias, JV_BIASES)


@acceptance("AC4", "rod-device J-V shape")
@pytest.mark.parametrize("model", ["A", "C"])
def test_ac4_kink_at_flat_band(jv_curves, model, record):
    c = jv_curves[model, Q_LOW]
    V, j = c.bias, c.current
    fine = (V >= 0.55 - 1e-9) & (V <= 0.65 + 1e-9)
    Vf, jf = V[fine], j[fine]
    s = np.diff(jf) / np.diff(Vf)
    jump = np.abs(np.diff(s))        # slope change at the interior fine nodes
    nodes = Vf[1:-1]
    at = int(np.argmin(np.abs(nodes - 0.6)))
    others = np.delete(jump, at)
    ratio = jump[at] / np.median(others)
    record(f"model {model}: slope change at 0.6 V is {ratio:.1f}x the median elsewhere; "
           f"largest at {nodes[np.argmax(jump)]:.3f} V")
    assert np.all(np.isfinite(j))
    assert ratio > 10.0
    assert abs(nodes[np.argmax(jump)] - 0.6) < 1e-9


@acceptance("AC4", "rod-device J-V shape")
def test_ac4_model_B_bump(jv_curves, record):
    def rises_after_flat_band(c):
        m = c.bias >= 0.6 - 1e-9
        return np.diff(c.current[m]).max()

    low, high = rises_after_flat_band(jv_curves["B", Q_LOW]), rises_after_flat_band(jv_curves["B", Q_HIGH])
    record(f"model B largest rise past 0.6 V: {low:.3e} A/m^2 at Q={Q_LOW:.2e}, "
           f"{high:.3e} A/m^2 at Q={Q_HIGH:.2e}")
    assert low > 0.0
    assert high <= 0.0


@acceptance("AC4", "rod-device J-V shape")
def test_ac4_ordering_at_short_circuit(jv_curves, record):
    j0 = {m: jv_curves[m, Q_LOW].current[0] for m in MODELS}
    record("Jsc: " + ", ".join(f"{m} {v:.4e}" for m, v in j0.items()) + " A/m^2")
    assert j0["A"] > j0["B"] > j0["C"]


@acceptance("AC5", "Jsc scales with the generation rate")
def test_ac5_illumination_scaling(jv_mesh, jv_curves, record):
    ratios = {}
    for m in MODELS:
        mod = MacroModel(jv_mesh, table2(m, Q=Q_HIGH))
        if (m, Q_HIGH) in jv_curves:
            high = jv_curves[m, Q_HIGH].current[0]
        else:
            high = mod.photocurrent(converged_steady(mod, label=f"AC5 {m}"))
        ratios[m] = high / jv_curves[m, Q_LOW].current[0]
    record("Jsc(1.53e25)/Jsc(1.53e23): " + ", ".join(f"{m} {r:.2f}" for m, r in ratios.items()))
    assert all(80.0 <= r <= 120.0 for r in ratios.values())


# -- AC6 ---------------------------------------------------------------------------------

Q_SCAN = [1.53 * 10.0 ** k for k in range(20, 31)]


@pytest.fixture(scope="module", params=MODELS)
def voc_scan(request, jv_mesh):
    model = request.param
    prev, rows = None, []
    for Q in Q_SCAN:
        warm = {} if prev is None else {"v_guess": prev.voc, "y_guess": prev.y_oc,
                                        "y0": prev.y_sc}
        mod = MacroModel(jv_mesh, table2(model, Q=Q))
        prev = voc_jsc(mod, **warm)
        audit(f"AC6 {model} Q={Q:.2e} sc", mod.at_bias(0.0), prev.y_sc)
        rows.append((Q, prev.voc, prev.jsc))
    return model, np.array(rows)


@acceptance("AC6", "Voc and Jsc versus generation rate")
def test_ac6_voc_linear_in_log_q(voc_scan, record):
    model, r = voc_scan
    x, v = np.log10(r[:, 0]), r[:, 1]
    fit = np.polyfit(x, v, 1)
    r2 = 1 - np.sum((v - np.polyval(fit, x)) ** 2) / np.sum((v - v.mean()) ** 2)
    record(f"model {model}: Voc = {fit[1]:.3f} + {fit[0]:.4f} log10 Q, R^2 = {r2:.4f}; "
           "Voc: " + " ".join(f"{a:.3f}" for a in v))
    assert r2 > 0.98


@acceptance("AC6", "Voc and Jsc versus generation rate")
def test_ac6_jsc_linear_then_sublinear(voc_scan, record):
    model, r = voc_scan
    x, y = np.log10(r[:, 0]), np.log10(r[:, 2])
    low, high = r[:, 0] < 1e28, r[:, 0] > 1e28
    s_low = np.polyfit(x[low], y[low], 1)[0]
    s_high = np.polyfit(x[high], y[high], 1)[0]
    mid = (r[:, 0] > 1e21) & (r[:, 0] < 1e27)
    s_mid = np.polyfit(x[mid], y[mid], 1)[0]
    local = np.diff(y) / np.diff(x)
    record(f"model {model}: log Jsc slope {s_low:.3f} below 1e28 ({s_mid:.3f} on [1e21, 1e27]), "
           f"{s_high:.3f} above; "
           "per decade: " + " ".join(f"{s:.2f}" for s in local))
    assert 0.95 <= s_low <= 1.05
    assert s_high < 0.9


# -- AC7 ---------------------------------------------------------------------------------

W_R_VALUES = (75e-9, 37.5e-9, 18.75e-9, 12.5e-9, 9.375e-9, 7.5e-9, 6.25e-9)


def jsc_all_models(mesh, label):
    out = {}
    for m in MODELS:
        mod = MacroModel(mesh, table2(m, Q=Q_HIGH))
        out[m] = mod.photocurrent(converged_steady(mod, label=f"{label} {m}"))
    return out


@pytest.fixture(scope="module")
def length_study():
    rows = []
    for W in W_R_VALUES:
        n = int(round(WIDE["L_elec"] / (2 * W)))
        mesh = build_rod_mesh(W_R=W, n_rods=n, **WIDE)
        L = interface_length(extract_interface(mesh))
        rows.append((W, L, jsc_all_models(mesh, f"AC7 W_R={W:.3e}")))
    flat = build_rod_mesh(W_R=WIDE["L_elec"], n_rods=0, **WIDE)
    return rows, (interface_length(extract_interface(flat)), jsc_all_models(flat, "AC7 biplanar"))


@acceptance("AC7", "Jsc versus interface length")
def test_ac7_jsc_increases_and_saturates(length_study, record):
    rows, _ = length_study
    L = np.array([r[1] for r in rows])
    assert np.all(np.diff(L) > 0)
    for m in MODELS:
        j = np.array([r[2][m] for r in rows])
        gain = (j[-1] - j[-2]) / j[-2] / ((L[-1] - L[-2]) / 100e-9)
        record(f"model {m}: Jsc " + " ".join(f"{v:.4g}" for v in j)
               + f" over L[nm] " + " ".join(f"{v * 1e9:.0f}" for v in L)
               + f"; gain at finest W_R {gain:.2%} per 100 nm")
        assert np.all(np.diff(j) > 0), m
        assert gain < 0.01, m


@acceptance("AC7", "Jsc versus interface length")
def test_ac7_biplanar_model_C_highest(length_study, record):
    _, (L, j) = length_study
    record(f"biplanar (L={L * 1e9:.0f} nm): " + ", ".join(f"{m} {v:.4e}" for m, v in j.items()))
    assert j["C"] > j["A"] and j["C"] > j["B"]


# -- AC8 ---------------------------------------------------------------------------------

ALPHAS = (90.0, 86.0, 83.0, 80.0, 77.0 + 11.0 / 60.0)


@pytest.fixture(scope="module")
def angle_study():
    rows = []
    for a in ALPHAS:
        mesh = build_rod_mesh(W_R=18.75e-9, n_rods=4, alpha_deg=a, **WIDE)
        rows.append((a, interface_length(extract_interface(mesh)),
                     jsc_all_models(mesh, f"AC8 alpha={a:.3f}")))
    return rows


@acceptance("AC8", "Jsc versus rod inclination")
def test_ac8_angle_study(angle_study, record):
    L = np.array([r[1] for r in angle_study])
    spread_L = np.ptp(L) / L[0]
    j = {m: np.array([r[2][m] for r in angle_study]) for m in MODELS}
    spread = {m: np.ptp(j[m]) / j[m][0] for m in MODELS}
    record(f"interface length spread {spread_L:.2%}; Jsc spread "
           + ", ".join(f"{m} {s:.2%}" for m, s in spread.items())
           + f"; C at extreme/90 deg = {j['C'][-1] / j['C'][0]:.4f}")
    assert spread_L < 0.05
    assert spread["A"] < 0.02 and spread["B"] < 0.02
    assert j["C"][-1] > j["C"][0]


# -- AC10 --------------------------------------------------------------------------------

def exciton_mms_error(k):
    """Lumped L2 error of the exciton density for a 1D-in-y exact profile on a k x k grid."""
    L = 60e-9
    xs = np.linspace(0, L, k + 1)
    region = np.where(np.arange(k)[:, None] < k // 2, DONOR, ACCEPTOR) * np.ones((k, k), int)
    mesh = structured_mesh(xs, xs, region)
    prm = table2("C", Q=1e25).with_(tau_diss=1e30, eta=0.0)
    mod = MacroModel(mesh, prm)
    y, rep = newton_solve(mod, mod.initial_state(), eliminate_polaron=True)
    assert rep.converged
    ell = math.sqrt(prm.D_e * prm.tau_e)
    yy = mod.mesh.nodes[:, 1]
    exact = prm.Q * prm.tau_e * (1 - np.cosh((yy - L / 2) / ell) / math.cosh(L / (2 * ell)))
    e = mod.full(y)[:mod.N]
    return math.sqrt(np.sum(mod.M * (e - exact) ** 2) / np.sum(mod.M * exact ** 2))


@acceptance("AC10", "numerical building blocks")
def test_ac10_exciton_manufactured_convergence(record):
    errs = [exciton_mms_error(k) for k in (16, 32, 64)]
    orders = [math.log2(a / b) for a, b in zip(errs, errs[1:])]
    record("exciton L2 errors " + " ".join(f"{e:.2e}" for e in errs)
           + "; observed orders " + " ".join(f"{o:.3f}" for o in orders))
    # observed orders approach the formal order 2 from below
    assert all(o >= 1.95 for o in orders)
    assert orders[-1] >= orders[0]


@acceptance("AC10", "numerical building blocks")
@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_ac10_sg_constant_flux_exact(sign, record):
    """Nodal values of an exact constant-flux profile give that flux on every edge."""
    rng = np.random.default_rng(7)
    x = np.concatenate([[0.0], np.sort(rng.uniform(0, 100e-9, 30)), [100e-9]])
    m = build_line_mesh(100e-9, 31, 50e-9)
    mesh = Mesh(x, m.elements, m.element_region, m.boundary_facets, m.boundary_tags)
    phi = np.cumsum(np.concatenate([[0.0], rng.uniform(-0.05, 0.05, 31)]))
    Vt = table2().thermal_voltage
    mu = 1e-8
    D = Vt * mu
    G = -sign * 1e20                      # flux in 1/(m^2 s), comparable to the drift term
    u = [1e21]
    for i in range(31):
        # closed-form solution of D u' - s mu u phi' = -G with phi' constant on the element
        k = sign * (phi[i + 1] - phi[i]) / (x[i + 1] - x[i]) / Vt
        c = G / (D * k)
        u.append(c + (u[-1] - c) * math.exp(k * (x[i + 1] - x[i])))
    u = np.array(u)
    flux = Assembler(mesh).edge_fluxes(u, phi, D, mu, sign).ravel()
    err = np.abs(flux - G).max() / abs(G)
    record(f"SG flux vs closed-form oracle (sign {sign:+g}): max rel. err {err:.1e}")
    assert err < 1e-8


@acceptance("AC10", "numerical building blocks")
def decay_error(rtol):
    """Largest deviation from an exact exponential exciton decay, over the initial amplitude."""
    mesh = build_line_mesh(100e-9, 20, 50e-9)
    prm = table1(V_appl=0.6).with_(Q=0.0, eta=0.0)
    mod = MacroModel(mesh, prm)
    N = mod.N
    K = mod.K_De.toarray() + np.diag(mod.M / prm.tau_e + mod.W * mod.h_src / prm.tau_diss)
    inner = np.arange(1, N - 1)
    lam, vec = sla.eigh(K[np.ix_(inner, inner)], np.diag(mod.M[inner]))
    v = np.zeros(N)
    v[inner] = vec[:, 0]
    v *= 1e20 / np.abs(v).max() * np.sign(v.sum())
    tau = 1.0 / lam[0]
    tr = march(mod, 5 * tau, mod.enforce_dirichlet(mod.from_fields(e=v)), rtol=rtol,
               dt0=1e-3 * tau, stop_at_steady=False)
    err = max(np.abs(mod.split(y)["e"] - v * math.exp(-lam[0] * t)).max()
              for t, y in zip(tr.times, tr.states)) / np.abs(v).max()
    return err, len(tr.times) - 1


@acceptance("AC10", "numerical building blocks")
@pytest.mark.parametrize("rtol", [1e-2, 1e-3])
def test_ac10_bdf_analytic_decay(rtol, record):
    err, steps = decay_error(rtol)
    msg = f"decay oracle rtol={rtol:g}: max error {err:.2e} of the initial amplitude, {steps} steps"
    if rtol == 1e-3:
        # local error control: the global error grows like rtol**(2/3), reported for reference
        e4, s4 = decay_error(1e-4)
        msg += f" (rtol=1e-4: {e4:.2e}, {s4} steps)"
    record(msg)
    assert err <= rtol


@acceptance("AC10", "numerical building blocks")
def test_ac10_sparse_solver_oracles(record):
    rng = np.random.default_rng(3)
    n = 300
    # tridiagonal oracle (Thomas algorithm)
    a, b, c = rng.uniform(-1, 0, n), rng.uniform(2.5, 4, n), rng.uniform(-1, 0, n)
    d = rng.standard_normal(n)
    T = sp.diags([a[1:], b, c[:-1]], [-1, 0, 1], format="csr")
    cp, dp = np.empty(n), np.empty(n)
    cp[0], dp[0] = c[0] / b[0], d[0] / b[0]
    for i in range(1, n):
        m = b[i] - a[i] * cp[i - 1]
        cp[i] = c[i] / m
        dp[i] = (d[i] - a[i] * dp[i - 1]) / m
    xt = np.empty(n)
    xt[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        xt[i] = dp[i] - cp[i] * xt[i + 1]
    e1 = np.abs(factorize(T).solve(d) - xt).max() / np.abs(xt).max()
    # unsymmetric sparse against dense LU, with badly scaled rows
    A = sp.random(n, n, density=0.03, random_state=4, format="csr") + sp.eye(n) * 5
    A = (sp.diags(10.0 ** rng.uniform(-10, 10, n)) @ A).tocsr()
    rhs = rng.standard_normal(n)
    xd = sla.lu_solve(sla.lu_factor(A.toarray()), rhs)
    e2 = np.abs(factorize(A).solve(rhs) - xd).max() / np.abs(xd).max()
    record(f"solver vs Thomas {e1:.1e}, vs dense LU {e2:.1e}")
    assert e1 < 1e-9 and e2 < 1e-9


# -- AC9 (runs last: it checks the audits collected above) ------------------------------------

@acceptance("AC9", "conservation and positivity of every converged solve")
def test_ac9_conservation_audit(record):
    if len(AUDITS) < 5:                      # run on its own: audit a few representative solves
        for m in MODELS:
            mesh = build_rod_mesh(60e-9, 20e-9, 30e-9, 10e-9, 1, target_h=2.5e-9)
            mod = MacroModel(mesh, table2(m, Q=Q_HIGH))
            converged_steady(mod, label=f"AC9 {m}")
        mod = MacroModel(build_line_mesh(100e-9, 100, 50e-9), table1())
        converged_steady(mod, label="AC9 line")
    worst = {k: max(AUDITS, key=lambda a: a[k]) for k in ("balance", "negative", "flux", "flux_net", "pair")}
    record(f"{len(AUDITS)} states; worst: " + "; ".join(
        f"{k} {w[k]:.1e} ({w['label']})" for k, w in worst.items()))
    assert worst["balance"]["balance"] < 1e-6
    assert worst["negative"]["negative"] <= 1e-12
    assert worst["flux"]["flux"] < 1e-6
    assert worst["pair"]["pair"] < 1e-6
