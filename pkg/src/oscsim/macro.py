"""Interface-lumped (macroscale) device model and its quasi-Newton solver.

Unknowns are the exciton density ``e``, the areal polaron-pair density
``P`` on the interface, the electron density ``n`` on the acceptor
closure, the hole density ``p`` on the donor closure and the potential
``phi``.  Residuals are assembled per node (``5 N`` entries) and folded to
degrees of freedom by the :class:`~oscsim.fem.DofMap`.

Sign conventions: electrons carry ``J_n = -D grad n + mu n grad phi``
(particle flux), holes ``J_p = -D grad p - mu p grad phi``.  Dissociation
generates both carriers at the interface, so the carrier rows carry
``-k_diss P + 2 H gamma n p``.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import params as ph
from .fem import (FIELDS, Assembler, DofMap, LinearSystem, apply_dirichlet,
                  assemble_interface_blocks, robin_terms, surface_lumped)
from .linsolve import SingularMatrixError, factorize
from .mesh import (ACCEPTOR_SIDE, ANODE, CATHODE, DONOR_SIDE, InterfaceSet, Mesh,
                   extract_interface, pair_periodic)
from .params import DeviceParams, Q_E

log = logging.getLogger(__name__)

DENSITY_FLOOR = 1e10


class DivergedState(ArithmeticError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class BdfContext:
    """Time-discretization data for one step.

    ``weights[0]`` multiplies the new state, ``weights[m]`` the state ``m``
    steps back; ``history[m-1]`` holds that state as a node-level vector.
    The steady context has ``weights == (0,)``.
    """
    weights: tuple = (0.0,)
    history: list = field(default_factory=list)

    @classmethod
    def steady(cls) -> "BdfContext":
        return cls((0.0,), [])

    @property
    def order(self) -> int:
        return len(self.weights) - 1

    @property
    def w0(self) -> float:
        return float(self.weights[0])

    @property
    def is_steady(self) -> bool:
        return self.order == 0

    def history_term(self, size: int) -> np.ndarray:
        d = np.zeros(size)
        for w, y in zip(self.weights[1:], self.history):
            d += w * y
        return d


@dataclass
class FieldSample:
    E_n: np.ndarray
    E_t: np.ndarray


@dataclass
class Coefficients:
    """Solution-dependent coefficients frozen during one quasi-Newton step."""
    E: np.ndarray          # (n_elements, d) element field
    mu_n: np.ndarray
    mu_p: np.ndarray
    k_diss: np.ndarray     # per source point (facet or node)
    gamma: np.ndarray
    fields: FieldSample | None = None
    mean_Ey: float | None = None


@dataclass
class NewtonReport:
    converged: bool
    iterations: int
    increment_norms: list
    residual_norms: list
    message: str = ""


class MacroModel:
    """Discrete macroscale model on a labeled mesh.

    Parameters
    ----------
    mesh : Mesh
    params : DeviceParams
    periodic : bool
        Identify lateral boundaries (2D only).
    quadrature : ConeQuadrature, optional
        Used by the cone dissociation models.
    """

    kind = "macro"

    def __init__(self, mesh: Mesh, params: DeviceParams, periodic: bool = True,
                 quadrature: ph.ConeQuadrature | None = None):
        self.mesh = mesh
        self.params = params
        self.quadrature = quadrature
        self.asm = Assembler(mesh)
        self.pairing = pair_periodic(mesh) if (periodic and mesh.dim == 2) else None
        self.acc_mask = mesh.elements_in(ACCEPTOR_SIDE).astype(float)
        self.don_mask = 1.0 - self.acc_mask
        self.eps = np.where(self.acc_mask > 0, params.eps_a, params.eps_d)
        self._setup_sources()
        self.dofmap = DofMap(mesh.n_nodes, self._supports(), self.pairing)
        N = mesh.n_nodes
        self.N = N
        self.K_eps = self.asm.stiffness(self.eps)
        self.K_De = self.asm.stiffness(params.D_e)
        self.M = self.asm.lumped_mass(1.0)
        self.M_n = self.asm.lumped_mass(1.0, self._n_mask())
        self.M_p = self.asm.lumped_mass(1.0, self._p_mask())
        self.cathode_nodes = mesh.nodes_with_tag(CATHODE)
        self.anode_nodes = mesh.nodes_with_tag(ANODE)
        self.cathode_measure = float(mesh.facet_measure(mesh.facets_with_tag(CATHODE)).sum())
        self.anode_measure = float(mesh.facet_measure(mesh.facets_with_tag(ANODE)).sum())
        self._setup_dirichlet()
        self._time_mask = np.zeros(5 * N, dtype=bool)
        self._time_mask[:4 * N] = True

    # -- model-specific pieces (overridden by the micro model) -----------------
    def _setup_sources(self):
        self.iface: InterfaceSet = extract_interface(self.mesh)
        f = self.iface
        self.W = surface_lumped(self.mesh.n_nodes, f.facets, f.measure)
        self.h_src = 2.0 * self.params.H
        self.A_coeff = ph.params_A(self.params)

    def _supports(self):
        m = self.mesh
        return {
            "e": np.arange(m.n_nodes),
            "P": self.iface.interface_nodes,
            "n": m.nodes_of(ACCEPTOR_SIDE),
            "p": m.nodes_of(DONOR_SIDE),
            "phi": np.arange(m.n_nodes),
        }

    def _n_mask(self):
        return self.acc_mask

    def _p_mask(self):
        return self.don_mask

    def _lump_source(self, values) -> np.ndarray:
        return surface_lumped(self.N, self.iface.facets, self.iface.measure, values)

    def polaron_floor(self) -> float:
        return DENSITY_FLOOR * self.h_src

    # -- boundary data -----------------------------------------------------------
    def _setup_dirichlet(self):
        p = self.params
        dm = self.dofmap
        dofs, values = [], []

        def add(name, nodes, value):
            nodes = nodes[dm.node_dof[dm.field_index(name), nodes] >= 0]
            d = dm.node_dof[dm.field_index(name), nodes]
            dofs.append(d)
            values.append(np.full(d.size, float(value)))

        both = np.union1d(self.cathode_nodes, self.anode_nodes)
        add("e", both, 0.0)
        if p.kappa_n == 0:
            add("n", self.cathode_nodes, p.beta_n / p.alpha_n)
        if p.kappa_p == 0:
            add("p", self.anode_nodes, p.beta_p / p.alpha_p)
        add("phi", self.cathode_nodes, 0.0)
        add("phi", self.anode_nodes, p.anode_potential)
        d = np.concatenate(dofs)
        v = np.concatenate(values)
        d, idx = np.unique(d, return_index=True)
        self.dirichlet_dofs = d
        self.dirichlet_values = v[idx]

    def with_params(self, params: DeviceParams) -> "MacroModel":
        """Same mesh and discretization with new parameters (cheap rebuild)."""
        return type(self)(self.mesh, params, periodic=self.pairing is not None,
                          quadrature=self.quadrature)

    def at_bias(self, V_appl: float) -> "MacroModel":
        """Shallow copy sharing all assembled operators, with a new applied voltage."""
        other = copy.copy(self)
        other.params = self.params.with_(V_appl=V_appl)
        other._setup_dirichlet()
        return other

    # -- states --------------------------------------------------------------------
    def split(self, y: np.ndarray) -> dict[str, np.ndarray]:
        return self.dofmap.split(self.dofmap.prolong(y))

    def full(self, y: np.ndarray) -> np.ndarray:
        return self.dofmap.prolong(y)

    def from_fields(self, **fields) -> np.ndarray:
        parts = {name: np.zeros(self.N) for name in FIELDS}
        for k, v in fields.items():
            parts[k] = np.broadcast_to(np.asarray(v, dtype=float), (self.N,))
        return self.dofmap.restrict(self.dofmap.join(parts))

    def enforce_dirichlet(self, y: np.ndarray) -> np.ndarray:
        y = np.array(y, dtype=float, copy=True)
        y[self.dirichlet_dofs] = self.dirichlet_values
        return y

    def charge_free_potential(self) -> np.ndarray:
        """Potential of the uncharged device (Laplace problem with contact data)."""
        dm = self.dofmap
        K = dm.fold_matrix(sp.block_diag([sp.csr_matrix((self.N, self.N))] * 4 + [self.K_eps]))
        sl = dm.block("phi")
        Kphi = K[sl, sl]
        dd = self.dirichlet_dofs
        dv = self.dirichlet_values
        mask = (dd >= sl.start) & (dd < sl.stop)
        d_loc = dd[mask] - sl.start
        A, b = apply_dirichlet(Kphi, np.zeros(Kphi.shape[0]), d_loc, dv[mask],
                               np.zeros(Kphi.shape[0]))
        phi = factorize(A).solve(b)
        y = np.zeros(dm.n_dofs)
        y[sl] = phi
        return dm.split(dm.prolong(y))["phi"]

    def initial_state(self) -> np.ndarray:
        """Dark initial guess: no excitons or pairs, contact densities, uncharged potential."""
        y = self.from_fields(phi=self.charge_free_potential())
        return self.enforce_dirichlet(y)

    # -- coefficients ----------------------------------------------------------------
    def coefficients(self, full: np.ndarray, mean_Ey: float | None = None) -> Coefficients:
        """Field-dependent coefficients; ``mean_Ey`` overrides the interface-averaged field."""
        prm = self.params
        phi = full[4 * self.N:]
        E = -self.asm.gradient(phi)
        Emag = np.linalg.norm(E, axis=1)
        mu_n = np.broadcast_to(ph.mobility(prm, "n", Emag), Emag.shape).astype(float)
        mu_p = np.broadcast_to(ph.mobility(prm, "p", Emag), Emag.shape).astype(float)
        return self._source_coefficients(E, mu_n, mu_p, mean_Ey)

    def _source_coefficients(self, E, mu_n, mu_p, mean_Ey=None) -> Coefficients:
        prm = self.params
        f = self.iface
        ea, ed = prm.eps_a, prm.eps_d
        Ef = (ed * E[f.donor_element] + ea * E[f.acceptor_element]) / (ea + ed)
        En = np.einsum("fd,fd->f", Ef, f.normal)
        Et = np.linalg.norm(Ef - En[:, None] * f.normal, axis=1)
        if mean_Ey is None:
            mean_Ey = float(np.sum(f.measure * Ef[:, -1]) / f.measure.sum())
        if prm.kdiss_model in ("B",) and self.quadrature is not None:
            kd = np.asarray(ph.kdiss_hemisphere(prm, En, Et, A=self.A_coeff,
                                                quadrature=self.quadrature))
        else:
            kd = ph.kdiss_per_facet(prm, En, Et, mean_Ey=mean_Ey, A=self.A_coeff)
        gamma = np.asarray(ph.bimolecular_gamma(prm, mu_n[f.acceptor_element],
                                                mu_p[f.donor_element]), dtype=float)
        gamma = np.broadcast_to(gamma, En.shape)
        return Coefficients(E, mu_n, mu_p, np.asarray(kd, dtype=float), gamma,
                            FieldSample(En, Et), mean_Ey)

    # -- residual and Jacobian ---------------------------------------------------------
    def node_residual(self, full: np.ndarray, bdf: BdfContext, coeffs: Coefficients | None = None,
                      jacobian: bool = False, robin: bool = True):
        """Node-level residual (``5 N``) and optionally its frozen-coefficient Jacobian."""
        prm = self.params
        N = self.N
        if coeffs is None:
            coeffs = self.coefficients(full)
        e, P, n, p, phi = (full[k * N:(k + 1) * N] for k in range(5))
        w0 = bdf.w0
        hist = bdf.history_term(5 * N)
        hist[~self._time_mask] = 0.0
        de, dP, dn, dp = (hist[k * N:(k + 1) * N] for k in range(4))
        h = self.h_src
        W = self.W
        Wk = self._lump_source(coeffs.k_diss)
        Wg = self._lump_source(coeffs.gamma)
        Vt = prm.thermal_voltage
        D_n, D_p = Vt * coeffs.mu_n, Vt * coeffs.mu_p

        ib = assemble_interface_blocks(W, Wk, Wg, h, prm.tau_diss, prm.eta, prm.k_rec,
                                       e, P, n, p, w0=w0, P_history=dP)
        Re = self.K_De @ e + self.M * ((1.0 / prm.tau_e + w0) * e - prm.Q + de) + ib.residual["e"]
        RP = ib.residual["P"]
        out_n = self.asm.drift_diffusion(n, phi, D_n, coeffs.mu_n, +1.0, self._n_mask(),
                                         jacobian=jacobian)
        out_p = self.asm.drift_diffusion(p, phi, D_p, coeffs.mu_p, -1.0, self._p_mask(),
                                         jacobian=jacobian)
        Rn_dd = out_n[0] if jacobian else out_n
        Rp_dd = out_p[0] if jacobian else out_p
        Rn = Rn_dd + self.M_n * (w0 * n + dn) + ib.residual["n"]
        Rp = Rp_dd + self.M_p * (w0 * p + dp) + ib.residual["p"]
        Rphi = self.K_eps @ phi + Q_E * (self.M_n * n - self.M_p * p)
        robin_n = robin_p = None
        if robin and prm.kappa_n > 0:
            rr, robin_n = robin_terms(self.mesh, CATHODE, n, prm.kappa_n, prm.alpha_n, prm.beta_n)
            Rn = Rn + rr
        if robin and prm.kappa_p > 0:
            rr, robin_p = robin_terms(self.mesh, ANODE, p, prm.kappa_p, prm.alpha_p, prm.beta_p)
            Rp = Rp + rr
        R = np.concatenate([Re, RP, Rn, Rp, Rphi])
        if not jacobian:
            return R
        _, Jnn, Jnphi = out_n
        _, Jpp, Jpphi = out_p
        dg = sp.diags
        jb = ib.jacobian
        ee = self.K_De + dg(self.M * (1.0 / prm.tau_e + w0) + jb["e", "e"])
        eP = dg(jb["e", "P"])
        Pe = dg(jb["P", "e"])
        PP = dg(jb["P", "P"])
        Pn = dg(jb["P", "n"])
        Pp = dg(jb["P", "p"])
        nP = dg(jb["n", "P"])
        pP = dg(jb["p", "P"])
        rn = robin_n if robin_n is not None else 0.0
        rp = robin_p if robin_p is not None else 0.0
        nn = Jnn + dg(self.M_n * w0 + jb["n", "n"] + rn)
        n_p = dg(jb["n", "p"])
        pn = dg(jb["p", "n"])
        pp = Jpp + dg(self.M_p * w0 + jb["p", "p"] + rp)
        phin = dg(Q_E * self.M_n)
        phip = dg(-Q_E * self.M_p)
        J = sp.bmat([
            [ee, eP, None, None, None],
            [Pe, PP, Pn, Pp, None],
            [None, nP, nn, n_p, Jnphi],
            [None, pP, pn, pp, Jpphi],
            [None, None, phin, phip, self.K_eps],
        ], format="csr")
        return R, J

    def residual(self, y: np.ndarray, bdf: BdfContext | None = None,
                 coeffs: Coefficients | None = None) -> np.ndarray:
        """Folded residual with Dirichlet rows replaced by ``y - value``."""
        bdf = bdf or BdfContext.steady()
        full = self.full(y)
        R = self.dofmap.fold_vector(self.node_residual(full, bdf, coeffs))
        R[self.dirichlet_dofs] = y[self.dirichlet_dofs] - self.dirichlet_values
        if not np.all(np.isfinite(R)):
            raise DivergedState("non-finite residual")
        return R

    def system(self, y: np.ndarray, bdf: BdfContext | None = None,
               coeffs: Coefficients | None = None,
               coefficient_jacobian: bool = False) -> tuple[np.ndarray, sp.csr_matrix]:
        """Folded residual and Jacobian.

        By default mobilities and interface rates are frozen.  With
        ``coefficient_jacobian`` their dependence on the potential is added
        by :meth:`coefficient_jacobian`.
        """
        bdf = bdf or BdfContext.steady()
        full = self.full(y)
        if coeffs is None:
            coeffs = self.coefficients(full)
        R, J = self.node_residual(full, bdf, coeffs, jacobian=True)
        if coefficient_jacobian:
            J = (J + self.coefficient_jacobian(full, bdf, coeffs, R)).tocsr()
        dm = self.dofmap
        R = dm.fold_vector(R)
        J = dm.fold_matrix(J)
        d = self.dirichlet_dofs
        R[d] = y[d] - self.dirichlet_values
        keep = np.ones(dm.n_dofs)
        keep[d] = 0.0
        J = (sp.diags(keep) @ J + sp.csr_matrix((np.ones(d.size), (d, d)),
                                               shape=J.shape)).tocsr()
        if not np.all(np.isfinite(R)):
            raise DivergedState("non-finite residual")
        return R, J

    def _phi_coloring(self):
        """Distance-2 greedy coloring of the node graph plus a (node, color) -> neighbour map."""
        if not hasattr(self, "_phi_colors"):
            N = self.N
            A = sp.csr_matrix((np.ones(self.asm.rows.size), (self.asm.rows, self.asm.cols)),
                              shape=(N, N))
            A2 = (A @ A).tocsr()
            color = np.full(N, -1, dtype=np.int64)
            for i in range(N):
                used = color[A2.indices[A2.indptr[i]:A2.indptr[i + 1]]]
                taken = np.zeros(used.size + 1, dtype=bool)
                taken[used[(used >= 0) & (used <= used.size)]] = True
                color[i] = int(np.argmin(taken))
            n_colors = int(color.max()) + 1
            Ac = A.tocoo()
            owner = np.full(N * n_colors, -1, dtype=np.int64)
            owner[Ac.row * n_colors + color[Ac.col]] = Ac.col
            self._phi_colors = (color, n_colors, owner)
        return self._phi_colors

    def coefficient_jacobian(self, full: np.ndarray, bdf: BdfContext, coeffs: Coefficients,
                             base: np.ndarray | None = None) -> sp.csr_matrix:
        """Node-level ``dR/dphi`` through mobilities, ``k_diss`` and ``gamma``.

        Forward differences over groups of potential columns that share no
        residual row.  The interface-averaged field stays frozen, since it
        couples every interface node to every other one.
        """
        N = self.N
        color, n_colors, owner = self._phi_coloring()
        if base is None:
            base = self.node_residual(full, bdf, coeffs)
        step = 1e-6 * self.params.thermal_voltage
        rows, cols, vals = [], [], []
        for c in range(n_colors):
            pert = full.copy()
            pert[4 * N:][color == c] += step
            co = self.coefficients(pert, mean_Ey=coeffs.mean_Ey)
            diff = (self.node_residual(full, bdf, co) - base) / step
            r = np.flatnonzero(diff)
            k = owner[(r % N) * n_colors + c]
            ok = k >= 0
            rows.append(r[ok])
            cols.append(4 * N + k[ok])
            vals.append(diff[r[ok]])
        return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(5 * N, 5 * N))

    def quasi_newton_system(self, y, bdf=None) -> LinearSystem:
        """Increment system ``J dy = -R`` with frozen mobilities and rates."""
        R, J = self.system(y, bdf)
        return LinearSystem(J, -R)

    # -- scaling -----------------------------------------------------------------------------
    def variable_scales(self, y: np.ndarray) -> np.ndarray:
        dm = self.dofmap
        s = np.empty(dm.n_dofs)
        for name in FIELDS:
            sl = dm.block(name)
            if name == "phi":
                s[sl] = self.params.thermal_voltage
            elif name == "P":
                s[sl] = np.max(np.abs(y[sl]), initial=0.0) + self.polaron_floor()
            else:
                s[sl] = np.max(np.abs(y[sl]), initial=0.0) + DENSITY_FLOOR
        return s

    # -- observables ---------------------------------------------------------------------------
    def contact_currents(self, y: np.ndarray, bdf: BdfContext | None = None,
                         coeffs: Coefficients | None = None) -> tuple[float, float]:
        """Outward conventional current through cathode and anode (A per unit depth).

        Summing un-replaced residual rows over contact nodes yields the
        boundary fluxes exactly; the displacement part is the BDF derivative
        of the Poisson row sums.
        """
        bdf = bdf or BdfContext.steady()
        N = self.N
        full = self.full(y)
        R = self.node_residual(full, bdf, coeffs, robin=False)
        Rn, Rp, Rphi = R[2 * N:3 * N], R[3 * N:4 * N], R[4 * N:]
        out = []
        for nodes in (self.cathode_nodes, self.anode_nodes):
            cond = Q_E * (Rn[nodes].sum() - Rp[nodes].sum())
            disp = 0.0
            if not bdf.is_steady:
                disp = bdf.w0 * Rphi[nodes].sum()
                for w, yh in zip(bdf.weights[1:], bdf.history):
                    disp += w * self._poisson_rows(yh)[nodes].sum()
            out.append(cond - disp)
        return out[0], out[1]

    def _poisson_rows(self, full: np.ndarray) -> np.ndarray:
        N = self.N
        n, p, phi = full[2 * N:3 * N], full[3 * N:4 * N], full[4 * N:]
        return self.K_eps @ phi + Q_E * (self.M_n * n - self.M_p * p)

    @property
    def collection_weight(self) -> np.ndarray:
        """Nodal ``v`` with ``K_eps v = 0`` off the contacts, ``v = 1`` on the cathode, 0 on the anode."""
        if not hasattr(self, "_collection_weight"):
            dm = self.dofmap
            sl = dm.block("phi")
            Kf = dm.fold_matrix(sp.block_diag([sp.csr_matrix((self.N, self.N))] * 4
                                              + [self.K_eps]))[sl, sl]
            cath = dm.dofs("phi", self.cathode_nodes) - sl.start
            anod = dm.dofs("phi", self.anode_nodes) - sl.start
            d = np.concatenate([cath, anod])
            vals = np.concatenate([np.ones(cath.size), np.zeros(anod.size)])
            n = Kf.shape[0]
            A, b = apply_dirichlet(Kf, np.zeros(n), d, vals, np.zeros(n))
            v = factorize(A).solve(b)
            y = np.zeros(dm.n_dofs)
            y[sl] = v
            self._collection_weight = dm.split(dm.prolong(y))["phi"]
        return self._collection_weight

    def weighted_current(self, y: np.ndarray, coeffs: Coefficients | None = None) -> float:
        """Outward cathode current from the harmonic-weighted transport residual.

        Weighting with :attr:`collection_weight` instead of summing contact
        rows makes the capacitive and carrier-storage terms cancel
        algebraically, so the result needs no time differencing.  At
        convergence it equals the cathode sum including displacement current.
        """
        N = self.N
        full = self.full(y)
        co = coeffs or self.coefficients(full)
        Vt = self.params.thermal_voltage
        n, p, phi = full[2 * N:3 * N], full[3 * N:4 * N], full[4 * N:]
        Rn = self.asm.drift_diffusion(n, phi, Vt * co.mu_n, co.mu_n, 1.0, self._n_mask(),
                                      jacobian=False)
        Rp = self.asm.drift_diffusion(p, phi, Vt * co.mu_p, co.mu_p, -1.0, self._p_mask(),
                                      jacobian=False)
        v = self.collection_weight
        return float(Q_E * v @ (Rn - Rp))

    def photocurrent(self, y, bdf=None) -> float:
        """Signed current density extracted at the cathode (positive under illumination)."""
        if bdf is None or bdf.is_steady:
            I_C, _ = self.contact_currents(y, bdf)
        else:
            I_C = self.weighted_current(y)
        return -I_C / self.cathode_measure

    def total_current(self, y, bdf=None, contact: str = "cathode") -> float:
        """Contact-averaged magnitude of conduction plus displacement current density."""
        if bdf is not None and not bdf.is_steady:
            I_C = self.weighted_current(y)
            I_A = -I_C
        else:
            I_C, I_A = self.contact_currents(y, bdf)
        if contact == "cathode":
            return abs(I_C) / self.cathode_measure
        if contact == "anode":
            return abs(I_A) / self.anode_measure
        raise ValueError(f"unknown contact {contact!r}")

    def interface_flux_balance(self, y: np.ndarray) -> tuple[float, float]:
        """Carrier transport leaving the interface nodes: (electrons, holes) per unit depth."""
        N = self.N
        full = self.full(y)
        co = self.coefficients(full)
        Vt = self.params.thermal_voltage
        n, p, phi = full[2 * N:3 * N], full[3 * N:4 * N], full[4 * N:]
        Rn = self.asm.drift_diffusion(n, phi, Vt * co.mu_n, co.mu_n, 1.0, self._n_mask(),
                                      jacobian=False)
        Rp = self.asm.drift_diffusion(p, phi, Vt * co.mu_p, co.mu_p, -1.0, self._p_mask(),
                                      jacobian=False)
        nodes = self.source_nodes
        return float(Rn[nodes].sum()), float(Rp[nodes].sum())

    @property
    def source_nodes(self) -> np.ndarray:
        return self.iface.interface_nodes


# -- module-level operations -------------------------------------------------------------

def residual(model: MacroModel, y: np.ndarray, bdf: BdfContext | None = None) -> np.ndarray:
    return model.residual(y, bdf)


def quasi_newton_system(model: MacroModel, y: np.ndarray, bdf: BdfContext | None = None) -> LinearSystem:
    return model.quasi_newton_system(y, bdf)


def eliminate_polaron_steady(e_trace, n_trace, p_trace, params: DeviceParams, k_diss,
                             gamma=None):
    """Steady areal pair density ``[(2H/tau_diss) e + 2H gamma n p] / (k_diss + k_rec)``."""
    k_diss = np.asarray(k_diss, dtype=float)
    if np.any(k_diss + params.k_rec <= 0):
        raise ValueError("k_diss + k_rec must be positive")
    g = params.gamma_bi if gamma is None else gamma
    h = 2.0 * params.H
    src = h / params.tau_diss * np.asarray(e_trace) + h * g * np.asarray(n_trace) * np.asarray(p_trace)
    return src / (k_diss + params.k_rec)


def compute_interface_fields(model: MacroModel, y: np.ndarray) -> tuple[FieldSample, float]:
    """Facet normal/tangential field and the length-averaged vertical field."""
    co = model.coefficients(model.full(y))
    return co.fields, co.mean_Ey


def _solve_increment(model, R, J, eliminate_polaron, scale):
    """Solve ``J dy = -R`` in variables normalized by ``scale``."""
    J = (J @ sp.diags(scale)).tocsr()
    if not eliminate_polaron:
        return scale * factorize(J).solve(-R)
    sl = model.dofmap.block("P")
    n = J.shape[0]
    idx = np.arange(n)
    pm = (idx >= sl.start) & (idx < sl.stop)
    o = np.flatnonzero(~pm)
    q = np.flatnonzero(pm)
    J = J.tocsr()
    Joo = J[o][:, o]
    Joq = J[o][:, q]
    Jqo = J[q][:, o]
    Dq = J[q][:, q].diagonal()
    Dinv = sp.diags(1.0 / Dq)
    S = (Joo - Joq @ Dinv @ Jqo).tocsr()
    rhs = -R[o] + Joq @ (R[q] / Dq)
    dx = np.empty(n)
    dx[o] = factorize(S).solve(rhs)
    dx[q] = (-R[q] - Jqo @ dx[o]) / Dq
    return scale * dx


STALL_RATIO = 0.3   # frozen-coefficient contraction regarded as stalled


def newton_solve(model: MacroModel, y0: np.ndarray, bdf: BdfContext | None = None,
                 tol: float = 1e-6, max_iter: int = 60, max_halvings: int = 8,
                 eliminate_polaron: bool | None = None, raise_on_failure: bool = False,
                 coefficient_jacobian: bool | None = None):
    """Damped quasi-Newton iteration.

    Converged when the scaled increment ``max |dy_i| / scale_i`` drops
    below ``tol`` after a full step.  The step is halved (at most
    ``max_halvings`` times) until the scaled residual decreases.

    ``coefficient_jacobian`` adds the field dependence of the mobilities
    and interface rates to the Jacobian.  ``None`` starts with frozen
    coefficients and switches for good once the frozen iteration stalls
    (failed line search, or increments shrinking by less than
    ``STALL_RATIO`` per step), which happens under strong space charge.

    Returns
    -------
    y : ndarray
    report : NewtonReport
    """
    bdf = bdf or BdfContext.steady()
    if eliminate_polaron is None:
        eliminate_polaron = bdf.is_steady
    y = model.enforce_dirichlet(y0)
    inc_hist, res_hist = [], []
    full_jac = bool(coefficient_jacobian)
    for it in range(1, max_iter + 1):
        try:
            R, J = model.system(y, bdf, coefficient_jacobian=full_jac)
            scale = model.variable_scales(y)
            dy = _solve_increment(model, R, J, eliminate_polaron, scale)
        except (DivergedState, SingularMatrixError) as exc:
            rep = NewtonReport(False, it, inc_hist, res_hist, f"{type(exc).__name__}: {exc}")
            if raise_on_failure:
                raise ConvergenceError(rep.message, rep) from exc
            return y, rep
        if not np.all(np.isfinite(dy)):
            rep = NewtonReport(False, it, inc_hist, res_hist, "non-finite increment")
            if raise_on_failure:
                raise ConvergenceError(rep.message, rep)
            return y, rep
        # rows normalized by their largest scaled Jacobian entry
        row = np.asarray(abs(J @ sp.diags(scale)).max(axis=1).toarray()).ravel()
        row[row == 0] = 1.0

        # Euclidean norm: the Newton direction is a descent direction for it,
        # unlike the max norm, which rejects good steps under steep layers.
        def merit(r):
            return float(np.linalg.norm(r / row))

        r0 = merit(R)
        res_hist.append(r0)
        lam = 1.0
        inc = float(np.max(np.abs(dy) / scale))
        inc_hist.append(inc)
        if (coefficient_jacobian is None and not full_jac and it > 3
                and inc > STALL_RATIO * inc_hist[-2]):
            full_jac = True
        if inc < tol:
            y = y + dy
            return y, NewtonReport(True, it, inc_hist, res_hist, "converged")
        accepted = False
        for _ in range(max_halvings + 1):
            trial = y + lam * dy
            try:
                rt = merit(model.residual(trial, bdf))
            except DivergedState:
                rt = np.inf
            if rt < r0 or r0 == 0.0:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            log.debug("line search failed at iteration %d, taking smallest step", it)
            if coefficient_jacobian is None and not full_jac:
                full_jac = True
        y = trial
    rep = NewtonReport(False, max_iter, inc_hist, res_hist, "maximum iterations exceeded")
    if raise_on_failure:
        raise ConvergenceError(rep.message, rep)
    return y, rep
