"""Microscale model with an explicitly meshed interface slab (1D).

Inside the slab of half width ``H`` around the junction, excitons convert
into polaron pairs (volumetric density ``P``) which dissociate into free
carriers or recombine.  Electrons live on the acceptor side plus the slab,
holes on the donor side plus the slab, so the internal no-flux conditions
at the slab edges hold naturally.
"""
from __future__ import annotations

import numpy as np

from . import params as ph
from .macro import DENSITY_FLOOR, BdfContext, Coefficients, MacroModel
from .mesh import ACCEPTOR, DONOR, SLAB_A, SLAB_D, Mesh, MeshError
from .params import DeviceParams

SLAB = (SLAB_D, SLAB_A)


class MicroModel(MacroModel):
    """Same unknown layout as :class:`MacroModel` with ``P`` volumetric on the slab."""

    kind = "micro"

    def __init__(self, mesh: Mesh, params: DeviceParams, **kwargs):
        if mesh.dim != 1:
            raise MeshError("the microscale model is one-dimensional")
        if not mesh.has_slab:
            raise MeshError("mesh lacks slab labels")
        super().__init__(mesh, params, periodic=False, **kwargs)

    def _setup_sources(self):
        m = self.mesh
        self.slab_mask = m.elements_in(SLAB).astype(float)
        self.W = self.asm.lumped_mass(1.0, self.slab_mask)
        self.h_src = 1.0
        self.A_coeff = ph.params_A(self.params)
        self.slab_nodes = m.nodes_of(SLAB)
        self.iface = None

    def _supports(self):
        m = self.mesh
        return {
            "e": np.arange(m.n_nodes),
            "P": self.slab_nodes,
            "n": m.nodes_of((ACCEPTOR, SLAB_A, SLAB_D)),
            "p": m.nodes_of((DONOR, SLAB_D, SLAB_A)),
            "phi": np.arange(m.n_nodes),
        }

    def _n_mask(self):
        return self.mesh.elements_in((ACCEPTOR, SLAB_A, SLAB_D)).astype(float)

    def _p_mask(self):
        return self.mesh.elements_in((DONOR, SLAB_D, SLAB_A)).astype(float)

    def _lump_source(self, values) -> np.ndarray:
        return self.asm.lumped_mass(values, self.slab_mask)

    def polaron_floor(self) -> float:
        return DENSITY_FLOOR

    def _source_coefficients(self, E, mu_n, mu_p, mean_Ey=None) -> Coefficients:
        prm = self.params
        kd = np.full(self.mesh.n_elements, prm.k_diss0)
        gamma = np.broadcast_to(np.asarray(ph.bimolecular_gamma(prm, mu_n, mu_p), dtype=float),
                                kd.shape)
        return Coefficients(E, mu_n, mu_p, kd, gamma)

    @property
    def source_nodes(self) -> np.ndarray:
        return self.slab_nodes

    @property
    def slab_measure(self) -> float:
        return float(self.mesh.element_measure[self.slab_mask > 0].sum())


def micro_residual(model: MicroModel, y: np.ndarray, bdf: BdfContext | None = None) -> np.ndarray:
    return model.residual(y, bdf)


def micro_solve_transient(params: DeviceParams, mesh: Mesh, t_end: float,
                          output_times=None, **controller):
    """Turn-on transient from the dark state; returns a :class:`~oscsim.timestep.Trajectory`."""
    from .timestep import march

    return march(MicroModel(mesh, params), t_end, output_times=output_times, **controller)
