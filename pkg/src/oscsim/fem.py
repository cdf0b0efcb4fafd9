"""P1 finite-element assembly on labeled meshes.

Matrices are assembled at node level (``N x N`` per field) and folded onto
degrees of freedom with the prolongation of a :class:`DofMap`, which also
realizes field supports and periodic identification.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, PeriodicPairing

log = logging.getLogger(__name__)

FIELDS = ("e", "P", "n", "p", "phi")


class AssemblyError(RuntimeError):
    pass


class NonDelaunayWarning(UserWarning):
    pass


# -- Bernoulli function -------------------------------------------------------

def bernoulli(x):
    """``B(x) = x / (exp(x) - 1)`` with a series branch near zero."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-4
    xs = x[small]
    out[small] = 1.0 - xs / 2.0 + xs ** 2 / 12.0 - xs ** 4 / 720.0
    xl = x[~small]
    with np.errstate(over="ignore"):
        # expm1 overflows to inf for large x, giving the correct limit 0
        out[~small] = xl / np.expm1(xl)
    return out if out.ndim else float(out)


def bernoulli_prime(x):
    """Derivative of :func:`bernoulli`."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = np.abs(x) < 1e-4
    xs = x[small]
    out[small] = -0.5 + xs / 6.0 - xs ** 3 / 180.0
    xl = x[~small]
    b = bernoulli(xl)
    bm = bernoulli(-xl)
    # B'(x) = (B(x) - B(x) B(-x)) / x, using exp(x) B(x) = B(-x)
    out[~small] = b * (1.0 - bm) / xl
    return out if out.ndim else float(out)


# -- degrees of freedom ---------------------------------------------------------

class DofMap:
    """Block-wise numbering of the unknowns ``e | P | n | p | phi``.

    Parameters
    ----------
    n_nodes : int
    supports : dict
        Field name to sorted node indices where the field lives.
    pairing : PeriodicPairing, optional
        Right lateral nodes are identified with their left partners.
    """

    def __init__(self, n_nodes: int, supports: dict[str, np.ndarray],
                 pairing: PeriodicPairing | None = None, fields=FIELDS):
        self.n_nodes = n_nodes
        self.fields = tuple(fields)
        master = np.arange(n_nodes)
        if pairing is not None and pairing.n_pairs:
            left, right = pairing.node_pairs[:, 0], pairing.node_pairs[:, 1]
            master[right] = left
            # resolve chains (corner nodes)
            for _ in range(3):
                master = master[master]
        self.master = master
        self.supports = {}
        self.node_dof = np.full((len(self.fields), n_nodes), -1, dtype=np.int64)
        self.offsets = [0]
        for k, name in enumerate(self.fields):
            nodes = np.unique(np.asarray(supports[name], dtype=np.int64))
            self.supports[name] = nodes
            in_support = np.zeros(n_nodes, dtype=bool)
            in_support[nodes] = True
            slaves = nodes[master[nodes] != nodes]
            if np.any(~in_support[master[slaves]]):
                raise AssemblyError(f"periodic pairing references a node outside the "
                                    f"support of {name}")
            owners = nodes[master[nodes] == nodes]
            local = np.full(n_nodes, -1, dtype=np.int64)
            local[owners] = np.arange(owners.size) + self.offsets[-1]
            self.node_dof[k, nodes] = local[master[nodes]]
            self.offsets.append(self.offsets[-1] + owners.size)
        self.n_dofs = self.offsets[-1]

    def field_index(self, name: str) -> int:
        return self.fields.index(name)

    def dofs(self, name: str, nodes=None) -> np.ndarray:
        k = self.field_index(name)
        if nodes is None:
            nodes = self.supports[name]
        d = self.node_dof[k, nodes]
        if np.any(d < 0):
            raise AssemblyError(f"node outside the support of field {name}")
        return d

    def block(self, name: str) -> slice:
        k = self.field_index(name)
        return slice(self.offsets[k], self.offsets[k + 1])

    @cached_property
    def prolongation(self) -> sp.csr_matrix:
        """``(n_fields * N) x n_dofs`` 0/1 matrix mapping dofs to node values."""
        rows, cols = [], []
        for k in range(len(self.fields)):
            nodes = np.flatnonzero(self.node_dof[k] >= 0)
            rows.append(k * self.n_nodes + nodes)
            cols.append(self.node_dof[k, nodes])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        return sp.csr_matrix((np.ones(rows.size), (rows, cols)),
                             shape=(len(self.fields) * self.n_nodes, self.n_dofs))

    def field_prolongation(self, name: str) -> sp.csr_matrix:
        """``N x n_field_dofs`` 0/1 matrix mapping one field's dofs to node values."""
        k = self.field_index(name)
        sl = self.block(name)
        nodes = np.flatnonzero(self.node_dof[k] >= 0)
        cols = self.node_dof[k, nodes] - sl.start
        return sp.csr_matrix((np.ones(nodes.size), (nodes, cols)),
                             shape=(self.n_nodes, sl.stop - sl.start))

    def prolong(self, y: np.ndarray) -> np.ndarray:
        return self.prolongation @ y

    def restrict(self, full: np.ndarray) -> np.ndarray:
        """Pick master-node values of a node-level vector (injection)."""
        y = np.zeros(self.n_dofs)
        for k in range(len(self.fields)):
            nodes = np.flatnonzero(self.node_dof[k] >= 0)
            y[self.node_dof[k, nodes]] = full[k * self.n_nodes + nodes]
        return y

    def fold_vector(self, r: np.ndarray) -> np.ndarray:
        return self.prolongation.T @ r

    def fold_matrix(self, A: sp.spmatrix) -> sp.csr_matrix:
        P = self.prolongation
        return (P.T @ A @ P).tocsr()

    def split(self, full: np.ndarray) -> dict[str, np.ndarray]:
        N = self.n_nodes
        return {name: full[k * N:(k + 1) * N] for k, name in enumerate(self.fields)}

    def join(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(parts[name], dtype=float) for name in self.fields])


@dataclass(frozen=True)
class LinearSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray

    def __post_init__(self):
        n = self.matrix.shape[0]
        if self.matrix.shape != (n, n) or self.rhs.shape != (n,):
            raise AssemblyError("inconsistent system dimensions")
        if not (np.all(np.isfinite(self.matrix.data)) and np.all(np.isfinite(self.rhs))):
            raise AssemblyError("non-finite entries in linear system")

    @property
    def dimension(self) -> int:
        return self.rhs.size


def dump_coo(matrix: sp.spmatrix, stream) -> None:
    """Write ``row col value`` triplets, sorted, for fixture comparison."""
    A = sp.coo_matrix(matrix)
    order = np.lexsort((A.col, A.row))
    for i, j, v in zip(A.row[order], A.col[order], A.data[order]):
        stream.write(f"{i} {j} {float(v)!r}\n")


# -- element-level assembly ----------------------------------------------------

class Assembler:
    """Cached element geometry and scatter patterns for one mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        d = mesh.dim
        self.n_loc = d + 1
        if d == 1:
            self.pairs = np.array([[0, 1]])
        else:
            self.pairs = np.array([[0, 1], [1, 2], [0, 2]])
        el = mesh.elements
        self.rows = np.repeat(el, self.n_loc, axis=1).ravel()
        self.cols = np.tile(el, (1, self.n_loc)).ravel()
        g = mesh.barycentric_gradients
        vol = mesh.element_measure
        # local stiffness for unit coefficient: |K| grad_i . grad_j
        self.local_stiffness = vol[:, None, None] * np.einsum("eid,ejd->eij", g, g)
        pi, pj = self.pairs[:, 0], self.pairs[:, 1]
        self.edge_weight = -self.local_stiffness[:, pi, pj]   # (E, n_pairs)
        self.edge_i = el[:, pi]
        self.edge_j = el[:, pj]
        if np.any(self.edge_weight < -1e-12 * np.abs(self.edge_weight).max()):
            warnings.warn("obtuse angles give negative edge weights; the "
                          "drift-diffusion matrix may lose the M-matrix property",
                          NonDelaunayWarning, stacklevel=2)

    @property
    def N(self) -> int:
        return self.mesh.n_nodes

    def _matrix(self, local: np.ndarray) -> sp.csr_matrix:
        return sp.csr_matrix((local.ravel(), (self.rows, self.cols)), shape=(self.N, self.N))

    def _mask(self, mask):
        if mask is None:
            return np.ones(self.mesh.n_elements)
        return np.asarray(mask, dtype=float)

    def stiffness(self, coeff, mask=None) -> sp.csr_matrix:
        """``sum_K c_K |K| grad l_i . grad l_j`` restricted to ``mask``."""
        c = np.broadcast_to(np.asarray(coeff, dtype=float), (self.mesh.n_elements,))
        if np.any(c * self._mask(mask) < 0):
            raise AssemblyError("stiffness coefficient must be nonnegative")
        return self._matrix(self.local_stiffness * (c * self._mask(mask))[:, None, None])

    def lumped_mass(self, coeff=1.0, mask=None) -> np.ndarray:
        """Diagonal of the vertex-lumped mass matrix as a node vector."""
        c = np.broadcast_to(np.asarray(coeff, dtype=float), (self.mesh.n_elements,))
        w = c * self._mask(mask) * self.mesh.element_measure / self.n_loc
        return np.bincount(self.mesh.elements.ravel(), weights=np.repeat(w, self.n_loc),
                           minlength=self.N)

    def gradient(self, u: np.ndarray) -> np.ndarray:
        """Elementwise gradient (E, d) of a nodal P1 function."""
        return np.einsum("eid,ei->ed", self.mesh.barycentric_gradients, u[self.mesh.elements])

    def drift_diffusion(self, u: np.ndarray, phi: np.ndarray, D, mu, sign: float,
                        mask=None, jacobian: bool = True):
        """Exponentially fitted residual ``R_i = sum_edges G`` and its derivatives.

        The edge flux on edge ``(i, j)`` of element ``K`` is
        ``G = D w_ij [B(-d) u_i - B(d) u_j]`` with ``d = sign mu/D (phi_j - phi_i)``,
        which is the weak form of ``-div(D grad u - sign mu u grad phi)``.

        Returns
        -------
        R : (N,) residual contribution
        J_u, J_phi : sparse derivatives with respect to ``u`` and ``phi``
        """
        E = self.mesh.n_elements
        D = np.broadcast_to(np.asarray(D, dtype=float), (E,))
        mu = np.broadcast_to(np.asarray(mu, dtype=float), (E,))
        m = self._mask(mask)
        s = sign * mu / D
        i, j = self.edge_i, self.edge_j
        w = self.edge_weight * (D * m)[:, None]
        delta = s[:, None] * (phi[j] - phi[i])
        bm = bernoulli(-delta)
        bp = bernoulli(delta)
        G = w * (bm * u[i] - bp * u[j])
        N = self.N
        R = np.bincount(i.ravel(), G.ravel(), N) - np.bincount(j.ravel(), G.ravel(), N)
        if not jacobian:
            return R
        gi = w * bm          # dG/du_i
        gj = -w * bp         # dG/du_j
        rows = np.concatenate([i.ravel(), i.ravel(), j.ravel(), j.ravel()])
        cols = np.concatenate([i.ravel(), j.ravel(), i.ravel(), j.ravel()])
        vals = np.concatenate([gi.ravel(), gj.ravel(), -gi.ravel(), -gj.ravel()])
        J_u = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
        dG = w * (-bernoulli_prime(-delta) * u[i] - bernoulli_prime(delta) * u[j])
        gphi_j = dG * s[:, None]
        vals = np.concatenate([-gphi_j.ravel(), gphi_j.ravel(), gphi_j.ravel(), -gphi_j.ravel()])
        J_phi = sp.csr_matrix((vals, (rows, cols)), shape=(N, N))
        return R, J_u, J_phi

    def drift_diffusion_matrix(self, phi, D, mu, sign, mask=None) -> sp.csr_matrix:
        """Matrix of the (linear in ``u``) exponentially fitted operator."""
        _, J_u, _ = self.drift_diffusion(np.zeros(self.N), phi, D, mu, sign, mask)
        return J_u

    def edge_fluxes(self, u, phi, D, mu, sign, mask=None) -> np.ndarray:
        """Per element and local edge, the flux ``G`` from node i to node j."""
        E = self.mesh.n_elements
        D = np.broadcast_to(np.asarray(D, dtype=float), (E,))
        mu = np.broadcast_to(np.asarray(mu, dtype=float), (E,))
        s = sign * mu / D
        i, j = self.edge_i, self.edge_j
        w = self.edge_weight * (D * self._mask(mask))[:, None]
        delta = s[:, None] * (phi[j] - phi[i])
        return w * (bernoulli(-delta) * u[i] - bernoulli(delta) * u[j])


def surface_lumped(n_nodes: int, facets: np.ndarray, measure: np.ndarray, coeff=1.0) -> np.ndarray:
    """Trapezoidal (vertex) lumping of ``int_F c v`` on facets: ``c |F| / n_vertices``."""
    facets = np.asarray(facets)
    nv = facets.shape[1]
    c = np.broadcast_to(np.asarray(coeff, dtype=float), (facets.shape[0],))
    w = c * measure / nv
    return np.bincount(facets.ravel(), weights=np.repeat(w, nv), minlength=n_nodes)


def robin_terms(mesh: Mesh, tag, u: np.ndarray, kappa: float, alpha: float, beta: float):
    """Lumped Robin contribution ``int (alpha u - beta)/kappa v`` on a tagged contact.

    Returns the residual vector and the diagonal of its derivative.
    """
    if kappa == 0:
        raise AssemblyError("kappa = 0 is a Dirichlet condition, not a Robin one")
    facets = mesh.facets_with_tag(tag)
    w = surface_lumped(mesh.n_nodes, facets, mesh.facet_measure(facets))
    return w * (alpha * u - beta) / kappa, w * alpha / kappa


def apply_dirichlet(matrix: sp.spmatrix, rhs: np.ndarray, dofs: np.ndarray,
                    values: np.ndarray, current: np.ndarray) -> tuple[sp.csr_matrix, np.ndarray]:
    """Replace rows by identity; the increment rhs is ``value - current``."""
    dofs = np.asarray(dofs, dtype=np.int64)
    n = matrix.shape[0]
    if dofs.size and (dofs.min() < 0 or dofs.max() >= n):
        raise AssemblyError("Dirichlet dof outside the system")
    A = sp.csr_matrix(matrix, copy=True)
    keep = np.ones(n)
    keep[dofs] = 0.0
    A = sp.diags(keep) @ A
    A = A + sp.csr_matrix((np.ones(dofs.size), (dofs, dofs)), shape=(n, n))
    b = np.array(rhs, dtype=float, copy=True)
    b[dofs] = np.broadcast_to(values, dofs.shape) - current[dofs]
    return A.tocsr(), b


# -- module-level operations -----------------------------------------------------

def _fold_block(A: sp.spmatrix, dofmap: DofMap | None, field: str | None) -> sp.csr_matrix:
    if dofmap is None:
        return sp.csr_matrix(A)
    Pf = dofmap.field_prolongation(field)
    return (Pf.T @ A @ Pf).tocsr()


def assemble_stiffness(mesh: Mesh, coeff, mask=None, dofmap: DofMap | None = None,
                       field: str = "e") -> sp.csr_matrix:
    """P1 stiffness ``int c grad u . grad v``; folded onto ``field`` when a dofmap is given."""
    return _fold_block(Assembler(mesh).stiffness(coeff, mask), dofmap, field)


def assemble_lumped_mass(mesh: Mesh, coeff=1.0, mask=None, dofmap: DofMap | None = None,
                         field: str = "e") -> sp.csr_matrix:
    """Vertex-lumped mass as a diagonal matrix."""
    return _fold_block(sp.diags(Assembler(mesh).lumped_mass(coeff, mask)), dofmap, field)


def assemble_drift_diffusion(mesh: Mesh, phi, D, mu, sign: float, mask=None,
                             dofmap: DofMap | None = None, field: str = "n") -> sp.csr_matrix:
    """Exponentially fitted matrix of ``-div(D grad u - sign mu u grad phi)``."""
    A = Assembler(mesh).drift_diffusion_matrix(np.asarray(phi, dtype=float), D, mu, sign, mask)
    return _fold_block(A, dofmap, field)


def assemble_robin(mesh: Mesh, tag, u, kappa: float, alpha: float,
                   beta: float) -> tuple[sp.csr_matrix, np.ndarray]:
    """Lumped Robin block ``(alpha/kappa) M_C`` and increment rhs ``-(alpha u - beta)/kappa M_C``."""
    r, d = robin_terms(mesh, tag, np.asarray(u, dtype=float), kappa, alpha, beta)
    return sp.diags(d).tocsr(), -r


@dataclass
class InterfaceBlocks:
    """Node-level interface contributions.

    ``residual[f]`` is the contribution to the rows of field ``f``;
    ``jacobian[(f, g)]`` the diagonal of the block coupling row ``f`` to
    unknown ``g``.
    """
    residual: dict
    jacobian: dict


def assemble_interface_blocks(W, k_diss_w, gamma_w, h: float, tau_diss: float, eta: float,
                              k_rec: float, e, P, n, p, w0: float = 0.0,
                              P_history=None) -> InterfaceBlocks:
    """Exciton/pair/carrier exchange terms on the interface.

    Parameters
    ----------
    W : node vector
        Lumped measure of the source region (facet trapezoid weights for a
        lumped interface, slab mass for a resolved one).
    k_diss_w, gamma_w : node vectors
        The same lumping applied to the dissociation rate and the
        bimolecular coefficient.
    h : float
        Source thickness (``2H`` for the lumped interface, 1 otherwise).
    w0, P_history
        BDF weight and history term of the pair equation.
    """
    W = np.asarray(W, dtype=float)
    conv = h / tau_diss
    dP = 0.0 if P_history is None else P_history
    rec = h * gamma_w * n * p
    res = {
        "e": W * (conv * e - eta * k_rec * P),
        "P": W * (-conv * e + (w0 + k_rec) * P + dP) + k_diss_w * P - rec,
        "n": -k_diss_w * P + rec,
        "p": -k_diss_w * P + rec,
    }
    jac = {
        ("e", "e"): W * conv,
        ("e", "P"): -eta * k_rec * W,
        ("P", "e"): -conv * W,
        ("P", "P"): W * (w0 + k_rec) + k_diss_w,
        ("P", "n"): -h * gamma_w * p,
        ("P", "p"): -h * gamma_w * n,
        ("n", "P"): -k_diss_w,
        ("n", "n"): h * gamma_w * p,
        ("n", "p"): h * gamma_w * n,
        ("p", "P"): -k_diss_w,
        ("p", "n"): h * gamma_w * p,
        ("p", "p"): h * gamma_w * n,
    }
    return InterfaceBlocks(res, jac)


def apply_periodic(matrix: sp.spmatrix, rhs: np.ndarray,
                   dofmap: DofMap) -> tuple[sp.csr_matrix, np.ndarray]:
    """Fold a node-level system onto the dof numbering (paired rows and columns summed)."""
    return dofmap.fold_matrix(matrix), dofmap.fold_vector(np.asarray(rhs, dtype=float))
