"""Labeled simplicial meshes of the device cross section.

Conventions: the anode (donor side) sits at the low end of the last
coordinate (``x = 0`` in 1D, ``y = 0`` in 2D) and the cathode at the high
end.  Interface normals point from the donor phase into the acceptor phase.
"""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass
from functools import cached_property
from typing import IO, Iterable

import numpy as np

REGIONS = ("donor", "acceptor", "slab_d", "slab_a")
DONOR, ACCEPTOR, SLAB_D, SLAB_A = range(4)
TAGS = ("cathode", "anode", "lat_l", "lat_r")
CATHODE, ANODE, LAT_L, LAT_R = range(4)

DONOR_SIDE = (DONOR, SLAB_D)
ACCEPTOR_SIDE = (ACCEPTOR, SLAB_A)


class MeshError(ValueError):
    pass


class RefinementRequired(MeshError):
    pass


class MeshParseError(MeshError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class NonConformalMesh(MeshError):
    pass


class EmptyInterface(MeshError):
    pass


class PeriodicMismatch(MeshError):
    pass


class Mesh:
    """Conformal P1 mesh with region labels and tagged boundary facets.

    Parameters
    ----------
    nodes : (N, d) array
        Node coordinates in meters.
    elements : (E, d+1) int array
        Segments (1D) or triangles (2D).  Triangles are reordered to be
        counterclockwise.
    element_region : (E,) int array
        Codes into :data:`REGIONS`.
    boundary_facets : (B, d) int array
        Boundary nodes (1D) or edges (2D).
    boundary_tags : (B,) int array
        Codes into :data:`TAGS`.
    """

    def __init__(self, nodes, elements, element_region, boundary_facets, boundary_tags,
                 validate: bool = True):
        nodes = np.asarray(nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        self.nodes = nodes
        self.dim = nodes.shape[1]
        self.elements = np.asarray(elements, dtype=np.int64).reshape(-1, self.dim + 1)
        self.element_region = np.asarray(element_region, dtype=np.int64)
        self.boundary_facets = np.asarray(boundary_facets, dtype=np.int64).reshape(-1, self.dim)
        self.boundary_tags = np.asarray(boundary_tags, dtype=np.int64)
        for arr in (self.nodes, self.elements, self.element_region,
                    self.boundary_facets, self.boundary_tags):
            arr.flags.writeable = False
        if validate:
            self._orient()
            self.validate()

    # -- basic geometry ------------------------------------------------------
    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @cached_property
    def element_measure(self) -> np.ndarray:
        return np.abs(self._signed_measure())

    def _signed_measure(self) -> np.ndarray:
        x = self.nodes[self.elements]
        if self.dim == 1:
            return x[:, 1, 0] - x[:, 0, 0]
        a = x[:, 1] - x[:, 0]
        b = x[:, 2] - x[:, 0]
        return 0.5 * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])

    @cached_property
    def barycentric_gradients(self) -> np.ndarray:
        """(E, d+1, d) gradients of the P1 hat functions on each element."""
        x = self.nodes[self.elements]
        if self.dim == 1:
            h = x[:, 1, 0] - x[:, 0, 0]
            g = np.empty((self.n_elements, 2, 1))
            g[:, 0, 0] = -1.0 / h
            g[:, 1, 0] = 1.0 / h
            return g
        x0, x1, x2 = x[:, 0], x[:, 1], x[:, 2]
        area2 = 2.0 * self._signed_measure()
        g = np.empty((self.n_elements, 3, 2))
        g[:, 0, 0] = (x1[:, 1] - x2[:, 1]) / area2
        g[:, 0, 1] = (x2[:, 0] - x1[:, 0]) / area2
        g[:, 1, 0] = (x2[:, 1] - x0[:, 1]) / area2
        g[:, 1, 1] = (x0[:, 0] - x2[:, 0]) / area2
        g[:, 2, 0] = (x0[:, 1] - x1[:, 1]) / area2
        g[:, 2, 1] = (x1[:, 0] - x0[:, 0]) / area2
        return g

    @cached_property
    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    @cached_property
    def scale(self) -> float:
        lo, hi = self.bbox
        return float(np.max(hi - lo))

    def facet_measure(self, facets: np.ndarray) -> np.ndarray:
        facets = np.asarray(facets).reshape(-1, self.dim)
        if self.dim == 1:
            return np.ones(facets.shape[0])
        d = self.nodes[facets[:, 1]] - self.nodes[facets[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    def facets_with_tag(self, tag: int | str) -> np.ndarray:
        code = TAGS.index(tag) if isinstance(tag, str) else tag
        return self.boundary_facets[self.boundary_tags == code]

    def nodes_with_tag(self, tag: int | str) -> np.ndarray:
        return np.unique(self.facets_with_tag(tag))

    def elements_in(self, regions: Iterable[int]) -> np.ndarray:
        return np.isin(self.element_region, list(regions))

    def nodes_of(self, regions: Iterable[int]) -> np.ndarray:
        """Sorted node indices of the closure of the given regions."""
        return np.unique(self.elements[self.elements_in(regions)])

    @property
    def has_slab(self) -> bool:
        return bool(np.isin(self.element_region, (SLAB_D, SLAB_A)).any())

    def region_measure(self, regions: Iterable[int]) -> float:
        return float(self.element_measure[self.elements_in(regions)].sum())

    # -- validation ------------------------------------------------------------
    def _orient(self) -> None:
        if self.dim != 2:
            return
        neg = self._signed_measure() < 0
        if neg.any():
            el = self.elements.copy()
            el[neg, 1], el[neg, 2] = self.elements[neg, 2], self.elements[neg, 1]
            el.flags.writeable = False
            self.elements = el

    def validate(self) -> None:
        n = self.n_nodes
        if self.elements.size and (self.elements.min() < 0 or self.elements.max() >= n):
            raise MeshError("element references a node out of range")
        if self.boundary_facets.size and (self.boundary_facets.min() < 0
                                          or self.boundary_facets.max() >= n):
            raise MeshError("boundary facet references a node out of range")
        if self.element_region.shape[0] != self.n_elements:
            raise MeshError("one region label per element required")
        if self.boundary_tags.shape[0] != self.boundary_facets.shape[0]:
            raise MeshError("one tag per boundary facet required")
        if np.any((self.element_region < 0) | (self.element_region >= len(REGIONS))):
            raise MeshError("unknown region label")
        if np.any((self.boundary_tags < 0) | (self.boundary_tags >= len(TAGS))):
            raise MeshError("unknown boundary tag")
        if np.any(self.element_measure <= 0):
            raise MeshError("degenerate element with zero measure")
        if not self.elements_in(DONOR_SIDE).any() or not self.elements_in(ACCEPTOR_SIDE).any():
            raise MeshError("donor and acceptor element sets must be nonempty")
        cath = {tuple(sorted(f)) for f in self.facets_with_tag(CATHODE)}
        anod = {tuple(sorted(f)) for f in self.facets_with_tag(ANODE)}
        if not cath or not anod:
            raise MeshError("cathode and anode facet sets must be nonempty")
        if cath & anod:
            raise MeshError("cathode and anode facets overlap")
        self._check_conformity()

    def _check_conformity(self) -> None:
        keys = np.sort(self.elements, axis=1)
        _, counts = np.unique(keys, axis=0, return_counts=True)
        if np.any(counts > 1):
            raise NonConformalMesh("duplicate element")
        if self.dim == 1:
            occurrences = np.bincount(self.elements.ravel(), minlength=self.n_nodes)
            if np.any(occurrences > 2):
                raise NonConformalMesh("node shared by more than two segments")
            if np.any(occurrences == 0):
                raise NonConformalMesh("orphan node")
            ends = np.flatnonzero(occurrences == 1)
            tagged = set(self.boundary_facets.ravel().tolist())
            if not set(ends.tolist()) <= tagged:
                raise NonConformalMesh("untagged open end")
            return
        directed = self.elements[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
        ukeys, inverse, counts = np.unique(np.sort(directed, axis=1), axis=0,
                                           return_inverse=True, return_counts=True)
        inverse = inverse.ravel()
        if np.any(counts > 2):
            raise NonConformalMesh("edge shared by more than two triangles")
        _, dcounts = np.unique(directed, axis=0, return_counts=True)
        if np.any(dcounts > 1):
            raise NonConformalMesh("inconsistent node ordering across a shared edge")
        open_edges = {tuple(e) for e in ukeys[counts == 1].tolist()}
        tagged = {tuple(sorted(f)) for f in self.boundary_facets.tolist()}
        if open_edges != tagged:
            raise NonConformalMesh("open edges do not match the tagged boundary "
                                   "(hanging node or untagged boundary)")

    # -- misc ------------------------------------------------------------------
    def with_regions(self, element_region) -> "Mesh":
        return Mesh(self.nodes, self.elements, element_region, self.boundary_facets,
                    self.boundary_tags)

    def swapped(self) -> "Mesh":
        """Mesh with donor and acceptor labels exchanged (normals flip)."""
        swap = np.array([ACCEPTOR, DONOR, SLAB_A, SLAB_D])
        return Mesh(self.nodes, self.elements, swap[self.element_region],
                    self.boundary_facets, self.boundary_tags, validate=False)


@dataclass(frozen=True)
class InterfaceSet:
    facets: np.ndarray           # (F, d) node indices
    measure: np.ndarray          # (F,)
    normal: np.ndarray           # (F, d) unit normals, donor -> acceptor
    donor_element: np.ndarray    # (F,)
    acceptor_element: np.ndarray  # (F,)
    interface_nodes: np.ndarray  # sorted unique node indices

    @property
    def n_facets(self) -> int:
        return self.facets.shape[0]

    @property
    def total_measure(self) -> float:
        return float(self.measure.sum())


@dataclass(frozen=True)
class PeriodicPairing:
    node_pairs: np.ndarray  # (K, 2): left node, right node

    @property
    def n_pairs(self) -> int:
        return self.node_pairs.shape[0]


# -- interface and periodicity -----------------------------------------------

def extract_interface(mesh: Mesh, donor_regions=(DONOR, SLAB_D),
                      acceptor_regions=(ACCEPTOR, SLAB_A)) -> InterfaceSet:
    """Facets shared by a donor-side element and an acceptor-side element."""
    side = np.full(mesh.n_elements, -1)
    side[mesh.elements_in(donor_regions)] = 0
    side[mesh.elements_in(acceptor_regions)] = 1
    d = mesh.dim
    if d == 1:
        local = np.array([[0], [1]])
    else:
        local = np.array([[0, 1], [1, 2], [2, 0]])
    nloc = local.shape[0]
    facets = mesh.elements[:, local].reshape(-1, d)
    owner = np.repeat(np.arange(mesh.n_elements), nloc)
    keys = np.sort(facets, axis=1)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    order = np.argsort(inverse, kind="stable")
    shared = counts[inverse[order]] == 2
    idx = order[shared].reshape(-1, 2)
    e0, e1 = owner[idx[:, 0]], owner[idx[:, 1]]
    s0, s1 = side[e0], side[e1]
    mixed = (s0 >= 0) & (s1 >= 0) & (s0 != s1)
    if not mixed.any():
        raise EmptyInterface("mesh has no donor-acceptor interface")
    idx, e0, e1, s0 = idx[mixed], e0[mixed], e1[mixed], s0[mixed]
    donor_el = np.where(s0 == 0, e0, e1)
    acc_el = np.where(s0 == 0, e1, e0)
    fac = facets[idx[:, 0]]
    centroid_d = mesh.nodes[mesh.elements[donor_el]].mean(axis=1)
    if d == 1:
        x = mesh.nodes[fac[:, 0]]
        normal = np.sign(x - centroid_d)
        measure = np.ones(fac.shape[0])
    else:
        a, b = mesh.nodes[fac[:, 0]], mesh.nodes[fac[:, 1]]
        t = b - a
        measure = np.hypot(t[:, 0], t[:, 1])
        normal = np.stack([t[:, 1], -t[:, 0]], axis=1) / measure[:, None]
        mid = 0.5 * (a + b)
        flip = np.einsum("ij,ij->i", normal, mid - centroid_d) < 0
        normal[flip] *= -1.0
    order = np.lexsort(np.sort(fac, axis=1).T[::-1])
    return InterfaceSet(
        facets=fac[order], measure=measure[order], normal=normal[order],
        donor_element=donor_el[order], acceptor_element=acc_el[order],
        interface_nodes=np.unique(fac),
    )


def interface_length(iface: InterfaceSet) -> float:
    total = iface.total_measure
    if not total > 0:
        raise EmptyInterface("interface has zero measure")
    return total


def pair_periodic(mesh: Mesh, rtol: float = 1e-12) -> PeriodicPairing:
    """Pair left and right lateral nodes at equal height."""
    if mesh.dim == 1:
        return PeriodicPairing(np.empty((0, 2), dtype=np.int64))
    left = mesh.nodes_with_tag(LAT_L)
    right = mesh.nodes_with_tag(LAT_R)
    if left.size == 0 and right.size == 0:
        return PeriodicPairing(np.empty((0, 2), dtype=np.int64))
    if left.size != right.size:
        raise PeriodicMismatch(f"{left.size} left vs {right.size} right lateral nodes")
    yl = mesh.nodes[left, 1]
    yr = mesh.nodes[right, 1]
    left = left[np.argsort(yl, kind="stable")]
    right = right[np.argsort(yr, kind="stable")]
    gap = np.abs(mesh.nodes[left, 1] - mesh.nodes[right, 1])
    if np.any(gap > rtol * mesh.scale):
        raise PeriodicMismatch("lateral node heights do not match")
    return PeriodicPairing(np.stack([left, right], axis=1))


# -- generators ----------------------------------------------------------------

def build_line_mesh(length: float, n_elements: int, interface_position: float,
                    slab_half_width: float | None = None, slab_elements: int = 4) -> Mesh:
    """1D device mesh, anode at ``x = 0``.

    Without a slab the mesh is uniform when ``interface_position`` is a
    multiple of ``length / n_elements``; otherwise each side is uniform.  With
    a slab half width ``H``, each half slab gets ``slab_elements`` uniform
    elements carved out of the ``n_elements`` budget.
    """
    if not 0 < interface_position < length:
        raise MeshError("interface must lie strictly inside the device")
    if n_elements < 2:
        raise MeshError("need at least 2 elements")
    xg = interface_position
    if slab_half_width is None:
        n_left = int(round(n_elements * xg / length))
        n_left = min(max(n_left, 1), n_elements - 1)
        x = np.concatenate([np.linspace(0.0, xg, n_left + 1),
                            np.linspace(xg, length, n_elements - n_left + 1)[1:]])
        region = np.where(np.arange(n_elements) < n_left, DONOR, ACCEPTOR)
    else:
        H = float(slab_half_width)
        if not (H > 0 and 0 < xg - H and xg + H < length):
            raise MeshError("slab must lie strictly inside the device")
        if slab_elements < 2:
            raise RefinementRequired("each half slab needs at least 2 elements")
        n_bulk = n_elements - 2 * slab_elements
        if n_bulk < 2:
            raise RefinementRequired(
                f"{n_elements} elements cannot resolve a slab with "
                f"{slab_elements} elements per half")
        left_len, right_len = xg - H, length - xg - H
        n_left = int(round(n_bulk * left_len / (left_len + right_len)))
        n_left = min(max(n_left, 1), n_bulk - 1)
        n_right = n_bulk - n_left
        parts = [np.linspace(0.0, xg - H, n_left + 1),
                 np.linspace(xg - H, xg, slab_elements + 1)[1:],
                 np.linspace(xg, xg + H, slab_elements + 1)[1:],
                 np.linspace(xg + H, length, n_right + 1)[1:]]
        x = np.concatenate(parts)
        region = np.concatenate([np.full(n_left, DONOR), np.full(slab_elements, SLAB_D),
                                 np.full(slab_elements, SLAB_A), np.full(n_right, ACCEPTOR)])
    nn = x.size
    elements = np.stack([np.arange(nn - 1), np.arange(1, nn)], axis=1)
    return Mesh(x, elements, region, [[0], [nn - 1]], [ANODE, CATHODE])


def _subdivide(breaks: np.ndarray, h: float) -> np.ndarray:
    pts = [breaks[:1]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        k = max(int(math.ceil((b - a) / h - 1e-9)), 1)
        pts.append(np.linspace(a, b, k + 1)[1:])
    return np.concatenate(pts)


def structured_mesh(xs: np.ndarray, ys: np.ndarray, cell_region: np.ndarray,
                    x_of=None) -> Mesh:
    """Triangulate a (possibly sheared) tensor grid.

    ``cell_region[j, i]`` labels the cell between ``xs[i:i+2]`` and
    ``ys[j:j+2]``.  ``x_of(j)`` may return the row-``j`` node abscissae
    to shear the grid; the shorter diagonal of each quad is used.
    """
    nx, ny = xs.size, ys.size
    X = np.empty((ny, nx))
    for j in range(ny):
        X[j] = xs if x_of is None else x_of(j)
    Y = np.repeat(ys[:, None], nx, axis=1)
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    diag_ac = np.linalg.norm(nodes[c] - nodes[a], axis=1)
    diag_bd = np.linalg.norm(nodes[d] - nodes[b], axis=1)
    use_ac = diag_ac <= diag_bd * (1 + 1e-12)
    t1 = np.where(use_ac[:, None], np.stack([a, b, c], 1), np.stack([a, b, d], 1))
    t2 = np.where(use_ac[:, None], np.stack([a, c, d], 1), np.stack([b, c, d], 1))
    reg = np.asarray(cell_region).ravel()
    elements = np.concatenate([t1, t2])
    region = np.concatenate([reg, reg])
    bottom = np.stack([idx[0, :-1], idx[0, 1:]], 1)
    top = np.stack([idx[-1, :-1], idx[-1, 1:]], 1)
    left = np.stack([idx[:-1, 0], idx[1:, 0]], 1)
    right = np.stack([idx[:-1, -1], idx[1:, -1]], 1)
    facets = np.concatenate([top, bottom, left, right])
    tags = np.concatenate([np.full(len(top), CATHODE), np.full(len(bottom), ANODE),
                           np.full(len(left), LAT_L), np.full(len(right), LAT_R)])
    return Mesh(nodes, elements, region, facets, tags)


@dataclass(frozen=True)
class RodGeometry:
    L_cell: float
    L_elec: float
    L_R: float
    W_R: float
    n_rods: int
    alpha_deg: float = 90.0

    @property
    def period(self) -> float:
        return self.L_elec / self.n_rods if self.n_rods else self.L_elec

    @property
    def gap(self) -> float:
        return self.period - self.W_R

    @property
    def lean(self) -> float:
        """Horizontal offset of the rod sides at the base (top gets minus)."""
        return 0.5 * self.L_R / math.tan(math.radians(self.alpha_deg))

    def analytic_interface_length(self) -> float:
        if self.n_rods == 0:
            return self.L_elec
        side = self.L_R / math.sin(math.radians(self.alpha_deg))
        return self.L_elec + 2 * self.n_rods * side

    def polyline(self) -> np.ndarray:
        """Vertices of the interface from the left to the right lateral side."""
        if self.n_rods == 0:
            y = 0.5 * self.L_cell
            return np.array([[0.0, y], [self.L_elec, y]])
        y0 = 0.5 * (self.L_cell - self.L_R)
        y1 = y0 + self.L_R
        d = self.lean
        pts = [(0.0, y0)]
        for i in range(self.n_rods):
            xl = i * self.period + 0.5 * self.gap
            xr = xl + self.W_R
            pts += [(xl + d, y0), (xl - d, y1), (xr - d, y1), (xr + d, y0)]
        pts.append((self.L_elec, y0))
        return np.array(pts)


def build_rod_mesh(L_cell: float, L_elec: float, L_R: float, W_R: float, n_rods: int,
                   alpha_deg: float = 90.0, target_h: float | None = None) -> Mesh:
    """Interpenetrating-rod morphology.

    ``n_rods`` donor rods of width ``W_R`` and height ``L_R`` rise from the
    donor base into the acceptor; they are evenly spaced with period
    ``L_elec / n_rods`` and half a gap at each lateral side.  ``alpha_deg``
    tilts every rod into a parallelogram whose sides make that angle with
    the base.  ``n_rods = 0`` gives a flat interface at mid height.
    """
    geom = RodGeometry(L_cell, L_elec, L_R, W_R, n_rods, alpha_deg)
    if n_rods < 0:
        raise MeshError("n_rods must be nonnegative")
    if n_rods == 0:
        h = target_h or L_cell / 32
        xs = _subdivide(np.array([0.0, L_elec]), h)
        ys = _subdivide(np.array([0.0, 0.5 * L_cell, L_cell]), h)
        yc = 0.5 * (ys[:-1] + ys[1:])
        region = np.where(yc[:, None] < 0.5 * L_cell, DONOR, ACCEPTOR)
        region = np.repeat(region, xs.size - 1, axis=1)
        return structured_mesh(xs, ys, region)
    if not (0 < L_R < L_cell and 0 < W_R and geom.gap > 0):
        raise MeshError("rods do not fit inside the domain")
    h = target_h or W_R / 4
    if W_R / h < 4 - 1e-9:
        raise RefinementRequired("target_h must resolve W_R by at least 4 elements")
    d = geom.lean
    if abs(d) >= 0.5 * geom.gap:
        raise MeshError("tilted rods cross the lateral boundary or each other "
                        "(self-intersecting interface)")
    y0 = 0.5 * (L_cell - L_R)
    y1 = y0 + L_R
    rod_edges = []
    for i in range(n_rods):
        xl = i * geom.period + 0.5 * geom.gap
        rod_edges += [xl, xl + W_R]
    breaks = np.array([0.0] + rod_edges + [L_elec])
    xs = _subdivide(breaks, h)
    ys = _subdivide(np.array([0.0, y0, y1, L_cell]), h)
    xc = 0.5 * (xs[:-1] + xs[1:])
    yc = 0.5 * (ys[:-1] + ys[1:])
    in_rod = np.zeros(xc.size, dtype=bool)
    for xl, xr in zip(rod_edges[::2], rod_edges[1::2]):
        in_rod |= (xc > xl) & (xc < xr)
    region = np.empty((yc.size, xc.size), dtype=np.int64)
    for j, y in enumerate(yc):
        if y < y0:
            region[j] = DONOR
        elif y > y1:
            region[j] = ACCEPTOR
        else:
            region[j] = np.where(in_rod, DONOR, ACCEPTOR)
    if d == 0:
        return structured_mesh(xs, ys, region)
    is_break = np.isin(xs, breaks)
    inner = np.zeros(xs.size, dtype=bool)
    inner[np.isin(xs, rod_edges)] = True

    def shift(y):
        if y <= y0:
            return d * y / y0
        if y >= y1:
            return -d * (L_cell - y) / (L_cell - y1)
        return d * (1.0 - 2.0 * (y - y0) / L_R)

    bidx = np.flatnonzero(is_break)

    def x_of(j):
        s = shift(ys[j])
        moved = xs[bidx] + np.where(inner[bidx], s, 0.0)
        return np.interp(xs, xs[bidx], moved)

    return structured_mesh(xs, ys, region, x_of=x_of)


def build_pixel_mesh(labels: np.ndarray, width: float, height: float) -> Mesh:
    """Mesh a pixel morphology; ``labels[j, i]`` is DONOR or ACCEPTOR, row 0 at the anode."""
    ny, nx = labels.shape
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    return structured_mesh(xs, ys, labels)


def complex_morphology_labels(n: int = 60, seed: int = 18, correlation: float = 2.0,
                              bias: float = 1.0) -> np.ndarray:
    """Random bicontinuous donor/acceptor pixel map, laterally periodic.

    Every donor cluster touches the anode row and every acceptor cluster
    touches the cathode row, so no phase island is electrically isolated.
    """
    from scipy import ndimage

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((n, n))
    smooth = ndimage.gaussian_filter(noise, correlation, mode=("nearest", "wrap"))
    smooth /= smooth.std()
    y = (np.arange(n) + 0.5) / n - 0.5
    field_ = smooth + bias * 2.0 * y[:, None]
    labels = np.where(field_ < 0.0, DONOR, ACCEPTOR)
    labels[0] = DONOR
    labels[-1] = ACCEPTOR
    for _ in range(20):
        changed = False
        for phase, row, other in ((DONOR, 0, ACCEPTOR), (ACCEPTOR, n - 1, DONOR)):
            lab, _ = ndimage.label(labels == phase)
            lab = _merge_wrapped(lab)
            keep = set(np.unique(lab[row])) - {0}
            orphan = (lab > 0) & ~np.isin(lab, list(keep))
            if orphan.any():
                labels[orphan] = other
                changed = True
        if not changed:
            break
    return labels


def _merge_wrapped(lab: np.ndarray) -> np.ndarray:
    """Identify cluster ids connected across the periodic lateral boundary."""
    lab = lab.copy()
    for a, b in zip(lab[:, 0], lab[:, -1]):
        if a and b and a != b:
            lab[lab == b] = a
    return lab


def build_complex_mesh(size: float = 150e-9, n: int = 60, seed: int = 18,
                       correlation: float = 2.0, bias: float = 1.0) -> Mesh:
    return build_pixel_mesh(complex_morphology_labels(n, seed, correlation, bias), size, size)


# -- text format ----------------------------------------------------------------

def write_mesh(mesh: Mesh, stream: IO[str] | None = None) -> str | None:
    """Serialize to the ``oscmesh`` text format; returns a string if no stream."""
    out = stream if stream is not None else io.StringIO()
    out.write(f"oscmesh {mesh.dim} {mesh.n_nodes} {mesh.n_elements} "
              f"{mesh.boundary_facets.shape[0]}\n")
    for x in mesh.nodes:
        out.write(" ".join(repr(float(v)) for v in x) + "\n")
    for el, r in zip(mesh.elements, mesh.element_region):
        out.write(" ".join(str(int(i)) for i in el) + f" {REGIONS[r]}\n")
    for f, t in zip(mesh.boundary_facets, mesh.boundary_tags):
        out.write(" ".join(str(int(i)) for i in f) + f" {TAGS[t]}\n")
    if stream is None:
        return out.getvalue()
    return None


def load_mesh(source) -> Mesh:
    """Parse the ``oscmesh`` text format.

    ``source`` may be mesh text (str or bytes), a path-like object or an
    open binary/text stream.
    """
    if isinstance(source, os.PathLike):
        with open(source, "rb") as fh:
            source = fh.read()
    if isinstance(source, (bytes, bytearray)):
        text = source.decode("utf-8")
    elif isinstance(source, str):
        text = source
    else:
        data = source.read()
        text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(text.splitlines())]
    lines = [(i, ln) for i, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise MeshParseError("empty mesh file", 1)
    lineno, head = lines[0]
    parts = head.split()
    if len(parts) != 5 or parts[0] != "oscmesh":
        raise MeshParseError("expected header 'oscmesh <dim> <nodes> <elements> <facets>'", lineno)
    try:
        dim, nn, ne, nb = (int(v) for v in parts[1:])
    except ValueError:
        raise MeshParseError("non-integer header field", lineno) from None
    if dim not in (1, 2):
        raise MeshParseError(f"unsupported dimension {dim}", lineno)
    body = lines[1:]
    if len(body) != nn + ne + nb:
        last = body[-1][0] if body else lineno
        raise MeshParseError(f"expected {nn + ne + nb} records, found {len(body)}", last)
    nodes = np.empty((nn, dim))
    for k in range(nn):
        i, ln = body[k]
        vals = ln.split()
        if len(vals) != dim:
            raise MeshParseError(f"node line needs {dim} coordinates", i)
        try:
            nodes[k] = [float(v) for v in vals]
        except ValueError:
            raise MeshParseError("bad coordinate", i) from None
    elements = np.empty((ne, dim + 1), dtype=np.int64)
    regions = np.empty(ne, dtype=np.int64)
    for k in range(ne):
        i, ln = body[nn + k]
        vals = ln.split()
        if len(vals) != dim + 2:
            raise MeshParseError(f"element line needs {dim + 1} indices and a region", i)
        if vals[-1] not in REGIONS:
            raise MeshParseError(f"unknown region label {vals[-1]!r}", i)
        try:
            elements[k] = [int(v) for v in vals[:-1]]
        except ValueError:
            raise MeshParseError("bad node index", i) from None
        if elements[k].min() < 0 or elements[k].max() >= nn:
            raise MeshParseError("node index out of range", i)
        regions[k] = REGIONS.index(vals[-1])
    facets = np.empty((nb, dim), dtype=np.int64)
    tags = np.empty(nb, dtype=np.int64)
    for k in range(nb):
        i, ln = body[nn + ne + k]
        vals = ln.split()
        if len(vals) != dim + 1:
            raise MeshParseError(f"boundary line needs {dim} indices and a tag", i)
        if vals[-1] not in TAGS:
            raise MeshParseError(f"unknown boundary tag {vals[-1]!r}", i)
        try:
            facets[k] = [int(v) for v in vals[:-1]]
        except ValueError:
            raise MeshParseError("bad node index", i) from None
        if facets[k].min() < 0 or facets[k].max() >= nn:
            raise MeshParseError("node index out of range", i)
        tags[k] = TAGS.index(vals[-1])
    return Mesh(nodes, elements, regions, facets, tags)


load_triangle_mesh = load_mesh
