import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oscsim.mesh import (ACCEPTOR, ANODE, CATHODE, DONOR, LAT_L, LAT_R, SLAB_A, SLAB_D,
                         EmptyInterface, Mesh, MeshError, MeshParseError, NonConformalMesh,
                         PeriodicMismatch, RefinementRequired, RodGeometry, build_complex_mesh,
                         build_line_mesh, build_rod_mesh, extract_interface, interface_length,
                         load_mesh, load_triangle_mesh, pair_periodic, structured_mesh,
                         write_mesh)

SQUARE = """oscmesh 2 4 2 4
0 0
1 0
1 1
0 1
0 1 2 donor
0 2 3 acceptor
0 1 anode
2 3 cathode
1 2 lat_r
3 0 lat_l
"""


class TestLineMesh:
    def test_uniform(self):
        m = build_line_mesh(100e-9, 100, 50e-9)
        assert m.n_nodes == 101
        assert m.nodes[50, 0] == 50e-9
        assert np.sum(m.element_region == DONOR) == 50
        assert np.sum(m.element_region == ACCEPTOR) == 50

    def test_slab_nodes_exact(self):
        m = build_line_mesh(100e-9, 100, 50e-9, 0.25e-9)
        x = m.nodes[:, 0]
        for target in (50e-9 - 0.25e-9, 50e-9, 50e-9 + 0.25e-9):
            assert np.min(np.abs(x - target)) < 1e-24
        assert m.has_slab

    def test_minimal(self):
        m = build_line_mesh(100e-9, 2, 50e-9)
        assert m.n_elements == 2
        assert m.nodes[1, 0] == 50e-9

    @pytest.mark.parametrize("H", [0.125e-9, 0.25e-9, 1e-9, 2e-9])
    def test_slab_measure(self, H):
        m = build_line_mesh(100e-9, 200, 50e-9, H, slab_elements=8)
        assert abs(m.region_measure((SLAB_D, SLAB_A)) - 2 * H) < 1e-12 * 2 * H

    def test_slab_too_coarse(self):
        with pytest.raises(RefinementRequired):
            build_line_mesh(100e-9, 10, 50e-9, 1e-9, slab_elements=8)
        with pytest.raises(RefinementRequired):
            build_line_mesh(100e-9, 100, 50e-9, 1e-9, slab_elements=1)

    def test_bad_interface(self):
        with pytest.raises(MeshError):
            build_line_mesh(100e-9, 10, 100e-9)

    def test_contacts(self):
        m = build_line_mesh(100e-9, 10, 50e-9)
        assert m.nodes[m.nodes_with_tag(ANODE)[0], 0] == 0.0
        assert m.nodes[m.nodes_with_tag(CATHODE)[0], 0] == 100e-9

    def test_interface_point(self):
        m = build_line_mesh(100e-9, 2, 50e-9)
        f = extract_interface(m)
        assert f.n_facets == 1
        assert f.normal[0, 0] == 1.0
        assert list(f.interface_nodes) == [1]


class TestLoad:
    def test_square(self):
        m = load_triangle_mesh(io.BytesIO(SQUARE.encode()))
        assert m.n_nodes == 4 and m.n_elements == 2
        f = extract_interface(m)
        assert f.n_facets == 1
        assert math.isclose(interface_length(f), math.sqrt(2))
        # donor triangle is below the diagonal: normal points up-left
        assert np.allclose(f.normal[0], [-1 / math.sqrt(2), 1 / math.sqrt(2)])

    def test_duplicate_element(self):
        text = SQUARE.replace("oscmesh 2 4 2 4", "oscmesh 2 4 3 4").replace(
            "0 2 3 acceptor\n", "0 2 3 acceptor\n0 2 3 acceptor\n")
        with pytest.raises(NonConformalMesh):
            load_mesh(text)

    def test_parse_error_line_number(self):
        bad = SQUARE.replace("1 1\n", "1 x\n")
        with pytest.raises(MeshParseError) as exc:
            load_mesh(bad)
        assert exc.value.line == 4

    def test_unknown_region(self):
        with pytest.raises(MeshParseError) as exc:
            load_mesh(SQUARE.replace("0 2 3 acceptor", "0 2 3 metal"))
        assert exc.value.line == 7

    def test_roundtrip(self, small_rod_mesh):
        text = write_mesh(small_rod_mesh)
        m = load_mesh(text)
        assert np.array_equal(m.nodes, small_rod_mesh.nodes)
        assert np.array_equal(m.elements, small_rod_mesh.elements)
        assert np.array_equal(m.boundary_tags, small_rod_mesh.boundary_tags)

    def test_path_input(self, tmp_path):
        p = tmp_path / "sq.oscmesh"
        p.write_text(SQUARE)
        assert load_mesh(p).n_elements == 2

    def test_all_donor_has_no_interface(self):
        nodes = [[0, 0], [1, 0], [1, 1], [0, 1]]
        with pytest.raises(MeshError):
            Mesh(nodes, [[0, 1, 2], [0, 2, 3]], [DONOR, DONOR], [[0, 1], [2, 3]], [ANODE, CATHODE])
        mesh = Mesh(nodes, [[0, 1, 2], [0, 2, 3]], [DONOR, DONOR], [[0, 1], [2, 3]],
                    [ANODE, CATHODE], validate=False)
        with pytest.raises(EmptyInterface):
            extract_interface(mesh)


class TestRodMesh:
    def test_jv_length(self, rod_mesh):
        g = RodGeometry(150e-9, 50e-9, 79e-9, 6.25e-9, 4)
        analytic = 50e-9 + 2 * 4 * 79e-9
        assert math.isclose(g.analytic_interface_length(), analytic, rel_tol=1e-12)
        L = interface_length(extract_interface(rod_mesh))
        assert abs(L - analytic) / analytic < 0.01

    def test_axis_aligned_normals(self, rod_mesh):
        nu = extract_interface(rod_mesh).normal
        assert np.all(np.isclose(np.abs(nu[:, 0]), 0, atol=1e-9)
                      | np.isclose(np.abs(nu[:, 0]), 1, atol=1e-9))
        assert np.allclose(np.linalg.norm(nu, axis=1), 1.0, atol=1e-12)

    def test_normals_point_into_acceptor(self, rod_mesh):
        f = extract_interface(rod_mesh)
        c = rod_mesh.nodes[rod_mesh.elements].mean(axis=1)
        d = c[f.acceptor_element] - c[f.donor_element]
        assert np.all(np.einsum("ij,ij->i", d, f.normal) > 0)

    def test_swap_flips_normals(self, small_rod_mesh):
        a = extract_interface(small_rod_mesh)
        b = extract_interface(small_rod_mesh.swapped())
        assert np.array_equal(a.facets, b.facets)
        assert np.array_equal(a.normal, -b.normal)

    def test_angle_study_geometry(self):
        m = build_rod_mesh(150e-9, 150e-9, 75e-9, 37.5e-9, 2, target_h=3.125e-9)
        L = interface_length(extract_interface(m))
        assert math.isclose(L, 150e-9 + 4 * 75e-9, rel_tol=1e-9)

    def test_biplanar(self):
        m = build_rod_mesh(150e-9, 150e-9, 75e-9, 150e-9, 0, target_h=5e-9)
        assert math.isclose(interface_length(extract_interface(m)), 150e-9, rel_tol=1e-12)

    def test_tilted_length(self):
        alpha = 77 + 11 / 60
        g = RodGeometry(150e-9, 150e-9, 75e-9, 18.75e-9, 4, alpha)
        m = build_rod_mesh(150e-9, 150e-9, 75e-9, 18.75e-9, 4, alpha_deg=alpha,
                           target_h=3.125e-9)
        L = interface_length(extract_interface(m))
        assert math.isclose(L, g.analytic_interface_length(), rel_tol=1e-9)

    def test_self_intersecting(self):
        with pytest.raises(MeshError):
            build_rod_mesh(150e-9, 150e-9, 75e-9, 18.75e-9, 4, alpha_deg=60, target_h=3.125e-9)

    def test_refinement_required(self):
        with pytest.raises(RefinementRequired):
            build_rod_mesh(150e-9, 50e-9, 79e-9, 6.25e-9, 4, target_h=3e-9)

    def test_total_area(self, rod_mesh):
        assert abs(rod_mesh.element_measure.sum() - 150e-9 * 50e-9) < 1e-10 * 150e-9 * 50e-9


class TestPeriodic:
    def test_structured(self):
        xs = np.linspace(0, 1, 5)
        ys = np.linspace(0, 2, 9)
        region = np.where(np.arange(8)[:, None] < 4, DONOR, ACCEPTOR) * np.ones((8, 4), int)
        m = structured_mesh(xs, ys, region)
        pp = pair_periodic(m)
        assert pp.n_pairs == 9
        assert np.allclose(m.nodes[pp.node_pairs[:, 0], 1], m.nodes[pp.node_pairs[:, 1], 1])

    def test_1d_empty(self, line_mesh):
        assert pair_periodic(line_mesh).n_pairs == 0

    def test_mismatch(self):
        nodes = [[0, 0], [1, 0], [1, 1], [0, 1], [1, 0.5]]
        els = [[0, 1, 4], [0, 4, 2], [0, 2, 3]]
        m = Mesh(nodes, els, [DONOR, DONOR, ACCEPTOR],
                 [[0, 1], [2, 3], [1, 4], [4, 2], [3, 0]],
                 [ANODE, CATHODE, LAT_R, LAT_R, LAT_L])
        with pytest.raises(PeriodicMismatch):
            pair_periodic(m)


def test_complex_morphology_interface_length():
    m = build_complex_mesh()
    L = interface_length(extract_interface(m))
    assert 850e-9 < L < 950e-9


@settings(max_examples=25, deadline=None)
@given(n=st.integers(4, 60), frac=st.floats(0.1, 0.9), H=st.floats(0.05, 3.0))
def test_line_mesh_properties(n, frac, H):
    length = 100e-9
    xg = round(frac * n) / n * length
    if not 0 < xg < length:
        return
    Hm = H * 1e-9
    try:
        m = build_line_mesh(length, n + 8, xg, Hm, slab_elements=4)
    except MeshError:
        return
    assert abs(m.element_measure.sum() - length) < 1e-10 * length
    assert abs(m.region_measure((SLAB_D, SLAB_A)) - 2 * Hm) < 1e-12 * 2 * Hm + 1e-30
    assert np.all(np.diff(m.nodes[:, 0]) > 0)
