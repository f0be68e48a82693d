"""Mesh generation, validation and serialization tests."""

import numpy as np
import pytest

from masonry_ham import mesh as MS
from masonry_ham.errors import MeshError


@pytest.fixture(scope="module")
def puc():
    return MS.generate_puc(MS.PucSpec(target=0.012))


@pytest.fixture(scope="module")
def wall():
    return MS.generate_wall_sample()


def test_areas_sum_to_layout_area(puc):
    spec = MS.PucSpec()
    assert puc.total_area() == pytest.approx(spec.width * spec.height, rel=1e-10)
    areas = MS.tri_areas(puc.nodes, puc.triangles)
    assert np.all(areas > 0)


def test_phase_fractions_match_layout(puc):
    spec = MS.PucSpec()
    mortar_ref = spec.width * spec.height - 2 * spec.brick_w * spec.brick_h
    assert puc.phase_area(MS.MORTAR_PHASE) == pytest.approx(mortar_ref, rel=0.01)
    assert puc.phase_area(MS.BRICK_PHASE) == pytest.approx(
        2 * spec.brick_w * spec.brick_h, rel=0.01)


def test_single_phase_has_no_interfaces():
    m = MS.generate_layered([(0, 0.1)], height=0.05, target=0.01)
    assert len(m.interfaces) == 0
    assert len(MS.validate(m)) == 0


def test_wall_default_counts_near_reference(wall):
    # order-of-magnitude band around the reference block discretization
    assert 450 <= wall.n_triangles <= 950
    assert 35 <= len(wall.interfaces) <= 85


def test_refinement_quadruples_triangles():
    r1 = MS.generate_layered([(0, 0.1)], 0.05, 0.01)
    r2 = MS.generate_layered([(0, 0.1)], 0.05, 0.005)
    assert r2.n_triangles / r1.n_triangles == pytest.approx(4.0, abs=1e-12)
    m1 = MS.generate_puc(MS.PucSpec(target=0.008))
    m2 = MS.generate_puc(MS.PucSpec(target=0.004))
    assert 3.2 <= m2.n_triangles / m1.n_triangles <= 4.8


def test_interface_sides_coincide(puc):
    for a1, a2, b1, b2 in puc.interfaces:
        assert np.allclose(puc.nodes[a1], puc.nodes[b1], atol=1e-14)
        assert np.allclose(puc.nodes[a2], puc.nodes[b2], atol=1e-14)
        assert a1 != b1 and a2 != b2


def test_interface_sides_have_distinct_phases(puc):
    # side a edges belong to brick triangles, side b to mortar (a = lower id)
    edge_phase = {}
    for t, tri in enumerate(puc.triangles):
        for u, v in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edge_phase[frozenset((int(u), int(v)))] = int(puc.tri_phase[t])
    for a1, a2, b1, b2 in puc.interfaces:
        pa = edge_phase[frozenset((int(a1), int(a2)))]
        pb = edge_phase[frozenset((int(b1), int(b2)))]
        assert pa == MS.BRICK_PHASE and pb == MS.MORTAR_PHASE


def test_every_material_line_covered(puc):
    # total interface length equals the brick-mortar contact perimeter
    spec = MS.PucSpec()
    L = 0.0
    for a1, a2, _, _ in puc.interfaces:
        L += float(np.hypot(*(puc.nodes[a2] - puc.nodes[a1])))
    ref = 2 * (2 * spec.brick_w + 2 * spec.brick_h)  # two bricks in the cell
    assert L == pytest.approx(ref, rel=1e-9)


def test_periodic_pairs_offset_by_one_period(puc):
    x0, x1, y0, y1 = puc.bbox
    period = (x1 - x0, y1 - y0)
    assert len(puc.periodic_pairs) > 0
    for m, s, ax in puc.periodic_pairs:
        d = puc.nodes[s] - puc.nodes[m]
        assert abs(d[ax] - period[ax]) < 1e-10
        assert abs(d[1 - ax]) < 1e-10


def test_periodic_pairs_cover_non_corner_boundary(puc):
    corners = set(puc.corner_nodes().tolist())
    paired = set(puc.periodic_pairs[:, 0].tolist()) | set(puc.periodic_pairs[:, 1].tolist())
    bnodes = set(np.unique(puc.boundary_edges).tolist())
    assert paired | corners == bnodes
    assert not paired & corners


def test_validate_clean_meshes(puc, wall):
    assert MS.validate(puc) == []
    assert MS.validate(wall) == []


def test_validate_detects_inverted_triangle(wall):
    bad = MS.Mesh(nodes=wall.nodes, triangles=wall.triangles.copy(),
                  tri_phase=wall.tri_phase, phase_names=wall.phase_names,
                  interfaces=wall.interfaces, interface_id=wall.interface_id,
                  boundary_edges=wall.boundary_edges,
                  boundary_marker=wall.boundary_marker,
                  periodic_pairs=wall.periodic_pairs)
    bad.triangles.setflags(write=True)
    bad.triangles[0] = bad.triangles[0][::-1]
    msgs = MS.validate(bad)
    assert any("non-positive area" in m for m in msgs)


def test_validate_detects_broken_periodic_pair(puc):
    bad = MS.Mesh(nodes=puc.nodes.copy(), triangles=puc.triangles,
                  tri_phase=puc.tri_phase, phase_names=puc.phase_names,
                  interfaces=puc.interfaces, interface_id=puc.interface_id,
                  boundary_edges=puc.boundary_edges,
                  boundary_marker=puc.boundary_marker,
                  periodic_pairs=puc.periodic_pairs)
    bad.nodes.setflags(write=True)
    s = int(puc.periodic_pairs[0, 1])
    bad.nodes[s, 1] += 1e-6
    msgs = MS.validate(bad)
    assert any("periodic pair" in m for m in msgs)


def test_degenerate_spec_rejected():
    with pytest.raises(MeshError, match="head_t"):
        MS.PucSpec(head_t=0.5)
    with pytest.raises(MeshError, match="brick_w"):
        MS.WallSpec(brick_w=-1.0)
    with pytest.raises(MeshError, match="target"):
        MS.PucSpec(target=0.0)


def test_boundary_markers(wall):
    x0, x1, y0, y1 = wall.bbox
    left = wall.boundary_nodes("left")
    right = wall.boundary_nodes("right")
    assert np.allclose(wall.nodes[left, 0], x0)
    assert np.allclose(wall.nodes[right, 0], x1)
    assert len(left) > 1 and len(right) > 1


def test_text_round_trip_bit_exact(tmp_path, puc):
    p = tmp_path / "m.txt"
    MS.save_text(puc, p)
    back = MS.load_text(p)
    assert np.array_equal(back.nodes, puc.nodes)
    assert np.array_equal(back.triangles, puc.triangles)
    assert np.array_equal(back.tri_phase, puc.tri_phase)
    assert np.array_equal(back.interfaces, puc.interfaces)
    assert np.array_equal(back.boundary_edges, puc.boundary_edges)
    assert np.array_equal(back.periodic_pairs, puc.periodic_pairs)
    assert back.phase_names == puc.phase_names
    # a second save is byte-identical
    p2 = tmp_path / "m2.txt"
    MS.save_text(back, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_json_round_trip(tmp_path, puc):
    p = tmp_path / "m.json"
    MS.save_json(puc, p)
    back = MS.load_json(p)
    assert np.array_equal(back.nodes, puc.nodes)
    assert np.array_equal(back.interfaces, puc.interfaces)


def test_rotate90_valid(puc):
    rot = MS.rotate90(puc)
    assert MS.validate(rot) == []
    x0, x1, y0, y1 = puc.bbox
    rx0, rx1, ry0, ry1 = rot.bbox
    assert (rx1 - rx0) == pytest.approx(y1 - y0, rel=1e-12)
    assert (ry1 - ry0) == pytest.approx(x1 - x0, rel=1e-12)
    areas = MS.tri_areas(rot.nodes, rot.triangles)
    assert np.all(areas > 0)


def test_interface_polylines_connected(puc):
    # segments sharing an id form a connected chain of coincident endpoints
    for iid in set(puc.interface_id.tolist()):
        segs = puc.interfaces[puc.interface_id == iid]
        pts = {}
        for a1, a2, _, _ in segs:
            for n in (a1, a2):
                key = tuple(np.round(puc.nodes[n], 12))
                pts.setdefault(key, 0)
                pts[key] += 1
        # a chain has at most 2 odd-degree endpoints unless it is a loop or
        # junction; require at least that every segment touches another
        if len(segs) > 1:
            assert max(pts.values()) >= 2
