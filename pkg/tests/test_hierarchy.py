import numpy as np
import pytest
from helpers import bipyramid, flat_grid, icosphere

from dismesh.hierarchy import (
    MeshHierarchy,
    build_hierarchy,
    closest_point_on_triangles,
    qem_decimate,
)
from dismesh.mesh import unique_edges


def test_ratios_must_be_nonempty():
    with pytest.raises(ValueError, match="non-empty"):
        build_hierarchy(bipyramid(), [])


def test_ratio_out_of_range_rejected():
    with pytest.raises(ValueError, match="outside"):
        build_hierarchy(bipyramid(), [1.0])


def test_minimum_vertex_floor_enforced():
    with pytest.raises(ValueError, match="minimum"):
        build_hierarchy(bipyramid(), [0.5])  # ceil(10 * 0.5) = 5 < 8


def test_noop_decimation_identity_operators():
    mesh = bipyramid(8)  # 10 vertices
    h = build_hierarchy(mesh, [0.999])  # ceil(10 * 0.999) = 10
    assert h.level_sizes == (10, 10)
    level = h.levels[0]
    assert np.array_equal(level.downsample.to_dense(), np.eye(10))
    assert np.array_equal(level.upsample.to_dense(), np.eye(10))


def test_flat_grid_zero_quadrics_still_terminate():
    mesh = flat_grid(4)  # 16 coplanar vertices
    h = build_hierarchy(mesh, [0.5])
    assert h.level_sizes == (16, 8)
    up = h.levels[0].upsample
    dense = up.to_dense()
    assert np.all(dense >= -1e-12)
    assert np.allclose(dense.sum(axis=1), 1.0, atol=1e-9)


def test_icosphere_reconstruction_error_below_mean_edge_length():
    mesh = icosphere()
    assert mesh.n_vertices == 42
    h = build_hierarchy(mesh, [0.5])
    assert h.level_sizes == (42, 21)
    level = h.levels[0]
    coarse = level.downsample @ mesh.vertices
    reconstructed = level.upsample @ coarse
    errors = np.linalg.norm(reconstructed - mesh.vertices, axis=1)
    edges = unique_edges(mesh.faces)
    edge_lengths = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    assert errors.mean() < edge_lengths.mean()


def test_downsample_rows_single_one():
    h = build_hierarchy(icosphere(), [0.5])
    down = h.levels[0].downsample.to_dense()
    assert np.array_equal(np.sort(np.unique(down)), [0.0, 1.0])
    assert np.array_equal(down.sum(axis=1), np.ones(down.shape[0]))


def test_upsample_rows_convex_with_at_most_three_entries():
    h = build_hierarchy(icosphere(), [0.5])
    up = h.levels[0].upsample
    counts = np.bincount(up.rows, minlength=up.shape[0])
    assert counts.min() >= 1
    assert counts.max() <= 3
    assert np.all(up.vals > 0.0)
    sums = np.zeros(up.shape[0])
    np.add.at(sums, up.rows, up.vals)
    assert np.allclose(sums, 1.0, atol=1e-9)


def test_level_sizes_strictly_decreasing_with_real_ratios():
    h = build_hierarchy(icosphere(), [0.6, 0.6])
    sizes = h.level_sizes
    assert sizes[0] > sizes[1] > sizes[2]


def test_per_level_laplacians_stay_bounded():
    h = build_hierarchy(icosphere(), [0.5])
    for level in h.levels:
        dense = level.scaled_laplacian.to_dense()
        assert np.max(np.abs(dense - dense.T)) == 0.0
        eigenvalues = np.linalg.eigvalsh(dense)
        assert eigenvalues.min() >= -1.0 - 1e-6
        assert eigenvalues.max() <= 1.0 + 1e-6


def test_hierarchy_deterministic_fingerprint():
    a = build_hierarchy(icosphere(), [0.5, 0.7])
    b = build_hierarchy(icosphere(), [0.5, 0.7])
    assert a.fingerprint() == b.fingerprint()
    c = build_hierarchy(icosphere(), [0.5, 0.8])
    assert a.fingerprint() != c.fingerprint()


def test_hierarchy_serialization_round_trip(tmp_path):
    h = build_hierarchy(icosphere(), [0.5, 0.7])
    h.save(tmp_path / "hier")
    loaded = MeshHierarchy.load(tmp_path / "hier")
    assert loaded.fingerprint() == h.fingerprint()
    assert loaded.level_sizes == h.level_sizes
    assert loaded.ratios == h.ratios
    for a, b in zip(loaded.levels, h.levels):
        assert a.scaled_laplacian == b.scaled_laplacian
        assert (a.downsample is None) == (b.downsample is None)


def test_qem_collapse_prefers_lowest_error_edge():
    # Pyramid over a square with one very short, nearly flat edge pair:
    # decimation should remove a vertex participating in the cheapest edge.
    mesh = bipyramid(8)
    survivors, faces = qem_decimate(mesh.vertices, mesh.faces, 9)
    assert survivors.size == 9
    assert faces.min() >= 0
    assert faces.max() < 9


def test_closest_point_barycentric_regions():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[1.0, 0.0, 0.0]])
    c = np.array([[0.0, 1.0, 0.0]])
    # interior point
    bary, dist2 = closest_point_on_triangles(np.array([0.25, 0.25, 1.0]), a, b, c)
    assert np.allclose(bary, [[0.5, 0.25, 0.25]])
    assert np.isclose(dist2[0], 1.0)
    # beyond vertex A
    bary, dist2 = closest_point_on_triangles(np.array([-1.0, -1.0, 0.0]), a, b, c)
    assert np.allclose(bary, [[1.0, 0.0, 0.0]])
    # closest to edge AB
    bary, dist2 = closest_point_on_triangles(np.array([0.5, -1.0, 0.0]), a, b, c)
    assert np.allclose(bary, [[0.5, 0.5, 0.0]])
    assert np.isclose(dist2[0], 1.0)
