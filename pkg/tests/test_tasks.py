import numpy as np
import pytest
from helpers import bipyramid

from dismesh.hierarchy import build_hierarchy
from dismesh.mesh import TriangleMesh
from dismesh.model import MeshVAE, ModelConfig
from dismesh.tasks import (
    AlignmentPath,
    GenerationMetrics,
    dtw_align,
    match,
    sample_prior,
    synchronize,
    transfer,
)


def enumerate_monotone_paths(m, n):
    """All paths (0,0) -> (m-1,n-1) with steps {(1,0),(0,1),(1,1)}."""
    paths = []

    def extend(path):
        i, j = path[-1]
        if (i, j) == (m - 1, n - 1):
            paths.append(tuple(path))
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            ni, nj = i + di, j + dj
            if ni < m and nj < n:
                path.append((ni, nj))
                extend(path)
                path.pop()

    extend([(0, 0)])
    return paths


def brute_force_min_cost(d):
    return min(sum(d[i, j] for i, j in path) for path in enumerate_monotone_paths(*d.shape))


@pytest.fixture(scope="module")
def task_model():
    mesh = bipyramid(14)
    hierarchy = build_hierarchy(mesh, [0.5])
    config = ModelConfig(
        ratios=(0.5,), channels=(3, 4), cheb_order=(2,), hidden=8, d_shape=3, d_pose=3
    )
    model = MeshVAE(config, hierarchy, dtype=np.float64)
    model.initialize(21)
    # the posterior head initializes to zero (constant codes); give it scale
    # so encodings actually discriminate inputs in these tests
    rng = np.random.default_rng(99)
    model.params["enc_out_w"].values[...] = 0.3 * rng.normal(size=model.params["enc_out_w"].shape)
    model.set_template_faces(mesh.faces)
    template = mesh
    return model, template


def random_mesh(template, rng):
    return TriangleMesh(template.vertices + 0.05 * rng.normal(size=template.vertices.shape), template.faces)


# ---------------------------------------------------------------------------
# DTW
# ---------------------------------------------------------------------------


def test_dtw_single_cell():
    path = dtw_align(np.array([[2.5]]))
    assert path.pairs == ((0, 0),)
    assert path.cost == 2.5


def test_dtw_identical_sequences_diagonal():
    n = 6
    d = np.ones((n, n)) * 5.0
    np.fill_diagonal(d, 0.0)
    path = dtw_align(d)
    assert path.cost == 0.0
    assert path.pairs == tuple((i, i) for i in range(n))


def test_dtw_optimal_vs_brute_force_all_small_sizes():
    rng = np.random.default_rng(0)
    for m in range(1, 6):
        for n in range(1, 6):
            for _ in range(5):
                d = rng.random((m, n))
                path = dtw_align(d)
                assert path.cost == pytest.approx(brute_force_min_cost(d), abs=1e-9)


def test_dtw_path_cost_is_sum_of_pair_distances():
    rng = np.random.default_rng(1)
    d = rng.random((5, 7))
    path = dtw_align(d)
    assert path.cost == pytest.approx(sum(d[i, j] for i, j in path.pairs), abs=1e-12)


def test_dtw_cost_symmetry():
    rng = np.random.default_rng(2)
    d = rng.random((6, 4))
    assert dtw_align(d).cost == pytest.approx(dtw_align(d.T).cost, abs=1e-9)


def test_dtw_tie_prefers_diagonal():
    d = np.zeros((3, 3))  # every path costs 0; tie rule must give the diagonal
    path = dtw_align(d)
    assert path.pairs == ((0, 0), (1, 1), (2, 2))


def test_alignment_path_validation():
    with pytest.raises(ValueError, match="start"):
        AlignmentPath(pairs=((1, 0), (1, 1)), cost=0.0)
    with pytest.raises(ValueError, match="illegal"):
        AlignmentPath(pairs=((0, 0), (2, 1)), cost=0.0)


# ---------------------------------------------------------------------------
# transfer
# ---------------------------------------------------------------------------


def test_self_transfer_is_reconstruction(task_model):
    model, template = task_model
    rng = np.random.default_rng(3)
    mesh = random_mesh(template, rng)
    out = transfer(model, mesh, mesh)
    recon = model.reconstruct(mesh.vertices)
    assert np.array_equal(out.vertices, recon)
    assert np.array_equal(out.faces, template.faces)


def test_transfer_deterministic(task_model):
    model, template = task_model
    rng = np.random.default_rng(4)
    a = random_mesh(template, rng)
    b = random_mesh(template, rng)
    out1 = transfer(model, a, b)
    out2 = transfer(model, a, b)
    assert out1.vertices.tobytes() == out2.vertices.tobytes()


def test_transfer_uses_shape_from_first_pose_from_second(task_model):
    model, template = task_model
    rng = np.random.default_rng(5)
    a = random_mesh(template, rng)
    b = random_mesh(template, rng)
    code_a = model.mean_code(a.vertices)
    code_b = model.mean_code(b.vertices)
    out = transfer(model, a, b)
    from dismesh.model import LatentCode

    expected = model.decode_code(LatentCode(code_a.z_shape, code_b.z_pose))
    assert np.array_equal(out.vertices, expected)


def test_transfer_rejects_wrong_topology(task_model):
    model, template = task_model
    other = bipyramid(20)
    with pytest.raises(ValueError, match="vertices"):
        transfer(model, other, other)


# ---------------------------------------------------------------------------
# synchronize over the model
# ---------------------------------------------------------------------------


def test_synchronize_identical_sequences(task_model):
    model, template = task_model
    rng = np.random.default_rng(6)
    frames = [random_mesh(template, rng) for _ in range(5)]
    path = synchronize(model, frames, frames)
    assert path.cost == pytest.approx(0.0, abs=1e-9)
    assert path.pairs == tuple((i, i) for i in range(5))


def test_synchronize_rejects_empty(task_model):
    model, template = task_model
    with pytest.raises(ValueError, match="empty"):
        synchronize(model, [], [template])


def test_synchronize_length_one(task_model):
    model, template = task_model
    path = synchronize(model, [template], [template])
    assert path.pairs == ((0, 0),)


# ---------------------------------------------------------------------------
# match
# ---------------------------------------------------------------------------


def test_match_query_in_gallery_ranks_first(task_model):
    model, template = task_model
    rng = np.random.default_rng(7)
    query = random_mesh(template, rng)
    gallery = [(random_mesh(template, rng), 10), (query, 20), (random_mesh(template, rng), 30)]
    ranked = match(model, query, gallery)
    assert ranked[0].subject_id == 20
    assert ranked[0].distance == pytest.approx(0.0, abs=1e-12)


def test_match_duplicate_entries_identical_distance(task_model):
    model, template = task_model
    rng = np.random.default_rng(8)
    query = random_mesh(template, rng)
    twin = random_mesh(template, rng)
    ranked = match(model, query, [(twin, 1), (twin, 2)])
    assert ranked[0].distance == ranked[1].distance
    assert ranked[0].gallery_index == 0  # stable tie by gallery index


def test_match_invariant_to_gallery_permutation(task_model):
    model, template = task_model
    rng = np.random.default_rng(9)
    query = random_mesh(template, rng)
    entries = [(random_mesh(template, rng), i) for i in range(5)]
    ranked = [r.subject_id for r in match(model, query, entries)]
    shuffled = [entries[i] for i in [3, 1, 4, 0, 2]]
    ranked_shuffled = [r.subject_id for r in match(model, query, shuffled)]
    assert ranked == ranked_shuffled


def test_match_empty_gallery_rejected(task_model):
    model, template = task_model
    with pytest.raises(ValueError, match="empty"):
        match(model, template, [])


# ---------------------------------------------------------------------------
# sample_prior
# ---------------------------------------------------------------------------


def test_sample_prior_deterministic(task_model):
    model, _template = task_model
    meshes_a, metrics_a = sample_prior(model, 4, seed=42)
    meshes_b, metrics_b = sample_prior(model, 4, seed=42)
    for ma, mb in zip(meshes_a, meshes_b):
        assert ma.vertices.tobytes() == mb.vertices.tobytes()
    assert metrics_a == metrics_b


def test_sample_prior_single_sample_edge_case(task_model):
    model, template = task_model
    refs = np.stack([template.vertices])
    meshes, metrics = sample_prior(model, 1, seed=0, reference_meshes=refs)
    assert len(meshes) == 1
    assert metrics.diversity is None
    assert metrics.specificity is not None and metrics.specificity >= 0.0


def test_sample_prior_prefix_stability(task_model):
    model, _template = task_model
    short, _ = sample_prior(model, 2, seed=9)
    longer, _ = sample_prior(model, 5, seed=9)
    for a, b in zip(short, longer):
        assert a.vertices.tobytes() == b.vertices.tobytes()


def test_sample_prior_without_references_reports_reason(task_model):
    model, _template = task_model
    _meshes, metrics = sample_prior(model, 3, seed=1)
    assert metrics.specificity is None
    assert "reference" in metrics.specificity_reason
