"""Downstream capabilities over a trained model: pose/shape transfer,
shape-invariant sequence synchronization, pose-invariant subject matching,
and prior sampling.

Every task works on posterior means, so outputs are deterministic functions
of (model, inputs); sampling draws its own per-index streams from the
caller's seed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .mesh import TriangleMesh
from .model import LatentCode, MeshVAE
from .rng import counter_rng

_STEPS = ((1, 1), (1, 0), (0, 1))  # tie preference: diagonal, then (i-1, j)


@dataclass(frozen=True)
class AlignmentPath:
    """Monotone DTW path from (0, 0) to (len_a - 1, len_b - 1)."""

    pairs: tuple[tuple[int, int], ...]
    cost: float

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("alignment path is empty")
        if self.pairs[0] != (0, 0):
            raise ValueError(f"path must start at (0, 0), got {self.pairs[0]}")
        for (i0, j0), (i1, j1) in zip(self.pairs, self.pairs[1:]):
            if (i1 - i0, j1 - j0) not in _STEPS:
                raise ValueError(f"illegal path step {(i0, j0)} -> {(i1, j1)}")
        if self.cost < 0:
            raise ValueError("path cost must be nonnegative")

    def matches_for_b(self, j: int) -> list[int]:
        return [i for i, jj in self.pairs if jj == j]


def _check_template(model: MeshVAE, mesh: TriangleMesh, name: str) -> None:
    if mesh.n_vertices != model.n_vertices:
        raise ValueError(
            f"{name}: mesh has {mesh.n_vertices} vertices, model template has {model.n_vertices}"
        )


def transfer(
    model: MeshVAE, mesh_shape_source: TriangleMesh, mesh_pose_source: TriangleMesh
) -> TriangleMesh:
    """Decode [z_shape(shape source), z_pose(pose source)] at posterior means."""
    _check_template(model, mesh_shape_source, "shape source")
    _check_template(model, mesh_pose_source, "pose source")
    if not np.array_equal(mesh_shape_source.faces, mesh_pose_source.faces):
        raise ValueError("transfer inputs disagree in topology")
    # both sources go through one encode batch so self- and cross-transfer
    # share the exact float path with the serving endpoint
    codes = model.mean_codes(np.stack([mesh_shape_source.vertices, mesh_pose_source.vertices]))
    d_s = model.config.d_shape
    combined = LatentCode(z_shape=codes[0, :d_s], z_pose=codes[1, d_s:])
    return TriangleMesh(model.decode_code(combined), mesh_shape_source.faces)


# ---------------------------------------------------------------------------
# Dynamic time warping
# ---------------------------------------------------------------------------


def dtw_align(distances: np.ndarray) -> AlignmentPath:
    """DTW over a pairwise distance matrix.

    D(i, j) = d(i, j) + min(D(i-1, j), D(i, j-1), D(i-1, j-1)) with
    D(0, 0) = d(0, 0); backtracking prefers the diagonal predecessor on
    ties, then (i-1, j).
    """
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.size == 0:
        raise ValueError(f"distance matrix must be non-empty 2-D, got shape {d.shape}")
    if np.any(d < 0):
        raise ValueError("distances must be nonnegative")
    m, n = d.shape
    acc = np.full((m, n), np.inf)
    acc[0, 0] = d[0, 0]
    for i in range(1, m):
        acc[i, 0] = d[i, 0] + acc[i - 1, 0]
    for j in range(1, n):
        acc[0, j] = d[0, j] + acc[0, j - 1]
    for i in range(1, m):
        for j in range(1, n):
            acc[i, j] = d[i, j] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    pairs = [(m - 1, n - 1)]
    i, j = m - 1, n - 1
    while (i, j) != (0, 0):
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            best = min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
            if acc[i - 1, j - 1] == best:
                i, j = i - 1, j - 1
            elif acc[i - 1, j] == best:
                i = i - 1
            else:
                j = j - 1
        pairs.append((i, j))
    pairs.reverse()
    return AlignmentPath(pairs=tuple(pairs), cost=float(acc[m - 1, n - 1]))


def pose_embeddings(model: MeshVAE, frames: Sequence[TriangleMesh]) -> np.ndarray:
    """Pose-subspace posterior means, one row per frame."""
    stacked = np.stack([f.vertices for f in frames])
    codes = model.mean_codes(stacked)
    return codes[:, model.config.d_shape :]


def synchronize(
    model: MeshVAE, seq_a: Sequence[TriangleMesh], seq_b: Sequence[TriangleMesh]
) -> AlignmentPath:
    """Align two sequences by DTW over pose-subspace embeddings; the shape
    subspace is excluded, which is what makes the alignment shape-invariant."""
    if len(seq_a) == 0 or len(seq_b) == 0:
        raise ValueError("cannot synchronize an empty sequence")
    for mesh in (*seq_a, *seq_b):
        _check_template(model, mesh, "sequence frame")
    za = pose_embeddings(model, seq_a)
    zb = pose_embeddings(model, seq_b)
    diff = za[:, None, :] - zb[None, :, :]
    distances = np.sqrt(np.sum(diff * diff, axis=-1))
    return dtw_align(distances)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchResult:
    subject_id: int
    gallery_index: int
    distance: float


def match(
    model: MeshVAE, query: TriangleMesh, gallery: Sequence[tuple[TriangleMesh, int]]
) -> list[MatchResult]:
    """Rank gallery subjects by shape-subspace distance to the query.

    Ties are stable by gallery index; the pose subspace is ignored, which
    is what makes the ranking pose-invariant.
    """
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    _check_template(model, query, "query")
    for mesh, _sid in gallery:
        _check_template(model, mesh, "gallery entry")
    d_s = model.config.d_shape
    # query and gallery share one encode batch: a gallery copy of the query
    # then sits at exactly distance zero
    stacked = np.stack([query.vertices] + [m.vertices for m, _ in gallery])
    codes = model.mean_codes(stacked)[:, :d_s]
    distances = np.linalg.norm(codes[1:] - codes[0], axis=1)
    order = np.argsort(distances, kind="stable")
    return [
        MatchResult(subject_id=gallery[i][1], gallery_index=int(i), distance=float(distances[i]))
        for i in order
    ]


# ---------------------------------------------------------------------------
# Prior sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GenerationMetrics:
    diversity: Optional[float]  # mean pairwise per-vertex RMSE; None for n = 1
    specificity: Optional[float]  # mean RMSE to nearest reference mesh
    specificity_reason: Optional[str] = None


def _pairwise_rmse(a: np.ndarray, b: np.ndarray) -> float:
    diff = a - b
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=-1))))


def sample_prior(
    model: MeshVAE,
    n: int,
    seed: int,
    reference_meshes: Optional[np.ndarray] = None,
) -> tuple[list[TriangleMesh], GenerationMetrics]:
    """Decode n standard-normal codes (one counter stream per sample index).

    `reference_meshes` (any stack of template meshes, typically the training
    split) grounds the specificity metric; without it specificity is null.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if model.template_faces is None:
        raise ValueError("model carries no template faces; cannot emit meshes")
    codes = np.stack(
        [counter_rng(seed, "prior", i).standard_normal(model.config.latent_dim) for i in range(n)]
    )
    decoded = model.decode_batch(codes)
    meshes = [TriangleMesh(decoded[i], model.template_faces) for i in range(n)]

    diversity = None
    if n > 1:
        total = 0.0
        count = 0
        for i in range(n):
            for j in range(i + 1, n):
                total += _pairwise_rmse(decoded[i], decoded[j])
                count += 1
        diversity = total / count

    specificity = None
    reason = None
    if reference_meshes is None:
        reason = "no reference meshes provided"
    else:
        refs = np.asarray(reference_meshes, dtype=np.float64)
        nearest = []
        for i in range(n):
            diff = refs - decoded[i]
            rmse = np.sqrt(np.mean(np.sum(diff * diff, axis=-1), axis=-1))
            nearest.append(float(rmse.min()))
        specificity = float(np.mean(nearest))
    return meshes, GenerationMetrics(
        diversity=diversity, specificity=specificity, specificity_reason=reason
    )
