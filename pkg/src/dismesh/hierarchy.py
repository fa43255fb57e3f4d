"""Multi-resolution mesh hierarchy for the encoder/decoder pyramid.

Coarsening is quadric-error-metric edge collapse with the contraction
placed at the edge midpoint. Downsampling matrices select surviving
vertices; upsampling matrices carry barycentric weights of each fine
vertex's projection onto its nearest coarse face. Tie-breaking is fixed
(documented in TIEBREAK_RULE) so identical inputs rebuild bit-identical
hierarchies.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .mesh import MeshError, TriangleMesh, adjacency_from_faces, scaled_laplacian_from_adjacency, unique_edges
from .sparse import SparseMatrix

FORMAT_VERSION = 1
TIEBREAK_RULE = "min-error-then-smallest-endpoint-pair-v1"
MIN_COARSE_VERTICES = 8


class DecimationError(MeshError):
    """Decimation cannot reach the requested vertex count."""


@dataclass(frozen=True)
class HierarchyLevel:
    """One pyramid level; transition operators are absent on the coarsest."""

    vertex_count: int
    adjacency: SparseMatrix
    scaled_laplacian: SparseMatrix
    downsample: Optional[SparseMatrix]  # (N_next, N_this) vertex selection
    upsample: Optional[SparseMatrix]  # (N_this, N_next) barycentric weights


@dataclass(frozen=True)
class MeshHierarchy:
    levels: tuple[HierarchyLevel, ...]
    ratios: tuple[float, ...]

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(level.vertex_count for level in self.levels)

    def fingerprint(self) -> str:
        """SHA-256 over the canonical serialized form; used to pin checkpoints
        to the hierarchy they were trained with."""
        h = hashlib.sha256()
        h.update(json.dumps(self._meta(), sort_keys=True).encode())
        for name, matrix in self._matrix_items():
            h.update(name.encode())
            h.update(matrix.to_bytes())
        return h.hexdigest()

    def _meta(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "tiebreak": TIEBREAK_RULE,
            "ratios": list(self.ratios),
            "level_sizes": list(self.level_sizes),
        }

    def _matrix_items(self):
        for idx, level in enumerate(self.levels):
            yield f"level{idx}_adjacency", level.adjacency
            yield f"level{idx}_laplacian", level.scaled_laplacian
            if level.downsample is not None:
                yield f"level{idx}_downsample", level.downsample
            if level.upsample is not None:
                yield f"level{idx}_upsample", level.upsample

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "meta.json").write_text(
            json.dumps(self._meta(), sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        for name, matrix in self._matrix_items():
            matrix.save(directory / f"{name}.bin")

    @classmethod
    def load(cls, directory) -> "MeshHierarchy":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
        if meta.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported hierarchy format version {meta.get('version')!r}")
        sizes = meta["level_sizes"]
        levels = []
        for idx, _size in enumerate(sizes):
            last = idx == len(sizes) - 1
            levels.append(
                HierarchyLevel(
                    vertex_count=int(sizes[idx]),
                    adjacency=SparseMatrix.load(directory / f"level{idx}_adjacency.bin"),
                    scaled_laplacian=SparseMatrix.load(directory / f"level{idx}_laplacian.bin"),
                    downsample=None if last else SparseMatrix.load(directory / f"level{idx}_downsample.bin"),
                    upsample=None if last else SparseMatrix.load(directory / f"level{idx}_upsample.bin"),
                )
            )
        return cls(levels=tuple(levels), ratios=tuple(meta["ratios"]))


# ---------------------------------------------------------------------------
# Quadric-error-metric decimation
# ---------------------------------------------------------------------------


def _vertex_quadrics(positions: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-vertex 4x4 quadrics summed from incident face plane quadrics.
    Zero-area faces contribute nothing."""
    n = positions.shape[0]
    quadrics = np.zeros((n, 4, 4), dtype=np.float64)
    a, b, c = positions[faces[:, 0]], positions[faces[:, 1]], positions[faces[:, 2]]
    normals = np.cross(b - a, c - a)
    lengths = np.linalg.norm(normals, axis=1)
    ok = lengths > 0.0
    unit = np.zeros_like(normals)
    unit[ok] = normals[ok] / lengths[ok, None]
    offsets = -np.einsum("fi,fi->f", unit, a)
    planes = np.concatenate([unit, offsets[:, None]], axis=1)  # (F, 4)
    face_quadrics = planes[:, :, None] * planes[:, None, :]
    face_quadrics[~ok] = 0.0
    for corner in range(3):
        np.add.at(quadrics, faces[:, corner], face_quadrics)
    return quadrics


def _edge_collapse_errors(
    positions: np.ndarray, quadrics: np.ndarray, edges: np.ndarray
) -> np.ndarray:
    mid = 0.5 * (positions[edges[:, 0]] + positions[edges[:, 1]])
    hom = np.concatenate([mid, np.ones((len(edges), 1))], axis=1)
    q = quadrics[edges[:, 0]] + quadrics[edges[:, 1]]
    return np.einsum("ei,eij,ej->e", hom, q, hom)


def _link_condition_ok(edge: tuple[int, int], faces: np.ndarray) -> bool:
    """Collapse keeps the complex manifold-like iff the common neighbors of
    the endpoints are exactly the vertices opposite the shared faces."""
    i, j = edge
    has_i = (faces == i).any(axis=1)
    has_j = (faces == j).any(axis=1)
    shared = faces[has_i & has_j]
    if len(shared) == 0:
        return False
    opposite = set(shared.ravel()) - {i, j}
    nbrs_i = set(faces[has_i].ravel()) - {i}
    nbrs_j = set(faces[has_j].ravel()) - {j}
    return (nbrs_i & nbrs_j) == opposite


def _dedupe_faces(faces: np.ndarray) -> np.ndarray:
    key = np.sort(faces, axis=1)
    _, first = np.unique(key, axis=0, return_index=True)
    return faces[np.sort(first)]


def qem_decimate(
    positions: np.ndarray, faces: np.ndarray, target: int
) -> tuple[np.ndarray, np.ndarray]:
    """Collapse minimum-quadric-error edges until `target` vertices survive.

    Returns (survivors, coarse_faces): the sorted original indices of the
    surviving vertices, and faces reindexed over them. The lower-indexed
    endpoint of a collapsed edge survives, inheriting the midpoint as its
    working position and the summed quadric. Among equal-error edges the
    lexicographically smallest (i, j) pair wins; an edge is skipped when
    collapsing it would break the link condition.
    """
    positions = np.asarray(positions, dtype=np.float64).copy()
    faces = np.asarray(faces, dtype=np.int64).copy()
    n = positions.shape[0]
    if not 0 < target <= n:
        raise ValueError(f"target {target} out of range for {n} vertices")
    quadrics = _vertex_quadrics(positions, faces)
    alive = np.ones(n, dtype=bool)
    n_alive = n
    while n_alive > target:
        edges = unique_edges(faces)
        errors = _edge_collapse_errors(positions, quadrics, edges)
        order = np.lexsort((edges[:, 1], edges[:, 0], errors))
        collapsed = False
        for idx in order:
            i, j = int(edges[idx, 0]), int(edges[idx, 1])
            if not _link_condition_ok((i, j), faces):
                continue
            positions[i] = 0.5 * (positions[i] + positions[j])
            quadrics[i] = quadrics[i] + quadrics[j]
            faces[faces == j] = i
            degenerate = (
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            )
            faces = _dedupe_faces(faces[~degenerate])
            alive[j] = False
            n_alive -= 1
            collapsed = True
            break
        if not collapsed:
            raise DecimationError(
                f"no collapsible edge left at {n_alive} vertices (target {target}); "
                "mesh connectivity does not admit further manifold-preserving collapses"
            )
    survivors = np.nonzero(alive)[0]
    remap = np.full(n, -1, dtype=np.int64)
    remap[survivors] = np.arange(survivors.size)
    return survivors, remap[faces]


# ---------------------------------------------------------------------------
# Barycentric upsampling
# ---------------------------------------------------------------------------


def closest_point_on_triangles(
    point: np.ndarray, tri_a: np.ndarray, tri_b: np.ndarray, tri_c: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Closest point to `point` on each triangle (vectorized over triangles).

    Returns (bary, dist2): barycentric coordinates (F, 3) of the closest
    point on every triangle and the squared distances (F,). Degenerate
    triangles fall back to their first corner.
    """
    ab = tri_b - tri_a
    ac = tri_c - tri_a
    ap = point - tri_a
    d1 = np.einsum("fi,fi->f", ab, ap)
    d2 = np.einsum("fi,fi->f", ac, ap)
    bp = point - tri_b
    d3 = np.einsum("fi,fi->f", ab, bp)
    d4 = np.einsum("fi,fi->f", ac, bp)
    cp = point - tri_c
    d5 = np.einsum("fi,fi->f", ab, cp)
    d6 = np.einsum("fi,fi->f", ac, cp)
    vc = d1 * d4 - d3 * d2
    vb = d5 * d2 - d1 * d6
    va = d3 * d6 - d5 * d4

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = va + vb + vc
        v_in = vb / denom
        w_in = vc / denom

    f = len(tri_a)
    zeros = np.zeros(f)
    ones = np.ones(f)
    conditions = [
        (d1 <= 0) & (d2 <= 0),  # vertex A
        (d3 >= 0) & (d4 <= d3),  # vertex B
        (d6 >= 0) & (d5 <= d6),  # vertex C
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),  # edge AB
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),  # edge AC
        (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0),  # edge BC
    ]
    bary_u = np.select(conditions, [ones, zeros, zeros, 1 - v_ab, 1 - w_ac, zeros], 1 - v_in - w_in)
    bary_v = np.select(conditions, [zeros, ones, zeros, v_ab, zeros, 1 - w_bc], v_in)
    bary_w = np.select(conditions, [zeros, zeros, ones, zeros, w_ac, w_bc], w_in)
    bary = np.stack([bary_u, bary_v, bary_w], axis=1)
    bad = ~np.isfinite(bary).all(axis=1)
    if bad.any():
        bary[bad] = (1.0, 0.0, 0.0)
    np.clip(bary, 0.0, 1.0, out=bary)
    bary /= bary.sum(axis=1, keepdims=True)
    closest = bary[:, 0:1] * tri_a + bary[:, 1:2] * tri_b + bary[:, 2:3] * tri_c
    dist2 = np.einsum("fi,fi->f", closest - point, closest - point)
    return bary, dist2


def barycentric_upsample(
    fine_positions: np.ndarray,
    survivors: np.ndarray,
    coarse_positions: np.ndarray,
    coarse_faces: np.ndarray,
) -> SparseMatrix:
    """Upsampling operator mapping coarse vertex signals to fine vertices.

    Surviving fine vertices copy their own coarse value exactly (weight 1);
    removed ones take the barycentric weights of their projection onto the
    nearest coarse face (ties to the lowest face index).
    """
    n_fine = fine_positions.shape[0]
    n_coarse = coarse_positions.shape[0]
    coarse_of = {int(orig): c for c, orig in enumerate(survivors)}
    tri_a = coarse_positions[coarse_faces[:, 0]]
    tri_b = coarse_positions[coarse_faces[:, 1]]
    tri_c = coarse_positions[coarse_faces[:, 2]]
    rows, cols, vals = [], [], []
    for i in range(n_fine):
        if i in coarse_of:
            rows.append(i)
            cols.append(coarse_of[i])
            vals.append(1.0)
            continue
        bary, dist2 = closest_point_on_triangles(fine_positions[i], tri_a, tri_b, tri_c)
        best = int(np.argmin(dist2))
        for corner in range(3):
            weight = float(bary[best, corner])
            if weight != 0.0:
                rows.append(i)
                cols.append(int(coarse_faces[best, corner]))
                vals.append(weight)
    return SparseMatrix(rows, cols, vals, (n_fine, n_coarse))


# ---------------------------------------------------------------------------
# Hierarchy construction
# ---------------------------------------------------------------------------


def build_hierarchy(mesh: TriangleMesh, ratios) -> MeshHierarchy:
    """Build the decimation pyramid for `mesh` with one coarse level per ratio.

    Level l+1 keeps ceil(N_l * ratios[l]) vertices. Rejects ratios outside
    (0, 1) and coarse levels that would drop below MIN_COARSE_VERTICES.
    """
    ratios = tuple(float(r) for r in ratios)
    if not ratios:
        raise ValueError("ratios must be non-empty")
    for r in ratios:
        if not 0.0 < r < 1.0:
            raise ValueError(f"ratio {r} outside (0, 1)")

    positions = mesh.vertices
    faces = mesh.faces
    levels_raw = []  # (positions, faces) per level
    transitions = []  # (down, up) per transition
    for r in ratios:
        n = positions.shape[0]
        target = int(np.ceil(n * r))
        if target < MIN_COARSE_VERTICES:
            raise ValueError(
                f"ratio {r} would keep {target} vertices, "
                f"below the minimum of {MIN_COARSE_VERTICES}"
            )
        survivors, coarse_faces = qem_decimate(positions, faces, target)
        coarse_positions = positions[survivors]
        down = SparseMatrix(
            np.arange(survivors.size), survivors, np.ones(survivors.size), (survivors.size, n)
        )
        up = barycentric_upsample(positions, survivors, coarse_positions, coarse_faces)
        levels_raw.append((positions, faces))
        transitions.append((down, up))
        positions, faces = coarse_positions, coarse_faces
    levels_raw.append((positions, faces))

    levels = []
    for idx, (pos, fcs) in enumerate(levels_raw):
        adjacency = adjacency_from_faces(fcs, pos.shape[0])
        laplacian = scaled_laplacian_from_adjacency(adjacency)
        down, up = transitions[idx] if idx < len(transitions) else (None, None)
        levels.append(
            HierarchyLevel(
                vertex_count=pos.shape[0],
                adjacency=adjacency,
                scaled_laplacian=laplacian,
                downsample=down,
                upsample=up,
            )
        )
    sizes = [lvl.vertex_count for lvl in levels]
    if any(sizes[i + 1] > sizes[i] for i in range(len(sizes) - 1)):
        raise DecimationError(f"level sizes must be non-increasing, got {sizes}")
    return MeshHierarchy(levels=tuple(levels), ratios=ratios)
