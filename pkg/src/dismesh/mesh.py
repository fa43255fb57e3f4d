"""Triangle-mesh value type, OBJ subset I/O, and graph operators.

Every mesh in a dataset shares one template topology: only vertex positions
vary. The Laplacian built here is the rescaled normalized graph Laplacian
whose spectrum lies in [-1, 1], the form consumed by Chebyshev filtering.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sparse import SparseMatrix


class MeshError(ValueError):
    """Raised for invalid mesh data or unparseable OBJ content."""


@dataclass(frozen=True)
class TriangleMesh:
    """Fixed-topology triangle mesh: (N, 3) float positions, (M, 3) int faces."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        faces = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError(f"vertices must be (N, 3), got {vertices.shape}")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise MeshError(f"faces must be (M, 3), got {faces.shape}")
        n = vertices.shape[0]
        if n < 4:
            raise MeshError(f"mesh has {n} vertices, at least 4 required")
        if faces.shape[0] < 1:
            raise MeshError("mesh has no faces, at least 1 required")
        if faces.min() < 0 or faces.max() >= n:
            raise MeshError(
                f"face index out of range: valid range is [0, {n}), "
                f"found [{faces.min()}, {faces.max()}]"
            )
        degenerate = (
            (faces[:, 0] == faces[:, 1])
            | (faces[:, 1] == faces[:, 2])
            | (faces[:, 0] == faces[:, 2])
        )
        if degenerate.any():
            raise MeshError(f"face {int(np.nonzero(degenerate)[0][0])} repeats a vertex index")
        vertices.setflags(write=False)
        faces.setflags(write=False)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_faces(self) -> int:
        return self.faces.shape[0]

    def with_vertices(self, vertices) -> "TriangleMesh":
        """Same topology, new positions."""
        return TriangleMesh(vertices, self.faces)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as a sorted (E, 2) array with e[0] < e[1]."""
        return unique_edges(self.faces)

    def topology_hash(self) -> str:
        """SHA-256 fingerprint of (vertex count, face array); positions excluded."""
        h = hashlib.sha256()
        h.update(np.int64(self.n_vertices).tobytes())
        h.update(self.faces.tobytes())
        return h.hexdigest()


def unique_edges(faces: np.ndarray) -> np.ndarray:
    halfedges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    halfedges = np.sort(halfedges, axis=1)
    return np.unique(halfedges, axis=0)


# ---------------------------------------------------------------------------
# OBJ subset I/O
# ---------------------------------------------------------------------------


def load_obj(path) -> TriangleMesh:
    """Parse a Wavefront OBJ restricted to `v x y z` and triangle `f` records.

    Comment lines (`#`) and blank lines are allowed; `f` entries may carry
    `/`-suffixed attribute indices, which are dropped. 1-based OBJ indices
    are converted to 0-based. Anything else is rejected with a diagnostic
    naming the offending line.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"OBJ file not found: {path}")
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            kind = parts[0]
            if kind == "v":
                if len(parts) != 4:
                    raise MeshError(f"{path}:{lineno}: vertex record needs 3 coordinates")
                try:
                    vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad vertex coordinate: {exc}") from exc
            elif kind == "f":
                if len(parts) != 4:
                    raise MeshError(
                        f"{path}:{lineno}: non-triangle face with {len(parts) - 1} vertices"
                    )
                idx = []
                for token in parts[1:]:
                    head = token.split("/", 1)[0]
                    try:
                        value = int(head)
                    except ValueError as exc:
                        raise MeshError(f"{path}:{lineno}: bad face index {token!r}") from exc
                    if value < 1:
                        raise MeshError(
                            f"{path}:{lineno}: face index {value} out of range (1-based expected)"
                        )
                    idx.append(value - 1)
                faces.append(tuple(idx))
            else:
                raise MeshError(f"{path}:{lineno}: unsupported record type {kind!r}")
    if len(vertices) < 4:
        raise MeshError(f"{path}: only {len(vertices)} vertices, at least 4 required")
    faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces_arr.size and faces_arr.max() >= len(vertices):
        bad = int(faces_arr.max())
        raise MeshError(
            f"{path}: face index {bad + 1} out of range for {len(vertices)} vertices"
        )
    try:
        return TriangleMesh(np.asarray(vertices, dtype=np.float64), faces_arr)
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from exc


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write the OBJ subset deterministically (repr floats, 1-based faces)."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {float(x)!r} {float(y)!r} {float(z)!r}")
    for a, b, c in mesh.faces:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Graph operators
# ---------------------------------------------------------------------------


def adjacency_from_faces(faces: np.ndarray, n_vertices: int) -> SparseMatrix:
    """Binary symmetric adjacency over the edges of a triangle list."""
    edges = unique_edges(np.asarray(faces, dtype=np.int64))
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return SparseMatrix(rows, cols, np.ones(rows.size), (n_vertices, n_vertices))


def scaled_laplacian_from_adjacency(adjacency: SparseMatrix) -> SparseMatrix:
    """Rescaled normalized Laplacian L - I = -D^{-1/2} A D^{-1/2}.

    The normalized Laplacian L = I - D^{-1/2} A D^{-1/2} has spectrum in
    [0, 2]; subtracting the identity (the lambda_max = 2 rescaling) maps it
    to [-1, 1]. Degree-0 vertices contribute no entries (D^{-1/2} := 0).
    Symmetry is exact because the (i, j) and (j, i) values are the same
    float product.
    """
    n = adjacency.shape[0]
    if adjacency.shape[0] != adjacency.shape[1]:
        raise ValueError(f"adjacency must be square, got {adjacency.shape}")
    degree = np.zeros(n, dtype=np.float64)
    np.add.at(degree, adjacency.rows, adjacency.vals)
    inv_sqrt = np.zeros(n, dtype=np.float64)
    positive = degree > 0
    inv_sqrt[positive] = 1.0 / np.sqrt(degree[positive])
    vals = -adjacency.vals * inv_sqrt[adjacency.rows] * inv_sqrt[adjacency.cols]
    return SparseMatrix(adjacency.rows, adjacency.cols, vals, (n, n))


def normalized_scaled_laplacian(mesh: TriangleMesh) -> SparseMatrix:
    """Scaled Laplacian of the mesh's edge graph; see
    :func:`scaled_laplacian_from_adjacency`."""
    return scaled_laplacian_from_adjacency(adjacency_from_faces(mesh.faces, mesh.n_vertices))
