"""Small meshes and graph fixtures shared across test modules."""

import numpy as np

from dismesh.mesh import TriangleMesh


def tetrahedron() -> TriangleMesh:
    vertices = np.array(
        [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0],
        ]
    )
    faces = np.array([[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]])
    return TriangleMesh(vertices, faces)


def bipyramid(n_ring: int = 8) -> TriangleMesh:
    """Two cones glued over an n-gon ring: n_ring + 2 vertices, closed."""
    angles = 2.0 * np.pi * np.arange(n_ring) / n_ring
    ring = np.stack([np.cos(angles), np.sin(angles), np.zeros(n_ring)], axis=1)
    vertices = np.concatenate([[[0.0, 0.0, 1.0]], ring, [[0.0, 0.0, -1.0]]])
    top, bottom = 0, n_ring + 1
    faces = []
    for i in range(n_ring):
        a = 1 + i
        b = 1 + (i + 1) % n_ring
        faces.append([top, a, b])
        faces.append([bottom, b, a])
    return TriangleMesh(vertices, np.array(faces))


def flat_grid(n: int = 4) -> TriangleMesh:
    """n x n coplanar grid, split into triangles; every quadric is zero."""
    xs, ys = np.meshgrid(np.arange(n, dtype=float), np.arange(n, dtype=float))
    vertices = np.stack([xs.ravel(), ys.ravel(), np.zeros(n * n)], axis=1)
    faces = []
    for r in range(n - 1):
        for c in range(n - 1):
            a = r * n + c
            b = a + 1
            d = a + n
            e = d + 1
            faces.append([a, b, d])
            faces.append([b, e, d])
    return TriangleMesh(vertices, np.array(faces))


def icosphere() -> TriangleMesh:
    """Icosahedron subdivided once and projected to the unit sphere:
    42 vertices, 80 faces."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    raw = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=float,
    )
    raw /= np.linalg.norm(raw, axis=1, keepdims=True)
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    vertices = list(raw)
    midpoint_cache: dict[tuple[int, int], int] = {}

    def midpoint(i: int, j: int) -> int:
        key = (min(i, j), max(i, j))
        if key not in midpoint_cache:
            point = vertices[i] + vertices[j]
            point = point / np.linalg.norm(point)
            midpoint_cache[key] = len(vertices)
            vertices.append(point)
        return midpoint_cache[key]

    out_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return TriangleMesh(np.array(vertices), np.array(out_faces))


def random_connected_graph_laplacian(rng: np.random.Generator, n: int):
    """Scaled Laplacian of a random connected graph, for spectral oracles."""
    from dismesh.mesh import scaled_laplacian_from_adjacency
    from dismesh.sparse import SparseMatrix

    adj = np.zeros((n, n))
    order = rng.permutation(n)
    for a, b in zip(order, order[1:]):  # spanning path keeps it connected
        adj[a, b] = adj[b, a] = 1.0
    extra = rng.integers(0, 2, size=(n, n))
    extra = np.triu(extra, 1)
    adj = np.maximum(adj, extra + extra.T)
    np.fill_diagonal(adj, 0.0)
    return scaled_laplacian_from_adjacency(SparseMatrix.from_dense(adj))
