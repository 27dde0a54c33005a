"""
Triangle meshes: container, OBJ I/O, normalization and validity checks.

Also hosts the subdivided cube-surface lattice that procedural shapes and
test primitives are built from; its connectivity is closed and outward
oriented by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.errors import GeometryError, MeshIndexError, ObjParseError
from src.utils import atomic_write

logger = logging.getLogger("mars.mesh")

NORMALIZED_EXTENT = 1.9


@dataclass
class TriMesh:
    """Indexed triangle mesh.

    Attributes:
        vertices: (V, 3) float64 positions.
        triangles: (F, 3) int64 vertex indices, counter-clockwise seen from
            outside for oriented meshes.
    """

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self) -> None:
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise MeshIndexError(
                f"Triangle index out of range for {len(self.vertices)} vertices"
            )

    @classmethod
    def empty(cls) -> "TriMesh":
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def is_empty(self) -> bool:
        return self.n_triangles == 0

    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        tri = self.vertices[self.triangles]
        return tri[:, 0], tri[:, 1], tri[:, 2]

    def face_cross(self) -> np.ndarray:
        a, b, c = self.corners()
        return np.cross(b - a, c - a)

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        cross = self.face_cross()
        norms = np.linalg.norm(cross, axis=1, keepdims=True)
        return np.divide(cross, norms, out=np.zeros_like(cross), where=norms > 0)

    @property
    def area(self) -> float:
        return float(self.face_areas().sum())

    def signed_volume(self) -> float:
        a, b, c = self.corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n_vertices == 0:
            raise GeometryError("Empty mesh has no bounds")
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def transformed(self, scale: float, offset: np.ndarray) -> "TriMesh":
        return TriMesh(self.vertices * scale + offset, self.triangles.copy())

    def flipped(self) -> "TriMesh":
        return TriMesh(self.vertices.copy(), self.triangles[:, ::-1].copy())


def normalize_mesh(mesh: TriMesh, extent: float = NORMALIZED_EXTENT) -> TriMesh:
    """Center on the bounding-box center and scale the longest edge to ``extent``."""
    lo, hi = mesh.bounds()
    longest = float((hi - lo).max())
    if longest <= 0:
        raise GeometryError("Cannot normalize a mesh with zero extent")
    scale = extent / longest
    return mesh.transformed(scale, -(lo + hi) / 2.0 * scale)


def edge_counts(mesh: TriMesh) -> tuple[np.ndarray, np.ndarray]:
    """Return unique undirected edges and how many triangles share each."""
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges.sort(axis=1)
    return np.unique(edges, axis=0, return_counts=True)


def is_edge_manifold(mesh: TriMesh) -> bool:
    """Every edge is shared by exactly two triangles."""
    if mesh.is_empty:
        return False
    _, counts = edge_counts(mesh)
    return bool((counts == 2).all())


def is_watertight(mesh: TriMesh) -> bool:
    """Closed and consistently wound: each directed edge has exactly one reverse twin."""
    if mesh.is_empty:
        return False
    t = mesh.triangles
    directed = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    n = np.int64(mesh.n_vertices)
    keys = directed[:, 0] * n + directed[:, 1]
    if len(np.unique(keys)) != len(keys):
        return False
    reverse = directed[:, 1] * n + directed[:, 0]
    return bool(np.isin(reverse, keys).all())


def require_watertight(mesh: TriMesh, what: str = "mesh") -> None:
    if not is_watertight(mesh):
        raise GeometryError(f"{what} is not watertight (open, non-manifold or inconsistently wound)")


# ── OBJ I/O ────────────────────────────────────────────────────────────
def _parse_index(token: str, n_vertices: int, line_number: int) -> int:
    head = token.split("/")[0]
    try:
        value = int(head)
    except ValueError as exc:
        raise ObjParseError(f"bad face index '{token}'", line_number) from exc
    index = value - 1 if value > 0 else n_vertices + value
    if value == 0 or index < 0 or index >= n_vertices:
        raise MeshIndexError(f"line {line_number}: face index {value} out of range (1..{n_vertices})")
    return index


def load_obj(path: str | Path) -> TriMesh:
    """Read an ASCII OBJ file; polygons are fan-triangulated.

    Only ``v`` and ``f`` records matter; other record types are skipped.
    Face indices must refer to vertices declared earlier in the file.

    Raises:
        FileNotFoundError: If the file does not exist.
        ObjParseError: On a malformed record (message carries the line).
        MeshIndexError: On a face index outside the vertex range.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"OBJ file not found: {path.resolve()}")

    vertices: list[tuple[float, float, float]] = []
    triangles: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, raw in enumerate(f, start=1):
            parts = raw.split("#", 1)[0].split()
            if not parts:
                continue
            kind, args = parts[0], parts[1:]
            if kind == "v":
                if len(args) < 3:
                    raise ObjParseError("vertex needs three coordinates", line_number)
                try:
                    x, y, z = (float(a) for a in args[:3])
                except ValueError as exc:
                    raise ObjParseError(f"bad vertex coordinate in '{raw.strip()}'", line_number) from exc
                vertices.append((x, y, z))
            elif kind == "f":
                if len(args) < 3:
                    raise ObjParseError("face needs at least three indices", line_number)
                idx = [_parse_index(a, len(vertices), line_number) for a in args]
                for i in range(1, len(idx) - 1):
                    triangles.append((idx[0], idx[i], idx[i + 1]))

    logger.debug("Loaded %s: %d vertices, %d triangles", path, len(vertices), len(triangles))
    return TriMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3), np.array(triangles, dtype=np.int64).reshape(-1, 3))


def save_obj(mesh: TriMesh, path: str | Path) -> Path:
    """Write ``mesh`` as ASCII OBJ (atomic write-then-rename)."""
    lines = [f"v {x:.9f} {y:.9f} {z:.9f}\n" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}\n" for a, b, c in mesh.triangles]
    with atomic_write(path) as f:
        f.write("".join(lines))
    return Path(path)


# ── primitives ─────────────────────────────────────────────────────────
def cube_surface_lattice(subdivisions: int) -> TriMesh:
    """Subdivided surface of the cube [-1, 1]³ with shared edge vertices.

    Each face is an ``n x n`` grid of quads split into two triangles,
    wound so that normals point outward.
    """
    n = int(subdivisions)
    if n < 1:
        raise GeometryError("Cube lattice needs at least one subdivision")
    index: dict[tuple[int, int, int], int] = {}
    vertices: list[tuple[int, int, int]] = []
    triangles: list[tuple[int, int, int]] = []

    def vid(key: tuple[int, int, int]) -> int:
        if key not in index:
            index[key] = len(vertices)
            vertices.append(key)
        return index[key]

    for axis in range(3):
        u_axis, v_axis = (axis + 1) % 3, (axis + 2) % 3
        for side in (0, n):
            for i in range(n):
                for j in range(n):
                    def corner(du: int, dv: int) -> int:
                        key = [0, 0, 0]
                        key[axis], key[u_axis], key[v_axis] = side, i + du, j + dv
                        return vid((key[0], key[1], key[2]))

                    p00, p10, p11, p01 = corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)
                    if side == n:
                        triangles += [(p00, p10, p11), (p00, p11, p01)]
                    else:
                        triangles += [(p00, p11, p10), (p00, p01, p11)]

    lattice = np.array(vertices, dtype=np.float64)
    return TriMesh(-1.0 + 2.0 * lattice / n, np.array(triangles, dtype=np.int64))


def box_mesh(lo: tuple[float, float, float] = (-1.0, -1.0, -1.0), hi: tuple[float, float, float] = (1.0, 1.0, 1.0), subdivisions: int = 1) -> TriMesh:
    """Axis-aligned box spanning ``lo``..``hi``."""
    cube = cube_surface_lattice(subdivisions)
    lo_a, hi_a = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    return TriMesh(lo_a + (cube.vertices + 1.0) / 2.0 * (hi_a - lo_a), cube.triangles)


def sphere_mesh(radius: float = 1.0, subdivisions: int = 16, center: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> TriMesh:
    """Sphere made by projecting the cube lattice radially."""
    cube = cube_surface_lattice(subdivisions)
    dirs = cube.vertices / np.linalg.norm(cube.vertices, axis=1, keepdims=True)
    return TriMesh(np.asarray(center) + radius * dirs, cube.triangles)
