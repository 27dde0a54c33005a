"""
Surface sampling, farthest-point sampling and occupancy query batches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from src.errors import ContractError, GeometryError
from src.mesh import TriMesh, require_watertight
from src.occupancy import contains

logger = logging.getLogger("mars.sampling")

QUERY_BOUND = 1.05


@dataclass
class PointCloud:
    """Oriented surface samples.

    Attributes:
        points: (N, 3) positions inside [-1, 1]³.
        normals: (N, 3) unit normals.
        face_index: Optional (N,) index of the triangle each point came from.
    """

    points: np.ndarray
    normals: np.ndarray
    face_index: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ContractError("PointCloud needs at least one point")
        if self.normals.shape != self.points.shape:
            raise ContractError(f"Normals {self.normals.shape} do not match points {self.points.shape}")
        if np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max() > 1e-6:
            raise ContractError("PointCloud normals must have unit length")
        if np.abs(self.points).max() > 1.0 + 1e-9:
            raise ContractError("PointCloud points must lie inside [-1, 1]^3")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, indices: np.ndarray) -> "PointCloud":
        indices = np.asarray(indices, dtype=np.int64)
        face = None if self.face_index is None else self.face_index[indices]
        return PointCloud(self.points[indices], self.normals[indices], face)


@dataclass
class QueryBatch:
    """Occupancy supervision: query points and ground-truth inside flags."""

    points: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.targets = np.asarray(self.targets, dtype=bool).reshape(-1)
        if len(self.points) != len(self.targets):
            raise ContractError("QueryBatch points and targets differ in length")
        if len(self.points) and np.abs(self.points).max() > QUERY_BOUND + 1e-12:
            raise ContractError(f"Query points must lie inside [-{QUERY_BOUND}, {QUERY_BOUND}]^3")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def occupied_fraction(self) -> float:
        return float(self.targets.mean()) if len(self.targets) else 0.0


def surface_points(mesh: TriMesh, n: int, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Area-weighted surface samples as raw (points, normals, face index) arrays.

    Unlike ``sample_surface`` the mesh may extend beyond [-1, 1]³.

    Raises:
        GeometryError: If the mesh has no positive area.
    """
    if n <= 0:
        raise ContractError(f"Sample count must be positive, got {n}")
    areas = mesh.face_areas() if not mesh.is_empty else np.zeros(0)
    total = float(areas.sum())
    if total <= 0.0:
        raise GeometryError("Cannot sample a mesh with zero surface area")

    rng = np.random.default_rng(seed)
    faces = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (corner[faces] for corner in mesh.corners())
    points = (1.0 - r1)[:, None] * a + (r1 * (1.0 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return points, mesh.face_normals()[faces], faces


def sample_surface(mesh: TriMesh, n: int, seed: int) -> PointCloud:
    """Draw ``n`` area-weighted surface points with face normals (see ``surface_points``)."""
    return PointCloud(*surface_points(mesh, n, seed))


def fps(cloud: PointCloud | np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point sampling.

    Starts at ``seed_index`` and repeatedly adds the point whose distance to
    the nearest selected point is largest; ties go to the lowest index.

    Returns:
        Selected indices in selection order (length ``k``).

    Raises:
        ContractError: If ``k`` is outside ``1..N`` or the seed is invalid.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = len(points)
    if not 1 <= k <= n:
        raise ContractError(f"fps needs 1 <= k <= N, got k={k}, N={n}")
    if not 0 <= seed_index < n:
        raise ContractError(f"fps seed index {seed_index} outside 0..{n - 1}")

    selected = np.empty(k, dtype=np.int64)
    selected[0] = seed_index
    nearest = np.sum((points - points[seed_index]) ** 2, axis=1)
    nearest[seed_index] = -1.0
    for i in range(1, k):
        pick = int(np.argmax(nearest))
        selected[i] = pick
        d = np.sum((points - points[pick]) ** 2, axis=1)
        nearest = np.minimum(nearest, d)
        nearest[selected[: i + 1]] = -1.0
    return selected


def uniform_chain(n: int, k: int, seed: int) -> np.ndarray:
    """Random selection order; prefixes are nested like an FPS chain."""
    if not 1 <= k <= n:
        raise ContractError(f"uniform chain needs 1 <= k <= N, got k={k}, N={n}")
    return np.random.default_rng(seed).permutation(n)[:k]


def build_query_batch(
    mesh: TriMesh,
    q_uniform: int,
    q_near: int,
    sigma: float,
    seed: int,
) -> QueryBatch:
    """Uniform volume points plus jittered near-surface points, labelled by ray parity.

    Near-surface points are surface samples moved along their normal by
    Gaussian noise of scale ``sigma`` and clipped to the query domain.

    Raises:
        GeometryError: If the mesh is not watertight.
    """
    if q_uniform < 0 or q_near < 0 or q_uniform + q_near == 0:
        raise ContractError("Query batch needs a positive number of points")
    require_watertight(mesh, "query mesh")
    rng = np.random.default_rng(seed)
    parts = []
    if q_uniform:
        parts.append(rng.uniform(-1.0, 1.0, size=(q_uniform, 3)))
    if q_near:
        surface = sample_surface(mesh, q_near, int(rng.integers(2**31)))
        jitter = rng.normal(0.0, 1.0, size=(q_near, 1)) * sigma
        parts.append(np.clip(surface.points + jitter * surface.normals, -QUERY_BOUND, QUERY_BOUND))
    points = np.concatenate(parts)
    return QueryBatch(points, contains(mesh, points, check=False))
