"""
Inside/outside oracle and voxel grids.

Occupancy is decided by ray parity: a point is inside a watertight mesh when
a ray from it crosses the surface an odd number of times. Rays that graze an
edge or vertex (barycentric coordinate within ``EDGE_TOLERANCE`` of zero) are
re-cast along perturbed directions; a mesh whose parity still disagrees is
reported as broken rather than guessed.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from src.errors import ContractError, FormatError, GeometryError
from src.mesh import TriMesh, require_watertight
from src.utils import atomic_write

logger = logging.getLogger("mars.occupancy")

EDGE_TOLERANCE = 1e-9
RAY_DIRECTION = np.array([1.0, np.sqrt(2.0), np.pi]) / np.linalg.norm([1.0, np.sqrt(2.0), np.pi])
RETRY_DIRECTIONS = 3
RETRY_SEED = 7919
MAX_PAIRS = 1 << 21

VOXEL_MAGIC = b"MARSVOX1"


def _ray_parity(
    corners: tuple[np.ndarray, np.ndarray, np.ndarray],
    points: np.ndarray,
    direction: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Crossing parity and grazing flag of rays from ``points`` along ``direction``.

    Vectorized Möller-Trumbore over (point, triangle) pairs, chunked so that
    no intermediate exceeds ``MAX_PAIRS`` entries.
    """
    a, b, c = corners
    e1, e2 = b - a, c - a
    h = np.cross(direction, e2)
    det = np.einsum("ij,ij->i", e1, h)
    usable = np.abs(det) > 1e-14
    a, e1, e2, h = a[usable], e1[usable], e2[usable], h[usable]
    inv_det = 1.0 / det[usable]

    parity = np.zeros(len(points), dtype=bool)
    ambiguous = np.zeros(len(points), dtype=bool)
    if len(inv_det) == 0:
        return parity, ambiguous

    chunk = max(1, MAX_PAIRS // len(inv_det))
    tol = EDGE_TOLERANCE
    for start in range(0, len(points), chunk):
        p = points[start:start + chunk]
        s = p[:, None, :] - a[None, :, :]
        u = np.einsum("pfk,fk->pf", s, h) * inv_det
        q = np.cross(s, e1[None, :, :])
        v = (q @ direction) * inv_det
        t = np.einsum("pfk,fk->pf", q, e2) * inv_det
        w = 1.0 - u - v

        ahead = t > 0.0
        hit = ahead & (u > tol) & (v > tol) & (w > tol)
        near = ahead & (u >= -tol) & (v >= -tol) & (w >= -tol) & ~hit
        parity[start:start + chunk] = (hit.sum(axis=1) % 2).astype(bool)
        ambiguous[start:start + chunk] = near.any(axis=1)
    return parity, ambiguous


def contains(mesh: TriMesh, points: np.ndarray, check: bool = True) -> np.ndarray:
    """Vectorized inside test for many points.

    Args:
        mesh: Closed, consistently wound mesh.
        points: (M, 3) query points.
        check: Run the watertight gate first (callers that already did may skip it).

    Returns:
        (M,) boolean array, True where the point is inside.

    Raises:
        GeometryError: If the mesh is not watertight, or a grazing ray cannot
            be resolved because the retry directions disagree.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if check:
        require_watertight(mesh)
    if len(points) == 0:
        return np.zeros(0, dtype=bool)

    corners = mesh.corners()
    inside, ambiguous = _ray_parity(corners, points, RAY_DIRECTION)
    if not ambiguous.any():
        return inside

    pending = np.flatnonzero(ambiguous)
    logger.debug("Re-casting %d grazing rays", len(pending))
    rng = np.random.default_rng(RETRY_SEED)
    votes = np.zeros((RETRY_DIRECTIONS, len(pending)), dtype=np.int8)
    for attempt in range(RETRY_DIRECTIONS):
        direction = RAY_DIRECTION + rng.normal(0.0, 0.25, 3)
        direction /= np.linalg.norm(direction)
        parity, grazing = _ray_parity(corners, points[pending], direction)
        votes[attempt] = np.where(grazing, -1, parity.astype(np.int8))

    resolved = votes >= 0
    says_in = (votes == 1).any(axis=0)
    says_out = (votes == 0).any(axis=0)
    broken = ~resolved.any(axis=0) | (says_in & says_out)
    if broken.any():
        raise GeometryError(
            f"Ray parity inconsistent for {int(broken.sum())} point(s) across "
            f"{RETRY_DIRECTIONS} retry directions; mesh is not watertight"
        )
    inside[pending] = says_in
    return inside


def point_in_mesh(mesh: TriMesh, x: np.ndarray) -> bool:
    """Single-point inside test (see ``contains``)."""
    return bool(contains(mesh, np.asarray(x, dtype=np.float64).reshape(1, 3))[0])


# ── voxel grids ────────────────────────────────────────────────────────
@dataclass
class VoxelGrid:
    """Boolean occupancy on the uniform ``r³`` lattice of cells over [-1, 1]³.

    ``occupancy[i, j, k]`` is the cell whose center is
    ``(-1 + (2i + 1) / r, -1 + (2j + 1) / r, -1 + (2k + 1) / r)``.
    """

    occupancy: np.ndarray

    def __post_init__(self) -> None:
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        r = self.occupancy.shape[0] if self.occupancy.ndim else 0
        if self.occupancy.ndim != 3 or self.occupancy.shape != (r, r, r) or r < 1:
            raise ContractError(f"VoxelGrid needs an r x r x r array, got {self.occupancy.shape}")

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    @property
    def count(self) -> int:
        return int(self.occupancy.sum())

    @classmethod
    def empty(cls, resolution: int) -> "VoxelGrid":
        return cls(np.zeros((resolution,) * 3, dtype=bool))


def cell_centers_1d(resolution: int) -> np.ndarray:
    return -1.0 + (2.0 * np.arange(resolution) + 1.0) / resolution


def lattice_centers(resolution: int) -> np.ndarray:
    """(r³, 3) cell centers in the flattening order of ``VoxelGrid.occupancy``."""
    c = cell_centers_1d(resolution)
    gx, gy, gz = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def voxelize(mesh: TriMesh, resolution: int) -> VoxelGrid:
    """Mark every cell whose center lies inside ``mesh``.

    Cells are resolved a column at a time: the triangles are projected onto
    the xy plane, each column's crossing heights are collected, and parity of
    the crossings above a center decides it. Columns that graze a projected
    edge fall back to ``contains``.

    Raises:
        GeometryError: If the mesh is not watertight.
    """
    if resolution < 1:
        raise ContractError(f"Voxel resolution must be positive, got {resolution}")
    require_watertight(mesh)
    r = int(resolution)
    centers = cell_centers_1d(r)
    gx, gy = np.meshgrid(centers, centers, indexing="ij")
    columns = np.stack([gx.ravel(), gy.ravel()], axis=1)

    a, b, c = mesh.corners()
    e1, e2 = b - a, c - a
    denom = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    slanted = np.abs(denom) > 1e-14
    a, e1, e2, denom = a[slanted], e1[slanted], e2[slanted], denom[slanted]

    crossings = np.zeros((len(columns), r + 1), dtype=np.int64)
    grazing = np.zeros(len(columns), dtype=bool)
    tol = EDGE_TOLERANCE
    chunk = max(1, MAX_PAIRS // max(len(denom), 1))
    for start in range(0, len(columns), chunk):
        col = columns[start:start + chunk]
        dx = col[:, None, 0] - a[None, :, 0]
        dy = col[:, None, 1] - a[None, :, 1]
        u = (dx * e2[None, :, 1] - dy * e2[None, :, 0]) / denom
        v = (e1[None, :, 0] * dy - e1[None, :, 1] * dx) / denom
        w = 1.0 - u - v
        hit = (u > tol) & (v > tol) & (w > tol)
        near = (u >= -tol) & (v >= -tol) & (w >= -tol) & ~hit
        grazing[start:start + chunk] = near.any(axis=1)

        rows, faces = np.nonzero(hit)
        z = a[faces, 2] + u[rows, faces] * e1[faces, 2] + v[rows, faces] * e2[faces, 2]
        # a crossing at height z flips every cell whose center lies below it
        below = np.searchsorted(centers, z, side="left")
        np.add.at(crossings, (rows + start, np.zeros_like(rows)), 1)
        np.add.at(crossings, (rows + start, below), -1)

    counts = np.cumsum(crossings[:, :r], axis=1)
    occupancy = (counts % 2).astype(bool)

    if grazing.any():
        idx = np.flatnonzero(grazing)
        pts = np.concatenate(
            [np.repeat(columns[idx], r, axis=0), np.tile(centers, len(idx))[:, None]], axis=1
        )
        occupancy[idx] = contains(mesh, pts, check=False).reshape(len(idx), r)
        logger.debug("voxelize: %d of %d columns resolved by the generic ray test", len(idx), len(columns))

    return VoxelGrid(occupancy.reshape(r, r, r))


def downsample_grid(grid: VoxelGrid, factor: int) -> VoxelGrid:
    """Majority-vote each ``factor³`` block; half or more occupied counts as occupied.

    Raises:
        ContractError: If the resolution is not divisible by ``factor``.
    """
    r = grid.resolution
    if factor < 1 or r % factor:
        raise ContractError(f"Resolution {r} is not divisible by {factor}")
    coarse = r // factor
    blocks = grid.occupancy.reshape(coarse, factor, coarse, factor, coarse, factor)
    counts = blocks.sum(axis=(1, 3, 5))
    return VoxelGrid(2 * counts >= factor ** 3)


def save_voxels(grid: VoxelGrid, path: str | Path) -> Path:
    """Write ``MARSVOX1`` + u32 resolution + r³ bytes (0/1), little-endian."""
    payload = VOXEL_MAGIC + struct.pack("<I", grid.resolution) + grid.occupancy.astype(np.uint8).tobytes()
    with atomic_write(path, "wb") as f:
        f.write(payload)
    return Path(path)


def load_voxels(path: str | Path) -> VoxelGrid:
    """Read a grid written by ``save_voxels``.

    Raises:
        FormatError: On wrong magic, truncated payload or non-binary cells.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Voxel file not found: {path.resolve()}")
    raw = path.read_bytes()
    header = len(VOXEL_MAGIC) + 4
    if len(raw) < header:
        raise FormatError(f"{path}: truncated voxel header")
    if raw[: len(VOXEL_MAGIC)] != VOXEL_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:len(VOXEL_MAGIC)]!r}, expected {VOXEL_MAGIC!r}")
    (r,) = struct.unpack("<I", raw[len(VOXEL_MAGIC):header])
    cells = np.frombuffer(raw, dtype=np.uint8, offset=header)
    if r < 1 or len(cells) != r ** 3:
        raise FormatError(f"{path}: expected {r ** 3} cells, found {len(cells)}")
    if cells.max() > 1:
        raise FormatError(f"{path}: cell values must be 0 or 1")
    return VoxelGrid(cells.reshape(r, r, r).astype(bool))
