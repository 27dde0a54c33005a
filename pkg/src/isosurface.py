"""
Isosurface extraction from sampled scalar fields.

Fields are sampled on the vertices of a regular lattice spanning
``[lo, hi]³``; ``lattice_points`` yields those vertices in the flattening
order that ``marching_cubes`` expects back.
"""

from __future__ import annotations

import logging

import numpy as np
from skimage import measure

from src.errors import ContractError
from src.mesh import TriMesh

logger = logging.getLogger("mars.isosurface")


def lattice_points(resolution: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """(r³, 3) lattice vertices, x slowest and z fastest."""
    if resolution < 2:
        raise ContractError(f"Lattice needs at least 2 samples per axis, got {resolution}")
    axis = np.linspace(lo, hi, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def marching_cubes(field: np.ndarray, iso: float = 0.5, lo: float = -1.0, hi: float = 1.0) -> TriMesh:
    """Triangulate the ``iso`` level set of a lattice field.

    The output is wound so that its signed volume is non-negative, whichever
    side of the level the field treats as inside. A field that never crosses
    ``iso`` yields an empty mesh.
    """
    field = np.asarray(field, dtype=np.float64)
    if field.ndim != 3 or min(field.shape) < 2:
        raise ContractError(f"marching_cubes needs a 3-D lattice of extent >= 2, got {field.shape}")
    if not np.isfinite(field).all():
        raise ContractError("marching_cubes field contains non-finite values")
    if field.max() < iso or field.min() > iso:
        return TriMesh.empty()

    spacing = tuple((hi - lo) / (n - 1) for n in field.shape)
    verts, faces, _, _ = measure.marching_cubes(
        field, level=iso, spacing=spacing, allow_degenerate=False
    )
    if len(faces) == 0:
        return TriMesh.empty()
    mesh = TriMesh(verts.astype(np.float64) + lo, faces.astype(np.int64))
    if mesh.signed_volume() < 0:
        mesh = mesh.flipped()
    return mesh


def closed_isosurface(field: np.ndarray, iso: float = 0.5, lo: float = -1.0, hi: float = 1.0) -> TriMesh:
    """Like ``marching_cubes`` but pads the lattice with one layer below ``iso``.

    The surface therefore never touches the lattice boundary and comes out
    closed even when the field is occupied at the border.
    """
    field = np.asarray(field, dtype=np.float64)
    step = (hi - lo) / (field.shape[0] - 1)
    fill = min(float(field.min()), iso) - 1.0
    padded = np.pad(field, 1, mode="constant", constant_values=fill)
    return marching_cubes(padded, iso, lo - step, hi + step)
