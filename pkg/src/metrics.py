"""
Shape-comparison metrics: voxel IOUs, point-cloud F-score and occupancy
reconstruction scores.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.spatial import cKDTree

from src.errors import ContractError
from src.occupancy import VoxelGrid
from src.sampling import PointCloud

logger = logging.getLogger("mars.metrics")


def _check_resolutions(a: VoxelGrid, b: VoxelGrid) -> None:
    if a.resolution != b.resolution:
        raise ContractError(f"Voxel resolutions differ: {a.resolution} vs {b.resolution}")


def strict_iou(a: VoxelGrid, b: VoxelGrid) -> float:
    """|A ∩ B| / |A ∪ B|; two empty grids score 1."""
    _check_resolutions(a, b)
    union = int(np.logical_or(a.occupancy, b.occupancy).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(a.occupancy, b.occupancy).sum()) / union


def loose_iou(input_grid: VoxelGrid, output_grid: VoxelGrid) -> float:
    """Share of input-occupied cells that the output also occupies.

    Raises:
        ContractError: If the input grid is empty or resolutions differ.
    """
    _check_resolutions(input_grid, output_grid)
    occupied = input_grid.count
    if occupied == 0:
        raise ContractError("loose_iou is undefined for an empty input grid")
    return int(np.logical_and(input_grid.occupancy, output_grid.occupancy).sum()) / occupied


def _as_points(cloud: PointCloud | np.ndarray) -> np.ndarray:
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ContractError("f_score needs nonempty point sets")
    return points


def f_score(gen: PointCloud | np.ndarray, ref: PointCloud | np.ndarray, tau: float) -> float:
    """Harmonic mean of precision and recall at distance threshold ``tau``.

    Precision is the fraction of ``gen`` points with a ``ref`` point within
    ``tau``; recall is the same with the roles swapped.
    """
    if tau <= 0:
        raise ContractError(f"tau must be positive, got {tau}")
    gen_pts, ref_pts = _as_points(gen), _as_points(ref)
    gen_to_ref, _ = cKDTree(ref_pts).query(gen_pts, k=1)
    ref_to_gen, _ = cKDTree(gen_pts).query(ref_pts, k=1)
    precision = float(np.mean(gen_to_ref <= tau))
    recall = float(np.mean(ref_to_gen <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def occupancy_accuracy(probabilities: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> float:
    """Fraction of query points whose thresholded prediction matches the target."""
    predicted = np.asarray(probabilities) >= threshold
    targets = np.asarray(targets, dtype=bool)
    if predicted.shape != targets.shape or targets.size == 0:
        raise ContractError(f"Prediction/target shape mismatch: {predicted.shape} vs {targets.shape}")
    return float(np.mean(predicted == targets))


def occupancy_iou(probabilities: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> float:
    """IOU between predicted and true inside sets of a query batch (1 when both empty)."""
    predicted = np.asarray(probabilities) >= threshold
    targets = np.asarray(targets, dtype=bool)
    if predicted.shape != targets.shape:
        raise ContractError(f"Prediction/target shape mismatch: {predicted.shape} vs {targets.shape}")
    union = int(np.logical_or(predicted, targets).sum())
    if union == 0:
        return 1.0
    return int(np.logical_and(predicted, targets).sum()) / union
