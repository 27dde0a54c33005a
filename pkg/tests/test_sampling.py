"""
Unit tests for surface sampling, farthest-point chains and query batches.
"""

import itertools
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.errors import ContractError, GeometryError
from src.mesh import TriMesh, box_mesh, sphere_mesh
from src.occupancy import contains
from src.sampling import (
    QUERY_BOUND,
    PointCloud,
    build_query_batch,
    fps,
    sample_surface,
    surface_points,
    uniform_chain,
)


def _direct_fps(points: np.ndarray, k: int, start: int) -> list[int]:
    chosen = [start]
    while len(chosen) < k:
        best, best_d = -1, -1.0
        for i in range(len(points)):
            if i in chosen:
                continue
            d = min(float(np.sum((points[i] - points[c]) ** 2)) for c in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return chosen


def _covering_radius(points: np.ndarray, centers: list[int]) -> float:
    return max(min(float(np.linalg.norm(p - points[c])) for c in centers) for p in points)


# ── Surface Sampling Tests ─────────────────────────────────────────────────

class TestSurfaceSampling:
    """Tests for area-weighted surface samples."""

    def setup_method(self) -> None:
        self.box = box_mesh((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5), subdivisions=2)

    def test_points_lie_on_the_box(self) -> None:
        """Every sample has one coordinate at ±0.5."""
        cloud = sample_surface(self.box, 500, seed=3)
        assert len(cloud) == 500
        np.testing.assert_allclose(np.abs(cloud.points).max(axis=1), 0.5, atol=1e-12)

    def test_normals_are_unit_axis_vectors(self) -> None:
        cloud = sample_surface(self.box, 200, seed=3)
        np.testing.assert_allclose(np.linalg.norm(cloud.normals, axis=1), 1.0)
        np.testing.assert_allclose(np.abs(cloud.normals).max(axis=1), 1.0)

    def test_same_seed_same_points(self) -> None:
        """Sampling is a pure function of the seed."""
        a, _, _ = surface_points(self.box, 100, 9)
        b, _, _ = surface_points(self.box, 100, 9)
        c, _, _ = surface_points(self.box, 100, 10)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_out_of_domain_cloud_rejected(self) -> None:
        """PointCloud enforces [-1, 1]³ while raw samples do not."""
        big = box_mesh((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))
        points, _, _ = surface_points(big, 50, 0)
        assert np.abs(points).max() == pytest.approx(1.5)
        with pytest.raises(ContractError):
            sample_surface(big, 50, 0)

    def test_zero_area_mesh_rejected(self) -> None:
        flat = TriMesh(np.zeros((3, 3)), np.array([[0, 1, 2]]))
        with pytest.raises(GeometryError):
            surface_points(flat, 10, 0)

    def test_normals_must_be_unit(self) -> None:
        with pytest.raises(ContractError):
            PointCloud(np.zeros((1, 3)), np.array([[0.0, 0.0, 2.0]]))


# ── Chain Tests ────────────────────────────────────────────────────────────

class TestFarthestPointSampling:
    """Tests for FPS selection order."""

    def test_greedy_order_on_a_line(self) -> None:
        """Farthest first; ties go to the lowest index."""
        points = np.array([[0.0, 0, 0], [1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0], [10.0, 0, 0]])
        np.testing.assert_array_equal(fps(points, 4), [0, 4, 3, 1])

    def test_prefixes_are_nested(self) -> None:
        """A shorter chain is a prefix of a longer one."""
        cloud = sample_surface(sphere_mesh(0.8, 6), 300, seed=1)
        np.testing.assert_array_equal(fps(cloud, 20), fps(cloud, 80)[:20])

    def test_no_repeats(self) -> None:
        cloud = sample_surface(sphere_mesh(0.8, 6), 100, seed=2)
        chain = fps(cloud, 100)
        assert len(np.unique(chain)) == 100

    def test_k_out_of_range(self) -> None:
        with pytest.raises(ContractError):
            fps(np.zeros((5, 3)), 6)
        with pytest.raises(ContractError):
            fps(np.zeros((5, 3)), 0)

    def test_tie_breaks_to_lowest_index(self) -> None:
        points = np.array([[0.0, 0, 0], [1.0, 0, 0], [0.0, 1, 0], [10.0, 10, 10]])
        np.testing.assert_array_equal(fps(points, 3), [0, 3, 1])

    @pytest.mark.parametrize("case", range(60))
    def test_matches_direct_greedy(self, case: int) -> None:
        """Small integer lattices, full of ties, from every start index."""
        rng = np.random.default_rng(case)
        points = rng.integers(0, 3, (int(rng.integers(1, 9)), 3)).astype(np.float64)
        for start in range(len(points)):
            k = int(rng.integers(1, len(points) + 1))
            np.testing.assert_array_equal(fps(points, k, seed_index=start), _direct_fps(points, k, start))

    @pytest.mark.parametrize("case", range(40))
    def test_covering_radius_within_twice_optimal(self, case: int) -> None:
        rng = np.random.default_rng(500 + case)
        points = rng.uniform(-1, 1, (int(rng.integers(3, 11)), 3))
        for k in (1, 2, 3):
            best = min(_covering_radius(points, list(centers)) for centers in itertools.combinations(range(len(points)), k))
            assert _covering_radius(points, list(fps(points, k))) <= 2 * best + 1e-12

    def test_uniform_chain_is_a_permutation_prefix(self) -> None:
        chain = uniform_chain(10, 4, seed=0)
        assert len(chain) == 4
        assert len(set(chain.tolist())) == 4
        np.testing.assert_array_equal(uniform_chain(10, 2, seed=0), chain[:2])


# ── Query Batch Tests ──────────────────────────────────────────────────────

class TestQueryBatch:
    """Tests for occupancy supervision batches."""

    def setup_method(self) -> None:
        self.sphere = sphere_mesh(0.6, 8)

    def test_labels_match_the_oracle(self) -> None:
        """Targets are exactly the ray-parity inside flags."""
        batch = build_query_batch(self.sphere, 200, 200, 0.01, seed=4)
        assert len(batch) == 400
        np.testing.assert_array_equal(batch.targets, contains(self.sphere, batch.points))

    def test_points_inside_query_domain(self) -> None:
        batch = build_query_batch(self.sphere, 100, 100, 0.5, seed=5)
        assert np.abs(batch.points).max() <= QUERY_BOUND

    def test_near_surface_points_are_balanced(self) -> None:
        """Jittered surface points land inside about half of the time."""
        batch = build_query_batch(self.sphere, 0, 1000, 0.01, seed=6)
        assert 0.35 < batch.occupied_fraction < 0.65

    def test_open_mesh_rejected(self) -> None:
        open_mesh = TriMesh(self.sphere.vertices, self.sphere.triangles[2:])
        with pytest.raises(GeometryError):
            build_query_batch(open_mesh, 10, 10, 0.01, seed=0)

    def test_empty_batch_rejected(self) -> None:
        with pytest.raises(ContractError):
            build_query_batch(self.sphere, 0, 0, 0.01, seed=0)
