"""
Unit tests for dataset generation and manifest loading.
"""

import json
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.dataset import MANIFEST_NAME, build_dataset, load_manifest
from src.errors import ContractError, FormatError, GeometryError
from src.mesh import is_watertight

SUBDIVISIONS = 4


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Eight pairs built once for the whole module."""
    root = tmp_path_factory.mktemp("data")
    build_dataset(8, seed=5, out_dir=root, subdivisions=SUBDIVISIONS)
    return root


# ── Generation Tests ───────────────────────────────────────────────────────

class TestBuildDataset:
    """Tests for writing a dataset directory."""

    def test_files_and_manifest(self, dataset_dir: Path) -> None:
        assert (dataset_dir / MANIFEST_NAME).exists()
        assert len(list(dataset_dir.glob("*.detailed.obj"))) == 8
        assert len(list(dataset_dir.glob("*.coarse.obj"))) == 8

    def test_families_are_balanced(self, dataset_dir: Path) -> None:
        """Eight shapes over four families gives two of each."""
        manifest = load_manifest(dataset_dir)
        assert manifest.family_counts() == {"box": 2, "superellipsoid": 2, "sphere": 2, "extruded-polygon": 2}

    def test_same_seed_same_manifest(self, dataset_dir: Path, tmp_path: Path) -> None:
        """Generation is a pure function of the seed."""
        build_dataset(8, seed=5, out_dir=tmp_path, subdivisions=SUBDIVISIONS)
        first = json.loads((dataset_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
        second = json.loads((tmp_path / MANIFEST_NAME).read_text(encoding="utf-8"))
        assert first == second
        assert (dataset_dir / "shape_003.detailed.obj").read_text() == (tmp_path / "shape_003.detailed.obj").read_text()

    def test_paths_are_relative(self, dataset_dir: Path) -> None:
        payload = json.loads((dataset_dir / MANIFEST_NAME).read_text(encoding="utf-8"))
        assert payload["version"] == 1
        assert payload["shapes"][0]["detailed"] == "shape_000.detailed.obj"

    def test_schedule_is_recorded(self, tmp_path: Path) -> None:
        schedule = {"points_per_lod": [8, 16], "latents_per_lod": [2, 4], "feature_dim": 8}
        manifest = build_dataset(1, seed=0, out_dir=tmp_path, schedule=schedule, subdivisions=SUBDIVISIONS)
        assert load_manifest(tmp_path).schedule == schedule
        assert len(manifest) == 1

    def test_zero_shapes_rejected(self, tmp_path: Path) -> None:
        with pytest.raises(ContractError):
            build_dataset(0, seed=0, out_dir=tmp_path)

    def test_frame_summary(self, dataset_dir: Path) -> None:
        frame = load_manifest(dataset_dir).to_frame()
        assert list(frame.columns) == ["shape_id", "family", "detail", "amplitude", "seed"]
        assert len(frame) == 8
        assert (frame["amplitude"] > 0).all()


# ── Loading Tests ──────────────────────────────────────────────────────────

class TestLoadManifest:
    """Tests for reading and validating manifests."""

    def test_load_by_file_or_directory(self, dataset_dir: Path) -> None:
        by_dir = load_manifest(dataset_dir)
        by_file = load_manifest(dataset_dir / MANIFEST_NAME)
        assert [e.shape_id for e in by_dir] == [e.shape_id for e in by_file]
        assert by_dir.seed == 5

    def test_validated_meshes_are_watertight(self, dataset_dir: Path) -> None:
        manifest = load_manifest(dataset_dir, validate=True)
        entry = manifest.entries[0]
        assert is_watertight(entry.load_detailed())
        assert is_watertight(entry.load_coarse())

    def test_missing_manifest(self, tmp_path: Path) -> None:
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path)

    def test_missing_mesh_file(self, tmp_path: Path) -> None:
        build_dataset(1, seed=1, out_dir=tmp_path, subdivisions=SUBDIVISIONS)
        (tmp_path / "shape_000.coarse.obj").unlink()
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path)

    def test_malformed_manifest(self, tmp_path: Path) -> None:
        (tmp_path / MANIFEST_NAME).write_text('{"shapes": [{"id": "a"}]}', encoding="utf-8")
        with pytest.raises(FormatError):
            load_manifest(tmp_path)

    def test_duplicate_ids(self, tmp_path: Path) -> None:
        build_dataset(2, seed=1, out_dir=tmp_path, subdivisions=SUBDIVISIONS)
        payload = json.loads((tmp_path / MANIFEST_NAME).read_text(encoding="utf-8"))
        payload["shapes"][1]["id"] = payload["shapes"][0]["id"]
        (tmp_path / MANIFEST_NAME).write_text(json.dumps(payload), encoding="utf-8")
        with pytest.raises(FormatError):
            load_manifest(tmp_path)

    def test_empty_manifest(self, tmp_path: Path) -> None:
        (tmp_path / MANIFEST_NAME).write_text('{"seed": 0, "shapes": []}', encoding="utf-8")
        with pytest.raises(FormatError):
            load_manifest(tmp_path)

    def test_broken_mesh_fails_validation(self, tmp_path: Path) -> None:
        build_dataset(1, seed=1, out_dir=tmp_path, subdivisions=SUBDIVISIONS)
        path = tmp_path / "shape_000.detailed.obj"
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(GeometryError):
            load_manifest(tmp_path, validate=True)
