"""
Dataset module: procedural corpus generation and manifest handling.

A dataset directory holds one detailed and one coarse OBJ per shape plus a
``manifest.json`` listing them. Paths in the manifest are relative to the
manifest's directory so that a dataset can be moved as a whole.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import pandas as pd

from src.errors import ContractError, FormatError, SpecError
from src.mesh import TriMesh, load_obj, require_watertight, save_obj
from src.shapes import DEFAULT_SUBDIVISIONS, FAMILIES, ShapeSpec, gen_shape, random_spec
from src.utils import atomic_write

logger = logging.getLogger("mars.dataset")

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class ManifestEntry:
    """One coarse/detailed pair.

    Attributes:
        shape_id: Unique id, also the OBJ file stem.
        spec: Recipe the pair was generated from.
        detailed_path: Absolute path of the detailed OBJ.
        coarse_path: Absolute path of the coarse OBJ.
    """

    shape_id: str
    spec: ShapeSpec
    detailed_path: Path
    coarse_path: Path

    def load_detailed(self) -> TriMesh:
        return load_obj(self.detailed_path)

    def load_coarse(self) -> TriMesh:
        return load_obj(self.coarse_path)


@dataclass
class DatasetManifest:
    """All pairs of a dataset directory plus the seed that produced them."""

    entries: list[ManifestEntry]
    seed: int
    root: Path
    schedule: dict[str, Any] | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ManifestEntry]:
        return iter(self.entries)

    def family_counts(self) -> dict[str, int]:
        counts = {family: 0 for family in FAMILIES}
        for entry in self.entries:
            counts[entry.spec.family] = counts.get(entry.spec.family, 0) + 1
        return counts

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "schedule": self.schedule,
            "shapes": [
                {
                    "id": e.shape_id,
                    "spec": e.spec.to_dict(),
                    "detailed": e.detailed_path.relative_to(self.root).as_posix(),
                    "coarse": e.coarse_path.relative_to(self.root).as_posix(),
                }
                for e in self.entries
            ],
        }

    def to_frame(self) -> pd.DataFrame:
        """One row per shape: id, family, detail layers and total detail amplitude."""
        rows = [
            {
                "shape_id": e.shape_id,
                "family": e.spec.family,
                "detail": "+".join(d["kind"] for d in e.spec.detail) or "-",
                "amplitude": round(sum(float(d.get("amplitude", 0.0)) for d in e.spec.detail), 4),
                "seed": e.spec.seed,
            }
            for e in self.entries
        ]
        return pd.DataFrame(rows, columns=["shape_id", "family", "detail", "amplitude", "seed"])


def _balanced_families(n_shapes: int, rng: np.random.Generator) -> list[str]:
    names = list(FAMILIES)
    families = [names[i % len(names)] for i in range(n_shapes)]
    return [families[i] for i in rng.permutation(n_shapes)]


def build_dataset(
    n_shapes: int,
    seed: int,
    out_dir: str | Path,
    schedule: dict[str, Any] | None = None,
    subdivisions: int = DEFAULT_SUBDIVISIONS,
) -> DatasetManifest:
    """Generate ``n_shapes`` pairs cycling through the families and write them out.

    Args:
        n_shapes: Number of pairs (positive).
        seed: Global seed; each shape gets its own seed drawn from it.
        out_dir: Target directory, created if missing.
        schedule: Optional schedule recorded in the manifest for reference.
        subdivisions: Cube-lattice subdivisions per face edge.

    Returns:
        The manifest that was written to ``out_dir/manifest.json``.

    Raises:
        ContractError: If ``n_shapes`` is not positive.
        OSError: If ``out_dir`` cannot be created or written.
    """
    if n_shapes < 1:
        raise ContractError(f"n_shapes must be positive, got {n_shapes}")
    root = Path(out_dir).resolve()
    root.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    families = _balanced_families(n_shapes, rng)
    shape_seeds = rng.integers(0, 2**31, size=n_shapes)

    entries: list[ManifestEntry] = []
    for i, (family, shape_seed) in enumerate(zip(families, shape_seeds)):
        shape_id = f"shape_{i:03d}"
        spec = random_spec(family, int(shape_seed))
        detailed, coarse = gen_shape(spec, subdivisions)
        detailed_path = save_obj(detailed, root / f"{shape_id}.detailed.obj")
        coarse_path = save_obj(coarse, root / f"{shape_id}.coarse.obj")
        entries.append(ManifestEntry(shape_id, spec, detailed_path, coarse_path))
        logger.debug("Wrote %s (%s)", shape_id, family)

    manifest = DatasetManifest(entries=entries, seed=seed, root=root, schedule=schedule)
    with atomic_write(root / MANIFEST_NAME) as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
    logger.info("Dataset built: %d shapes in %s (%s)", n_shapes, root, manifest.family_counts())
    return manifest


def load_manifest(path: str | Path, validate: bool = False) -> DatasetManifest:
    """Read a manifest file or the manifest inside a dataset directory.

    Args:
        path: ``manifest.json`` or the directory containing it.
        validate: Also load every mesh and run the watertight gate.

    Raises:
        FileNotFoundError: If the manifest or a referenced OBJ is missing.
        FormatError: If the manifest is malformed or ids repeat.
        GeometryError: If ``validate`` and a mesh is not watertight.
    """
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"Manifest not found: {path.resolve()}")
    root = path.resolve().parent

    logger.info("Loading manifest from: %s", path.resolve())
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        entries = [
            ManifestEntry(
                shape_id=str(item["id"]),
                spec=ShapeSpec.from_dict(item["spec"]),
                detailed_path=root / item["detailed"],
                coarse_path=root / item["coarse"],
            )
            for item in payload["shapes"]
        ]
        manifest = DatasetManifest(entries=entries, seed=int(payload["seed"]), root=root, schedule=payload.get("schedule"))
    except (json.JSONDecodeError, KeyError, TypeError, SpecError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc

    ids = [e.shape_id for e in entries]
    if len(set(ids)) != len(ids):
        raise FormatError(f"{path}: duplicate shape ids")
    if not entries:
        raise FormatError(f"{path}: manifest lists no shapes")
    for entry in entries:
        for mesh_path in (entry.detailed_path, entry.coarse_path):
            if not mesh_path.exists():
                raise FileNotFoundError(f"Manifest entry {entry.shape_id} points to a missing file: {mesh_path}")
    if validate:
        for entry in entries:
            require_watertight(entry.load_detailed(), f"{entry.shape_id} detailed mesh")
            require_watertight(entry.load_coarse(), f"{entry.shape_id} coarse mesh")

    logger.info("Manifest loaded: %d shapes", len(entries))
    return manifest
