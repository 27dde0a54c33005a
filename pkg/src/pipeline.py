"""
End-to-end flows: detailize a coarse mesh, reconstruct a mesh through one
LOD of the tokenizer, and evaluate an output against its coarse input.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Any

from src.ar import ArModel, GenerationResult, SamplerConfig, generate
from src.errors import ConfigError, ContractError, EmptyIsosurfaceWarning
from src.isosurface import closed_isosurface, lattice_points
from src.mesh import TriMesh, require_watertight
from src.metrics import f_score, loose_iou, strict_iou
from src.occupancy import VoxelGrid, downsample_grid, voxelize
from src.sampling import QUERY_BOUND, surface_points
from src.vqvae import LodTokenMap, VqVaeModel, decode_tokens, tokenize_shape

logger = logging.getLogger("mars.pipeline")

DECODE_LATTICE = 64
ISO_LEVEL = 0.5
EVAL_FIELDS = ("strict_iou", "loose_iou", "f_score", "resolution", "tau", "seeds")


def mesh_from_tokens(token_map: LodTokenMap, model: VqVaeModel, lattice: int = DECODE_LATTICE) -> TriMesh:
    """Decode one token map on a ``lattice³`` grid over the query domain and mesh it at 0.5.

    An empty result is returned with an ``EmptyIsosurfaceWarning``.
    """
    points = lattice_points(lattice, -QUERY_BOUND, QUERY_BOUND)
    probs = decode_tokens(token_map, model, points)
    mesh = closed_isosurface(probs.reshape(lattice, lattice, lattice), ISO_LEVEL, -QUERY_BOUND, QUERY_BOUND)
    if mesh.is_empty:
        message = f"Decoded LOD {token_map.lod} field never reaches occupancy {ISO_LEVEL}; output mesh is empty"
        logger.warning(message)
        warnings.warn(message, EmptyIsosurfaceWarning, stacklevel=2)
    return mesh


def check_models(vqvae: VqVaeModel, ar: ArModel) -> None:
    if vqvae.schedule != ar.schedule:
        raise ConfigError("VQVAE and AR models were built for different LOD schedules")
    if vqvae.codebook.size != ar.codebook_size:
        raise ConfigError(f"Codebook size mismatch: VQVAE V={vqvae.codebook.size}, AR V={ar.codebook_size}")


@dataclass
class DetailizeResult:
    """Output of one detailization.

    Attributes:
        mesh: Final-LOD mesh.
        token_maps: All K token maps (first ``prefix_length`` from the input).
        prefix_length: Number of coarse blocks kept from the input (j).
        lod_meshes: Mesh per 1-based LOD when requested.
        generation: Raw generation output (logits and cache).
    """

    mesh: TriMesh
    token_maps: list[LodTokenMap]
    prefix_length: int
    lod_meshes: dict[int, TriMesh] = field(default_factory=dict)
    generation: GenerationResult | None = None


def detailize(
    coarse_mesh: TriMesh,
    vqvae: VqVaeModel,
    ar: ArModel,
    sampler: SamplerConfig,
    j: int | None = None,
    emit_lods: bool = False,
    tokenize_seed: int = 0,
    lattice: int = DECODE_LATTICE,
) -> DetailizeResult:
    """Keep the coarsest ``j`` token blocks of the input and generate the rest.

    Args:
        coarse_mesh: Watertight input mesh.
        vqvae: Tokenizer and decoder.
        ar: Next-LOD model trained on ``vqvae``'s tokens.
        sampler: Sampling settings; ``j`` defaults to ``sampler.prefix_length``.
        j: Number of conditioning blocks, in 0..K-1.
        emit_lods: Also decode and mesh every LOD.
        tokenize_seed: Seed of the input's surface sampling.
        lattice: Decode lattice resolution per axis.

    Raises:
        GeometryError: If the input is not watertight.
        ConfigError: If the two models do not belong together.
        ContractError: If ``j`` is outside 0..K-1.
    """
    require_watertight(coarse_mesh, "input mesh")
    check_models(vqvae, ar)
    n_lods = vqvae.schedule.n_lods
    j = sampler.prefix_length(n_lods) if j is None else j
    if not 0 <= j < n_lods:
        raise ContractError(f"Conditioning depth must be in 0..{n_lods - 1}, got {j}")

    coarse_maps = tokenize_shape(coarse_mesh, vqvae, tokenize_seed)
    generation = generate(coarse_maps[:j], ar, sampler)
    maps = generation.token_maps
    logger.info("Detailizing: kept %d of %d blocks, generated %d tokens", j, n_lods, sum(len(m) for m in maps[j:]))

    mesh = mesh_from_tokens(maps[-1], vqvae, lattice)
    lod_meshes = {}
    if emit_lods:
        lod_meshes = {m.lod: (mesh if m.lod == n_lods else mesh_from_tokens(m, vqvae, lattice)) for m in maps}
    return DetailizeResult(mesh=mesh, token_maps=maps, prefix_length=j, lod_meshes=lod_meshes, generation=generation)


def detailize_samples(
    coarse_mesh: TriMesh,
    vqvae: VqVaeModel,
    ar: ArModel,
    sampler: SamplerConfig,
    samples: int,
    **kwargs: Any,
) -> list[DetailizeResult]:
    """Several detailizations of one input with sampler seeds ``seed, seed + 1, ...``."""
    if samples < 1:
        raise ContractError(f"samples must be positive, got {samples}")
    return [
        detailize(coarse_mesh, vqvae, ar, replace(sampler, seed=sampler.seed + k), **kwargs)
        for k in range(samples)
    ]


def reconstruct(mesh: TriMesh, vqvae: VqVaeModel, lod: int, seed: int = 0, lattice: int = DECODE_LATTICE) -> TriMesh:
    """Tokenize ``mesh`` and mesh the decoded field of one 1-based LOD."""
    index = vqvae.schedule.check_lod(lod)
    require_watertight(mesh, "input mesh")
    maps = tokenize_shape(mesh, vqvae, seed)
    return mesh_from_tokens(maps[index], vqvae, lattice)


# ── evaluation ─────────────────────────────────────────────────────────
@dataclass
class EvalReport:
    strict_iou: float
    loose_iou: float
    f_score: float
    resolution: int
    tau: float
    seeds: list[int]

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class EvalGrids:
    """The three voxel grids the IOUs are computed from."""

    input_grid: VoxelGrid
    output_fine: VoxelGrid
    output_grid: VoxelGrid


def evaluation_grids(coarse_mesh: TriMesh, output_mesh: TriMesh, resolution: int) -> EvalGrids:
    """Both meshes voxelized at 2r then majority-downsampled to r.

    The input and output go through the same path, so a mesh compared with
    itself gives identical grids.
    """
    fine = voxelize(output_mesh, 2 * resolution)
    return EvalGrids(
        input_grid=downsample_grid(voxelize(coarse_mesh, 2 * resolution), 2),
        output_fine=fine,
        output_grid=downsample_grid(fine, 2),
    )


def evaluate(
    coarse_mesh: TriMesh,
    output_mesh: TriMesh,
    resolution: int = 32,
    tau: float = 0.02,
    samples: int = 10_000,
    seed: int = 0,
    grids: EvalGrids | None = None,
) -> EvalReport:
    """Strict-IOU, Loose-IOU and F-score of ``output_mesh`` against ``coarse_mesh``.

    Both surfaces are sampled with the same seed, so identical meshes score
    exactly 1.

    Raises:
        GeometryError: If either mesh is not watertight.
    """
    require_watertight(coarse_mesh, "input mesh")
    require_watertight(output_mesh, "output mesh")
    grids = grids or evaluation_grids(coarse_mesh, output_mesh, resolution)
    gen_points, _, _ = surface_points(output_mesh, samples, seed)
    ref_points, _, _ = surface_points(coarse_mesh, samples, seed)
    report = EvalReport(
        strict_iou=strict_iou(grids.input_grid, grids.output_grid),
        loose_iou=loose_iou(grids.input_grid, grids.output_grid),
        f_score=f_score(gen_points, ref_points, tau),
        resolution=resolution,
        tau=tau,
        seeds=[seed],
    )
    logger.info(
        "Evaluation at r=%d: strict %.3f, loose %.3f, F %.3f",
        resolution, report.strict_iou, report.loose_iou, report.f_score,
    )
    return report

