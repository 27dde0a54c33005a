"""
Desk-scale ablation studies of the tokenizer.

Each study trains paired VQVAEs that differ in exactly one setting and
reports per-LOD reconstruction quality on the training shapes. Every
variant is trained once per training seed and its rows are averaged over
runs and evaluation seeds:

- ``consistency``: BCE on every LOD versus on the final LOD only.
- ``codebook``: several codebook sizes V.
- ``downsampling``: FPS chains versus uniformly random chains.
"""

from __future__ import annotations

import copy
import logging
from typing import Any, Sequence

import pandas as pd

from src.dataset import DatasetManifest
from src.errors import ConfigError
from src.reporting import smoothed_curve
from src.training import TrainConfig, train_vqvae
from src.utils import merge_config
from src.vqvae import LodSchedule, VqVaeModel, prepare_sample, reconstruction_metrics

logger = logging.getLogger("mars.experiments")

STUDIES = ("consistency", "codebook", "downsampling")
BCE_WINDOW = 100


def variant_config(config: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    """Deep copy of ``config`` with validated section overrides applied."""
    return merge_config(copy.deepcopy(config), overrides)


def evaluate_lods(
    model: VqVaeModel,
    manifest: DatasetManifest,
    config: dict[str, Any],
    lods: Sequence[int],
    eval_seeds: Sequence[int],
) -> pd.DataFrame:
    """Reconstruction accuracy and IOU per (shape, seed, LOD) on fresh query batches."""
    tc = TrainConfig.from_config(config, "train_vqvae")
    rows = []
    for entry in manifest:
        mesh = entry.load_detailed()
        for seed in eval_seeds:
            sample = prepare_sample(
                mesh, model.schedule, int(seed), tc.q_uniform, tc.q_near, tc.surface_sigma, model.config.downsampling
            )
            for lod in lods:
                metrics = reconstruction_metrics(model, sample, lod)
                rows.append({"shape_id": entry.shape_id, "seed": int(seed), "lod": lod, **metrics})
    return pd.DataFrame(rows, columns=["shape_id", "seed", "lod", "accuracy", "iou"])


def seeded_config(config: dict[str, Any], overrides: dict[str, Any], train_seed: int) -> dict[str, Any]:
    """``variant_config`` with the tokenizer init and training seeds set to ``train_seed``."""
    sections = copy.deepcopy(overrides)
    sections.setdefault("vqvae", {})["seed"] = int(train_seed)
    sections.setdefault("train_vqvae", {})["seed"] = int(train_seed)
    return variant_config(config, sections)


def final_bce(history: pd.DataFrame) -> pd.DataFrame:
    """Per-LOD BCE at the last step, smoothed over the trailing ``BCE_WINDOW`` steps."""
    curve = smoothed_curve(history, "bce", window=BCE_WINDOW)
    tail = curve.iloc[-1]
    return pd.DataFrame({"lod": tail.index.astype(int), "bce": tail.to_numpy(dtype=float)})


def _train_variant(
    manifest: DatasetManifest,
    config: dict[str, Any],
    overrides: dict[str, Any],
    lods: Sequence[int],
    eval_seeds: Sequence[int],
    train_seeds: Sequence[int],
    quiet: bool,
    with_bce: bool = False,
) -> tuple[pd.DataFrame, pd.DataFrame | None]:
    """Metrics (and final BCE) of one variant over every training seed."""
    metrics, bces = [], []
    for train_seed in train_seeds:
        run_config = seeded_config(config, overrides, train_seed)
        result = train_vqvae(manifest, run_config, quiet=quiet)
        metrics.append(evaluate_lods(result.model, manifest, run_config, lods, eval_seeds).assign(run=int(train_seed)))
        if with_bce:
            bces.append(final_bce(result.history))
    bce = pd.concat(bces).groupby("lod", as_index=False)["bce"].mean() if with_bce else None
    return pd.concat(metrics, ignore_index=True), bce


def _summarize(variant: str, metrics: pd.DataFrame) -> pd.DataFrame:
    summary = metrics.groupby("lod", as_index=False)[["accuracy", "iou"]].mean()
    summary.insert(0, "variant", variant)
    summary["runs"] = metrics["run"].nunique() if "run" in metrics else 1
    return summary


def consistency_study(
    manifest: DatasetManifest,
    config: dict[str, Any],
    eval_seeds: Sequence[int],
    train_seeds: Sequence[int] = (0,),
    quiet: bool = False,
) -> pd.DataFrame:
    """Uniform LOD weights against a one-hot weight on the final LOD."""
    n_lods = LodSchedule.from_config(config).n_lods
    variants = {
        "uniform": [1.0] * n_lods,
        "final-only": [0.0] * (n_lods - 1) + [1.0],
    }
    frames = []
    for name, weights in variants.items():
        metrics, bce = _train_variant(
            manifest, config, {"vqvae": {"lod_weights": weights}},
            range(1, n_lods + 1), eval_seeds, train_seeds, quiet, with_bce=True,
        )
        frames.append(_summarize(name, metrics).merge(bce, on="lod"))
    return pd.concat(frames, ignore_index=True)


def codebook_study(
    manifest: DatasetManifest,
    config: dict[str, Any],
    sizes: Sequence[int],
    eval_seeds: Sequence[int],
    train_seeds: Sequence[int] = (0,),
    quiet: bool = False,
) -> pd.DataFrame:
    """Final-LOD reconstruction quality for each codebook size."""
    n_lods = LodSchedule.from_config(config).n_lods
    frames = []
    for size in sizes:
        metrics, _ = _train_variant(
            manifest, config, {"vqvae": {"codebook_size": int(size)}}, [n_lods], eval_seeds, train_seeds, quiet
        )
        summary = _summarize(f"V={size}", metrics)
        summary.insert(1, "codebook_size", int(size))
        frames.append(summary)
    return pd.concat(frames, ignore_index=True)


def downsampling_study(
    manifest: DatasetManifest,
    config: dict[str, Any],
    eval_seeds: Sequence[int],
    train_seeds: Sequence[int] = (0,),
    quiet: bool = False,
) -> pd.DataFrame:
    """Mid-LOD reconstruction with FPS chains against uniform random chains."""
    mid = (LodSchedule.from_config(config).n_lods + 1) // 2
    frames = []
    for strategy in ("fps", "uniform"):
        metrics, _ = _train_variant(
            manifest, config, {"vqvae": {"downsampling": strategy}}, [mid], eval_seeds, train_seeds, quiet
        )
        frames.append(_summarize(strategy, metrics))
    return pd.concat(frames, ignore_index=True)


def run_ablation(
    study: str,
    manifest: DatasetManifest,
    config: dict[str, Any],
    eval_seeds: int = 5,
    codebook_sizes: Sequence[int] = (64, 256),
    train_seeds: int = 3,
    quiet: bool = False,
) -> pd.DataFrame:
    """Dispatch one study by name.

    Every variant is trained ``train_seeds`` times, with seeds counting up
    from the configured ``train_vqvae.seed``.

    Raises:
        ConfigError: If ``study`` is unknown or ``train_seeds`` is not positive.
    """
    if study not in STUDIES:
        raise ConfigError(f"Unknown ablation study '{study}'; expected one of {STUDIES}")
    if train_seeds < 1:
        raise ConfigError(f"train_seeds must be at least 1, got {train_seeds}")
    seeds = list(range(1000, 1000 + eval_seeds))
    base = int(config["train_vqvae"]["seed"])
    runs = list(range(base, base + train_seeds))
    logger.info(
        "Running %s ablation on %d shapes, %d training seeds, %d evaluation seeds",
        study, len(manifest), len(runs), len(seeds),
    )
    if study == "consistency":
        return consistency_study(manifest, config, seeds, runs, quiet)
    if study == "codebook":
        return codebook_study(manifest, config, codebook_sizes, seeds, runs, quiet)
    return downsampling_study(manifest, config, seeds, runs, quiet)
