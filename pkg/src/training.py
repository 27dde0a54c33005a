"""
Training loops for the multi-LOD VQVAE and the next-LOD transformer.

Both loops are single-writer: one process owns the model, draws batches from
a seeded generator and writes checkpoints at a fixed cadence. Per-step
losses are collected into pandas frames so that they can be written as CSV
and compared across ablation runs.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd

from src.ar import ArConfig, ArModel, ar_loss
from src.checkpoint import Checkpoint, ar_checkpoint, restore_vqvae, save_checkpoint, vqvae_checkpoint
from src.dataset import DatasetManifest
from src.errors import ConfigError, NumericalError, TrainingError
from src.optim import Adam
from src.reporting import training_progress
from src.tensor import Tensor, backward, default_dtype
from src.vqvae import (
    Codebook,
    LodSample,
    LodSchedule,
    LodTokenMap,
    VqVaeConfig,
    VqVaeModel,
    prepare_sample,
    sample_loss,
    tokenize_shape,
)

logger = logging.getLogger("mars.training")

PRECISIONS = ("float32", "float64")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings of one training loop (``train_vqvae`` or ``train_ar``).

    Loss weights (λ_vq, w_i), V and the schedule live in the ``vqvae`` and
    ``schedule`` sections; this holds what the loop itself needs.
    """

    steps: int = 2000
    batch_size: int = 2
    lr: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 500
    log_every: int = 50
    precision: str = "float32"
    q_uniform: int = 1024
    q_near: int = 1024
    surface_sigma: float = 0.01
    variants_per_shape: int = 2
    include_coarse: bool = True
    tokenize_seed: int = 0

    def __post_init__(self) -> None:
        for name in ("steps", "batch_size", "checkpoint_every", "log_every", "q_uniform", "variants_per_shape"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.q_near < 0:
            raise ConfigError(f"q_near must be non-negative, got {self.q_near}")
        if not self.lr > 0 or not self.surface_sigma > 0:
            raise ConfigError("lr and surface_sigma must be positive")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got '{self.precision}'")

    @classmethod
    def from_config(cls, config: dict[str, Any], section: str) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in config[section].items() if k in known})


@dataclass
class TrainResult:
    """Trained model, its final checkpoint and the per-step loss history."""

    model: VqVaeModel | ArModel
    checkpoint: Checkpoint
    history: pd.DataFrame
    elapsed: float


def _batch(rng: np.random.Generator, population: int, size: int) -> np.ndarray:
    return rng.choice(population, size=size, replace=size > population)


def _check_finite(loss: Tensor, step: int) -> None:
    if not np.isfinite(loss.item()):
        raise TrainingError(f"loss diverged to {loss.item()}", step)


# ── VQVAE ──────────────────────────────────────────────────────────────
def prepare_training_samples(
    manifest: DatasetManifest,
    schedule: LodSchedule,
    tc: TrainConfig,
    downsampling: str,
) -> list[LodSample]:
    """Clouds and query batches for every shape variant, drawn once up front."""
    meshes = []
    for entry in manifest:
        meshes.append(entry.load_detailed())
        if tc.include_coarse:
            meshes.append(entry.load_coarse())
    seeds = np.random.default_rng(tc.seed).integers(0, 2**31, size=(len(meshes), tc.variants_per_shape))
    samples = [
        prepare_sample(mesh, schedule, int(seed), tc.q_uniform, tc.q_near, tc.surface_sigma, downsampling)
        for mesh, row in zip(meshes, seeds)
        for seed in row
    ]
    logger.info("Prepared %d training samples from %d meshes", len(samples), len(meshes))
    return samples


def train_vqvae(
    manifest: DatasetManifest,
    config: dict[str, Any],
    out_path: str | Path | None = None,
    samples: list[LodSample] | None = None,
    quiet: bool = False,
) -> TrainResult:
    """Adam over the geometry-consistency loss, EMA over the codebook.

    Args:
        manifest: Training shapes.
        config: Full configuration (``schedule``, ``vqvae``, ``train_vqvae``).
        out_path: Checkpoint path, rewritten every ``checkpoint_every`` steps.
        samples: Pre-built samples (shared between ablation runs).
        quiet: Hide the progress bar.

    Raises:
        TrainingError: If the loss becomes non-finite (carries the step).
    """
    schedule = LodSchedule.from_config(config)
    vq_config = VqVaeConfig.from_config(config)
    tc = TrainConfig.from_config(config, "train_vqvae")
    weights = vq_config.resolved_weights(schedule.n_lods)
    start = time.time()

    with default_dtype(tc.precision):
        model = VqVaeModel(schedule, vq_config)
        optimizer = Adam(model.named_parameters(), lr=tc.lr)
        if samples is None:
            samples = prepare_training_samples(manifest, schedule, tc, vq_config.downsampling)
        rng = np.random.default_rng(tc.seed)
        rows: list[dict[str, Any]] = []
        logger.info(
            "Training VQVAE: %d steps, batch %d, %d parameters, V=%d, weights %s",
            tc.steps, tc.batch_size, model.num_parameters(), vq_config.codebook_size, weights.tolist(),
        )

        with training_progress(quiet) as progress:
            task = progress.add_task("train-vqvae", total=tc.steps, status="")
            for step in range(1, tc.steps + 1):
                batch = _batch(rng, len(samples), tc.batch_size)
                optimizer.zero_grad()
                try:
                    results = [sample_loss(model, samples[i], weights) for i in batch]
                    total = results[0].total
                    for result in results[1:]:
                        total = total + result.total
                    loss = total * (1.0 / len(results))
                    _check_finite(loss, step)
                    backward(loss)
                except NumericalError as exc:
                    raise TrainingError(str(exc), step) from exc
                optimizer.step()

                encoded = np.concatenate([r for result in results for r, _ in result.assignments])
                assigned = np.concatenate([idx for result in results for _, idx in result.assignments])
                counts = model.codebook.ema_update(encoded, assigned)
                revived = model.codebook.revive_dead_codes(encoded, rng)
                if revived:
                    logger.warning("Step %d: revived %d dead codes", step, revived)

                for lod in range(schedule.n_lods):
                    rows.append({
                        "step": step,
                        "lod": lod + 1,
                        "bce": float(np.mean([r.bce[lod] for r in results])),
                        "commit": float(np.mean([r.commitment[lod] for r in results])),
                    })

                if step % tc.log_every == 0 or step == tc.steps:
                    recent = rows[-schedule.n_lods:]
                    logger.info(
                        "step %d/%d loss %.4f bce %s perplexity %.1f",
                        step, tc.steps, loss.item(), " ".join(f"{r['bce']:.3f}" for r in recent),
                        Codebook.perplexity(counts),
                    )
                if out_path is not None and step % tc.checkpoint_every == 0 and step < tc.steps:
                    save_checkpoint(vqvae_checkpoint(model, optimizer, {"seed": tc.seed, "step": step}), out_path)
                progress.update(task, advance=1, status=f"loss {loss.item():.4f}")

    ckpt = vqvae_checkpoint(model, optimizer, {"seed": tc.seed, "step": tc.steps})
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    elapsed = time.time() - start
    logger.info("VQVAE training finished in %.1fs", elapsed)
    return TrainResult(model=model, checkpoint=ckpt, history=pd.DataFrame(rows, columns=["step", "lod", "bce", "commit"]), elapsed=elapsed)


# ── token cache ────────────────────────────────────────────────────────
class TokenCache:
    """Token maps keyed by (shape id, VQVAE checkpoint digest, tokenize seed)."""

    def __init__(self) -> None:
        self._store: dict[tuple[str, str, int], list[LodTokenMap]] = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, key: tuple[str, str, int]) -> bool:
        return key in self._store

    def get(self, shape_id: str, digest: str, seed: int, tokenize: Callable[[], list[LodTokenMap]]) -> list[LodTokenMap]:
        key = (shape_id, digest, seed)
        if key in self._store:
            self.hits += 1
        else:
            self.misses += 1
            self._store[key] = tokenize()
        return self._store[key]


def tokenize_manifest(
    manifest: DatasetManifest,
    vqvae: VqVaeModel,
    digest: str,
    seed: int,
    cache: TokenCache,
) -> list[list[LodTokenMap]]:
    """Token maps of every detailed shape, through the cache."""
    return [
        cache.get(entry.shape_id, digest, seed, lambda entry=entry: tokenize_shape(entry.load_detailed(), vqvae, seed))
        for entry in manifest
    ]


# ── next-LOD transformer ───────────────────────────────────────────────
def train_ar(
    manifest: DatasetManifest,
    vqvae_ckpt: Checkpoint,
    config: dict[str, Any],
    out_path: str | Path | None = None,
    cache: TokenCache | None = None,
    quiet: bool = False,
) -> TrainResult:
    """Tokenize every shape once with the frozen VQVAE, then minimize ``ar_loss``.

    The loss CSV of this loop has columns ``step,loss``.

    Raises:
        ConfigError: If the VQVAE checkpoint's schedule differs from ``config``.
        TrainingError: If the loss becomes non-finite.
    """
    schedule = LodSchedule.from_config(config)
    if vqvae_ckpt.schedule != schedule:
        raise ConfigError(
            f"VQVAE checkpoint schedule {vqvae_ckpt.schedule.to_dict()} differs from the configured {schedule.to_dict()}"
        )
    ar_config = ArConfig.from_config(config)
    tc = TrainConfig.from_config(config, "train_ar")
    cache = cache if cache is not None else TokenCache()
    digest = vqvae_ckpt.digest()
    start = time.time()

    with default_dtype(tc.precision):
        vqvae = restore_vqvae(vqvae_ckpt)
        sequences = tokenize_manifest(manifest, vqvae, digest, tc.tokenize_seed, cache)
        logger.info("Token cache: %d hits, %d misses", cache.hits, cache.misses)

        model = ArModel(schedule, vqvae_ckpt.codebook_size, ar_config)
        optimizer = Adam(model.named_parameters(), lr=tc.lr)
        rng = np.random.default_rng(tc.seed)
        rows: list[dict[str, Any]] = []
        logger.info("Training AR model: %d steps, batch %d, %d parameters", tc.steps, tc.batch_size, model.num_parameters())

        with training_progress(quiet) as progress:
            task = progress.add_task("train-ar", total=tc.steps, status="")
            for step in range(1, tc.steps + 1):
                batch = _batch(rng, len(sequences), tc.batch_size)
                optimizer.zero_grad()
                try:
                    losses = [ar_loss(sequences[i], model) for i in batch]
                    total = losses[0]
                    for extra in losses[1:]:
                        total = total + extra
                    loss = total * (1.0 / len(losses))
                    _check_finite(loss, step)
                    backward(loss)
                except NumericalError as exc:
                    raise TrainingError(str(exc), step) from exc
                optimizer.step()
                rows.append({"step": step, "loss": loss.item()})

                if step % tc.log_every == 0 or step == tc.steps:
                    logger.info("step %d/%d ar_loss %.4f", step, tc.steps, loss.item())
                if out_path is not None and step % tc.checkpoint_every == 0 and step < tc.steps:
                    save_checkpoint(ar_checkpoint(model, digest, optimizer, {"seed": tc.seed, "step": step}), out_path)
                progress.update(task, advance=1, status=f"loss {loss.item():.4f}")

    ckpt = ar_checkpoint(model, digest, optimizer, {"seed": tc.seed, "step": tc.steps})
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    elapsed = time.time() - start
    logger.info("AR training finished in %.1fs", elapsed)
    return TrainResult(model=model, checkpoint=ckpt, history=pd.DataFrame(rows, columns=["step", "loss"]), elapsed=elapsed)
