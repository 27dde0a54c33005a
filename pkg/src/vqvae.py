"""
Multi-LOD vector-quantized autoencoder over surface point clouds.

A shape is sampled densely, the dense cloud is thinned into nested
level-of-detail (LOD) clouds along one farthest-point chain, and every LOD
cloud is encoded independently: Fourier-encoded points are read by the first
``D_i`` rows of a shared learned query bank through cross-attention, refined
by self-attention and snapped to a shared codebook. A single decoder turns a
zero-padded latent of fixed length ``D_K`` into occupancy probabilities for
arbitrary query points; padded rows are masked out of every attention key set.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from src import tensor as T
from src.errors import ConfigError, ContractError, FormatError
from src.mesh import TriMesh
from src.metrics import occupancy_accuracy, occupancy_iou
from src.nn import CrossAttentionBlock, LayerNorm, Linear, Module, SelfAttentionBlock, bce_loss
from src.sampling import PointCloud, QueryBatch, build_query_batch, fps, sample_surface, uniform_chain
from src.tensor import Tensor, as_tensor, no_grad
from src.utils import atomic_write

logger = logging.getLogger("mars.vqvae")

DOWNSAMPLING_STRATEGIES = ("fps", "uniform")
DECODE_CHUNK = 4096


# ── configuration ──────────────────────────────────────────────────────
@dataclass(frozen=True)
class LodSchedule:
    """Point and latent counts per LOD plus the shared feature width.

    Attributes:
        points_per_lod: Cloud sizes N_1 < ... < N_K; N_K is the dense sample.
        latents_per_lod: Token counts D_1 < ... < D_K; D_K is the padded length.
        feature_dim: Latent and codebook width C.
    """

    points_per_lod: tuple[int, ...] = (64, 256, 1024, 4096)
    latents_per_lod: tuple[int, ...] = (8, 32, 128, 512)
    feature_dim: int = 128

    def __post_init__(self) -> None:
        object.__setattr__(self, "points_per_lod", tuple(int(n) for n in self.points_per_lod))
        object.__setattr__(self, "latents_per_lod", tuple(int(d) for d in self.latents_per_lod))
        points, latents = self.points_per_lod, self.latents_per_lod
        if not points or len(points) != len(latents):
            raise ConfigError(f"Schedule needs matching non-empty point/latent lists, got {points} / {latents}")
        for name, counts in (("points_per_lod", points), ("latents_per_lod", latents)):
            if counts[0] < 1 or any(b <= a for a, b in zip(counts, counts[1:])):
                raise ConfigError(f"schedule.{name} must be positive and strictly increasing, got {list(counts)}")
        if self.feature_dim < 1:
            raise ConfigError(f"schedule.feature_dim must be positive, got {self.feature_dim}")

    @property
    def n_lods(self) -> int:
        return len(self.points_per_lod)

    @property
    def padded_length(self) -> int:
        return self.latents_per_lod[-1]

    @property
    def dense_points(self) -> int:
        return self.points_per_lod[-1]

    def check_lod(self, lod: int) -> int:
        """Validate a 1-based LOD and return its 0-based index."""
        if not 1 <= lod <= self.n_lods:
            raise ContractError(f"LOD must be in 1..{self.n_lods}, got {lod}")
        return lod - 1

    def to_dict(self) -> dict[str, Any]:
        return {
            "points_per_lod": list(self.points_per_lod),
            "latents_per_lod": list(self.latents_per_lod),
            "feature_dim": self.feature_dim,
        }

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "LodSchedule":
        return cls(
            points_per_lod=tuple(values["points_per_lod"]),
            latents_per_lod=tuple(values["latents_per_lod"]),
            feature_dim=int(values["feature_dim"]),
        )

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "LodSchedule":
        return cls.from_dict(config["schedule"])


@dataclass(frozen=True)
class VqVaeConfig:
    """Architecture and loss settings of the autoencoder (config section ``vqvae``)."""

    codebook_size: int = 512
    pe_bands: int = 8
    heads: int = 4
    encoder_self_blocks: int = 4
    decoder_self_blocks: int = 4
    ff_mult: int = 2
    head_hidden: int = 128
    commitment_weight: float = 0.25
    lod_weights: tuple[float, ...] | None = None
    ema_decay: float = 0.99
    dead_code_steps: int = 200
    downsampling: str = "fps"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.lod_weights is not None:
            object.__setattr__(self, "lod_weights", tuple(float(w) for w in self.lod_weights))
            if any(w < 0 for w in self.lod_weights) or not any(w > 0 for w in self.lod_weights):
                raise ConfigError(f"vqvae.lod_weights must be non-negative with one positive entry, got {self.lod_weights}")
        if self.codebook_size < 1:
            raise ConfigError(f"vqvae.codebook_size must be positive, got {self.codebook_size}")
        if self.downsampling not in DOWNSAMPLING_STRATEGIES:
            raise ConfigError(f"vqvae.downsampling must be one of {DOWNSAMPLING_STRATEGIES}, got '{self.downsampling}'")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"vqvae.ema_decay must be in (0, 1), got {self.ema_decay}")
        if self.commitment_weight < 0:
            raise ConfigError("vqvae.commitment_weight must be non-negative")

    def resolved_weights(self, n_lods: int) -> np.ndarray:
        """Per-LOD BCE weights w_i (all ones unless configured)."""
        if self.lod_weights is None:
            return np.ones(n_lods)
        if len(self.lod_weights) != n_lods:
            raise ConfigError(f"vqvae.lod_weights has {len(self.lod_weights)} entries for {n_lods} LODs")
        return np.asarray(self.lod_weights, dtype=np.float64)

    def to_dict(self) -> dict[str, Any]:
        values = asdict(self)
        values["lod_weights"] = None if self.lod_weights is None else list(self.lod_weights)
        return values

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "VqVaeConfig":
        values = dict(values)
        if values.get("lod_weights") is not None:
            values["lod_weights"] = tuple(values["lod_weights"])
        return cls(**values)

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "VqVaeConfig":
        return cls.from_dict(config["vqvae"])


# ── positional encoding ────────────────────────────────────────────────
def fourier_pe(points: np.ndarray, bands: int = 8) -> np.ndarray:
    """Raw xyz followed by sin and cos of ``2^j π x`` for j = 0..bands-1.

    Returns:
        (M, 3 + 6 * bands) features: ``[xyz | sin (j-major, axis-minor) | cos (same)]``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    freqs = (2.0 ** np.arange(bands)) * np.pi
    angles = (points[:, None, :] * freqs[None, :, None]).reshape(len(points), 3 * bands)
    return np.concatenate([points, np.sin(angles), np.cos(angles)], axis=1)


def pe_width(bands: int) -> int:
    return 3 + 6 * bands


# ── codebook ───────────────────────────────────────────────────────────
class Codebook(Module):
    """Shared table of V code vectors learned by exponential moving averages.

    Every tensor here is a buffer: the optimizer never touches it. Codes move
    only through ``ema_update`` and ``revive_dead_codes``.
    """

    def __init__(
        self,
        size: int,
        dim: int,
        rng: np.random.Generator,
        decay: float = 0.99,
        dead_code_steps: int = 200,
    ) -> None:
        self.embedding = Tensor(rng.normal(0.0, 1.0, (size, dim)))
        self.ema_count = Tensor(np.zeros(size))
        self.ema_sum = Tensor(np.zeros((size, dim)))
        self.usage = Tensor(np.zeros(size, dtype=np.int64), dtype=np.int64)
        self.idle_steps = Tensor(np.zeros(size, dtype=np.int64), dtype=np.int64)
        self._decay = decay
        self._dead_code_steps = dead_code_steps

    @property
    def size(self) -> int:
        return self.embedding.shape[0]

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def forward(self, indices: np.ndarray) -> np.ndarray:
        return self.lookup(indices)

    def lookup(self, indices: np.ndarray) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.size):
            raise ContractError(f"Code index out of range [0, {self.size})")
        return self.embedding.data[indices]

    def nearest(self, rows: np.ndarray) -> np.ndarray:
        """Index of the closest code (squared L2) per row; ties go to the lowest index."""
        rows = np.asarray(rows).reshape(-1, self.dim)
        codes = self.embedding.data
        out = np.empty(len(rows), dtype=np.int64)
        chunk = max(1, (1 << 22) // codes.size)
        for start in range(0, len(rows), chunk):
            diff = rows[start:start + chunk, None, :] - codes[None, :, :]
            out[start:start + chunk] = np.argmin(np.einsum("nvc,nvc->nv", diff, diff), axis=1)
        return out

    def ema_update(self, rows: np.ndarray, indices: np.ndarray) -> np.ndarray:
        """Move each used code towards the mean of the rows assigned to it.

        Codes that received no row keep their value and EMA state.

        Returns:
            Per-code assignment counts of this update (they sum to ``len(rows)``).
        """
        rows = np.asarray(rows, dtype=np.float64).reshape(-1, self.dim)
        indices = np.asarray(indices, dtype=np.int64)
        counts = np.bincount(indices, minlength=self.size)
        sums = np.zeros((self.size, self.dim))
        np.add.at(sums, indices, rows)
        used = counts > 0

        d = self._decay
        ema_count = self.ema_count.data.astype(np.float64)
        ema_sum = self.ema_sum.data.astype(np.float64)
        embedding = self.embedding.data.copy()
        ema_count[used] = d * ema_count[used] + (1.0 - d) * counts[used]
        ema_sum[used] = d * ema_sum[used] + (1.0 - d) * sums[used]
        embedding[used] = ema_sum[used] / ema_count[used][:, None]

        dtype = self.embedding.dtype
        self.ema_count.data = ema_count.astype(dtype)
        self.ema_sum.data = ema_sum.astype(dtype)
        self.embedding.data = embedding.astype(dtype)
        self.usage.data = self.usage.data + counts
        self.idle_steps.data = np.where(used, 0, self.idle_steps.data + 1)
        return counts

    def dead_codes(self) -> np.ndarray:
        return np.flatnonzero(self.idle_steps.data >= self._dead_code_steps)

    def revive_dead_codes(self, candidates: np.ndarray, rng: np.random.Generator) -> int:
        """Re-seed codes idle for ``dead_code_steps`` updates with random encoder rows."""
        dead = self.dead_codes()
        if len(dead) == 0 or len(candidates) == 0:
            return 0
        picks = np.asarray(candidates)[rng.integers(0, len(candidates), size=len(dead))]
        embedding = self.embedding.data.copy()
        ema_sum = self.ema_sum.data.copy()
        ema_count = self.ema_count.data.copy()
        idle = self.idle_steps.data.copy()
        embedding[dead] = picks
        ema_sum[dead] = picks
        ema_count[dead] = 1.0
        idle[dead] = 0
        self.embedding.data, self.ema_sum.data = embedding, ema_sum
        self.ema_count.data, self.idle_steps.data = ema_count, idle
        return len(dead)

    @staticmethod
    def perplexity(counts: np.ndarray) -> float:
        """exp(entropy) of the assignment histogram; V means perfectly even use."""
        counts = np.asarray(counts, dtype=np.float64)
        total = counts.sum()
        if total == 0:
            return 0.0
        p = counts[counts > 0] / total
        return float(np.exp(-(p * np.log(p)).sum()))


# ── token maps ─────────────────────────────────────────────────────────
@dataclass
class LodTokenMap:
    """Code indices of one LOD.

    Attributes:
        lod: 1-based level of detail.
        indices: D_i code indices in [0, V).
        codebook_size: V; the pad id is V itself.
    """

    lod: int
    indices: np.ndarray
    codebook_size: int

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        if self.lod < 1:
            raise ContractError(f"LOD indices are 1-based, got {self.lod}")
        if len(self.indices) == 0:
            raise ContractError("Token map needs at least one token")
        if self.indices.min() < 0 or self.indices.max() >= self.codebook_size:
            raise ContractError(f"Token indices must lie in [0, {self.codebook_size})")

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def pad_id(self) -> int:
        return self.codebook_size


def pad_tokens(token_map: LodTokenMap, schedule: LodSchedule) -> np.ndarray:
    """Index view of a token map padded to D_K with the pad id."""
    i = schedule.check_lod(token_map.lod)
    if len(token_map) != schedule.latents_per_lod[i]:
        raise ContractError(
            f"LOD {token_map.lod} map has {len(token_map)} tokens, schedule expects {schedule.latents_per_lod[i]}"
        )
    padded = np.full(schedule.padded_length, token_map.pad_id, dtype=np.int64)
    padded[: len(token_map)] = token_map.indices
    return padded


def embed_tokens(padded: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Code rows for a padded index view; pad positions become zero rows."""
    padded = np.asarray(padded, dtype=np.int64)
    is_pad = padded == codebook.size
    rows = codebook.lookup(np.where(is_pad, 0, padded))
    rows[is_pad] = 0.0
    return rows


def pad_latent(latent: Tensor, length: int) -> Tensor:
    """Append zero rows so that ``latent`` has ``length`` rows."""
    missing = length - latent.shape[0]
    if missing < 0:
        raise ContractError(f"Latent has {latent.shape[0]} rows, more than the padded length {length}")
    if missing == 0:
        return latent
    zeros = as_tensor(np.zeros((missing, latent.shape[1])), like=latent)
    return T.concat([latent, zeros], axis=0)


@dataclass
class QuantizeResult:
    """Output of ``quantize``.

    Attributes:
        token_map: Nearest-code indices.
        latent: Code rows, wired straight-through to the encoder output.
        commitment: Mean of ``(S - stopgrad(code))²`` over all entries.
        rows: Pre-quantization rows (input of the EMA update).
    """

    token_map: LodTokenMap
    latent: Tensor
    commitment: Tensor
    rows: np.ndarray


def quantize(latent: Tensor, codebook: Codebook, lod: int) -> QuantizeResult:
    """Snap every latent row to its nearest code with a straight-through gradient."""
    indices = codebook.nearest(latent.data)
    codes = codebook.lookup(indices).astype(latent.dtype)
    quantized = T.straight_through(latent, codes)
    diff = latent - codes
    commitment = (diff * diff).mean()
    token_map = LodTokenMap(lod=lod, indices=indices, codebook_size=codebook.size)
    return QuantizeResult(token_map=token_map, latent=quantized, commitment=commitment, rows=latent.data.copy())


# ── model ──────────────────────────────────────────────────────────────
class VqVaeModel(Module):
    """Point-cloud encoder, shared codebook and padded occupancy decoder."""

    def __init__(self, schedule: LodSchedule, config: VqVaeConfig | None = None) -> None:
        config = config or VqVaeConfig()
        rng = np.random.default_rng(config.seed)
        width = schedule.feature_dim
        self.query_bank = Tensor(rng.normal(0.0, 1.0, (schedule.padded_length, width)), requires_grad=True)
        self.point_proj = Linear(pe_width(config.pe_bands) + 3, width, rng)
        self.encoder_cross = CrossAttentionBlock(width, config.heads, rng, ff_mult=config.ff_mult)
        self.encoder_blocks = [
            SelfAttentionBlock(width, config.heads, rng, config.ff_mult)
            for _ in range(config.encoder_self_blocks)
        ]
        self.latent_norm = LayerNorm(width)
        self.codebook = Codebook(config.codebook_size, width, rng, config.ema_decay, config.dead_code_steps)
        self.decoder_blocks = [
            SelfAttentionBlock(width, config.heads, rng, config.ff_mult)
            for _ in range(config.decoder_self_blocks)
        ]
        self.query_proj = Linear(pe_width(config.pe_bands), width, rng)
        self.decoder_cross = CrossAttentionBlock(width, config.heads, rng, ff_mult=config.ff_mult)
        self.head_hidden = Linear(width, config.head_hidden, rng)
        self.head_out = Linear(config.head_hidden, 1, rng)
        self._schedule = schedule
        self._config = config

    @property
    def schedule(self) -> LodSchedule:
        return self._schedule

    @property
    def config(self) -> VqVaeConfig:
        return self._config

    def forward(self, cloud: PointCloud, lod: int) -> Tensor:
        return self.encode(cloud, lod)

    def encode(self, cloud: PointCloud, lod: int) -> Tensor:
        """Latent rows (D_i, C) of an LOD cloud.

        Raises:
            ContractError: If the cloud size differs from the schedule's N_i.
        """
        i = self._schedule.check_lod(lod)
        expected = self._schedule.points_per_lod[i]
        if len(cloud) != expected:
            raise ContractError(f"LOD {lod} expects {expected} points, got {len(cloud)}")
        features = np.concatenate([fourier_pe(cloud.points, self._config.pe_bands), cloud.normals], axis=1)
        points = self.point_proj(as_tensor(features, like=self.query_bank))
        x = self.encoder_cross(self.query_bank[: self._schedule.latents_per_lod[i]], points)
        for block in self.encoder_blocks:
            x = block(x)
        return self.latent_norm(x)

    def decode_context(self, latent: Tensor, valid: int | None = None) -> Tensor:
        """Self-attention stack over latent rows; rows from ``valid`` on are masked keys."""
        length = latent.shape[0]
        valid = length if valid is None else valid
        if not 1 <= valid <= length:
            raise ContractError(f"Valid row count {valid} outside 1..{length}")
        mask = None if valid == length else np.broadcast_to(np.arange(length) < valid, (length, length))
        x = latent
        for block in self.decoder_blocks:
            x = block(x, mask=mask)
        return x

    def query_logits(self, context: Tensor, points: np.ndarray, valid: int | None = None) -> Tensor:
        """Occupancy logits of ``points`` given a processed latent context."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        length = context.shape[0]
        valid = length if valid is None else valid
        mask = None if valid == length else np.broadcast_to(np.arange(length) < valid, (len(points), length))
        queries = self.query_proj(as_tensor(fourier_pe(points, self._config.pe_bands), like=context))
        h = self.decoder_cross(queries, context, mask=mask)
        logits = self.head_out(T.gelu(self.head_hidden(h)))
        return logits.reshape(len(points))

    def occupancy_logits(self, latent: Tensor, points: np.ndarray, valid: int | None = None) -> Tensor:
        """Decode a latent of any length; keys from ``valid`` on are ignored."""
        return self.query_logits(self.decode_context(latent, valid), points, valid)


def decode_occupancy(latent: Tensor, valid: int, points: np.ndarray, model: VqVaeModel) -> Tensor:
    """Occupancy probabilities from a latent padded to D_K.

    Raises:
        ContractError: If ``latent`` does not have exactly D_K rows.
    """
    if latent.shape[0] != model.schedule.padded_length:
        raise ContractError(
            f"Decoder needs a latent padded to {model.schedule.padded_length} rows, got {latent.shape[0]}"
        )
    return T.sigmoid(model.occupancy_logits(latent, points, valid))


# ── training samples and losses ────────────────────────────────────────
@dataclass
class LodSample:
    """Everything one loss evaluation needs for one shape: K clouds and K query batches."""

    clouds: list[PointCloud]
    queries: list[QueryBatch]
    seed: int


@dataclass
class VaeLossResult:
    """Loss of one sample.

    Attributes:
        total: Scalar tensor Σ w_i BCE_i + λ Σ commit_i.
        bce: Per-LOD binary cross-entropy values.
        commitment: Per-LOD commitment values.
        assignments: (rows, indices) per LOD for the codebook EMA update.
        probabilities: Per-LOD predicted occupancy of the query points.
    """

    total: Tensor
    bce: list[float] = field(default_factory=list)
    commitment: list[float] = field(default_factory=list)
    assignments: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    probabilities: list[np.ndarray] = field(default_factory=list)


def lod_clouds(mesh: TriMesh, schedule: LodSchedule, seed: int, downsampling: str = "fps") -> list[PointCloud]:
    """Dense surface sample and its nested LOD prefixes (coarsest first).

    The LOD-i cloud is the first N_i points of one selection chain over the
    dense cloud, so every LOD cloud is contained in the next finer one.
    """
    dense = sample_surface(mesh, schedule.dense_points, seed)
    if schedule.n_lods == 1:
        return [dense]
    k = schedule.points_per_lod[-2]
    if downsampling == "fps":
        order = fps(dense, k, 0)
    elif downsampling == "uniform":
        order = uniform_chain(len(dense), k, seed)
    else:
        raise ConfigError(f"Unknown downsampling strategy '{downsampling}'")
    return [dense.subset(order[:n]) for n in schedule.points_per_lod[:-1]] + [dense]


def prepare_sample(
    mesh: TriMesh,
    schedule: LodSchedule,
    seed: int,
    q_uniform: int = 1024,
    q_near: int = 1024,
    sigma: float = 0.01,
    downsampling: str = "fps",
) -> LodSample:
    """Clouds plus per-LOD query batches; jitter grows as σ·(N_K / N_i)^(1/3) for coarser LODs."""
    clouds = lod_clouds(mesh, schedule, seed, downsampling)
    seeds = np.random.default_rng(seed).integers(0, 2**31, size=schedule.n_lods)
    queries = [
        build_query_batch(mesh, q_uniform, q_near, sigma * (schedule.dense_points / n) ** (1.0 / 3.0), int(s))
        for n, s in zip(schedule.points_per_lod, seeds)
    ]
    return LodSample(clouds=clouds, queries=queries, seed=seed)


def sample_loss(
    model: VqVaeModel,
    sample: LodSample,
    weights: Sequence[float] | None = None,
    commitment_weight: float | None = None,
) -> VaeLossResult:
    """Geometry-consistency loss over all LODs of one prepared sample.

    LODs with zero weight are still decoded (without gradient) so that their
    BCE can be monitored; they contribute only their commitment term.
    """
    schedule = model.schedule
    w = np.asarray(weights, dtype=np.float64) if weights is not None else model.config.resolved_weights(schedule.n_lods)
    lam = model.config.commitment_weight if commitment_weight is None else commitment_weight
    total: Tensor | None = None
    bces: list[float] = []
    commits: list[float] = []
    assignments: list[tuple[np.ndarray, np.ndarray]] = []
    probabilities: list[np.ndarray] = []
    for i in range(schedule.n_lods):
        q = quantize(model.encode(sample.clouds[i], i + 1), model.codebook, i + 1)
        padded = pad_latent(q.latent, schedule.padded_length)
        batch = sample.queries[i]
        if w[i] > 0:
            probs = decode_occupancy(padded, len(q.token_map), batch.points, model)
            bce = bce_loss(probs, batch.targets)
            term = bce * w[i] + q.commitment * lam
        else:
            with no_grad():
                probs = decode_occupancy(padded, len(q.token_map), batch.points, model)
                bce = bce_loss(probs, batch.targets)
            term = q.commitment * lam
        total = term if total is None else total + term
        bces.append(bce.item())
        commits.append(q.commitment.item())
        assignments.append((q.rows, q.token_map.indices))
        probabilities.append(probs.data.copy())
    return VaeLossResult(total, bces, commits, assignments, probabilities)


def vae_loss(
    mesh: TriMesh,
    model: VqVaeModel,
    seed: int,
    q_uniform: int = 1024,
    q_near: int = 1024,
    sigma: float = 0.01,
) -> VaeLossResult:
    """Sample ``mesh`` and evaluate ``sample_loss`` on it."""
    sample = prepare_sample(
        mesh, model.schedule, seed, q_uniform, q_near, sigma, model.config.downsampling
    )
    return sample_loss(model, sample)


# ── inference ──────────────────────────────────────────────────────────
def tokenize_clouds(clouds: Sequence[PointCloud], model: VqVaeModel) -> list[LodTokenMap]:
    with no_grad():
        return [
            LodTokenMap(lod=i + 1, indices=model.codebook.nearest(model.encode(cloud, i + 1).data), codebook_size=model.codebook.size)
            for i, cloud in enumerate(clouds)
        ]


def tokenize_shape(mesh: TriMesh, model: VqVaeModel, seed: int) -> list[LodTokenMap]:
    """K token maps of ``mesh``, coarsest first; deterministic per seed."""
    clouds = lod_clouds(mesh, model.schedule, seed, model.config.downsampling)
    maps = tokenize_clouds(clouds, model)
    logger.debug("Tokenized shape into %s tokens", [len(m) for m in maps])
    return maps


def decode_tokens(token_map: LodTokenMap, model: VqVaeModel, points: np.ndarray, chunk: int = DECODE_CHUNK) -> np.ndarray:
    """Occupancy probabilities of ``points`` from stored token indices."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    rows = embed_tokens(pad_tokens(token_map, model.schedule), model.codebook)
    valid = len(token_map)
    out = np.empty(len(points))
    with no_grad():
        context = model.decode_context(as_tensor(rows, like=model.query_bank), valid)
        for start in range(0, len(points), chunk):
            logits = model.query_logits(context, points[start:start + chunk], valid)
            out[start:start + chunk] = T.sigmoid(logits).data
    return out


def reconstruction_metrics(model: VqVaeModel, sample: LodSample, lod: int) -> dict[str, float]:
    """Occupancy accuracy and query-set IOU of the quantized LOD reconstruction."""
    i = model.schedule.check_lod(lod)
    token_map = tokenize_clouds([sample.clouds[i]], model)[0]
    token_map.lod = lod
    batch = sample.queries[i]
    probs = decode_tokens(token_map, model, batch.points)
    return {
        "accuracy": occupancy_accuracy(probs, batch.targets),
        "iou": occupancy_iou(probs, batch.targets),
    }


# ── token-map files ────────────────────────────────────────────────────
def save_token_maps(maps: Sequence[LodTokenMap], schedule: LodSchedule, path: str | Path) -> Path:
    """Write ``{"schedule": ..., "codebook_size": V, "lods": [{"lod", "indices"}]}``."""
    if not maps:
        raise ContractError("No token maps to save")
    for token_map in maps:
        pad_tokens(token_map, schedule)
    payload = {
        "schedule": schedule.to_dict(),
        "codebook_size": maps[0].codebook_size,
        "lods": [{"lod": m.lod, "indices": m.indices.tolist()} for m in maps],
    }
    with atomic_write(path) as f:
        json.dump(payload, f, indent=2)
    return Path(path)


def load_token_maps(path: str | Path) -> tuple[LodSchedule, list[LodTokenMap]]:
    """Read a token-map file and validate every map against its schedule.

    Raises:
        FormatError: If the file is not a token-map document.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Token-map file not found: {path.resolve()}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        schedule = LodSchedule.from_dict(payload["schedule"])
        size = int(payload["codebook_size"])
        maps = [LodTokenMap(lod=int(e["lod"]), indices=np.asarray(e["indices"]), codebook_size=size) for e in payload["lods"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a token-map file ({exc})") from exc
    for token_map in maps:
        pad_tokens(token_map, schedule)
    return schedule, maps
