"""
Next-LOD autoregressive transformer over token maps.

The sequence is a start position followed by the K token blocks, coarsest
first. A block sees the start position, every earlier block and itself
(block-wise causal attention), and all of its tokens are predicted at once.
The inputs of block b are the embeddings of block b-1's tokens, stretched to
block b's length by nearest-neighbour repetition; every layer is normalized
with AdaLN conditioned on a learned LOD-stage embedding.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from src import tensor as T
from src.errors import ConfigError, ContractError
from src.nn import AdaLayerNorm, Embedding, FeedForward, Linear, Module, MultiHeadAttention, cross_entropy
from src.tensor import Tensor, as_tensor, no_grad
from src.vqvae import LodSchedule, LodTokenMap

logger = logging.getLogger("mars.ar")

TokenBlock = LodTokenMap | np.ndarray | Sequence[int]


@dataclass(frozen=True)
class ArConfig:
    """Transformer size (config section ``ar``)."""

    width: int = 192
    depth: int = 6
    heads: int = 6
    ff_mult: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 1 or self.depth < 1 or self.heads < 1:
            raise ConfigError("ar.width, ar.depth and ar.heads must be positive")
        if self.width % self.heads:
            raise ConfigError(f"ar.width {self.width} is not divisible by ar.heads {self.heads}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "ArConfig":
        return cls(**config["ar"])


@dataclass(frozen=True)
class SamplerConfig:
    """Token sampling settings (config section ``sampler``).

    Attributes:
        temperature: Logit divisor, must be positive.
        top_k: Number of highest logits kept per position.
        seed: Seed of the sampling generator.
        greedy: Take the argmax instead of sampling.
        condition_lods: Coarse blocks kept from the input (None means K - 2).
    """

    temperature: float = 1.0
    top_k: int = 64
    seed: int = 0
    greedy: bool = False
    condition_lods: int | None = None

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ConfigError(f"sampler.temperature must be positive, got {self.temperature}")
        if self.top_k < 1:
            raise ConfigError(f"sampler.top_k must be at least 1, got {self.top_k}")

    def prefix_length(self, n_lods: int) -> int:
        """Number of coarse blocks to condition on, clamped to 0..K-1."""
        j = n_lods - 2 if self.condition_lods is None else self.condition_lods
        return max(0, min(j, n_lods - 1))

    @classmethod
    def from_config(cls, config: dict[str, Any]) -> "SamplerConfig":
        return cls(**config["sampler"])


# ── masks and interfaces between blocks ────────────────────────────────
@dataclass(frozen=True)
class BlockCausalMask:
    """Attention allow-mask over the start position and the token blocks.

    Attributes:
        allowed: (T, T) booleans, ``allowed[q, k]`` iff block(k) <= block(q).
        block_ids: (T,) block of each position; 0 is the start position.
    """

    allowed: np.ndarray
    block_ids: np.ndarray

    @property
    def length(self) -> int:
        return len(self.block_ids)


def block_ids(schedule: LodSchedule, n_blocks: int | None = None) -> np.ndarray:
    n_blocks = schedule.n_lods if n_blocks is None else n_blocks
    ids = [np.zeros(1, dtype=np.int64)]
    ids += [np.full(d, b, dtype=np.int64) for b, d in enumerate(schedule.latents_per_lod[:n_blocks], start=1)]
    return np.concatenate(ids)


def build_block_mask(schedule: LodSchedule, n_blocks: int | None = None) -> BlockCausalMask:
    ids = block_ids(schedule, n_blocks)
    return BlockCausalMask(allowed=ids[None, :] <= ids[:, None], block_ids=ids)


def nearest_source_positions(source_length: int, target_length: int) -> np.ndarray:
    """``floor(j * source_length / target_length)`` for every target position j."""
    return (np.arange(target_length, dtype=np.int64) * source_length) // target_length


# ── kv cache ───────────────────────────────────────────────────────────
class KvCache:
    """Per-layer keys and values of every position processed so far (append-only)."""

    def __init__(self, depth: int) -> None:
        self.keys: list[list[np.ndarray]] = [[] for _ in range(depth)]
        self.values: list[list[np.ndarray]] = [[] for _ in range(depth)]
        self.block_lengths: list[int] = []

    def __len__(self) -> int:
        return sum(self.block_lengths)

    @property
    def depth(self) -> int:
        return len(self.keys)

    def layer(self, index: int) -> tuple[np.ndarray | None, np.ndarray | None]:
        """Cached (heads, L, head_dim) keys and values of one layer."""
        if not self.keys[index]:
            return None, None
        return np.concatenate(self.keys[index], axis=1), np.concatenate(self.values[index], axis=1)

    def append(self, index: int, keys: np.ndarray, values: np.ndarray) -> None:
        self.keys[index].append(keys)
        self.values[index].append(values)

    def commit(self, positions: int) -> None:
        """Close the block just appended to every layer."""
        self.block_lengths.append(positions)
        total = len(self)
        for index in range(self.depth):
            cached = sum(k.shape[1] for k in self.keys[index])
            if cached != total:
                raise ContractError(f"KV cache layer {index} holds {cached} positions, expected {total}")


# ── model ──────────────────────────────────────────────────────────────
class ArBlock(Module):
    """Pre-norm transformer layer with AdaLN on both sublayers."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ff_mult: int = 4) -> None:
        self.norm1 = AdaLayerNorm(dim, dim, rng)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = AdaLayerNorm(dim, dim, rng)
        self.ff = FeedForward(dim, rng, ff_mult)

    def forward(self, x: Tensor, cond: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x, cond), mask=mask)
        return x + self.ff(self.norm2(x, cond))

    def step(self, x: Tensor, cond: Tensor, cache: KvCache, index: int) -> Tensor:
        """Process one whole block against the cached earlier positions."""
        h = self.norm1(x, cond)
        k_new, v_new = self.attn.project_kv(h)
        k_old, v_old = cache.layer(index)
        keys = k_new.data if k_old is None else np.concatenate([k_old, k_new.data], axis=1)
        values = v_new.data if v_old is None else np.concatenate([v_old, v_new.data], axis=1)
        cache.append(index, k_new.data, v_new.data)
        x = x + self.attn.attend(h, as_tensor(keys, like=h), as_tensor(values, like=h))
        return x + self.ff(self.norm2(x, cond))


class ArModel(Module):
    """Decoder-only transformer predicting each LOD block from the coarser ones.

    The token table has V + 1 rows so the pad id can be embedded; the output
    head has V logits only, so the pad id is never predicted.
    """

    def __init__(self, schedule: LodSchedule, codebook_size: int, config: ArConfig | None = None) -> None:
        config = config or ArConfig()
        rng = np.random.default_rng(config.seed)
        width = config.width
        self.token_embedding = Embedding(codebook_size + 1, width, rng)
        self.start_embedding = Tensor(rng.normal(0.0, 0.02, width), requires_grad=True)
        self.position_embeddings = [
            Tensor(rng.normal(0.0, 0.02, (d, width)), requires_grad=True) for d in schedule.latents_per_lod
        ]
        self.stage_embedding = Embedding(schedule.n_lods + 1, width, rng)
        self.blocks = [ArBlock(width, config.heads, rng, config.ff_mult) for _ in range(config.depth)]
        self.final_norm = AdaLayerNorm(width, width, rng)
        self.head = Linear(width, codebook_size, rng)
        self._schedule = schedule
        self._config = config
        self._codebook_size = codebook_size

    @property
    def schedule(self) -> LodSchedule:
        return self._schedule

    @property
    def config(self) -> ArConfig:
        return self._config

    @property
    def codebook_size(self) -> int:
        return self._codebook_size

    @property
    def pad_id(self) -> int:
        return self._codebook_size

    def token_array(self, tokens: TokenBlock, block: int) -> np.ndarray:
        """Validate one block of tokens (1-based ``block``) and return it as int64."""
        values = tokens.indices if isinstance(tokens, LodTokenMap) else np.asarray(tokens, dtype=np.int64)
        expected = self._schedule.latents_per_lod[block - 1]
        if values.shape != (expected,):
            raise ContractError(f"Block {block} needs {expected} tokens, got shape {values.shape}")
        if values.min() < 0 or values.max() >= self._codebook_size:
            raise ContractError(f"Block {block} tokens must lie in [0, {self._codebook_size})")
        return values

    def start_row(self) -> Tensor:
        return self.start_embedding.reshape(1, -1) + self.stage_embedding(np.zeros(1, dtype=np.int64))

    def block_inputs(self, prev_tokens: TokenBlock | None, block: int) -> Tensor:
        """Input rows of ``block`` (1-based) built from the previous block's tokens.

        Raises:
            ContractError: If block 1 is given tokens, a later block is not,
                or the tokens do not fill block ``block - 1``.
        """
        self._schedule.check_lod(block)
        length = self._schedule.latents_per_lod[block - 1]
        if block == 1:
            if prev_tokens is not None:
                raise ContractError("Block 1 is fed by the start embedding, not by tokens")
            base = self.start_embedding.reshape(1, -1) * as_tensor(np.ones((length, 1)), like=self.start_embedding)
        else:
            if prev_tokens is None:
                raise ContractError(f"Block {block} needs the tokens of block {block - 1}")
            prev = self.token_array(prev_tokens, block - 1)
            base = self.token_embedding(prev[nearest_source_positions(len(prev), length)])
        stage = self.stage_embedding(np.full(length, block, dtype=np.int64))
        return base + self.position_embeddings[block - 1] + stage

    def forward(self, token_maps: Sequence[TokenBlock], n_blocks: int | None = None) -> Tensor:
        """Full-pass logits of blocks 1..n_blocks, shape (Σ D_b, V).

        Block b's logits read only blocks < b. ``token_maps`` must hold at
        least ``n_blocks`` complete blocks (default all K).
        """
        n_blocks = self._schedule.n_lods if n_blocks is None else n_blocks
        self._schedule.check_lod(n_blocks)
        if len(token_maps) < n_blocks:
            raise ContractError(f"Need {n_blocks} token blocks, got {len(token_maps)}")
        tokens = [self.token_array(token_maps[b], b + 1) for b in range(n_blocks)]
        rows = [self.start_row()]
        rows += [self.block_inputs(None if b == 1 else tokens[b - 2], b) for b in range(1, n_blocks + 1)]
        x = T.concat(rows, axis=0)
        mask = build_block_mask(self._schedule, n_blocks)
        cond = self.stage_embedding(mask.block_ids)
        for block in self.blocks:
            x = block(x, cond, mask.allowed)
        logits = self.head(self.final_norm(x, cond))
        return logits[1:]

    def _step(self, x: Tensor, cond: Tensor, cache: KvCache) -> np.ndarray:
        for index, block in enumerate(self.blocks):
            x = block.step(x, cond, cache, index)
        cache.commit(x.shape[0])
        return self.head(self.final_norm(x, cond)).data

    def prime(self, cache: KvCache) -> None:
        """Push the start position into an empty cache."""
        if len(cache):
            raise ContractError("Cache must be empty before the start position")
        self._step(self.start_row(), self.stage_embedding(np.zeros(1, dtype=np.int64)), cache)

    def step_block(self, prev_tokens: TokenBlock | None, block: int, cache: KvCache) -> np.ndarray:
        """Logits (D_b, V) of ``block`` using cached keys/values of all earlier positions."""
        expected = 1 + sum(self._schedule.latents_per_lod[: block - 1])
        if len(cache) != expected:
            raise ContractError(f"Cache holds {len(cache)} positions, block {block} needs {expected}")
        x = self.block_inputs(prev_tokens, block)
        cond = self.stage_embedding(np.full(x.shape[0], block, dtype=np.int64))
        return self._step(x, cond, cache)


# ── losses and likelihoods ─────────────────────────────────────────────
def _targets(token_maps: Sequence[TokenBlock], model: ArModel, n_blocks: int) -> np.ndarray:
    return np.concatenate([model.token_array(token_maps[b], b + 1) for b in range(n_blocks)])


def ar_forward(token_maps: Sequence[TokenBlock], model: ArModel) -> Tensor:
    """Full-pass logits of a complete K-block sequence."""
    if len(token_maps) != model.schedule.n_lods:
        raise ContractError(f"Expected {model.schedule.n_lods} token blocks, got {len(token_maps)}")
    return model(token_maps)


def ar_loss(token_maps: Sequence[TokenBlock], model: ArModel) -> Tensor:
    """Mean cross-entropy over every position of every block."""
    logits = ar_forward(token_maps, model)
    return cross_entropy(logits, _targets(token_maps, model, model.schedule.n_lods))


def _picked_logprob(logits: Tensor, targets: np.ndarray) -> np.ndarray:
    logp = T.log_softmax(logits, axis=-1).data
    return logp[np.arange(len(targets)), targets]


def joint_logprob(token_maps: Sequence[TokenBlock], model: ArModel) -> float:
    """Σ_b log p(block b | blocks < b) from one full pass."""
    with no_grad():
        logits = ar_forward(token_maps, model)
        return float(_picked_logprob(logits, _targets(token_maps, model, model.schedule.n_lods)).sum())


def block_logprobs(token_maps: Sequence[TokenBlock], model: ArModel) -> list[float]:
    """Per-block conditionals, each from its own prefix-only forward pass."""
    schedule = model.schedule
    out = []
    with no_grad():
        for b in range(1, schedule.n_lods + 1):
            logits = model(token_maps, n_blocks=b)
            start = sum(schedule.latents_per_lod[: b - 1])
            targets = model.token_array(token_maps[b - 1], b)
            out.append(float(_picked_logprob(logits[start:], targets).sum()))
    return out


# ── sampling ───────────────────────────────────────────────────────────
def sample_tokens(logits: np.ndarray, sampler: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw one token per row with temperature and top-k; greedy or top_k=1 is argmax.

    Exactly ``top_k`` candidates stay in play per row. Among equal logits the
    lower token index ranks first, matching argmax.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if sampler.greedy or sampler.top_k == 1:
        return np.argmax(logits, axis=1).astype(np.int64)
    vocab = logits.shape[1]
    if sampler.top_k > vocab:
        raise ContractError(f"top_k {sampler.top_k} exceeds the vocabulary size {vocab}")
    scaled = logits / sampler.temperature
    if sampler.top_k < vocab:
        keep = np.argsort(-scaled, axis=1, kind="stable")[:, : sampler.top_k]
        masked = np.full_like(scaled, -np.inf)
        np.put_along_axis(masked, keep, np.take_along_axis(scaled, keep, axis=1), axis=1)
        scaled = masked
    probs = np.exp(scaled - scaled.max(axis=1, keepdims=True))
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random(len(logits))
    return (cdf <= u[:, None]).sum(axis=1).astype(np.int64)


@dataclass
class GenerationResult:
    """Complete token maps after generation.

    Attributes:
        token_maps: All K blocks (prefix blocks unchanged).
        logits: Logits of every generated block, keyed by 1-based block.
        cache: The KV cache after the last block.
    """

    token_maps: list[LodTokenMap]
    logits: dict[int, np.ndarray] = field(default_factory=dict)
    cache: KvCache | None = None


def generate(
    prefix: Sequence[TokenBlock],
    model: ArModel,
    sampler: SamplerConfig,
    cache: KvCache | None = None,
) -> GenerationResult:
    """Complete blocks j+1..K after a j-block prefix, one block per step.

    Raises:
        ContractError: If j >= K or a prefix block has the wrong length.
    """
    schedule = model.schedule
    j = len(prefix)
    if not 0 <= j < schedule.n_lods:
        raise ContractError(f"Prefix must hold 0..{schedule.n_lods - 1} blocks, got {j}")
    tokens = [model.token_array(prefix[b], b + 1) for b in range(j)]
    cache = KvCache(len(model.blocks)) if cache is None else cache
    rng = np.random.default_rng(sampler.seed)
    generated: dict[int, np.ndarray] = {}

    with no_grad():
        model.prime(cache)
        for b in range(1, schedule.n_lods + 1):
            logits = model.step_block(None if b == 1 else tokens[b - 2], b, cache)
            if b > j:
                tokens.append(sample_tokens(logits, sampler, rng))
                generated[b] = logits
    logger.debug("Generated blocks %d..%d from a %d-block prefix", j + 1, schedule.n_lods, j)
    maps = [LodTokenMap(lod=b + 1, indices=t, codebook_size=model.codebook_size) for b, t in enumerate(tokens)]
    return GenerationResult(token_maps=maps, logits=generated, cache=cache)
