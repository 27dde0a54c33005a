"""
Neural building blocks on top of the tensor engine.

Provides the ``Module`` base class (named parameters, state dicts), dense
layers, layer normalization with adaptive (AdaLN) modulation, masked
scaled-dot-product attention, pre-norm attention blocks and the two losses
the models train with (binary and categorical cross-entropy).
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from typing import Any, Iterator

import numpy as np

from src import tensor as T
from src.errors import ContractError, DimensionError
from src.tensor import Tensor

logger = logging.getLogger("mars.nn")

LAYER_NORM_EPS = 1e-5
BCE_EPS = 1e-7
MASK_BIAS = -1e9


class Module(ABC):
    """Base class for anything that owns tensors.

    Tensor attributes with ``requires_grad`` are parameters; other tensor
    attributes are buffers (saved in state dicts, never optimized). Child
    modules and lists of modules are discovered through attribute order,
    which makes parameter names deterministic.
    """

    @abstractmethod
    def forward(self, *args: Any, **kwargs: Any) -> Any:
        ...

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            name = f"{prefix}{attr}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_tensors(f"{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def named_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_tensors() if t.requires_grad}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Replace tensor values by name; shapes must match exactly.

        Raises:
            ContractError: On missing, unexpected or mis-shaped entries.
        """
        own = dict(self.named_tensors())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ContractError(
                f"State dict mismatch; missing: {missing[:5]}, unexpected: {unexpected[:5]}"
            )
        for name, target in own.items():
            values = np.asarray(state[name])
            if values.shape != target.shape:
                raise DimensionError(
                    f"State entry '{name}' has shape {values.shape}, expected {target.shape}"
                )
            target.data = values.astype(target.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(values: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


class Linear(Module):
    """Affine map ``x @ weight + bias`` over the last axis."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        bias: bool = True,
        zero_init: bool = False,
    ) -> None:
        scale = 0.0 if zero_init else 1.0 / np.sqrt(in_features)
        self.weight = _param(rng.normal(0.0, 1.0, (in_features, out_features)) * scale)
        self.bias = _param(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(
                f"Linear expects last extent {self.weight.shape[0]}, got {x.shape}"
            )
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Embedding(Module):
    """Lookup table indexed by integer ids."""

    def __init__(self, count: int, dim: int, rng: np.random.Generator, std: float = 0.02) -> None:
        self.weight = _param(rng.normal(0.0, std, (count, dim)))

    def forward(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.weight.shape[0]):
            raise ContractError(f"Embedding ids out of range [0, {self.weight.shape[0]})")
        return self.weight[ids]


def layer_norm(x: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize each row to zero mean and unit (population) variance."""
    centered = x - x.mean(axis=-1, keepdims=True)
    variance = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / T.sqrt(variance + eps)


def ada_layer_norm(x: Tensor, gamma: Any, beta: Any, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Layer-normalize ``x`` then apply scale ``gamma`` and shift ``beta``."""
    return layer_norm(x, eps) * gamma + beta


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = LAYER_NORM_EPS) -> None:
        self.gamma = _param(np.ones(dim))
        self.beta = _param(np.zeros(dim))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ada_layer_norm(x, self.gamma, self.beta, self._eps)


class AdaLayerNorm(Module):
    """Layer norm whose scale and shift are an affine map of a condition.

    The map is zero-initialized so that ``gamma == 1`` and ``beta == 0``
    until training moves it.
    """

    def __init__(self, dim: int, cond_dim: int, rng: np.random.Generator, eps: float = LAYER_NORM_EPS) -> None:
        self.modulation = Linear(cond_dim, 2 * dim, rng, zero_init=True)
        self._dim = dim
        self._eps = eps

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        if cond.ndim == 1:
            cond = cond.reshape(1, cond.shape[0])
        mod = self.modulation(cond)
        gamma = mod[:, : self._dim] + 1.0
        beta = mod[:, self._dim:]
        return ada_layer_norm(x, gamma, beta, self._eps)


def attention_bias(mask: np.ndarray | None, dtype: np.dtype) -> np.ndarray | None:
    """Translate a boolean allow-mask into an additive softmax bias.

    Raises:
        ContractError: If some query row may attend to no key at all.
    """
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ContractError("Attention mask forbids every key for at least one query row")
    return np.where(mask, 0.0, MASK_BIAS).astype(dtype)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(q kᵀ / √d + bias) v over the last two axes.

    Args:
        q: Queries (..., Lq, d).
        k: Keys (..., Lk, d).
        v: Values (..., Lk, dv).
        mask: Optional boolean (Lq, Lk) array, True where attending is allowed.
    """
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"Query/key head dims differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"Key/value lengths differ: {k.shape} vs {v.shape}")
    scores = (q @ T.transpose(k, _swap_last(k.ndim))) * (1.0 / np.sqrt(q.shape[-1]))
    bias = attention_bias(mask, scores.dtype)
    if bias is not None:
        scores = scores + bias
    return T.softmax(scores, axis=-1) @ v


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class MultiHeadAttention(Module):
    """Multi-head attention with separate key/value projection.

    ``project_kv`` is public so that incremental decoders can cache the
    per-head keys and values of already processed positions.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, context_dim: int | None = None) -> None:
        if dim % heads:
            raise ContractError(f"Width {dim} is not divisible by {heads} heads")
        context_dim = context_dim or dim
        self.to_q = Linear(dim, dim, rng, bias=False)
        self.to_k = Linear(context_dim, dim, rng, bias=False)
        self.to_v = Linear(context_dim, dim, rng, bias=False)
        self.to_out = Linear(dim, dim, rng)
        self._heads = heads
        self._head_dim = dim // heads

    def split_heads(self, x: Tensor) -> Tensor:
        length = x.shape[0]
        return x.reshape(length, self._heads, self._head_dim).transpose(1, 0, 2)

    def project_kv(self, context: Tensor) -> tuple[Tensor, Tensor]:
        return self.split_heads(self.to_k(context)), self.split_heads(self.to_v(context))

    def attend(self, x: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q = self.split_heads(self.to_q(x))
        out = scaled_dot_attention(q, k, v, mask)
        length = x.shape[0]
        merged = out.transpose(1, 0, 2).reshape(length, self._heads * self._head_dim)
        return self.to_out(merged)

    def forward(self, x: Tensor, context: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
        k, v = self.project_kv(x if context is None else context)
        return self.attend(x, k, v, mask)


class FeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, mult: int = 4) -> None:
        self.fc1 = Linear(dim, dim * mult, rng)
        self.fc2 = Linear(dim * mult, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class SelfAttentionBlock(Module):
    """Pre-norm residual self-attention followed by a feed-forward layer."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ff_mult: int = 4) -> None:
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, rng, ff_mult)

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ff(self.norm2(x))


class CrossAttentionBlock(Module):
    """Pre-norm residual cross-attention from ``x`` onto ``context``."""

    def __init__(
        self,
        dim: int,
        heads: int,
        rng: np.random.Generator,
        context_dim: int | None = None,
        ff_mult: int = 4,
    ) -> None:
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(context_dim or dim)
        self.attn = MultiHeadAttention(dim, heads, rng, context_dim)
        self.norm2 = LayerNorm(dim)
        self.ff = FeedForward(dim, rng, ff_mult)

    def forward(self, x: Tensor, context: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_kv(context), mask=mask)
        return x + self.ff(self.norm2(x))


def bce_loss(p: Tensor, target: np.ndarray, eps: float = BCE_EPS) -> Tensor:
    """Mean binary cross-entropy of probabilities ``p`` against booleans.

    Probabilities are clamped to ``[eps, 1 - eps]`` first.
    """
    target = np.asarray(target, dtype=bool)
    if p.shape != target.shape:
        raise DimensionError(f"bce_loss shape mismatch: {p.shape} vs {target.shape}")
    t = target.astype(p.dtype)
    clamped = T.clip(p, eps, 1.0 - eps)
    losses = -(T.log(clamped) * t + T.log(1.0 - clamped) * (1.0 - t))
    return losses.mean()


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean categorical cross-entropy of ``(N, V)`` logits against ids."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(f"cross_entropy shape mismatch: {logits.shape} vs {targets.shape}")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(targets.shape[0]), targets]
    return -picked.mean()
