"""
Unit tests for the next-LOD transformer: block-causal masking, the KV
cache, likelihood factorization and token sampling.
"""

import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.ar import (
    ArConfig,
    ArModel,
    KvCache,
    SamplerConfig,
    ar_forward,
    ar_loss,
    block_logprobs,
    build_block_mask,
    generate,
    joint_logprob,
    nearest_source_positions,
    sample_tokens,
)
from src.errors import ConfigError, ContractError
from src.gradcheck import finite_diff_check
from src.nn import Module
from src.optim import Adam
from src.tensor import backward
from src.vqvae import LodSchedule

SCHEDULE = LodSchedule(points_per_lod=(8, 16, 32), latents_per_lod=(2, 4, 8), feature_dim=8)
VOCAB = 16


def _randomize_modulation(model: Module, seed: int = 0) -> None:
    """Give every parameter a non-trivial value (AdaLN maps start at zero)."""
    rng = np.random.default_rng(seed)
    for param in model.parameters():
        param.data = rng.normal(0.0, 0.3, param.shape)


def _make_model(seed: int = 0) -> ArModel:
    model = ArModel(SCHEDULE, VOCAB, ArConfig(width=8, depth=2, heads=2, ff_mult=2, seed=seed))
    _randomize_modulation(model, seed)
    return model


def _make_tokens(seed: int = 0) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.integers(0, VOCAB, d) for d in SCHEDULE.latents_per_lod]


def _block_slices() -> list[slice]:
    bounds = np.cumsum([0, *SCHEDULE.latents_per_lod])
    return [slice(int(a), int(b)) for a, b in zip(bounds, bounds[1:])]


# ── Config Tests ───────────────────────────────────────────────────────────

class TestConfigs:
    """Tests for transformer and sampler settings."""

    def test_width_divisible_by_heads(self) -> None:
        with pytest.raises(ConfigError):
            ArConfig(width=10, heads=3)

    def test_temperature_must_be_positive(self) -> None:
        with pytest.raises(ConfigError):
            SamplerConfig(temperature=0.0)

    def test_top_k_at_least_one(self) -> None:
        with pytest.raises(ConfigError):
            SamplerConfig(top_k=0)

    def test_prefix_length_defaults_to_k_minus_two(self) -> None:
        assert SamplerConfig().prefix_length(4) == 2
        assert SamplerConfig().prefix_length(1) == 0
        assert SamplerConfig(condition_lods=9).prefix_length(4) == 3


# ── Mask Tests ─────────────────────────────────────────────────────────────

class TestBlockMask:
    """Tests for the block-causal mask and block interfaces."""

    def test_block_ids(self) -> None:
        mask = build_block_mask(SCHEDULE)
        assert mask.length == 1 + 2 + 4 + 8
        np.testing.assert_array_equal(mask.block_ids[:8], [0, 1, 1, 2, 2, 2, 2, 3])

    def test_allowed_within_and_before_block(self) -> None:
        allowed = build_block_mask(SCHEDULE).allowed
        assert allowed[0, 0] and not allowed[0, 1]
        assert allowed[1, 2] and allowed[2, 1]
        assert not allowed[1, 3]
        assert allowed[14, :].all()

    def test_prefix_mask(self) -> None:
        assert build_block_mask(SCHEDULE, n_blocks=2).length == 7

    def test_nearest_repetition(self) -> None:
        np.testing.assert_array_equal(nearest_source_positions(2, 4), [0, 0, 1, 1])
        np.testing.assert_array_equal(nearest_source_positions(3, 4), [0, 0, 1, 2])


# ── Causality Tests ────────────────────────────────────────────────────────

class TestCausality:
    """Tests that block b's logits depend only on blocks before b."""

    def setup_method(self) -> None:
        self.model = _make_model()
        self.tokens = _make_tokens()
        self.logits = self.model(self.tokens).data

    def test_logit_shape(self) -> None:
        assert self.logits.shape == (14, VOCAB)

    def test_last_block_tokens_change_nothing(self) -> None:
        changed = [t.copy() for t in self.tokens]
        changed[2] = (changed[2] + 1) % VOCAB
        np.testing.assert_allclose(self.model(changed).data, self.logits, atol=1e-12)

    def test_changing_block_two_only_moves_later_blocks(self) -> None:
        """Blocks 1 and 2 are exactly unchanged; block 3 moves."""
        changed = [t.copy() for t in self.tokens]
        changed[1] = (changed[1] + 3) % VOCAB
        after = self.model(changed).data
        first, second, third = _block_slices()
        np.testing.assert_allclose(after[first], self.logits[first], atol=1e-12)
        np.testing.assert_allclose(after[second], self.logits[second], atol=1e-12)
        assert not np.allclose(after[third], self.logits[third])

    def test_prefix_pass_matches_full_pass(self) -> None:
        """Logits of the first two blocks do not depend on the third being present."""
        prefix = self.model(self.tokens, n_blocks=2).data
        np.testing.assert_allclose(prefix, self.logits[:6], atol=1e-10)

    def test_wrong_block_length(self) -> None:
        bad = [self.tokens[0], self.tokens[1][:3], self.tokens[2]]
        with pytest.raises(ContractError):
            self.model(bad)

    def test_token_out_of_range(self) -> None:
        bad = [self.tokens[0], np.full(4, VOCAB), self.tokens[2]]
        with pytest.raises(ContractError):
            self.model(bad)

    def test_first_block_takes_no_tokens(self) -> None:
        with pytest.raises(ContractError):
            self.model.block_inputs(self.tokens[0], 1)
        with pytest.raises(ContractError):
            self.model.block_inputs(None, 2)


# ── Cache Tests ────────────────────────────────────────────────────────────

class TestKvCache:
    """Tests for incremental decoding."""

    def setup_method(self) -> None:
        self.model = _make_model(seed=1)
        self.tokens = _make_tokens(seed=1)

    def test_cached_steps_match_full_pass(self) -> None:
        """Block-by-block decoding reproduces the full-pass logits."""
        full = self.model(self.tokens).data
        cache = KvCache(len(self.model.blocks))
        self.model.prime(cache)
        stepped = [
            self.model.step_block(None if b == 1 else self.tokens[b - 2], b, cache)
            for b in range(1, SCHEDULE.n_lods + 1)
        ]
        np.testing.assert_allclose(np.concatenate(stepped), full, atol=1e-10)
        assert len(cache) == 15
        assert cache.block_lengths == [1, 2, 4, 8]

    def test_layer_arrays(self) -> None:
        cache = KvCache(2)
        self.model.prime(cache)
        keys, values = cache.layer(0)
        assert keys.shape == (2, 1, 4)
        assert values.shape == (2, 1, 4)
        assert KvCache(2).layer(1) == (None, None)

    def test_prime_needs_empty_cache(self) -> None:
        cache = KvCache(2)
        self.model.prime(cache)
        with pytest.raises(ContractError):
            self.model.prime(cache)

    def test_step_checks_cache_length(self) -> None:
        cache = KvCache(2)
        self.model.prime(cache)
        with pytest.raises(ContractError):
            self.model.step_block(self.tokens[0], 2, cache)

    def test_commit_detects_missing_layer(self) -> None:
        cache = KvCache(2)
        cache.append(0, np.zeros((2, 3, 4)), np.zeros((2, 3, 4)))
        with pytest.raises(ContractError):
            cache.commit(3)


# ── Likelihood Tests ───────────────────────────────────────────────────────

class TestLikelihood:
    """Tests for the loss and the block factorization."""

    def setup_method(self) -> None:
        self.model = _make_model(seed=2)
        self.tokens = _make_tokens(seed=2)

    def test_joint_equals_sum_of_block_conditionals(self) -> None:
        joint = joint_logprob(self.tokens, self.model)
        blocks = block_logprobs(self.tokens, self.model)
        assert len(blocks) == 3
        assert joint == pytest.approx(sum(blocks), abs=1e-9)
        assert joint < 0

    def test_loss_is_mean_negative_logprob(self) -> None:
        loss = ar_loss(self.tokens, self.model).item()
        assert loss == pytest.approx(-joint_logprob(self.tokens, self.model) / 14)

    def test_forward_needs_every_block(self) -> None:
        with pytest.raises(ContractError):
            ar_forward(self.tokens[:2], self.model)

    def test_loss_gradients(self) -> None:
        params = [self.model.head.weight, self.model.start_embedding, self.model.blocks[0].norm1.modulation.weight]
        report = finite_diff_check(lambda: ar_loss(self.tokens, self.model), params, max_coords_per_param=5)
        assert report.passed, report

    def test_training_lowers_the_loss(self) -> None:
        """A few Adam steps on one sequence reduce its cross-entropy."""
        opt = Adam(self.model.named_parameters(), lr=1e-2)
        before = ar_loss(self.tokens, self.model).item()
        for _ in range(20):
            opt.zero_grad()
            backward(ar_loss(self.tokens, self.model))
            opt.step()
        assert ar_loss(self.tokens, self.model).item() < before


# ── Sampling Tests ─────────────────────────────────────────────────────────

class TestSampling:
    """Tests for token sampling and generation."""

    def setup_method(self) -> None:
        self.model = _make_model(seed=3)
        self.tokens = _make_tokens(seed=3)

    def test_greedy_ignores_temperature(self) -> None:
        """Greedy generation is identical at any temperature."""
        cold = generate(self.tokens[:1], self.model, SamplerConfig(temperature=0.1, greedy=True))
        hot = generate(self.tokens[:1], self.model, SamplerConfig(temperature=5.0, greedy=True))
        for a, b in zip(cold.token_maps, hot.token_maps):
            np.testing.assert_array_equal(a.indices, b.indices)

    def test_top_one_is_argmax(self) -> None:
        logits = np.random.default_rng(0).normal(size=(6, VOCAB))
        sampled = sample_tokens(logits, SamplerConfig(top_k=1), np.random.default_rng(1))
        np.testing.assert_array_equal(sampled, logits.argmax(axis=1))

    def test_top_k_keeps_only_best_tokens(self) -> None:
        logits = np.tile([0.0, 10.0, 9.0, -5.0], (500, 1))
        sampled = sample_tokens(logits, SamplerConfig(top_k=2, temperature=5.0), np.random.default_rng(2))
        assert set(sampled.tolist()) == {1, 2}

    def test_top_k_ties_keep_lowest_indices(self) -> None:
        """Equal logits still leave exactly k candidates, the lowest indices."""
        logits = np.zeros((1000, 4))
        sampled = sample_tokens(logits, SamplerConfig(top_k=2), np.random.default_rng(3))
        assert set(sampled.tolist()) == {0, 1}

    def test_top_k_partial_tie_at_cutoff(self) -> None:
        logits = np.tile([1.0, 5.0, 1.0, 1.0, -2.0], (1000, 1))
        sampled = sample_tokens(logits, SamplerConfig(top_k=3, temperature=10.0), np.random.default_rng(4))
        assert set(sampled.tolist()) == {0, 1, 2}

    def test_top_k_larger_than_vocab(self) -> None:
        with pytest.raises(ContractError):
            sample_tokens(np.zeros((1, 4)), SamplerConfig(top_k=5), np.random.default_rng(0))

    def test_prefix_is_kept(self) -> None:
        result = generate(self.tokens[:2], self.model, SamplerConfig(top_k=4, seed=5))
        np.testing.assert_array_equal(result.token_maps[0].indices, self.tokens[0])
        np.testing.assert_array_equal(result.token_maps[1].indices, self.tokens[1])
        assert [len(m) for m in result.token_maps] == [2, 4, 8]
        assert sorted(result.logits) == [3]

    def test_generated_logits_match_full_pass(self) -> None:
        """The logits of a generated block equal a full pass over the result."""
        result = generate([], self.model, SamplerConfig(top_k=4, seed=6))
        full = self.model(result.token_maps).data
        for block, piece in zip((1, 2, 3), _block_slices()):
            np.testing.assert_allclose(result.logits[block], full[piece], atol=1e-10)

    def test_same_seed_same_sample(self) -> None:
        sampler = SamplerConfig(top_k=8, seed=11)
        a = generate(self.tokens[:1], self.model, sampler)
        b = generate(self.tokens[:1], self.model, replace(sampler))
        for x, y in zip(a.token_maps, b.token_maps):
            np.testing.assert_array_equal(x.indices, y.indices)

    def test_full_prefix_rejected(self) -> None:
        with pytest.raises(ContractError):
            generate(self.tokens, self.model, SamplerConfig())
