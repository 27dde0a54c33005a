"""
Unit tests for the two training loops and the token cache.
"""

import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.checkpoint import load_checkpoint
from src.dataset import DatasetManifest, build_dataset
from src.errors import ConfigError
from src.reporting import write_loss_csv
from src.training import TokenCache, TrainConfig, train_ar, train_vqvae
from src.utils import default_config, merge_config
from src.vqvae import LodSchedule


def _make_config(steps: int = 3) -> dict:
    """Tiny models and a few steps in float64."""
    return merge_config(default_config(), {
        "schedule": {"points_per_lod": [8, 16, 32], "latents_per_lod": [2, 4, 8], "feature_dim": 8},
        "vqvae": {
            "codebook_size": 16, "pe_bands": 2, "heads": 2,
            "encoder_self_blocks": 1, "decoder_self_blocks": 1, "head_hidden": 8,
        },
        "ar": {"width": 8, "depth": 1, "heads": 2, "ff_mult": 2},
        "train_vqvae": {
            "steps": steps, "batch_size": 1, "q_uniform": 16, "q_near": 16,
            "variants_per_shape": 1, "checkpoint_every": 2, "log_every": 1, "precision": "float64",
        },
        "train_ar": {"steps": steps, "batch_size": 2, "checkpoint_every": 2, "log_every": 1, "precision": "float64"},
    })


@pytest.fixture(scope="module")
def manifest(tmp_path_factory: pytest.TempPathFactory) -> DatasetManifest:
    return build_dataset(2, seed=0, out_dir=tmp_path_factory.mktemp("data"), subdivisions=4)


@pytest.fixture(scope="module")
def vqvae_result(manifest: DatasetManifest):
    return train_vqvae(manifest, _make_config(), quiet=True)


# ── Config Tests ───────────────────────────────────────────────────────────

class TestTrainConfig:
    """Tests for training-loop settings."""

    def test_from_config_picks_known_keys(self) -> None:
        tc = TrainConfig.from_config(default_config(), "train_ar")
        assert tc.steps == 3000
        assert tc.lr == pytest.approx(3e-4)
        assert tc.tokenize_seed == 0

    def test_non_positive_steps(self) -> None:
        with pytest.raises(ConfigError):
            TrainConfig(steps=0)

    def test_unknown_precision(self) -> None:
        with pytest.raises(ConfigError):
            TrainConfig(precision="float16")


# ── VQVAE Training Tests ───────────────────────────────────────────────────

class TestTrainVqVae:
    """Tests for the tokenizer training loop."""

    def test_history_has_one_row_per_step_and_lod(self, vqvae_result) -> None:
        history = vqvae_result.history
        assert list(history.columns) == ["step", "lod", "bce", "commit"]
        assert len(history) == 3 * 3
        assert np.isfinite(history["bce"]).all()

    def test_checkpoint_matches_config(self, vqvae_result) -> None:
        ckpt = vqvae_result.checkpoint
        assert ckpt.kind == "vqvae"
        assert ckpt.codebook_size == 16
        assert ckpt.schedule == LodSchedule((8, 16, 32), (2, 4, 8), 8)
        assert ckpt.rng == {"seed": 0, "step": 3}

    def test_same_seed_same_weights(self, manifest: DatasetManifest, vqvae_result) -> None:
        again = train_vqvae(manifest, _make_config(), quiet=True)
        assert again.checkpoint.digest() == vqvae_result.checkpoint.digest()

    def test_writes_checkpoint_and_loss_csv(self, manifest: DatasetManifest, tmp_path: Path) -> None:
        result = train_vqvae(manifest, _make_config(steps=2), out_path=tmp_path / "vq.ckpt", quiet=True)
        loaded = load_checkpoint(tmp_path / "vq.ckpt", "vqvae")
        assert loaded.digest() == result.checkpoint.digest()
        write_loss_csv(result.history, tmp_path / "vq.loss.csv")
        frame = pd.read_csv(tmp_path / "vq.loss.csv")
        assert list(frame.columns) == ["step", "lod", "bce", "commit"]
        assert frame["lod"].tolist() == [1, 2, 3, 1, 2, 3]


# ── AR Training Tests ──────────────────────────────────────────────────────

class TestTrainAr:
    """Tests for the next-LOD training loop."""

    def test_history_and_pairing(self, manifest: DatasetManifest, vqvae_result) -> None:
        result = train_ar(manifest, vqvae_result.checkpoint, _make_config(), quiet=True)
        assert list(result.history.columns) == ["step", "loss"]
        assert len(result.history) == 3
        assert (result.history["loss"] > 0).all()
        assert result.checkpoint.config["vqvae_digest"] == vqvae_result.checkpoint.digest()
        assert result.checkpoint.codebook_size == 16

    def test_token_cache_is_reused(self, manifest: DatasetManifest, vqvae_result) -> None:
        """A second run over the same VQVAE tokenizes nothing."""
        cache = TokenCache()
        train_ar(manifest, vqvae_result.checkpoint, _make_config(steps=1), cache=cache, quiet=True)
        assert (cache.misses, cache.hits) == (2, 0)
        train_ar(manifest, vqvae_result.checkpoint, _make_config(steps=1), cache=cache, quiet=True)
        assert (cache.misses, cache.hits) == (2, 2)
        assert len(cache) == 2

    def test_schedule_mismatch(self, manifest: DatasetManifest, vqvae_result) -> None:
        config = _make_config()
        config["schedule"]["latents_per_lod"] = [2, 4, 16]
        with pytest.raises(ConfigError):
            train_ar(manifest, vqvae_result.checkpoint, config, quiet=True)


# ── Token Cache Tests ──────────────────────────────────────────────────────

class TestTokenCache:
    """Tests for the keyed token store."""

    def test_key_includes_digest_and_seed(self) -> None:
        cache = TokenCache()
        calls = []

        def tokenize() -> list:
            calls.append(1)
            return []

        cache.get("shape_000", "abc", 0, tokenize)
        cache.get("shape_000", "abc", 0, tokenize)
        cache.get("shape_000", "abd", 0, tokenize)
        cache.get("shape_000", "abc", 1, tokenize)
        assert len(calls) == 3
        assert ("shape_000", "abc", 0) in cache
        assert cache.hits == 1
