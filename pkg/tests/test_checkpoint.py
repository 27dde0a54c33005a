"""
Unit tests for checkpoint serialization and model restoration.
"""

import logging
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.ar import ArConfig, ArModel
from src.checkpoint import (
    MAGIC,
    Checkpoint,
    ar_checkpoint,
    check_pairing,
    load_checkpoint,
    restore_ar,
    restore_vqvae,
    save_checkpoint,
    vqvae_checkpoint,
)
from src.errors import ConfigError, FormatError
from src.optim import Adam
from src.vqvae import LodSchedule, VqVaeConfig, VqVaeModel

SCHEDULE = LodSchedule(points_per_lod=(8, 16, 32), latents_per_lod=(2, 4, 8), feature_dim=8)


def _make_vqvae(codebook_size: int = 16) -> VqVaeModel:
    config = VqVaeConfig(
        codebook_size=codebook_size, pe_bands=2, heads=2,
        encoder_self_blocks=1, decoder_self_blocks=1, head_hidden=8,
    )
    return VqVaeModel(SCHEDULE, config)


def _make_ar(codebook_size: int = 16, schedule: LodSchedule = SCHEDULE) -> ArModel:
    return ArModel(schedule, codebook_size, ArConfig(width=8, depth=1, heads=2, ff_mult=2))


# ── Serialization Tests ────────────────────────────────────────────────────

class TestSerialization:
    """Tests for the binary checkpoint layout."""

    def setup_method(self) -> None:
        model = _make_vqvae()
        self.ckpt = vqvae_checkpoint(model, Adam(model.named_parameters()), {"seed": 3, "step": 7})
        self.raw = self.ckpt.to_bytes()

    def test_starts_with_magic(self) -> None:
        assert self.raw.startswith(MAGIC)

    def test_reserialization_is_byte_identical(self) -> None:
        """Loading and saving again reproduces the same bytes and digest."""
        loaded = Checkpoint.from_bytes(self.raw)
        assert loaded.to_bytes() == self.raw
        assert loaded.digest() == self.ckpt.digest()
        assert loaded.rng == {"seed": 3, "step": 7}
        assert loaded.kind == "vqvae"

    def test_tensors_stored_as_float32(self) -> None:
        loaded = Checkpoint.from_bytes(self.raw)
        name = next(iter(self.ckpt.tensors))
        assert loaded.tensors[name].dtype == np.float32
        np.testing.assert_allclose(loaded.tensors[name], self.ckpt.tensors[name], rtol=1e-6, atol=1e-7)

    def test_optimizer_entries_kept(self) -> None:
        loaded = Checkpoint.from_bytes(self.raw)
        assert int(loaded.optimizer["optim.step"][0]) == 0

    def test_bad_magic(self) -> None:
        with pytest.raises(FormatError):
            Checkpoint.from_bytes(b"NOTMARS!" + self.raw[8:])

    def test_truncated(self) -> None:
        with pytest.raises(FormatError):
            Checkpoint.from_bytes(self.raw[:-3])

    def test_trailing_bytes(self) -> None:
        with pytest.raises(FormatError):
            Checkpoint.from_bytes(self.raw + b"\x00")

    def test_unsupported_version(self) -> None:
        raw = MAGIC + (99).to_bytes(4, "little") + self.raw[12:]
        with pytest.raises(FormatError):
            Checkpoint.from_bytes(raw)

    def test_unknown_kind(self) -> None:
        ckpt = Checkpoint(kind="gan", config={}, tensors={})
        with pytest.raises(FormatError):
            Checkpoint.from_bytes(ckpt.to_bytes())


# ── File Tests ─────────────────────────────────────────────────────────────

class TestFiles:
    """Tests for saving and loading checkpoint files."""

    def setup_method(self) -> None:
        self.ckpt = vqvae_checkpoint(_make_vqvae())

    def test_save_and_load(self, tmp_path: Path) -> None:
        path = save_checkpoint(self.ckpt, tmp_path / "vq.ckpt")
        loaded = load_checkpoint(path, "vqvae", SCHEDULE)
        assert loaded.digest() == self.ckpt.digest()
        assert loaded.codebook_size == 16
        assert loaded.schedule == SCHEDULE

    def test_missing_file(self, tmp_path: Path) -> None:
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_wrong_kind(self, tmp_path: Path) -> None:
        path = save_checkpoint(self.ckpt, tmp_path / "vq.ckpt")
        with pytest.raises(FormatError):
            load_checkpoint(path, "ar")

    def test_schedule_mismatch(self, tmp_path: Path) -> None:
        path = save_checkpoint(self.ckpt, tmp_path / "vq.ckpt")
        other = LodSchedule(points_per_lod=(8, 16), latents_per_lod=(2, 4), feature_dim=8)
        with pytest.raises(ConfigError):
            load_checkpoint(path, "vqvae", other)

    def test_missing_directory(self, tmp_path: Path) -> None:
        with pytest.raises(FileNotFoundError):
            save_checkpoint(self.ckpt, tmp_path / "nowhere" / "vq.ckpt")


# ── Restore Tests ──────────────────────────────────────────────────────────

class TestRestore:
    """Tests for rebuilding models from checkpoints."""

    def test_vqvae_round_trip(self) -> None:
        """A restored model re-serializes to the same digest."""
        ckpt = Checkpoint.from_bytes(vqvae_checkpoint(_make_vqvae()).to_bytes())
        model = restore_vqvae(ckpt)
        assert model.codebook.size == 16
        assert vqvae_checkpoint(model).digest() == ckpt.digest()

    def test_ar_round_trip(self) -> None:
        vq = vqvae_checkpoint(_make_vqvae())
        ckpt = Checkpoint.from_bytes(ar_checkpoint(_make_ar(), vq.digest()).to_bytes())
        model = restore_ar(ckpt, vq)
        assert model.codebook_size == 16
        assert ar_checkpoint(model, vq.digest()).digest() == ckpt.digest()

    def test_restore_checks_kind(self) -> None:
        vq = vqvae_checkpoint(_make_vqvae())
        with pytest.raises(FormatError):
            restore_ar(vq)
        with pytest.raises(FormatError):
            restore_vqvae(ar_checkpoint(_make_ar(), vq.digest()))

    def test_codebook_size_mismatch(self) -> None:
        vq = vqvae_checkpoint(_make_vqvae(codebook_size=16))
        ar = ar_checkpoint(_make_ar(codebook_size=32), vq.digest())
        with pytest.raises(ConfigError):
            check_pairing(vq, ar)

    def test_schedule_mismatch(self) -> None:
        vq = vqvae_checkpoint(_make_vqvae())
        other = LodSchedule(points_per_lod=(8, 16), latents_per_lod=(2, 4), feature_dim=8)
        ar = ar_checkpoint(_make_ar(schedule=other), vq.digest())
        with pytest.raises(ConfigError):
            restore_ar(ar, vq)

    def test_foreign_digest_only_warns(self, caplog: pytest.LogCaptureFixture, monkeypatch: pytest.MonkeyPatch) -> None:
        monkeypatch.setattr(logging.getLogger("mars"), "propagate", True)
        vq = vqvae_checkpoint(_make_vqvae())
        ar = ar_checkpoint(_make_ar(), "0" * 64)
        with caplog.at_level("WARNING", logger="mars.checkpoint"):
            check_pairing(vq, ar)
        assert "different VQVAE" in caplog.text
