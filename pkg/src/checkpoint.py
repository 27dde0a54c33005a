"""
Checkpoint persistence.

Binary layout (little-endian)::

    b"MARSCKPT" | u32 version | u32 entry count
    per entry, sorted by name:
        u16 name length | name (utf-8) | u8 dtype tag | u8 rank | u32 dims... | payload

Dtype tags: 0 float32, 1 float64, 2 int64, 3 uint8. Model tensors are stored
as float32 (integer buffers as int64). Metadata (model kind, configuration,
RNG state) is canonical JSON stored as uint8 entries under ``meta.*``; Adam
moments live under ``optim.*``. Because names are sorted and the JSON is
canonical, loading and re-saving reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from src.ar import ArConfig, ArModel
from src.errors import ConfigError, FormatError
from src.nn import Module
from src.optim import Adam
from src.utils import atomic_write
from src.vqvae import LodSchedule, VqVaeConfig, VqVaeModel

logger = logging.getLogger("mars.checkpoint")

MAGIC = b"MARSCKPT"
FORMAT_VERSION = 1
KINDS = ("vqvae", "ar")

_TAGS: dict[int, np.dtype] = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i8"),
    3: np.dtype("u1"),
}
_TAG_OF = {dtype: tag for tag, dtype in _TAGS.items()}


def _canonical_json(value: Any) -> np.ndarray:
    text = json.dumps(value, sort_keys=True, separators=(",", ":"))
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def _storage_array(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    if np.issubdtype(values.dtype, np.floating):
        return values.astype("<f4")
    if values.dtype == np.uint8:
        return values
    if np.issubdtype(values.dtype, np.integer) or values.dtype == np.bool_:
        return values.astype("<i8")
    raise FormatError(f"Cannot store dtype {values.dtype} in a checkpoint")


@dataclass
class Checkpoint:
    """In-memory checkpoint.

    Attributes:
        kind: ``"vqvae"`` or ``"ar"``.
        config: Schedule, model configuration and codebook size (JSON-able).
        tensors: Model state by tensor name.
        optimizer: Adam entries (``optim.*``), possibly empty.
        rng: Training-RNG bookkeeping (JSON-able).
        version: Format version.
    """

    kind: str
    config: dict[str, Any]
    tensors: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    rng: dict[str, Any] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def schedule(self) -> LodSchedule:
        return LodSchedule.from_dict(self.config["schedule"])

    @property
    def codebook_size(self) -> int:
        return int(self.config["codebook_size"])

    def entries(self) -> dict[str, np.ndarray]:
        entries = {f"param.{name}": _storage_array(v) for name, v in self.tensors.items()}
        entries.update({name: _storage_array(v) for name, v in self.optimizer.items()})
        entries["meta.kind"] = _canonical_json(self.kind)
        entries["meta.config"] = _canonical_json(self.config)
        entries["meta.rng"] = _canonical_json(self.rng)
        return entries

    def to_bytes(self) -> bytes:
        entries = self.entries()
        chunks = [MAGIC, struct.pack("<II", self.version, len(entries))]
        for name in sorted(entries):
            values = entries[name]
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)) + encoded)
            chunks.append(struct.pack("<BB", _TAG_OF[values.dtype], values.ndim))
            chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
            chunks.append(np.ascontiguousarray(values).tobytes())
        return b"".join(chunks)

    def digest(self) -> str:
        """sha256 of the serialized checkpoint."""
        return hashlib.sha256(self.to_bytes()).hexdigest()

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "Checkpoint":
        """Parse a serialized checkpoint.

        Raises:
            FormatError: On wrong magic or version, truncation or a bad entry.
        """
        reader = _Reader(raw, source)
        magic = reader.take(len(MAGIC))
        if magic != MAGIC:
            raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
        version, count = reader.unpack("<II")
        if version != FORMAT_VERSION:
            raise FormatError(f"{source}: unsupported checkpoint version {version} (expected {FORMAT_VERSION})")

        entries: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = reader.unpack("<H")
            name = reader.take(name_len).decode("utf-8", errors="replace")
            tag, rank = reader.unpack("<BB")
            if tag not in _TAGS:
                raise FormatError(f"{source}: entry '{name}' has unknown dtype tag {tag}")
            shape = reader.unpack(f"<{rank}I") if rank else ()
            dtype = _TAGS[tag]
            size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            entries[name] = np.frombuffer(reader.take(size), dtype=dtype).reshape(shape).copy()
        if reader.remaining:
            raise FormatError(f"{source}: {reader.remaining} trailing bytes after {count} entries")

        try:
            kind = json.loads(entries.pop("meta.kind").tobytes())
            config = json.loads(entries.pop("meta.config").tobytes())
            rng = json.loads(entries.pop("meta.rng").tobytes())
        except (KeyError, json.JSONDecodeError) as exc:
            raise FormatError(f"{source}: missing or corrupt metadata ({exc})") from exc
        if kind not in KINDS:
            raise FormatError(f"{source}: unknown checkpoint kind '{kind}'")
        tensors = {n[len("param."):]: v for n, v in entries.items() if n.startswith("param.")}
        optimizer = {n: v for n, v in entries.items() if n.startswith("optim.")}
        return cls(kind=kind, config=config, tensors=tensors, optimizer=optimizer, rng=rng, version=version)


class _Reader:
    def __init__(self, raw: bytes, source: str) -> None:
        self._raw = raw
        self._pos = 0
        self._source = source

    @property
    def remaining(self) -> int:
        return len(self._raw) - self._pos

    def take(self, n: int) -> bytes:
        if n > self.remaining:
            raise FormatError(f"{self._source}: truncated at byte {self._pos} (wanted {n} more)")
        out = self._raw[self._pos:self._pos + n]
        self._pos += n
        return out

    def unpack(self, fmt: str) -> tuple[int, ...]:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


# ── files ──────────────────────────────────────────────────────────────
def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    raw = ckpt.to_bytes()
    with atomic_write(path, "wb") as f:
        f.write(raw)
    logger.info("Checkpoint written: %s (%s, %d bytes)", path, ckpt.kind, len(raw))
    return Path(path)


def load_checkpoint(
    path: str | Path,
    expected_kind: str | None = None,
    expected_schedule: LodSchedule | None = None,
) -> Checkpoint:
    """Read a checkpoint and check it against what the caller is about to build.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        FormatError: On a malformed file or a kind other than ``expected_kind``.
        ConfigError: If its schedule differs from ``expected_schedule``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path.resolve()}")
    ckpt = Checkpoint.from_bytes(path.read_bytes(), str(path))
    if expected_kind is not None and ckpt.kind != expected_kind:
        raise FormatError(f"{path}: expected a {expected_kind} checkpoint, found {ckpt.kind}")
    if expected_schedule is not None and ckpt.schedule != expected_schedule:
        raise ConfigError(
            f"{path}: schedule {ckpt.schedule.to_dict()} differs from the configured {expected_schedule.to_dict()}"
        )
    return ckpt


# ── models ─────────────────────────────────────────────────────────────
def _model_checkpoint(kind: str, config: dict[str, Any], model: Module, optimizer: Adam | None, rng: dict[str, Any] | None) -> Checkpoint:
    return Checkpoint(
        kind=kind,
        config=config,
        tensors=model.state_dict(),
        optimizer=optimizer.state_entries() if optimizer is not None else {},
        rng=rng or {},
    )


def vqvae_checkpoint(model: VqVaeModel, optimizer: Adam | None = None, rng: dict[str, Any] | None = None) -> Checkpoint:
    config = {
        "schedule": model.schedule.to_dict(),
        "vqvae": model.config.to_dict(),
        "codebook_size": model.codebook.size,
    }
    return _model_checkpoint("vqvae", config, model, optimizer, rng)


def ar_checkpoint(
    model: ArModel,
    vqvae_digest: str,
    optimizer: Adam | None = None,
    rng: dict[str, Any] | None = None,
) -> Checkpoint:
    """AR checkpoint that remembers the digest of the VQVAE it was trained on."""
    config = {
        "schedule": model.schedule.to_dict(),
        "ar": model.config.to_dict(),
        "codebook_size": model.codebook_size,
        "vqvae_digest": vqvae_digest,
    }
    return _model_checkpoint("ar", config, model, optimizer, rng)


def restore_vqvae(ckpt: Checkpoint) -> VqVaeModel:
    """Rebuild a VQVAE in the current default dtype and load its weights."""
    if ckpt.kind != "vqvae":
        raise FormatError(f"Expected a vqvae checkpoint, got {ckpt.kind}")
    model = VqVaeModel(ckpt.schedule, VqVaeConfig.from_dict(ckpt.config["vqvae"]))
    model.load_state_dict(ckpt.tensors)
    return model


def restore_ar(ckpt: Checkpoint, vqvae: Checkpoint | None = None) -> ArModel:
    """Rebuild an AR model, checking it against the VQVAE it will be paired with.

    Raises:
        ConfigError: If schedules or codebook sizes of the two checkpoints differ.
    """
    if ckpt.kind != "ar":
        raise FormatError(f"Expected an ar checkpoint, got {ckpt.kind}")
    if vqvae is not None:
        check_pairing(vqvae, ckpt)
    model = ArModel(ckpt.schedule, ckpt.codebook_size, ArConfig(**ckpt.config["ar"]))
    model.load_state_dict(ckpt.tensors)
    return model


def check_pairing(vqvae: Checkpoint, ar: Checkpoint) -> None:
    if vqvae.schedule != ar.schedule:
        raise ConfigError(f"Schedule mismatch between checkpoints: {vqvae.schedule.to_dict()} vs {ar.schedule.to_dict()}")
    if vqvae.codebook_size != ar.codebook_size:
        raise ConfigError(f"Codebook size mismatch between checkpoints: V={vqvae.codebook_size} vs V={ar.codebook_size}")
    recorded = ar.config.get("vqvae_digest")
    if recorded and recorded != vqvae.digest():
        logger.warning("AR checkpoint was trained on a different VQVAE (digest %s...)", recorded[:12])
