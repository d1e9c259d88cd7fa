"""Learnable positive/negative context vectors and their checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"DCPT"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sIBIIII")
_MODE_FLAGS = {"shared": 0, "class_specific": 1}


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class ModeMismatchError(CheckpointError):
    pass


@dataclass(frozen=True)
class PromptConfig:
    n_ctx_pos: int = 16
    n_ctx_neg: int = 16
    dim: int = 32
    mode: str = "class_specific"
    init_sigma: float = 0.02

    def __post_init__(self):
        if self.n_ctx_pos < 1 or self.n_ctx_neg < 1:
            raise ValueError("context lengths must be >= 1")
        if self.dim < 1:
            raise ValueError("embedding dim must be >= 1")
        if self.mode not in _MODE_FLAGS:
            raise ValueError(f"mode must be one of {sorted(_MODE_FLAGS)}, got {self.mode!r}")
        if not self.init_sigma > 0:
            raise ValueError("init_sigma must be > 0")


@dataclass
class PromptPair:
    pos_ctx: np.ndarray
    neg_ctx: np.ndarray


@dataclass
class PromptBank:
    """Context vectors stored as stacked arrays.

    ``pos`` has shape ``(K, N+, D)`` and ``neg`` shape ``(K, N-, D)`` where
    K is the number of classes (class_specific) or 1 (shared).
    """

    mode: str
    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        if self.mode not in _MODE_FLAGS:
            raise ValueError(f"unknown prompt mode {self.mode!r}")
        if self.pos.ndim != 3 or self.neg.ndim != 3:
            raise ValueError("context stacks must be 3-D (K, N, D)")
        if self.pos.shape[0] != self.neg.shape[0] or self.pos.shape[2] != self.neg.shape[2]:
            raise ValueError("positive and negative stacks disagree on K or D")
        if self.mode == "shared" and self.pos.shape[0] != 1:
            raise ValueError("shared banks hold exactly one pair")

    @property
    def n_pairs(self) -> int:
        return self.pos.shape[0]

    @property
    def dim(self) -> int:
        return self.pos.shape[2]

    @property
    def pairs(self) -> list[PromptPair]:
        return [PromptPair(p, n) for p, n in zip(self.pos, self.neg)]

    def pair_for(self, class_index: int) -> PromptPair:
        k = 0 if self.mode == "shared" else class_index
        return PromptPair(self.pos[k], self.neg[k])

    def n_parameters(self) -> int:
        return self.pos.size + self.neg.size

    def copy(self) -> PromptBank:
        return PromptBank(self.mode, self.pos.copy(), self.neg.copy())

    def equals(self, other: PromptBank) -> bool:
        return (
            self.mode == other.mode
            and self.pos.dtype == other.pos.dtype
            and self.pos.shape == other.pos.shape
            and self.neg.shape == other.neg.shape
            and self.pos.tobytes() == other.pos.tobytes()
            and self.neg.tobytes() == other.neg.tobytes()
        )


def init_prompts(config: PromptConfig, n_classes: int, seed: int) -> PromptBank:
    """Draw every context entry i.i.d. from N(0, init_sigma^2), stored as float32."""
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    K = n_classes if config.mode == "class_specific" else 1
    rng = np.random.default_rng(seed)
    pos = rng.normal(0.0, config.init_sigma, size=(K, config.n_ctx_pos, config.dim))
    neg = rng.normal(0.0, config.init_sigma, size=(K, config.n_ctx_neg, config.dim))
    return PromptBank(config.mode, pos.astype(np.float32), neg.astype(np.float32))


def assemble_prompt(pair: PromptPair, class_token, polarity: str) -> np.ndarray:
    """Return ``[V_1, ..., V_N, CLS]`` for the chosen polarity as an ``(N+1, D)`` array."""
    if polarity in ("+", "pos", 1):
        ctx = pair.pos_ctx
    elif polarity in ("-", "neg", -1):
        ctx = pair.neg_ctx
    else:
        raise ValueError(f"polarity must be '+' or '-', got {polarity!r}")
    cls = np.asarray(class_token)
    if cls.ndim != 1 or cls.shape[0] != ctx.shape[1]:
        raise ValueError(f"class token of shape {cls.shape} does not match context dim {ctx.shape[1]}")
    return np.concatenate([np.asarray(ctx, dtype=np.float64), cls[None, :].astype(np.float64)], axis=0)


def save_checkpoint(path, bank: PromptBank, meta: dict | None = None) -> None:
    meta = {} if meta is None else meta
    K, n_pos, D = bank.pos.shape
    n_neg = bank.neg.shape[1]
    trailer = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, _MODE_FLAGS[bank.mode], K, n_pos, n_neg, D))
        f.write(np.ascontiguousarray(bank.pos, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(bank.neg, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(trailer)))
        f.write(trailer)


def load_checkpoint(path, expect_mode: str | None = None, allow_mode_change: bool = False):
    """Read a checkpoint; returns ``(bank, meta)``.

    If ``expect_mode`` is given and differs from the stored mode, loading is
    refused unless ``allow_mode_change`` is set.
    """
    data = Path(path).read_bytes()
    if len(data) >= 4 and data[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    if len(data) < _HEADER.size:
        raise TruncatedCheckpointError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, flag, K, n_pos, n_neg, D = _HEADER.unpack_from(data)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    modes = {v: k for k, v in _MODE_FLAGS.items()}
    if flag not in modes:
        raise CheckpointError(f"{path}: unknown mode flag {flag}")
    mode = modes[flag]
    if mode == "shared" and K != 1:
        raise ShapeMismatchError(f"{path}: shared checkpoint declares {K} pairs")
    n_floats = K * D * (n_pos + n_neg)
    off = _HEADER.size
    end = off + 4 * n_floats
    if len(data) < end + 4:
        raise TruncatedCheckpointError(
            f"{path}: header declares {K}x({n_pos}+{n_neg})x{D} floats, file too short"
        )
    flat = np.frombuffer(data, dtype="<f4", count=n_floats, offset=off).astype(np.float32)
    (tlen,) = struct.unpack_from("<I", data, end)
    if len(data) < end + 4 + tlen:
        raise TruncatedCheckpointError(f"{path}: metadata trailer truncated")
    if len(data) > end + 4 + tlen:
        raise ShapeMismatchError(f"{path}: {len(data) - end - 4 - tlen} trailing bytes beyond declared shapes")
    try:
        meta = json.loads(data[end + 4:end + 4 + tlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable metadata trailer ({e})") from None
    cfg = meta.get("prompt")
    if cfg and (cfg.get("n_ctx_pos"), cfg.get("n_ctx_neg"), cfg.get("dim")) != (n_pos, n_neg, D):
        raise ShapeMismatchError(f"{path}: metadata prompt config disagrees with header shapes")
    if expect_mode is not None and expect_mode != mode and not allow_mode_change:
        raise ModeMismatchError(
            f"{path}: checkpoint holds {mode} prompts but {expect_mode} was requested"
        )
    pos = flat[: K * n_pos * D].reshape(K, n_pos, D)
    neg = flat[K * n_pos * D:].reshape(K, n_neg, D)
    bank = PromptBank(mode, pos, neg)
    if expect_mode == "shared" and mode == "class_specific" and allow_mode_change:
        bank = PromptBank("shared", pos.mean(axis=0, keepdims=True).astype(np.float32),
                          neg.mean(axis=0, keepdims=True).astype(np.float32))
    return bank, meta


def config_dict(config: PromptConfig) -> dict:
    return asdict(config)
