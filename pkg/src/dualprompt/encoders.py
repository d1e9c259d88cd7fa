"""Frozen text and visual encoders.

The toy backend realizes the text encoder as mean-pool, a fixed linear map
and L2 normalization, so the gradient of a text feature with respect to its
input tokens is available in closed form.  Visual features go through two
fixed linear maps (``v`` then the visual-to-text projection).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .data import read_feature_file, write_feature_file


class DegenerateInputError(ValueError):
    """An input vector has zero norm where a direction is required."""


class GradientUnsupportedError(NotImplementedError):
    pass


@runtime_checkable
class EncoderBackend(Protocol):
    """What an external (e.g. pretrained) encoder must provide.

    Parameters must stay frozen.  Backends that cannot differentiate the
    text path set ``supports_gradients = False`` and are inference-only.

    ``encode_text`` must return a unit-norm vector: scoring takes plain dot
    products against normalized regions and treats them as cosines.
    ``encode_text_vjp`` maps a gradient on that unit vector back to every
    input token row.
    """

    supports_gradients: bool
    text_dim: int
    token_dim: int

    def encode_text(self, tokens: np.ndarray) -> np.ndarray: ...

    def encode_text_vjp(self, tokens: np.ndarray, grad_out: np.ndarray) -> np.ndarray: ...

    def project_regions(self, feature_map: np.ndarray) -> np.ndarray: ...

    def attn_pool(self, feature_map: np.ndarray) -> np.ndarray: ...

    def digest(self) -> str: ...


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("encoder parameters must be finite")
    a.setflags(write=False)
    return a


def _f32_gaussian(rng, shape, scale):
    return (rng.standard_normal(shape) * scale).astype(np.float32).astype(np.float64)


@dataclass(frozen=True)
class TextEncoderParams:
    W_t: np.ndarray  # (D_t, D)

    def __post_init__(self):
        object.__setattr__(self, "W_t", _frozen(self.W_t))


@dataclass(frozen=True)
class VisualProjectionParams:
    W_v: np.ndarray  # (D_emb, D_v)
    W_proj: np.ndarray  # (D_t, D_emb)

    def __post_init__(self):
        object.__setattr__(self, "W_v", _frozen(self.W_v))
        object.__setattr__(self, "W_proj", _frozen(self.W_proj))
        if self.W_proj.shape[1] != self.W_v.shape[0]:
            raise ValueError("W_proj input dim must equal W_v output dim")


@dataclass(frozen=True)
class AttnPoolParams:
    W_q: np.ndarray  # (D_a, D_v)
    W_k: np.ndarray  # (D_a, D_v)
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "W_q", _frozen(self.W_q))
        object.__setattr__(self, "W_k", _frozen(self.W_k))
        if self.W_q.shape != self.W_k.shape:
            raise ValueError("W_q and W_k must have the same shape")
        if not self.scale > 0:
            raise ValueError("attention scale C must be > 0")


def encode_text(tokens, params: TextEncoderParams) -> np.ndarray:
    """``normalize(W_t @ mean(tokens))`` for a single ``(L, D)`` token sequence."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ValueError(f"tokens must be a non-empty (L, D) array, got shape {tokens.shape}")
    if tokens.shape[1] != params.W_t.shape[1]:
        raise ValueError(f"token dim {tokens.shape[1]} does not match W_t input dim {params.W_t.shape[1]}")
    u = params.W_t @ tokens.mean(axis=0)
    norm = np.linalg.norm(u)
    if norm == 0.0:
        raise DegenerateInputError("text feature is the zero vector before normalization")
    return u / norm


def encode_text_vjp(tokens, params: TextEncoderParams, grad_out) -> np.ndarray:
    """Gradient of ``<grad_out, encode_text(tokens)>`` with respect to every token row."""
    tokens = np.asarray(tokens, dtype=np.float64)
    L = tokens.shape[0]
    u = params.W_t @ tokens.mean(axis=0)
    norm = np.linalg.norm(u)
    if norm == 0.0:
        raise DegenerateInputError("text feature is the zero vector before normalization")
    t = u / norm
    g = np.asarray(grad_out, dtype=np.float64)
    du = (g - t * (t @ g)) / norm
    row = (params.W_t.T @ du) / L
    return np.broadcast_to(row, tokens.shape).copy()


def project_regions(feature_map, params: VisualProjectionParams) -> np.ndarray:
    """Row i is ``W_proj @ W_v @ x_i`` with regions flattened row-major over (H, W)."""
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3:
        raise ValueError(f"feature map must be (H, W, D_v), got shape {fm.shape}")
    if fm.shape[2] != params.W_v.shape[1]:
        raise ValueError(f"feature dim {fm.shape[2]} does not match W_v input dim {params.W_v.shape[1]}")
    x = fm.reshape(-1, fm.shape[2])
    return (x @ params.W_v.T) @ params.W_proj.T


def attention_weights(feature_map, vp: VisualProjectionParams, ap: AttnPoolParams) -> np.ndarray:
    fm = np.asarray(feature_map, dtype=np.float64)
    if fm.ndim != 3 or fm.shape[2] != ap.W_q.shape[1]:
        raise ValueError("feature map dims do not match the attention parameters")
    x = fm.reshape(-1, fm.shape[2])
    q = ap.W_q @ x.mean(axis=0)
    a = (x @ ap.W_k.T) @ q / ap.scale
    a = np.exp(a - a.max())
    return a / a.sum()


def attn_pool(feature_map, vp: VisualProjectionParams, ap: AttnPoolParams) -> np.ndarray:
    """Global attention pooling, computed as the weighted sum of projected regions."""
    w = attention_weights(feature_map, vp, ap)
    return w @ project_regions(feature_map, vp)


class ToyEncoders:
    """Deterministic frozen encoders built from a seed.

    ``mode="aligned"`` makes every linear map the identity (all dims equal);
    ``mode="random"`` draws Gaussian maps scaled by ``1/sqrt(fan_in)``.
    """

    supports_gradients = True

    def __init__(self, text: TextEncoderParams, visual: VisualProjectionParams, attn: AttnPoolParams,
                 mode: str = "custom", seed: int | None = None):
        if text.W_t.shape[0] != visual.W_proj.shape[0]:
            raise ValueError("text and visual encoders must share the output dim D_t")
        self.text = text
        self.visual = visual
        self.attn = attn
        self.mode = mode
        self.seed = seed

    @classmethod
    def build(cls, mode: str, token_dim: int, visual_dim: int | None = None, emb_dim: int | None = None,
              text_dim: int | None = None, seed: int = 0) -> ToyEncoders:
        D = token_dim
        D_v = visual_dim or D
        D_emb = emb_dim or D_v
        D_t = text_dim or D
        if mode == "aligned":
            if not D == D_v == D_emb == D_t:
                raise ValueError("aligned mode needs equal token, visual, embedding and text dims")
            eye = np.eye(D)
            return cls(TextEncoderParams(eye), VisualProjectionParams(eye, eye),
                       AttnPoolParams(eye, eye, float(np.sqrt(D))), mode, seed)
        if mode == "random":
            rng = np.random.default_rng(seed)
            W_t = _f32_gaussian(rng, (D_t, D), 1 / np.sqrt(D))
            W_v = _f32_gaussian(rng, (D_emb, D_v), 1 / np.sqrt(D_v))
            W_proj = _f32_gaussian(rng, (D_t, D_emb), 1 / np.sqrt(D_emb))
            W_q = _f32_gaussian(rng, (D_emb, D_v), 1 / np.sqrt(D_v))
            W_k = _f32_gaussian(rng, (D_emb, D_v), 1 / np.sqrt(D_v))
            return cls(TextEncoderParams(W_t), VisualProjectionParams(W_v, W_proj),
                       AttnPoolParams(W_q, W_k, float(np.sqrt(D_emb))), mode, seed)
        raise ValueError(f"unknown encoder mode {mode!r} (expected 'aligned' or 'random')")

    @property
    def token_dim(self) -> int:
        return self.text.W_t.shape[1]

    @property
    def text_dim(self) -> int:
        return self.text.W_t.shape[0]

    @property
    def visual_dim(self) -> int:
        return self.visual.W_v.shape[1]

    def spec(self) -> dict:
        return {"mode": self.mode, "seed": self.seed, "token_dim": self.token_dim,
                "visual_dim": self.visual_dim, "emb_dim": self.visual.W_v.shape[0],
                "text_dim": self.text_dim}

    @classmethod
    def from_spec(cls, spec: dict) -> ToyEncoders:
        return cls.build(spec["mode"], spec["token_dim"], spec["visual_dim"], spec["emb_dim"],
                         spec["text_dim"], spec["seed"])

    def encode_text(self, tokens):
        return encode_text(tokens, self.text)

    def encode_text_vjp(self, tokens, grad_out):
        return encode_text_vjp(tokens, self.text, grad_out)

    def project_regions(self, feature_map):
        return project_regions(feature_map, self.visual)

    def attn_pool(self, feature_map):
        return attn_pool(feature_map, self.visual, self.attn)

    # Batched paths used by training; the mean-pool encoder only sees the
    # token sum, so prompts are passed as (sum of context rows, length).

    def encode_mean_tokens(self, means: np.ndarray):
        """Text features for a stack of mean token vectors ``(K, D)``; returns ``(features, norms)``."""
        U = means @ self.text.W_t.T
        norms = np.linalg.norm(U, axis=1)
        if np.any(norms == 0.0):
            raise DegenerateInputError("a text feature is the zero vector before normalization")
        return U / norms[:, None], norms

    def mean_tokens_vjp(self, features: np.ndarray, norms: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Backpropagate ``grad`` (K, D_t) on unit features to the mean token vectors."""
        dU = (grad - features * np.sum(features * grad, axis=1, keepdims=True)) / norms[:, None]
        return dU @ self.text.W_t

    def project_batch(self, features: np.ndarray) -> np.ndarray:
        """Project a ``(..., D_v)`` stack of region features to text space."""
        return (features @ self.visual.W_v.T) @ self.visual.W_proj.T

    def matrices(self) -> dict[str, np.ndarray]:
        return {"W_t": self.text.W_t, "W_v": self.visual.W_v, "W_proj": self.visual.W_proj,
                "W_q": self.attn.W_q, "W_k": self.attn.W_k}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, m in self.matrices().items():
            h.update(name.encode())
            h.update(str(m.shape).encode())
            h.update(np.ascontiguousarray(m).tobytes())
        h.update(repr(self.attn.scale).encode())
        return h.hexdigest()


def dump_encoder_params(enc: ToyEncoders, directory) -> None:
    """One feature-format file per matrix (rows x cols x 1) plus ``index.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {"mode": enc.mode, "seed": enc.seed, "scale_C": enc.attn.scale, "matrices": []}
    for name, m in enc.matrices().items():
        fname = f"{name}.dcfm"
        write_feature_file(directory / fname, m[:, :, None])
        index["matrices"].append({"name": name, "file": fname, "shape": list(m.shape)})
    (directory / "index.json").write_text(json.dumps(index, indent=1) + "\n")


def load_encoder_params(directory) -> ToyEncoders:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    mats = {}
    for entry in index["matrices"]:
        arr = read_feature_file(directory / entry["file"])[:, :, 0].astype(np.float64)
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{entry['file']}: shape {arr.shape} disagrees with index {entry['shape']}")
        mats[entry["name"]] = arr
    return ToyEncoders(TextEncoderParams(mats["W_t"]), VisualProjectionParams(mats["W_v"], mats["W_proj"]),
                       AttnPoolParams(mats["W_q"], mats["W_k"], float(index["scale_C"])),
                       index.get("mode", "custom"), index.get("seed"))
