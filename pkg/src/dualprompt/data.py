"""Datasets: class catalogs, label matrices, synthetic generation, masking and file formats.

Label matrices are plain ``int8`` arrays of shape ``(n_images, n_classes)`` with
entries in ``{+1, -1, 0}`` (positive, negative, unknown).
"""

from __future__ import annotations

import csv
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"DCFM"
_FEATURE_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """A file on disk does not follow the expected binary or JSON layout."""


@dataclass(frozen=True)
class ClassCatalog:
    names: tuple[str, ...]
    token_embeddings: np.ndarray
    prototypes: np.ndarray | None = None

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if any(not n for n in names):
            raise ValueError("class names must be non-empty")
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique")
        tok = np.asarray(self.token_embeddings, dtype=np.float64)
        if tok.ndim != 2 or tok.shape[0] != len(names):
            raise ValueError(
                f"token_embeddings must have shape ({len(names)}, D), got {tok.shape}"
            )
        object.__setattr__(self, "token_embeddings", tok)
        if self.prototypes is not None:
            proto = np.asarray(self.prototypes, dtype=np.float64)
            if proto.shape[0] != len(names):
                raise ValueError("one prototype per class is required")
            norms = np.linalg.norm(proto, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("prototypes must be unit vectors")
            object.__setattr__(self, "prototypes", proto)

    def __len__(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.token_embeddings.shape[1]

    def index(self, name_or_index: str | int) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            idx = int(name_or_index)
            if not 0 <= idx < len(self.names):
                raise IndexError(f"class index {idx} out of range [0, {len(self.names)})")
            return idx
        try:
            return self.names.index(name_or_index)
        except ValueError:
            raise KeyError(f"unknown class {name_or_index!r}") from None


def make_catalog(n_classes: int, dim: int, seed: int, names=None) -> ClassCatalog:
    """Sample ``n_classes`` prototypes uniformly on the unit sphere.

    Prototypes are rounded to float32 so that they survive the on-disk
    formats unchanged; token embeddings equal the prototypes.
    """
    if n_classes < 1 or dim < 1:
        raise ValueError("n_classes and dim must be >= 1")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n_classes, dim))
    proto = g / np.linalg.norm(g, axis=1, keepdims=True)
    proto = proto.astype(np.float32).astype(np.float64)
    if names is None:
        names = [f"class{m:02d}" for m in range(n_classes)]
    return ClassCatalog(tuple(names), proto.copy(), proto)


@dataclass
class ImageRecord:
    id: str
    feature_map: np.ndarray
    planted: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        fm = np.asarray(self.feature_map)
        if fm.ndim != 3 or min(fm.shape) < 1:
            raise ValueError(f"feature map must be H x W x D with all sizes >= 1, got {fm.shape}")
        if not np.all(np.isfinite(fm)):
            raise ValueError(f"feature map of image {self.id!r} has non-finite values")
        self.feature_map = fm


@dataclass
class Dataset:
    catalog: ClassCatalog
    images: list[ImageRecord]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = check_labels(self.labels)
        if self.labels.shape != (len(self.images), len(self.catalog)):
            raise ValueError(
                f"label matrix shape {self.labels.shape} does not match "
                f"{len(self.images)} images x {len(self.catalog)} classes"
            )

    def __len__(self) -> int:
        return len(self.images)

    def features(self) -> np.ndarray:
        """Stack all feature maps into one ``(N, H, W, D)`` array."""
        return np.stack([im.feature_map for im in self.images])

    def find(self, image_id: str) -> int:
        for i, im in enumerate(self.images):
            if im.id == image_id:
                return i
        raise KeyError(f"unknown image id {image_id!r}")

    def with_labels(self, labels: np.ndarray) -> Dataset:
        return Dataset(self.catalog, self.images, labels)


@dataclass(frozen=True)
class ZslSplit:
    seen: frozenset[int]
    unseen: frozenset[int]

    def __post_init__(self):
        if not self.seen or not self.unseen:
            raise ValueError("seen and unseen class sets must both be non-empty")
        if self.seen & self.unseen:
            raise ValueError("seen and unseen class sets overlap")

    @property
    def n_classes(self) -> int:
        return len(self.seen) + len(self.unseen)

    def to_dict(self) -> dict:
        return {"seen": sorted(self.seen), "unseen": sorted(self.unseen)}

    @classmethod
    def from_dict(cls, d: dict) -> ZslSplit:
        return cls(frozenset(int(i) for i in d["seen"]), frozenset(int(i) for i in d["unseen"]))


def check_labels(labels) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"label matrix must be 2-D, got shape {arr.shape}")
    if arr.size and not np.all(np.isin(arr, (-1, 0, 1))):
        raise ValueError("label entries must be +1, -1 or 0")
    return arr.astype(np.int8)


def synth_dataset(n_images: int, classes: ClassCatalog, grid=(8, 8), labels_per_image=(1, 3),
                  noise_sigma: float = 0.1, seed: int = 0, id_prefix: str = "img") -> Dataset:
    """Plant class prototypes in noise grids.

    Each image draws a uniform number of positive classes from
    ``labels_per_image`` (inclusive range), then a uniform set of that many
    classes and the same number of distinct cells.  Planted cells hold the
    class prototype plus Gaussian noise, all other cells hold pure noise.
    The returned labels are fully annotated.
    """
    if classes.prototypes is None:
        raise ValueError("synthetic generation needs a catalog with prototypes")
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    lo, hi = (labels_per_image, labels_per_image) if np.isscalar(labels_per_image) else labels_per_image
    lo, hi = int(lo), int(hi)
    H, W = int(grid[0]), int(grid[1])
    M = len(classes)
    if not 1 <= lo <= hi:
        raise ValueError(f"labels_per_image range must satisfy 1 <= min <= max, got ({lo}, {hi})")
    if hi > M:
        raise ValueError(f"labels_per_image max {hi} exceeds the number of classes {M}")
    if H < 1 or W < 1:
        raise ValueError("grid dimensions must be >= 1")
    if hi > H * W:
        raise ValueError(
            f"grid {H}x{W} has {H * W} cells, too few to host {hi} distinct planted labels"
        )

    rng = np.random.default_rng(seed)
    D = classes.prototypes.shape[1]
    R = H * W
    labels = np.full((n_images, M), -1, dtype=np.int8)
    images = []
    for n in range(n_images):
        k = int(rng.integers(lo, hi + 1))
        cls = rng.choice(M, size=k, replace=False)
        cells = rng.choice(R, size=k, replace=False)
        fm = rng.normal(0.0, noise_sigma, size=(R, D)) if noise_sigma > 0 else np.zeros((R, D))
        fm[cells] += classes.prototypes[cls]
        labels[n, cls] = 1
        planted = {int(c): int(r) for c, r in zip(cls, cells)}
        images.append(ImageRecord(f"{id_prefix}{n:05d}", fm.reshape(H, W, D).astype(np.float32), planted))
    return Dataset(classes, images, labels)


def mask_labels(full, keep_fraction: float, seed: int) -> np.ndarray:
    """Keep a uniform random subset of ``round(keep_fraction * N * M)`` cells; zero the rest."""
    full = check_labels(full)
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1], got {keep_fraction}")
    if np.any(full == 0):
        raise ValueError("mask_labels expects a fully annotated label matrix")
    n_cells = full.size
    n_keep = int(math.floor(keep_fraction * n_cells + 0.5))
    rng = np.random.default_rng(seed)
    keep = rng.permutation(n_cells)[:n_keep]
    out = np.zeros(n_cells, dtype=np.int8)
    out[keep] = full.reshape(-1)[keep]
    return out.reshape(full.shape)


def make_zsl_split(classes: ClassCatalog | int, unseen_indices) -> ZslSplit:
    M = classes if isinstance(classes, int) else len(classes)
    unseen = frozenset(int(i) for i in unseen_indices)
    if any(not 0 <= i < M for i in unseen):
        raise ValueError(f"unseen indices must lie in [0, {M})")
    if not unseen:
        raise ValueError("unseen class set is empty")
    if len(unseen) == M:
        raise ValueError("unseen class set covers every class; no seen classes remain")
    return ZslSplit(frozenset(range(M)) - unseen, unseen)


def restrict_labels_to_seen(labels, split: ZslSplit) -> np.ndarray:
    labels = check_labels(labels)
    if labels.shape[1] != split.n_classes:
        raise ValueError(
            f"label matrix has {labels.shape[1]} classes, split covers {split.n_classes}"
        )
    out = labels.copy()
    out[:, sorted(split.unseen)] = 0
    return out


# --- on-disk formats -------------------------------------------------------

def write_feature_file(path, array) -> None:
    arr = np.asarray(array)
    if arr.ndim != 3:
        raise ValueError(f"feature file payload must be 3-D, got shape {arr.shape}")
    H, W, D = arr.shape
    with open(path, "wb") as f:
        f.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, H, W, D))
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, H, W, D = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {FEATURE_MAGIC!r}")
    expected = _FEATURE_HEADER.size + 4 * H * W * D
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {H}x{W}x{D}, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(H, W, D)
    return arr.astype(np.float32)


def save_dataset(ds: Dataset, manifest_path, feature_dir: str = "features") -> None:
    """Write a manifest plus one feature file per image (and the class token table)."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    (root / feature_dir).mkdir(parents=True, exist_ok=True)
    images = []
    for im, row in zip(ds.images, ds.labels):
        rel = f"{feature_dir}/{im.id}.dcfm"
        write_feature_file(root / rel, im.feature_map)
        entry = {"id": im.id, "feature_file": rel, "labels": [int(v) for v in row]}
        if im.planted:
            entry["planted"] = {str(k): v for k, v in sorted(im.planted.items())}
        images.append(entry)
    tok_rel = f"{feature_dir}/class_tokens.dcfm"
    write_feature_file(root / tok_rel, ds.catalog.token_embeddings[:, None, :])
    manifest = {"classes": list(ds.catalog.names), "class_tokens": tok_rel, "images": images}
    if ds.catalog.prototypes is not None:
        proto_rel = f"{feature_dir}/class_prototypes.dcfm"
        write_feature_file(root / proto_rel, ds.catalog.prototypes[:, None, :])
        manifest["class_prototypes"] = proto_rel
    manifest_path.write_text(json.dumps(manifest, indent=1) + "\n")


def load_dataset(manifest_path) -> Dataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{manifest_path}: invalid JSON ({e})") from None
    for key in ("classes", "images"):
        if key not in manifest:
            raise FormatError(f"{manifest_path}: missing field {key!r}")
    root = manifest_path.parent
    names = manifest["classes"]
    if "class_tokens" not in manifest:
        raise FormatError(f"{manifest_path}: no class token table; pre-converted data must ship one")
    tokens = read_feature_file(root / manifest["class_tokens"]).astype(np.float64)[:, 0, :]
    proto = None
    if "class_prototypes" in manifest:
        proto = read_feature_file(root / manifest["class_prototypes"]).astype(np.float64)[:, 0, :]
    catalog = ClassCatalog(tuple(names), tokens, proto)
    images, labels = [], []
    for entry in manifest["images"]:
        fm = read_feature_file(root / entry["feature_file"])
        planted = {int(k): int(v) for k, v in entry.get("planted", {}).items()}
        images.append(ImageRecord(entry["id"], fm, planted))
        if len(entry["labels"]) != len(names):
            raise FormatError(f"image {entry['id']!r}: {len(entry['labels'])} labels for {len(names)} classes")
        labels.append(entry["labels"])
    return Dataset(catalog, images, np.array(labels, dtype=np.int8).reshape(len(images), len(names)))


def relabel_manifest(src, dst, labels) -> None:
    """Write a copy of manifest ``src`` at ``dst`` with a new label matrix.

    Feature files are not copied; their paths are rewritten relative to ``dst``.
    """
    src, dst = Path(src), Path(dst)
    manifest = json.loads(src.read_text())
    labels = check_labels(labels)
    if labels.shape != (len(manifest["images"]), len(manifest["classes"])):
        raise ValueError("label matrix does not match the manifest")

    def rebase(rel):
        return os.path.relpath((src.parent / rel).resolve(), dst.parent.resolve())

    for key in ("class_tokens", "class_prototypes"):
        if key in manifest:
            manifest[key] = rebase(manifest[key])
    for entry, row in zip(manifest["images"], labels):
        entry["feature_file"] = rebase(entry["feature_file"])
        entry["labels"] = [int(v) for v in row]
    dst.parent.mkdir(parents=True, exist_ok=True)
    dst.write_text(json.dumps(manifest, indent=1) + "\n")


def write_labels_csv(path, labels, class_names, image_ids) -> None:
    labels = check_labels(labels)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["id", *class_names])
        for iid, row in zip(image_ids, labels):
            w.writerow([iid, *(int(v) for v in row)])


def read_labels_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    ids = [r[0] for r in body]
    labels = check_labels(np.array([[int(v) for v in r[1:]] for r in body], dtype=np.int64).reshape(len(body), len(header) - 1))
    return header[1:], ids, labels
