"""Dataset loading: IDX image/label pairs, CIFAR-10 binary batches, and a
synthetic arrangement task sized for desk-scale experiments.

All loaders return a `Dataset` of float32 images standardized per channel
with statistics computed on the training split only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .rng import named_stream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels


@dataclass
class Dataset:
    name: str
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def classes(self) -> int:
        return int(max(self.train_y.max(), self.test_y.max())) + 1

    @property
    def input_shape(self):
        return tuple(self.train_x.shape[1:])


def _standardize(train_x: np.ndarray, test_x: np.ndarray):
    """Per-channel zero-mean/unit-variance using training statistics."""
    mean = train_x.mean(axis=(0, 2, 3), keepdims=True)
    std = train_x.std(axis=(0, 2, 3), keepdims=True)
    std = np.maximum(std, 1e-8)
    return ((train_x - mean) / std).astype(np.float32), \
           ((test_x - mean) / std).astype(np.float32)


# ---------------------------------------------------------------------------
# IDX (the classic big-endian image/label container)
# ---------------------------------------------------------------------------

def _read_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise DataError(f"{path}: truncated IDX image header")
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataError(f"{path}: bad IDX image magic 0x{magic:08x}")
        raw = fh.read()
    if len(raw) != n * rows * cols:
        raise DataError(f"{path}: expected {n * rows * cols} pixel bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols).astype(np.float32) / 255.0


def _read_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise DataError(f"{path}: truncated IDX label header")
        magic, n = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DataError(f"{path}: bad IDX label magic 0x{magic:08x}")
        raw = fh.read()
    if len(raw) != n:
        raise DataError(f"{path}: expected {n} label bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx(train_images: str, train_labels: str,
             test_images: str, test_labels: str) -> Dataset:
    tx, ty = _read_idx_images(train_images), _read_idx_labels(train_labels)
    vx, vy = _read_idx_images(test_images), _read_idx_labels(test_labels)
    if len(tx) != len(ty):
        raise DataError(f"train images/labels disagree: {len(tx)} vs {len(ty)}")
    if len(vx) != len(vy):
        raise DataError(f"test images/labels disagree: {len(vx)} vs {len(vy)}")
    tx, vx = _standardize(tx, vx)
    return Dataset("idx", tx, ty, vx, vy)


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches
# ---------------------------------------------------------------------------

def _read_cifar_file(path: str):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise DataError(f"{path}: size {len(raw)} is not a whole number of "
                        f"{CIFAR_RECORD_BYTES}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataError(f"{path}: label {labels.max()} out of range for CIFAR-10")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar10_bin(paths) -> Dataset:
    """Concatenates all but the last path as training batches; the last
    path is the test batch."""
    if len(paths) < 2:
        raise DataError("cifar10bin needs at least one train batch and one test batch")
    parts = [_read_cifar_file(p) for p in paths]
    tx = np.concatenate([p[0] for p in parts[:-1]])
    ty = np.concatenate([p[1] for p in parts[:-1]])
    vx, vy = parts[-1]
    tx, vx = _standardize(tx, vx)
    return Dataset("cifar10bin", tx, ty, vx, vy)


# ---------------------------------------------------------------------------
# synthetic arrangement task
# ---------------------------------------------------------------------------

def synth_dataset(n_per_class: int = 40, seed: int = 0, noise_scale: float = 0.35,
                  image_size: int = 12, channels: int = 1, classes: int = 10) -> Dataset:
    """Paired-motif arrangement task. Classes come in pairs sharing the same
    two 3x3 motifs; the even class places motif A top-left and motif B
    bottom-right, the odd class swaps them. Pooled global statistics are
    identical within a pair, so telling them apart requires features that
    bind a motif to its position. The motif bank is fixed; `seed` drives
    noise draws and the split shuffle only.
    """
    if classes < 2 or classes % 2:
        raise DataError(f"arrangement task needs an even class count >= 2, got {classes}")
    if image_size < 10:
        raise DataError(f"image_size must be >= 10, got {image_size}")
    if n_per_class < 5:
        raise DataError(f"n_per_class must be >= 5, got {n_per_class}")
    pairs = classes // 2
    motif_gen = named_stream(0, "data/motifs")
    motifs = np.sign(motif_gen.standard_normal((pairs, 2, 3, 3))).astype(np.float32)
    motifs[motifs == 0] = 1.0

    gen = named_stream(seed, "data/synthetic")
    # corner placement: the zero-padding at the borders is the only absolute
    # position signal a convolution can anchor on, so motifs sit flush in
    # opposite corners to make the arrangement learnable at all
    tl = (0, 0)
    br = (image_size - 3, image_size - 3)
    xs, ys = [], []
    for c in range(classes):
        a, b = motifs[c // 2]
        if c % 2:
            a, b = b, a
        x = noise_scale * gen.standard_normal(
            (n_per_class, channels, image_size, image_size)).astype(np.float32)
        x[:, :, tl[0]:tl[0] + 3, tl[1]:tl[1] + 3] += a
        x[:, :, br[0]:br[0] + 3, br[1]:br[1] + 3] += b
        xs.append(x)
        ys.append(np.full(n_per_class, c, dtype=np.int64))

    # stratified 80/20 split, then shuffle each side
    train_parts, test_parts = [], []
    n_train = max(1, int(round(0.8 * n_per_class)))
    for x, y in zip(xs, ys):
        order = gen.permutation(n_per_class)
        train_parts.append((x[order[:n_train]], y[:n_train]))
        test_parts.append((x[order[n_train:]], y[n_train:]))
    tx = np.concatenate([p[0] for p in train_parts])
    ty = np.concatenate([p[1] for p in train_parts])
    vx = np.concatenate([p[0] for p in test_parts])
    vy = np.concatenate([p[1] for p in test_parts])
    tperm = gen.permutation(len(tx))
    vperm = gen.permutation(len(vx))
    tx, vx = _standardize(tx[tperm], vx[vperm])
    return Dataset("synthetic", tx, ty[tperm], vx, vy[vperm])


def subsample(data: Dataset, subset_size: int, seed: int) -> Dataset:
    """Deterministic stratified reduction of the training split (test split
    is left whole). subset_size <= 0 returns the dataset unchanged."""
    if subset_size <= 0 or subset_size >= len(data.train_x):
        return data
    gen = named_stream(seed, "data/subsample")
    picked = []
    classes = data.classes
    per = [subset_size // classes + (1 if c < subset_size % classes else 0)
           for c in range(classes)]
    for c in range(classes):
        idx = np.flatnonzero(data.train_y == c)
        if len(idx) < per[c]:
            raise DataError(f"class {c} has only {len(idx)} samples, needed {per[c]}")
        picked.append(gen.permutation(idx)[:per[c]])
    sel = gen.permutation(np.concatenate(picked))
    return Dataset(data.name, data.train_x[sel], data.train_y[sel],
                   data.test_x, data.test_y)
