"""Datasets: the procedural shapes16 set, toy blobs, and IDX file I/O."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SHAPE_CLASSES = ("square", "circle", "plus", "cross")


@dataclass(frozen=True)
class DatasetHandle:
    images: np.ndarray  # (n, C, H, W) or (n, D), values in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        if len(self.images) < 1 or len(self.images) != len(self.labels):
            raise ValueError(f"need n >= 1 images with matching labels, got {len(self.images)}/{len(self.labels)}")
        if self.images.min() < 0 or self.images.max() > 1:
            raise ValueError("image values must lie in [0, 1]")
        if self.labels.min() < 0:
            raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1

    def subset(self, n: int) -> "DatasetHandle":
        return DatasetHandle(self.images[:n], self.labels[:n], self.split, f"{self.provenance}[:{n}]")

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()


def _template(kind: str, cy: int, cx: int, size: int = 16) -> np.ndarray:
    img = np.zeros((size, size))
    yy, xx = np.mgrid[:size, :size]
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        img[(np.abs(dy) <= 3) & (np.abs(dx) <= 3)] = 1.0
    elif kind == "circle":
        r = np.sqrt(dy ** 2 + dx ** 2)
        img[(r >= 3.0) & (r <= 4.2)] = 1.0
    elif kind == "plus":
        img[(np.abs(dy) <= 4) & (dx == 0)] = 1.0
        img[(np.abs(dx) <= 4) & (dy == 0)] = 1.0
    elif kind == "cross":
        img[(np.abs(dy) <= 4) & ((dy == dx) | (dy == -dx))] = 1.0
    else:
        raise ValueError(kind)
    return img


def gen_shapes16(n_per_class: int, noise_std: float = 0.2, seed: int = 0, split: str = "train",
                 contrast: float = 0.5, background: float = 0.25) -> DatasetHandle:
    """16x16 single-channel images of four shapes with +-2 px jitter and noise.

    Shapes are drawn at ``background + contrast`` on a ``background`` field.
    The moderate contrast keeps an L-inf budget of 0.1 meaningful against
    the class signal.  Pixel values are quantized to multiples of 1/255 so
    the set survives an IDX round trip unchanged.
    """
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for label, kind in enumerate(SHAPE_CLASSES):
        for _ in range(n_per_class):
            cy, cx = 7 + rng.integers(-2, 3), 7 + rng.integers(-2, 3)
            img = background + contrast * _template(kind, cy, cx)
            if noise_std > 0:
                img = img + rng.normal(0.0, noise_std, img.shape)
            images.append(img)
            labels.append(label)
    order = rng.permutation(len(labels))
    x = np.round(np.clip(np.stack(images), 0.0, 1.0) * 255.0) / 255.0
    x = x[order, None].astype(np.float32)
    y = np.asarray(labels, dtype=np.int64)[order]
    tag = f"shapes16(n_per_class={n_per_class},noise_std={noise_std},seed={seed},contrast={contrast},background={background})"
    return DatasetHandle(x, y, split, tag)


def shapes16_splits(n_train_per_class=300, n_test_per_class=100, noise_std=0.2, seed=0, **kwargs):
    train_seed, test_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    return (gen_shapes16(n_train_per_class, noise_std, train_seed, "train", **kwargs),
            gen_shapes16(n_test_per_class, noise_std, test_seed, "test", **kwargs))


def gen_blobs(n_per_class: int, seed: int = 0, separation: float = 0.6, spread: float = 0.05, split="train"):
    """Two Gaussian blobs in the unit square, linearly separable at the defaults."""
    rng = np.random.default_rng(seed)
    centers = np.array([[0.5 - separation / 2, 0.5], [0.5 + separation / 2, 0.5]])
    x = np.concatenate([c + rng.normal(0, spread, (n_per_class, 2)) for c in centers])
    y = np.repeat(np.arange(2), n_per_class)
    order = rng.permutation(len(y))
    return DatasetHandle(np.clip(x[order], 0, 1).astype(np.float32), y[order], split, f"blobs(seed={seed})")


# -- IDX --------------------------------------------------------------------------

def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    if len(raw) - header != expected:
        raise FormatError(f"{path}: payload has {len(raw) - header} bytes, dims {dims} need {expected}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split: str = "train") -> DatasetHandle:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    if len(images) == 0:
        raise FormatError("IDX files hold no samples")
    x = (images.astype(np.float32) / 255.0)[:, None]
    digest = hashlib.sha256(Path(images_path).read_bytes() + Path(labels_path).read_bytes()).hexdigest()
    return DatasetHandle(x, labels.astype(np.int64), split, f"idx:{digest[:16]}")


def save_idx(dataset: DatasetHandle, images_path, labels_path) -> None:
    x = dataset.images
    if x.ndim == 4:
        if x.shape[1] != 1:
            raise FormatError("IDX export supports single-channel images only")
        x = x[:, 0]
    pixels = np.round(x * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *pixels.shape))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, len(dataset.labels)))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def split_paths(directory, split: str):
    d = Path(directory)
    return d / f"{split}-images-idx3-ubyte", d / f"{split}-labels-idx1-ubyte"


def save_split(dataset: DatasetHandle, directory, split: str) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    save_idx(dataset, *split_paths(directory, split))


def load_split(directory, split: str) -> DatasetHandle:
    return load_idx(*split_paths(directory, split), split=split)
