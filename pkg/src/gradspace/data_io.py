"""Datasets: MNIST IDX files, synthetic generators, splits."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ParseError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or self.labels.shape != (self.inputs.shape[0],):
            raise ConfigError(f"inputs {self.inputs.shape} and labels {self.labels.shape} do not line up")
        if not np.all(np.isfinite(self.inputs)) or self.inputs.size and (
                self.inputs.min() < 0.0 or self.inputs.max() > 1.0):
            raise ConfigError("inputs must be finite and lie in [0, 1]")
        self.meta.setdefault("dim", self.inputs.shape[1])
        self.meta.setdefault("num_classes", int(self.labels.max()) + 1 if self.labels.size else 0)
        ncls = self.meta["num_classes"]
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= ncls):
            raise ConfigError(f"labels must lie in [0, {ncls})")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_classes(self) -> int:
        return int(self.meta["num_classes"])

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def subset(self, idx, tag: str | None = None) -> "Dataset":
        meta = dict(self.meta)
        if tag is not None:
            meta["split"] = tag
        return Dataset(self.inputs[idx], self.labels[idx], meta)

    def head(self, count: int | None) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return self.subset(slice(0, count))


def _open(path, mode="rb"):
    path = os.fspath(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _header(buf: bytes, expected_magic: int, ndim: int, what: str) -> tuple[int, ...]:
    need = 4 * (1 + ndim)
    if len(buf) < need:
        raise ParseError(f"{what}: truncated header ({len(buf)} bytes)", offset=len(buf) if buf else 0)
    magic = struct.unpack_from(">I", buf, 0)[0]
    if magic != expected_magic:
        raise ParseError(f"{what}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    return struct.unpack_from(f">{ndim}I", buf, 4)


def parse_idx_images(buf: bytes) -> np.ndarray:
    count, rows, cols = _header(buf, IMAGE_MAGIC, 3, "images")
    start = 16
    need = count * rows * cols
    if len(buf) - start < need:
        raise ParseError(f"images: expected {need} pixel bytes, found {len(buf) - start}", offset=len(buf))
    if len(buf) - start > need:
        raise ParseError("images: trailing bytes after pixel data", offset=start + need)
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).reshape(count, rows, cols)


def parse_idx_labels(buf: bytes) -> np.ndarray:
    (count,) = _header(buf, LABEL_MAGIC, 1, "labels")
    start = 8
    if len(buf) - start < count:
        raise ParseError(f"labels: expected {count} label bytes, found {len(buf) - start}", offset=len(buf))
    if len(buf) - start > count:
        raise ParseError("labels: trailing bytes after label data", offset=start + count)
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=start)


def load_idx(images_path, labels_path, name: str = "idx", num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by /255."""
    with _open(images_path) as f:
        images = parse_idx_images(f.read())
    with _open(labels_path) as f:
        labels = parse_idx_labels(f.read())
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels", offset=4)
    meta = {
        "name": name,
        "image_shape": [int(images.shape[1]), int(images.shape[2])],
        "scaling": "pixel/255",
    }
    if num_classes is not None:
        meta["num_classes"] = num_classes
    return Dataset(images.reshape(images.shape[0], -1) / 255.0, labels.astype(np.int64), meta)


def idx_images_bytes(images: np.ndarray) -> bytes:
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ConfigError("IDX images must be a uint8 array of shape (count, rows, cols)")
    return struct.pack(">4I", IMAGE_MAGIC, *images.shape) + np.ascontiguousarray(images).tobytes()


def idx_labels_bytes(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ConfigError("IDX labels must fit in a byte")
    return struct.pack(">2I", LABEL_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def write_idx(dataset: Dataset, images_path, labels_path) -> None:
    """Write a dataset back to IDX. Pixels are re-quantized with round(x*255)."""
    shape = dataset.meta.get("image_shape", [1, dataset.dim])
    pixels = np.rint(dataset.inputs * 255.0).astype(np.uint8).reshape(len(dataset), *shape)
    # gzip output must not embed a timestamp so that reruns are byte-identical
    for path, payload in ((images_path, idx_images_bytes(pixels)), (labels_path, idx_labels_bytes(dataset.labels))):
        path = os.fspath(path)
        if path.endswith(".gz"):
            with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
                f.write(payload)
        else:
            with open(path, "wb") as f:
                f.write(payload)


def find_mnist(directory, split: str) -> tuple[str, str]:
    if split not in MNIST_FILES:
        raise ConfigError(f"unknown MNIST split {split!r}")
    found = []
    for stem in MNIST_FILES[split]:
        for suffix in ("", ".gz"):
            p = os.path.join(directory, stem + suffix)
            if os.path.exists(p):
                found.append(p)
                break
        else:
            raise FileNotFoundError(f"{stem}[.gz] not found in {directory}; run scripts/fetch_mnist.py")
    return found[0], found[1]


def load_mnist(directory, split: str = "train") -> Dataset:
    images, labels = find_mnist(directory, split)
    ds = load_idx(images, labels, name="mnist", num_classes=10)
    ds.meta["split"] = split
    return ds


def split_half(dataset: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffled, class-stratified split into two disjoint halves.

    The first half has ``len // 2`` samples. Original order is kept inside
    each half.
    """
    rng = np.random.default_rng(seed)
    first, leftovers = [], []
    for c in np.unique(dataset.labels):
        idx = rng.permutation(np.flatnonzero(dataset.labels == c))
        k = len(idx) // 2
        first.append(idx[:k])
        leftovers.append(idx[2 * k:])
    first = np.concatenate(first) if first else np.zeros(0, dtype=np.int64)
    leftovers = rng.permutation(np.concatenate(leftovers)) if leftovers else np.zeros(0, dtype=np.int64)
    need = len(dataset) // 2 - len(first)
    first = np.sort(np.concatenate([first, leftovers[:need]]))
    mask = np.ones(len(dataset), dtype=bool)
    mask[first] = False
    second = np.flatnonzero(mask)
    return dataset.subset(first, "half-a"), dataset.subset(second, "half-b")


def synth_blobs(num_classes: int, dim: int, per_class: int, separation: float, seed: int,
                noise: float = 0.05) -> Dataset:
    """Gaussian blobs around 0.5, clipped to [0, 1].

    ``separation`` is the distance between any two class centres in units of
    the per-coordinate noise ``noise``.
    """
    if num_classes < 1 or dim < 1 or per_class < 0:
        raise ConfigError("num_classes and dim must be positive")
    rng = np.random.default_rng(seed)
    if dim >= num_classes:
        q, _ = np.linalg.qr(rng.standard_normal((dim, num_classes)))
        dirs = q.T
    else:
        dirs = rng.standard_normal((num_classes, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    centres = 0.5 + dirs * (separation * noise / np.sqrt(2.0))
    labels = np.repeat(np.arange(num_classes), per_class)
    inputs = centres[labels] + noise * rng.standard_normal((len(labels), dim))
    order = rng.permutation(len(labels))
    meta = {"name": "blobs", "num_classes": num_classes, "separation": separation, "seed": seed}
    return Dataset(np.clip(inputs[order], 0.0, 1.0), labels[order], meta)


def synth_binary(modes: int, dim: int, count: int, seed: int, flip: float = 0.05) -> Dataset:
    """Mixture of Bernoulli modes: random binary prototypes with bit flips."""
    if modes < 1 or dim < 1:
        raise ConfigError("modes and dim must be positive")
    rng = np.random.default_rng(seed)
    protos = (rng.random((modes, dim)) < 0.5).astype(np.float64)
    labels = rng.integers(0, modes, size=count)
    flips = rng.random((count, dim)) < flip
    inputs = np.abs(protos[labels] - flips)
    return Dataset(inputs, labels, {"name": "binary-modes", "num_classes": modes, "seed": seed})


def binarize(dataset: Dataset, threshold: float = 0.5) -> Dataset:
    meta = dict(dataset.meta, binarized=threshold)
    return replace(dataset, inputs=(dataset.inputs > threshold).astype(np.float64), meta=meta)
