"""Labeled datasets: IDX (MNIST) files and synthetic Gaussian blobs."""
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ParseError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    inputs: np.ndarray  # (n, d), entries in [0, 1]
    labels: np.ndarray  # (n,), ints in [0, k)
    k: int

    def __post_init__(self):
        X = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels)
        if X.ndim != 2 or y.shape != (X.shape[0],):
            raise InvalidInputError(f"bad dataset shapes {X.shape} / {y.shape}")
        if X.shape[0] < 1:
            raise InvalidInputError("dataset is empty")
        if not np.all((X >= 0.0) & (X <= 1.0)):
            raise InvalidInputError("inputs must lie in [0, 1]")
        if not np.issubdtype(y.dtype, np.integer) or np.any((y < 0) | (y >= self.k)):
            raise InvalidInputError(f"labels must be integers in [0, {self.k})")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "labels", y.astype(np.int64))

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d(self) -> int:
        return self.inputs.shape[1]

    def subset(self, index) -> "LabeledDataset":
        return LabeledDataset(self.inputs[index], self.labels[index], self.k)

    def split(self, n_first: int, seed: int | None = None):
        """Two disjoint parts; shuffled only when a seed is given."""
        order = np.arange(self.n)
        if seed is not None:
            order = np.random.default_rng(seed).permutation(self.n)
        return self.subset(order[:n_first]), self.subset(order[n_first:])


def _read(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def _parse_idx(blob: bytes, magic: int, ndim: int, path):
    if len(blob) < 4:
        raise ParseError("file too short for IDX magic", offset=len(blob), path=path)
    (found,) = struct.unpack_from(">I", blob, 0)
    if found != magic:
        raise ParseError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", offset=0, path=path)
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise ParseError("truncated IDX header", offset=len(blob), path=path)
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(blob) != header + size:
        raise ParseError(f"expected {size} data bytes, found {len(blob) - header}",
                         offset=min(len(blob), header + size), path=path)
    return np.frombuffer(blob, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, k: int | None = None) -> LabeledDataset:
    """Read an IDX image/label file pair (optionally gzipped); pixels scaled by 1/255."""
    images = _parse_idx(_read(images_path), IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read(labels_path), LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels",
                         offset=4, path=labels_path)
    if images.shape[0] == 0:
        raise ParseError("IDX file holds no items", offset=4, path=images_path)
    y = labels.astype(np.int64)
    k = int(y.max()) + 1 if k is None else k
    return LabeledDataset(images.reshape(len(images), -1) / 255.0, y, k)


def to_bytes(ds: LabeledDataset, shape: tuple | None = None):
    """IDX encodings ``(images, labels)``; inputs must lie on the 1/255 grid."""
    pixels = np.rint(ds.inputs * 255.0)
    if not np.array_equal(pixels / 255.0, ds.inputs):
        raise InvalidInputError("inputs are not multiples of 1/255; IDX would be lossy")
    if np.any(ds.labels > 255):
        raise InvalidInputError("IDX labels are single bytes")
    rows, cols = shape if shape is not None else (1, ds.d)
    if rows * cols != ds.d:
        raise InvalidInputError(f"image shape {shape} does not hold d={ds.d}")
    images = struct.pack(">4I", IMAGES_MAGIC, ds.n, rows, cols) + pixels.astype(np.uint8).tobytes()
    labels = struct.pack(">2I", LABELS_MAGIC, ds.n) + ds.labels.astype(np.uint8).tobytes()
    return images, labels


def save_idx(ds: LabeledDataset, images_path, labels_path, shape=None) -> None:
    images, labels = to_bytes(ds, shape)
    Path(images_path).write_bytes(images)
    Path(labels_path).write_bytes(labels)


def synth_blobs(k: int, d: int, n: int, separation: float = 1.0, seed: int = 0,
                spread: float = 0.1) -> LabeledDataset:
    """Gaussian blobs in [0,1]^d, quantised to 8 bits like real images.

    Class centres are drawn uniformly from [0.5 - separation/2, 0.5 + separation/2]^d
    (clipped to [0, 1]) and labels cycle through the classes so every class
    is present whenever ``n >= k``.
    """
    if min(k, d, n) < 1:
        raise InvalidInputError("k, d and n must be >= 1")
    rng = np.random.default_rng(seed)
    half = min(separation, 1.0) / 2.0
    centres = rng.uniform(0.5 - half, 0.5 + half, size=(k, d))
    labels = np.arange(n) % k
    rng.shuffle(labels)
    X = centres[labels] + spread * rng.standard_normal((n, d))
    X = np.rint(np.clip(X, 0.0, 1.0) * 255.0) / 255.0
    return LabeledDataset(X, labels, k)
