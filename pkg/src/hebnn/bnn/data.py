"""IDX and CSV dataset readers."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX buffer: 2 zero bytes, type code, rank, big-endian u32 dims, data."""
    if len(data) < 4:
        raise DatasetError("IDX buffer shorter than its magic number")
    zero, code, rank = struct.unpack_from(">HBB", data)
    if zero != 0 or code not in _IDX_TYPES or rank == 0:
        raise DatasetError(f"bad IDX magic 0x{int.from_bytes(data[:4], 'big'):08x}")
    head = 4 + 4 * rank
    if len(data) < head:
        raise DatasetError("IDX header truncated")
    dims = struct.unpack_from(f">{rank}I", data, 4)
    dtype = _IDX_TYPES[code]
    expected = head + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise DatasetError(f"IDX payload is {len(data) - head} bytes, expected {expected - head}")
    return np.frombuffer(data, dtype=dtype, offset=head).reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    with _open(path) as f:
        return parse_idx(f.read())


def write_idx(path, arr: np.ndarray):
    arr = np.asarray(arr)
    codes = {v.newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise DatasetError(f"dtype {arr.dtype} has no IDX type code")
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, code, arr.ndim))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.astype(_IDX_TYPES[code]).tobytes())


@dataclass
class Dataset:
    images: np.ndarray  # float64 in [0, 1], shape (n, ...)
    labels: np.ndarray  # int64 in [0, num_classes)
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"label out of range [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, n: int | None = None, start: int = 0) -> "Dataset":
        stop = None if n is None else start + n
        return Dataset(self.images[start:stop], self.labels[start:stop], self.num_classes)


def _labels_path_for(images_path: Path) -> Path:
    name = images_path.name
    for a, b in (("images-idx3", "labels-idx1"), ("images.idx3", "labels.idx1"), ("images", "labels")):
        if a in name:
            return images_path.with_name(name.replace(a, b))
    raise DatasetError(f"cannot infer labels file for {images_path}")


def load_dataset(path, labels_path=None, format: str | None = None, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair or a ``label,pixel...`` CSV file.

    Pixel values are divided by 255 when stored as bytes (or when any exceeds 1).
    """
    path = Path(path)
    if format is None:
        format = "csv" if path.suffix == ".csv" else "idx"
    if format == "idx":
        images = read_idx(path)
        labels = read_idx(labels_path or _labels_path_for(path))
        if labels.ndim != 1:
            raise DatasetError(f"labels must be 1-D, got shape {labels.shape}")
        if images.shape[0] != labels.shape[0]:
            raise DatasetError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    elif format == "csv":
        try:
            raw = np.loadtxt(path, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise DatasetError(f"malformed CSV {path}: {exc}") from exc
        if raw.shape[1] < 2:
            raise DatasetError("CSV rows need a label and at least one pixel")
        labels = raw[:, 0]
        if not np.all(labels == np.round(labels)):
            raise DatasetError("CSV labels must be integers")
        images = raw[:, 1:]
        side = int(round(np.sqrt(images.shape[1])))
        if side * side == images.shape[1]:
            images = images.reshape(-1, side, side)
    else:
        raise DatasetError(f"unknown dataset format {format!r}")
    was_bytes = images.dtype == np.uint8
    images = images.astype(np.float64)
    if was_bytes or (images.size and images.max() > 1.0):
        images = images / 255.0
    return Dataset(images, labels.astype(np.int64), num_classes)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(directory=None) -> Path | None:
    """Directory holding the four MNIST IDX files (optionally gzipped), or None."""
    candidates = [directory] if directory else [
        os.environ.get("HEBNN_MNIST_DIR"),
        Path(__file__).resolve().parents[3] / "data" / "mnist",
        Path.home() / "data" / "mnist",
    ]
    for c in candidates:
        if c and all(_resolve(Path(c), n) for n in MNIST_FILES["train"] + MNIST_FILES["test"]):
            return Path(c)
    return None


def _resolve(directory: Path, name: str) -> Path | None:
    for candidate in (directory / name, directory / (name + ".gz"),
                      directory / name.replace("-idx", ".idx")):
        if candidate.exists():
            return candidate
    return None


def load_mnist(directory=None) -> tuple[Dataset, Dataset]:
    d = find_mnist(directory)
    if d is None:
        raise DatasetError("MNIST IDX files not found; set HEBNN_MNIST_DIR")
    out = []
    for split in ("train", "test"):
        img, lab = (_resolve(d, n) for n in MNIST_FILES[split])
        out.append(load_dataset(img, lab, "idx"))
    return out[0], out[1]
