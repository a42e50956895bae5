"""Datasets: IDX and CIFAR-10 binary readers, synthetic sets, batching."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

# per-channel normalization constants (ImageNet statistics, RGB order)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (count, channels, H, W), values in [0, 1]
    labels: np.ndarray  # (count,) int64
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (count, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels) or len(self.labels) == 0:
            raise DataFormatError(f"{len(self.images)} images vs {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise DataFormatError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx, split: str | None = None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.n_classes, split or self.split)


# --------------------------------------------------------------------------
# IDX
# --------------------------------------------------------------------------

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path) -> np.ndarray:
    """Parse a big-endian IDX container into a numpy array."""
    buf = _read_bytes(path)
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated header at byte {len(buf)} (need 4)")
    if buf[0] != 0 or buf[1] != 0 or buf[2] not in _IDX_TYPES:
        raise DataFormatError(f"{path}: bad IDX magic {buf[:4].hex()} at byte 0")
    dtype = np.dtype(_IDX_TYPES[buf[2]])
    ndim = buf[3]
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise DataFormatError(f"{path}: truncated dimension table at byte {len(buf)} (need {header})")
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(buf) - header
    if actual != expected:
        raise DataFormatError(f"{path}: expected {expected} data bytes after offset {header}, found {actual}")
    return np.frombuffer(buf, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_TYPES.items()}
    code = codes.get(arr.dtype.newbyteorder("="))
    if code is None:
        raise DataFormatError(f"dtype {arr.dtype} has no IDX type code")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(_IDX_TYPES[code]).tobytes())


def load_idx(images_path, labels_path=None, n_classes: int | None = None, split: str = "train") -> Dataset:
    """Load an IDX image file (and optional label file) as a :class:`Dataset`.

    Unsigned-byte pixels are scaled to [0, 1]; a 3-D image array gains a
    channel axis.  Without a label file every label is 0.
    """
    imgs = read_idx(images_path)
    if imgs.ndim == 3:
        imgs = imgs[:, None]
    elif imgs.ndim != 4:
        raise DataFormatError(f"{images_path}: expected 3 or 4 image dimensions, got {imgs.ndim}")
    images = imgs.astype(np.float32) / 255.0 if imgs.dtype == np.uint8 else imgs.astype(np.float32)
    if labels_path is None:
        labels = np.zeros(len(images), dtype=np.int64)
    else:
        labels = read_idx(labels_path).astype(np.int64).reshape(-1)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    return Dataset(images, labels, n_classes, split)


# --------------------------------------------------------------------------
# CIFAR-10 binary
# --------------------------------------------------------------------------


def _read_cifar_file(path: Path) -> Dataset:
    buf = path.read_bytes()
    if len(buf) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record")
    rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DataFormatError(f"{path}: label {labels[bad]} out of range at byte {bad * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, 10)


def load_cifar_binary(directory) -> tuple[Dataset, Dataset]:
    """Read the five training batches and the test batch of CIFAR-10 (binary version)."""
    directory = Path(directory)
    names = CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,)
    missing = [n for n in names if not (directory / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{directory}: missing CIFAR-10 files {missing}; expected {list(names)}")
    parts = [_read_cifar_file(directory / n) for n in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p.images for p in parts]), np.concatenate([p.labels for p in parts]), 10, "train")
    test = _read_cifar_file(directory / CIFAR_TEST_FILE)
    test.split = "test"
    return train, test


def write_cifar_binary(path, dataset: Dataset) -> None:
    if dataset.input_shape != (3, 32, 32):
        raise DataFormatError(f"CIFAR records hold (3, 32, 32) images, got {dataset.input_shape}")
    pixels = np.rint(np.asarray(dataset.images, dtype=np.float64) * 255.0).astype(np.uint8).reshape(len(dataset), -1)
    rec = np.concatenate([dataset.labels.astype(np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(rec.tobytes())


# --------------------------------------------------------------------------
# synthetic and bundled data
# --------------------------------------------------------------------------


def synth_dataset(kind: str, count: int, seed: int = 0, n_classes: int = 4,
                  shape: tuple[int, int, int] = (1, 8, 8), noise: float = 0.1) -> Dataset:
    """Deterministic synthetic image sets.

    ``blobs``: one random prototype image per class plus Gaussian noise;
    prototypes are far apart, so the classes are linearly separable.
    ``xor-grid``: two latent coordinates drawn on a 4 x 4 checkerboard, drawn
    into the left and right halves of the canvas; the class is the cell
    parity, which no linear function of the pixels can express.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    if kind == "blobs":
        protos = np.random.default_rng([seed, 7919]).uniform(0.0, 1.0, (n_classes,) + tuple(shape))
        labels = rng.integers(0, n_classes, count)
        imgs = np.clip(protos[labels] + noise * rng.standard_normal((count,) + tuple(shape)), 0.0, 1.0)
        return Dataset(imgs, labels, n_classes)
    if kind == "xor-grid":
        a, b = rng.random(count), rng.random(count)
        labels = (np.floor(4 * a) + np.floor(4 * b)).astype(np.int64) % 2
        C, H, W = shape
        imgs = np.empty((count, C, H, W))
        imgs[:, :, :, : W // 2] = a[:, None, None, None]
        imgs[:, :, :, W // 2:] = b[:, None, None, None]
        imgs = np.clip(imgs + 0.01 * noise * rng.standard_normal(imgs.shape), 0.0, 1.0)
        return Dataset(imgs, labels, 2)
    raise ValueError(f"unknown synthetic dataset {kind!r}; choose 'blobs' or 'xor-grid'")


def load_digits_split(test_size: int = 500, seed: int = 0) -> tuple[Dataset, Dataset]:
    """The 8x8 handwritten digits bundled with scikit-learn, split train/test."""
    from sklearn.datasets import load_digits

    d = load_digits()
    images = (d.images / 16.0)[:, None].astype(np.float64)
    perm = np.random.default_rng(seed).permutation(len(images))
    test_idx, train_idx = np.sort(perm[:test_size]), np.sort(perm[test_size:])
    full = Dataset(images, d.target, 10)
    return full.subset(train_idx, "train"), full.subset(test_idx, "test")


def normalize_channels(images: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return (images - m) / s


def denormalize_channels(images: np.ndarray, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64)[None, :, None, None]
    s = np.asarray(std, dtype=np.float64)[None, :, None, None]
    return images * s + m


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


@dataclass
class BatchStream:
    dataset: Dataset
    batch_size: int = 64
    shuffle: bool = True
    seed: int = 0
    hflip: bool = False
    pad_crop: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def permutation(self, epoch: int) -> np.ndarray:
        n = len(self.dataset)
        if not self.shuffle:
            return np.arange(n)
        return np.random.default_rng([self.seed, epoch]).permutation(n)

    def __call__(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        return batches(self, epoch)


def _augment(x: np.ndarray, rng: np.random.Generator, hflip: bool, pad: int) -> np.ndarray:
    if hflip:
        flip = rng.random(len(x)) < 0.5
        x = x.copy()
        x[flip] = x[flip, :, :, ::-1]
    if pad:
        N, C, H, W = x.shape
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, N)
        dx = rng.integers(0, 2 * pad + 1, N)
        x = np.stack([padded[i, :, dy[i]:dy[i] + H, dx[i]:dx[i] + W] for i in range(N)])
    return x


def batches(stream: BatchStream, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images float64, labels)`` batches; the last short batch is kept."""
    ds = stream.dataset
    order = stream.permutation(epoch)
    aug_rng = np.random.default_rng([stream.seed, epoch, 1])
    for start in range(0, len(order), stream.batch_size):
        idx = order[start:start + stream.batch_size]
        x = np.asarray(ds.images[idx], dtype=np.float64)
        if stream.hflip or stream.pad_crop:
            x = _augment(x, aug_rng, stream.hflip, stream.pad_crop)
        yield x, ds.labels[idx]
