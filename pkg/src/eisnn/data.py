"""Dataset readers (IDX and CIFAR-10 binary), normalization, augmentation, batching."""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, replace
from typing import Iterator, Optional

import numpy as np

__all__ = [
    "FormatError", "DatasetHandle", "AugmentConfig", "read_idx", "load_idx",
    "load_mnist", "load_cifar10_bin", "write_idx", "encode_cifar_record",
    "normalize", "augment", "iterate_batches", "subset", "pad_to", "checksum",
]

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_PER_FILE = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


class FormatError(ValueError):
    """A dataset file does not match its published binary layout."""


@dataclass
class DatasetHandle:
    images: np.ndarray          # N x C x H x W, float
    labels: np.ndarray          # N, int64
    split: str = "train"
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise FormatError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return self.images.shape[1:]


# -- IDX ----------------------------------------------------------------------

def read_idx(path: str, expect_magic: Optional[int] = None) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array of its declared shape."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)} (need 4)")
    magic = struct.unpack(">I", raw[:4])[0]
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(f"{path}: magic 0x{magic:08x} at byte offset 0, expected 0x{expect_magic:08x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: unsupported IDX type code 0x{magic >> 8:02x} at byte offset 2")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header at byte offset {len(raw)} (need {header})")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)} "
                          f"(data ends at byte offset {len(raw)})")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">I", 0x0800 | array.ndim))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx(images_path: str, labels_path: str, split: str = "train") -> DatasetHandle:
    """Images scaled to [0, 1], shaped N x 1 x H x W; not yet normalized."""
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    x = (images.astype(np.float64) / 255.0)[:, None]
    return DatasetHandle(x, labels.astype(np.int64), split)


def _find(dirname, *names):
    for n in names:
        p = os.path.join(dirname, n)
        if os.path.exists(p):
            return p
    raise FileNotFoundError(f"none of {names} in {dirname}")


def load_mnist(dirname: str):
    """Train and test handles from the four standard IDX files, normalized."""
    train = load_idx(_find(dirname, "train-images-idx3-ubyte", "train-images.idx3-ubyte"),
                     _find(dirname, "train-labels-idx1-ubyte", "train-labels.idx1-ubyte"), "train")
    test = load_idx(_find(dirname, "t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
                    _find(dirname, "t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"), "test")
    return normalize(train, test)


# -- CIFAR-10 -----------------------------------------------------------------

def _read_cifar_file(path: str, expected_records: Optional[int] = CIFAR_PER_FILE):
    size = os.path.getsize(path)
    if size % CIFAR_RECORD:
        raise FormatError(f"{path}: size {size} is not a multiple of {CIFAR_RECORD}-byte records "
                          f"(partial record at byte offset {size - size % CIFAR_RECORD})")
    n = size // CIFAR_RECORD
    if expected_records is not None and n != expected_records:
        raise FormatError(f"{path}: {n} records, expected {expected_records}")
    raw = np.fromfile(path, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise FormatError(f"{path}: label {labels[bad[0]]} at byte offset {bad[0] * CIFAR_RECORD}")
    return raw[:, 1:].reshape(n, 3, 32, 32), labels


def encode_cifar_record(label: int, image: np.ndarray) -> bytes:
    """One 3073-byte record: label byte then R, G, B planes, row-major."""
    return bytes([int(label)]) + np.ascontiguousarray(image, dtype=np.uint8).reshape(-1).tobytes()


def load_cifar10_bin(dirname: str, expected_records: Optional[int] = CIFAR_PER_FILE):
    """Train (5 files) and test handles from the binary CIFAR-10 distribution."""
    xs, ys = [], []
    for name in CIFAR_TRAIN_FILES:
        x, y = _read_cifar_file(os.path.join(dirname, name), expected_records)
        xs.append(x)
        ys.append(y)
    xt, yt = _read_cifar_file(os.path.join(dirname, CIFAR_TEST_FILE), expected_records)
    train = DatasetHandle(np.concatenate(xs).astype(np.float64) / 255.0, np.concatenate(ys), "train")
    test = DatasetHandle(xt.astype(np.float64) / 255.0, yt, "test")
    return normalize(train, test)


def find_cifar10_dir(dirname: str) -> Optional[str]:
    for cand in (dirname, os.path.join(dirname, "cifar-10-batches-bin")):
        if os.path.exists(os.path.join(cand, CIFAR_TEST_FILE)):
            return cand
    return None


# -- preprocessing --------------------------------------------------------------

def normalize(train: DatasetHandle, test: Optional[DatasetHandle] = None):
    """Per-channel standardization with statistics taken from ``train`` only."""
    mean = train.images.mean(axis=(0, 2, 3))
    std = train.images.std(axis=(0, 2, 3))
    std = np.where(std > 0, std, 1.0)

    def apply(h):
        x = (h.images - mean[None, :, None, None]) / std[None, :, None, None]
        return replace(h, images=x, mean=mean, std=std)
    train_n = apply(train)
    return (train_n, apply(test)) if test is not None else train_n


def pad_to(handle: DatasetHandle, size: int) -> DatasetHandle:
    """Zero-pad images symmetrically to ``size x size`` (e.g. 28 -> 32)."""
    _, _, H, W = handle.images.shape
    ph, pw = size - H, size - W
    if ph < 0 or pw < 0 or ph % 2 or pw % 2:
        raise ValueError(f"cannot pad {H}x{W} to {size}x{size}")
    x = np.pad(handle.images, ((0, 0), (0, 0), (ph // 2, ph // 2), (pw // 2, pw // 2)))
    return replace(handle, images=x)


def subset(handle: DatasetHandle, n: int, seed: int = 0) -> DatasetHandle:
    if n >= len(handle):
        return handle
    idx = np.sort(np.random.default_rng(seed).choice(len(handle), size=n, replace=False))
    return replace(handle, images=handle.images[idx], labels=handle.labels[idx])


def checksum(handle: DatasetHandle) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(handle.images).tobytes())
    h.update(np.ascontiguousarray(handle.labels).tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    crop_pad: int = 4
    hflip: bool = True


def augment(batch: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Reflect-pad, random crop back to the original size, random horizontal flip."""
    if not config.enabled:
        return batch
    B, C, H, W = batch.shape
    p = config.crop_pad
    out = np.empty_like(batch)
    if p:
        padded = np.pad(batch, ((0, 0), (0, 0), (p, p), (p, p)), mode="reflect")
        oy = rng.integers(0, 2 * p + 1, size=B)
        ox = rng.integers(0, 2 * p + 1, size=B)
        for i in range(B):
            out[i] = padded[i, :, oy[i]:oy[i] + H, ox[i]:ox[i] + W]
    else:
        out[...] = batch
    if config.hflip:
        flip = rng.random(B) < 0.5
        out[flip] = out[flip, :, :, ::-1]
    return out


def iterate_batches(handle: DatasetHandle, batch_size: int, rng: Optional[np.random.Generator] = None,
                    shuffle: bool = True, drop_last: bool = False) -> Iterator[tuple]:
    """Yield ``(indices, images, labels)``; each index appears once per pass."""
    n = len(handle)
    order = rng.permutation(n) if shuffle and rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield idx, handle.images[idx], handle.labels[idx]
