"""Datasets: a synthetic image benchmark plus two on-disk formats.

All loaders return ``(train, test)`` normalized per channel with statistics
computed on the training split only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # N, C, H, W
    y: np.ndarray  # N, int labels

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 4:
            raise DatasetError(f"images must be N,C,H,W, got shape {self.x.shape}")
        if len(self.x) != len(self.y):
            raise DatasetError(f"{len(self.x)} images but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def num_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx])


def channel_stats(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    mean = ds.x.mean(axis=(0, 2, 3))
    std = ds.x.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def normalize(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    mean, std = channel_stats(train)
    shift = mean.reshape(1, -1, 1, 1)
    scale = std.reshape(1, -1, 1, 1)
    return (
        Dataset((train.x - shift) / scale, train.y),
        Dataset((test.x - shift) / scale, test.y),
    )


def toy_images(
    rng_seed: int = 0,
    n_train: int = 2000,
    n_test: int = 500,
    shape: tuple[int, int, int] = (3, 16, 16),
    num_classes: int = 10,
    noise: float = 3.0,
    max_shift: int = 2,
) -> tuple[Dataset, Dataset]:
    """Class prototypes built from oriented gratings and blobs, jittered and noised.

    Samples are rolled by up to ``max_shift`` pixels, rescaled in contrast and
    corrupted with Gaussian noise, so small CNNs land well below 100% accuracy.
    """
    rng = np.random.default_rng(rng_seed)
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    protos = np.zeros((num_classes, c, h, w))
    for k in range(num_classes):
        for ch in range(c):
            for _ in range(2):
                ang = rng.uniform(0, np.pi)
                freq = rng.uniform(1.0, 4.0)
                phase = rng.uniform(0, 2 * np.pi)
                protos[k, ch] += rng.uniform(0.5, 1.0) * np.sin(
                    2 * np.pi * freq * (np.cos(ang) * xx + np.sin(ang) * yy) + phase
                )
            cy, cx = rng.uniform(0.2, 0.8, size=2)
            protos[k, ch] += rng.uniform(-1.5, 1.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / 0.02)
    protos /= protos.std(axis=(1, 2, 3), keepdims=True)

    def sample(n: int) -> Dataset:
        y = rng.integers(0, num_classes, size=n)
        x = protos[y].copy()
        shifts = rng.integers(-max_shift, max_shift + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(shifts):
            x[i] = np.roll(x[i], (dy, dx), axis=(1, 2))
        x *= rng.uniform(0.7, 1.3, size=(n, 1, 1, 1))
        x += rng.normal(0.0, noise, size=x.shape)
        return Dataset(x, y)

    return sample(n_train), sample(n_test)


def _load_csv_split(path: Path, shape) -> Dataset:
    if not path.is_file():
        raise DatasetError(f"missing file {path}")
    arr = np.loadtxt(path, delimiter=",", ndmin=2)
    expected = 1 + int(np.prod(shape))
    if arr.shape[1] != expected:
        raise DatasetError(f"{path}: rows have {arr.shape[1]} columns, expected {expected} (label + pixels)")
    return Dataset(arr[:, 1:].reshape(-1, *shape), arr[:, 0].astype(np.int64))


def _load_npz_split(path: Path) -> Dataset:
    if not path.is_file():
        raise DatasetError(f"missing file {path}")
    with np.load(path) as z:
        if "x" not in z.files or "y" not in z.files:
            raise DatasetError(f"{path}: expected arrays 'x' and 'y', found {z.files}")
        x, y = z["x"], z["y"]
    if x.ndim == 3:
        x = x[:, None]
    return Dataset(x, y)


def load_dataset(name: str, path: str | Path | None = None, rng_seed: int = 0, **kwargs) -> tuple[Dataset, Dataset]:
    """Load and normalize ``toy_images``, ``csv_images`` or ``kws_mfcc``.

    ``csv_images`` expects a directory with ``train.csv``, ``test.csv`` (label
    first, then C*H*W pixel values) and ``meta.json`` holding ``{"shape": [C,H,W]}``.
    ``kws_mfcc`` expects ``train.npz`` and ``test.npz`` with arrays ``x`` and ``y``.
    """
    if name == "toy_images":
        train, test = toy_images(rng_seed, **kwargs)
    elif name == "csv_images":
        if path is None:
            raise DatasetError("csv_images needs a directory path")
        root = Path(path)
        meta = root / "meta.json"
        if not meta.is_file():
            raise DatasetError(f"missing file {meta}")
        shape = tuple(json.loads(meta.read_text())["shape"])
        train, test = _load_csv_split(root / "train.csv", shape), _load_csv_split(root / "test.csv", shape)
    elif name == "kws_mfcc":
        if path is None:
            raise DatasetError("kws_mfcc needs a directory path")
        root = Path(path)
        train, test = _load_npz_split(root / "train.npz"), _load_npz_split(root / "test.npz")
    else:
        raise DatasetError(f"unknown dataset {name!r}; expected toy_images, csv_images or kws_mfcc")
    if train.x.shape[1:] != test.x.shape[1:]:
        raise DatasetError(f"train images {train.x.shape[1:]} and test images {test.x.shape[1:]} differ in shape")
    return normalize(train, test)
