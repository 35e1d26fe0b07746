"""Synthetic HAR-like windows, dataset files, CSV import, test-time corruption."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .topology import SignalWindow

DATA_FORMAT = "tpkd-data-v1"


@dataclass(frozen=True)
class CorruptionLevel:
    kappa_r: float = 0.0
    sigma_g: float = 0.0

    def __post_init__(self):
        if not 0 <= self.kappa_r < 1:
            raise ValueError("kappa_r must lie in [0, 1)")
        if self.sigma_g < 0:
            raise ValueError("sigma_g must be non-negative")


LEVELS = {
    0: CorruptionLevel(0.0, 0.0),
    1: CorruptionLevel(0.15, 0.06),
    2: CorruptionLevel(0.22, 0.09),
    3: CorruptionLevel(0.30, 0.12),
}


@dataclass
class Dataset:
    """Samples ``x`` of shape ``[n, channels, length]`` (``[n, c, r, r]`` for PIs)."""

    x: np.ndarray
    y: np.ndarray
    classes: int
    split: str = "train"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} samples but {len(self.y)} labels")
        if self.classes < 1:
            raise ValueError("classes must be positive")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ValueError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.y)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.classes == other.classes and self.split == other.split
                and self.metadata == other.metadata and self.x.shape == other.x.shape
                and self.x.tobytes() == other.x.tobytes()
                and np.array_equal(self.y, other.y))

    @property
    def kind(self) -> str:
        return "pi" if self.x.ndim == 4 else "series"

    @property
    def windows(self) -> list[SignalWindow]:
        rate = float(self.metadata.get("sample_rate_hz", 50.0))
        return [SignalWindow(xi, rate, int(yi)) for xi, yi in zip(self.x, self.y)]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.classes, self.split, dict(self.metadata))


def gen_synthetic(classes: int, samples_per_class: int, channels: int = 3, length: int = 128,
                  seed: int = 0, split: str = "train", sample_rate_hz: float = 50.0,
                  noise_std: float = 0.1, bump_amplitude: float = 1.5) -> Dataset:
    """Class ``j``: sinusoid at ``1 + j/2`` cycles per window, ``j`` Gaussian bumps
    of width ``length/40`` at random positions, white noise.

    Samples are grouped by class in the output order.
    """
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if length < 32:
        raise ValueError(f"length must be >= 32, got {length}")
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    width = length / 40.0
    xs, ys = [], []
    for j in range(classes):
        freq = 1.0 + j / 2.0
        for _ in range(samples_per_class):
            phase = rng.uniform(0, 2 * np.pi, size=(channels, 1))
            sig = np.sin(2 * np.pi * freq * t / length + phase)
            for c in range(channels):
                for centre in rng.uniform(0, length, size=j):
                    sig[c] += bump_amplitude * np.exp(-0.5 * ((t - centre) / width) ** 2)
            sig += rng.normal(0.0, noise_std, size=sig.shape)
            xs.append(sig)
            ys.append(j)
    x = np.asarray(xs, dtype=np.float32).reshape(-1, channels, length)
    meta = {"channels": channels, "window_length": length,
            "sample_rate_hz": sample_rate_hz, "generator_seed": seed}
    return Dataset(x, np.asarray(ys, dtype=np.int64), classes, split, meta)


def save_dataset(ds: Dataset, path) -> bytes:
    meta = {"classes": ds.classes, "split": ds.split, "kind": ds.kind,
            "metadata": ds.metadata}
    return container.write(path, DATA_FORMAT, {"x": ds.x, "y": ds.y}, meta)


def load_dataset(path) -> Dataset:
    header, arrays = container.read(path, DATA_FORMAT)
    meta = header["meta"]
    try:
        x, y = arrays["x"], arrays["y"]
        classes, split = int(meta["classes"]), meta["split"]
    except KeyError as exc:
        raise container.MalformedHeaderError(f"dataset header lacks {exc}") from exc
    if len(x) != len(y):
        raise container.ShapeMismatchError(f"{len(x)} samples but {len(y)} labels")
    return Dataset(x, y, classes, split, meta.get("metadata", {}))


def load_csv(path, channels: int, classes: int | None = None, split="train",
             sample_rate_hz: float = 50.0) -> Dataset:
    """One row per window: label, then channel-major sample values."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or row[0].startswith("#"):
                continue
            rows.append((lineno, row))
    xs, ys = [], []
    length = None
    for lineno, row in rows:
        vals = np.asarray([float(v) for v in row[1:]])
        if vals.size % channels:
            raise ValueError(f"line {lineno}: {vals.size} values not divisible by "
                             f"{channels} channels")
        if length is None:
            length = vals.size // channels
        elif vals.size != length * channels:
            raise ValueError(f"line {lineno}: expected {length * channels} values, "
                             f"got {vals.size}")
        xs.append(vals.reshape(channels, length))
        ys.append(int(row[0]))
    y = np.asarray(ys, dtype=np.int64)
    if classes is None:
        classes = int(y.max()) + 1 if len(y) else 1
    x = np.asarray(xs, dtype=np.float32).reshape(len(ys), channels, length or 0)
    meta = {"channels": channels, "window_length": length or 0,
            "sample_rate_hz": sample_rate_hz, "generator_seed": None}
    return Dataset(x, y, classes, split, meta)


def corrupt(ds: Dataset, level: CorruptionLevel, seed: int = 0) -> Dataset:
    """Zero one contiguous segment per window, then add Gaussian noise everywhere."""
    x = ds.x.copy()
    n, _, length = x.shape
    seg = int(round(level.kappa_r * length))
    rng = np.random.default_rng(seed)
    if seg > 0:
        starts = rng.integers(0, length - seg + 1, size=n)
        for i, s in enumerate(starts):
            x[i, :, s:s + seg] = 0.0
    if level.sigma_g > 0:
        x = x + rng.normal(0.0, level.sigma_g, size=x.shape).astype(np.float32)
    return Dataset(x, ds.y.copy(), ds.classes, ds.split, dict(ds.metadata))


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator | None,
                    drop_last: bool = True, multiple_of: int = 1):
    """Yield index arrays; shuffled when ``rng`` is given.

    With ``drop_last`` every yielded batch has exactly ``batch_size`` rows; the
    batch size itself is rounded down to a multiple of ``multiple_of``.
    """
    bs = batch_size - batch_size % multiple_of
    if bs <= 0:
        raise ValueError(f"batch size {batch_size} smaller than multiple {multiple_of}")
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, bs):
        idx = order[start:start + bs]
        if drop_last and len(idx) < bs:
            break
        yield idx
