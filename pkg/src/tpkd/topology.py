"""Sublevel-set persistence of sensor windows and persistence images."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import _kernels


@dataclass(frozen=True)
class SignalWindow:
    values: np.ndarray  # [channels, length]
    sample_rate_hz: float = 50.0
    label: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 1:
            v = v[None, :]
        if v.ndim != 2:
            raise ValueError(f"window values must be [channels, length], got shape {v.shape}")
        if v.shape[1] < 2:
            raise ValueError(f"window length must be >= 2, got {v.shape[1]}")
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]


@dataclass
class PersistenceDiagram:
    """Finite (birth, death) pairs and the essential birth, per channel."""

    pairs: list[np.ndarray]  # each [n_i, 2]
    essential_births: list[float]
    channel_max: list[float] = field(default_factory=list)

    @property
    def channels(self) -> int:
        return len(self.pairs)

    def union(self, other: "PersistenceDiagram") -> "PersistenceDiagram":
        """Channel-wise multiset union of the finite pairs (essentials from self)."""
        if other.channels != self.channels:
            raise ValueError("channel count mismatch")
        pairs = [np.concatenate([a, b], axis=0) for a, b in zip(self.pairs, other.pairs)]
        return PersistenceDiagram(pairs, list(self.essential_births), list(self.channel_max))


@dataclass(frozen=True)
class PiConfig:
    resolution: int = 16
    gaussian_sigma: float = 0.25
    birth_range: tuple[float, float] = (-10.0, 10.0)
    persistence_range: tuple[float, float] | None = None
    weighting: Literal["linear", "constant"] = "linear"
    essential_policy: Literal["drop", "cap_at_max"] = "drop"

    def __post_init__(self):
        if self.persistence_range is None:
            lo, hi = self.birth_range
            object.__setattr__(self, "persistence_range", (0.0, float(hi - lo)))
        object.__setattr__(self, "birth_range", tuple(float(v) for v in self.birth_range))
        object.__setattr__(self, "persistence_range",
                           tuple(float(v) for v in self.persistence_range))
        self.validate()

    def validate(self) -> None:
        if int(self.resolution) != self.resolution or self.resolution < 2:
            raise ValueError(f"resolution must be an integer >= 2, got {self.resolution}")
        if not self.gaussian_sigma > 0:
            raise ValueError("gaussian_sigma must be positive")
        for name in ("birth_range", "persistence_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} must satisfy lo < hi, got ({lo}, {hi})")
        if self.weighting not in ("linear", "constant"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.essential_policy not in ("drop", "cap_at_max"):
            raise ValueError(f"unknown essential_policy {self.essential_policy!r}")

    def birth_centers(self) -> np.ndarray:
        return _centers(self.birth_range, self.resolution)

    def persistence_centers(self) -> np.ndarray:
        return _centers(self.persistence_range, self.resolution)


def _centers(rng, n):
    lo, hi = rng
    step = (hi - lo) / n
    return lo + step * (np.arange(n) + 0.5)


@dataclass
class PersistenceImage:
    """Raster indexed ``[channel, persistence_row, birth_col]``."""

    pixels: np.ndarray

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]


def sublevel_diagram(window: SignalWindow | np.ndarray) -> PersistenceDiagram:
    values = window.values if isinstance(window, SignalWindow) else np.atleast_2d(window)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] < 2:
        raise ValueError(f"window length must be >= 2, got {values.shape[-1]}")
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        ch, idx = bad[0]
        raise ValueError(
            f"non-finite value {values[ch, idx]!r} at channel {ch}, index {idx}")
    pairs, essentials, maxima = [], [], []
    for row in values:
        births, deaths, essential = _kernels.sublevel_pairs(row)
        pairs.append(np.stack([births, deaths], axis=1) if births.size
                     else np.zeros((0, 2)))
        essentials.append(essential)
        maxima.append(float(row.max()))
    return PersistenceDiagram(pairs, essentials, maxima)


def _weights(pers: np.ndarray, cfg: PiConfig) -> np.ndarray:
    if cfg.weighting == "constant":
        return np.ones_like(pers)
    return np.clip(pers / cfg.persistence_range[1], 0.0, 1.0)


def diagram_to_image(pd: PersistenceDiagram, cfg: PiConfig) -> PersistenceImage:
    bc, pc = cfg.birth_centers(), cfg.persistence_centers()
    out = np.zeros((pd.channels, cfg.resolution, cfg.resolution))
    for c, pairs in enumerate(pd.pairs):
        pairs = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
        if cfg.essential_policy == "cap_at_max" and pd.channel_max:
            extra = np.array([[pd.essential_births[c], pd.channel_max[c]]])
            pairs = np.concatenate([pairs, extra], axis=0)
        if not len(pairs):
            continue
        births = pairs[:, 0]
        pers = pairs[:, 1] - pairs[:, 0]
        out[c] = _kernels.rasterize(births, pers, _weights(pers, cfg),
                                    cfg.gaussian_sigma, bc, pc)
    return PersistenceImage(out)


def normalize_image(pi: PersistenceImage) -> PersistenceImage:
    peak = pi.pixels.max() if pi.pixels.size else 0.0
    if peak <= 0:
        return PersistenceImage(pi.pixels.copy())
    return PersistenceImage(pi.pixels / peak)


def window_to_image(window, cfg: PiConfig) -> PersistenceImage:
    return normalize_image(diagram_to_image(sublevel_diagram(window), cfg))


def batch_extract(windows: Sequence[SignalWindow | np.ndarray], cfg: PiConfig,
                  workers: int = 1) -> list[PersistenceImage]:
    """Extract normalized PIs for every window, preserving input order.

    ``workers > 1`` fans out over a thread pool; the compiled kernels
    release the GIL.
    """
    windows = list(windows)
    if not windows:
        return []
    chans = {(w.channels if isinstance(w, SignalWindow) else np.atleast_2d(w).shape[0])
             for w in windows}
    if len(chans) > 1:
        raise ValueError(f"windows disagree on channel count: {sorted(chans)}")

    def one(item):
        i, w = item
        try:
            return window_to_image(w, cfg)
        except ValueError as exc:
            raise ValueError(f"window {i}: {exc}") from exc

    if workers <= 1:
        return [one(item) for item in enumerate(windows)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, enumerate(windows)))


def extract_array(x: np.ndarray, cfg: PiConfig, workers: int = 1) -> np.ndarray:
    """``[n, c, length]`` series -> ``[n, c, res, res]`` float32 PIs."""
    if len(x) == 0:
        return np.zeros((0, x.shape[1] if x.ndim == 3 else 0, cfg.resolution,
                         cfg.resolution), dtype=np.float32)
    images = batch_extract(list(x), cfg, workers=workers)
    return np.stack([im.pixels for im in images]).astype(np.float32)
