"""Experiment configuration: one JSON file drives every phase."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

from .distill import DistillConfig
from .nn import LrSchedule, ModelSpec
from .topology import PiConfig

SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def default_dict() -> dict:
    text = resources.files("tpkd.configs").joinpath("default.json").read_text()
    return json.loads(text)


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides; values are parsed as JSON when possible."""
    d = copy.deepcopy(d)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a config section")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"override {key!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = _parse_value(raw)
    return d


@dataclass(frozen=True)
class DataSpec:
    classes: int = 4
    channels: int = 3
    length: int = 128
    per_class: tuple[int, int, int] = (120, 40, 40)
    seed: int = 100
    sample_rate_hz: float = 50.0
    noise_std: float = 0.1
    csv: dict | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    data: DataSpec
    pi: PiConfig
    teacher1: ModelSpec
    teacher2: ModelSpec
    student: ModelSpec
    distill: DistillConfig
    beta_noorth: float
    series_schedule: LrSchedule
    image_schedule: LrSchedule
    student_schedule: LrSchedule
    epochs: int
    batch_size: int
    seeds: tuple[int, ...]
    corruption_seed: int
    workers: int
    bench_samples: int
    analyze_batch: int
    out_dir: Path

    @property
    def hash(self) -> str:
        # seeds and worker count do not change any single phase's outputs
        skip = ("out_dir", "seeds", "workers", "bench_samples", "analyze_batch")
        blob = json.dumps({k: v for k, v in self.raw.items() if k not in skip},
                          sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def section_hash(self, sections) -> str:
        """Hash of the dotted config sections one phase reads."""
        picked = {}
        for dotted in sections:
            node = self.raw
            for part in dotted.split("."):
                node = node.get(part) if isinstance(node, dict) else None
            picked[dotted] = node
        return hashlib.sha256(json.dumps(picked, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict, env: dict | None = None) -> "ExperimentConfig":
        env = os.environ if env is None else env
        try:
            return cls._build(d, env)
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def _build(cls, d, env):
        dd = d["data"]
        per = dd.get("samples_per_class", {"train": 120, "val": 40, "test": 40})
        data = DataSpec(int(dd["classes"]), int(dd["channels"]), int(dd["length"]),
                        tuple(int(per[s]) for s in SPLITS), int(dd.get("seed", 100)),
                        float(dd.get("sample_rate_hz", 50.0)), float(dd.get("noise_std", 0.1)),
                        dd.get("csv"))
        if data.classes < 2:
            raise ConfigError(f"data.classes must be at least 2, got {data.classes}")
        if data.length < 32:
            raise ConfigError(f"data.length must be at least 32, got {data.length}")
        if data.csv is not None and set(data.csv) != set(SPLITS):
            raise ConfigError(f"data.csv needs exactly the keys {list(SPLITS)}")
        pi = d["pi"]
        pi = PiConfig(**{**pi, "birth_range": tuple(pi["birth_range"]),
                         "persistence_range": (tuple(pi["persistence_range"])
                                               if pi.get("persistence_range") else None)})
        specs = {}
        for role, kind in (("teacher1", "series_1d"), ("teacher2", "image_2d"),
                           ("student", "series_1d")):
            spec = ModelSpec.from_dict({**d[role], "input_kind": kind,
                                        "channels_in": data.channels, "classes": data.classes})
            specs[role] = spec
        dist = DistillConfig.from_dict(d["distill"])
        stages = {"teacher1": specs["teacher1"].stages, "teacher2": specs["teacher2"].stages,
                  "student": specs["student"].stages}
        for pair in dist.layer_pairs:
            for role, layer in zip(("teacher1", "teacher2", "student"), pair):
                if not 1 <= layer <= stages[role]:
                    raise ConfigError(f"layer pair {list(pair)}: {role} has no stage {layer}")
        sch = d["schedules"]
        seeds = tuple(int(s) for s in d["seeds"])
        if not seeds:
            raise ConfigError("seeds must be a non-empty list")
        if int(d["epochs"]) < 0 or int(d["batch_size"]) < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")
        d = {**d, "beta_noorth": float(d.get("beta_noorth", dist.beta))}
        out = Path(env.get("TPKD_OUT") or d.get("out_dir") or "runs/default")
        return cls(
            raw=copy.deepcopy(d), data=data, pi=pi, distill=dist,
            teacher1=specs["teacher1"], teacher2=specs["teacher2"], student=specs["student"],
            beta_noorth=d["beta_noorth"],
            series_schedule=LrSchedule.from_dict(sch["series"]),
            image_schedule=LrSchedule.from_dict(sch["image"]),
            student_schedule=LrSchedule.from_dict(sch.get("student", sch["series"])),
            epochs=int(d["epochs"]), batch_size=int(d["batch_size"]), seeds=seeds,
            corruption_seed=int(d.get("corruption_seed", 2024)),
            workers=int(d.get("workers", 1)),
            bench_samples=int(d.get("bench_samples", 200)),
            analyze_batch=int(d.get("analyze_batch", 64)),
            out_dir=out,
        )


def load_config(path=None, overrides=(), env: dict | None = None) -> ExperimentConfig:
    """Read a JSON config (default config when ``path`` is None) and apply overrides."""
    if path is None:
        d = default_dict()
    else:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(apply_overrides(d, overrides), env)
