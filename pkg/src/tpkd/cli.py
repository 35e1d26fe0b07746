"""Command-line experiment driver.

Every subcommand reads the same JSON config. Artifacts land under the output
directory and are recorded with their sha256 in ``manifest.json``; a phase whose
inputs and outputs still match the manifest is reported as up to date and
skipped.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import container, data, metrics, nn, topology, training
from . import tensor as T
from .config import SPLITS, ConfigError, ExperimentConfig, load_config
from .distill import similarity_map

log = logging.getLogger("tpkd")

ROLES = ("teacher1", "teacher2", "scratch", "student-kd", "student-base", "student-ann",
         "student-tpkd-noorth", "student-tpkd")
STUDENT_ROLES = ROLES[3:]
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4


class MissingArtifactError(FileNotFoundError):
    """A prerequisite artifact has not been produced yet."""


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- manifest -----------------------------------------------------------------
_TRAIN_COMMON = ("epochs", "batch_size")
_LOGIT = ("student", "schedules.student", "distill.tau", "distill.lam", "distill.alpha")
_MAPS = ("distill.layer_pairs", "distill.normalize")
_ROLE_SECTIONS = {
    "teacher1": ("teacher1", "schedules.series"),
    "teacher2": ("teacher2", "schedules.image"),
    "scratch": ("student", "schedules.student"),
    "student-kd": _LOGIT,
    "student-base": _LOGIT,
    "student-ann": _LOGIT,
    "student-tpkd-noorth": _LOGIT + _MAPS + ("beta_noorth",),
    "student-tpkd": _LOGIT + _MAPS + ("distill.beta", "distill.k"),
}


def phase_sections(key: str) -> tuple:
    """Config sections a manifest phase depends on; upstream changes arrive via input hashes."""
    kind, *rest = key.split("/")
    if kind == "gen-data":
        return ("data",)
    if kind == "extract-pi":
        return ("pi",)
    if kind == "train":
        return _ROLE_SECTIONS[rest[1]] + _TRAIN_COMMON
    if kind == "eval":
        return ("data", "pi", "corruption_seed")
    return ("",)


@dataclass
class RunManifest:
    path: Path
    config_hash: str
    phases: dict = field(default_factory=dict)
    key_hash: Callable[[str], str] | None = None

    @classmethod
    def load(cls, out_dir: Path, config_hash: str, key_hash=None) -> "RunManifest":
        path = Path(out_dir) / "manifest.json"
        phases = {}
        if path.exists():
            phases = json.loads(path.read_text()).get("phases", {})
        return cls(path, config_hash, phases, key_hash)

    def save(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"config_hash": self.config_hash, "phases": self.phases},
                                  indent=2, sort_keys=True))
        os.replace(tmp, self.path)

    def _rel(self, p) -> str:
        p = Path(p)
        try:
            return str(p.resolve().relative_to(self.path.parent.resolve()))
        except ValueError:
            return str(p)

    def hashes(self, paths) -> dict:
        return {self._rel(p): file_hash(p) for p in paths}

    def _hash_for(self, key: str) -> str:
        return self.key_hash(key) if self.key_hash else self.config_hash

    def up_to_date(self, key: str, inputs) -> bool:
        entry = self.phases.get(key)
        if not entry or entry.get("config_hash") != self._hash_for(key):
            return False
        if entry.get("inputs") != self.hashes(inputs):
            return False
        root = self.path.parent
        for rel, digest in entry.get("outputs", {}).items():
            p = root / rel
            if not p.exists() or file_hash(p) != digest:
                return False
        return True

    def record(self, key: str, inputs, outputs, seconds: float, **extra) -> None:
        self.phases[key] = {"config_hash": self._hash_for(key), "inputs": self.hashes(inputs),
                            "outputs": self.hashes(outputs), "seconds": round(seconds, 4),
                            **extra}
        self.save()


class Run:
    """Resolved paths and manifest for one output directory."""

    def __init__(self, cfg: ExperimentConfig, force: bool = False):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.force = force
        self.manifest = RunManifest.load(self.out, cfg.hash,
                                         lambda key: cfg.section_hash(phase_sections(key)))

    def data_path(self, split):
        return self.out / "data" / f"{split}.bin"

    def pi_path(self, split):
        return self.out / "pi" / f"{split}.bin"

    def role_dir(self, seed, role):
        return self.out / f"seed{seed}" / role

    def ckpt(self, seed, role, which="best"):
        return self.role_dir(seed, role) / f"{which}.ckpt"

    def eval_path(self, seed, role, level):
        return self.out / f"seed{seed}" / "eval" / f"{role}_L{level}.json"

    def skip(self, key, inputs) -> bool:
        if not self.force and self.manifest.up_to_date(key, inputs):
            print(f"{key}: up to date")
            return True
        return False


def require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing {what}: {path} (run the producing phase first)")
    return path


def _load_ds(path, what):
    return data.load_dataset(require(path, what))


# -- phases -------------------------------------------------------------------
def cmd_gen_data(cfg: ExperimentConfig, force: bool = False) -> dict:
    run = Run(cfg, force)
    d = cfg.data
    outs = [run.data_path(s) for s in SPLITS]
    inputs = [Path(d.csv[s]) for s in SPLITS] if d.csv else []
    for p in inputs:
        require(p, "CSV input")
    if run.skip("gen-data", inputs):
        return {s: p for s, p in zip(SPLITS, outs)}
    t0 = time.perf_counter()
    for i, split in enumerate(SPLITS):
        if d.csv:
            ds = data.load_csv(d.csv[split], d.channels, d.classes, split, d.sample_rate_hz)
        else:
            ds = data.gen_synthetic(d.classes, d.per_class[i], d.channels, d.length,
                                    seed=d.seed + i, split=split,
                                    sample_rate_hz=d.sample_rate_hz, noise_std=d.noise_std)
        outs[i].parent.mkdir(parents=True, exist_ok=True)
        data.save_dataset(ds, outs[i])
    run.manifest.record("gen-data", inputs, outs, time.perf_counter() - t0)
    return {s: p for s, p in zip(SPLITS, outs)}


def cmd_extract_pi(cfg: ExperimentConfig, force: bool = False) -> dict:
    run = Run(cfg, force)
    ins = [require(run.data_path(s), f"{s} dataset") for s in SPLITS]
    outs = [run.pi_path(s) for s in SPLITS]
    if run.skip("extract-pi", ins):
        return {s: p for s, p in zip(SPLITS, outs)}
    timings = {}
    pi_meta = dataclasses.asdict(cfg.pi)
    for split, src, dst in zip(SPLITS, ins, outs):
        ds = data.load_dataset(src)
        if len(ds) and ds.x.shape[1] != cfg.data.channels:
            raise ConfigError(f"{split} dataset has {ds.x.shape[1]} channels but the config "
                              f"expects {cfg.data.channels}")
        t0 = time.perf_counter()
        px = topology.extract_array(ds.x, cfg.pi, cfg.workers)
        timings[split] = time.perf_counter() - t0
        pi_ds = data.Dataset(px, ds.y, ds.classes, split, {"pi": pi_meta})
        dst.parent.mkdir(parents=True, exist_ok=True)
        data.save_dataset(pi_ds, dst)
    run.manifest.record("extract-pi", ins, outs, sum(timings.values()),
                        extraction_seconds={k: round(v, 4) for k, v in timings.items()})
    return {s: p for s, p in zip(SPLITS, outs)}


def role_distill_config(cfg: ExperimentConfig, role: str):
    base = cfg.distill
    if role == "student-kd":
        return dataclasses.replace(base, anneal=False, use_orth=False), "kd"
    table = {
        "student-base": dict(anneal=False, use_orth=False),
        "student-ann": dict(anneal=True, use_orth=False),
        "student-tpkd-noorth": dict(anneal=True, use_orth=True, feature_loss="mse",
                                    beta=cfg.beta_noorth),
        "student-tpkd": dict(anneal=True, use_orth=True, feature_loss="orth"),
    }
    return dataclasses.replace(base, **table[role]), "tpkd"


def _write_history(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=training.HISTORY_COLUMNS)
        w.writeheader()
        for row in history:
            w.writerow({k: repr(float(v)) if k != "epoch" else int(v) for k, v in row.items()})


def _save_result(run, seed, role, result: training.TrainResult, inputs, seconds):
    d = run.role_dir(seed, role)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"role": role, "seed": seed, "best_epoch": result.best_epoch}
    for which, state in (("best", result.best_state), ("final", result.final_state)):
        m = nn.build_model(result.spec)
        m.load_state_dict(state)
        nn.save_checkpoint(m, run.ckpt(seed, role, which), meta)
    _write_history(d / "history.csv", result.history)
    outs = [run.ckpt(seed, role, "best"), run.ckpt(seed, role, "final"), d / "history.csv"]
    run.manifest.record(f"train/seed{seed}/{role}", inputs, outs, seconds,
                        best_epoch=result.best_epoch)


def cmd_train(cfg: ExperimentConfig, role: str, seed: int | None = None,
              force: bool = False) -> dict:
    """Train one role for one seed (all configured seeds when ``seed`` is None)."""
    if role not in ROLES:
        raise ConfigError(f"unknown role {role!r}; choose from {', '.join(ROLES)}")
    if seed is None:
        return {s: cmd_train(cfg, role, s, force) for s in cfg.seeds}
    run = Run(cfg, force)
    ser = {s: require(run.data_path(s), f"{s} dataset") for s in ("train", "val")}
    inputs = list(ser.values())
    needs_pi = role == "teacher2" or role in STUDENT_ROLES[1:]
    if needs_pi:
        inputs += [require(run.pi_path(s), f"{s} persistence-image dataset")
                   for s in ("train", "val")]
    deps = []
    if role in STUDENT_ROLES:
        deps.append(("teacher1", "best"))
    if role in STUDENT_ROLES[1:]:
        deps.append(("teacher2", "best"))
    dcfg, mode = (role_distill_config(cfg, role) if role in STUDENT_ROLES else (None, None))
    if dcfg is not None and dcfg.anneal:
        deps.append(("scratch", "final"))
    for r, which in deps:
        inputs.append(require(run.ckpt(seed, r, which), f"{r} checkpoint for seed {seed}"))
    key = f"train/seed{seed}/{role}"
    outs = {"best": run.ckpt(seed, role), "final": run.ckpt(seed, role, "final"),
            "history": run.role_dir(seed, role) / "history.csv"}
    if run.skip(key, inputs):
        return outs

    train = data.load_dataset(ser["train"])
    val = data.load_dataset(ser["val"])
    if needs_pi:
        pi_train = data.load_dataset(run.pi_path("train"))
        pi_val = data.load_dataset(run.pi_path("val"))
    t0 = time.perf_counter()
    bs = cfg.batch_size
    if role == "teacher1":
        res = training.train_teacher(train, val, cfg.teacher1, cfg.series_schedule,
                                     cfg.epochs, seed, bs)
    elif role == "teacher2":
        res = training.train_teacher(pi_train, pi_val, cfg.teacher2, cfg.image_schedule,
                                     cfg.epochs, seed, bs)
    elif role == "scratch":
        res = training.train_teacher(train, val, cfg.student, cfg.student_schedule,
                                     cfg.epochs, seed, bs)
    else:
        t1 = nn.load_checkpoint(run.ckpt(seed, "teacher1"))
        t2 = nn.load_checkpoint(run.ckpt(seed, "teacher2")) if mode == "tpkd" else None
        scratch = run.ckpt(seed, "scratch", "final") if dcfg.anneal else None
        res = training.train_student(train, pi_train if mode == "tpkd" else None, val,
                                     cfg.student, dcfg, cfg.student_schedule, cfg.epochs,
                                     seed, t1, t2, scratch, bs, mode)
    _save_result(run, seed, role, res, inputs, time.perf_counter() - t0)
    print(f"{key}: best epoch {res.best_epoch}, "
          f"val acc {max((h['val_acc'] for h in res.history), default=float('nan')):.4f}")
    return outs


def corruption_seed(cfg: ExperimentConfig, seed: int, level: int) -> int:
    return int(np.random.SeedSequence([cfg.corruption_seed, seed, level]).generate_state(1)[0])


def eval_split(cfg: ExperimentConfig, run: Run, kind: str, seed: int, level: int):
    """Clean or corrupted test split for a model input kind."""
    test = _load_ds(run.data_path("test"), "test dataset")
    lv = data.LEVELS[level]
    if level:
        test = data.corrupt(test, lv, corruption_seed(cfg, seed, level))
    if kind == "series_1d":
        return test
    if level == 0:
        return _load_ds(run.pi_path("test"), "test persistence-image dataset")
    px = topology.extract_array(test.x, cfg.pi, cfg.workers)
    return data.Dataset(px, test.y, test.classes, "test")


def cmd_eval(cfg: ExperimentConfig, role: str, seed: int | None = None, level: int = 0,
             checkpoint=None, force: bool = False):
    if level not in data.LEVELS:
        raise ConfigError(f"corruption level must be one of {sorted(data.LEVELS)}")
    if seed is None:
        return {s: cmd_eval(cfg, role, s, level, checkpoint, force) for s in cfg.seeds}
    run = Run(cfg, force)
    ck = Path(checkpoint) if checkpoint else run.ckpt(seed, role)
    require(ck, f"checkpoint for {role}")
    out = run.eval_path(seed, role, level)
    key = f"eval/seed{seed}/{role}/L{level}"
    inputs = [ck, require(run.data_path("test"), "test dataset")]
    if checkpoint is None and run.skip(key, inputs):
        return metrics.EvalReport(**json.loads(out.read_text()))
    model = nn.load_checkpoint(ck)
    ds = eval_split(cfg, run, model.spec.input_kind, seed, level)
    rep = metrics.evaluate(model, ds)
    if checkpoint is None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(rep.to_json())
        run.manifest.record(key, inputs, [out], 0.0)
    print(f"{key}: accuracy {rep.accuracy:.4f} ece {rep.ece:.4f} nll {rep.nll:.4f}")
    return rep


BENCH_COLUMNS = ("model", "samples", "mean_ms", "median_ms", "p90_ms")


def _latency(fn, items, warmup: int = 3):
    for item in items[:warmup]:
        fn(item)
    out = []
    for item in items:
        t0 = time.perf_counter()
        fn(item)
        out.append((time.perf_counter() - t0) * 1e3)
    return np.asarray(out)


def cmd_bench(cfg: ExperimentConfig, seed: int | None = None, student_role="student-tpkd"
              ) -> list[dict]:
    """Batch-1 latency per test sample: teacher1, teacher2 with PI extraction, student."""
    seed = cfg.seeds[0] if seed is None else seed
    run = Run(cfg)
    test = _load_ds(run.data_path("test"), "test dataset")
    t1 = nn.load_checkpoint(require(run.ckpt(seed, "teacher1"), "teacher1 checkpoint"))
    t2 = nn.load_checkpoint(require(run.ckpt(seed, "teacher2"), "teacher2 checkpoint"))
    st_path = run.ckpt(seed, student_role)
    if not st_path.exists():
        st_path = require(run.ckpt(seed, "scratch"), "student or scratch checkpoint")
    student = nn.load_checkpoint(st_path)
    for m in (t1, t2, student):
        m.eval()
    n = min(cfg.bench_samples, len(test))
    items = [test.x[i:i + 1] for i in range(n)]
    rows = []
    if n:
        def infer(model):
            def f(x):
                with T.no_grad():
                    return model(x)[0]
            return f

        def pi(x):
            return topology.extract_array(x, cfg.pi)

        def pipeline(x):
            return infer(t2)(pi(x))

        runs = {"teacher1": infer(t1), "teacher2_pi_only": pi,
                "teacher2_model_only": lambda x: infer(t2)(pi_cache[id(x)]),
                "teacher2_pipeline": pipeline, "student": infer(student)}
        pi_cache = {id(x): pi(x) for x in items}
        for name, fn in runs.items():
            lat = _latency(fn, items)
            rows.append({"model": name, "samples": n, "mean_ms": float(lat.mean()),
                         "median_ms": float(np.median(lat)),
                         "p90_ms": float(np.percentile(lat, 90))})
    path = run.out / "bench.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(f"{r['model']:>20}: {r['mean_ms']:.3f} ms/sample (median {r['median_ms']:.3f})")
    return rows


def cmd_analyze(cfg: ExperimentConfig, seed: int | None = None,
                roles=("teacher1", "teacher2", "scratch", "student-tpkd-noorth",
                       "student-tpkd")) -> dict:
    """Patch-Pearson histograms per model stage and CKA of each model against teacher1."""
    seed = cfg.seeds[0] if seed is None else seed
    run = Run(cfg)
    k = cfg.distill.k
    test = _load_ds(run.data_path("test"), "test dataset")
    b = min(cfg.analyze_batch, len(test))
    b -= b % k
    if b < 2 * k:
        raise ConfigError(f"analysis needs at least {2 * k} test samples")
    acts = {}
    for role in roles:
        model = nn.load_checkpoint(require(run.ckpt(seed, role), f"{role} checkpoint"))
        model.eval()
        x = test.x[:b]
        if model.spec.input_kind == "image_2d":
            x = topology.extract_array(x, cfg.pi, cfg.workers)
        with T.no_grad():
            _, a = model(x, range(1, model.spec.stages + 1))
        acts[role] = {l: t.data for l, t in a.items()}
    out = run.out / f"seed{seed}" / "analyze"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "pearson.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "layer", "bin_lo", "bin_hi", "count", "skipped"])
        for role, layers in acts.items():
            for l, a in layers.items():
                prof = metrics.pearson_patch_profile(similarity_map(a).data, k,
                                                     normalize=cfg.distill.normalize)
                for c, lo, hi in zip(prof.counts, prof.edges[:-1], prof.edges[1:]):
                    w.writerow([role, l, f"{lo:.2f}", f"{hi:.2f}", int(c), prof.skipped])
    ref = roles[0]
    with open(out / "cka.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model_a", "layer_a", "model_b", "layer_b", "cka"])
        for role, layers in acts.items():
            for la, a in layers.items():
                for lb, bb in acts[ref].items():
                    w.writerow([role, la, ref, lb, repr(metrics.linear_cka(a, bb))])
    print(f"analysis written to {out}")
    return {"pearson": out / "pearson.csv", "cka": out / "cka.csv"}


# -- entry point --------------------------------------------------------------
def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (built-in default if omitted)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. distill.beta=3")
    common.add_argument("--out", help="output directory (TPKD_OUT also overrides)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="tpkd", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-data", parents=[common], help="generate or import datasets")
    g.add_argument("--force", action="store_true")
    e = sub.add_parser("extract-pi", parents=[common], help="persistence images per split")
    e.add_argument("--force", action="store_true")
    t = sub.add_parser("train", parents=[common], help="train a teacher or student role")
    t.add_argument("--role", required=True, choices=ROLES + ("all",))
    t.add_argument("--seed", type=int)
    t.add_argument("--force", action="store_true")
    v = sub.add_parser("eval", parents=[common], help="evaluate on clean/corrupted test data")
    v.add_argument("--role", required=True, choices=ROLES + ("all",))
    v.add_argument("--seed", type=int)
    v.add_argument("--level", type=int, nargs="+", default=[0], choices=sorted(data.LEVELS))
    v.add_argument("--checkpoint", help="evaluate this checkpoint file instead")
    v.add_argument("--force", action="store_true")
    b = sub.add_parser("bench", parents=[common], help="batch-1 latency table")
    b.add_argument("--seed", type=int)
    a = sub.add_parser("analyze", parents=[common], help="Pearson and CKA CSVs")
    a.add_argument("--seed", type=int)
    a.add_argument("--roles", nargs="+", choices=ROLES)
    return p


def run_command(args) -> None:
    env = {**os.environ, "TPKD_OUT": args.out} if args.out else None
    cfg = load_config(args.config, args.set, env)
    force = getattr(args, "force", False)
    cmd = args.command
    if cmd == "gen-data":
        cmd_gen_data(cfg, force)
    elif cmd == "extract-pi":
        cmd_extract_pi(cfg, force)
    elif cmd == "train":
        for role in (ROLES if args.role == "all" else (args.role,)):
            cmd_train(cfg, role, args.seed, force)
    elif cmd == "eval":
        for role in (ROLES if args.role == "all" else (args.role,)):
            for level in args.level:
                cmd_eval(cfg, role, args.seed, level, args.checkpoint, force)
    elif cmd == "bench":
        cmd_bench(cfg, args.seed)
    elif cmd == "analyze":
        if args.roles:
            cmd_analyze(cfg, args.seed, tuple(args.roles))
        else:
            cmd_analyze(cfg, args.seed)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run_command(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FileNotFoundError, container.ContainerError) as exc:
        print(f"missing or unreadable artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except training.DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
