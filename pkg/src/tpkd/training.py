"""Training drivers for teachers, scratch models and distilled students."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .data import Dataset, iterate_batches
from .distill import DistillConfig, LossTerms, teacher_maps_for, total_loss
from .metrics import evaluate

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_ce", "train_kd", "train_orth",
                   "val_acc", "val_ece", "val_nll")


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite training loss {value} at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainResult:
    best_state: dict
    final_state: dict
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    spec: nn.ModelSpec | None = None

    def best_model(self) -> nn.WideResNet:
        return _model_from_state(self.spec, self.best_state)

    def final_model(self) -> nn.WideResNet:
        return _model_from_state(self.spec, self.final_state)


def _model_from_state(spec, state):
    m = nn.build_model(spec)
    m.load_state_dict(state)
    return m


def _fit(model: nn.WideResNet, train: Dataset, val: Dataset, schedule: nn.LrSchedule,
         epochs: int, seed: int, batch_size: int, step_loss, multiple_of: int = 1,
         momentum: float = 0.9, weight_decay: float = 1e-4) -> TrainResult:
    """Generic SGD loop with best-validation checkpoint selection.

    ``step_loss(model, idx) -> LossTerms`` builds the loss for one batch of
    training indices.
    """
    opt = nn.OptimizerState(lr=schedule.initial, momentum=momentum,
                            weight_decay=weight_decay)
    shuffle = np.random.default_rng([seed, 7])
    init = nn.snapshot(model)
    best_state, best_acc, best_epoch = init, -1.0, -1
    history = []
    for epoch in range(epochs):
        opt.lr = nn.lr_at_epoch(schedule, epoch)
        model.train()
        sums = np.zeros(4)
        steps = 0
        for idx in iterate_batches(len(train), batch_size, shuffle, True, multiple_of):
            terms: LossTerms = step_loss(model, idx)
            value = terms.total.item()
            if not np.isfinite(value):
                raise DivergenceError(epoch, value)
            model.zero_grad()
            terms.total.backward()
            nn.sgd_step(opt, model.named_parameters())
            sums += (value, terms.ce, terms.kd, terms.feat)
            steps += 1
        rep = evaluate(model, val) if len(val) else None
        row = dict(zip(HISTORY_COLUMNS, (
            epoch, opt.lr, *(sums / max(steps, 1)),
            rep.accuracy if rep else float("nan"),
            rep.ece if rep else float("nan"),
            rep.nll if rep else float("nan"))))
        history.append(row)
        log.info("epoch %d lr %.4g loss %.4f val_acc %.4f", epoch, opt.lr,
                 row["train_loss"], row["val_acc"])
        if rep is not None and rep.accuracy > best_acc:
            best_acc, best_epoch = rep.accuracy, epoch
            best_state = nn.snapshot(model)
    final = nn.snapshot(model)
    if epochs == 0:
        best_state = final = init
    elif best_epoch < 0:
        best_state = final
    return TrainResult(best_state, final, history, best_epoch, model.spec)


def train_teacher(train: Dataset, val: Dataset, spec: nn.ModelSpec, schedule: nn.LrSchedule,
                  epochs: int, seed: int, batch_size: int = 64, **opt) -> TrainResult:
    """Supervised cross-entropy training; returns best-validation and final states."""
    if len(train) == 0:
        raise ValueError("training set is empty")
    model = nn.build_model(spec, seed=seed)
    x, y = train.x, train.y

    def step(m, idx):
        logits, _ = m(x[idx])
        ce = T.cross_entropy(logits, y[idx])
        return LossTerms(ce, ce.item(), 0.0)

    return _fit(model, train, val, schedule, epochs, seed, batch_size, step, **opt)


def anneal_init(student_spec: nn.ModelSpec, scratch) -> nn.WideResNet:
    """Student initialized with the exact parameters of a scratch-trained model.

    ``scratch`` is a model, a state dict, or a checkpoint path.
    """
    if isinstance(scratch, nn.Module):
        state, spec = scratch.state_dict(), scratch.spec
    elif isinstance(scratch, dict):
        state, spec = scratch, student_spec
    else:
        spec, state, _ = nn.load_state(scratch)
    model = nn.build_model(student_spec)
    own = model.state_dict()
    diffs = [f"{k}: student {own[k].shape} vs scratch "
             f"{state[k].shape if k in state else 'missing'}"
             for k in own if k not in state or state[k].shape != own[k].shape]
    diffs += [f"{k}: only in scratch" for k in state if k not in own]
    if spec != student_spec and not diffs:
        diffs.append(f"spec differs: {spec} vs {student_spec}")
    if diffs:
        raise ValueError("scratch checkpoint does not match the student architecture: "
                         + "; ".join(diffs))
    model.load_state_dict(state)
    return model


class TeacherCache:
    """Per-sample teacher logits and stage activations (eval mode, computed once).

    Frozen eval-mode teachers give batch-independent per-sample outputs, so
    caching is equivalent to running them inside every training step.
    """

    def __init__(self, model, x: np.ndarray, layers, chunk: int = 128):
        self.layers = sorted(set(layers))
        logits, acts = [], {l: [] for l in self.layers}
        model.eval()
        with T.no_grad():
            for start in range(0, len(x), chunk):
                lg, a = model(x[start:start + chunk], self.layers)
                logits.append(lg.data)
                for l in self.layers:
                    acts[l].append(a[l].data)
        self.logits = np.concatenate(logits) if logits else np.zeros((0,))
        self.acts = {l: np.concatenate(v) for l, v in acts.items() if v}

    def batch(self, idx):
        return self.logits[idx], {l: T.Tensor(a[idx]) for l, a in self.acts.items()}


def distill_batch_loss(student, xs, labels, cfg: DistillConfig, t1=None, t2=None,
                       xs_pi=None, mode="tpkd") -> LossTerms:
    """Loss for one batch given live teacher models (teachers get no gradient)."""
    layers_s = [p[2] for p in cfg.layer_pairs] if cfg.uses_features else []
    t1_logits = t2_logits = maps = None
    with T.no_grad():
        if t1 is not None:
            t1.eval()
            lg1, a1 = t1(xs, [p[0] for p in cfg.layer_pairs])
            t1_logits = lg1.data
        if t2 is not None and mode != "kd":
            t2.eval()
            lg2, a2 = t2(xs_pi, [p[1] for p in cfg.layer_pairs])
            t2_logits = lg2.data
    if cfg.uses_features and t1 is not None and t2 is not None:
        maps = teacher_maps_for(cfg, a1, a2)
    logits, acts = student(xs, layers_s)
    return total_loss(logits, labels, cfg, t1_logits, t2_logits, maps, acts)


def train_student(train: Dataset, pi_train: Dataset | None, val: Dataset,
                  student_spec: nn.ModelSpec, cfg: DistillConfig, schedule: nn.LrSchedule,
                  epochs: int, seed: int, teacher1=None, teacher2=None, scratch=None,
                  batch_size: int = 64, mode: str = "tpkd", **opt) -> TrainResult:
    """Train a series-only student.

    ``mode``: ``"ce"`` (no teachers), ``"kd"`` (teacher1 logits only) or
    ``"tpkd"`` (both teachers; feature term per ``cfg``). ``scratch`` is
    required when ``cfg.anneal`` is set.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if cfg.anneal:
        if scratch is None:
            raise ValueError("annealing requested but no scratch model given")
        student = anneal_init(student_spec, scratch)
    else:
        student = nn.build_model(student_spec, seed=seed)
    before = [nn.state_hash(t.state_dict()) for t in (teacher1, teacher2) if t is not None]

    x, y = train.x, train.y
    c1 = c2 = None
    if mode in ("kd", "tpkd"):
        if teacher1 is None:
            raise ValueError(f"mode {mode!r} needs teacher1")
        c1 = TeacherCache(teacher1, x, [p[0] for p in cfg.layer_pairs] if cfg.uses_features
                          else [])
    if mode == "tpkd":
        if teacher2 is None or pi_train is None:
            raise ValueError("mode 'tpkd' needs teacher2 and the aligned PI dataset")
        if len(pi_train) != len(train) or not np.array_equal(pi_train.y, train.y):
            raise ValueError("series and PI datasets are not index-aligned "
                             f"({len(train)} vs {len(pi_train)} samples or labels differ)")
        c2 = TeacherCache(teacher2, pi_train.x,
                          [p[1] for p in cfg.layer_pairs] if cfg.uses_features else [])
    layers_s = [p[2] for p in cfg.layer_pairs] if cfg.uses_features and c2 is not None else []
    multiple = cfg.k if layers_s and cfg.feature_loss == "orth" else 1

    def step(m, idx):
        t1_logits = t2_logits = maps = None
        if c1 is not None:
            t1_logits, a1 = c1.batch(idx)
        if c2 is not None:
            t2_logits, a2 = c2.batch(idx)
            if layers_s:
                maps = teacher_maps_for(cfg, a1, a2)
        logits, acts = m(x[idx], layers_s)
        return total_loss(logits, y[idx], cfg, t1_logits, t2_logits, maps, acts)

    result = _fit(student, train, val, schedule, epochs, seed, batch_size, step, multiple, **opt)
    after = [nn.state_hash(t.state_dict()) for t in (teacher1, teacher2) if t is not None]
    if before != after:
        raise RuntimeError("teacher parameters changed during student training")
    return result
