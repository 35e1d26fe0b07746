"""Distillation objectives: softened KD, two-teacher KD, similarity maps and
the orthogonal patch-Gram transfer term."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class DistillConfig:
    tau: float = 4.0
    lam: float = 0.7
    alpha: float = 0.7
    beta: float = 900.0
    k: int = 4
    layer_pairs: tuple[tuple[int, int, int], ...] = ((1, 1, 1), (2, 2, 2), (3, 3, 3))
    use_orth: bool = True
    anneal: bool = True
    feature_loss: Literal["orth", "mse"] = "orth"
    normalize: Literal["row", "matrix", "none"] = "row"

    def __post_init__(self):
        object.__setattr__(self, "layer_pairs",
                           tuple(tuple(int(v) for v in p) for p in self.layer_pairs))
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 <= self.lam <= 1:
            raise ValueError("lambda must lie in [0, 1]")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.k < 1:
            raise ValueError("k must be a positive integer")
        if any(len(p) != 3 for p in self.layer_pairs):
            raise ValueError("layer pairs are (teacher1, teacher2, student) triples")
        if self.feature_loss not in ("orth", "mse"):
            raise ValueError(f"unknown feature_loss {self.feature_loss!r}")
        if self.normalize not in ("row", "matrix", "none"):
            raise ValueError(f"unknown normalize {self.normalize!r}")

    @property
    def uses_features(self) -> bool:
        return self.use_orth and self.beta > 0 and bool(self.layer_pairs)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "lam": self.lam, "alpha": self.alpha, "beta": self.beta,
                "k": self.k, "layer_pairs": [list(p) for p in self.layer_pairs],
                "use_orth": self.use_orth, "anneal": self.anneal,
                "feature_loss": self.feature_loss, "normalize": self.normalize}

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        if "layer_pairs" in d:
            d["layer_pairs"] = tuple(tuple(p) for p in d["layer_pairs"])
        return cls(**d)


@dataclass
class PatchGram:
    grams: Tensor  # [b, k, k]
    d: int


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def softened_probs(logits, tau: float) -> Tensor:
    if not tau > 0:
        raise ValueError("tau must be positive")
    return T.softmax(_t(logits) * (1.0 / tau))


def _kl(teacher_logits, student_logits, tau) -> Tensor:
    """Batch-mean KL(p_T || p_S) with the teacher side held constant."""
    t = _t(teacher_logits).data
    ts = t / tau
    ts = ts - ts.max(axis=-1, keepdims=True)
    log_pt = ts - np.log(np.exp(ts).sum(axis=-1, keepdims=True))
    pt = np.exp(log_pt)
    log_ps = T.log_softmax(_t(student_logits) * (1.0 / tau))
    ent = float((pt * log_pt).sum()) / len(t)
    cross = (log_ps * pt.astype(log_ps.dtype)).sum() * (1.0 / len(t))
    return ent - cross


def kd_loss(teacher_logits, student_logits, tau: float) -> Tensor:
    t, s = _t(teacher_logits), _t(student_logits)
    if t.shape != s.shape:
        raise ValueError(f"teacher logits {t.shape} vs student logits {s.shape}")
    return _kl(t, s, tau) * (tau ** 2)


def multi_teacher_kd_loss(l_t1, l_t2, l_s, tau: float, alpha: float) -> Tensor:
    t1, t2, s = _t(l_t1), _t(l_t2), _t(l_s)
    if not (t1.shape == t2.shape == s.shape):
        raise ValueError(f"logit shapes disagree: {t1.shape}, {t2.shape}, {s.shape}")
    mixed = _kl(t1, s, tau) * alpha + _kl(t2, s, tau) * (1.0 - alpha)
    return mixed * (tau ** 2)


def similarity_map(activation) -> Tensor:
    """``A A^T`` over per-sample flattened features."""
    a = _t(activation)
    b = a.shape[0]
    if b < 2:
        raise ValueError("similarity map needs a batch of at least 2 samples")
    flat = a.reshape(b, -1)
    return flat @ flat.T


def merge_maps(g1, g2, alpha: float) -> Tensor:
    g1, g2 = _t(g1), _t(g2)
    if g1.shape != g2.shape:
        raise ValueError(f"cannot merge maps of shapes {g1.shape} and {g2.shape}")
    return g1 * alpha + g2 * (1.0 - alpha)


def normalize_map(g, mode: str = "row", eps: float = 1e-12) -> Tensor:
    g = _t(g)
    if mode == "none":
        return g
    if mode == "row":
        norm = T.sqrt((g * g).sum(axis=1, keepdims=True) + eps)
    elif mode == "matrix":
        norm = T.sqrt((g * g).sum() + eps)
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    return g / norm


def patch_grams(g, k: int, normalize: str = "row") -> PatchGram:
    """Per-row k x k Gram of contiguous row segments, minus identity.

    Row ``i`` of the normalized map is cut into ``k`` contiguous segments of
    length ``d = b / k``; these are the columns of the ``d x k`` patch matrix
    ``P_i`` and the result is ``P_i^T P_i - I``.
    """
    g = _t(g)
    b = g.shape[0]
    if k < 1 or b % k:
        raise ValueError(f"batch size {b} is not divisible by k={k}; "
                         "use drop-last batching with a multiple of k")
    d = b // k
    rows = normalize_map(g, normalize).reshape(b, k, d)  # [i, column c, entry]
    grams = rows @ rows.transpose(0, 2, 1)
    return PatchGram(grams - np.eye(k, dtype=grams.dtype), d)


def orth_loss(teacher_grams: Sequence[PatchGram], student_grams: Sequence[PatchGram]) -> Tensor:
    """Mean over layer pairs of the squared Frobenius distance summed over samples."""
    if len(teacher_grams) != len(student_grams):
        raise ValueError(f"{len(teacher_grams)} teacher grams vs {len(student_grams)} student")
    if not teacher_grams:
        raise ValueError("no layer pairs")
    total = None
    for i, (gt, gs) in enumerate(zip(teacher_grams, student_grams)):
        if gt.grams.shape != gs.grams.shape:
            raise ValueError(f"layer pair {i}: teacher gram {gt.grams.shape} vs "
                             f"student gram {gs.grams.shape}")
        diff = gs.grams - _t(gt.grams.data)
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total * (1.0 / len(teacher_grams))


def map_mse_loss(teacher_maps: Sequence, student_maps: Sequence, normalize="row") -> Tensor:
    """Direct matching of normalized merged maps (no patch-Gram transform)."""
    if len(teacher_maps) != len(student_maps) or not teacher_maps:
        raise ValueError("teacher and student map lists must be non-empty and equal length")
    total = None
    for gt, gs in zip(teacher_maps, student_maps):
        nt = normalize_map(_t(gt).data if isinstance(gt, Tensor) else gt, normalize)
        ns = normalize_map(gs, normalize)
        diff = ns - nt.data
        term = (diff * diff).mean()
        total = term if total is None else total + term
    return total * (1.0 / len(teacher_maps))


@dataclass
class LossTerms:
    total: Tensor
    ce: float
    kd: float
    feat: float = 0.0
    extra: dict = field(default_factory=dict)


def total_loss(student_logits, labels, cfg: DistillConfig, t1_logits=None, t2_logits=None,
               teacher_maps: Sequence | None = None, student_acts: dict | None = None,
               ) -> LossTerms:
    """Weighted CE + two-teacher KD + feature term.

    ``teacher_maps`` holds the (already merged) teacher similarity maps, one per
    layer pair, as constants; ``student_acts`` maps student stage id to the
    captured activation tensor.
    """
    s = _t(student_logits)
    ce = T.cross_entropy(s, labels)
    loss = ce * (1.0 - cfg.lam)
    kd_val = 0.0
    if cfg.lam > 0 and t1_logits is not None:
        if t2_logits is None:
            kd = kd_loss(t1_logits, s, cfg.tau)
        else:
            kd = multi_teacher_kd_loss(t1_logits, t2_logits, s, cfg.tau, cfg.alpha)
        loss = loss + kd * cfg.lam
        kd_val = kd.item()
    feat_val = 0.0
    if cfg.uses_features and teacher_maps is not None:
        s_maps = [similarity_map(student_acts[p[2]]) for p in cfg.layer_pairs]
        if cfg.feature_loss == "orth":
            tg = [patch_grams(Tensor(np.asarray(_t(m).data)), cfg.k, cfg.normalize)
                  for m in teacher_maps]
            sg = [patch_grams(m, cfg.k, cfg.normalize) for m in s_maps]
            feat = orth_loss(tg, sg)
        else:
            feat = map_mse_loss(teacher_maps, s_maps, cfg.normalize)
        loss = loss + feat * cfg.beta
        feat_val = feat.item()
    return LossTerms(loss, ce.item(), kd_val, feat_val)


def teacher_maps_for(cfg: DistillConfig, t1_acts: dict, t2_acts: dict) -> list[np.ndarray]:
    """Merged teacher similarity maps per layer pair (constants)."""
    out = []
    with T.no_grad():
        for l1, l2, _ in cfg.layer_pairs:
            g1 = similarity_map(t1_acts[l1])
            g2 = similarity_map(t2_acts[l2])
            out.append(merge_maps(g1, g2, cfg.alpha).data)
    return out
