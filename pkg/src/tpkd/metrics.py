"""Accuracy, calibration, and representation-similarity measures."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T

ECE_BINS = 15


@dataclass
class EvalReport:
    accuracy: float
    confusion: list[list[int]]
    ece: float
    nll: float
    per_class_recall: list[float]
    n: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def expected_calibration_error(probs: np.ndarray, labels: np.ndarray, n_bins: int = ECE_BINS
                               ) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    # bin m covers (m/n, (m+1)/n]
    bins = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    ece = 0.0
    n = len(labels)
    for m in range(n_bins):
        sel = bins == m
        cnt = int(sel.sum())
        if cnt:
            ece += cnt / n * abs(correct[sel].mean() - conf[sel].mean())
    return float(ece)


def negative_log_likelihood(probs: np.ndarray, labels: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    p = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(np.maximum(p, 1e-300))))


def report_from_probs(probs: np.ndarray, labels: np.ndarray, classes: int | None = None
                      ) -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    classes = classes or probs.shape[1]
    pred = probs.argmax(axis=1)
    conf_mat = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(conf_mat, (labels, pred), 1)
    support = conf_mat.sum(axis=1)
    recall = np.divide(np.diag(conf_mat), support, out=np.zeros(classes), where=support > 0)
    return EvalReport(
        accuracy=float(np.trace(conf_mat) / len(labels)),
        confusion=conf_mat.tolist(),
        ece=expected_calibration_error(probs, labels),
        nll=negative_log_likelihood(probs, labels),
        per_class_recall=recall.tolist(),
        n=int(len(labels)),
    )


def predict_logits(model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    outs = []
    try:
        with T.no_grad():
            for start in range(0, len(x), batch_size):
                logits, _ = model(x[start:start + batch_size])
                outs.append(logits.data)
    finally:
        model.train(was_training)
    if not outs:
        return np.zeros((0, model.spec.classes), dtype=np.float32)
    return np.concatenate(outs)


def evaluate(model, dataset) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = predict_logits(model, dataset.x).astype(np.float64)
    return report_from_probs(softmax_np(logits), dataset.y, dataset.classes)


# -- representation analysis --------------------------------------------------
@dataclass
class PearsonProfile:
    counts: np.ndarray
    edges: np.ndarray
    skipped: int
    values: np.ndarray


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.sqrt((a * a).sum()), np.sqrt((b * b).sum())
    if na == 0 or nb == 0:
        return None
    return float(np.clip((a * b).sum() / (na * nb), -1.0, 1.0))


def pearson_patch_profile(sim_map, k: int, n_bins: int = 20, normalize: str = "row"
                          ) -> PearsonProfile:
    """Histogram of Pearson r over all patch-column pairs of every map row."""
    from .distill import normalize_map

    g = np.asarray(getattr(sim_map, "data", sim_map), dtype=np.float64)
    b = g.shape[0]
    if b % k:
        raise ValueError(f"map size {b} is not divisible by k={k}")
    d = b // k
    rows = normalize_map(g, normalize).data.reshape(b, k, d)
    vals, skipped = [], 0
    for i in range(b):
        for c1 in range(k):
            for c2 in range(c1 + 1, k):
                r = _pearson(rows[i, c1], rows[i, c2])
                if r is None:
                    skipped += 1
                else:
                    vals.append(r)
    values = np.asarray(vals)
    counts, edges = np.histogram(values, bins=n_bins, range=(-1.0, 1.0))
    return PearsonProfile(counts, edges, skipped, values)


def linear_cka(acts_a, acts_b) -> float:
    x = np.asarray(getattr(acts_a, "data", acts_a), dtype=np.float64)
    y = np.asarray(getattr(acts_b, "data", acts_b), dtype=np.float64)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"batch sizes differ: {x.shape[0]} vs {y.shape[0]}")
    x = x.reshape(len(x), -1)
    y = y.reshape(len(y), -1)
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    den = np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)
    if den == 0:
        return 0.0
    return float(np.linalg.norm(x.T @ y) ** 2 / den)
