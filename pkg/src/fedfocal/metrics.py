"""Evaluation and analysis: confusion matrices, macro classification
metrics, one-vs-rest AUC with ROC points, decision-curve net benefit,
per-group logit-gradient norms, and gradient-weighted attention rollout.

All multi-class scalars are macro averages (unweighted over classes);
classes that cannot support a metric (no true samples, no predicted
samples, or single-sided AUC) contribute zero where the contract says so
and are reported in the flags list rather than silently dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import losses as L
from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .models import ModelParams
from .tensor import Tensor


@dataclass(frozen=True)
class ConfusionMatrix:
    grid: np.ndarray  # rows = true class, columns = predicted class

    def __post_init__(self):
        g = np.asarray(self.grid)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ContractError(f"confusion grid must be square, got {g.shape}")
        if np.any(g < 0):
            raise ContractError("confusion grid must be nonnegative")
        object.__setattr__(self, "grid", g.astype(np.int64))

    @property
    def num_classes(self) -> int:
        return self.grid.shape[0]

    @property
    def total(self) -> int:
        return int(self.grid.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.grid) / self.total) if self.total else 0.0


@dataclass
class MetricReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_specificity: float
    macro_auc: float | None
    per_class: dict[str, list[float]]
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        for name in ("accuracy", "macro_precision", "macro_recall",
                     "macro_f1", "macro_specificity"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"{name}={v} outside [0, 1]")
        if self.macro_auc is not None and not 0.0 <= self.macro_auc <= 1.0:
            raise ContractError(f"macro_auc={self.macro_auc} outside [0, 1]")


def predict(scores: np.ndarray) -> np.ndarray:
    """Argmax with the lowest index winning ties."""
    return np.argmax(np.asarray(scores), axis=1)


def confusion(preds, labels, num_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"preds and labels differ in length: "
                            f"{preds.shape} vs {labels.shape}")
    for arr, what in ((preds, "prediction"), (labels, "label")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ContractError(f"{what} outside 0..{num_classes - 1}")
    grid = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(grid, (labels, preds), 1)
    return ConfusionMatrix(grid)


def classification_metrics(cm: ConfusionMatrix) -> MetricReport:
    """One-vs-rest precision/recall/F1/specificity per class, macro averaged.

    Zero-support or zero-prediction classes contribute 0 to the macro means
    and are listed in the flags.
    """
    if cm.total == 0:
        raise ContractError("empty confusion matrix")
    g = cm.grid
    c = cm.num_classes
    tp = np.diag(g).astype(np.float64)
    fn = g.sum(axis=1) - tp
    fp = g.sum(axis=0) - tp
    tn = cm.total - tp - fn - fp

    flags: list[str] = []
    precision = np.zeros(c)
    recall = np.zeros(c)
    specificity = np.zeros(c)
    f1 = np.zeros(c)
    for i in range(c):
        if tp[i] + fp[i] > 0:
            precision[i] = tp[i] / (tp[i] + fp[i])
        else:
            flags.append(f"class {i}: no predicted samples, precision set to 0")
        if tp[i] + fn[i] > 0:
            recall[i] = tp[i] / (tp[i] + fn[i])
        else:
            flags.append(f"class {i}: no true samples, recall set to 0")
        if tn[i] + fp[i] > 0:
            specificity[i] = tn[i] / (tn[i] + fp[i])
        if precision[i] + recall[i] > 0:
            f1[i] = 2 * precision[i] * recall[i] / (precision[i] + recall[i])
    return MetricReport(
        accuracy=cm.accuracy,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        macro_specificity=float(specificity.mean()),
        macro_auc=None,
        per_class={"precision": precision.tolist(), "recall": recall.tolist(),
                   "f1": f1.tolist(), "specificity": specificity.tolist()},
        flags=flags,
    )


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    sorted_x = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc_ovr(scores: np.ndarray, labels) -> tuple[float | None, dict]:
    """Rank-based one-vs-rest AUC per class plus ROC point lists.

    Ties contribute one half. Classes lacking positives or negatives are
    excluded from the macro mean and flagged. Returns
    (macro_auc, {"auc": per-class list with None, "roc": per-class point
    lists, "flags": [...]}).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.size:
        raise ContractError(f"scores {scores.shape} do not match {labels.size} labels")
    c = scores.shape[1]
    per_auc: list[float | None] = []
    roc: list[list[tuple[float, float]]] = []
    flags: list[str] = []
    for i in range(c):
        pos = labels == i
        n_pos = int(pos.sum())
        n_neg = int(labels.size - n_pos)
        if n_pos == 0 or n_neg == 0:
            per_auc.append(None)
            roc.append([])
            flags.append(f"class {i}: AUC undefined "
                         f"({'no positives' if n_pos == 0 else 'no negatives'})")
            continue
        ranks = _average_ranks(scores[:, i])
        auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
        per_auc.append(float(auc))
        roc.append(_roc_points(scores[:, i], pos))
    defined = [a for a in per_auc if a is not None]
    macro = float(np.mean(defined)) if defined else None
    return macro, {"auc": per_auc, "roc": roc, "flags": flags}


def _roc_points(score: np.ndarray, pos: np.ndarray) -> list[tuple[float, float]]:
    """(FPR, TPR) pairs swept from the highest threshold down."""
    order = np.argsort(-score, kind="stable")
    sorted_pos = pos[order]
    sorted_score = score[order]
    n_pos = pos.sum()
    n_neg = pos.size - n_pos
    points = [(0.0, 0.0)]
    tp = fp = 0
    for k in range(pos.size):
        tp += int(sorted_pos[k])
        fp += int(~sorted_pos[k])
        # emit a point only after consuming every sample tied at this score
        if k + 1 < pos.size and sorted_score[k + 1] == sorted_score[k]:
            continue
        points.append((fp / n_neg, tp / n_pos))
    return points


def decision_curve(scores: np.ndarray, labels, thresholds) -> dict:
    """One-vs-rest net benefit NB = TP/n - FP/n * p/(1-p) per class/threshold.

    Returns {"thresholds": [...], "per_class": [C][T] floats,
    "macro": [T] floats}.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    thresholds = [float(t) for t in thresholds]
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ConfigError(f"decision threshold must lie in (0, 1), got {t}")
    n = labels.size
    c = scores.shape[1]
    table = np.zeros((c, len(thresholds)))
    for i in range(c):
        y = labels == i
        for k, t in enumerate(thresholds):
            pred = scores[:, i] >= t
            tp = float(np.sum(pred & y))
            fp = float(np.sum(pred & ~y))
            table[i, k] = tp / n - fp / n * (t / (1.0 - t))
    return {"thresholds": thresholds, "per_class": table.tolist(),
            "macro": table.mean(axis=0).tolist()}


# ---------------------------------------------------------------------------
# gradient-norm analysis


def per_sample_logit_grad_norms(logits: Tensor) -> np.ndarray:
    """L2 norm of each sample's own loss gradient wrt its logits row.

    Call after backward on the batch-mean loss; the stored row gradients
    carry a uniform 1/B factor from the mean, which is undone here.
    """
    if logits.grad is None:
        raise ContractError("run backward before reading logit gradients")
    batch = logits.shape[0]
    g = logits.grad * batch
    return np.sqrt((g.astype(np.float64) ** 2).sum(axis=1))


def gradient_norm_by_group(model, params: ModelParams, features, labels,
                           loss_cfg: L.LossConfig, tail: list[int], head: list[int],
                           coeffs=None) -> dict:
    """Mean per-sample logit-gradient norm within the tail and head groups.

    Empty groups are reported as None and flagged.
    """
    labels = np.asarray(labels)
    logits = model.batch_logits(params, features)
    gamma_param = params["loss.gamma"] if (loss_cfg.gamma_trainable
                                           and "loss.gamma" in params) else None
    loss = L.batch_loss(logits, labels, loss_cfg, coeffs=coeffs, gamma_param=gamma_param)
    params.zero_grads()
    T.backward(loss)
    norms = per_sample_logit_grad_norms(logits)
    out = {"per_sample": norms, "flags": []}
    for name, group in (("tail", tail), ("head", head)):
        mask = np.isin(labels, group)
        if mask.any():
            out[name] = float(norms[mask].mean())
        else:
            out[name] = None
            out["flags"].append(f"{name} group empty in this batch")
    return out


# ---------------------------------------------------------------------------
# gradient-weighted attention rollout


def attention_rollout(maps, grads) -> np.ndarray:
    """Patch saliency from per-layer attention maps and their gradients.

    Per layer the heads are fused as mean_h ReLU(A_h * G_h), the identity is
    added for the residual path, rows are renormalized to probability
    vectors, and the per-layer matrices are chain multiplied (last layer on
    the left). Row 0 holds the class token's accumulated attention; its
    patch columns are min-max scaled to [0, 1]. A constant row scales to
    zeros.
    """
    if len(maps) == 0:
        raise ContractError("need at least one attention layer")
    if grads is None or len(grads) != len(maps):
        raise ContractError("need one gradient stack per attention layer")
    rolled = None
    for layer_maps, layer_grads in zip(maps, grads):
        if len(layer_maps) != len(layer_grads) or not layer_maps:
            raise ContractError("attention maps and gradients disagree per head")
        fused = None
        for a, g in zip(layer_maps, layer_grads):
            a = np.asarray(a, dtype=np.float64)
            if g is None:
                raise ContractError("missing gradient for an attention map")
            g = np.asarray(g, dtype=np.float64)
            if a.shape != g.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
                raise ShapeError(f"bad attention/gradient shapes {a.shape} vs {g.shape}")
            f = np.maximum(a * g, 0.0)
            fused = f if fused is None else fused + f
        fused /= len(layer_maps)
        fused += np.eye(fused.shape[0])
        fused /= fused.sum(axis=1, keepdims=True)
        rolled = fused if rolled is None else fused @ rolled
    mask = rolled[0, 1:]
    lo, hi = mask.min(), mask.max()
    if hi > lo:
        return (mask - lo) / (hi - lo)
    return np.zeros_like(mask)


def grad_rollout_for_sample(classifier, params: ModelParams, image,
                            target_class: int | None = None) -> np.ndarray:
    """Rollout mask for one image, driven by the chosen class logit
    (predicted class when target_class is None)."""
    logits, stack = classifier.forward_single(params, image)
    if target_class is None:
        target_class = int(np.argmax(logits.data))
    params.zero_grads()
    score = T.sum_(T.slice_axis(logits, 0, target_class, target_class + 1))
    T.backward(score)
    maps = [[m.data for m in layer] for layer in stack]
    grads = [[m.grad for m in layer] for layer in stack]
    return attention_rollout(maps, grads)


def evaluate_scores(scores: np.ndarray, labels, num_classes: int) -> MetricReport:
    """Confusion-derived metrics plus macro AUC from softmax scores."""
    preds = predict(scores)
    cm = confusion(preds, labels, num_classes)
    report = classification_metrics(cm)
    macro_auc, detail = auc_ovr(scores, labels)
    report.macro_auc = macro_auc
    report.per_class["auc"] = detail["auc"]
    report.flags.extend(detail["flags"])
    return report
