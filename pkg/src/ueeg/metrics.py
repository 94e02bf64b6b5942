"""Classification metrics and report serialization."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, SingleClassInput


def _pair(pred, true):
    pred, true = np.asarray(pred), np.asarray(true)
    if pred.shape != true.shape or pred.ndim != 1:
        raise LengthMismatch(f"prediction shape {pred.shape} vs truth shape {true.shape}")
    if pred.size == 0:
        raise LengthMismatch("metrics need at least one sample")
    return pred.astype(np.int64), true.astype(np.int64)


def accuracy(pred, true) -> float:
    pred, true = _pair(pred, true)
    return float(np.count_nonzero(pred == true)) / pred.size


def confusion_matrix(pred, true, k: int) -> np.ndarray:
    """Counts indexed [true, predicted]."""
    pred, true = _pair(pred, true)
    return np.bincount(true * k + pred, minlength=k * k).reshape(k, k)


def per_class_f1(pred, true, k: int) -> np.ndarray:
    cm = confusion_matrix(pred, true, k)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    # 2PR/(P+R) == 2TP/(2TP+FP+FN); a class never predicted nor present scores 0
    return np.divide(2 * tp, denom, out=np.zeros(k), where=denom > 0)


def macro_f1(pred, true, k: int, average: str = "macro") -> float:
    f1 = per_class_f1(pred, true, k)
    if average == "macro":
        return float(f1.mean())
    if average == "weighted":
        support = np.bincount(_pair(pred, true)[1], minlength=k)
        return float((f1 * support).sum() / support.sum())
    raise ValueError(f"unknown averaging {average!r}")


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise LengthMismatch(f"scores {scores.shape} vs labels {labels.shape}")
    pos = labels == 1
    if pos.all() or not pos.any():
        raise SingleClassInput("AUC needs both positive and negative samples")
    return scores, pos


def auc_mann_whitney(scores, labels) -> float:
    """P(random positive outscores random negative), ties counting one half.

    Uses average ranks; ``2U`` stays an exact integer.
    """
    scores, pos = _binary(scores, labels)
    order = np.argsort(scores, kind="stable")
    s = scores[order]
    ranks2 = np.empty(s.size, dtype=np.int64)  # twice the average 1-based rank
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and s[j + 1] == s[i]:
            j += 1
        ranks2[i : j + 1] = i + j + 2
        i = j + 1
    r2 = np.empty_like(ranks2)
    r2[order] = ranks2
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    u2 = int(r2[pos].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def auc_trapezoid(scores, labels) -> float:
    """Area under the ROC curve by the trapezoid rule over tied-score groups."""
    scores, pos = _binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    ends = np.r_[distinct, s.size - 1]
    tps = np.cumsum(p)[ends]
    fps = np.cumsum(~p)[ends]
    tpr = np.r_[0, tps] / tps[-1]
    fpr = np.r_[0, fps] / fps[-1]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def auc_roc(scores, labels) -> float:
    return auc_mann_whitney(scores, labels)


# ---------------------------------------------------------------------------
# reports

TABLE_MODELS = ("AutoencoderKNN", "AutoencoderRF", "FourCNN", "GRUNetwork")
TABLE_DATASETS = ("ERN", "SMR", "BMNIST", "BMNIST_2", "SEED", "ThoughtViz")

# Published (accuracy, F1) per model and dataset, for display next to synthetic runs.
PUBLISHED = {
    "AutoencoderKNN": {
        "ERN": (0.665, 0.515), "SMR": (0.260, 0.210), "BMNIST": (0.276, 0.056),
        "BMNIST_2": (0.846, 0.785), "SEED": (0.393, 0.381), "ThoughtViz": (0.419, 0.424),
    },
    "AutoencoderRF": {
        "ERN": (0.630, 0.529), "SMR": (0.243, 0.137), "BMNIST": (0.275, 0.042),
        "BMNIST_2": (0.857, 0.817), "SEED": (0.365, 0.305), "ThoughtViz": (0.651, 0.702),
    },
    "FourCNN": {
        "ERN": (0.711, 0.420), "SMR": (0.385, 0.383), "BMNIST": (0.352, 0.152),
        "BMNIST_2": (0.994, 0.993), "SEED": (0.648, 0.644), "ThoughtViz": (0.740, 0.740),
    },
    "GRUNetwork": {
        "ERN": (0.714, 0.433), "SMR": (0.333, 0.296), "BMNIST": (0.338, 0.160),
        "BMNIST_2": (0.993, 0.991), "SEED": (0.744, 0.744), "ThoughtViz": (0.774, 0.774),
    },
}


def published(model: str, dataset: str) -> tuple[float, float] | None:
    base = dataset.split("-")[0]
    return PUBLISHED.get(model, {}).get(base)


@dataclass
class MetricsReport:
    dataset: str
    model: str
    accuracy: float
    f1: float
    auc: float | None
    confusion: np.ndarray = field(repr=False)
    f1_average: str = "macro"

    def __post_init__(self):
        total = int(self.confusion.sum())
        if total and abs(np.trace(self.confusion) / total - self.accuracy) > 0:
            raise ValueError("confusion matrix disagrees with accuracy")

    def as_row(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "acc": f"{self.accuracy:.4f}",
            "f1": f"{self.f1:.4f}",
            "auc": "" if self.auc is None else f"{self.auc:.4f}",
        }

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "model": self.model,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "f1_average": self.f1_average,
            "auc": self.auc,
            "confusion": self.confusion.tolist(),
        }


def build_report(dataset, model, pred, true, k, scores=None, average="macro") -> MetricsReport:
    auc = None
    if k == 2 and scores is not None and len(np.unique(true)) == 2:
        auc = auc_roc(scores, true)
    return MetricsReport(
        dataset, model, accuracy(pred, true), macro_f1(pred, true, k, average), auc,
        confusion_matrix(pred, true, k), average,
    )


def reports_to_csv(rows) -> str:
    """``rows`` holds MetricsReport objects or dicts with dataset/model/acc/f1/auc keys."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["dataset", "model", "acc", "f1", "auc"], lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r.as_row() if isinstance(r, MetricsReport) else r)
    return buf.getvalue()


def format_table(cells: dict, datasets, models=TABLE_MODELS, reference: bool = True) -> str:
    """Render a grid with one row per model and an (Acc, F1) column pair per dataset.

    ``cells[(model, dataset)]`` is a MetricsReport, or a string (e.g. ``"ERROR"``)
    shown in both columns. With ``reference`` the published values follow in
    brackets where the dataset name matches a benchmark dataset.
    """
    datasets = list(datasets)
    head = ["model"] + [f"{d} {m}" for d in datasets for m in ("Acc", "F1")]
    lines = []
    for model in models:
        row = [model]
        for d in datasets:
            cell = cells.get((model, d))
            ref = published(model, d) if reference else None
            if isinstance(cell, MetricsReport):
                vals = [f"{cell.accuracy:.3f}", f"{cell.f1:.3f}"]
            else:
                vals = [cell or "-", cell or "-"]
            if ref is not None:
                vals = [f"{v} [{r:.3f}]" for v, r in zip(vals, ref)]
            row += vals
        lines.append(row)
    widths = [max(len(r[i]) for r in [head] + lines) for i in range(len(head))]
    fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(head), sep] + [fmt(r) for r in lines]) + "\n"
