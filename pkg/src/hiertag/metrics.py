"""Masked multi-label metrics: ROC-AUC, average precision, F1 at tuned thresholds.

ROC-AUC and AP follow the usual scikit-learn definitions (Mann-Whitney with
half credit for ties; step-interpolated AP with tied scores grouped into one
step) but are computed here directly.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DegenerateLabels, NoObservedEntries, ShapeMismatch
from .hierarchy import POS, UNK, Hierarchy

LEVELS = ("fine", "coarse")
METRIC_NAMES = ("roc_auc", "pr_auc", "f1")


def roc_auc(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels("ROC-AUC needs at least one positive and one negative")
    ranks = rankdata(s)  # average ranks give ties half credit
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DegenerateLabels("average precision needs at least one positive")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[cut]
    predicted = cut + 1
    precision = tp / predicted
    recall = tp / n_pos
    steps = np.diff(np.r_[0.0, recall])
    return float((steps * precision).sum())


def f1_at(scores, labels, threshold: float) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pred = s >= threshold
    tp = int((pred & y).sum())
    fp = int((pred & ~y).sum())
    fn = int((~pred & y).sum())
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def threshold_candidates(scores) -> np.ndarray:
    u = np.unique(np.asarray(scores, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    return np.unique(np.r_[0.0, mids, 1.0])


def best_threshold(scores, labels) -> tuple[float, float]:
    """(threshold, F1) maximizing F1 over the candidate set.

    Ties go to the smallest threshold, except that when no threshold achieves a
    positive F1 the answer is 1.0 (predict nothing).
    """
    best_t, best_f = 1.0, 0.0
    for t in threshold_candidates(scores):
        f = f1_at(scores, labels, t)
        if f > best_f:
            best_t, best_f = float(t), f
    return best_t, best_f


def optimize_thresholds(val_scores: np.ndarray, val_states: np.ndarray) -> np.ndarray:
    """Per-tag thresholds from (n, T) validation scores and LabelState matrix."""
    scores = np.asarray(val_scores, dtype=np.float64)
    states = np.asarray(val_states)
    if scores.shape != states.shape:
        raise ShapeMismatch(f"scores {scores.shape} vs states {states.shape}")
    out = np.empty(scores.shape[1])
    for t in range(scores.shape[1]):
        obs = states[:, t] != UNK
        if not obs.any():
            raise NoObservedEntries(f"tag column {t} has no observed validation entries")
        out[t] = best_threshold(scores[obs, t], states[obs, t] == POS)[0]
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class TagMetrics:
    tag: str
    roc_auc: Optional[float]
    pr_auc: Optional[float]
    f1: float
    threshold: float
    observed_count: int
    positive_count: int


@dataclass
class LevelReport:
    tags: list[TagMetrics]
    macro: dict[str, float]
    skipped_tags: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    levels: dict[str, LevelReport]

    def macro(self, level: str, metric: str) -> float:
        return self.levels[level].macro[metric]

    def to_dict(self) -> dict:
        return {lvl: asdict(rep) for lvl, rep in self.levels.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        """Rows: level, tag, metrics...; macro rows use tag ``__macro__``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "tag", "roc_auc", "pr_auc", "f1", "threshold", "observed_count",
                    "positive_count", "skipped"])
        for lvl, rep in self.levels.items():
            for t in rep.tags:
                w.writerow([lvl, t.tag, _fmt(t.roc_auc), _fmt(t.pr_auc), _fmt(t.f1), _fmt(t.threshold),
                            t.observed_count, t.positive_count, int(t.tag in rep.skipped_tags)])
            w.writerow([lvl, "__macro__", _fmt(rep.macro["roc_auc"]), _fmt(rep.macro["pr_auc"]),
                        _fmt(rep.macro["f1"]), "", "", "", ""])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        levels = {}
        for lvl, rep in d.items():
            levels[lvl] = LevelReport([TagMetrics(**t) for t in rep["tags"]], dict(rep["macro"]),
                                      list(rep["skipped_tags"]))
        return cls(levels)


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def evaluate_level(scores: np.ndarray, states: np.ndarray, tags: Sequence[str],
                   thresholds: np.ndarray) -> LevelReport:
    scores = np.asarray(scores, dtype=np.float64)
    states = np.asarray(states)
    if scores.shape != states.shape or scores.shape[1] != len(tags) or len(thresholds) != len(tags):
        raise ShapeMismatch(f"scores {scores.shape}, states {states.shape}, {len(tags)} tags, "
                            f"{len(thresholds)} thresholds")
    out, skipped = [], []
    for t, name in enumerate(tags):
        obs = states[:, t] != UNK
        s, y = scores[obs, t], states[obs, t] == POS
        n_pos = int(y.sum())
        degenerate = n_pos == 0 or n_pos == y.size
        auc = None if degenerate else roc_auc(s, y)
        ap = None if n_pos == 0 else average_precision(s, y)
        out.append(TagMetrics(name, auc, ap, f1_at(s, y, thresholds[t]), float(thresholds[t]),
                              int(obs.sum()), n_pos))
        if degenerate:
            skipped.append(name)
    kept = [m for m in out if m.tag not in skipped]
    macro = {
        "roc_auc": _mean([m.roc_auc for m in kept]),
        "pr_auc": _mean([m.pr_auc for m in kept]),
        "f1": _mean([m.f1 for m in kept]),
    }
    return LevelReport(out, macro, skipped)


def _mean(values) -> Optional[float]:
    return float(np.mean(values)) if values else None


def evaluate(pred, fine_states: np.ndarray, coarse_states: np.ndarray, h: Hierarchy,
             thresholds: dict[str, np.ndarray]) -> MetricsReport:
    """Both levels of a Prediction against LabelState matrices."""
    if pred.p_coarse is None:
        raise ShapeMismatch("prediction has no coarse probabilities; aggregate first")
    return MetricsReport({
        "fine": evaluate_level(pred.p_fine, fine_states, h.fine_tags, thresholds["fine"]),
        "coarse": evaluate_level(pred.p_coarse, coarse_states, h.coarse_tags, thresholds["coarse"]),
    })


def tune_thresholds(pred, fine_states, coarse_states) -> dict[str, np.ndarray]:
    return {
        "fine": optimize_thresholds(pred.p_fine, fine_states),
        "coarse": optimize_thresholds(pred.p_coarse, coarse_states),
    }
