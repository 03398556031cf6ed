"""Global average precision over pooled top-k predictions, plus per-class AP.

GAP pools every video's top-20 (label, confidence) pairs into one ranked
list and computes average precision against the total positive count. Ties
are broken by stable input order, which makes the metric sensitive to how
callers enumerate predictions; this is documented behavior.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, DataError

TOP_K = 20

__all__ = ["TOP_K", "EvalReport", "PredictionSet", "gap_at_20", "per_class_ap",
           "read_predictions", "write_predictions"]


@dataclass
class PredictionSet:
    """Per-video top-k predictions and ground-truth label sets."""

    predictions: list  # per video: [(label, confidence), ...], len <= TOP_K
    ground_truth: list  # per video: set of true label indices

    def __post_init__(self):
        if len(self.predictions) != len(self.ground_truth):
            raise ContractError(
                f"{len(self.predictions)} prediction lists vs "
                f"{len(self.ground_truth)} ground-truth sets"
            )
        for video, pairs in enumerate(self.predictions):
            if len(pairs) > TOP_K:
                raise ContractError(
                    f"video {video} has {len(pairs)} predictions (max {TOP_K})"
                )
            for label, confidence in pairs:
                if label < 0:
                    raise ContractError(f"negative label {label}")
                if not np.isfinite(confidence):
                    raise ContractError(
                        f"non-finite confidence for video {video}"
                    )
        self.ground_truth = [set(labels) for labels in self.ground_truth]

    @property
    def total_positives(self) -> int:
        return sum(len(labels) for labels in self.ground_truth)


def _pooled_hits(preds: PredictionSet):
    """All (confidence, is_correct) pairs, confidence-descending, stable."""
    confidences = []
    correct = []
    for pairs, truth in zip(preds.predictions, preds.ground_truth):
        for label, confidence in pairs:
            confidences.append(confidence)
            correct.append(label in truth)
    if not confidences:
        return np.array([]), np.array([], dtype=bool)
    order = np.argsort(-np.asarray(confidences), kind="stable")
    return np.asarray(confidences)[order], np.asarray(correct)[order]


def gap_at_20(preds: PredictionSet, literal_formula: bool = False) -> float:
    """Average precision of the pooled prediction stream, in [0, 1].

    The recall denominator is the total ground-truth positive count, so a
    positive that never appears in any top-20 list costs recall. With zero
    positives the metric is defined as 0 and a warning is emitted.

    `literal_formula` switches to summing precision(i) * recall(i) at each
    hit instead of precision(i) * delta-recall(i); it exists only for
    comparison and is not the challenge metric.
    """
    positives = preds.total_positives
    if positives == 0:
        warnings.warn("gap_at_20: no ground-truth positives; returning 0.0")
        return 0.0
    _, correct = _pooled_hits(preds)
    if correct.size == 0:
        return 0.0
    ranks = np.arange(1, correct.size + 1)
    true_positives = np.cumsum(correct)
    precision = true_positives / ranks
    if literal_formula:
        recall = true_positives / positives
        return float(np.sum(precision[correct] * recall[correct]))
    # Standard AP: delta-recall is 1/positives at each hit; dividing once at
    # the end keeps the perfect case exactly 1.0.
    return float(np.sum(precision[correct]) / positives)


def per_class_ap(preds: PredictionSet) -> dict:
    """AP per label over all videos; labels with zero positives are absent."""
    class_confidences: dict = {}
    class_correct: dict = {}
    for pairs, truth in zip(preds.predictions, preds.ground_truth):
        for label, confidence in pairs:
            class_confidences.setdefault(label, []).append(confidence)
            class_correct.setdefault(label, []).append(label in truth)

    positives_per_class: dict = {}
    for truth in preds.ground_truth:
        for label in truth:
            positives_per_class[label] = positives_per_class.get(label, 0) + 1

    table = {}
    for label, positives in sorted(positives_per_class.items()):
        confidences = class_confidences.get(label)
        if confidences is None:  # positives exist but label never predicted
            table[label] = 0.0
            continue
        order = np.argsort(-np.asarray(confidences), kind="stable")
        correct = np.asarray(class_correct[label])[order]
        true_positives = np.cumsum(correct)
        precision = true_positives / np.arange(1, correct.size + 1)
        table[label] = float(np.sum(precision[correct]) / positives)
    return table


@dataclass
class EvalReport:
    gap: float
    per_class: dict
    num_videos: int
    num_positives: int
    zero_positives: bool = False
    loss_curve: list = field(default_factory=list)  # (step, loss) pairs

    def __post_init__(self):
        if not (0.0 <= self.gap <= 1.0):
            raise ContractError(f"GAP {self.gap} outside [0, 1]")


# ---------------------------------------------------------------------------
# Predictions file: one line per video, "video_id label:confidence ..."
# ---------------------------------------------------------------------------


def write_predictions(path, video_ids: Sequence[str],
                      preds: PredictionSet) -> None:
    if len(video_ids) != len(preds.predictions):
        raise ContractError(
            f"{len(video_ids)} ids vs {len(preds.predictions)} prediction lists"
        )
    lines = []
    for video_id, pairs in zip(video_ids, preds.predictions):
        rendered = " ".join(f"{label}:{confidence:.6f}"
                            for label, confidence in pairs)
        lines.append(f"{video_id} {rendered}".rstrip())
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""),
                          encoding="utf-8")


def read_predictions(path):
    """Parse a predictions file back into (video_ids, prediction lists)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"predictions file '{path}' does not exist")
    video_ids = []
    predictions = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(),
                                   start=1):
        line = line.strip()
        if not line:
            continue
        pieces = line.split()
        video_ids.append(pieces[0])
        pairs = []
        for piece in pieces[1:]:
            label_text, _, conf_text = piece.partition(":")
            try:
                pairs.append((int(label_text), float(conf_text)))
            except ValueError:
                raise DataError(
                    f"bad prediction '{piece}' on line {line_no} of '{path}'"
                ) from None
        predictions.append(pairs)
    return video_ids, predictions
