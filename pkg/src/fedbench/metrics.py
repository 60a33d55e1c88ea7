"""Classification and segmentation metrics.

Multi-label scores take probability and binary target matrices of shape
``(n_samples, n_labels)``; predictions are ``probs >= threshold``.
Segmentation scores take integer class grids plus an optional ignore mask
(1 = pixel excluded, the "Maybe-BG" region of partially annotated clients).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ShapeError, UndefinedMetricError

DEFAULT_THRESHOLD = 0.5
DEFAULT_TOPK = (1, 3, 5, 10)


@dataclass
class ClassifScores:
    probs: np.ndarray
    targets: np.ndarray
    threshold: float = DEFAULT_THRESHOLD
    class_counts: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.targets = np.asarray(self.targets).astype(np.int64)
        if self.probs.shape != self.targets.shape or self.probs.ndim != 2:
            raise ShapeError(f"probs {self.probs.shape} vs targets {self.targets.shape}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold must lie in (0, 1)")

    @property
    def predictions(self):
        return (self.probs >= self.threshold).astype(np.int64)


def _scores(probs, targets, threshold):
    if isinstance(probs, ClassifScores):
        return probs
    return ClassifScores(probs, targets, threshold)


def _confusion(s):
    pred, y = s.predictions, s.targets
    tp = (pred & y).sum(axis=0)
    fp = (pred & (1 - y)).sum(axis=0)
    fn = ((1 - pred) & y).sum(axis=0)
    return tp, fp, fn


def micro_f1(probs, targets=None, threshold=DEFAULT_THRESHOLD):
    """F1 from TP/FP/FN pooled over all labels; 0 when precision + recall is 0."""
    s = _scores(probs, targets, threshold)
    tp, fp, fn = (int(v.sum()) for v in _confusion(s))
    denom = 2 * tp + fp + fn
    return 0.0 if tp == 0 or denom == 0 else 2.0 * tp / denom


def hamming_loss(probs, targets=None, threshold=DEFAULT_THRESHOLD):
    s = _scores(probs, targets, threshold)
    return float(np.mean(s.predictions != s.targets))


def per_class_f1(probs, targets=None, threshold=DEFAULT_THRESHOLD):
    s = _scores(probs, targets, threshold)
    tp, fp, fn = _confusion(s)
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2.0 * tp / np.maximum(denom, 1), 0.0)
    return f1


def macro_f1_stats(probs, targets=None, threshold=DEFAULT_THRESHOLD):
    """Per-class F1 with its mean and population standard deviation."""
    f1 = per_class_f1(probs, targets, threshold)
    return f1, float(f1.mean()), float(f1.std())


def average_precision(scores, targets):
    """Non-interpolated AP of one label: sum of precision@k at each positive, over #positives.

    Ranking ties are broken by sample index.  Returns NaN for a label with
    no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    targets = np.asarray(targets).astype(np.int64)
    n_pos = int(targets.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    hits = targets[order]
    precision_at_k = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at_k[hits == 1].sum() / n_pos)


def average_precision_per_label(probs, targets=None):
    s = _scores(probs, targets, DEFAULT_THRESHOLD)
    return np.array([average_precision(s.probs[:, j], s.targets[:, j])
                     for j in range(s.probs.shape[1])])


def mean_average_precision(probs, targets=None, return_excluded=False):
    """Unweighted mean AP over labels that have at least one positive."""
    ap = average_precision_per_label(probs, targets)
    included = ~np.isnan(ap)
    if not included.any():
        raise UndefinedMetricError("no label has a positive sample; mAP is undefined")
    value = float(ap[included].mean())
    if return_excluded:
        return value, [int(j) for j in np.flatnonzero(~included)]
    return value


def topk_head_tail(class_f1, class_counts, k):
    """Mean F1 of the ``k`` most and ``k`` least populous classes, and the relative drop in percent.

    Classes are ordered by descending count with lower indices first on ties,
    so tied classes fall into the head.
    """
    class_f1 = np.asarray(class_f1, dtype=np.float64)
    class_counts = np.asarray(class_counts)
    if class_f1.shape != class_counts.shape:
        raise ShapeError("per-class F1 and class counts differ in length")
    if k < 1 or 2 * k > len(class_f1):
        raise ConfigurationError(f"top-k needs 1 <= k and 2k <= {len(class_f1)} classes, got k={k}")
    order = sorted(range(len(class_counts)), key=lambda j: (-class_counts[j], j))
    head = float(class_f1[order[:k]].mean())
    tail = float(class_f1[order[-k:]].mean())
    drop = 0.0 if head == 0 else 100.0 * (head - tail) / head
    return head, tail, drop


def relative_to_central(score, central_score):
    if central_score <= 0:
        raise UndefinedMetricError("central score must be positive")
    return 100.0 * score / central_score


@dataclass
class SegPair:
    pred_mask: np.ndarray
    true_mask: np.ndarray
    class_of_interest: int
    ignore_mask: np.ndarray | None = None

    def regions(self):
        pred = np.asarray(self.pred_mask)
        true = np.asarray(self.true_mask)
        if pred.shape != true.shape:
            raise ShapeError(f"pred {pred.shape} vs true {true.shape}")
        if self.class_of_interest < 1:
            raise ConfigurationError("class_of_interest must be a foreground class (>= 1)")
        keep = np.ones(true.shape, dtype=bool)
        if self.ignore_mask is not None:
            ignore = np.asarray(self.ignore_mask)
            if ignore.shape != true.shape:
                raise ShapeError("ignore_mask shape does not match masks")
            keep = ignore == 0
        c = self.class_of_interest
        return (pred == c) & keep, (true == c) & keep


def dice(pred_mask, true_mask, class_of_interest, ignore_mask=None):
    """``2|y & p| / (|y| + |p|)`` over non-ignored pixels; 1.0 when both regions are empty."""
    p, y = SegPair(pred_mask, true_mask, class_of_interest, ignore_mask).regions()
    total = int(p.sum() + y.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((p & y).sum()) / total


def edge_pixels(region):
    """Coordinates of region pixels with at least one 4-neighbour outside (the border counts as outside)."""
    padded = np.pad(region, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(region & ~interior).astype(np.float64)


def directed_edge_distance(a, b):
    """``max_{a in A} min_{b in B} ||a - b||`` for two point sets."""
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    return float(np.sqrt(d2.min(axis=1).max()))


def hausdorff(pred_mask, true_mask, class_of_interest, ignore_mask=None):
    """Symmetric Hausdorff distance between the edge pixels of the two regions."""
    p, y = SegPair(pred_mask, true_mask, class_of_interest, ignore_mask).regions()
    if not p.any() or not y.any():
        raise UndefinedMetricError(f"class {class_of_interest} region is empty")
    ep, ey = edge_pixels(p), edge_pixels(y)
    return max(directed_edge_distance(ep, ey), directed_edge_distance(ey, ep))


@dataclass
class MetricsReport:
    scope: str = "GLOBAL"
    client_id: int | None = None
    micro_f1: float | None = None
    map: float | None = None
    hamming_loss: float | None = None
    macro_f1_mean: float | None = None
    macro_f1_std: float | None = None
    per_class_f1: list[float] = field(default_factory=list)
    topk: list[tuple[int, float, float, float]] = field(default_factory=list)
    map_excluded_labels: list[int] = field(default_factory=list)
    dice_per_class: dict[int, float | None] = field(default_factory=dict)
    hausdorff_per_class: dict[int, float | None] = field(default_factory=dict)

    @property
    def mean_dice(self):
        vals = [v for v in self.dice_per_class.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_hausdorff(self):
        vals = [v for v in self.hausdorff_per_class.values() if v is not None]
        return float(np.mean(vals)) if vals else None

    def to_flat_dict(self):
        out = {"scope": self.scope}
        if self.client_id is not None:
            out["client_id"] = self.client_id
        if self.micro_f1 is not None:
            out.update(micro_f1=self.micro_f1, map=self.map, hl=self.hamming_loss,
                       macro_f1_mean=self.macro_f1_mean, macro_f1_std=self.macro_f1_std)
            for k, head, tail, drop in self.topk:
                out[f"topk_k{k}_head"] = head
                out[f"topk_k{k}_tail"] = tail
                out[f"topk_k{k}_drop"] = drop
        if self.dice_per_class:
            for c, v in sorted(self.dice_per_class.items()):
                out[f"dice_c{c}"] = v
            for c, v in sorted(self.hausdorff_per_class.items()):
                out[f"hd_c{c}"] = v
            out["dice_mean"] = self.mean_dice
            out["hd_mean"] = self.mean_hausdorff
        return out


def multilabel_report(probs, targets, class_counts=None, ks=DEFAULT_TOPK,
                      threshold=DEFAULT_THRESHOLD, scope="GLOBAL", client_id=None):
    s = ClassifScores(probs, targets, threshold, class_counts)
    f1, mean, std = macro_f1_stats(s)
    try:
        m, excluded = mean_average_precision(s, return_excluded=True)
    except UndefinedMetricError:
        m, excluded = None, list(range(s.probs.shape[1]))
    report = MetricsReport(scope=scope, client_id=client_id, micro_f1=micro_f1(s), map=m,
                           hamming_loss=hamming_loss(s), macro_f1_mean=mean, macro_f1_std=std,
                           per_class_f1=[float(v) for v in f1], map_excluded_labels=excluded)
    if class_counts is not None:
        for k in ks:
            if 2 * k <= len(f1):
                report.topk.append((k, *topk_head_tail(f1, class_counts, k)))
    return report


def segmentation_report(pred_masks, true_masks, ignore_masks=None, classes=(1, 2, 3),
                        sample_classes=None, scope="GLOBAL", client_id=None):
    """Per-class DICE and Hausdorff averaged over images.

    ``sample_classes[i]`` limits which classes are scored on image ``i``
    (a partially annotated client's test frames only carry its own classes).
    Hausdorff skips images where either region is empty; a class with no
    scorable image reports ``None``.
    """
    pred_masks = np.asarray(pred_masks)
    true_masks = np.asarray(true_masks)
    if pred_masks.shape != true_masks.shape:
        raise ShapeError("prediction and truth stacks differ in shape")
    dices = {c: [] for c in classes}
    hds = {c: [] for c in classes}
    for i in range(len(true_masks)):
        ignore = None if ignore_masks is None else ignore_masks[i]
        allowed = classes if sample_classes is None else sample_classes[i]
        for c in classes:
            if c not in allowed:
                continue
            dices[c].append(dice(pred_masks[i], true_masks[i], c, ignore))
            try:
                hds[c].append(hausdorff(pred_masks[i], true_masks[i], c, ignore))
            except UndefinedMetricError:
                pass
    return MetricsReport(
        scope=scope, client_id=client_id,
        dice_per_class={c: (float(np.mean(v)) if v else None) for c, v in dices.items()},
        hausdorff_per_class={c: (float(np.mean(v)) if v else None) for c, v in hds.items()},
    )
