"""Slow, loop-based reference implementations used to check the metrics."""

import math

import numpy as np
from scipy.spatial.distance import directed_hausdorff


def confusion_cells(probs, targets, threshold=0.5):
    tp = fp = fn = tn = 0
    for i in range(len(probs)):
        for j in range(len(probs[i])):
            pred = probs[i][j] >= threshold
            true = targets[i][j] == 1
            if pred and true:
                tp += 1
            elif pred:
                fp += 1
            elif true:
                fn += 1
            else:
                tn += 1
    return tp, fp, fn, tn


def f1_from_counts(tp, fp, fn):
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def micro_f1(probs, targets, threshold=0.5):
    tp, fp, fn, _ = confusion_cells(probs, targets, threshold)
    return f1_from_counts(tp, fp, fn)


def hamming(probs, targets, threshold=0.5):
    tp, fp, fn, tn = confusion_cells(probs, targets, threshold)
    return (fp + fn) / (tp + fp + fn + tn)


def per_class_f1(probs, targets, threshold=0.5):
    out = []
    for j in range(len(probs[0])):
        col_p = [[row[j]] for row in probs]
        col_t = [[row[j]] for row in targets]
        tp, fp, fn, _ = confusion_cells(col_p, col_t, threshold)
        out.append(f1_from_counts(tp, fp, fn))
    return out


def macro_stats(probs, targets, threshold=0.5):
    f1 = per_class_f1(probs, targets, threshold)
    mean = sum(f1) / len(f1)
    std = math.sqrt(sum((v - mean) ** 2 for v in f1) / len(f1))
    return f1, mean, std


def average_precision(scores, targets):
    """Threshold sweep: at each positive, precision among samples ranked at or above it.

    A sample ranks above another when its score is higher, or equal with a
    lower index.
    """
    n = len(scores)
    positives = [i for i in range(n) if targets[i] == 1]
    if not positives:
        return float("nan")
    total = 0.0
    for i in positives:
        above = [j for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j <= i)]
        total += sum(targets[j] for j in above) / len(above)
    return total / len(positives)


def mean_ap(probs, targets):
    aps = [average_precision([r[j] for r in probs], [r[j] for r in targets]) for j in range(len(probs[0]))]
    aps = [a for a in aps if not math.isnan(a)]
    return sum(aps) / len(aps)


def edge_points(region):
    h, w = region.shape
    pts = []
    for r in range(h):
        for c in range(w):
            if not region[r, c]:
                continue
            for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < h and 0 <= cc < w) or not region[rr, cc]:
                    pts.append((r, c))
                    break
    return np.array(pts, dtype=float)


def hausdorff(pred, true, cls, ignore=None):
    keep = np.ones(true.shape, bool) if ignore is None else ignore == 0
    a, b = edge_points((pred == cls) & keep), edge_points((true == cls) & keep)
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])


def total_variation(p, q):
    p = np.asarray(p, float)
    q = np.asarray(q, float)
    return 0.5 * float(np.abs(p / p.sum() - q / q.sum()).sum())
