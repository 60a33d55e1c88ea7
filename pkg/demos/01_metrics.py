"""Metrics on tiny hand-made inputs."""

# %%
import numpy as np

from fedbench.metrics import (average_precision, dice, hamming_loss, hausdorff, macro_f1_stats, micro_f1,
                              relative_to_central, topk_head_tail)

# %% [markdown]
# Multi-label scores threshold the probabilities at 0.5 and pool the
# confusion counts over every (sample, label) cell.

# %%
probs = np.array([[0.9, 0.8, 0.2], [0.7, 0.1, 0.6]])
targets = np.array([[1, 1, 0], [0, 1, 1]])
print("micro F1:", micro_f1(probs, targets))
print("Hamming loss:", hamming_loss(probs, targets))
f1, mean, std = macro_f1_stats(probs, targets)
print("per-class F1:", f1, "mean", mean, "std", std)

# %% [markdown]
# Average precision walks the ranked list and averages precision at every
# positive.  Here the positives sit at ranks 1 and 3.

# %%
print("AP:", average_precision([0.9, 0.8, 0.7], [1, 0, 1]))

# %% [markdown]
# Long-tail summary: mean F1 of the k most and k least frequent classes.

# %%
class_f1 = np.array([0.92, 0.85, 0.60, 0.40, 0.10, 0.05])
counts = np.array([500, 300, 80, 40, 10, 3])
for k in (1, 2, 3):
    head, tail, drop = topk_head_tail(class_f1, counts, k)
    print(f"k={k}: head {head:.3f} tail {tail:.3f} drop {drop:.1f}%")
print("score relative to central training:", relative_to_central(50.8, 63.2))

# %% [markdown]
# Segmentation: DICE and the edge-based Hausdorff distance, with an ignore
# mask that removes pixels from both.

# %%
true = np.zeros((8, 8), dtype=int)
true[1:5, 1:5] = 1
pred = np.zeros((8, 8), dtype=int)
pred[2:6, 2:6] = 1
print("DICE:", dice(pred, true, 1), "Hausdorff:", hausdorff(pred, true, 1))
ignore = np.zeros((8, 8), dtype=int)
ignore[5, :] = 1
ignore[:, 5] = 1
print("with row/column 5 ignored: DICE", dice(pred, true, 1, ignore))
