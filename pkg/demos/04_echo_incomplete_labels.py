"""Segmentation with clients that annotate only some classes."""

# %%
import numpy as np

from fedbench.datagen import fed_echo_analog, gen_segmentation_scenario
from fedbench.fl import central_baseline, preset, run_experiment

# %% [markdown]
# Client 1 annotates every structure, client 2 only LV_Endo, client 3 only
# LV_Epi.  Pixels a client could not annotate are stored as background and
# flagged in the ignore mask ("Maybe-BG"), so they drop out of the loss and
# the scores.

# %%
ds = gen_segmentation_scenario(fed_echo_analog(seed=0))
for c in ds.clients:
    frac = c.train.ignore_mask.mean()
    print(f"client {c.client_id}: classes {sorted(c.completeness)}, stored values "
          f"{sorted(np.unique(c.train.targets).tolist())}, ignored pixels {frac:.1%}")
truth, stored, ignore = ds.clients[1].train_truth[0], ds.clients[1].train.targets[0], ds.clients[1].train.ignore_mask[0]
print("full truth:\n", truth, "\nstored by client 2:\n", stored, "\nignore mask:\n", ignore)

# %% [markdown]
# Federated training against the centralized baselines.  The
# semi-supervised baseline adds a confidence-filtered consistency loss on
# the ignored pixels.

# %%
def dice_line(name, res):
    rep = res.final.global_reports[0]
    per_class = {ds.label_names[c]: None if v is None else round(v, 3) for c, v in rep.dice_per_class.items()}
    print(f"{name:12s} mean DICE {rep.mean_dice:.3f} {per_class}")


dice_line("fedavg", run_experiment(ds, preset("fedavg", "segmentation")))
dice_line("central sup", central_baseline(ds, preset("central_sup", "segmentation")))
dice_line("central ssup", central_baseline(ds, preset("central_ssup", "segmentation"), semi_supervised=True))

# %% [markdown]
# Fed-Consist: the first half of the rounds involve the fully labeled client
# only; then the partial clients join with the consistency objective.

# %%
res = run_experiment(ds, preset("fedconsist", "segmentation", rounds=20, client_lr=0.1, unlabeled_lr=0.01))
print("participants per round:", [r.client_ids for r in res.rounds][8:12])
dice_line("fedconsist", res)
