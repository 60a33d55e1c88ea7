"""Every strategy on the same scenario, with GLOBAL and LOCAL scores."""

# %%
from fedbench.datagen import fed_ecg_analog, gen_multilabel_scenario
from fedbench.fl import preset, run_experiment

ds = gen_multilabel_scenario(fed_ecg_analog(seed=1))

# %% [markdown]
# GLOBAL scores one model (or, for FedSM, the selector-routed personal
# models) on the pooled test set.  LOCAL scores each client's serving model
# on its own test set: personal models for Ditto, FedSM and FedALA, the
# global model otherwise.

# %%
print(f"{'strategy':10s} {'GLOBAL':>7s}  LOCAL per client")
for name in ("fedavg", "fedprox", "scaffold", "fedinit", "ditto", "fedsm", "fedala"):
    res = run_experiment(ds, preset(name, "multilabel", rounds=30), seed=1)
    g = res.final.global_reports[0].micro_f1
    local = " ".join(f"{r.micro_f1:.3f}" for r in res.final.local_reports)
    print(f"{name:10s} {g:7.3f}  {local}")

# %% [markdown]
# Hyperparameters are plain dataclass fields; ``replace`` accepts the alias
# ``lambda`` and nested ALA settings.

# %%
cfg = preset("fedsm", "multilabel").replace(**{"lambda": 0.5, "gamma": 0.1})
print(cfg.to_dict())
cfg = preset("fedala", "multilabel").replace(**{"ala.rand_percent": 50, "ala.eta": 0.5})
print(cfg.ala)
