"""Random versus cluster-shard partitions of one pooled dataset."""

# %%
from fedbench.datagen import (Batch, clustershard_indices, fed_ecg_analog, gen_multilabel_scenario,
                              mean_label_tv, partition_noniid_clustershard, partition_random)

# %% [markdown]
# Pool 3200 samples, then split them three ways: the generator's own
# clients, a uniform random split, and the cluster-shard procedure
# (cosine k-means into 10 clusters, 32 shards, 8 shards per client).

# %%
ds = gen_multilabel_scenario(fed_ecg_analog(seed=0, samples_per_client=(855, 725, 1383, 237)))
natural = [Batch.concat([c.train, c.test]) for c in ds.clients]
pooled = Batch.concat(natural)
clients, shards, clusters = clustershard_indices(pooled.features, seed=0, return_shards=True)
print(len(pooled), "samples ->", len(shards), "shards ->", [len(c) for c in clients], "per client")

# %% [markdown]
# Total-variation distance between each client's label distribution and the
# pooled one (mean over clients).  Random splits stay close to the pool.

# %%
print("natural  ", round(mean_label_tv(natural, pooled), 3))
print("random   ", round(mean_label_tv(partition_random(pooled, 4, [800] * 4, seed=0), pooled), 3))
print("non-IID  ", round(mean_label_tv(partition_noniid_clustershard(pooled, seed=0), pooled), 3))
