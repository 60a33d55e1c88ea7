"""Synthetic federated scenarios and partitioning procedures.

Multi-label scenarios reproduce label skew and a long tail: pooled label
counts follow a Zipf law, each client reweights them with a Dirichlet draw,
and some clients never see certain labels.  Features are sums of per-label
Gaussian prototypes passed through a client-specific affine distortion.

Segmentation scenarios draw a ring (class 2) around a disk (class 1) plus a
separate blob (class 3) on a small grid.  Clients that cannot annotate a
class store it as background and flag those pixels in ``ignore_mask``.

Every random stream is keyed by ``(seed, purpose, client)`` so a client's
data never depends on generation order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Batch
from .errors import ConfigurationError

UNIFIED_LABELS = ("NORM", "STACH", "SBRAD", "SARRH", "PAC", "AFIB", "AFLT", "SVTAC", "PVC", "1AVB",
                  "2AVB", "3AVB", "LBBB", "RBBB", "LAO/LAE", "LVH", "RVH", "AMI", "IMI", "ASMI")
SEGMENTATION_CLASSES = ("BG", "LV_Endo", "LV_Epi", "LA")

_GLOBAL, _CLIENT, _SPLIT, _PARTITION, _PRIOR, _ASSIGN, _FEATURE = range(7)


def _rng(seed, purpose, client=0):
    return np.random.default_rng([int(seed), purpose, int(client)])


@dataclass
class ScenarioConfig:
    task: str = "multilabel"
    n_clients: int = 4
    samples_per_client: tuple[int, ...] = (224, 190, 363, 62)
    n_labels: int = 20
    zipf_exponent: float = 2.0
    label_prior_concentration: float = 1.0
    feature_shift_scale: float = 0.5
    label_dropout: tuple[tuple[int, ...], ...] = ()
    completeness_profile: tuple[tuple[int, ...], ...] = ()
    seed: int = 0
    # multilabel feature model
    input_dim: int = 32
    labels_per_sample: float = 1.3
    prototype_scale: float = 1.5
    # segmentation image model
    n_classes: int = 4
    grid_h: int = 16
    grid_w: int = 16
    pixel_noise: float = 0.25
    # "relabeled": ignore exactly the pixels relabeled to background;
    # "all_background": ignore every background pixel of partial clients
    ignore_policy: str = "relabeled"
    train_ratio: float = 0.8

    def __post_init__(self):
        self.samples_per_client = tuple(int(n) for n in self.samples_per_client)
        self.label_dropout = tuple(tuple(int(j) for j in d) for d in self.label_dropout)
        self.completeness_profile = tuple(tuple(int(c) for c in p) for p in self.completeness_profile)

    def validate(self):
        if self.task not in ("multilabel", "segmentation"):
            raise ConfigurationError(f"unknown task {self.task!r}")
        if self.n_clients < 1:
            raise ConfigurationError("n_clients must be positive")
        if len(self.samples_per_client) != self.n_clients:
            raise ConfigurationError("samples_per_client must have one entry per client")
        if any(n < 2 for n in self.samples_per_client):
            raise ConfigurationError("every client needs at least 2 samples for a train/test split")
        if not 0.0 < self.train_ratio < 1.0:
            raise ConfigurationError("train_ratio must lie in (0, 1)")
        if self.task == "multilabel":
            if self.n_labels < 2:
                raise ConfigurationError("n_labels must be at least 2")
            if self.zipf_exponent <= 0 or self.label_prior_concentration <= 0:
                raise ConfigurationError("zipf_exponent and label_prior_concentration must be positive")
            if self.feature_shift_scale < 0:
                raise ConfigurationError("feature_shift_scale must be non-negative")
            if self.label_dropout and len(self.label_dropout) != self.n_clients:
                raise ConfigurationError("label_dropout must have one entry per client")
            for dropped in self.label_dropout:
                if any(not 0 <= j < self.n_labels for j in dropped):
                    raise ConfigurationError("label_dropout refers to an unknown label")
            for j in range(self.n_labels):
                if self.label_dropout and all(j in d for d in self.label_dropout):
                    raise ConfigurationError(f"label {j} is absent from every client")
        else:
            if self.n_classes < 2:
                raise ConfigurationError("n_classes must be at least 2")
            profiles = self.profiles()
            if len(profiles) != self.n_clients:
                raise ConfigurationError("completeness_profile must have one entry per client")
            fg = set(range(1, self.n_classes))
            for p in profiles:
                if not set(p) <= fg:
                    raise ConfigurationError(f"profile {sorted(p)} outside foreground classes {sorted(fg)}")
            if set().union(*map(set, profiles)) != fg:
                raise ConfigurationError("every foreground class must be annotated by at least one client")
            if self.ignore_policy not in ("relabeled", "all_background"):
                raise ConfigurationError(f"unknown ignore_policy {self.ignore_policy!r}")
        return self

    def dropped(self, client):
        return set(self.label_dropout[client]) if self.label_dropout else set()

    def profiles(self):
        if self.completeness_profile:
            return [frozenset(p) for p in self.completeness_profile]
        full = frozenset(range(1, self.n_classes))
        if self.n_clients == 3 and self.n_classes == 4:
            return [full, frozenset({1}), frozenset({2})]
        return [full] * self.n_clients


def fed_ecg_analog(seed=0, scale=0.01, **overrides):
    """Four-client multi-label scenario shaped like the ECG benchmark.

    Client sizes are the real institution sizes times ``scale``; absent
    labels follow the gaps of the label alignment table (SPH lacks SVTAC
    and 1AVB, SXPH lacks the infarction/hypertrophy/ectopy codes, G12EC
    lacks PAC, RVH and the infarction codes), keeping NORM everywhere.
    """
    sizes = tuple(int(round(n * scale)) for n in (22425, 19019, 36272, 6205))
    cfg = dict(
        task="multilabel", n_clients=4, samples_per_client=sizes, n_labels=20, zipf_exponent=2.0,
        label_prior_concentration=1.0, feature_shift_scale=0.5,
        label_dropout=((7, 9), (), (3, 4, 8, 14, 15, 16, 17, 18, 19), (4, 16, 17, 18, 19)),
        seed=seed,
    )
    cfg.update(overrides)
    return ScenarioConfig(**cfg)


def fed_echo_analog(seed=0, **overrides):
    """Three-client segmentation scenario: one full annotator, two single-class annotators."""
    cfg = dict(task="segmentation", n_clients=3, samples_per_client=(100, 200, 100), n_classes=4,
               completeness_profile=((1, 2, 3), (1,), (2,)), feature_shift_scale=0.3, seed=seed)
    cfg.update(overrides)
    return ScenarioConfig(**cfg)


@dataclass
class InstitutionData:
    client_id: int
    train: Batch
    test: Batch
    completeness: frozenset = frozenset()
    train_truth: np.ndarray | None = None
    test_truth: np.ndarray | None = None

    @property
    def n_train(self):
        return len(self.train)

    @property
    def n_test(self):
        return len(self.test)

    def is_complete(self, n_classes):
        return set(self.completeness) >= set(range(1, n_classes))


@dataclass
class FederatedDataset:
    task: str
    clients: list[InstitutionData]
    label_names: list[str] = field(default_factory=list)
    global_test: Batch | None = None
    class_counts_global: np.ndarray | None = None

    def __post_init__(self):
        if self.global_test is None:
            self.global_test = Batch.concat(c.test for c in self.clients)
        if self.class_counts_global is None:
            self.class_counts_global = class_counts(self.task, [c.train for c in self.clients],
                                                    len(self.label_names))

    @property
    def n_outputs(self):
        return len(self.label_names)

    def pooled_train(self):
        return Batch.concat(c.train for c in self.clients)


def class_counts(task, batches, n_outputs):
    """Per-label positive counts (multilabel) or per-class image counts (segmentation)."""
    pooled = Batch.concat(batches)
    if task == "multilabel":
        return pooled.targets.sum(axis=0).astype(np.int64)
    masks = pooled.targets.reshape(len(pooled), -1)
    return np.array([(masks == c).any(axis=1).sum() for c in range(n_outputs)], dtype=np.int64)


def zipf_prior(n_labels, exponent):
    weights = np.arange(1, n_labels + 1, dtype=np.float64) ** -exponent
    return weights / weights.sum()


def _largest_remainder(total, weights):
    weights = np.asarray(weights, dtype=np.float64)
    if total == 0 or weights.sum() == 0:
        return np.zeros(len(weights), dtype=np.int64)
    raw = total * weights / weights.sum()
    out = np.floor(raw).astype(np.int64)
    short = total - int(out.sum())
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - out[i]), i))
    for i in order[:short]:
        out[i] += 1
    return out


def _allocate_label(total, weights, capacity):
    """Split ``total`` positives over clients by weight without exceeding per-client capacity."""
    alloc = np.zeros(len(weights), dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64).copy()
    capacity = np.asarray(capacity, dtype=np.int64)
    remaining = total
    while remaining > 0:
        open_ = (alloc < capacity) & (weights > 0)
        if not open_.any():
            raise ConfigurationError("label counts exceed what the allowed clients can hold; "
                                     "lower labels_per_sample")
        share = _largest_remainder(remaining, np.where(open_, weights, 0.0))
        share = np.minimum(share, capacity - alloc)
        alloc += share
        remaining = total - int(alloc.sum())
        if share.sum() == 0:
            # rounding starved every open client; hand one positive to the heaviest
            i = max(np.flatnonzero(open_), key=lambda c: (weights[c], -c))
            alloc[i] += 1
            remaining -= 1
    return alloc


def _multilabel_targets(cfg):
    sizes = np.array(cfg.samples_per_client)
    prior = zipf_prior(cfg.n_labels, cfg.zipf_exponent)
    total = int(round(cfg.labels_per_sample * sizes.sum()))
    # rounding a non-increasing sequence keeps it non-increasing
    label_totals = np.maximum(1, np.round(total * prior).astype(np.int64))
    client_priors = np.zeros((cfg.n_clients, cfg.n_labels))
    for c in range(cfg.n_clients):
        alpha = np.maximum(cfg.label_prior_concentration * prior, 1e-3)
        pi = _rng(cfg.seed, _PRIOR, c).dirichlet(alpha)
        pi[list(cfg.dropped(c))] = 0.0
        client_priors[c] = pi
    alloc = np.zeros((cfg.n_clients, cfg.n_labels), dtype=np.int64)
    for j in range(cfg.n_labels):
        allowed = np.array([j not in cfg.dropped(c) for c in range(cfg.n_clients)])
        weights = sizes * client_priors[:, j]
        if weights.sum() <= 0:
            weights = sizes * allowed
        # a steep law can ask for more positives than the allowed clients have samples
        total_j = min(int(label_totals[j]), int((sizes * allowed).sum()))
        alloc[:, j] = _allocate_label(total_j, weights, sizes * allowed)
    targets = []
    for c in range(cfg.n_clients):
        rng = _rng(cfg.seed, _ASSIGN, c)
        y = np.zeros((sizes[c], cfg.n_labels), dtype=np.int64)
        load = np.zeros(sizes[c], dtype=np.int64)
        for j in sorted(range(cfg.n_labels), key=lambda j: (-alloc[c, j], j)):
            if alloc[c, j] == 0:
                continue
            tiebreak = rng.permutation(sizes[c])
            chosen = np.lexsort((tiebreak, load))[:alloc[c, j]]
            y[chosen, j] = 1
            load[chosen] += 1
        targets.append(y)
    return targets


def _multilabel_features(cfg, targets):
    prototypes = _rng(cfg.seed, _GLOBAL).normal(0.0, cfg.prototype_scale, (cfg.n_labels, cfg.input_dim))
    out = []
    for c, y in enumerate(targets):
        rng = _rng(cfg.seed, _FEATURE, c)
        gain = 1.0 + 0.5 * cfg.feature_shift_scale * rng.uniform(-1.0, 1.0, cfg.input_dim)
        offset = cfg.feature_shift_scale * rng.normal(0.0, 1.0, cfg.input_dim)
        noise = rng.normal(0.0, 1.0, (len(y), cfg.input_dim))
        out.append((y @ prototypes) * gain + offset + noise)
    return out


def gen_multilabel_scenario(cfg):
    cfg.validate()
    if cfg.task != "multilabel":
        raise ConfigurationError("gen_multilabel_scenario needs task='multilabel'")
    targets = _multilabel_targets(cfg)
    features = _multilabel_features(cfg, targets)
    pools = [Batch(x, y) for x, y in zip(features, targets)]
    completeness = [frozenset(set(range(cfg.n_labels)) - cfg.dropped(c)) for c in range(cfg.n_clients)]
    names = list(UNIFIED_LABELS) if cfg.n_labels == len(UNIFIED_LABELS) else [
        f"label_{j}" for j in range(cfg.n_labels)]
    return split_local_global(pools, cfg.train_ratio, cfg.seed, completeness=completeness,
                              label_names=names, task="multilabel")


def _draw_heart(rng, h, w):
    """One full-truth mask: ring (2) around a disk (1), blob (3) below; classes are disjoint."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy = h * rng.uniform(0.24, 0.34)
    cx = w * rng.uniform(0.38, 0.62)
    ry = h * rng.uniform(0.20, 0.28)
    rx = w * rng.uniform(0.16, 0.24)
    thick = rng.uniform(1.3, 2.2)
    outer = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    inner = ((yy - cy) / max(ry - thick, 1.0)) ** 2 + ((xx - cx) / max(rx - thick, 1.0)) ** 2 <= 1.0
    rb = h * rng.uniform(0.15, 0.22)
    by = cy + ry + 0.7 * rb + rng.uniform(0.5, 1.5)
    bx = cx + w * rng.uniform(-0.08, 0.08)
    blob = (yy - by) ** 2 + (xx - bx) ** 2 <= rb * rb
    mask = np.zeros((h, w), dtype=np.int64)
    mask[blob & ~outer] = 3
    mask[outer] = 2
    mask[inner] = 1
    return mask


_CLASS_INTENSITY = np.array([0.0, 0.45, 1.0, -0.55])


def gen_segmentation_scenario(cfg):
    cfg.validate()
    if cfg.task != "segmentation":
        raise ConfigurationError("gen_segmentation_scenario needs task='segmentation'")
    if cfg.n_classes != 4:
        raise ConfigurationError("the synthetic heart geometry draws exactly 4 classes")
    profiles = cfg.profiles()
    full = frozenset(range(1, cfg.n_classes))
    pools, truths = [], []
    for c, n in enumerate(cfg.samples_per_client):
        rng = _rng(cfg.seed, _CLIENT, c)
        gain = 1.0 + 0.5 * cfg.feature_shift_scale * rng.uniform(-1.0, 1.0)
        offset = cfg.feature_shift_scale * rng.uniform(-1.0, 1.0)
        truth = np.stack([_draw_heart(rng, cfg.grid_h, cfg.grid_w) for _ in range(n)])
        images = _CLASS_INTENSITY[truth] * gain + offset
        images = images + rng.normal(0.0, cfg.pixel_noise, images.shape)
        stored, ignore = apply_completeness(truth, profiles[c], full, cfg.ignore_policy)
        pools.append(Batch(images, stored, ignore))
        truths.append(truth)
    return split_local_global(pools, cfg.train_ratio, cfg.seed, completeness=profiles,
                              label_names=list(SEGMENTATION_CLASSES[:cfg.n_classes]),
                              task="segmentation", truths=truths)


def apply_completeness(truth, profile, full, policy="relabeled"):
    """Relabel classes a client cannot annotate as background and build its ignore mask."""
    keep = np.isin(truth, list(profile)) | (truth == 0)
    stored = np.where(keep, truth, 0)
    if set(profile) >= set(full):
        ignore = np.zeros(truth.shape, dtype=np.int8)
    elif policy == "relabeled":
        ignore = (~keep).astype(np.int8)
    else:
        ignore = (stored == 0).astype(np.int8)
    return stored, ignore


def gen_scenario(cfg):
    if cfg.task == "multilabel":
        return gen_multilabel_scenario(cfg)
    return gen_segmentation_scenario(cfg)


def train_size(n, ratio=0.8):
    # round half up; 0.8 * n never lands on .5 for integer n anyway
    return int(np.floor(ratio * n + 0.5))


def split_local_global(pools, ratio=0.8, seed=0, completeness=None, label_names=None, task="multilabel",
                       truths=None):
    """Shuffle each client's pool, keep ``round(ratio * n)`` for training, pool the rest as the global test."""
    clients = []
    for c, pool in enumerate(pools):
        n = len(pool)
        if n < 2:
            raise ConfigurationError(f"client {c + 1} has {n} sample(s); cannot hold out a test set")
        n_train = min(max(train_size(n, ratio), 1), n - 1)
        perm = _rng(seed, _SPLIT, c).permutation(n)
        tr, te = perm[:n_train], perm[n_train:]
        truth = None if truths is None else truths[c]
        clients.append(InstitutionData(
            client_id=c + 1, train=pool.take(tr), test=pool.take(te),
            completeness=frozenset(completeness[c]) if completeness is not None else frozenset(),
            train_truth=None if truth is None else truth[tr],
            test_truth=None if truth is None else truth[te],
        ))
    if label_names is None:
        width = pools[0].targets.shape[1] if task == "multilabel" else int(max(p.targets.max() for p in pools)) + 1
        label_names = [f"label_{j}" for j in range(width)]
    return FederatedDataset(task=task, clients=clients, label_names=list(label_names))


def partition_random_indices(n_pooled, sizes, seed):
    sizes = [int(s) for s in sizes]
    if any(s < 0 for s in sizes) or sum(sizes) > n_pooled:
        raise ConfigurationError(f"partition sizes {sizes} exceed pooled size {n_pooled}")
    perm = _rng(seed, _PARTITION).permutation(n_pooled)
    bounds = np.cumsum([0] + sizes)
    return [perm[bounds[i]:bounds[i + 1]] for i in range(len(sizes))]


def partition_random(pooled, n_clients, sizes, seed):
    if len(sizes) != n_clients:
        raise ConfigurationError("need one size per client")
    return [pooled.take(idx) for idx in partition_random_indices(len(pooled), sizes, seed)]


def spherical_kmeans(x, k, seed, n_iter=20):
    """Cosine k-means with k-means++ seeding; returns cluster labels.

    Assignment ties go to the lowest cluster index; an empty cluster keeps its
    previous centroid.
    """
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    unit = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)
    n = len(unit)
    if not 1 <= k <= n:
        raise ConfigurationError(f"cannot form {k} clusters from {n} samples")
    rng = _rng(seed, _PARTITION, 1)
    centers = [int(rng.integers(n))]
    dist = np.clip(1.0 - unit @ unit[centers[0]], 0.0, None)
    for _ in range(1, k):
        weights = dist ** 2
        if weights.sum() > 0:
            nxt = int(rng.choice(n, p=weights / weights.sum()))
        else:
            nxt = next(i for i in range(n) if i not in centers)
        centers.append(nxt)
        dist = np.minimum(dist, np.clip(1.0 - unit @ unit[nxt], 0.0, None))
    centroids = unit[centers].copy()
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(n_iter):
        labels = np.argmax(unit @ centroids.T, axis=1)
        for j in range(k):
            members = unit[labels == j]
            if len(members):
                s = members.sum(axis=0)
                norm = np.linalg.norm(s)
                if norm > 0:
                    centroids[j] = s / norm
    return np.argmax(unit @ centroids.T, axis=1)


def clustershard_indices(features, k_clusters=10, n_shards=32, shards_per_client=8, seed=0,
                         return_shards=False):
    n = len(features)
    if n < n_shards:
        raise ConfigurationError(f"{n} samples cannot fill {n_shards} shards")
    if shards_per_client < 1 or n_shards % shards_per_client:
        raise ConfigurationError("n_shards must be divisible by shards_per_client")
    labels = spherical_kmeans(features, k_clusters, seed)
    sizes = np.bincount(labels, minlength=k_clusters)
    cluster_order = sorted(range(k_clusters), key=lambda j: (-sizes[j], j))
    stream = np.concatenate([np.flatnonzero(labels == j) for j in cluster_order])
    shards = np.array_split(stream, n_shards)
    dealt = _rng(seed, _PARTITION, 2).permutation(n_shards)
    n_clients = n_shards // shards_per_client
    clients = [np.concatenate([shards[s] for s in dealt[i * shards_per_client:(i + 1) * shards_per_client]])
               for i in range(n_clients)]
    if return_shards:
        return clients, shards, labels
    return clients


def partition_noniid_clustershard(pooled, k_clusters=10, n_shards=32, shards_per_client=8, seed=0):
    """Cluster by cosine similarity, sort by cluster size, cut into shards, deal shards to clients."""
    idx = clustershard_indices(pooled.features, k_clusters, n_shards, shards_per_client, seed)
    return [pooled.take(i) for i in idx]


def label_distribution(targets):
    counts = np.asarray(targets).reshape(len(targets), -1).sum(axis=0).astype(np.float64)
    total = counts.sum()
    return counts / total if total > 0 else counts


def mean_label_tv(client_batches, pooled):
    """Mean total-variation distance between each client's label distribution and the pooled one."""
    ref = label_distribution(pooled.targets)
    return float(np.mean([0.5 * np.abs(label_distribution(b.targets) - ref).sum() for b in client_batches]))
