"""Client state, local mini-batch training and weighted aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..datagen import InstitutionData
from ..engine import AuxTerm, Batch, ParamVector, backprop, forward_segmentation, mlp_logits, \
    prox_sgd_step, sgd_step
from ..errors import ConfigurationError, ShapeError

_TRAIN, _NOISE, _ALA = 11, 12, 13


def train_rng(seed, purpose, tag, round_idx, client_id):
    return np.random.default_rng([int(seed), purpose, int(tag), int(round_idx), int(client_id)])


@dataclass
class ClientState:
    client_id: int
    data: InstitutionData
    w_local: ParamVector | None = None
    v_personal: ParamVector | None = None
    c_i: ParamVector | None = None
    w_last: ParamVector | None = None
    labeled: bool = True
    ala_weights: np.ndarray | None = None
    seed: int = 0

    @property
    def n_train(self):
        return self.data.n_train


@dataclass
class ServerState:
    w_global: ParamVector
    c: ParamVector | None = None
    round: int = 0
    selector: ParamVector | None = None


@dataclass(frozen=True)
class Broadcast:
    """What the server sends to every client at the start of a round."""

    round: int
    w_global: ParamVector
    c: ParamVector | None = None
    selector: ParamVector | None = None


@dataclass
class LocalStats:
    loss: float = 0.0
    grad_norm: float = 0.0
    n_steps: int = 0
    empty_steps: int = 0

    @property
    def empty(self):
        return self.n_steps > 0 and self.empty_steps == self.n_steps


@dataclass
class ClientUpdate:
    """What a client sends back: parameter vectors and its sample count, nothing else."""

    client_id: int
    w: ParamVector
    n: int
    stats: LocalStats = field(default_factory=LocalStats)
    delta_c: ParamVector | None = None
    selector: ParamVector | None = None


def supervised_objective(loss_kind, aux=None):
    """Task loss on the batch's own targets."""

    def objective(params, batch, rng):
        loss, grad = backprop(params, batch, loss_kind, aux)
        empty = batch.ignore_mask is not None and bool(np.all(batch.ignore_mask != 0))
        return loss, grad, empty

    return objective


def _soft_predictions(params, features):
    z = mlp_logits(params, features) if features.ndim == 2 else forward_segmentation(params, features)
    if features.ndim == 2:
        p = 1.0 / (1.0 + np.exp(-z))
        return p, np.maximum(p, 1.0 - p)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=-1, keepdims=True)
    return p, p.max(axis=-1)


def consistency_terms(params, batch, rng, tau, noise_var, region=None):
    """Consistency loss against the model's own clean-input predictions.

    Targets are the (fixed) probabilities on the clean input; cells whose
    confidence is below ``tau`` are dropped, as are cells outside ``region``
    when given.  The prediction side sees the input plus Gaussian noise of
    variance ``noise_var``.
    """
    features = np.asarray(batch.features, dtype=np.float64)
    target, conf = _soft_predictions(params, features)
    keep = conf >= tau
    if region is not None:
        keep &= region
    noisy = features
    if noise_var > 0:
        noisy = features + rng.normal(0.0, np.sqrt(noise_var), features.shape)
    pseudo = Batch(noisy, target, (~keep).astype(np.int8))
    loss, grad = backprop(params, pseudo, "consistency")
    return loss, grad, not keep.any()


def consistency_objective(tau, noise_var):
    def objective(params, batch, rng):
        return consistency_terms(params, batch, rng, tau, noise_var)

    return objective


def semi_supervised_objective(loss_kind, tau, noise_var):
    """Masked task loss plus the consistency term restricted to ignored cells."""

    def objective(params, batch, rng):
        loss, grad = backprop(params, batch, loss_kind)
        if batch.ignore_mask is None or not np.any(batch.ignore_mask):
            empty = batch.ignore_mask is not None and bool(np.all(batch.ignore_mask != 0))
            return loss, grad, empty
        c_loss, c_grad, _ = consistency_terms(params, batch, rng, tau, noise_var,
                                              region=np.asarray(batch.ignore_mask) != 0)
        return loss + c_loss, grad + c_grad, False

    return objective


def local_train(client, w_start, cfg, round_idx=0, *, objective=None, loss_kind=None, lr=None,
                anchor=None, mu=0.0, correction=None, tag=0, epochs=None):
    """Mini-batch SGD over the client's training set; returns ``(w_end, LocalStats)``.

    Each epoch visits a fresh permutation drawn from a stream keyed by the
    client seed, ``tag``, round and client id, so reruns are bitwise equal.
    ``anchor``/``mu`` make every step a proximal step towards ``anchor``;
    ``correction`` is added to each gradient.
    """
    data = client.data.train
    if len(data) == 0:
        raise ShapeError(f"client {client.client_id} has no training data")
    if objective is None:
        if loss_kind is None:
            raise ConfigurationError("local_train needs an objective or a loss kind")
        aux = AuxTerm(correction=correction) if correction is not None else None
        objective = supervised_objective(loss_kind, aux)
    lr = cfg.client_lr if lr is None else lr
    epochs = cfg.local_epochs if epochs is None else epochs
    rng = train_rng(client.seed, _TRAIN, tag, round_idx, client.client_id)
    noise_rng = train_rng(client.seed, _NOISE, tag, round_idx, client.client_id)
    w = w_start
    stats = LocalStats()
    losses, norms = [], []
    for _ in range(epochs):
        order = rng.permutation(len(data))
        for start in range(0, len(data), cfg.batch_size):
            batch = data.take(order[start:start + cfg.batch_size])
            loss, grad, empty = objective(w, batch, noise_rng)
            w = prox_sgd_step(w, grad, lr, anchor, mu) if anchor is not None else sgd_step(w, grad, lr)
            losses.append(loss)
            norms.append(grad.norm())
            stats.empty_steps += int(empty)
    stats.n_steps = len(losses)
    if losses:
        stats.loss = float(np.mean(losses))
        stats.grad_norm = float(np.mean(norms))
    return w, stats


def aggregate_fedavg(updates):
    """Sample-weighted mean ``sum (n_i / sum n) w_i`` accumulated in the given order."""
    updates = list(updates)
    if not updates:
        raise ConfigurationError("aggregation needs at least one update")
    total = sum(int(n) for _, n in updates)
    if total <= 0:
        raise ConfigurationError("aggregation weights must have a positive total")
    w0 = updates[0][0]
    for w, _ in updates[1:]:
        w0.check_layout(w)
    if len(updates) == 1 or all(w.bitwise_equal(w0) for w, _ in updates[1:]):
        return w0
    acc = np.zeros_like(w0.values)
    for w, n in updates:
        acc += (int(n) / total) * w.values
    return w0.like(acc)


def server_step(w_global, avg, server_lr):
    """``w_global + server_lr * (avg - w_global)``; exactly ``avg`` at ``server_lr == 1``."""
    if server_lr == 1.0:
        return avg
    return w_global + server_lr * (avg - w_global)
