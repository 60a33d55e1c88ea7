"""Federated strategies.

A strategy splits into a client half (``client_update``, which only sees its
own :class:`ClientState` plus the server broadcast) and a server half
(``aggregate``, which only sees parameter vectors and sample counts).
"""

from __future__ import annotations

import numpy as np

from ..datagen import InstitutionData
from ..engine import Batch, ModelSpec, backprop, forward_segmentation, init_model, mlp_logits
from ..errors import ConfigurationError
from .training import (_ALA, ClientState, ClientUpdate, aggregate_fedavg, consistency_objective, local_train,
                       server_step, train_rng)

_PERSONAL = 1
_SELECTOR = 2


class Strategy:
    """Plain FedAvg; the other strategies override the pieces they change."""

    name = "fedavg"

    def __init__(self, cfg, loss_kind, n_clients=1):
        self.cfg = cfg
        self.loss_kind = loss_kind
        self.n_clients = n_clients

    # -- setup ---------------------------------------------------------
    def init_client(self, client, w0):
        client.w_local = w0

    def init_server(self, server, clients):
        pass

    # -- per round -----------------------------------------------------
    def participants(self, round_idx, clients):
        return clients

    def client_update(self, client, bc):
        w_end, stats = local_train(client, bc.w_global, self.cfg, bc.round, loss_kind=self.loss_kind)
        client.w_local = w_end
        return ClientUpdate(client.client_id, w_end, client.n_train, stats)

    def aggregate(self, server, updates):
        server.w_global = aggregate_fedavg([(u.w, u.n) for u in updates])

    # -- serving -------------------------------------------------------
    def serving_model(self, client, server):
        """Model used for the client's LOCAL evaluation."""
        return server.w_global

    def global_models(self, server, clients):
        """``(model, client_id)`` pairs scored on the global test set."""
        return [(server.w_global, None)]

    def route(self, server, clients, features):
        """Optional per-sample model choice for GLOBAL scoring; ``None`` means no routing."""
        return None


class FedProx(Strategy):
    name = "fedprox"

    def client_update(self, client, bc):
        w_end, stats = local_train(client, bc.w_global, self.cfg, bc.round, loss_kind=self.loss_kind,
                                   anchor=bc.w_global, mu=self.cfg.mu)
        client.w_local = w_end
        return ClientUpdate(client.client_id, w_end, client.n_train, stats)


class Scaffold(Strategy):
    name = "scaffold"

    def init_client(self, client, w0):
        client.w_local = w0
        client.c_i = w0.zeros_like()

    def init_server(self, server, clients):
        server.c = server.w_global.zeros_like()

    def client_update(self, client, bc):
        cfg = self.cfg
        correction = None if cfg.pin_variates else bc.c - client.c_i
        w_end, stats = local_train(client, bc.w_global, cfg, bc.round, loss_kind=self.loss_kind,
                                   correction=correction)
        client.w_local = w_end
        delta_c = None
        if not cfg.pin_variates and stats.n_steps > 0:
            c_new = client.c_i - bc.c + (bc.w_global - w_end) / (stats.n_steps * cfg.client_lr)
            delta_c = c_new - client.c_i
            client.c_i = c_new
        return ClientUpdate(client.client_id, w_end, client.n_train, stats, delta_c=delta_c)

    def aggregate(self, server, updates):
        avg = aggregate_fedavg([(u.w, u.n) for u in updates])
        server.w_global = server_step(server.w_global, avg, self.cfg.server_lr)
        deltas = [u.delta_c for u in updates if u.delta_c is not None]
        if deltas:
            acc = np.zeros_like(server.c.values)
            for d in deltas:
                acc += d.values
            # 1/N over all clients; clients that sent nothing count as zero change
            server.c = server.c + server.c.like(acc) / self.n_clients


class FedInit(Strategy):
    name = "fedinit"

    def client_update(self, client, bc):
        start = bc.w_global
        if client.w_last is not None and self.cfg.beta != 0:
            start = bc.w_global + self.cfg.beta * (bc.w_global - client.w_last)
        w_end, stats = local_train(client, start, self.cfg, bc.round, loss_kind=self.loss_kind)
        client.w_last = w_end
        client.w_local = w_end
        return ClientUpdate(client.client_id, w_end, client.n_train, stats)

    def aggregate(self, server, updates):
        avg = aggregate_fedavg([(u.w, u.n) for u in updates])
        server.w_global = server_step(server.w_global, avg, self.cfg.server_lr)


class Ditto(Strategy):
    name = "ditto"

    def init_client(self, client, w0):
        client.w_local = w0
        client.v_personal = w0

    def client_update(self, client, bc):
        w_end, stats = local_train(client, bc.w_global, self.cfg, bc.round, loss_kind=self.loss_kind)
        client.w_local = w_end
        client.v_personal, _ = local_train(client, client.v_personal, self.cfg, bc.round,
                                           loss_kind=self.loss_kind, anchor=bc.w_global,
                                           mu=self.cfg.mu, tag=_PERSONAL)
        return ClientUpdate(client.client_id, w_end, client.n_train, stats)

    def serving_model(self, client, server):
        return client.v_personal


def _flat(features):
    features = np.asarray(features, dtype=np.float64)
    return features.reshape(len(features), -1)


class FedSM(Strategy):
    """Global model, blended personal models, and a client-id selector that routes test samples."""

    name = "fedsm"
    selector_hidden = 16

    def init_client(self, client, w0):
        client.w_local = w0
        client.v_personal = w0

    def init_server(self, server, clients):
        self.n_clients = len(clients)
        if self.n_clients >= 2:
            dim = _flat(clients[0].data.train.features[:1]).shape[1]
            spec = ModelSpec.classifier(dim, self.n_clients, self.selector_hidden)
            server.selector = init_model(spec, [clients[0].seed, _SELECTOR])

    def _selector_targets(self, client_index, n):
        gamma = self.cfg.gamma
        t = np.full((n, self.n_clients), gamma / self.n_clients)
        t[:, client_index] += 1.0 - gamma
        return t

    def client_update(self, client, bc):
        cfg = self.cfg
        w_end, stats = local_train(client, bc.w_global, cfg, bc.round, loss_kind=self.loss_kind)
        client.w_local = w_end
        start = bc.w_global
        if bc.round > 1 and cfg.lam != 0:
            start = cfg.lam * client.v_personal + (1.0 - cfg.lam) * bc.w_global
        client.v_personal, _ = local_train(client, start, cfg, bc.round, loss_kind=self.loss_kind,
                                           tag=_PERSONAL)
        selector = None
        if bc.selector is not None:
            train = client.data.train
            targets = self._selector_targets(client.client_id - 1, len(train))
            batch = Batch(_flat(train.features), targets)
            sel_client = ClientState(client.client_id, InstitutionData(client.client_id, batch, batch),
                                     seed=client.seed)
            selector, _ = local_train(sel_client, bc.selector, cfg, bc.round, loss_kind="softmax_ce",
                                      tag=_SELECTOR)
        return ClientUpdate(client.client_id, w_end, client.n_train, stats, selector=selector)

    def aggregate(self, server, updates):
        avg = aggregate_fedavg([(u.w, u.n) for u in updates])
        server.w_global = server_step(server.w_global, avg, self.cfg.server_lr)
        sel = [(u.selector, u.n) for u in updates if u.selector is not None]
        if sel:
            server.selector = aggregate_fedavg(sel)

    def serving_model(self, client, server):
        return client.v_personal

    def route(self, server, clients, features):
        if server.selector is None:
            return np.zeros(len(features), dtype=np.int64)
        return np.argmax(mlp_logits(server.selector, _flat(features)), axis=1)


def ala_adapt(w_local, w_global, weights, batch, loss_kind, ala, rng=None):
    """Learn element-wise mixing weights for the top layers and return the adapted model.

    Lower layers take ``w_global``; the top ``ala.layer_idx`` layer groups take
    ``w_local + W * (w_global - w_local)``.  ``W`` starts from ``weights``
    (ones when ``None``), moves by gradient steps of size ``ala.eta`` on
    ``batch``, is clipped to [0, 1] after every step, and stops once the last
    ``ala.num_per_loss`` losses have a standard deviation below
    ``ala.threshold`` (or after ``ala.max_iters`` steps).
    Returns ``(adapted, W, losses)``.
    """
    groups = list(w_global.layer_groups().values())
    top = [seg for group in groups[-ala.layer_idx:] for seg in group]
    idx = np.concatenate([np.arange(s.offset, s.offset + s.length) for s in top])
    base = w_global.values.copy()
    diff = w_global.values[idx] - w_local.values[idx]
    W = np.ones(len(idx)) if weights is None else np.array(weights, dtype=np.float64)

    def build(W):
        vals = base.copy()
        vals[idx] = w_local.values[idx] + W * diff
        return w_global.like(vals)

    losses = []
    if not np.any(diff):
        return build(W), W, losses
    for _ in range(ala.max_iters):
        loss, grad = backprop(build(W), batch, loss_kind)
        losses.append(loss)
        W = np.clip(W - ala.eta * grad.values[idx] * diff, 0.0, 1.0)
        if len(losses) >= ala.num_per_loss and np.std(losses[-ala.num_per_loss:]) < ala.threshold:
            break
    return build(W), W, losses


class FedALA(Strategy):
    name = "fedala"

    def client_update(self, client, bc):
        cfg = self.cfg
        start = bc.w_global
        if bc.round > 1:
            train = client.data.train
            rng = train_rng(client.seed, _ALA, 0, bc.round, client.client_id)
            n_sub = max(1, int(np.ceil(len(train) * cfg.ala.rand_percent / 100.0)))
            sub = train.take(np.sort(rng.choice(len(train), n_sub, replace=False)))
            start, client.ala_weights, _ = ala_adapt(client.w_local, bc.w_global, client.ala_weights,
                                                     sub, self.loss_kind, cfg.ala)
        w_end, stats = local_train(client, start, cfg, bc.round, loss_kind=self.loss_kind)
        client.w_local = w_end
        return ClientUpdate(client.client_id, w_end, client.n_train, stats)

    def aggregate(self, server, updates):
        avg = aggregate_fedavg([(u.w, u.n) for u in updates])
        server.w_global = server_step(server.w_global, avg, self.cfg.server_lr)

    def serving_model(self, client, server):
        return client.w_local


class FedConsist(Strategy):
    """Labeled clients first, then everyone; unlabeled clients train on a consistency loss only."""

    name = "fedconsist"

    @property
    def phase1_rounds(self):
        return self.cfg.rounds // 2

    def init_server(self, server, clients):
        if not any(c.labeled for c in clients):
            raise ConfigurationError("fedconsist needs at least one fully labeled client")

    def participants(self, round_idx, clients):
        if round_idx <= self.phase1_rounds:
            return [c for c in clients if c.labeled]
        return clients

    def client_update(self, client, bc):
        cfg = self.cfg
        if client.labeled:
            w_end, stats = local_train(client, bc.w_global, cfg, bc.round, loss_kind=self.loss_kind)
        else:
            lr = cfg.unlabeled_lr if cfg.unlabeled_lr is not None else cfg.client_lr
            w_end, stats = local_train(client, bc.w_global, cfg, bc.round,
                                       objective=consistency_objective(cfg.tau, cfg.noise_var), lr=lr)
        client.w_local = w_end
        return ClientUpdate(client.client_id, w_end, client.n_train, stats)


class LocalOnly(Strategy):
    """Every client trains alone from the shared initialization; nothing is aggregated."""

    name = "local_only"

    def client_update(self, client, bc):
        w_end, stats = local_train(client, client.w_local, self.cfg, bc.round, loss_kind=self.loss_kind)
        client.w_local = w_end
        return ClientUpdate(client.client_id, w_end, client.n_train, stats)

    def aggregate(self, server, updates):
        pass

    def serving_model(self, client, server):
        return client.w_local

    def global_models(self, server, clients):
        return [(c.w_local, c.client_id) for c in clients]


REGISTRY = {cls.name: cls for cls in (Strategy, FedProx, Scaffold, FedInit, Ditto, FedSM, FedALA,
                                      FedConsist, LocalOnly)}


def make_strategy(cfg, loss_kind, n_clients):
    try:
        cls = REGISTRY[cfg.name]
    except KeyError:
        raise ConfigurationError(f"{cfg.name!r} is not a federated strategy") from None
    return cls(cfg, loss_kind, n_clients)


def predict_segmentation(params, images):
    return np.argmax(forward_segmentation(params, images), axis=-1)
