"""Round loop, GLOBAL/LOCAL evaluation and the centralized baselines."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..datagen import FederatedDataset, InstitutionData
from ..engine import Batch, ModelSpec, forward_multilabel, init_model
from ..errors import ConfigurationError
from ..metrics import multilabel_report, segmentation_report
from .config import CENTRAL
from .strategies import make_strategy, predict_segmentation
from .training import (Broadcast, ClientState, ServerState, local_train, semi_supervised_objective,
                       supervised_objective)

# partially annotated clients are scored on at most this many test frames
PARTIAL_TEST_FRAMES = 200


@dataclass
class RoundReport:
    round: int
    client_ids: list[int]
    losses: dict[int, float]
    grad_norms: dict[int, float]
    delta_norm: float
    empty_loss: dict[int, bool]
    evaluation: EvalSnapshot | None = None


@dataclass
class EvalSnapshot:
    round: int
    global_reports: list = field(default_factory=list)
    local_reports: list = field(default_factory=list)


@dataclass
class ExperimentResult:
    strategy: str
    server: ServerState
    clients: list[ClientState]
    rounds: list[RoundReport]
    timeline: list[EvalSnapshot]
    model_spec: ModelSpec

    @property
    def final(self):
        return self.timeline[-1]

    def serving_models(self):
        """Named parameter vectors needed to reproduce the final evaluation."""
        out = {"global": self.server.w_global}
        for c in self.clients:
            for attr, prefix in (("w_local", "local"), ("v_personal", "personal")):
                w = getattr(c, attr)
                if w is not None:
                    out[f"{prefix}_client{c.client_id}"] = w
        if self.server.selector is not None:
            out["selector"] = self.server.selector
        return out


def loss_kind_for(task):
    if task == "multilabel":
        return "bce"
    if task == "segmentation":
        return "masked_ce"
    raise ConfigurationError(f"unknown task {task!r}")


def default_model_spec(scenario):
    x = scenario.clients[0].train.features
    if scenario.task == "multilabel":
        return ModelSpec.multilabel(x.shape[1], scenario.n_outputs)
    return ModelSpec.segmentation(n_classes=scenario.n_outputs, grid_h=x.shape[1], grid_w=x.shape[2])


def _n_classes(scenario):
    return scenario.n_outputs


def eval_split(client, task, n_classes):
    """A client's scored test set plus the classes scored on each of its frames."""
    test = client.test
    if task != "segmentation":
        return test, None
    profile = tuple(sorted(client.completeness)) if client.completeness else tuple(range(1, n_classes))
    if not client.is_complete(n_classes) and len(test) > PARTIAL_TEST_FRAMES:
        test = test.take(np.arange(PARTIAL_TEST_FRAMES))
    return test, [profile] * len(test)


def global_eval_split(scenario):
    if scenario.task != "segmentation":
        return scenario.global_test, None
    parts = [eval_split(c, scenario.task, _n_classes(scenario)) for c in scenario.clients]
    return Batch.concat(b for b, _ in parts), [p for _, ps in parts for p in ps]


def _predict(task, params, features):
    if task == "multilabel":
        return forward_multilabel(params, features)
    return predict_segmentation(params, features)


def score(task, outputs, batch, sample_classes, class_counts, scope, client_id, n_classes):
    if task == "multilabel":
        return multilabel_report(outputs, batch.targets, class_counts=class_counts, scope=scope,
                                 client_id=client_id)
    return segmentation_report(outputs, batch.targets, batch.ignore_mask, classes=tuple(range(1, n_classes)),
                               sample_classes=sample_classes, scope=scope, client_id=client_id)


def evaluate_model(scenario, params, batch, sample_classes, scope, client_id=None):
    outputs = _predict(scenario.task, params, batch.features)
    return score(scenario.task, outputs, batch, sample_classes, scenario.class_counts_global, scope,
                 client_id, _n_classes(scenario))


def _routed_outputs(task, strategy, server, clients, features):
    choice = strategy.route(server, clients, features)
    if choice is None:
        return None
    outputs = None
    for k, c in enumerate(clients):
        rows = np.flatnonzero(choice == k)
        if len(rows) == 0:
            continue
        part = _predict(task, strategy.serving_model(c, server), features[rows])
        if outputs is None:
            outputs = np.zeros((len(features),) + part.shape[1:], dtype=part.dtype)
        outputs[rows] = part
    return outputs


def evaluate(scenario, strategy, server, clients, round_idx):
    task, n_classes = scenario.task, _n_classes(scenario)
    snap = EvalSnapshot(round_idx)
    g_batch, g_classes = global_eval_split(scenario)
    routed = _routed_outputs(task, strategy, server, clients, g_batch.features)
    if routed is not None:
        snap.global_reports.append(score(task, routed, g_batch, g_classes, scenario.class_counts_global,
                                         "GLOBAL", None, n_classes))
    else:
        for params, cid in strategy.global_models(server, clients):
            snap.global_reports.append(evaluate_model(scenario, params, g_batch, g_classes, "GLOBAL", cid))
    for c in clients:
        batch, classes = eval_split(c.data, task, n_classes)
        snap.local_reports.append(evaluate_model(scenario, strategy.serving_model(c, server), batch, classes,
                                                 "LOCAL", c.client_id))
    return snap


def _check_compatible(scenario, cfg, spec):
    if not isinstance(scenario, FederatedDataset) or not scenario.clients:
        raise ConfigurationError("scenario must be a FederatedDataset with at least one client")
    kind = "segmentation" if scenario.task == "segmentation" else "multilabel"
    if spec.kind != kind:
        raise ConfigurationError(f"model kind {spec.kind!r} does not match task {scenario.task!r}")


def _make_clients(scenario, strategy, w0, seed):
    clients = []
    for data in scenario.clients:
        c = ClientState(data.client_id, data, seed=seed,
                        labeled=scenario.task != "segmentation" or data.is_complete(_n_classes(scenario)))
        strategy.init_client(c, w0)
        clients.append(c)
    return clients


def run_experiment(scenario, cfg, eval_every=None, seed=0, parallel=False, model=None):
    """Run ``cfg.rounds`` communication rounds and evaluate every ``eval_every`` rounds (and at the end)."""
    cfg.validate()
    if cfg.name in CENTRAL:
        return central_baseline(scenario, cfg, cfg.name == "central_ssup", eval_every, seed, model)
    spec = model or default_model_spec(scenario)
    _check_compatible(scenario, cfg, spec)
    eval_every = cfg.rounds if not eval_every else int(eval_every)
    if eval_every < 1:
        raise ConfigurationError("eval_every must be positive")
    strategy = make_strategy(cfg, loss_kind_for(scenario.task), len(scenario.clients))
    w0 = init_model(spec, seed)
    server = ServerState(w_global=w0)
    clients = _make_clients(scenario, strategy, w0, seed)
    strategy.init_server(server, clients)
    rounds, timeline = [], []
    pool = ThreadPoolExecutor(max_workers=len(clients)) if parallel and len(clients) > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            bc = Broadcast(t, server.w_global, server.c, server.selector)
            active = strategy.participants(t, clients)
            if pool is not None:
                updates = list(pool.map(lambda c: strategy.client_update(c, bc), active))
            else:
                updates = [strategy.client_update(c, bc) for c in active]
            before = server.w_global
            strategy.aggregate(server, updates)
            server.round += 1
            report = RoundReport(
                round=t, client_ids=[u.client_id for u in updates],
                losses={u.client_id: u.stats.loss for u in updates},
                grad_norms={u.client_id: u.stats.grad_norm for u in updates},
                delta_norm=(server.w_global - before).norm(),
                empty_loss={u.client_id: u.stats.empty for u in updates},
            )
            if t % eval_every == 0 or t == cfg.rounds:
                report.evaluation = evaluate(scenario, strategy, server, clients, t)
                timeline.append(report.evaluation)
            rounds.append(report)
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentResult(cfg.name, server, clients, rounds, timeline, spec)


def merged_client(scenario):
    """All clients' training data as one client (id 1) whose test set is the pooled test set."""
    n_classes = _n_classes(scenario)
    full = frozenset(range(1, n_classes)) if scenario.task == "segmentation" else frozenset()
    return InstitutionData(1, scenario.pooled_train(), scenario.global_test, full)


def central_baseline(scenario, cfg, semi_supervised=False, eval_every=None, seed=0, model=None):
    """Train one model on the pooled training data; each round is one pass of local training.

    Supervised mode uses the same masked loss the clients use.  The
    semi-supervised mode adds the confidence-filtered consistency term on
    the ignored (possibly unannotated foreground) cells.
    """
    spec = model or default_model_spec(scenario)
    _check_compatible(scenario, cfg.replace(name="fedavg"), spec)
    eval_every = cfg.rounds if not eval_every else int(eval_every)
    loss_kind = loss_kind_for(scenario.task)
    objective = (semi_supervised_objective(loss_kind, cfg.tau, cfg.noise_var) if semi_supervised
                 else supervised_objective(loss_kind))
    strategy = make_strategy(cfg.replace(name="fedavg"), loss_kind, 1)
    w = init_model(spec, seed)
    pooled = ClientState(1, merged_client(scenario), seed=seed)
    server = ServerState(w_global=w)
    clients = [ClientState(d.client_id, d, w_local=w, seed=seed) for d in scenario.clients]
    rounds, timeline = [], []
    for t in range(1, cfg.rounds + 1):
        w_new, stats = local_train(pooled, server.w_global, cfg, t, objective=objective)
        report = RoundReport(t, [1], {1: stats.loss}, {1: stats.grad_norm}, (w_new - server.w_global).norm(),
                             {1: stats.empty})
        server.w_global = w_new
        server.round += 1
        if t % eval_every == 0 or t == cfg.rounds:
            report.evaluation = evaluate(scenario, strategy, server, clients, t)
            timeline.append(report.evaluation)
        rounds.append(report)
    return ExperimentResult(cfg.name, server, clients, rounds, timeline, spec)
