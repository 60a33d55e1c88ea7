"""Federated protocol engine: strategies, local training, aggregation and experiments."""

from .config import STRATEGIES, AlaConfig, StrategyConfig, preset
from .experiment import (PARTIAL_TEST_FRAMES, EvalSnapshot, ExperimentResult, RoundReport, central_baseline,
                         default_model_spec, evaluate_model, loss_kind_for, merged_client, run_experiment)
from .strategies import REGISTRY, ala_adapt, make_strategy
from .training import (Broadcast, ClientState, ClientUpdate, LocalStats, ServerState, aggregate_fedavg,
                       consistency_objective, local_train, semi_supervised_objective, server_step,
                       supervised_objective)

__all__ = [
    "STRATEGIES", "AlaConfig", "StrategyConfig", "preset", "PARTIAL_TEST_FRAMES", "EvalSnapshot",
    "ExperimentResult", "RoundReport", "central_baseline", "default_model_spec", "evaluate_model",
    "loss_kind_for", "merged_client", "run_experiment", "REGISTRY", "ala_adapt", "make_strategy", "Broadcast",
    "ClientState", "ClientUpdate", "LocalStats", "ServerState", "aggregate_fedavg", "consistency_objective",
    "local_train", "semi_supervised_objective", "server_step", "supervised_objective",
]
