"""Strategy hyperparameters and their per-task defaults."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from ..errors import ConfigurationError

STRATEGIES = ("fedavg", "fedprox", "scaffold", "fedinit", "ditto", "fedsm", "fedala", "fedconsist",
              "local_only", "central_sup", "central_ssup")
CENTRAL = ("central_sup", "central_ssup")

# Which hyperparameters each strategy actually reads (besides the shared ones).
_SHARED = {"name", "client_lr", "rounds", "local_epochs", "batch_size"}
_USES = {
    "fedavg": set(),
    "fedprox": {"mu"},
    "scaffold": {"server_lr", "pin_variates"},
    "fedinit": {"server_lr", "beta"},
    "ditto": {"mu"},
    "fedsm": {"server_lr", "gamma", "lam"},
    "fedala": {"server_lr", "ala"},
    "fedconsist": {"tau", "noise_var", "unlabeled_lr"},
    "local_only": set(),
    "central_sup": set(),
    "central_ssup": {"tau", "noise_var"},
}


@dataclass(frozen=True)
class AlaConfig:
    layer_idx: int = 1
    eta: float = 1.0
    threshold: float = 0.1
    num_per_loss: int = 10
    rand_percent: float = 80
    max_iters: int = 50


@dataclass(frozen=True)
class StrategyConfig:
    """One strategy and its hyperparameters; fields a strategy does not use are ignored."""

    name: str = "fedavg"
    client_lr: float = 0.1
    server_lr: float = 1.0
    mu: float = 0.01
    beta: float = 0.01
    gamma: float = 0.0
    lam: float = 0.1
    ala: AlaConfig = field(default_factory=AlaConfig)
    tau: float = 0.9
    noise_var: float = 0.1
    rounds: int = 50
    local_epochs: int = 1
    batch_size: int = 32
    unlabeled_lr: float | None = None
    # keep Scaffold's control variates at zero (turns it into server-lr FedAvg)
    pin_variates: bool = False

    def validate(self):
        if self.name not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.name!r}; choose from {', '.join(STRATEGIES)}")
        if not self.client_lr > 0:
            raise ConfigurationError("client_lr must be positive")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be at least 1")
        if self.local_epochs < 0:
            raise ConfigurationError("local_epochs must be non-negative")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")
        used = self.used_fields()
        if "server_lr" in used and not self.server_lr > 0:
            raise ConfigurationError("server_lr must be positive")
        if "mu" in used and self.mu < 0:
            raise ConfigurationError("mu must be non-negative")
        if "lam" in used and not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("lambda must lie in [0, 1]")
        if "gamma" in used and not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError("gamma must lie in [0, 1)")
        if "tau" in used:
            if not 0.0 <= self.tau <= 1.0:
                raise ConfigurationError("tau must lie in [0, 1]")
            if self.noise_var < 0:
                raise ConfigurationError("noise_var must be non-negative")
        if "unlabeled_lr" in used and self.unlabeled_lr is not None and not self.unlabeled_lr > 0:
            raise ConfigurationError("unlabeled_lr must be positive")
        if "ala" in used:
            a = self.ala
            if a.layer_idx < 1 or a.num_per_loss < 1 or a.max_iters < 1:
                raise ConfigurationError("ala.layer_idx, num_per_loss and max_iters must be positive")
            if not 0 < a.rand_percent <= 100 or a.eta < 0:
                raise ConfigurationError("ala.rand_percent must lie in (0, 100] and eta be non-negative")
        return self

    def used_fields(self):
        return _SHARED | _USES.get(self.name, set())

    def replace(self, **changes):
        """Copy with changes; ``ala.<field>`` keys update the nested ALA settings."""
        ala = {k.split(".", 1)[1]: v for k, v in changes.items() if k.startswith("ala.")}
        plain = {("lam" if k == "lambda" else k): v for k, v in changes.items() if not k.startswith("ala.")}
        if isinstance(plain.get("ala"), dict):
            plain["ala"] = AlaConfig(**plain["ala"])
        unknown = set(plain) - {f.name for f in dataclasses.fields(self)}
        if unknown:
            raise ConfigurationError(f"unknown strategy fields {sorted(unknown)}")
        cfg = dataclasses.replace(self, **plain)
        if ala:
            bad = set(ala) - {f.name for f in dataclasses.fields(AlaConfig)}
            if bad:
                raise ConfigurationError(f"unknown ala fields {sorted(bad)}")
            cfg = dataclasses.replace(cfg, ala=dataclasses.replace(cfg.ala, **ala))
        return cfg

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lambda"] = d.pop("lam")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls().replace(**dict(d))


def preset(name, task="multilabel", **overrides):
    """Per-task defaults for the ECG-like or echo-like task."""
    base = StrategyConfig(name=name)
    if task == "segmentation":
        base = base.replace(mu=0.1, ala=AlaConfig(rand_percent=5))
        if name == "fedconsist":
            base = base.replace(client_lr=1e-4, unlabeled_lr=1e-6, rounds=100)
    elif task != "multilabel":
        raise ConfigurationError(f"unknown task {task!r}")
    return base.replace(**overrides).validate()
