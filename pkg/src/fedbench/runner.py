"""Experiment configuration files, multi-seed runs, grid sweeps and result files.

Config files are JSON documents::

    {
      "schema_version": 1,
      "scenario": {"preset": "fed_ecg_analog", "seed": 0},
      "strategy": {"name": "fedprox", "mu": 0.01},
      "model": {"hidden_dim": 32},
      "seeds": [0, 1, 2],
      "eval_every": 10,
      "out_dir": "runs/fedprox",
      "grid": {"params": {"client_lr": [0.01, 0.1]}, "selection_metric": "micro_f1"}
    }

``scenario`` is either a preset name plus overrides, a full set of
:class:`~fedbench.datagen.ScenarioConfig` fields, or ``{"dataset": DIR}``
pointing at the output of ``fedbench gen``.  Strategy fields left out take
the per-task defaults of :func:`~fedbench.fl.preset`.  Relative paths are
resolved against the config file's directory.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import datagen
from .datagen import FederatedDataset, ScenarioConfig
from .engine import load_params, save_params
from .errors import ConfigurationError, NumericError, SchemaError
from .fl import StrategyConfig, default_model_spec, preset, run_experiment
from .fl.experiment import eval_split, evaluate_model, global_eval_split
from .ingest import LabelAlignmentTable, load_dataset_csv, save_dataset_csv

SCHEMA_VERSION = 1
DEFAULT_SEEDS = (0, 1, 2)
SELECTION_KEYS = {"micro_f1": "micro_f1", "map": "map", "dice": "dice_mean"}
PRESETS = {"fed_ecg_analog": datagen.fed_ecg_analog, "fed_echo_analog": datagen.fed_echo_analog}


@dataclass
class GridSpec:
    params: dict
    selection_metric: str = "micro_f1"

    def validate(self):
        if self.selection_metric not in SELECTION_KEYS:
            raise ConfigurationError(f"selection_metric must be one of {sorted(SELECTION_KEYS)}")
        if not self.params:
            raise ConfigurationError("grid needs at least one parameter")
        probe = StrategyConfig()
        for name, values in self.params.items():
            if not isinstance(values, list) or not values:
                raise ConfigurationError(f"grid values for {name!r} must be a non-empty list")
            probe.replace(**{name: values[0]})
        return self

    def points(self):
        """Full factorial in declaration order (last parameter varies fastest)."""
        names = list(self.params)
        for combo in itertools.product(*(self.params[n] for n in names)):
            yield dict(zip(names, combo))


@dataclass
class ExperimentConfig:
    strategy: StrategyConfig
    scenario: ScenarioConfig | None = None
    dataset: Path | None = None
    seeds: list[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    eval_every: int | None = None
    out_dir: Path = Path("runs")
    model: dict = field(default_factory=dict)
    parallel: bool = False
    grid: GridSpec | None = None
    label_map: Path | None = None

    @property
    def task(self):
        if self.scenario is not None:
            return self.scenario.task
        return _read_manifest(self.dataset)["task"]

    def validate(self):
        if (self.scenario is None) == (self.dataset is None):
            raise ConfigurationError("give exactly one of a scenario or a dataset path")
        if self.scenario is not None:
            self.scenario.validate()
        if not self.seeds:
            raise ConfigurationError("seeds must be a non-empty list")
        if self.eval_every is not None and self.eval_every < 1:
            raise ConfigurationError("eval_every must be positive")
        self.strategy.validate()
        if self.grid is not None:
            self.grid.validate()
        return self

    def to_dict(self):
        """Resolved config as written into output directories (``out_dir`` is where it lands, so it is left out)."""
        d = {"schema_version": SCHEMA_VERSION}
        if self.scenario is not None:
            d["scenario"] = _jsonable(dataclasses.asdict(self.scenario))
        else:
            d["scenario"] = {"dataset": str(self.dataset)}
        d["strategy"] = _jsonable(self.strategy.to_dict())
        d["model"] = dict(self.model)
        d["seeds"] = list(self.seeds)
        d["eval_every"] = self.eval_every
        d["parallel"] = self.parallel
        if self.grid is not None:
            d["grid"] = {"params": self.grid.params, "selection_metric": self.grid.selection_metric}
        if self.label_map is not None:
            d["label_map"] = str(self.label_map)
        return d


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def _scenario_from(d, base):
    d = dict(d)
    if "dataset" in d:
        if len(d) != 1:
            raise ConfigurationError("a dataset scenario takes no other fields")
        path = Path(d["dataset"])
        return None, path if path.is_absolute() else base / path
    fields = {f.name for f in dataclasses.fields(ScenarioConfig)}
    name = d.pop("preset", None)
    if name is not None:
        if name not in PRESETS:
            raise ConfigurationError(f"unknown scenario preset {name!r}; choose from {sorted(PRESETS)}")
        bad = set(d) - fields - {"scale"}
        if bad:
            raise ConfigurationError(f"unknown scenario fields {sorted(bad)}")
        if "scale" in d and name != "fed_ecg_analog":
            raise ConfigurationError("only fed_ecg_analog takes a scale")
        return PRESETS[name](**d), None
    bad = set(d) - fields
    if bad:
        raise ConfigurationError(f"unknown scenario fields {sorted(bad)}")
    return ScenarioConfig(**d), None


def config_from_dict(d, base=Path(".")):
    if not isinstance(d, dict):
        raise ConfigurationError("config must be a JSON object")
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ConfigurationError(f"config schema_version must be {SCHEMA_VERSION}")
    known = {"schema_version", "scenario", "strategy", "model", "seeds", "eval_every", "out_dir", "parallel",
             "grid", "label_map"}
    bad = set(d) - known
    if bad:
        raise ConfigurationError(f"unknown config sections {sorted(bad)}")
    if "scenario" not in d or "strategy" not in d:
        raise ConfigurationError("config needs 'scenario' and 'strategy' sections")
    try:
        scenario, dataset = _scenario_from(d["scenario"], base)
    except TypeError as exc:
        raise ConfigurationError(f"bad scenario section: {exc}") from None
    task = scenario.task if scenario is not None else _read_manifest(dataset)["task"]
    s = dict(d["strategy"])
    if "name" not in s:
        raise ConfigurationError("strategy needs a name")
    name = s.pop("name")
    try:
        strategy = preset(name, task).replace(**s)
    except TypeError as exc:
        raise ConfigurationError(f"bad strategy section: {exc}") from None
    grid = None
    if d.get("grid") is not None:
        g = d["grid"]
        grid = GridSpec(dict(g.get("params", {})), g.get("selection_metric", "micro_f1"))
    out = Path(d.get("out_dir", "runs"))
    label_map = d.get("label_map")
    cfg = ExperimentConfig(
        strategy=strategy, scenario=scenario, dataset=dataset,
        seeds=[int(x) for x in d.get("seeds", DEFAULT_SEEDS)],
        eval_every=d.get("eval_every"), out_dir=out if out.is_absolute() else base / out,
        model=dict(d.get("model", {})), parallel=bool(d.get("parallel", False)), grid=grid,
        label_map=None if label_map is None else (base / label_map),
    )
    return cfg.validate()


def load_config(path):
    path = Path(path)
    text = path.read_text()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from None
    return config_from_dict(d, path.parent)


# -- datasets -----------------------------------------------------------------

def _read_manifest(dataset_dir):
    path = Path(dataset_dir) / "manifest.json"
    manifest = json.loads(path.read_text())
    if manifest.get("kind") != "dataset":
        raise SchemaError(f"{path} is not a dataset manifest")
    return manifest


def label_names_for(scenario_cfg, label_map=None):
    if label_map is None:
        return None
    if scenario_cfg.task != "multilabel":
        raise ConfigurationError("--label-map applies to multi-label scenarios only")
    codes = list(LabelAlignmentTable.load(label_map).codes)
    if len(codes) != scenario_cfg.n_labels:
        raise ConfigurationError(f"label map has {len(codes)} codes but the scenario has {scenario_cfg.n_labels} labels")
    return codes


def build_scenario(cfg):
    if cfg.dataset is not None:
        return load_dataset_dir(cfg.dataset)
    ds = datagen.gen_scenario(cfg.scenario)
    names = label_names_for(cfg.scenario, cfg.label_map)
    if names is not None:
        ds.label_names = names
    return ds


def write_dataset_dir(ds, out_dir, scenario_cfg=None, config=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    clients = []
    for c in ds.clients:
        name = f"client_{c.client_id}.csv"
        save_dataset_csv(c, out / name, ds.task)
        clients.append({"client_id": c.client_id, "file": name, "n_train": c.n_train, "n_test": c.n_test,
                        "completeness": sorted(int(x) for x in c.completeness)})
    if config is not None:
        _write_json(out / "config.json", config)
    manifest = {"schema_version": SCHEMA_VERSION, "kind": "dataset", "task": ds.task,
                "label_names": list(ds.label_names), "clients": clients,
                "scenario": None if scenario_cfg is None else _jsonable(dataclasses.asdict(scenario_cfg)),
                "created_utc": _timestamp()}
    _write_json(out / "manifest.json", manifest)
    return manifest


def load_dataset_dir(path, n_outputs=None):
    """A ``gen`` output directory, or one client CSV (``n_outputs`` then fixes the label/class count)."""
    path = Path(path)
    if path.is_file():
        client, task = load_dataset_csv(path)
        names = None
        if n_outputs is not None:
            prefix = "label" if task == "multilabel" else "class"
            names = [f"{prefix}_{j}" for j in range(n_outputs)]
        return _dataset_of(task, [client], names)
    manifest = _read_manifest(path)
    clients = []
    for entry in manifest["clients"]:
        client, task = load_dataset_csv(path / entry["file"])
        if task != manifest["task"]:
            raise SchemaError(f"{entry['file']} holds a {task} client, manifest says {manifest['task']}")
        clients.append(client)
    return _dataset_of(manifest["task"], clients, manifest.get("label_names"))


def _dataset_of(task, clients, names):
    if names is None:
        if task == "multilabel":
            names = [f"label_{j}" for j in range(clients[0].train.targets.shape[1])]
        else:
            n = int(max(max(c.train.targets.max(), c.test.targets.max()) for c in clients)) + 1
            n = max(n, max((max(c.completeness, default=0) for c in clients), default=0) + 1)
            names = [f"class_{j}" for j in range(n)]
    return FederatedDataset(task=task, clients=clients, label_names=list(names))


# -- running ------------------------------------------------------------------

def model_spec_for(ds, model):
    spec = default_model_spec(ds)
    if model:
        allowed = {"hidden_dim", "patch_radius"}
        bad = set(model) - allowed
        if bad:
            raise ConfigurationError(f"unknown model fields {sorted(bad)}")
        spec = dataclasses.replace(spec, **model)
        spec.validate()
    return spec


def report_dict(report):
    d = _jsonable(report.to_flat_dict())
    if report.per_class_f1:
        d["per_class_f1"] = _jsonable(report.per_class_f1)
        d["map_excluded_labels"] = list(report.map_excluded_labels)
    return d


def _scope_key(report):
    return "all" if report.client_id is None else f"client_{report.client_id}"


def snapshot_dict(snap):
    return {
        "GLOBAL": {_scope_key(r): report_dict(r) for r in snap.global_reports},
        "LOCAL": {_scope_key(r): report_dict(r) for r in snap.local_reports},
    }


def _metric_summary(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"per_seed": values, "mean": None, "std": None}
    return {"per_seed": values, "mean": float(np.mean(vals)), "std": float(np.std(vals))}


def aggregate_seeds(per_seed):
    """Per-metric per-seed values with their mean and population std."""
    out = {}
    for scope in ("GLOBAL", "LOCAL"):
        out[scope] = {}
        for key in per_seed[0][scope]:
            metrics = [s[scope][key] for s in per_seed]
            names = [m for m, v in metrics[0].items() if not isinstance(v, list) and m not in ("scope", "client_id")]
            out[scope][key] = {m: _metric_summary([x.get(m) for x in metrics]) for m in names}
    return out


def _timestamp():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def _fmt(v):
    return format(float(v), ".17g")


def rounds_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["seed", "round", "client_id", "loss", "grad_norm", "delta_norm", "empty_loss"])
    for seed, res in results:
        for r in res.rounds:
            for cid in r.client_ids:
                w.writerow([seed, r.round, cid, _fmt(r.losses[cid]), _fmt(r.grad_norms[cid]), _fmt(r.delta_norm),
                            int(r.empty_loss[cid])])
    return buf.getvalue()


def run_config(cfg, out_dir=None, ds=None):
    """Run every seed, write the run directory, and return the report document."""
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    ds = ds if ds is not None else build_scenario(cfg)
    spec = model_spec_for(ds, cfg.model)
    results, per_seed = [], []
    files = ["config.json", "report.json", "rounds.csv"]
    for seed in cfg.seeds:
        res = run_experiment(ds, cfg.strategy, cfg.eval_every, seed=seed, parallel=cfg.parallel, model=spec)
        results.append((seed, res))
        seed_dir = out / f"seed_{seed}"
        (seed_dir / "models").mkdir(parents=True, exist_ok=True)
        final = snapshot_dict(res.final)
        per_seed.append(final)
        _write_json(seed_dir / "final_report.json", final)
        files.append(f"seed_{seed}/final_report.json")
        for name, w in res.serving_models().items():
            kind = "classifier" if name == "selector" else spec.kind
            save_params(w, seed_dir / "models" / f"{name}.params", kind=kind)
            files.append(f"seed_{seed}/models/{name}.params")
    timeline = []
    for k, snap in enumerate(results[0][1].timeline):
        rows = [snapshot_dict(res.timeline[k]) for _, res in results]
        agg = aggregate_seeds(rows)
        timeline.append({"round": snap.round, "GLOBAL": {
            key: {m: s["mean"] for m, s in metrics.items()} for key, metrics in agg["GLOBAL"].items()}})
    report = {"schema_version": SCHEMA_VERSION, "strategy": cfg.strategy.name, "task": ds.task,
              "seeds": list(cfg.seeds), "rounds": cfg.strategy.rounds, "label_names": list(ds.label_names),
              **aggregate_seeds(per_seed), "timeline": timeline}
    _write_json(out / "report.json", report)
    (out / "rounds.csv").write_text(rounds_csv(results))
    _write_json(out / "manifest.json", {"schema_version": SCHEMA_VERSION, "kind": "run", "files": files,
                                        "created_utc": _timestamp()})
    return report


def selection_value(report, metric):
    key = SELECTION_KEYS[metric]
    means = [m[key]["mean"] for m in report["GLOBAL"].values() if key in m]
    means = [v for v in means if v is not None]
    return float(np.mean(means)) if means else float("nan")


def run_grid(cfg, out_dir=None):
    """Sweep the grid; returns ``(rows, selected_index)``; ``selected_index`` is None when every point failed."""
    if cfg.grid is None:
        raise ConfigurationError("config has no grid section")
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    ds = build_scenario(cfg)
    names = list(cfg.grid.params)
    rows = []
    for k, point in enumerate(cfg.grid.points()):
        sub = dataclasses.replace(cfg, strategy=cfg.strategy.replace(**point).validate(), grid=None)
        point_dir = out / f"point_{k:03d}"
        status, value, std = "ok", float("nan"), float("nan")
        try:
            report = run_config(sub, point_dir, ds)
            value = selection_value(report, cfg.grid.selection_metric)
            key = SELECTION_KEYS[cfg.grid.selection_metric]
            stds = [m[key]["std"] for m in report["GLOBAL"].values() if m.get(key, {}).get("std") is not None]
            std = float(np.mean(stds)) if stds else float("nan")
        except NumericError:
            status = "nan"
        if not math.isfinite(value):
            status = "nan"
        rows.append({"point": k, **point, "value": value, "std": std, "status": status})
    best = None
    for row in rows:
        if row["status"] == "ok" and (best is None or row["value"] > rows[best]["value"]):
            best = row["point"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["point", *names, "metric", "mean", "std", "status", "selected"])
    for row in rows:
        w.writerow([row["point"], *[row[n] for n in names], cfg.grid.selection_metric,
                    _fmt(row["value"]), _fmt(row["std"]), row["status"], int(row["point"] == best)])
    (out / "leaderboard.csv").write_text(buf.getvalue())
    _write_json(out / "manifest.json", {"schema_version": SCHEMA_VERSION, "kind": "grid",
                                        "points": len(rows), "selected": best, "created_utc": _timestamp()})
    return rows, best


def evaluate_saved(model_path, dataset_path, task=None):
    """Score a saved parameter file on a dataset directory or a single client CSV."""
    params, kind = load_params(model_path)
    ds = load_dataset_dir(dataset_path, n_outputs=params.segment("out.bias").size)
    task = task or ds.task
    if task != ds.task:
        raise ConfigurationError(f"dataset holds a {ds.task} task, not {task}")
    expected = "segmentation" if task == "segmentation" else "multilabel"
    if kind is not None and kind != expected:
        raise ConfigurationError(f"model file holds a {kind} model, task needs {expected}")
    n_classes = ds.n_outputs
    g_batch, g_classes = global_eval_split(ds)
    out = {"GLOBAL": {"all": report_dict(evaluate_model(ds, params, g_batch, g_classes, "GLOBAL"))}, "LOCAL": {}}
    for c in ds.clients:
        batch, classes = eval_split(c, task, n_classes)
        out["LOCAL"][f"client_{c.client_id}"] = report_dict(
            evaluate_model(ds, params, batch, classes, "LOCAL", c.client_id))
    return out


__all__ = ["GridSpec", "ExperimentConfig", "config_from_dict", "load_config", "build_scenario",
           "write_dataset_dir", "load_dataset_dir", "run_config", "run_grid", "evaluate_saved"]
