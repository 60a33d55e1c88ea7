"""Command line entry point: ``fedbench {gen,run,grid,eval}``.

Exit codes: 0 success, 1 configuration error, 2 I/O error (missing or
malformed files), 3 numeric failure (non-finite parameters or metrics).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import ConfigurationError, NumericError, ParseError, SchemaError
from .runner import (build_scenario, evaluate_saved, load_config, run_config, run_grid, write_dataset_dir)

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seeds=[args.seed])
    if getattr(args, "label_map", None) is not None:
        cfg = dataclasses.replace(cfg, label_map=Path(args.label_map))
    if getattr(args, "out", None) is not None:
        cfg = dataclasses.replace(cfg, out_dir=Path(args.out))
    return cfg


def cmd_gen(args):
    cfg = _load(args)
    if cfg.scenario is None:
        raise ConfigurationError("gen needs a generated scenario, not a dataset path")
    ds = build_scenario(cfg)
    manifest = write_dataset_dir(ds, cfg.out_dir, cfg.scenario, cfg.to_dict())
    for c in manifest["clients"]:
        print(f"client {c['client_id']}: {c['n_train']} train / {c['n_test']} test -> {c['file']}")
    return EXIT_OK


def cmd_run(args):
    cfg = _load(args)
    report = run_config(cfg)
    key = "dice_mean" if report["task"] == "segmentation" else "micro_f1"
    for scope_key, metrics in report["GLOBAL"].items():
        m = metrics.get(key, {})
        if m.get("mean") is not None:
            print(f"GLOBAL {scope_key} {key}: {m['mean']:.4f} +- {m['std']:.4f}")
    print(f"wrote {cfg.out_dir}")
    return EXIT_OK


def cmd_grid(args):
    cfg = _load(args)
    rows, best = run_grid(cfg)
    for row in rows:
        flag = "*" if row["point"] == best else " "
        params = ", ".join(f"{k}={row[k]}" for k in cfg.grid.params)
        print(f"{flag} {row['point']:3d} {params}: {row['value']:.4f} [{row['status']}]")
    if best is None:
        print("every grid point failed", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args):
    report = evaluate_saved(args.model, args.dataset, args.task)
    text = json.dumps(report, indent=2) + "\n"
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval_report.json").write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fedbench", description="Deterministic federated learning benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--label-map", help="label alignment table overriding the built-in one")
        if seed:
            p.add_argument("--seed", type=int, help="run this single seed instead of the config's seeds")

    common(sub.add_parser("gen", help="generate a synthetic federated dataset"), seed=False)
    common(sub.add_parser("run", help="run one strategy over every seed"))
    common(sub.add_parser("grid", help="full-factorial hyperparameter sweep"))
    p = sub.add_parser("eval", help="score a saved model on a dataset")
    p.add_argument("model", help="parameter file written by run")
    p.add_argument("dataset", help="dataset directory from gen, or a single client CSV")
    p.add_argument("--task", choices=("multilabel", "segmentation"))
    p.add_argument("--out", help="write eval_report.json here instead of printing")
    return parser


COMMANDS = {"gen": cmd_gen, "run": cmd_run, "grid": cmd_grid, "eval": cmd_eval}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParseError, SchemaError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigurationError, ValueError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
