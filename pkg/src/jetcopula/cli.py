"""Command-line entry point: ``jetcopula {gen,fit,eval,sample}``.

Every command writes a ``manifest.json`` next to its outputs. The manifest
records the resolved config, input and output sha256 digests and package
versions; wall-clock timings live in its ``timings`` block, which is left out
of ``reproducibility_hash``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import scipy

from jetcopula import __version__
from jetcopula.baselines import BaselineError, fit_all, pseudo_observations
from jetcopula.data import (
    DataError,
    OracleTables,
    SyntheticSpec,
    load_csv,
    make_spec,
    normalize_split,
    oracle_grid,
    sample_synthetic,
    write_csv,
)
from jetcopula.evaluate import EvalError, evaluate, grid_table, oracle_table, sample_from_model
from jetcopula.losses import LossError
from jetcopula.models import FittedModel, ModelError
from jetcopula.training import TrainConfig, TrainingError, fit

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger("jetcopula")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
CONFIG_SECTIONS = ("train", "data", "eval")
DATA_DEFAULTS = {"train_frac": 2 / 3, "split_seed": 0, "columns": None}
EVAL_DEFAULTS = {"resolution": 51}


class UsageError(Exception):
    pass


# config ------------------------------------------------------------------

def load_config(path) -> dict:
    """Read a TOML or JSON config and return ``{"train": TrainConfig, "data": dict, "eval": dict}``.

    Unknown sections or keys are usage errors.
    """
    doc = {}
    if path is not None:
        path = Path(path)
        text = path.read_text()
        try:
            doc = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
        except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config must be a table of sections")
    extra = set(doc) - set(CONFIG_SECTIONS)
    if extra:
        raise UsageError(f"unknown config section(s) {sorted(extra)}; expected {list(CONFIG_SECTIONS)}")
    out = {}
    try:
        out["train"] = TrainConfig.from_dict(doc.get("train", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [train] config: {exc}") from None
    for name, defaults in (("data", DATA_DEFAULTS), ("eval", EVAL_DEFAULTS)):
        section = dict(doc.get(name, {}))
        bad = set(section) - set(defaults)
        if bad:
            raise UsageError(f"unknown key(s) in [{name}]: {sorted(bad)}")
        out[name] = {**defaults, **section}
    if not 0 < out["data"]["train_frac"] <= 1:
        raise UsageError("train_frac must be in (0, 1]")
    return out


def _override(cfg: TrainConfig, **changes) -> TrainConfig:
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return cfg
    try:
        return TrainConfig.from_dict({**cfg.to_dict(), **changes})
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# manifest ----------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def versions() -> dict:
    return {"jetcopula": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


class Run:
    """Collects inputs, outputs and phase timings for one command."""

    def __init__(self, command: str, out_dir: Path, settings: dict):
        self.command = command
        self.out_dir = out_dir
        self.settings = settings
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.timings: dict[str, float] = {}
        self.extra: dict = {}

    def add_input(self, label: str, path):
        self.inputs[label] = sha256_file(path)

    def output(self, name: str) -> Path:
        self.outputs[name] = ""
        return self.out_dir / name

    @contextmanager
    def timed(self, phase: str):
        t0 = time.perf_counter()
        yield
        self.timings[phase] = round(time.perf_counter() - t0, 3)

    def write_manifest(self):
        for name in self.outputs:
            self.outputs[name] = sha256_file(self.out_dir / name)
        body = {"command": self.command, "settings": self.settings, "inputs": self.inputs,
                "outputs": self.outputs, "versions": versions(), **self.extra}
        digest = hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()
        doc = {**body, "reproducibility_hash": digest, "timings": self.timings}
        with open(self.out_dir / "manifest.json", "w") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_grid_csv(path, table: dict):
    u = np.asarray(table["u"])
    cols = [k for k, v in table.items() if k != "u" and np.ndim(v) == 1 and len(v) == len(u)]
    names = [f"u{i}" for i in range(u.shape[1])] + cols
    write_csv(path, names, np.column_stack([u] + [np.asarray(table[k]) for k in cols]))


# commands ----------------------------------------------------------------

def cmd_gen(args, run: Run) -> None:
    if args.n <= 0:
        raise UsageError("--n must be positive")
    kw = {}
    if args.formula == "eq36" and args.z_max is not None:
        kw["z_max"] = args.z_max
    elif args.z_max is not None:
        raise UsageError("--z-max only applies to --formula eq36")
    try:
        spec = make_spec(args.formula, **kw)
    except DataError as exc:
        raise UsageError(str(exc)) from None
    with run.timed("sample"):
        info = {}
        X = sample_synthetic(spec, args.n, seed=args.seed or 0, stats=info)
        columns = ["x", "y", "z"][:spec.d]
        write_csv(run.output("samples.csv"), columns, X)
        _write_json(run.output("spec.json"), spec.to_dict())
    with run.timed("oracle"):
        res = args.resolution or (51 if spec.d <= 2 else 21)
        _write_grid_csv(run.output("oracle_grid.csv"), oracle_grid(OracleTables(spec), res))
    run.extra["normalization_constant"] = spec.a
    run.extra["acceptance_rate"] = info["rate"]
    log.info("wrote %d samples (a = %.9f)", args.n, spec.a)


def _load_spec(path) -> SyntheticSpec:
    with open(path) as fh:
        return SyntheticSpec.from_dict(json.load(fh))


def _split(args, cfg, run: Run, bounds=None):
    run.add_input("data", args.data)
    columns = args.columns.split(",") if args.columns else cfg["data"]["columns"]
    ds = load_csv(args.data, columns=columns)
    return normalize_split(ds, cfg["data"]["train_frac"], cfg["data"]["split_seed"], bounds=bounds)


def cmd_fit(args, run: Run) -> None:
    cfg = load_config(args.config)
    if args.config:
        run.add_input("config", args.config)
    train_cfg = _override(cfg["train"], copula_epochs=args.epochs, marginal_epochs=args.marginal_epochs,
                          seed=args.seed)
    spec = None
    if args.spec:
        run.add_input("spec", args.spec)
        spec = _load_spec(args.spec)
    bounds = None if spec is None else ([lo for lo, _ in spec.box], [hi for _, hi in spec.box])
    ds = _split(args, cfg, run, bounds)
    if spec is not None and spec.d != ds.d:
        raise UsageError(f"spec has d={spec.d}, data has {ds.d} columns")
    run.settings.update(train=train_cfg.to_dict(), data=cfg["data"])

    history_path = run.output("history.jsonl")
    with open(history_path, "w") as hist, run.timed("fit"):
        state = {"phase": None, "dim": -1}

        def record(phase, rec):
            if phase == "marginal" and rec["epoch"] == 0:
                state["dim"] += 1
            row = {"phase": phase, **({"dim": state["dim"]} if phase == "marginal" else {}), **rec}
            hist.write(json.dumps(row) + "\n")

        result = fit(ds.train, ds.lower, ds.upper, train_cfg, columns=ds.columns, callback=record)
    model = result.model
    model.meta["split"] = {"train_frac": cfg["data"]["train_frac"], "seed": cfg["data"]["split_seed"],
                           "n_train": int(len(ds.train_idx)), "n_test": int(len(ds.test_idx))}
    if spec is not None:
        model.meta["synthetic"] = spec.to_dict()
    model.save(run.output("model.json"))
    log.info("fit done; copula loss %.6g", result.copula_history[-1]["total"])


def _load_model(path, run: Run) -> FittedModel:
    run.add_input("model", path)
    try:
        return FittedModel.load(path)
    except (json.JSONDecodeError, KeyError) as exc:
        raise DataError(f"{path}: not a model file ({exc})") from None


def cmd_eval(args, run: Run) -> None:
    cfg = load_config(args.config)
    if args.config:
        run.add_input("config", args.config)
    model = _load_model(args.model, run)
    split = model.meta.get("split", {})
    cfg["data"]["train_frac"] = split.get("train_frac", cfg["data"]["train_frac"])
    cfg["data"]["split_seed"] = split.get("seed", cfg["data"]["split_seed"])
    if not args.columns and cfg["data"]["columns"] is None:
        cfg["data"]["columns"] = list(model.columns)
    ds = _split(args, cfg, run, (model.lower, model.upper))
    if ds.d != model.d:
        raise UsageError(f"model has d={model.d}, data has {ds.d} columns")
    spec_doc = model.meta.get("synthetic")
    if args.spec:
        run.add_input("spec", args.spec)
        spec_doc = _load_spec(args.spec).to_dict()
    resolution = args.resolution or cfg["eval"]["resolution"]
    run.settings.update(data=cfg["data"], resolution=resolution, skip_baselines=args.skip_baselines)

    baselines = {}
    if not args.skip_baselines and model.d == 2:
        with run.timed("baselines"):
            baselines = fit_all(pseudo_observations(ds.train))
        _write_json(run.output("baselines.json"), {k: v.to_json() for k, v in baselines.items()})
    oracle = None
    if spec_doc is not None:
        with run.timed("oracle"):
            oracle = OracleTables(SyntheticSpec.from_dict(spec_doc))
    with run.timed("evaluate"):
        report = evaluate(model, ds.train, ds.test, oracle=oracle, baselines=baselines, resolution=resolution)
    with open(run.output("report.json"), "w") as fh:
        fh.write(report.dumps() + "\n")
    if oracle is not None:
        table = oracle_table(oracle, resolution if model.d <= 2 else 21)
        _write_grid_csv(run.output("grid_neural.csv"), grid_table(model, table))
        for name, cop in baselines.items():
            _write_grid_csv(run.output(f"grid_{name}.csv"), grid_table(cop, table))
    log.info("test log-loss: %s", json.dumps(report.test_log_loss))


def cmd_sample(args, run: Run) -> None:
    if args.n <= 0:
        raise UsageError("--n must be positive")
    model = _load_model(args.model, run)
    with run.timed("sample"):
        info = {}
        x = sample_from_model(model, args.n, seed=args.seed or 0, stats=info)
        write_csv(run.output("samples.csv"), model.columns, model.denormalize(x))
    run.extra["acceptance_rate"] = info["rate"]
    log.info("wrote %d samples", args.n)


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "eval": cmd_eval, "sample": cmd_sample}


# argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default: config seed, else 0)")
    common.add_argument("--threads", type=int, default=1, help="cap on BLAS/OpenMP threads (default 1)")
    common.add_argument("--out-dir", type=Path, default=Path("."), help="directory for outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="jetcopula", description="Neural copula estimation with jet-based derivatives.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="sample a synthetic dataset and its ground truth")
    g.add_argument("--formula", choices=["eq35", "eq36", "bimodal"], required=True)
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--z-max", type=float, default=None, help="upper z bound for eq36 (default 1)")
    g.add_argument("--resolution", type=int, default=None, help="oracle grid points per axis")

    f = sub.add_parser("fit", parents=[common], help="train marginals then the copula")
    f.add_argument("--data", required=True, help="CSV with a header row")
    f.add_argument("--config", default=None, help="TOML or JSON config")
    f.add_argument("--columns", default=None, help="comma-separated column subset")
    f.add_argument("--spec", default=None, help="spec.json from gen; its box fixes the normalization")
    f.add_argument("--epochs", type=int, default=None, help="copula epochs override")
    f.add_argument("--marginal-epochs", type=int, default=None)

    e = sub.add_parser("eval", parents=[common], help="score a model against baselines and ground truth")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--columns", default=None)
    e.add_argument("--spec", default=None, help="ground truth spec (default: the one stored in the model)")
    e.add_argument("--resolution", type=int, default=None)
    e.add_argument("--skip-baselines", action="store_true")

    s = sub.add_parser("sample", parents=[common], help="draw samples from a fitted model")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, required=True)
    return p


def _settings(args) -> dict:
    skip = {"command", "out_dir", "verbose", "threads", "data", "model", "config", "spec"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        run = Run(args.command, args.out_dir, _settings(args))
        from threadpoolctl import threadpool_limits
        with threadpool_limits(limits=max(1, args.threads)):
            COMMANDS[args.command](args, run)
        run.write_manifest()
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"jetcopula {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as exc:
        print(f"jetcopula {args.command}: training failed at epoch {exc.epoch} "
              f"(last finite epoch {exc.last_finite}): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (EvalError, BaselineError, LossError, FloatingPointError) as exc:
        print(f"jetcopula {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataError, ModelError) as exc:
        print(f"jetcopula {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
