"""``falconlab`` command line: train, eval, report, sweep, ablate.

Run configuration is one JSON document (``schema_version`` 1)::

    {
      "schema_version": 1,
      "name": "falcon-mnist",
      "data":  {"source": "mnist" | "synthetic", "path": "...", ...},
      "model": {"preset": "mlp-small"},
      "train": {<TrainConfig fields>},
      "eval":  {"kinds": [...], "levels": [...], "num_bins": 10, ...},
      "sweep": {"param": "lambda_s", "values": [...]}
    }

Missing sections and keys fall back to :data:`DEFAULT_CONFIG`. ``--override
a.b=value`` edits one existing key; the value is parsed as JSON when possible.

Failures print a single JSON line ``{"error": ..., "exit": ..., "message": ...}``
on stderr and exit with 2 (config), 3 (data), 4 (divergence), 5 (checkpoint)
or 6 (report schema).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .data import Dataset, gen_synthetic_shift, load_checkpoint, load_mnist, save_checkpoint, split_validation
from .errors import (
    CheckpointError,
    ConfigError,
    ConsistencyError,
    DataFormatError,
    DataIOError,
    DivergenceError,
    FalconError,
    RegistryError,
    SchemaError,
)
from .harness import (
    MODES,
    TemperatureScaled,
    TrainConfig,
    evaluate_synthetic_shift,
    evaluate_under_shift,
    image_shift_evaluator,
    run_sensitivity,
    synthetic_shift_evaluator,
    train_baseline,
    train_falcon,
)
from .nn import Model
from .report import comparison_csv, config_digest, load_report, render_all
from .shift import LEVELS, load_ranges

log = logging.getLogger("falconlab")

CONFIG_SCHEMA_VERSION = 1
EXIT_CODES = (
    (ConfigError, 2),
    (RegistryError, 2),
    (DataIOError, 3),
    (DataFormatError, 3),
    (ConsistencyError, 3),
    (DivergenceError, 4),
    (CheckpointError, 5),
    (SchemaError, 6),
)

DEFAULT_CONFIG = {
    "schema_version": CONFIG_SCHEMA_VERSION,
    "name": "run",
    "data": {
        "source": "mnist",
        "path": "data/mnist",
        "validation_size": 5000,
        "train_limit": None,
        "test_limit": None,
        "n": 1000,
        "shift_distance": 4.0,
        "seed": 0,
    },
    "model": {"preset": "mlp-small"},
    "train": TrainConfig().to_dict(),
    "eval": {
        "kinds": ["rotation", "y-zoom"],
        "levels": list(LEVELS),
        "num_bins": 10,
        "seed": 0,
        "ranges": None,
        "temperature_scaling": False,
        "max_distance": 6.0,
    },
    "sweep": {"param": "lambda_s", "values": [0.5, 1.0, 5.0, 10.0, 15.0, 30.0, 50.0, 100.0]},
}


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, item: str) -> None:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    dotted, raw = item.split("=", 1)
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"override {dotted!r} does not name an existing key")
        node = node[p]
    if leaf not in node:
        raise ConfigError(f"override {dotted!r} does not name an existing key")
    node[leaf] = _parse_value(raw)


def load_config(path, overrides=()) -> dict:
    """Read a run config, merge it over the defaults and apply overrides."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if doc.get("schema_version") != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"config {path}: schema_version must be {CONFIG_SCHEMA_VERSION}")
    cfg = _merge(DEFAULT_CONFIG, doc)
    for item in overrides:
        apply_override(cfg, item)
    TrainConfig.from_dict(cfg["train"])
    if cfg["data"]["source"] not in ("mnist", "synthetic"):
        raise ConfigError(f"data.source must be 'mnist' or 'synthetic', got {cfg['data']['source']!r}")
    return cfg


def _provenance(cfg: dict) -> dict:
    return {"config": cfg, "package_version": __version__}


# ---------------------------------------------------------------------------
# data and models


def load_data(cfg: dict) -> tuple[Dataset, Dataset, Dataset]:
    """``(train, val, test)`` for the configured source."""
    d = cfg["data"]
    if d["source"] == "synthetic":
        train, test = gen_synthetic_shift(d["seed"], d["n"], d["shift_distance"])
        val = gen_synthetic_shift(d["seed"] + 1, max(d["n"] // 5, 10), 0.0)[0]
        return train, val.subset(slice(None), "val"), test
    train = load_mnist(d["path"], "train")
    test = load_mnist(d["path"], "test")
    if d["train_limit"]:
        train = train.subset(slice(0, int(d["train_limit"]) + d["validation_size"]))
    if d["test_limit"]:
        test = test.subset(slice(0, int(d["test_limit"])))
    train, val = split_validation(train, d["validation_size"])
    return train, val, test


def build_model(cfg: dict, data: Dataset, seed: int) -> Model:
    shape = data.inputs.shape[1:]
    return Model.from_preset(cfg["model"]["preset"], data.num_classes, shape, seed, cfg["train"]["dropout"])


def train_model(cfg: dict, train: Dataset, val: Dataset):
    tcfg = TrainConfig.from_dict(cfg["train"])
    model = build_model(cfg, train, tcfg.seed)
    if tcfg.mode == "l2-baseline":
        return train_baseline(model, train, tcfg, val)
    return train_falcon(model, train, tcfg, val)


def _predictor(cfg, model, val):
    if cfg["eval"]["temperature_scaling"]:
        return TemperatureScaled.fit(model, val)
    return model


def evaluate(cfg: dict, model, val: Dataset, test: Dataset, log_path=None):
    e = cfg["eval"]
    predictor = _predictor(cfg, model, val)
    name = cfg["name"]
    if cfg["data"]["source"] == "synthetic":
        return evaluate_synthetic_shift(
            predictor, cfg["data"]["seed"], cfg["data"]["n"], e["max_distance"], e["levels"], e["num_bins"], name, _provenance(cfg), log_path
        )
    ranges = load_ranges(e["ranges"]) if e["ranges"] else None
    return evaluate_under_shift(
        predictor, test, e["kinds"], e["levels"], e["num_bins"], e["seed"], ranges, log_path, name, _provenance(cfg)
    )


# ---------------------------------------------------------------------------
# outputs


def write_history(history, path, cfg) -> None:
    cols = ["step", "phase", "cce", "l_s", "l_adv", "epsilon"]
    digest = config_digest({"provenance": {"config": cfg}})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols + ["seed", "config_sha256"])
        for row in history.steps:
            w.writerow([row.get(c, "") for c in cols] + [cfg["train"]["seed"], digest])


def _write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# verbs


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    train, val, _ = load_data(cfg)
    model, history = train_model(cfg, train, val)
    out = _out_dir(args)
    save_checkpoint(model, cfg, out / "checkpoint.fckpt")
    write_history(history, out / "history.csv", cfg)
    _write_json(out / "config.json", cfg)
    log.info("trained %s: %d logged steps", cfg["name"], len(history.steps))
    return 0


def cmd_eval(args) -> int:
    model, stored = load_checkpoint(args.checkpoint)
    if args.config is not None:
        cfg = load_config(args.config, args.override)
    else:
        cfg = _merge(DEFAULT_CONFIG, stored)
        for item in args.override:
            apply_override(cfg, item)
    _, val, test = load_data(cfg)
    out = _out_dir(args)
    report = evaluate(cfg, model, val, test, out / "predictions.csv")
    (out / "report.json").write_text(report.to_json() + "\n")
    return 0


def cmd_report(args) -> int:
    reports = [load_report(p) for p in args.reports]
    render_all(reports, _out_dir(args), args.kind, args.level)
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.override)
    train, val, test = load_data(cfg)
    e = cfg["eval"]
    if cfg["data"]["source"] == "synthetic":
        distances = [lv / 90.0 * e["max_distance"] for lv in e["levels"]]
        evaluator = synthetic_shift_evaluator(cfg["data"]["seed"], cfg["data"]["n"], distances, e["num_bins"])
    else:
        ranges = load_ranges(e["ranges"]) if e["ranges"] else None
        evaluator = image_shift_evaluator(test, e["kinds"], e["levels"], e["num_bins"], e["seed"], ranges)
    rows = run_sensitivity(
        TrainConfig.from_dict(cfg["train"]),
        cfg["sweep"]["param"],
        cfg["sweep"]["values"],
        train,
        lambda seed: build_model(cfg, train, seed),
        evaluator,
        val,
    )
    out = _out_dir(args)
    digest = config_digest({"provenance": {"config": cfg}})
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "value", "accuracy", "micro_ece", "seed", "config_sha256"])
        for r in rows:
            w.writerow([r["param"], r["value"], f"{r['accuracy']:.9g}", f"{r['micro_ece']:.9g}", cfg["train"]["seed"], digest])
    _write_json(out / "sweep.json", {"schema_version": 1, "kind": "sensitivity-sweep", "rows": rows, "provenance": dict(_provenance(cfg), seed=cfg["train"]["seed"])})
    return 0


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.override)
    train, val, test = load_data(base)
    out = _out_dir(args)
    reports = []
    for mode in ("l2-baseline", "falcon-ls-only", "falcon-ladv-only", "falcon"):
        cfg = copy.deepcopy(base)
        cfg["train"]["mode"] = mode
        cfg["name"] = mode
        model, _ = train_model(cfg, train, val)
        report = evaluate(cfg, model, val, test)
        (out / f"report_{mode}.json").write_text(report.to_json() + "\n")
        reports.append(report.to_dict())
        log.info("%s: micro-ECE %s", mode, report.micro_ece)
    render_all(reports, out)
    (out / "ablation.csv").write_text(comparison_csv(reports))
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="falconlab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run config JSON")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", required=True, help="output directory")

    common(sub.add_parser("train", help="train one model"))
    p = sub.add_parser("eval", help="evaluate a checkpoint under shift")
    p.add_argument("--checkpoint", required=True)
    common(p, config_required=False)
    p = sub.add_parser("report", help="render SVG charts and a comparison CSV")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default=None, help="perturbation for the reliability diagram")
    p.add_argument("--level", type=int, default=None)
    common(sub.add_parser("sweep", help="lambda sensitivity sweep"))
    common(sub.add_parser("ablate", help=f"train and compare the modes {', '.join(MODES)}"))
    return parser


VERBS = {"train": cmd_train, "eval": cmd_eval, "report": cmd_report, "sweep": cmd_sweep, "ablate": cmd_ablate}


def _exit_code(exc: Exception) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return VERBS[args.verb](args)
    except FalconError as exc:
        code = _exit_code(exc)
        print(json.dumps({"error": type(exc).__name__, "exit": code, "message": str(exc)}), file=sys.stderr)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
