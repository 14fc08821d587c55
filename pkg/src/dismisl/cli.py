"""Command-line entry point.

    dismisl <subcommand> --config <path> [--out <dir>] [--seed <u64>]

A run config is one JSON document with a ``synthetic`` or a ``data`` section
plus optional ``model``, ``train``, ``evaluation``, ``sweep`` and ``output``
sections. The effective config (after command-line overrides) is written
into the output directory so every run can be repeated from that file alone.
"""

import argparse
from dataclasses import dataclass, replace
import json
import logging
import os
import sys

import numpy as np

from . import harness as hs
from . import pooling as pl
from . import report as rp
from .data import ManifestEntry, SyntheticSpec, generate_synthetic, load_dataset, write_bag, write_manifest
from .errors import ConfigError, DataError, DismislError, OptimizationError, UndefinedMetricError, ValidationError
from .survival import c_index

log = logging.getLogger("dismisl")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_OPTIMIZATION = 4
EXIT_IO = 5

SECTIONS = ("synthetic", "data", "model", "train", "evaluation", "sweep", "output")
MODEL_KEYS = ("strategy", "algorithm", "scorer_hidden", "head_hidden", "attention_dim", "checkpoint")
DEFAULT_STRATEGY = {"kind": "percentile", "scenario": 7, "k": 3}


@dataclass
class RunConfig:
    doc: dict
    synthetic: SyntheticSpec
    manifest: str
    train: hs.TrainConfig
    algorithm: str
    checkpoint: str
    n_folds: int
    sweep: tuple
    output: str


def _section(doc, name):
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a JSON object")
    return dict(value)


def _abspath(path, base):
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base, path))


def parse_config(doc, base_dir=".", out=None, seed=None):
    """Validate a config document and apply command-line overrides."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    if ("synthetic" in doc) == ("data" in doc):
        raise ConfigError("config needs exactly one of 'synthetic' or 'data'")
    doc = json.loads(json.dumps(doc))
    try:
        spec = manifest = None
        if "synthetic" in doc:
            syn = _section(doc, "synthetic")
            if seed is not None:
                syn["seed"] = seed
            spec = SyntheticSpec.from_dict(syn)
            doc["synthetic"] = spec.to_dict()
        else:
            data = _section(doc, "data")
            if set(data) != {"manifest"}:
                raise ConfigError("data section takes exactly one key, 'manifest'")
            manifest = _abspath(data["manifest"], base_dir)
            doc["data"] = {"manifest": manifest}

        model = _section(doc, "model")
        bad = set(model) - set(MODEL_KEYS)
        if bad:
            raise ConfigError(f"unknown model fields: {sorted(bad)}")
        strategy = pl.PoolingStrategy.from_dict(model.get("strategy", DEFAULT_STRATEGY))
        algorithm = model.get("algorithm", "network")
        if algorithm not in ("network", "l1_cox"):
            raise ConfigError(f"model.algorithm must be 'network' or 'l1_cox', got {algorithm!r}")
        checkpoint = model.get("checkpoint")
        if checkpoint is not None:
            checkpoint = model["checkpoint"] = _abspath(checkpoint, base_dir)

        train = _section(doc, "train")
        for key in ("scorer_hidden", "head_hidden", "attention_dim"):
            if key in model:
                train[key] = model[key]
        if seed is not None:
            train["seed"] = seed
        train_cfg = hs.TrainConfig.from_dict(train, strategy=strategy)
        model["strategy"] = strategy.to_dict()
        doc["model"] = model
        doc["train"] = {k: v for k, v in train_cfg.to_dict().items() if k != "strategy"}

        evaluation = _section(doc, "evaluation")
        if set(evaluation) - {"n_folds"}:
            raise ConfigError("evaluation section takes only 'n_folds'")
        n_folds = int(evaluation.get("n_folds", 5))
        if n_folds < 2:
            raise ConfigError("evaluation.n_folds must be >= 2")
        doc["evaluation"] = {"n_folds": n_folds}

        sweep = None
        if "sweep" in doc:
            s = _section(doc, "sweep")
            if len(s) != 1 or next(iter(s)) not in ("k", "scenario"):
                raise ConfigError("sweep takes exactly one of 'k' or 'scenario' with a list of values")
            key, values = next(iter(s.items()))
            if not isinstance(values, list) or not values:
                raise ConfigError("sweep values must be a non-empty list")
            sweep = (key, tuple(int(v) for v in values))

        output = out or _section(doc, "output").get("directory")
        if not output:
            raise ConfigError("no output directory: set output.directory or pass --out")
        doc["output"] = {"directory": output}
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(doc, spec, manifest, train_cfg, algorithm, checkpoint, n_folds, sweep, output)


def load_config(path, out=None, seed=None):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(doc, os.path.dirname(os.path.abspath(path)), out, seed)


def _dataset(cfg):
    if cfg.synthetic is not None:
        return hs.Dataset(*generate_synthetic(cfg.synthetic))
    return hs.Dataset(*load_dataset(cfg.manifest))


def _prepare_output(cfg):
    os.makedirs(cfg.output, exist_ok=True)
    rp.write_json(os.path.join(cfg.output, "config.json"), cfg.doc)


def _path(cfg, *parts):
    return os.path.join(cfg.output, *parts)


# -- subcommands --------------------------------------------------------------------

def cmd_synth(cfg):
    if cfg.synthetic is None:
        raise ConfigError("synth needs a 'synthetic' section")
    bags, labels = generate_synthetic(cfg.synthetic)
    os.makedirs(_path(cfg, "bags"), exist_ok=True)
    entries = []
    for bag, lab in zip(bags, labels):
        rel = f"bags/{bag.patient_id}.dmsb"
        write_bag(bag, _path(cfg, rel))
        entries.append(ManifestEntry(bag.patient_id, rel, lab.time, lab.event))
    write_manifest(entries, _path(cfg, "manifest.csv"))
    rp.write_json(_path(cfg, "provenance.json"), {
        "synthetic": cfg.synthetic.to_dict(),
        "seed": cfg.synthetic.seed,
        "n_patients": len(bags),
        "n_events": int(sum(lab.event for lab in labels)),
    })
    return [_path(cfg, "manifest.csv")]


def cmd_train(cfg):
    ds = hs.fixed_size(_dataset(cfg), cfg.train.bag_size, cfg.train.seed)
    model = hs.fit_with_early_stop_split(cfg.train, ds, cfg.algorithm)
    name = "model.json" if cfg.algorithm == "l1_cox" else "model.dmsm"
    hs.save_model(_path(cfg, name), model)
    risk = model.risk(ds.bags)
    try:
        train_ci = c_index(risk, ds.time, ds.event)
    except UndefinedMetricError:
        train_ci = None
    summary = {
        "label": cfg.train.strategy.label() if cfg.algorithm == "network" else "mean_feature_l1_cox",
        "threshold": model.threshold,
        "train_c_index": train_ci,
        "n_patients": len(ds),
        "model": {k: v for k, v in model.metadata.items() if k != "history"},
        "history": model.metadata.get("history", []),
    }
    rp.write_json(_path(cfg, "train.json"), summary)
    return [_path(cfg, name), _path(cfg, "train.json")]


def _write_cv(report, directory, algorithm):
    os.makedirs(directory, exist_ok=True)
    rp.write_json(os.path.join(directory, "report.json"), report.to_dict())
    written = [os.path.join(directory, "report.json")]
    if report.stratification is not None:
        rp.write_km_csv(os.path.join(directory, "km.csv"), report.stratification)
        rp.write_km_svg(os.path.join(directory, "km.svg"), report.stratification)
        written += [os.path.join(directory, "km.csv"), os.path.join(directory, "km.svg")]
    if report.profile is not None:
        rp.write_profile_csv(os.path.join(directory, "profile.csv"), report.profile, report.profile_percentiles)
        written.append(os.path.join(directory, "profile.csv"))
    ext = "json" if algorithm == "l1_cox" else "dmsm"
    for k, model in enumerate(report.models):
        path = os.path.join(directory, f"fold_{k + 1}.{ext}")
        hs.save_model(path, model)
        written.append(path)
    return written


def _sweep_strategies(cfg):
    base = cfg.train.strategy
    if cfg.sweep is None:
        return [(None, base)]
    key, values = cfg.sweep
    if base.kind not in ("percentile", "attention_percentile"):
        raise ConfigError("sweeps apply to percentile strategies only")
    out = []
    for v in values:
        if key == "k":
            scheme = pl.PercentileScheme(base.scheme.percentiles, v)
        else:
            scheme = pl.scenario_preset(v, base.scheme.k)
        out.append((f"{key}{v}", pl.PoolingStrategy(base.kind, scheme=scheme)))
    return out


def cmd_cv(cfg):
    ds = _dataset(cfg)
    written, summary = [], []
    for tag, strategy in _sweep_strategies(cfg):
        train = replace(cfg.train, strategy=strategy)
        report = hs.cross_validate(train, ds, cfg.n_folds, cfg.algorithm, keep_models=True)
        written += _write_cv(report, _path(cfg, tag) if tag else cfg.output, cfg.algorithm)
        summary.append([tag or report.label, report.label, report.mean, report.sd])
    if cfg.sweep is not None:
        rp.write_csv(_path(cfg, "sweep.csv"), ("run", "label", "c_index_mean", "c_index_sd"), summary)
        written.append(_path(cfg, "sweep.csv"))
    return written


def cmd_baselines(cfg):
    ds = _dataset(cfg)
    rows = hs.run_baselines(cfg.train, ds, cfg.n_folds)
    header, body = hs.baseline_table(rows, cfg.n_folds)
    rp.write_csv(_path(cfg, "baselines.csv"), header, body)
    rp.write_json(_path(cfg, "baselines.json"), [
        {"algorithm": r.algorithm, "report": r.report.to_dict() if r.ok else None, "error": r.error} for r in rows
    ])
    return [_path(cfg, "baselines.csv"), _path(cfg, "baselines.json")]


def _checkpoint_and_cohort(cfg):
    if not cfg.checkpoint:
        raise ConfigError("model.checkpoint must name a trained model file")
    model = hs.load_model(cfg.checkpoint)
    cohort = hs.fixed_size(_dataset(cfg), cfg.train.bag_size, cfg.train.seed)
    return model, cohort


def cmd_stratify(cfg):
    model, cohort = _checkpoint_and_cohort(cfg)
    risk = model.risk(cohort.bags)
    strat = hs.stratify_risks(risk, model.threshold, cohort.time, cohort.event)
    try:
        ci = c_index(risk, cohort.time, cohort.event)
    except UndefinedMetricError:
        ci = None
    doc = dict(strat.to_dict(), threshold=model.threshold, c_index=ci,
               patients=[{"patient_id": pid, "risk": float(r), "group": g}
                         for pid, r, g in zip(cohort.ids, risk, strat.assignments)])
    rp.write_json(_path(cfg, "stratification.json"), doc)
    rp.write_km_csv(_path(cfg, "km.csv"), strat)
    rp.write_km_svg(_path(cfg, "km.svg"), strat)
    return [_path(cfg, "stratification.json"), _path(cfg, "km.csv"), _path(cfg, "km.svg")]


def cmd_profile(cfg):
    model, cohort = _checkpoint_and_cohort(cfg)
    table, scheme = hs.decile_score_profile(model, cohort)
    rp.write_profile_csv(_path(cfg, "profile.csv"), table, scheme.percentiles)
    rp.write_json(_path(cfg, "profile.json"), {"percentiles": list(scheme.percentiles), "k": scheme.k,
                                                "deciles": table})
    return [_path(cfg, "profile.csv"), _path(cfg, "profile.json")]


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "cv": cmd_cv,
    "baselines": cmd_baselines,
    "stratify": cmd_stratify,
    "profile": cmd_profile,
}


def _seed(text):
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def build_parser():
    parser = argparse.ArgumentParser(prog="dismisl", description="Percentile-distribution multiple-instance survival learning.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="run config (JSON)")
    parser.add_argument("--out", help="output directory, overrides output.directory")
    parser.add_argument("--seed", type=_seed, help="overrides the synthetic and training seeds")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.out, args.seed)
        _prepare_output(cfg)
        written = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"dismisl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OptimizationError as exc:
        print(f"dismisl: optimization error: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    except (DataError, ValidationError) as exc:
        print(f"dismisl: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"dismisl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DismislError as exc:
        print(f"dismisl: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
