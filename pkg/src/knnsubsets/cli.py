"""Command-line front end: ``synth``, ``discover``, ``report`` and ``baseline``.

Every command takes ``--config <json>`` plus override flags, ``--seed`` and
``--out``, and writes a ``manifest.json`` next to its outputs.  Exit codes:
0 success, 2 configuration error, 3 input/output error, 4 contract error
(for example a result computed on a different dataset).
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import __version__
from .cart import TreeError
from .dataset import (
    BinningSpec,
    DatasetError,
    load_csv,
    make_local_structures,
    read_feature_specs,
    write_csv,
    write_feature_specs,
)
from .eval import EvalError, baseline_subsets, compare_whole_vs_subsets, write_table
from .knn_space import KnnError
from .seeding import derive_seed
from .subsetting import PAPER_K_SCHEDULE, ConfigError, SubsettingConfig, SubsettingResult, run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_CONTRACT = 4

log = logging.getLogger("knnsubsets")


class ContractError(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # input data
    data: str = None
    features: str = None
    label_column: str = "label"
    binning: dict = None
    standardize: bool = True
    # discovery
    sst: int = 250
    alpha_l: float = 0.125
    alpha_u: float = 0.3
    k_schedule: tuple = PAPER_K_SCHEDULE
    coverage_target: float = 0.90
    seed_fraction: float = 0.10
    accuracy_source: str = "subset"
    # evaluation
    result: str = None
    cps: tuple = (0.01, 0.015, 0.02, 0.025, 0.05)
    folds: int = 5
    baseline: bool = True
    min_node: int = 20
    criterion: str = "gini"
    # synthetic data
    cluster_count: int = 8
    per_cluster_size: int = 375
    class_count: int = 4
    noise_rate: float = 0.15
    n_features: int = 6
    center_spread: float = 20.0
    min_separation: float = 50.0
    rule_scale: float = 6.0
    lobe_offset: float = 1.5
    seed: int = 0
    out: str = None

    def __post_init__(self):
        try:
            sched = tuple((float(t), int(k)) for t, k in self.k_schedule)
            cps = tuple(float(c) for c in self.cps)
        except (TypeError, ValueError):
            raise ConfigError("k_schedule must be [[coverage, K], ...] and cps a list of numbers") from None
        object.__setattr__(self, "k_schedule", sched)
        object.__setattr__(self, "cps", cps)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["k_schedule"] = [list(p) for p in self.k_schedule]
        d["cps"] = list(self.cps)
        return d

    def echo(self):
        """Config as recorded in manifests; the output location is not part of it."""
        d = self.to_dict()
        del d["out"]
        return d

    def subsetting(self):
        return SubsettingConfig(sst=self.sst, alpha_l=self.alpha_l, alpha_u=self.alpha_u,
                                k_schedule=self.k_schedule, coverage_target=self.coverage_target,
                                seed_fraction=self.seed_fraction, rng_seed=derive_seed(self.seed, "discover"),
                                accuracy_source=self.accuracy_source)

    def validate(self, command):
        self.subsetting()
        if not self.cps or any(c < 0 for c in self.cps):
            raise ConfigError("cps must be a non-empty list of non-negative values")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if self.min_node < 1:
            raise ConfigError("min_node must be positive")
        if self.criterion not in ("gini", "entropy"):
            raise ConfigError("criterion must be 'gini' or 'entropy'")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.binning is not None:
            unknown = set(self.binning) - {"bin_count", "lo", "hi"}
            if unknown:
                raise ConfigError(f"unknown binning keys {sorted(unknown)}")
        if not self.out:
            raise ConfigError("--out is required")
        if command != "synth" and not (self.data and self.features):
            raise ConfigError("--data and --features are required")
        if command in ("report", "baseline") and not self.result:
            raise ConfigError("--result is required")


# -- argument handling -------------------------------------------------------

def _schedule(text):
    try:
        pairs = []
        for part in text.split(","):
            t, k = part.split(":")
            pairs.append((float(t), int(k)))
        return pairs
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected coverage:K pairs such as 0:3,0.25:5, got {text!r}") from None


def _floats(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


# flag -> (RunConfig field, type, help)
_COMMON = [
    ("--seed", "seed", int, "global seed; every random stream is derived from it"),
    ("--out", "out", str, "output directory"),
]
_DATA = [
    ("--data", "data", str, "input CSV"),
    ("--features", "features", str, "feature spec JSON"),
    ("--label-column", "label_column", str, "name of the class column"),
]
_DISCOVER = [
    ("--sst", "sst", int, "target subset size"),
    ("--alpha-l", "alpha_l", float, "penalty per instance below the target size"),
    ("--alpha-u", "alpha_u", float, "penalty per instance above the target size"),
    ("--k-schedule", "k_schedule", _schedule, "coverage:K pairs, e.g. 0:3,0.25:5,0.7:7,0.85:9"),
    ("--coverage-target", "coverage_target", float, "fraction of the data to cover"),
    ("--seed-fraction", "seed_fraction", float, "share of positive hits used as seeds"),
]
_EVAL = [
    ("--result", "result", str, "result.json written by discover"),
    ("--cp", "cps", _floats, "comma-separated complexity parameters"),
    ("--folds", "folds", int, "cross-validation folds"),
    ("--min-node", "min_node", int, "smallest node a tree may split"),
]
_SYNTH = [
    ("--clusters", "cluster_count", int, "number of planted clusters"),
    ("--per-cluster", "per_cluster_size", int, "points per cluster"),
    ("--classes", "class_count", int, "number of classes (2-4)"),
    ("--noise", "noise_rate", float, "fraction of labels flipped"),
    ("--n-features", "n_features", int, "feature count"),
]

COMMANDS = {
    "synth": ("generate planted-structure data", _SYNTH),
    "discover": ("discover subsets", _DATA + _DISCOVER),
    "report": ("compare whole-data and per-subset trees", _DATA + _EVAL),
    "baseline": ("evaluate random subsets matched to a result", _DATA + _EVAL),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="knnsubsets", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, flags) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON file with RunConfig fields")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for flag, dest, typ, h in _COMMON + flags:
            p.add_argument(flag, dest=dest, type=typ, default=argparse.SUPPRESS, help=h)
        if name == "report":
            p.add_argument("--no-baseline", dest="baseline", action="store_false", default=argparse.SUPPRESS,
                           help="skip the random baseline")
    return parser


def resolve_config(args):
    base = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                base = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON: {exc}") from None
        if not isinstance(base, dict):
            raise ConfigError("config file must hold a JSON object")
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = RunConfig.from_dict({**base, **overrides})
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate(args.command)
    return cfg


# -- commands ----------------------------------------------------------------

def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def write_manifest(out, command, cfg, dataset_hash):
    outputs = sorted(p.name for p in Path(out).iterdir() if p.name != "manifest.json")
    write_json(Path(out) / "manifest.json", {"command": command, "version": __version__, "config": cfg.echo(),
                                             "dataset_hash": dataset_hash, "outputs": outputs})


def load_dataset(cfg):
    specs = read_feature_specs(cfg.features)
    binning = None if cfg.binning is None else BinningSpec(**cfg.binning)
    return load_csv(cfg.data, specs, cfg.label_column, binning=binning, standardize=cfg.standardize)


def load_result(cfg, dataset):
    with open(cfg.result, encoding="utf-8") as fh:
        result = SubsettingResult.from_dict(json.load(fh))
    if result.dataset_hash != dataset.content_hash():
        raise ContractError(f"{cfg.result} is stale: it was computed on a different dataset")
    if result.m != dataset.m:
        raise ContractError("result size does not match the dataset")
    try:
        result.validate()
    except ValueError as exc:
        raise ContractError(f"{cfg.result}: {exc}") from None
    return result


def cmd_synth(cfg):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    sd = make_local_structures(cfg.cluster_count, cfg.per_cluster_size, cfg.class_count, cfg.noise_rate,
                               derive_seed(cfg.seed, "synth"), n_features=cfg.n_features,
                               center_spread=cfg.center_spread, min_separation=cfg.min_separation,
                               rule_scale=cfg.rule_scale, lobe_offset=cfg.lobe_offset)
    write_csv(sd.dataset, out / "data.csv", cfg.label_column)
    write_feature_specs(sd.dataset.features, out / "features.json")
    write_json(out / "ground_truth.json", sd.ground_truth())
    # hash the data as later commands will load it
    reloaded = load_csv(out / "data.csv", sd.dataset.features, cfg.label_column, standardize=cfg.standardize)
    write_manifest(out, "synth", cfg, reloaded.content_hash())


def cmd_discover(cfg):
    dataset = load_dataset(cfg)
    result = run(dataset, cfg.subsetting())
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(result.to_json(), encoding="utf-8")
    write_table(out / "iterations.csv", result.iterations)
    log.info("%d subsets, coverage %.3f, stop: %s", len(result.subsets), result.coverage, result.stop_reason)
    write_manifest(out, "discover", cfg, dataset.content_hash())


def _report(cfg, baseline):
    dataset = load_dataset(cfg)
    result = load_result(cfg, dataset)
    report = compare_whole_vs_subsets(dataset, result, cfg.cps, folds=cfg.folds, seed=cfg.seed,
                                      min_node=cfg.min_node, criterion=cfg.criterion, baseline=baseline)
    return dataset, result, report


def cmd_report(cfg):
    dataset, _, report = _report(cfg, cfg.baseline)
    report.write(cfg.out)
    write_manifest(cfg.out, "report", cfg, dataset.content_hash())


def cmd_baseline(cfg):
    dataset, result, report = _report(cfg, True)
    spec, sets = baseline_subsets(dataset, result, cfg.seed)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "baseline_subsets.json", {"spec": spec.to_dict(), "subsets": [s.tolist() for s in sets]})
    write_table(out / "baseline.csv", report.baseline)
    keys = ("cp", "whole_cv_accuracy", "mean_cv_accuracy", "baseline_mean_cv_accuracy",
            "mean_node_count", "baseline_mean_node_count")
    write_table(out / "baseline_summary.csv", [{k: row[k] for k in keys} for row in report.summary])
    write_table(out / "plot_baseline_overlay.csv", report.plot_series()["plot_baseline_overlay.csv"])
    write_manifest(out, "baseline", cfg, dataset.content_hash())


HANDLERS = {"synth": cmd_synth, "discover": cmd_discover, "report": cmd_report, "baseline": cmd_baseline}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DatasetError, json.JSONDecodeError, csv.Error) as exc:
        print(f"input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, EvalError, TreeError, KnnError) as exc:
        print(f"contract error: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK
