"""Command-line experiment runner.

Every verb reads an optional JSON config (``--config``), validates it before
any computation, runs, and writes ``results.csv`` plus ``report.json`` into
``--out``.  The report echoes the config, seed, build id and conventions.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dynsys, experiments, sampling, svcca
from .errors import CheckpointError, ContractError, DegenerateBatchError, IterationLimitError, \
    NumericalError
from .iresnet import IResNet
from .trainer import TrainConfig, train

log = logging.getLogger("orbitalign")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

VERB_KEYS = {
    "align": {"f", "g", "p", "q", "save_nets"},
    "suite": {"system", "case", "replicates", "dim", "k", "identity"},
    "sign-grid": {"dim", "groups", "pairs"},
    "matrix": {"models", "model_dir", "sampler", "svcca"},
    "svcca": {"f", "g", "trials", "init_seed", "dt", "horizon", "sigma"},
    "dump-grid": {"field", "grid", "net", "target", "trajectories"},
    "invert-check": {"net", "warp", "count", "tol", "max_iter", "scale"},
}
COMMON_KEYS = {"experiment", "seed", "train", "workers"}
EXPERIMENT_NAMES = {
    "align": "conjugate-pair", "suite": None, "sign-grid": "sign-grid",
    "matrix": "pairwise-matrix", "svcca": "svcca-compare", "dump-grid": "field-grid-dump",
    "invert-check": "invert-check",
}
DEFAULT_BATCHES = {"suite": 2000, "sign-grid": 1500, "matrix": 6000, "align": 2000}
NUMERICAL_ERRORS = (NumericalError, IterationLimitError, DegenerateBatchError)


class ConfigError(ContractError):
    pass


# -- config handling -------------------------------------------------------------

def load_config(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def validate(verb, cfg):
    unknown = set(cfg) - COMMON_KEYS - VERB_KEYS[verb]
    if unknown:
        raise ConfigError(f"unknown config keys for {verb!r}: {sorted(unknown)}")
    expected = EXPERIMENT_NAMES[verb]
    exp = cfg.get("experiment")
    if verb == "suite":
        if exp not in (None, "conjugate-pair", "linear-equivalence-class"):
            raise ConfigError(f"suite runs conjugate-pair or linear-equivalence-class, not {exp!r}")
        if ("system" in cfg) == ("case" in cfg):
            raise ConfigError("suite needs exactly one of 'system' or 'case'")
        if "case" in cfg and cfg["case"] not in experiments.LINEAR_CASES:
            raise ConfigError(f"unknown linear case {cfg['case']!r}")
        if "system" in cfg and cfg["system"] not in ("VanDerPol", "Pitchfork", "LowRankRNN"):
            raise ConfigError(f"unknown conjugate system {cfg['system']!r}")
    elif exp is not None and exp != expected:
        raise ConfigError(f"config experiment {exp!r} does not match verb {verb!r}")
    train_cfg = cfg.get("train", {})
    if not isinstance(train_cfg, dict):
        raise ConfigError("'train' must be an object")
    known = {f.name for f in fields(TrainConfig)}
    bad = set(train_cfg) - known
    if bad:
        raise ConfigError(f"unknown train keys: {sorted(bad)}")
    if verb == "align":
        for key in ("f", "g"):
            if key not in cfg:
                raise ConfigError(f"align needs {key!r}")
    if verb == "svcca" and ("f" not in cfg or "g" not in cfg):
        raise ConfigError("svcca needs 'f' and 'g'")
    if verb == "dump-grid" and "field" not in cfg:
        raise ConfigError("dump-grid needs 'field'")
    if verb == "matrix" and ("models" in cfg) == ("model_dir" in cfg):
        raise ConfigError("matrix needs exactly one of 'models' or 'model_dir'")


def train_config(verb, cfg, seed):
    base = {"batches": DEFAULT_BATCHES.get(verb, 2000)}
    if verb == "suite" and "case" in cfg:
        base["batches"] = 3000
    if verb == "suite" and cfg.get("system") == "LowRankRNN":
        base["batches"] = 6000
    base.update(cfg.get("train", {}))
    base["seed"] = seed
    try:
        return TrainConfig(**base)
    except TypeError as exc:
        raise ConfigError(f"train config: {exc}") from None


def apply_paper_scale(verb, cfg):
    cfg = dict(cfg)
    if verb == "suite":
        key = "conjugate-pair" if "system" in cfg else "linear-equivalence-class"
        scale = dict(experiments.PAPER_SCALE[key])
        if key == "conjugate-pair" and cfg.get("system") != "LowRankRNN":
            scale.pop("dim")
        for k, v in scale.items():
            cfg[k] = v
    elif verb == "sign-grid":
        cfg.update(experiments.PAPER_SCALE["sign-grid"])
    return cfg


# -- outputs ------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, NaN/inf to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: (None if k in ("wall_seconds", "wall_ms") else _strip_timing(v))
                for k, v in obj.items()}
    if isinstance(obj, list):
        return [_strip_timing(v) for v in obj]
    return obj


def write_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=experiments.CSV_COLUMNS, extrasaction="ignore",
                           lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else (repr(row[k]) if isinstance(row[k], float)
                                                          else row[k]))
                        for k in experiments.CSV_COLUMNS})


def write_matrix(path, matrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in matrix:
            w.writerow(["" if v is None or not math.isfinite(v) else repr(float(v)) for v in row])


def write_report(out, verb, cfg, seed, result, timing):
    report = {
        "verb": verb,
        "config": cfg,
        "seed": seed,
        "build_id": experiments.build_id(),
        "conventions": experiments.conventions(),
        **result,
    }
    if not timing:
        report = _strip_timing(report)
    (out / "report.json").write_text(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n")


# -- verbs ----------------------------------------------------------------------

def _field(spec, what):
    if not isinstance(spec, dict):
        raise ConfigError(f"{what}: field spec must be an object")
    try:
        return dynsys.field_from_spec(spec)
    except KeyError as exc:
        raise ConfigError(f"{what}: missing key {exc}") from None


def _sampler(spec, field, what):
    if spec is None:
        return sampling.Gaussian.standard(field.dim)
    try:
        return sampling.sampler_from_spec(spec, field)
    except KeyError as exc:
        raise ConfigError(f"{what}: missing key {exc}") from None


def run_align(cfg, seed, tc, out, workers):
    f, g = _field(cfg["f"], "f"), _field(cfg["g"], "g")
    if f.dim != g.dim:
        raise ConfigError(f"f and g have different dimensions ({f.dim} vs {g.dim})")
    p = _sampler(cfg.get("p"), f, "p")
    q = _sampler(cfg.get("q"), g, "q")
    loss_log = []
    phi, psi, run = train(f, g, p, q, tc, loss_log=loss_log)
    with open(out / "train_log.jsonl", "w") as fh:
        for entry in loss_log:
            fh.write(json.dumps(entry) + "\n")
    if cfg.get("save_nets", True):
        phi.save(out / "phi.json")
        psi.save(out / "psi.json")
    row = {"experiment": "align", "i": 0, "j": 0, "seed": seed,
           "sim_forward": run.final["sim_forward"], "sim_backward": run.final["sim_backward"],
           "similarity": run.similarity, "batches": tc.batches, "restarts": tc.restarts,
           "wall_ms": int(round(run.wall_seconds * 1000))}
    return [row], {"run": run.as_dict()}


def run_suite(cfg, seed, tc, out, workers):
    reps = int(cfg.get("replicates", 5))
    if "system" in cfg:
        res = experiments.run_conjugate_suite(cfg["system"], reps, tc, seed, dim=int(cfg.get("dim", 16)),
                                              k=int(cfg.get("k", 2)),
                                              identity=bool(cfg.get("identity", False)),
                                              workers=workers)
    else:
        res = experiments.run_linear_class(cfg["case"], reps, int(cfg.get("dim", 8)), tc, seed,
                                           workers=workers)
    return res["rows"], {"summary": res["summary"], "details": res["details"]}


def run_sign(cfg, seed, tc, out, workers):
    res = experiments.run_sign_grid(int(cfg.get("dim", 8)), int(cfg.get("groups", 5)),
                                    int(cfg.get("pairs", 3)), tc, seed, workers=workers)
    write_matrix(out / "matrix.csv", res["matrix"])
    extra = {k: res[k] for k in ("matrix", "positive_counts", "by_proportion", "details")}
    return res["rows"], extra


def run_matrix(cfg, seed, tc, out, workers):
    names, models = [], []
    if "models" in cfg:
        for i, spec in enumerate(cfg["models"]):
            names.append(spec.get("name", f"model{i}"))
            models.append(_field(spec, f"models[{i}]"))
    else:
        for path in sorted(Path(cfg["model_dir"]).glob("*.json")):
            try:
                models.append(dynsys.load_rnn_weights(path))
                names.append(path.stem)
            except (CheckpointError, ValueError) as exc:
                log.warning("skipping %s: %s", path, exc)
    if len(models) < 1:
        raise ConfigError("no usable models")
    if len({m.dim for m in models}) != 1:
        raise ConfigError("models have different dimensions")
    res = experiments.run_pairwise_matrix(models, tc, seed, sampler=cfg.get("sampler"),
                                          svcca_opts=cfg.get("svcca"), workers=workers)
    write_matrix(out / "dform.csv", res["dform"])
    write_matrix(out / "svcca.csv", res["svcca"])
    return res["rows"], {"models": names, "dform": res["dform"], "svcca": res["svcca"],
                         "details": res["details"]}


def run_svcca(cfg, seed, tc, out, workers):
    f, g = _field(cfg["f"], "f"), _field(cfg["g"], "g")
    rng = np.random.default_rng(cfg.get("init_seed", seed))
    init = rng.standard_normal((int(cfg.get("trials", 100)), f.dim))
    val, ea, eb = svcca.compare_fields(f, g, init, float(cfg.get("dt", 0.05)),
                                       float(cfg.get("horizon", 10.0)), float(cfg.get("sigma", 0.0)),
                                       seed)
    ea.to_csv(out / "ensemble_f.csv")
    eb.to_csv(out / "ensemble_g.csv")
    row = {"experiment": "svcca-compare", "i": 0, "j": 1, "seed": seed, "sim_forward": val,
           "sim_backward": val, "similarity": val, "batches": 0, "restarts": 0, "wall_ms": 0}
    return [row], {"svcca": val}


def run_dump(cfg, seed, tc, out, workers):
    f = _field(cfg["field"], "field")
    grid = cfg.get("grid", {"low": [-3.0, -3.0], "high": [3.0, 3.0], "num": [21, 21]})
    net = None
    if cfg.get("net"):
        net = IResNet.load(cfg["net"])
    target = _field(cfg["target"], "target") if cfg.get("target") else None
    data = experiments.dump_field_grid(f, grid, net, target, cfg.get("trajectories"))
    (out / "grid.json").write_text(json.dumps(_clean(data)) + "\n")
    return [], {"grid_file": "grid.json", "points": len(data["points"])}


def run_invert(cfg, seed, tc, out, workers):
    if cfg.get("net"):
        net = IResNet.load(cfg["net"])
    else:
        w = {"dim": 8, "layers": 10, "cap": 0.99, **cfg.get("warp", {})}
        net = experiments.random_warp(int(w["dim"]), int(w["layers"]), float(w["cap"]), seed,
                                      float(w.get("scale", 1.0)))
    res = experiments.invert_check(net, int(cfg.get("count", 100)), seed, float(cfg.get("tol", 1e-10)),
                                   int(cfg.get("max_iter", 100)), float(cfg.get("scale", 1.0)))
    return [], {"invert_check": res}


VERBS = {
    "align": run_align, "suite": run_suite, "sign-grid": run_sign, "matrix": run_matrix,
    "svcca": run_svcca, "dump-grid": run_dump, "invert-check": run_invert,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="orbitalign",
                                     description="Align dynamical systems with invertible networks.")
    parser.add_argument("verb", choices=sorted(VERBS))
    parser.add_argument("--config", help="JSON experiment config")
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--seed", type=int, help="overrides the config seed")
    parser.add_argument("--workers", type=int, help="parallel worker processes")
    parser.add_argument("--paper-scale", action="store_true",
                        help="use the original dimensions and replicate counts")
    parser.add_argument("--no-timing", action="store_true",
                        help="omit wall-clock fields so reruns are byte-identical")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    verb = args.verb
    try:
        cfg = load_config(args.config)
        validate(verb, cfg)
        if args.paper_scale:
            cfg = apply_paper_scale(verb, cfg)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        workers = args.workers if args.workers is not None else int(cfg.get("workers", 1))
        if workers < 1:
            raise ConfigError("workers must be >= 1")
        tc = train_config(verb, cfg, seed)
        cfg = {**cfg, "seed": seed}
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rows, result = VERBS[verb](cfg, seed, tc, out, workers)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ContractError, CheckpointError, ValueError, KeyError, TypeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.no_timing:
        rows = [{**r, "wall_ms": None} for r in rows]
    if rows or verb in ("align", "suite", "sign-grid", "matrix", "svcca"):
        write_csv(out / "results.csv", rows)
    write_report(out, verb, cfg, seed, {"train_config": tc.as_dict(), "rows": rows, **result},
                 timing=not args.no_timing)
    failed = [r for r in rows if not math.isfinite(r.get("similarity", 0.0))]
    if rows and len(failed) == len(rows):
        print("numerical failure: every run failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
