"""Command-line front-end for the robust adaptation pipeline.

Every command reads one flat ``key = value`` config (``--config=PATH``),
applies ``--key=value`` overrides, writes its artifacts into ``out_dir``
and a ``manifest_<command>.json`` with the config hash, the seeds and a
timestamp. Typical run::

    robust-uda synth --out_dir=run
    robust-uda subsample --out_dir=run
    robust-uda fit-cond --out_dir=run
    robust-uda train --out_dir=run --eps1=0.4 --eps2=0.2
    robust-uda eval --out_dir=run
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .conditionals import fit_ensemble, load_ensemble, save_ensemble
from .dataset import (
    LabeledSet,
    PseudoSourcePlan,
    Standardizer,
    UnlabeledSet,
    load_features,
    load_labels,
    make_pseudo_sources,
    save_features,
    save_labels,
    spurious_benchmark,
    synth_generate,
)
from .selection import GridSpec, select_k, sweep_heatmap
from .trainer import AmbiguityConfig, TrainConfig, evaluate, load_classifier, save_classifier, train, write_trace_csv

EXIT_USAGE = 2
EXIT_RUNTIME = 1


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    parse: object
    default: str
    help: str
    path: bool = False
    seed: bool = False


# Documented config keys. Defaults are strings so that the config file, the
# command line and the defaults go through the same parser.
KEYS: dict[str, Key] = {
    "out_dir": Key(str, "out", "directory for all artifacts", path=True),
    "source_features": Key(str, "", "source feature file (default <out_dir>/source_features.bin)", path=True),
    "source_labels": Key(str, "", "source label file (default <out_dir>/source_labels.txt)", path=True),
    "target_features": Key(str, "", "target feature file (default <out_dir>/target_features.bin)", path=True),
    "target_labels": Key(str, "", "target truth labels, eval/sweep only (default <out_dir>/target_labels.txt)", path=True),
    "class_count": Key(int, "2", "number of classes, declared explicitly"),
    "standardize": Key(_bool, "false", "z-score features with source statistics"),
    "synth_seed": Key(int, "0", "seed of the synthetic benchmark", seed=True),
    "n_source": Key(int, "400", "synthetic source size"),
    "n_target": Key(int, "400", "synthetic target size"),
    "K": Key(int, "10", "number of pseudo-sources"),
    "fraction": Key(float, "0.2", "pseudo-source size as a fraction of the source"),
    "plan_seed": Key(int, "0", "seed of the pseudo-source plan", seed=True),
    "lam": Key(float, "1e-4", "L2 penalty of the conditional logistic models"),
    "max_iters": Key(int, "2000", "iteration cap of the logistic fits"),
    "tol": Key(float, "1e-6", "gradient tolerance of the logistic fits"),
    "eps1": Key(float, "0.0", "covariate ball radius"),
    "eps2": Key(float, "0.0", "mixture-weight ball radius"),
    "beta_bar": Key(str, "uniform", "mixture-weight center: 'uniform' or comma-separated K weights"),
    "eta_z": Key(float, "20.0", "perturbation step size"),
    "eta_beta": Key(float, "10.0", "exponentiated-gradient step size"),
    "eta_theta": Key(float, "0.5", "classifier step size"),
    "epochs": Key(int, "30", "passes over the target"),
    "batch_size": Key(int, "32", "target minibatch size"),
    "pgd_steps": Key(int, "1", "ascent steps on the perturbation per iteration"),
    "train_seed": Key(int, "0", "seed of the minibatch order", seed=True),
    "eps1_grid": Key(_floats, "0,0.2,0.4,0.6,0.8,1", "sweep values of eps1"),
    "eps2_grid": Key(_floats, "0,0.2,0.4,0.6,1", "sweep values of eps2"),
    "sweep_seeds": Key(_ints, "0,1,2,3,4,5,6,7,8,9", "seeds of the sweep (plan and minibatch order)"),
    "k_candidates": Key(_ints, "2,3,4,5,6,7,8,9,10,11,12,13,14", "candidate K values for select-k"),
    "folds": Key(int, "5", "cross-validation folds for select-k"),
    "cv_seed": Key(int, "0", "seed of the select-k folds and plans", seed=True),
}


class UsageError(Exception):
    pass


def read_config_file(path) -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def resolve_config(file_values: dict[str, str], overrides: dict[str, str], seed: int | None) -> dict:
    raw = {k: spec.default for k, spec in KEYS.items()}
    for source in (file_values, overrides):
        for key, value in source.items():
            if key not in KEYS:
                raise UsageError(f"unknown config key {key!r}")
            raw[key] = value
    cfg = {}
    for key, spec in KEYS.items():
        try:
            cfg[key] = spec.parse(raw[key])
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {exc}") from exc
    if seed is not None:
        for key, spec in KEYS.items():
            if spec.seed:
                cfg[key] = seed
    out = Path(cfg["out_dir"])
    for key, name in (
        ("source_features", "source_features.bin"),
        ("source_labels", "source_labels.txt"),
        ("target_features", "target_features.bin"),
        ("target_labels", "target_labels.txt"),
    ):
        if not cfg[key]:
            cfg[key] = str(out / name)
    return cfg


def config_hash(cfg: dict) -> str:
    """SHA-256 of the canonical JSON of every non-path key."""
    canon = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items() if not KEYS[k].path}
    return hashlib.sha256(json.dumps(canon, sort_keys=True).encode()).hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def write_manifest(cfg: dict, command: str, artifacts: list[str]) -> None:
    out = Path(cfg["out_dir"])
    _dump_json(
        out / f"manifest_{command}.json",
        {
            "command": command,
            "config_hash": config_hash(cfg),
            "seeds": {k: cfg[k] for k, spec in KEYS.items() if spec.seed},
            "artifacts": artifacts,
            "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.items()},
            "timestamp": datetime.now(timezone.utc).isoformat(),
        },
    )


# ---------------------------------------------------------------------------
# Data loading shared by the commands
# ---------------------------------------------------------------------------


def _require(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _load_inputs(cfg: dict, need_truth: bool = False):
    xs = load_features(_require(cfg["source_features"], "source features"))
    ys = load_labels(_require(cfg["source_labels"], "source labels"))
    xt = load_features(_require(cfg["target_features"], "target features"))
    if cfg["standardize"]:
        st = Standardizer.fit(xs)
        xs, xt = st.transform(xs), st.transform(xt)
    C = cfg["class_count"]
    source = LabeledSet(xs, ys, C)
    target = UnlabeledSet(xt)
    truth = None
    if need_truth:
        truth = LabeledSet(xt, load_labels(_require(cfg["target_labels"], "target labels")), C)
    return source, target, truth


def _load_plan(cfg: dict) -> PseudoSourcePlan:
    d = json.loads(_require(Path(cfg["out_dir"]) / "plan.json", "plan").read_text())
    d.pop("config_hash", None)
    return PseudoSourcePlan.from_json(json.dumps(d))


def _beta_bar(cfg: dict, K: int) -> np.ndarray:
    if cfg["beta_bar"].strip().lower() == "uniform":
        return np.full(K, 1.0 / K)
    bb = np.array(_floats(cfg["beta_bar"]))
    if bb.shape != (K,):
        raise ValueError(f"beta_bar has {bb.size} entries, plan has K={K}")
    return bb


def _train_config(cfg: dict, seed_key: str = "train_seed") -> TrainConfig:
    return TrainConfig(
        eta_z=cfg["eta_z"],
        eta_beta=cfg["eta_beta"],
        eta_theta=cfg["eta_theta"],
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        pgd_steps=cfg["pgd_steps"],
        seed=cfg[seed_key],
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(cfg: dict) -> list[str]:
    spec = spurious_benchmark(seed=cfg["synth_seed"], n_source=cfg["n_source"], n_target=cfg["n_target"])
    source, target, truth = synth_generate(spec)
    save_features(cfg["source_features"], source.features)
    save_labels(cfg["source_labels"], source.labels)
    save_features(cfg["target_features"], target.features)
    save_labels(cfg["target_labels"], truth.labels)
    return [cfg["source_features"], cfg["source_labels"], cfg["target_features"], cfg["target_labels"]]


def cmd_subsample(cfg: dict) -> list[str]:
    n = load_labels(_require(cfg["source_labels"], "source labels")).shape[0]
    plan = make_pseudo_sources(n, cfg["K"], cfg["fraction"], cfg["plan_seed"])
    d = json.loads(plan.to_json())
    d["config_hash"] = config_hash(cfg)
    path = Path(cfg["out_dir"]) / "plan.json"
    path.write_text(json.dumps(d, sort_keys=True) + "\n")
    return [str(path)]


def cmd_fit_cond(cfg: dict) -> list[str]:
    source, _, _ = _load_inputs(cfg)
    ens = fit_ensemble(source, _load_plan(cfg), cfg["lam"], cfg["max_iters"], cfg["tol"])
    path = Path(cfg["out_dir"]) / "ensemble.drlc"
    save_ensemble(path, ens, config_hash(cfg))
    return [str(path)]


def cmd_train(cfg: dict) -> list[str]:
    _, target, _ = _load_inputs(cfg)
    ens, _ = load_ensemble(_require(Path(cfg["out_dir"]) / "ensemble.drlc", "ensemble"))
    amb = AmbiguityConfig(cfg["eps1"], cfg["eps2"], _beta_bar(cfg, ens.K))
    theta, trace = train(ens, target, amb, _train_config(cfg))
    out = Path(cfg["out_dir"])
    save_classifier(out / "classifier.drlc", theta, config_hash(cfg))
    write_trace_csv(out / "trace.csv", trace)
    return [str(out / "classifier.drlc"), str(out / "trace.csv")]


def cmd_eval(cfg: dict) -> list[str]:
    _, _, truth = _load_inputs(cfg, need_truth=True)
    out = Path(cfg["out_dir"])
    theta, _ = load_classifier(_require(out / "classifier.drlc", "classifier"))
    if theta.feature_dim != truth.dim or theta.class_count != truth.class_count:
        raise ValueError(
            f"classifier (d={theta.feature_dim}, C={theta.class_count}) does not match "
            f"data (d={truth.dim}, C={truth.class_count})"
        )
    if (out / "ensemble.drlc").exists():
        ens, _ = load_ensemble(out / "ensemble.drlc")
        if ens.feature_dim != truth.dim or ens.class_count != truth.class_count:
            raise ValueError(
                f"ensemble (d={ens.feature_dim}, C={ens.class_count}) does not match "
                f"data (d={truth.dim}, C={truth.class_count})"
            )
    metrics = evaluate(theta, truth)
    _dump_json(out / "metrics.json", metrics.to_dict(config_hash(cfg)))
    return [str(out / "metrics.json")]


def cmd_sweep(cfg: dict) -> list[str]:
    source, target, truth = _load_inputs(cfg, need_truth=True)
    grid = GridSpec(cfg["eps1_grid"], cfg["eps2_grid"])
    bb = None if cfg["beta_bar"].strip().lower() == "uniform" else _beta_bar(cfg, cfg["K"])
    result = sweep_heatmap(
        grid, cfg["sweep_seeds"], source, target, truth, _train_config(cfg),
        cfg["K"], cfg["fraction"], cfg["lam"], cfg["max_iters"], cfg["tol"], bb,
    )
    path = Path(cfg["out_dir"]) / "heatmap.csv"
    path.write_text(result.to_csv())
    return [str(path)]


def cmd_select_k(cfg: dict) -> list[str]:
    source, _, _ = _load_inputs(cfg)
    k = select_k(
        source, cfg["k_candidates"], cfg["folds"], cfg["cv_seed"], cfg["fraction"],
        cfg["lam"], cfg["max_iters"], cfg["tol"],
    )
    path = Path(cfg["out_dir"]) / "select_k.json"
    _dump_json(path, {"K": k, "k_candidates": list(cfg["k_candidates"]), "config_hash": config_hash(cfg)})
    return [str(path)]


COMMANDS = {
    "synth": (cmd_synth, "generate the bundled spurious-correlation benchmark"),
    "subsample": (cmd_subsample, "draw the pseudo-source plan"),
    "fit-cond": (cmd_fit_cond, "fit one conditional model per pseudo-source"),
    "train": (cmd_train, "robust training of the linear head on the target"),
    "eval": (cmd_eval, "target accuracy of the trained head"),
    "sweep": (cmd_sweep, "test-accuracy heatmap over the (eps1, eps2) grid"),
    "select-k": (cmd_select_k, "choose K by cross-validation on the source"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="robust-uda", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    epilog = "config keys:\n" + "\n".join(f"  {k:<16} {v.help} (default {v.default!r})" for k, v in KEYS.items())
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override every seed in the config")
    return parser


def _emit_error(kind: str, command: str | None, message: str) -> None:
    print(json.dumps({"error": kind, "command": command, "message": message}, sort_keys=True), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        overrides = {}
        for item in extra:
            if not item.startswith("--") or "=" not in item:
                raise UsageError(f"unrecognized argument {item!r}; overrides take the form --key=value")
            key, value = item[2:].split("=", 1)
            overrides[key] = value
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, overrides, args.seed)
    except (UsageError, OSError) as exc:
        _emit_error("usage", args.command, str(exc))
        return EXIT_USAGE

    func = COMMANDS[args.command][0]
    try:
        Path(cfg["out_dir"]).mkdir(parents=True, exist_ok=True)
        artifacts = func(cfg)
        write_manifest(cfg, args.command.replace("-", "_"), artifacts)
    except Exception as exc:  # runtime failures become one machine-readable line
        _emit_error(type(exc).__name__, args.command, str(exc))
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
