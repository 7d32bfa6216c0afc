"""Command-line surface for the toolkit.

Subcommands: synth, train-erm, train-gdro, adapt-leia, eval, pipeline,
sweep, cev, project. Every subcommand accepts --config <json> whose keys
mirror the flags; explicit flags override file keys, and unknown keys are
rejected. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

from . import adapt, heads, metrics, workflows
from .data import (
    DataFormatError,
    SplitSpec,
    SyntheticConfig,
    generate_synthetic,
    read_dataset,
    split_dataset,
    write_dataset,
)
from .linalg import NumericalError

__all__ = ["main", "entry", "ConfigError"]

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(ValueError):
    """Invalid flags, config keys, or option values."""


# Per-command option defaults. None marks a required option; the merge
# order is defaults < config file < explicit flags.
_COMMON = {"config": "", "seed": 0, "out": None, "format": "binary"}

_GENERATOR_KEYS = {
    "n_known": 2, "rho": 0.1, "samples_per_group": 1000, "stable_dim": 5,
    "signal_strength": 1.5, "label_noise_sd": 0.8, "spurious_noise_sd": 0.5,
    "unknown_corr_strength": 4.5, "unknown_anticorr_strength": 3.0,
    "known_corr_strength": 4.0, "known_anticorr_strength": 3.0,
}

_TRAIN_KEYS = {
    "train": None, "val": "", "regime": "no_group_info", "known_groups": "",
    "lr": 0.01, "epochs": 100, "momentum": 0.9, "l2": 0.0,
}

COMMAND_DEFAULTS: dict[str, dict] = {
    "synth": {**_COMMON, **_GENERATOR_KEYS},
    "train-erm": {**_COMMON, **_TRAIN_KEYS},
    "train-gdro": {**_COMMON, **_TRAIN_KEYS, "eta": 0.01},
    "adapt-leia": {
        **_COMMON, "adapt": None, "head": None, "gamma": 100.0, "rank": 1,
        "variant": "one_minus_p", "lr": 0.02, "epochs": 100, "reg": 0.0,
        "val": "", "regime": "no_group_info", "known_groups": "",
    },
    "eval": {**_COMMON, "data": None, "head": "", "model": "", "out": ""},
    "pipeline": {
        **_COMMON, "train": None, "test": None, "val": "",
        "regime": "", "known_groups": "", "erm_fraction": 0.8,
        "gamma": 100.0, "rank": 1, "variant": "one_minus_p",
        "erm_lr": 0.01, "erm_epochs": 100, "momentum": 0.9, "l2": 0.0,
        "leia_lr": 0.02, "leia_epochs": 100, "reg": 0.0,
    },
    "sweep": {
        **_COMMON, "n_known": "1,2,3,4", "rho": "0.1,0.2,0.3",
        "seeds": "0,1,42", "samples_per_group": 1000,
        "gamma": 100.0, "rank": 1, "variant": "one_minus_p",
        "erm_lr": 0.01, "erm_epochs": 100, "momentum": 0.9, "eta": 0.01,
        "leia_lr": 0.02, "leia_epochs": 100, "reg": 0.0, "erm_fraction": 0.8,
    },
    "cev": {**_COMMON, "data": None, "head": None, "gamma": 100.0,
            "variant": "one_minus_p", "band_low": 0.5, "band_high": 0.9},
    "project": {**_COMMON, "data": None, "head": None, "gamma": 100.0,
                "variant": "one_minus_p", "dims": 3},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leia",
        description="Group-robust last-layer adaptation on frozen embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, defaults in COMMAND_DEFAULTS.items():
        p = sub.add_parser(command)
        for key, default in defaults.items():
            flag = "--" + key.replace("_", "-")
            if isinstance(default, int) and not isinstance(default, bool):
                p.add_argument(flag, type=int, default=None)
            elif isinstance(default, float):
                p.add_argument(flag, type=float, default=None)
            else:
                p.add_argument(flag, type=str, default=None)
    return parser


def merge_config(command: str, ns: argparse.Namespace) -> dict:
    cfg = dict(COMMAND_DEFAULTS[command])
    config_path = getattr(ns, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ConfigError(
                f"unknown config key(s) for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in COMMAND_DEFAULTS[command]:
        value = getattr(ns, key, None)
        if value is not None:
            cfg[key] = value
    missing = [k for k, v in cfg.items() if v is None]
    if missing:
        raise ConfigError(
            f"missing required option(s) for {command}: "
            + ", ".join("--" + k.replace("_", "-") for k in sorted(missing)))
    if cfg.get("format") not in (None, "binary", "tsv"):
        raise ConfigError(f"format must be 'binary' or 'tsv', got {cfg['format']!r}")
    return cfg


def _int_list(value, name: str) -> list[int]:
    if isinstance(value, list):
        return [int(v) for v in value]
    try:
        return [int(part) for part in str(value).split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"{name} must be a comma-separated integer list: {exc}")


def _float_list(value, name: str) -> list[float]:
    if isinstance(value, list):
        return [float(v) for v in value]
    try:
        return [float(part) for part in str(value).split(",") if part.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"{name} must be a comma-separated float list: {exc}")


def _out_dir(cfg) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ext(cfg) -> str:
    return "lemb" if cfg["format"] == "binary" else "tsv"


def _regime(cfg) -> Optional[metrics.SelectionRegime]:
    kind = cfg.get("regime") or ""
    if not kind:
        return None
    known = _int_list(cfg.get("known_groups") or "", "known_groups")
    return metrics.SelectionRegime(kind=kind, known_groups=tuple(known) or None)


def _validation(cfg, fmt: str) -> Optional[heads.Validation]:
    if not cfg.get("val"):
        return None
    regime = _regime(cfg) or metrics.SelectionRegime(kind="no_group_info")
    val_set = read_dataset(cfg["val"], fmt)
    return (val_set,
            lambda logits, ds: metrics.selection_criterion(regime, logits, ds))


def cmd_synth(cfg: dict) -> int:
    gen = SyntheticConfig(
        num_known_groups=int(cfg["n_known"]), unknown_ratio=float(cfg["rho"]),
        samples_per_known_group=int(cfg["samples_per_group"]),
        stable_dim=int(cfg["stable_dim"]),
        signal_strength=float(cfg["signal_strength"]),
        label_noise_sd=float(cfg["label_noise_sd"]),
        spurious_noise_sd=float(cfg["spurious_noise_sd"]),
        unknown_corr_strength=float(cfg["unknown_corr_strength"]),
        unknown_anticorr_strength=float(cfg["unknown_anticorr_strength"]),
        known_corr_strength=float(cfg["known_corr_strength"]),
        known_anticorr_strength=float(cfg["known_anticorr_strength"]),
        seed=int(cfg["seed"]))
    dataset = generate_synthetic(gen)
    parts = split_dataset(dataset, SplitSpec(
        fractions=[("train", 0.6), ("val", 0.2), ("test", 0.2)],
        seed=workflows.derive_seed(int(cfg["seed"]), "synth-split")))
    out = _out_dir(cfg)
    for name, part in parts.items():
        write_dataset(part, out / f"{name}.{_ext(cfg)}", cfg["format"])
    print(f"wrote {', '.join(f'{name}.{_ext(cfg)} (n={p.n})' for name, p in parts.items())} to {out}")
    return EXIT_OK


def _write_history(trained: heads.TrainedHead, path: Path) -> None:
    lines = ["epoch,loss,criterion"]
    for i, rec in enumerate(trained.history):
        crit = "" if rec.criterion is None else f"{rec.criterion:.17g}"
        lines.append(f"{i},{rec.loss:.17g},{crit}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train_erm(cfg: dict) -> int:
    train = read_dataset(cfg["train"], cfg["format"])
    trained = heads.train_erm(
        train,
        heads.TrainConfig(learning_rate=float(cfg["lr"]), epochs=int(cfg["epochs"]),
                          l2_penalty=float(cfg["l2"]), seed=int(cfg["seed"]),
                          momentum=float(cfg["momentum"])),
        _validation(cfg, cfg["format"]))
    out = _out_dir(cfg)
    heads.write_head(trained.head, out / "head.tsv")
    _write_history(trained, out / "history.csv")
    print(f"wrote head.tsv and history.csv to {out}"
          + (f" (best epoch {trained.best_epoch})" if trained.best_epoch is not None else ""))
    return EXIT_OK


def cmd_train_gdro(cfg: dict) -> int:
    train = read_dataset(cfg["train"], cfg["format"])
    if cfg.get("known_groups"):
        known = tuple(_int_list(cfg["known_groups"], "known_groups"))
    else:
        # group 0 is the latent-group convention; withhold it by default
        known = tuple(range(1, train.num_groups))
    gdro_cfg = heads.GdroConfig(
        base=heads.TrainConfig(learning_rate=float(cfg["lr"]),
                               epochs=int(cfg["epochs"]),
                               l2_penalty=float(cfg["l2"]), seed=int(cfg["seed"]),
                               momentum=float(cfg["momentum"])),
        known_groups=known, eta=float(cfg["eta"]))
    val_cfg = dict(cfg)
    if val_cfg.get("val") and val_cfg.get("regime") == "partial" and not val_cfg.get("known_groups"):
        val_cfg["known_groups"] = ",".join(str(g) for g in known)
    trained = heads.train_gdro(train, gdro_cfg, _validation(val_cfg, cfg["format"]))
    out = _out_dir(cfg)
    heads.write_head(trained.head, out / "head.tsv")
    _write_history(trained, out / "history.csv")
    print(f"wrote head.tsv and history.csv to {out}")
    return EXIT_OK


def cmd_adapt_leia(cfg: dict) -> int:
    adapt_set = read_dataset(cfg["adapt"], cfg["format"])
    head = heads.read_head(cfg["head"])
    leia_cfg = adapt.LeiaConfig(
        gamma=float(cfg["gamma"]), rank=int(cfg["rank"]),
        weight_variant=cfg["variant"], learning_rate=float(cfg["lr"]),
        epochs=int(cfg["epochs"]), reg_coeff=float(cfg["reg"]))
    if leia_cfg.rank > adapt_set.dim:
        raise ConfigError(
            f"rank {leia_cfg.rank} exceeds embedding dim {adapt_set.dim}")
    model, _ = workflows.adapt_head(head, adapt_set, leia_cfg,
                                    _validation(cfg, cfg["format"]))
    out = _out_dir(cfg)
    adapt.write_model(model, out / "model.tsv")
    print(f"wrote model.tsv to {out}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    dataset = read_dataset(cfg["data"], cfg["format"])
    if cfg.get("head") and cfg.get("model"):
        raise ConfigError("pass either --head or --model, not both")
    if not cfg.get("head") and not cfg.get("model"):
        # no model: validate the file and report its header counts
        text = (f'{{"n": {dataset.n}, "dim": {dataset.dim}, '
                f'"num_classes": {dataset.num_classes}, '
                f'"num_groups": {dataset.num_groups}}}')
    else:
        if cfg.get("head"):
            head = heads.read_head(cfg["head"])
            logits = heads.predict_logits(head, dataset.embeddings)
        else:
            model = adapt.read_model(cfg["model"])
            logits = adapt.leia_logits(model, dataset.embeddings)
        preds = metrics.predictions_from_logits(logits)
        text = metrics.metrics_to_json(metrics.per_group_metrics(preds, dataset))
    if cfg.get("out"):
        Path(cfg["out"]).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def cmd_pipeline(cfg: dict) -> int:
    stage = "load"
    try:
        train = read_dataset(cfg["train"], cfg["format"])
        test = read_dataset(cfg["test"], cfg["format"])
        val = read_dataset(cfg["val"], cfg["format"]) if cfg.get("val") else None
        params = workflows.BenchmarkParams(
            erm_learning_rate=float(cfg["erm_lr"]), erm_momentum=float(cfg["momentum"]),
            erm_epochs=int(cfg["erm_epochs"]), l2_penalty=float(cfg["l2"]),
            gamma=float(cfg["gamma"]), rank=int(cfg["rank"]),
            weight_variant=cfg["variant"], leia_learning_rate=float(cfg["leia_lr"]),
            leia_epochs=int(cfg["leia_epochs"]), reg_coeff=float(cfg["reg"]),
            erm_fraction=float(cfg["erm_fraction"]))
        regime = _regime(cfg)
        if val is not None and regime is None:
            regime = metrics.SelectionRegime(kind="no_group_info")
        stage = "pipeline"
        result = workflows.run_pipeline(train, test, val, seed=int(cfg["seed"]),
                                        params=params, regime=regime)
        stage = "write"
        out = _out_dir(cfg)
        heads.write_head(result.erm.head, out / "head.tsv")
        adapt.write_model(result.model, out / "model.tsv")
        (out / "metrics_base.json").write_text(
            metrics.metrics_to_json(result.base_metrics) + "\n", encoding="utf-8")
        (out / "metrics_adapted.json").write_text(
            metrics.metrics_to_json(result.adapted_metrics) + "\n", encoding="utf-8")
    except Exception as exc:
        exc.args = (f"[stage {stage}] {exc}",) + exc.args[1:]
        raise
    print(f"base wga {result.base_metrics.worst_group_accuracy:.6f} -> "
          f"adapted wga {result.adapted_metrics.worst_group_accuracy:.6f}; "
          f"outputs in {out}")
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    params = workflows.BenchmarkParams(
        erm_learning_rate=float(cfg["erm_lr"]), erm_momentum=float(cfg["momentum"]),
        erm_epochs=int(cfg["erm_epochs"]), eta=float(cfg["eta"]),
        gamma=float(cfg["gamma"]), rank=int(cfg["rank"]),
        weight_variant=cfg["variant"], leia_learning_rate=float(cfg["leia_lr"]),
        leia_epochs=int(cfg["leia_epochs"]), reg_coeff=float(cfg["reg"]),
        erm_fraction=float(cfg["erm_fraction"]),
        samples_per_known_group=int(cfg["samples_per_group"]))
    cells = workflows.run_sweep(
        _int_list(cfg["n_known"], "n_known"), _float_list(cfg["rho"], "rho"),
        _int_list(cfg["seeds"], "seeds"), master_seed=int(cfg["seed"]),
        params=params)
    out = _out_dir(cfg)
    (out / "sweep.json").write_text(workflows.sweep_to_json(cells) + "\n",
                                    encoding="utf-8")
    (out / "sweep.csv").write_text(workflows.sweep_to_csv(cells), encoding="utf-8")
    failed = [c for c in cells if c.error is not None]
    for c in failed:
        print(f"cell n_known={c.n_known} rho={c.rho}: {c.error}", file=sys.stderr)
    print(f"wrote sweep.json and sweep.csv ({len(cells)} cells) to {out}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_cev(cfg: dict) -> int:
    dataset = read_dataset(cfg["data"], cfg["format"])
    head = heads.read_head(cfg["head"])
    table = workflows.compute_cev_table(
        dataset, head, float(cfg["gamma"]), cfg["variant"],
        band_low=float(cfg["band_low"]), band_high=float(cfg["band_high"]))
    out = _out_dir(cfg)
    (out / "cev.csv").write_text(workflows.cev_to_csv(table), encoding="utf-8")
    band = ", ".join(str(k) for k in table.band_candidates)
    (out / "rank_band.json").write_text(
        f'{{"band_low": {table.band_low:.6f}, "band_high": {table.band_high:.6f}, '
        f'"candidates": [{band}]}}\n', encoding="utf-8")
    print(f"wrote cev.csv and rank_band.json to {out}")
    return EXIT_OK


def cmd_project(cfg: dict) -> int:
    dataset = read_dataset(cfg["data"], cfg["format"])
    head = heads.read_head(cfg["head"])
    dims = int(cfg["dims"])
    coords = workflows.project_coordinates(
        dataset, head, float(cfg["gamma"]), cfg["variant"], dims=dims)
    out = _out_dir(cfg)
    header = ",".join(f"c{i + 1}" for i in range(dims)) + ",label"
    if dataset.has_groups:
        header += ",group"
    lines = [header]
    for i in range(dataset.n):
        row = ",".join(f"{v:.9g}" for v in coords[i]) + f",{int(dataset.labels[i])}"
        if dataset.has_groups:
            row += f",{int(dataset.groups[i])}"
        lines.append(row)
    (out / "projection.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote projection.csv ({dataset.n} rows) to {out}")
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth,
    "train-erm": cmd_train_erm,
    "train-gdro": cmd_train_gdro,
    "adapt-leia": cmd_adapt_leia,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
    "sweep": cmd_sweep,
    "cev": cmd_cev,
    "project": cmd_project,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        cfg = merge_config(ns.command, ns)
        return HANDLERS[ns.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
