"""Command-line surface for batch experiments.

Subcommands: ``prepare`` (build a dataset from stage/rating/forcing files
or generate a synthetic family), ``train``, ``transfer``, ``evaluate``,
and ``suite`` (the full variant-by-seed comparison).  Configuration lives
in one declarative JSON file; flags override.  Outputs are byte-identical
across reruns with the same config and seeds; wall-clock metadata goes to
a ``run_meta.json`` sidecar only.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import data as dataio
from .data import (DataError, DateRange, DomainDataset, ParameterRanges,
                   STATIC_NAMES, SchemaError, availability_report,
                   fit_rating_curve, generate_synthetic_family, inject_gaps,
                   load_domain, make_samples, resample_daily, save_domain,
                   stage_to_discharge, write_availability_heatmap)
from .lstm import ModelConfig, ShapeMismatchError, load_checkpoint, save_checkpoint
from .metrics import MaskedSeries, SUMMARY_COLUMNS
from .training import (DivergenceError, TrainConfig, TrainingRun, evaluate,
                       train, write_training_log)
from .transfer import (TransferConfig, VARIANTS, run_variant_suite,
                       transfer_and_finetune, write_colormap,
                       write_hydrographs, write_summary_table)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

DATA_ROOT_ENV = "FLOWCAST_DATA_ROOT"


class ConfigError(ValueError):
    """The experiment configuration is missing, malformed, or inconsistent."""


# ---------------------------------------------------------------------------
# Configuration


def _load_config(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    cfg["_dir"] = str(p.parent)
    return cfg


def _resolve_path(raw: str, cfg: dict) -> Path:
    p = Path(raw)
    if p.is_absolute():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    base = Path(root) if root else Path(cfg.get("_dir", "."))
    return base / p


def _model_config(cfg: dict, use_static: Optional[bool] = None) -> ModelConfig:
    section = dict(cfg.get("model", {}))
    if use_static is not None:
        section["use_static"] = use_static
    static = bool(section.get("use_static", False))
    section.setdefault("input_dim", dataio.expected_input_dim(static))
    try:
        return ModelConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad model config: {exc}") from exc


def _train_config(cfg: dict, seed: Optional[int] = None) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    if seed is not None:
        section["seed"] = seed
    try:
        return TrainConfig(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def _transfer_config(cfg: dict, args) -> TransferConfig:
    section = dict(cfg.get("transfer", {}))
    finetune = section.pop("finetune", None)
    try:
        kwargs = dict(section)
        if finetune is not None:
            kwargs["finetune"] = TrainConfig(**finetune)
        else:
            kwargs.setdefault("finetune", _train_config(cfg))
        if getattr(args, "freeze_representation", False):
            kwargs["freeze_representation"] = True
        if getattr(args, "basin_selection", None):
            kwargs["basin_selection"] = args.basin_selection
        if getattr(args, "variant", None):
            kwargs["variant"] = args.variant
        return TransferConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad transfer config: {exc}") from exc


def _seeds(cfg: dict, args, default: Optional[List[int]] = None) -> List[int]:
    if getattr(args, "seeds", None):
        try:
            return [int(s) for s in args.seeds.split(",") if s.strip() != ""]
        except ValueError as exc:
            raise ConfigError(f"bad --seeds value {args.seeds!r}") from exc
    seeds = cfg.get("seeds", default if default is not None else [0])
    if not isinstance(seeds, list) or not seeds:
        raise ConfigError("config 'seeds' must be a non-empty list")
    try:
        return [int(s) for s in seeds]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config 'seeds' must be integers: {seeds!r}") from exc


def _dataset_path(cfg: dict, key: str, required: bool = True) -> Optional[Path]:
    raw = cfg.get("data", {}).get(key)
    if raw is None:
        if required:
            raise ConfigError(f"config data.{key} is required for this command")
        return None
    path = _resolve_path(raw, cfg)
    if not path.exists():
        raise ConfigError(f"data.{key} path does not exist: {path}")
    return path


def _out_dir(args) -> Path:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_meta(out_dir: Path, command: str) -> None:
    meta = {
        "command": command,
        "argv": sys.argv[1:],
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def _write_per_basin_nse(per_basin: Dict[str, float], path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["basin_id", "nse"])
        for basin_id in sorted(per_basin):
            writer.writerow([basin_id, repr(per_basin[basin_id])])


def _write_summary(summary, path: Path) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        if summary is not None:
            writer.writerow([repr(v) for v in summary.as_row()])


# ---------------------------------------------------------------------------
# prepare


def _read_table(path: Path, expected_header: tuple) -> List[List[str]]:
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != expected_header:
            raise DataError(f"{path}: expected columns {expected_header}, got {header}")
        return list(reader)


def _prepare_station(station: dict, cfg: dict) -> dataio.BasinRecord:
    basin_id = station.get("basin_id")
    if not basin_id:
        raise ConfigError("station entry missing basin_id")

    statics_cfg = station.get("static_attributes")
    if not isinstance(statics_cfg, dict):
        raise ConfigError(f"station {basin_id}: static_attributes must be a mapping")
    missing = [k for k in STATIC_NAMES if k not in statics_cfg]
    unknown = [k for k in statics_cfg if k not in STATIC_NAMES]
    if missing or unknown:
        raise SchemaError(
            f"station {basin_id}: static attributes missing {missing}, unknown {unknown}")
    statics = np.array([float(statics_cfg[k]) for k in STATIC_NAMES])

    rating_rows = _read_table(_resolve_path(station["rating_pairs_file"], cfg),
                              ("stage", "discharge"))
    pairs = [(float(r[0]), float(r[1])) for r in rating_rows]
    curve = fit_rating_curve(pairs)

    stage_rows = _read_table(_resolve_path(station["stage_file"], cfg),
                             ("timestamp", "stage"))
    timestamps = np.array([r[0] for r in stage_rows], dtype="datetime64[m]")
    stages = np.array([float(r[1]) for r in stage_rows])
    q_30min = stage_to_discharge(curve, stages)
    q_dates, q_daily = resample_daily(timestamps, q_30min)

    forcing_rows = _read_table(_resolve_path(station["forcings_file"], cfg),
                               ("date", *dataio.FORCING_NAMES))
    dates = np.array([r[0] for r in forcing_rows], dtype="datetime64[D]")
    forcings = np.zeros((len(forcing_rows), dataio.DYNAMIC_DIM))
    valid = np.ones(len(forcing_rows), dtype=bool)
    for i, row in enumerate(forcing_rows):
        cells = row[1:]
        if any(c == "" for c in cells):
            valid[i] = False
        else:
            forcings[i] = [float(c) for c in cells]

    # Align daily discharge onto the forcing calendar; days without a
    # resampled value stay masked.
    values = np.zeros(dates.size)
    mask = np.zeros(dates.size, dtype=bool)
    pos = np.searchsorted(dates, q_dates)
    for j, p in enumerate(pos):
        if p < dates.size and dates[p] == q_dates[j] and q_daily.mask[j]:
            values[p] = q_daily.values[j]
            mask[p] = True

    return dataio.BasinRecord(basin_id, dates, forcings, valid,
                              MaskedSeries(values, mask), statics)


def cmd_prepare(args) -> int:
    cfg = _load_config(args.config)
    section = cfg.get("prepare")
    if not isinstance(section, dict):
        raise ConfigError("config has no 'prepare' section")
    out_dir = _out_dir(args)

    mode = section.get("mode")
    if mode == "synthetic":
        ranges = section.get("parameter_ranges")
        pr = ParameterRanges(**{k: tuple(v) for k, v in ranges.items()}) if ranges else None
        dataset = generate_synthetic_family(
            seed=int(section.get("seed", 0)),
            n_basins=int(section.get("n_basins", 12)),
            n_days=int(section.get("n_days", 730)),
            parameter_ranges=pr,
            role=section.get("role", "target"),
            start_date=section.get("start_date", "2015-09-01"),
            train_days=section.get("train_days"),
        )
        gap_fraction = float(section.get("gap_fraction", 0.0))
        if gap_fraction > 0.0:
            dataset = inject_gaps(dataset, int(section.get("gap_seed", 0)), gap_fraction)
    elif mode == "stations":
        try:
            train_range = DateRange(*section["train_range"])
            test_range = DateRange(*section["test_range"])
            stations = section["stations"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad stations prepare section: {exc}") from exc
        basins = [_prepare_station(entry, cfg) for entry in stations]
        dataset = DomainDataset.build(basins, section.get("role", "target"),
                                      train_range, test_range)
    else:
        raise ConfigError(f"prepare.mode must be 'synthetic' or 'stations', got {mode!r}")

    save_domain(dataset, out_dir)
    write_availability_heatmap(dataset, out_dir / "availability_heatmap.csv")
    report = availability_report(dataset)
    with (out_dir / "availability_report.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["basin_id", "observed_fraction", "n_gaps", "longest_gap_days"])
        for basin_id in dataset.basin_ids:
            r = report[basin_id]
            longest = max((e - s + 1 for s, e in r.gaps), default=0)
            writer.writerow([basin_id, repr(r.observed_fraction), len(r.gaps), longest])
    _write_meta(out_dir, "prepare")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train / evaluate


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    dataset = load_domain(_dataset_path(cfg, "dataset"))
    seed = args.seed if args.seed is not None else _seeds(cfg, args)[0]
    mc = _model_config(cfg)
    tc = _train_config(cfg, seed=seed)
    out_dir = _out_dir(args)

    samples = make_samples(dataset, "train", mc)
    try:
        run = train(mc, samples, None, tc)
    except DivergenceError as exc:
        # Retain the last finite parameters before reporting the failure.
        save_checkpoint(exc.last_params, out_dir / "checkpoint.json")
        raise
    save_checkpoint(run.params, out_dir / "checkpoint.json")
    write_training_log(run, out_dir / "training_log.jsonl")
    _write_meta(out_dir, "train")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    dataset = load_domain(_dataset_path(cfg, "dataset"))
    ckpt = _resolve_path(args.checkpoint, cfg)
    if not ckpt.exists():
        raise ConfigError(f"checkpoint does not exist: {ckpt}")
    params = load_checkpoint(ckpt)
    out_dir = _out_dir(args)

    result = evaluate(params, dataset, args.range, params.config)
    _write_per_basin_nse(result.per_basin_nse, out_dir / "per_basin_nse.csv")
    _write_summary(result.summary, out_dir / "summary.csv")
    _write_meta(out_dir, "evaluate")
    return EXIT_OK


# ---------------------------------------------------------------------------
# transfer


def cmd_transfer(args) -> int:
    cfg = _load_config(args.config)
    target = load_domain(_dataset_path(cfg, "target"))
    ckpt = _resolve_path(args.source_checkpoint, cfg)
    if not ckpt.exists():
        raise ConfigError(f"source checkpoint does not exist: {ckpt}")
    params = load_checkpoint(ckpt)
    xc = _transfer_config(cfg, args)
    out_dir = _out_dir(args)

    source_run = TrainingRun(params.config, xc.finetune, xc.finetune.seed,
                             [], [], [], params)
    run = transfer_and_finetune(source_run, target, xc)
    save_checkpoint(run.target_run.params, out_dir / "checkpoint.json")
    write_training_log(run.target_run, out_dir / "training_log.jsonl")
    _write_per_basin_nse(run.per_basin_nse, out_dir / "per_basin_nse.csv")
    _write_summary(run.summary, out_dir / "summary.csv")
    lineage = {
        "source_representation_sha256": run.source_rep_hash,
        "handoff_representation_sha256": run.handoff_rep_hash,
        "final_representation_sha256": run.target_run.params.representation_hash(),
        "frozen_representation": xc.freeze_representation,
    }
    (out_dir / "lineage.json").write_text(json.dumps(lineage, indent=2, sort_keys=True))
    _write_meta(out_dir, "transfer")
    return EXIT_OK


# ---------------------------------------------------------------------------
# suite


def cmd_suite(args) -> int:
    cfg = _load_config(args.config)
    target = load_domain(_dataset_path(cfg, "target"))
    # The comparison protocol runs 30 seeds unless told otherwise.
    seeds = _seeds(cfg, args, default=list(range(30)))
    variants = cfg.get("variants", list(VARIANTS))
    if args.variant:
        variants = [args.variant]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"unknown variants in config: {unknown}")
    needs_source = any("TL" in v for v in variants)
    source_path = _dataset_path(cfg, "source", required=needs_source)
    source = load_domain(source_path) if source_path else None

    mc = _model_config(cfg)
    tc = _train_config(cfg)
    xc = _transfer_config(cfg, args)
    out_dir = _out_dir(args)

    suite = run_variant_suite(mc, source, target, tc, xc, seeds,
                              variants=variants, jobs=args.jobs)

    write_summary_table(suite, out_dir / "summary_table.csv")
    for variant in suite.variants:
        write_colormap(suite, variant, out_dir / f"colormap_{variant}.csv")
    write_hydrographs(suite, out_dir / "hydrographs")
    payload = {
        "variants": suite.variants,
        "seeds": suite.seeds,
        "basin_ids": suite.basin_ids,
        "per_variant": {
            v: {
                "aggregate": suite.results[v].aggregate_row(),
                "per_seed": [s.as_dict() if s is not None else None
                             for s in suite.results[v].per_seed_summaries],
            }
            for v in suite.variants
        },
    }
    (out_dir / "summary.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
    _write_meta(out_dir, "suite")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowcast",
        description="Streamflow forecasting experiments: data preparation, "
                    "training, transfer, and the variant comparison suite.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a dataset on disk")
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a dataset's train range")
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset range")
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--range", choices=("train", "test"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("transfer", help="fine-tune a source checkpoint on a target domain")
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--source-checkpoint", required=True)
    p.add_argument("--freeze-representation", action="store_true")
    p.add_argument("--basin-selection", choices=("off", "below_half_median"), default=None)
    p.add_argument("--variant", choices=VARIANTS, default=None)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("suite", help="run the variant-by-seed comparison")
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--variant", choices=VARIANTS, default=None,
                   help="run a single variant instead of the configured set")
    p.add_argument("--freeze-representation", action="store_true")
    p.add_argument("--basin-selection", choices=("off", "below_half_median"), default=None)
    p.set_defaults(func=cmd_suite)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeMismatchError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
