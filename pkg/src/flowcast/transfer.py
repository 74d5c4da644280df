"""Source-to-target transfer workflow and the four-variant comparison.

The recipe: fit on the data-rich source domain, optionally fine-tune on a
lagging source basin, keep the LSTM representation, replace the regression
head with a fresh random one, then fine-tune on the sparse target domain
with the basin-normalized NSE loss.  ``run_variant_suite`` runs the full
four-model comparison (with/without transfer, with/without static
conditioning) across seeds and emits the table, colormap, and hydrograph
artifacts.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import (DomainDataset, SchemaError, expected_input_dim, make_samples)
from .lstm import ModelConfig, swap_head
from .metrics import NseSummary, SUMMARY_COLUMNS
from .training import (EvalResult, TrainConfig, TrainingRun, evaluate,
                       evaluate_samples, train)

VARIANTS = ("LSTM", "LSTM_SCA", "LSTM_TL", "LSTM_TL_SCA")


def variant_uses_static(variant: str) -> bool:
    return variant.endswith("SCA")


def variant_uses_transfer(variant: str) -> bool:
    return "TL" in variant


@dataclass(frozen=True)
class TransferConfig:
    """Knobs for the transfer leg of a run.

    ``freeze_representation`` defaults to off: representation and head are
    fine-tuned jointly.  ``basin_selection`` enables the extra source-side
    pass on a randomly chosen basin scoring below half the median NSE.
    """

    variant: str = "LSTM_TL"
    finetune: TrainConfig = field(default_factory=TrainConfig)
    freeze_representation: bool = False
    head_seed: int = 0
    basin_selection: str = "off"  # "off" | "below_half_median"
    selection_epochs: int = 5
    val_basin_fraction: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.basin_selection not in ("off", "below_half_median"):
            raise ValueError(f"unknown basin_selection {self.basin_selection!r}")


@dataclass
class PretrainResult:
    run: TrainingRun
    selected_basin: Optional[str] = None
    selection_sample_count: int = 0


@dataclass
class TransferRun:
    """One complete source-to-target run."""

    source_run: Optional[TrainingRun]
    selected_basin: Optional[str]
    target_run: TrainingRun
    per_basin_nse: Dict[str, float]
    summary: Optional[NseSummary]
    evaluation: EvalResult
    source_rep_hash: Optional[str] = None
    handoff_rep_hash: Optional[str] = None


def select_lagging_basin(per_basin_nse: Dict[str, float], seed: int) -> str:
    """Pick a basin whose NSE lags the rest of the distribution.

    Candidates score below half the median NSE; when the median is not
    positive, "half the median" is ill-defined, so anything below the
    median qualifies instead.  One candidate is drawn uniformly with the
    given seed; with no candidates the worst basin wins (ties broken by
    id).
    """
    if not per_basin_nse:
        raise ValueError("empty per-basin NSE map")
    values = np.array(list(per_basin_nse.values()), dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite NSE values")
    median = float(np.median(values))
    threshold = 0.5 * median if median > 0 else median
    candidates = sorted(b for b, v in per_basin_nse.items() if v < threshold)
    if not candidates:
        return min(sorted(per_basin_nse), key=per_basin_nse.__getitem__)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))
    return candidates[int(rng.integers(len(candidates)))]


def _split_validation_basins(dataset: DomainDataset, fraction: float, seed: int):
    ids = dataset.basin_ids
    n_val = int(round(fraction * len(ids)))
    if n_val == 0 or n_val >= len(ids):
        return ids, []
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(4,)))
    order = rng.permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    trainable = [b for b in ids if b not in set(val)]
    return trainable, val


def pretrain_source(model_config: ModelConfig, source: DomainDataset,
                    train_config: TrainConfig,
                    transfer_config: TransferConfig) -> PretrainResult:
    """Fit on the source domain, with optional lagging-basin fine-tuning.

    A held-out slice of source basins provides per-epoch validation.  When
    basin selection is on, the trained model is scored per training basin
    and one lagging basin gets an extra fine-tuning pass (``lr_rest``
    throughout, ``selection_epochs`` epochs) before handoff.
    """
    if source.role != "source":
        raise ValueError(f"expected a source-role dataset, got role={source.role!r}")
    samples = make_samples(source, "train", model_config)
    train_ids, val_ids = _split_validation_basins(
        source, transfer_config.val_basin_fraction, train_config.seed)
    train_part = samples.subset_by_basins(train_ids) if val_ids else samples
    val_part = samples.subset_by_basins(val_ids) if val_ids else None

    run = train(model_config, train_part, val_part, train_config)
    if transfer_config.basin_selection == "off":
        return PretrainResult(run)

    per_basin, _ = evaluate_samples(run.params, train_part)
    selected = select_lagging_basin(per_basin, seed=train_config.seed)
    selected_samples = train_part.subset_by_basins([selected])
    extra_config = replace(train_config,
                           epochs=transfer_config.selection_epochs,
                           lr_first_epoch=train_config.lr_rest)
    extra = train(model_config, selected_samples, val_part, extra_config,
                  initial_params=run.params)
    merged = TrainingRun(model_config, train_config, train_config.seed,
                         run.epoch_losses + extra.epoch_losses,
                         run.epoch_lrs + extra.epoch_lrs,
                         run.val_summaries + extra.val_summaries,
                         extra.params)
    return PretrainResult(merged, selected, len(selected_samples))


def check_schema_match(source_schema: Tuple[Tuple[str, ...], Tuple[str, ...]],
                       target: DomainDataset) -> None:
    """Transfer requires identical feature spaces on both domains."""
    src_forcings, src_statics = source_schema
    mismatches = []
    if tuple(target.forcing_names) != tuple(src_forcings):
        mismatches.append(f"forcings: {src_forcings!r} vs {target.forcing_names!r}")
    if tuple(target.static_names) != tuple(src_statics):
        mismatches.append(f"static attributes: {src_statics!r} vs {target.static_names!r}")
    if mismatches:
        raise SchemaError("source/target feature schemas differ; " + "; ".join(mismatches))


def transfer_and_finetune(source_run: TrainingRun, target: DomainDataset,
                          transfer_config: TransferConfig,
                          source_schema: Optional[tuple] = None,
                          selected_basin: Optional[str] = None) -> TransferRun:
    """Swap the head, fine-tune on the target domain, evaluate on its test range.

    The representation is carried over verbatim (verified by hash); the
    head restarts from a seeded random initialization.  Fine-tuning uses
    the basin-normalized NSE loss with target-basin variance stats and, if
    requested, updates only the head.
    """
    if source_schema is not None:
        check_schema_match(source_schema, target)
    model_config = source_run.model_config
    if model_config.input_dim != expected_input_dim(model_config.use_static):
        raise SchemaError("source model input_dim does not match the shared schema")

    source_params = source_run.params
    source_hash = source_params.representation_hash()
    handoff = swap_head(source_params, transfer_config.head_seed)
    handoff_hash = handoff.representation_hash()
    if handoff_hash != source_hash:
        raise RuntimeError("lineage broken: head swap altered the representation")

    cfg = transfer_config.finetune
    samples = make_samples(target, "train", model_config)
    if cfg.epochs > 0:
        target_run = train(model_config, samples, None, cfg, initial_params=handoff,
                           freeze_representation=transfer_config.freeze_representation)
    else:
        target_run = TrainingRun(model_config, cfg, cfg.seed, [], [], [], handoff)

    result = evaluate(target_run.params, target, "test", model_config)
    return TransferRun(source_run, selected_basin, target_run,
                       result.per_basin_nse, result.summary, result,
                       source_rep_hash=source_hash, handoff_rep_hash=handoff_hash)


def scratch_train(model_config: ModelConfig, target: DomainDataset,
                  train_config: TrainConfig) -> TransferRun:
    """Baseline arm: train from scratch on the target domain, no transfer."""
    samples = make_samples(target, "train", model_config)
    run = train(model_config, samples, None, train_config)
    result = evaluate(run.params, target, "test", model_config)
    return TransferRun(None, None, run, result.per_basin_nse, result.summary, result)


# ---------------------------------------------------------------------------
# Variant suite


@dataclass
class VariantResult:
    variant: str
    seeds: List[int]
    per_seed_summaries: List[Optional[NseSummary]]
    per_seed_nse: List[Dict[str, float]]
    # First-seed evaluation, used for hydrograph export.
    first_eval: EvalResult

    def nse_matrix(self, basin_ids: Sequence[str]) -> np.ndarray:
        """Basins x seeds NSE matrix; NaN where a basin was excluded."""
        out = np.full((len(basin_ids), len(self.seeds)), np.nan)
        for j, per_basin in enumerate(self.per_seed_nse):
            for i, basin_id in enumerate(basin_ids):
                if basin_id in per_basin:
                    out[i, j] = per_basin[basin_id]
        return out

    def aggregate_row(self) -> Dict[str, float]:
        """Each of the six statistics averaged across seeds."""
        rows = [s.as_row() for s in self.per_seed_summaries if s is not None]
        if not rows:
            return {c: float("nan") for c in SUMMARY_COLUMNS}
        means = np.mean(np.array(rows, dtype=np.float64), axis=0)
        return dict(zip(SUMMARY_COLUMNS, means.tolist()))


@dataclass
class SuiteResult:
    variants: List[str]
    seeds: List[int]
    basin_ids: List[str]
    results: Dict[str, VariantResult]


def _run_suite_cell(args):
    (variant, seed, model_config, train_config, transfer_config, source, target) = args
    use_static = variant_uses_static(variant)
    mc = replace(model_config,
                 input_dim=expected_input_dim(use_static),
                 use_static=use_static)
    tc = replace(train_config, seed=seed)
    if variant_uses_transfer(variant):
        xc = replace(transfer_config, variant=variant, head_seed=seed,
                     finetune=replace(transfer_config.finetune, seed=seed))
        pre = pretrain_source(mc, source, tc, xc)
        run = transfer_and_finetune(pre.run, target, xc,
                                    source_schema=(source.forcing_names, source.static_names),
                                    selected_basin=pre.selected_basin)
    else:
        run = scratch_train(mc, target, tc)
    return variant, seed, run.per_basin_nse, run.summary, run.evaluation


def run_variant_suite(model_config: ModelConfig, source: Optional[DomainDataset],
                      target: DomainDataset, train_config: TrainConfig,
                      transfer_config: TransferConfig, seeds: Sequence[int],
                      variants: Sequence[str] = VARIANTS, jobs: int = 1) -> SuiteResult:
    """Run every variant x seed cell and collect seed-aggregated statistics.

    TL variants pretrain on the source domain then transfer; the others
    train from scratch on the target.  Cells are independent, so they can
    fan out over processes; results are keyed by (variant, seed) and the
    aggregation is a pure reduce, making the output order-independent.
    """
    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    for variant in variants:
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
    if source is None and any(variant_uses_transfer(v) for v in variants):
        raise ValueError("TL variants requested but no source dataset given")

    cells = [(variant, seed, model_config, train_config, transfer_config, source, target)
             for variant in variants for seed in seeds]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_suite_cell, cells, chunksize=1))
    else:
        outcomes = [_run_suite_cell(cell) for cell in cells]

    by_cell = {(variant, seed): (per_basin, summary, ev)
               for variant, seed, per_basin, summary, ev in outcomes}
    results = {}
    for variant in variants:
        per_seed_nse = [by_cell[(variant, s)][0] for s in seeds]
        summaries = [by_cell[(variant, s)][1] for s in seeds]
        first_eval = by_cell[(variant, seeds[0])][2]
        results[variant] = VariantResult(variant, list(seeds), summaries,
                                         per_seed_nse, first_eval)
    return SuiteResult(list(variants), list(seeds), target.basin_ids, results)


# ---------------------------------------------------------------------------
# Suite artifacts


def _fmt(value) -> str:
    if isinstance(value, float) and np.isnan(value):
        return ""
    return repr(float(value))


def write_summary_table(suite: SuiteResult, path) -> None:
    """Variant rows by the six NSE statistics, averaged across seeds."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", *SUMMARY_COLUMNS])
        for variant in suite.variants:
            row = suite.results[variant].aggregate_row()
            writer.writerow([variant, *(_fmt(row[c]) for c in SUMMARY_COLUMNS)])


def write_colormap(suite: SuiteResult, variant: str, path) -> None:
    """Stations-by-seeds NSE matrix for one variant."""
    result = suite.results[variant]
    matrix = result.nse_matrix(suite.basin_ids)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["basin_id", *(f"seed{s}" for s in result.seeds)])
        for i, basin_id in enumerate(suite.basin_ids):
            writer.writerow([basin_id, *(_fmt(v) for v in matrix[i])])


def write_hydrographs(suite: SuiteResult, out_dir) -> List[Path]:
    """Per-basin CSVs of observed vs per-variant predicted discharge.

    Uses the first seed of each variant (one model instance per variant);
    covers exactly the evaluation range.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for basin_id in suite.basin_ids:
        columns = {}
        dates = obs = obs_mask = None
        for variant in suite.variants:
            series = suite.results[variant].first_eval.series.get(basin_id)
            if series is None:
                continue
            dates, obs, obs_mask, preds = series
            columns[variant] = preds
        if dates is None:
            continue
        path = out_dir / f"{basin_id}_hydrograph.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["date", "observed",
                             *(f"predicted_{v}" for v in columns)])
            for i, date in enumerate(dates):
                row = [str(date), _fmt(obs[i]) if obs_mask[i] else ""]
                row.extend(_fmt(columns[v][i]) for v in columns)
                writer.writerow(row)
        written.append(path)
    return written
