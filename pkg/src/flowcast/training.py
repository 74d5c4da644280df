"""Mini-batch training: Adam, the two-step learning-rate schedule, and
epoch management with seeded shuffling and per-epoch validation.

Runs are bitwise reproducible for a fixed (configs, data, seed) on a given
platform: shuffling uses spawned RNG streams keyed by (seed, epoch), batch
order is deterministic, and all reductions happen in a fixed order.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import metrics
from .data import SampleSet, make_samples
from .lstm import (ModelConfig, ParameterSet, Workspace, backward_batch,
                   forward_batch, init_parameters,
                   zero_representation_gradients)
from .metrics import NseSummary, summarize


class NonFiniteGradientError(ValueError):
    """A gradient block overflowed or produced NaNs."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite; carries the last good parameters."""

    def __init__(self, message: str, last_params: ParameterSet, epoch_losses: List[float]):
        super().__init__(message)
        self.last_params = last_params
        self.epoch_losses = epoch_losses


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr_first_epoch: float = 1e-3
    lr_rest: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    loss: str = "nse"            # "nse" | "mse"
    seed: int = 0
    weight_decay: float = 0.0
    loss_epsilon: float = 0.1    # stabilizer added to per-basin variance
    max_batches_per_epoch: Optional[int] = None  # cap epoch cost on huge domains

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_first_epoch <= 0 or self.lr_rest <= 0:
            raise ValueError("learning rates must be > 0")
        if self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.loss not in ("nse", "mse"):
            raise ValueError(f"loss must be 'nse' or 'mse', got {self.loss!r}")


@dataclass
class OptimizerState:
    """Adam moment accumulators over the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, params: ParameterSet) -> "OptimizerState":
        n = params.n_parameters
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)


@dataclass
class StepInfo:
    """Per-update instrumentation passed to the optional ``on_step`` hook."""

    epoch: int
    step: int
    loss: float
    grad_norm: float        # before clipping
    clipped_norm: float     # after clipping


@dataclass
class TrainingRun:
    """Configuration, history, and final weights of one fit.

    ``best_params`` holds the weights with the best validation median NSE
    when tracking was requested and validation ran; otherwise None.
    """

    model_config: ModelConfig
    train_config: TrainConfig
    seed: int
    epoch_losses: List[float]
    epoch_lrs: List[float]
    val_summaries: List[Optional[NseSummary]]
    params: ParameterSet
    best_params: Optional[ParameterSet] = None
    checkpoint_path: Optional[str] = None


def lr_schedule(epoch_index: int, config: TrainConfig) -> float:
    """First epoch runs at ``lr_first_epoch``, every later epoch at ``lr_rest``."""
    if epoch_index < 0:
        raise ValueError(f"epoch_index must be >= 0, got {epoch_index}")
    return config.lr_first_epoch if epoch_index == 0 else config.lr_rest


def adam_step(params: ParameterSet, grads: ParameterSet, state: OptimizerState,
              lr: float, *, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0):
    """One bias-corrected Adam update; returns new (params, state).

    Raises:
        NonFiniteGradientError: naming the first offending parameter block.
    """
    for name, block in grads.blocks():
        if not np.all(np.isfinite(block)):
            raise NonFiniteGradientError(f"non-finite gradient in block {name!r}")
    theta = params.flatten()
    g = grads.flatten()
    if weight_decay:
        g = g + weight_decay * theta
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return ParameterSet.from_flat(params.config, theta), OptimizerState(m, v, t)


def clip_gradients(grads: ParameterSet, max_norm: float):
    """Scale gradients so the global L2 norm is at most ``max_norm``.

    Returns (clipped_grads, pre_clip_norm); scaling happens in place.
    """
    flat = grads.flatten()
    norm = float(np.sqrt(np.sum(flat * flat)))
    if norm > max_norm:
        scale = max_norm / norm
        for _, block in grads.blocks():
            block *= scale
        grads.head.b = float(grads.head.b) * scale
    return grads, norm


def _shuffle_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2, epoch)))


def train(model_config: ModelConfig, train_samples: SampleSet,
          val_samples: Optional[SampleSet], train_config: TrainConfig, *,
          initial_params: Optional[ParameterSet] = None,
          freeze_representation: bool = False,
          keep_best: bool = False,
          on_step: Optional[Callable[[StepInfo], None]] = None) -> TrainingRun:
    """Fit the model on windowed samples.

    Each epoch shuffles all samples with a seeded generator, accumulates
    the configured loss gradient per mini-batch through BPTT, clips the
    global gradient norm, and applies Adam at the scheduled rate.  When
    ``freeze_representation`` is set only the head receives updates;
    ``keep_best`` additionally retains the epoch weights with the best
    validation median NSE.

    Raises:
        DivergenceError: the loss became non-finite; the exception carries
            the last finite parameters.
    """
    if len(train_samples) == 0:
        raise ValueError("no training samples")
    cfg = train_config
    params = initial_params.copy() if initial_params is not None else \
        init_parameters(model_config, cfg.seed)
    state = OptimizerState.zeros(params)
    variance = train_samples.basin_variance

    epoch_losses: List[float] = []
    epoch_lrs: List[float] = []
    val_summaries: List[Optional[NseSummary]] = []
    best_params: Optional[ParameterSet] = None
    best_median: Optional[float] = None
    n = len(train_samples)
    workspace = Workspace()

    # Single-threaded BLAS: the recurrent matmuls are too small for
    # threading to pay off, and results stop depending on the host's
    # core count.  Multi-seed experiments parallelize across processes.
    with threadpool_limits(limits=1):
        for epoch in range(cfg.epochs):
            lr = lr_schedule(epoch, cfg)
            order = _shuffle_rng(cfg.seed, epoch).permutation(n)
            if cfg.max_batches_per_epoch is not None:
                order = order[:cfg.max_batches_per_epoch * cfg.batch_size]
            loss_sum = 0.0
            seen = 0
            for lo in range(0, order.size, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                windows, targets = train_samples.gather(idx)
                preds, trace = forward_batch(params, windows, workspace)
                if cfg.loss == "nse":
                    loss, d_pred = metrics.nse_loss_from_variance(
                        preds, targets, variance[idx], cfg.loss_epsilon)
                else:
                    loss, d_pred = metrics.mse_loss(preds, targets)
                if not np.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, batch {lo // cfg.batch_size}",
                        last_params=params, epoch_losses=epoch_losses)
                grads = backward_batch(params, trace, d_pred, workspace)
                if freeze_representation:
                    zero_representation_gradients(grads)
                grads, pre_norm = clip_gradients(grads, cfg.clip_norm)
                if on_step is not None:
                    post = float(np.linalg.norm(grads.flatten()))
                    on_step(StepInfo(epoch, state.step, loss, pre_norm, post))
                params, state = adam_step(params, grads, state, lr, beta1=cfg.beta1,
                                          beta2=cfg.beta2, eps=cfg.adam_eps,
                                          weight_decay=cfg.weight_decay)
                loss_sum += loss * idx.size
                seen += idx.size
            epoch_losses.append(loss_sum / seen)
            epoch_lrs.append(lr)
            if val_samples is not None and len(val_samples) > 0:
                _, summary = evaluate_samples(params, val_samples)
                val_summaries.append(summary)
                if keep_best and summary is not None and \
                        (best_median is None or summary.median > best_median):
                    best_median = summary.median
                    best_params = params.copy()
            else:
                val_summaries.append(None)

    return TrainingRun(model_config, cfg, cfg.seed, epoch_losses, epoch_lrs,
                       val_summaries, params, best_params=best_params)


_EVAL_CHUNK = 1024


def predict_samples(params: ParameterSet, samples: SampleSet) -> np.ndarray:
    """Simulated discharge for every sample, in sample order."""
    preds = np.empty(len(samples))
    workspace = Workspace()
    with threadpool_limits(limits=1):
        for lo in range(0, len(samples), _EVAL_CHUNK):
            idx = np.arange(lo, min(lo + _EVAL_CHUNK, len(samples)))
            windows, _ = samples.gather(idx)
            chunk, _ = forward_batch(params, windows, workspace)
            preds[idx] = chunk
    return preds


def evaluate_samples(params: ParameterSet, samples: SampleSet):
    """Per-basin NSE over observed targets plus the six-statistic summary.

    Basins without enough observed targets (or with degenerate variance)
    are excluded with a warning.  Read-only: parameters are not touched.

    Returns:
        (per_basin_nse, summary); summary is None if no basin qualified.
    """
    preds = predict_samples(params, samples)
    per_basin: Dict[str, float] = {}
    for basin_id, idx in samples.per_basin_indices().items():
        obs = metrics.MaskedSeries(samples.targets[idx], samples.target_observed[idx])
        try:
            per_basin[basin_id] = metrics.nse(preds[idx], obs)
        except metrics.MetricError as exc:
            warnings.warn(f"basin {basin_id} excluded from NSE summary: {exc}")
    summary = summarize(list(per_basin.values())) if per_basin else None
    return per_basin, summary


@dataclass
class EvalResult:
    """Evaluation of one parameter set over one dataset range."""

    per_basin_nse: Dict[str, float]
    summary: Optional[NseSummary]
    # per basin: (dates, observed values, observed mask, predictions)
    series: Dict[str, tuple]


def evaluate(params: ParameterSet, dataset, which: str, config: ModelConfig) -> EvalResult:
    """Simulate every valid window in a range and score each basin.

    Predictions are produced for all valid-window days (for hydrograph
    export); the NSE uses only the observed ones.
    """
    samples = make_samples(dataset, which, config, require_observed_target=False)
    preds = predict_samples(params, samples)
    per_basin: Dict[str, float] = {}
    series: Dict[str, tuple] = {}
    for basin_id, idx in samples.per_basin_indices().items():
        obs = metrics.MaskedSeries(samples.targets[idx], samples.target_observed[idx])
        series[basin_id] = (samples.target_dates[idx], samples.targets[idx],
                            samples.target_observed[idx], preds[idx])
        try:
            per_basin[basin_id] = metrics.nse(preds[idx], obs)
        except metrics.MetricError as exc:
            warnings.warn(f"basin {basin_id} excluded from NSE summary: {exc}")
    summary = summarize(list(per_basin.values())) if per_basin else None
    return EvalResult(per_basin, summary, series)


def write_training_log(run: TrainingRun, path) -> None:
    """One JSON line per epoch: epoch, lr, train loss, validation summary."""
    lines = []
    for i, (loss, lr, val) in enumerate(zip(run.epoch_losses, run.epoch_lrs,
                                            run.val_summaries)):
        record = {"epoch": i, "lr": lr, "train_loss": loss,
                  "validation": val.as_dict() if val is not None else None}
        lines.append(json.dumps(record, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
