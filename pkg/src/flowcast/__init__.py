"""LSTM streamflow forecasting with static catchment attributes and
source-to-target transfer learning, in plain numpy.

Modules:
    lstm      stacked LSTM regressor, exact BPTT gradients, checkpoints
    metrics   Nash-Sutcliffe efficiency, normalized losses, summaries
    data      ingestion, rating curves, windowing, synthetic basins
    training  Adam, learning-rate schedule, the training loop
    transfer  head replacement, fine-tuning, variant comparison suite
    cli       the ``flowcast`` command
"""

from .lstm import (ModelConfig, ParameterSet, ForwardTrace, forward,
                   forward_batch, backward, init_parameters, swap_head,
                   save_checkpoint, load_checkpoint)
from .metrics import (BasinNormStats, MaskedSeries, NseSummary, mse_loss,
                      nse, nse_loss, summarize)
from .data import (BasinRecord, DateRange, DomainDataset, ParameterRanges,
                   RatingCurve, Sample, availability_report, fit_rating_curve,
                   generate_synthetic_family, inject_gaps, load_domain,
                   make_samples, resample_daily, save_domain, stage_to_discharge)
from .training import (OptimizerState, TrainConfig, TrainingRun, adam_step,
                       evaluate, lr_schedule, train)
from .transfer import (TransferConfig, TransferRun, VARIANTS,
                       pretrain_source, run_variant_suite,
                       select_lagging_basin, transfer_and_finetune)

__version__ = "0.1.0"
