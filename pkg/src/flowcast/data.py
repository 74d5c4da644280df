"""Basin data ingestion, preprocessing, windowing, and synthetic generation.

Datasets follow a CAMELS-like on-disk layout: per-basin forcing and
discharge CSVs, one static-attribute table, and a JSON manifest carrying
the role (source/target), date ranges, and units.  Discharge gaps are
first-class: every downstream consumer sees an observation mask instead of
imputed values.

The synthetic generator produces families of linear-reservoir basins with
seasonal stochastic weather; it is the verification oracle for the whole
pipeline, since the real gauged datasets cannot ship with the code.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .lstm import ModelConfig, ShapeMismatchError
from .metrics import BasinNormStats, MaskedSeries

DAY = np.timedelta64(1, "D")

FORCING_NAMES = ("precip", "tmin", "tmax", "vapor_pressure")
STATIC_NAMES = (
    "area",
    "elevation",
    "slope",
    "precip_mean",
    "high_prec_freq",
    "high_prec_dur",
    "low_prec_freq",
    "low_prec_dur",
    "pet_mean",
    "aridity",
    "lai",
    "ndvi",
)
DYNAMIC_DIM = len(FORCING_NAMES)
STATIC_DIM = len(STATIC_NAMES)

UNITS = {
    "discharge": "m3/s",
    "precip": "mm/day",
    "tmin": "degC",
    "tmax": "degC",
    "vapor_pressure": "Pa",
}

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
STATIC_TABLE_NAME = "static_attributes.csv"
BASIN_DIR_NAME = "basins"


class DataError(ValueError):
    """Malformed or inconsistent basin data."""


class SchemaError(DataError):
    """Static-attribute or forcing schema does not match the expected one."""


def expected_input_dim(use_static: bool) -> int:
    return DYNAMIC_DIM + (STATIC_DIM if use_static else 0)


# ---------------------------------------------------------------------------
# Date ranges


@dataclass(frozen=True)
class DateRange:
    """Half-open interval of calendar days: start inclusive, end exclusive."""

    start: np.datetime64
    end: np.datetime64

    def __post_init__(self):
        object.__setattr__(self, "start", np.datetime64(self.start, "D"))
        object.__setattr__(self, "end", np.datetime64(self.end, "D"))
        if self.end <= self.start:
            raise ValueError(f"empty date range: {self.start} .. {self.end}")

    @property
    def days(self) -> int:
        return int((self.end - self.start) / DAY)

    def contains(self, dates: np.ndarray) -> np.ndarray:
        return (dates >= self.start) & (dates < self.end)

    def overlaps(self, other: "DateRange") -> bool:
        return max(self.start, other.start) < min(self.end, other.end)

    def as_strings(self) -> List[str]:
        return [str(self.start), str(self.end)]


# Default calibration/evaluation splits for each domain role.
DEFAULT_SOURCE_TRAIN = DateRange("1999-10-01", "2008-09-30")
DEFAULT_SOURCE_TEST = DateRange("1989-10-01", "1999-09-30")
DEFAULT_TARGET_TRAIN = DateRange("2015-09-01", "2018-02-22")
DEFAULT_TARGET_TEST = DateRange("2018-02-22", "2019-10-16")


# ---------------------------------------------------------------------------
# Core containers


@dataclass
class BasinRecord:
    """One gauged catchment: daily forcings, masked discharge, static vector.

    ``forcing_valid`` flags days whose raw forcings were complete; the
    values stored on invalid days are meaningless placeholders, and such
    days poison any training window covering them (no imputation).
    """

    basin_id: str
    dates: np.ndarray            # (n,) datetime64[D], contiguous
    forcings: np.ndarray         # (n, DYNAMIC_DIM) float64, no NaNs
    forcing_valid: np.ndarray    # (n,) bool
    discharge: MaskedSeries      # (n,)
    static_attributes: np.ndarray  # (STATIC_DIM,)

    def __post_init__(self):
        self.dates = np.asarray(self.dates, dtype="datetime64[D]")
        self.forcings = np.asarray(self.forcings, dtype=np.float64)
        self.forcing_valid = np.asarray(self.forcing_valid, dtype=bool)
        self.static_attributes = np.asarray(self.static_attributes, dtype=np.float64)
        n = self.dates.size
        if n == 0:
            raise DataError(f"basin {self.basin_id}: empty record")
        if n > 1 and not np.all(np.diff(self.dates) == DAY):
            raise DataError(f"basin {self.basin_id}: dates are not contiguous daily")
        if self.forcings.shape != (n, DYNAMIC_DIM):
            raise DataError(
                f"basin {self.basin_id}: forcings shape {self.forcings.shape}, "
                f"expected ({n}, {DYNAMIC_DIM})"
            )
        if not np.all(np.isfinite(self.forcings)):
            raise DataError(f"basin {self.basin_id}: non-finite forcing values")
        if self.forcing_valid.shape != (n,) or len(self.discharge) != n:
            raise DataError(f"basin {self.basin_id}: per-day arrays disagree on length")
        if self.static_attributes.shape != (STATIC_DIM,):
            raise SchemaError(
                f"basin {self.basin_id}: expected {STATIC_DIM} static attributes, "
                f"got {self.static_attributes.shape}"
            )

    @property
    def n_days(self) -> int:
        return self.dates.size

    def copy(self) -> "BasinRecord":
        return BasinRecord(
            self.basin_id,
            self.dates.copy(),
            self.forcings.copy(),
            self.forcing_valid.copy(),
            MaskedSeries(self.discharge.values.copy(), self.discharge.mask.copy()),
            self.static_attributes.copy(),
        )


@dataclass
class NormStats:
    """Per-feature z-scoring statistics computed on the training range only."""

    forcing_mean: np.ndarray
    forcing_std: np.ndarray
    static_mean: np.ndarray
    static_std: np.ndarray

    def z_forcings(self, forcings: np.ndarray) -> np.ndarray:
        return (forcings - self.forcing_mean) / self.forcing_std

    def z_statics(self, statics: np.ndarray) -> np.ndarray:
        return (statics - self.static_mean) / self.static_std


def _safe_std(std: np.ndarray) -> np.ndarray:
    # Constant features pass through unscaled instead of dividing by zero.
    out = std.copy()
    out[out == 0.0] = 1.0
    return out


@dataclass
class DomainDataset:
    """An ordered collection of basins plus split ranges and norm stats."""

    basins: List[BasinRecord]
    role: str  # "source" | "target"
    train_range: DateRange
    test_range: DateRange
    norm_stats: NormStats
    forcing_names: Tuple[str, ...] = FORCING_NAMES
    static_names: Tuple[str, ...] = STATIC_NAMES

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise DataError(f"role must be 'source' or 'target', got {self.role!r}")
        if self.train_range.overlaps(self.test_range):
            raise DataError("train and test ranges overlap")
        ids = [b.basin_id for b in self.basins]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate basin ids")

    @property
    def basin_ids(self) -> List[str]:
        return [b.basin_id for b in self.basins]

    @property
    def n_basins(self) -> int:
        return len(self.basins)

    def basin(self, basin_id: str) -> BasinRecord:
        for b in self.basins:
            if b.basin_id == basin_id:
                return b
        raise KeyError(basin_id)

    @classmethod
    def build(cls, basins, role, train_range, test_range, **kwargs) -> "DomainDataset":
        stats = compute_norm_stats(basins, train_range)
        return cls(list(basins), role, train_range, test_range, stats, **kwargs)


def compute_norm_stats(basins: Sequence[BasinRecord], train_range: DateRange) -> NormStats:
    """Feature means/stds from valid training-range days; never touches test data."""
    rows = []
    for b in basins:
        in_range = train_range.contains(b.dates) & b.forcing_valid
        rows.append(b.forcings[in_range])
    stacked = np.concatenate(rows, axis=0) if rows else np.empty((0, DYNAMIC_DIM))
    if stacked.shape[0] < 2:
        raise DataError("not enough valid training-range forcing days for norm stats")
    statics = np.stack([b.static_attributes for b in basins])
    return NormStats(
        forcing_mean=stacked.mean(axis=0),
        forcing_std=_safe_std(stacked.std(axis=0)),
        static_mean=statics.mean(axis=0),
        static_std=_safe_std(statics.std(axis=0)),
    )


def subset_basins(dataset: DomainDataset, basin_ids: Sequence[str],
                  keep_stats: bool = True) -> DomainDataset:
    """A dataset restricted to the given basins, reusing the parent's stats."""
    wanted = set(basin_ids)
    basins = [b for b in dataset.basins if b.basin_id in wanted]
    if len(basins) != len(wanted):
        missing = wanted - {b.basin_id for b in basins}
        raise KeyError(f"unknown basin ids: {sorted(missing)}")
    stats = dataset.norm_stats if keep_stats else compute_norm_stats(basins, dataset.train_range)
    return DomainDataset(basins, dataset.role, dataset.train_range, dataset.test_range,
                         stats, dataset.forcing_names, dataset.static_names)


def compute_basin_stats(dataset: DomainDataset, epsilon: float = 0.1) -> Dict[str, BasinNormStats]:
    """Training-period discharge mean/variance per basin (for the NSE loss).

    Basins with no observed training-range discharge are omitted.
    """
    out: Dict[str, BasinNormStats] = {}
    for b in dataset.basins:
        sel = dataset.train_range.contains(b.dates) & b.discharge.mask
        obs = b.discharge.values[sel]
        if obs.size >= 1:
            out[b.basin_id] = BasinNormStats(float(obs.mean()), float(obs.var()), epsilon)
    return out


def datasets_equal(a: DomainDataset, b: DomainDataset) -> bool:
    """Bitwise equality of all observable dataset content.

    Values behind a False mask (missing discharge, invalid forcings) are
    placeholders and do not participate; the masks themselves must match
    exactly.
    """
    if (a.role, a.forcing_names, a.static_names) != (b.role, b.forcing_names, b.static_names):
        return False
    if (a.train_range, a.test_range) != (b.train_range, b.test_range):
        return False
    if a.basin_ids != b.basin_ids:
        return False
    for x, y in zip(a.basins, b.basins):
        if not (
            np.array_equal(x.dates, y.dates)
            and np.array_equal(x.forcing_valid, y.forcing_valid)
            and np.array_equal(x.forcings[x.forcing_valid], y.forcings[y.forcing_valid])
            and np.array_equal(x.discharge.mask, y.discharge.mask)
            and np.array_equal(x.discharge.values[x.discharge.mask],
                               y.discharge.values[y.discharge.mask])
            and np.array_equal(x.static_attributes, y.static_attributes)
        ):
            return False
    return True


# ---------------------------------------------------------------------------
# Stage -> discharge


@dataclass(frozen=True)
class RatingCurve:
    """Power-law stage-discharge relationship Q = a * (h - h0)^b."""

    a: float
    b: float
    h0: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError(f"rating curve needs a > 0 and b > 0, got a={self.a}, b={self.b}")

    def discharge(self, stage: float) -> float:
        if stage <= self.h0:
            raise ValueError(f"stage {stage} is at or below the datum offset {self.h0}")
        return self.a * (stage - self.h0) ** self.b


def _log_space_fit(stages: np.ndarray, log_q: np.ndarray, h0: float):
    x = np.log(stages - h0)
    slope, intercept = np.polyfit(x, log_q, 1)
    resid = log_q - (intercept + slope * x)
    return float(np.sum(resid**2)), float(slope), float(intercept)


def _golden_section(f, lo: float, hi: float, tol: float = 1e-12, max_iter: int = 200) -> float:
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_rating_curve(pairs) -> RatingCurve:
    """Fit Q = a*(h - h0)^b to (stage, discharge) measurement pairs.

    For a fixed datum offset h0 the problem is linear least squares in log
    space (log Q = log a + b*log(h - h0)); h0 itself is found by
    golden-section search over [0, min(h)) on the residual sum of squares.

    Args:
        pairs: sequence of (stage_m, discharge_m3s) tuples or an (n, 2) array.

    Raises:
        DataError: fewer than 5 distinct stages, non-positive discharges,
            or otherwise degenerate inputs.
    """
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise DataError(f"expected (n, 2) stage/discharge pairs, got shape {arr.shape}")
    stages, discharges = arr[:, 0], arr[:, 1]
    if not np.all(np.isfinite(arr)):
        raise DataError("non-finite stage/discharge measurements")
    if np.unique(stages).size < 5:
        raise DataError(f"need >= 5 pairs with distinct stages, got {np.unique(stages).size}")
    if np.any(discharges <= 0):
        raise DataError("all discharge measurements must be > 0")
    min_stage = float(stages.min())
    if min_stage <= 0:
        raise DataError("stages must be positive for datum-offset search")

    log_q = np.log(discharges)
    hi = min_stage * (1.0 - 1e-9)

    def rss(h0):
        return _log_space_fit(stages, log_q, h0)[0]

    h0 = _golden_section(rss, 0.0, hi, tol=1e-12 * max(1.0, min_stage))
    _, slope, intercept = _log_space_fit(stages, log_q, h0)
    return RatingCurve(a=float(np.exp(intercept)), b=slope, h0=h0)


def stage_to_discharge(curve: RatingCurve, stages) -> MaskedSeries:
    """Apply a rating curve pointwise; stages at or below h0 become missing."""
    stages = np.asarray(stages, dtype=np.float64)
    if not np.all(np.isfinite(stages)):
        raise DataError("non-finite stage values")
    mask = stages > curve.h0
    values = np.zeros_like(stages)
    values[mask] = curve.a * (stages[mask] - curve.h0) ** curve.b
    return MaskedSeries(values, mask)


SLOTS_PER_DAY = 48  # 30-minute sampling


def resample_daily(timestamps, series: MaskedSeries):
    """Aggregate a 30-minute series to daily means.

    A day's value is the mean of its observed intra-day points; the day is
    masked when fewer than half of its 48 slots are observed.

    Returns:
        (dates, daily_series) where dates is a contiguous datetime64[D] array.
    """
    ts = np.asarray(timestamps, dtype="datetime64[m]")
    if ts.size != len(series):
        raise DataError("timestamps and series lengths differ")
    minutes = ts.astype(np.int64)
    if np.any(minutes % 30 != 0):
        raise DataError("timestamps are not aligned to the 30-minute grid")
    days = ts.astype("datetime64[D]")
    first, last = days.min(), days.max()
    n_days = int((last - first) / DAY) + 1
    index = ((days - first) / DAY).astype(np.int64)

    obs = series.mask
    counts = np.bincount(index[obs], minlength=n_days)
    sums = np.bincount(index[obs], weights=series.values[obs], minlength=n_days)
    day_mask = counts >= SLOTS_PER_DAY // 2
    values = np.zeros(n_days)
    values[day_mask] = sums[day_mask] / counts[day_mask]
    dates = first + np.arange(n_days) * DAY
    return dates, MaskedSeries(values, day_mask)


# ---------------------------------------------------------------------------
# On-disk layout


def _fmt(value: float) -> str:
    return repr(float(value))


def _write_csv(path: Path, header: List[str], rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def save_domain(dataset: DomainDataset, root) -> None:
    """Write a dataset in the documented directory layout."""
    root = Path(root)
    basin_dir = root / BASIN_DIR_NAME
    basin_dir.mkdir(parents=True, exist_ok=True)

    manifest = {
        "format_version": MANIFEST_VERSION,
        "role": dataset.role,
        "train_range": dataset.train_range.as_strings(),
        "test_range": dataset.test_range.as_strings(),
        "units": UNITS,
        "forcings": list(dataset.forcing_names),
        "static_attributes": list(dataset.static_names),
        "basin_ids": dataset.basin_ids,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))

    _write_csv(
        root / STATIC_TABLE_NAME,
        ["basin_id", *dataset.static_names],
        [[b.basin_id, *(_fmt(v) for v in b.static_attributes)] for b in dataset.basins],
    )

    for b in dataset.basins:
        forcing_rows = []
        for i, date in enumerate(b.dates):
            if b.forcing_valid[i]:
                forcing_rows.append([str(date), *(_fmt(v) for v in b.forcings[i])])
            else:
                forcing_rows.append([str(date), "", "", "", ""])
        _write_csv(basin_dir / f"{b.basin_id}_forcings.csv",
                   ["date", *dataset.forcing_names], forcing_rows)

        discharge_rows = [
            [str(date), _fmt(b.discharge.values[i]) if b.discharge.mask[i] else ""]
            for i, date in enumerate(b.dates)
        ]
        _write_csv(basin_dir / f"{b.basin_id}_discharge.csv",
                   ["date", "discharge"], discharge_rows)


def _read_csv(path: Path):
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"empty file: {path}")
        return header, list(reader)


def _parse_range(raw, what: str, default: DateRange) -> DateRange:
    if raw is None:
        return default
    try:
        return DateRange(raw[0], raw[1])
    except Exception as exc:
        raise DataError(f"manifest {what} is invalid: {raw!r}") from exc


def load_domain(root) -> DomainDataset:
    """Load a dataset from the documented layout, validating the schema.

    A manifest without explicit date ranges falls back to the default
    calibration/evaluation splits for its role.

    Raises:
        DataError: missing files or non-contiguous dates.
        SchemaError: unknown or missing static attributes / forcing columns.
    """
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"missing manifest: {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest format_version: {manifest.get('format_version')!r}")

    role = manifest.get("role")
    if role == "source":
        default_train, default_test = DEFAULT_SOURCE_TRAIN, DEFAULT_SOURCE_TEST
    else:
        default_train, default_test = DEFAULT_TARGET_TRAIN, DEFAULT_TARGET_TEST
    train_range = _parse_range(manifest.get("train_range"), "train_range", default_train)
    test_range = _parse_range(manifest.get("test_range"), "test_range", default_test)
    basin_ids = manifest.get("basin_ids")
    if not basin_ids:
        raise DataError("manifest lists no basins")

    declared_statics = tuple(manifest.get("static_attributes", ()))
    if declared_statics != STATIC_NAMES:
        missing = set(STATIC_NAMES) - set(declared_statics)
        unknown = set(declared_statics) - set(STATIC_NAMES)
        raise SchemaError(
            f"static-attribute schema drift: missing {sorted(missing)}, unknown {sorted(unknown)}"
        )
    declared_forcings = tuple(manifest.get("forcings", ()))
    if declared_forcings != FORCING_NAMES:
        raise SchemaError(f"forcing schema drift: {declared_forcings!r}")

    header, rows = _read_csv(root / STATIC_TABLE_NAME)
    if tuple(header) != ("basin_id", *STATIC_NAMES):
        missing = set(STATIC_NAMES) - set(header[1:])
        unknown = set(header[1:]) - set(STATIC_NAMES)
        raise SchemaError(
            f"static table columns drift: missing {sorted(missing)}, unknown {sorted(unknown)}"
        )
    statics = {row[0]: np.array([float(v) for v in row[1:]]) for row in rows}

    basin_dir = root / BASIN_DIR_NAME
    basins = []
    for basin_id in basin_ids:
        if basin_id not in statics:
            raise SchemaError(f"basin {basin_id} missing from the static-attribute table")

        header, rows = _read_csv(basin_dir / f"{basin_id}_forcings.csv")
        if tuple(header) != ("date", *FORCING_NAMES):
            raise SchemaError(f"basin {basin_id}: unexpected forcing columns {header!r}")
        dates = np.array([row[0] for row in rows], dtype="datetime64[D]")
        forcings = np.zeros((len(rows), DYNAMIC_DIM))
        valid = np.ones(len(rows), dtype=bool)
        for i, row in enumerate(rows):
            cells = row[1:]
            if any(c == "" for c in cells):
                valid[i] = False
            else:
                forcings[i] = [float(c) for c in cells]

        header, rows = _read_csv(basin_dir / f"{basin_id}_discharge.csv")
        if tuple(header) != ("date", "discharge"):
            raise SchemaError(f"basin {basin_id}: unexpected discharge columns {header!r}")
        q_dates = np.array([row[0] for row in rows], dtype="datetime64[D]")
        if not np.array_equal(q_dates, dates):
            raise DataError(f"basin {basin_id}: discharge dates disagree with forcing dates")
        q_values = np.zeros(len(rows))
        q_mask = np.zeros(len(rows), dtype=bool)
        for i, row in enumerate(rows):
            if row[1] != "":
                q_values[i] = float(row[1])
                q_mask[i] = True

        basins.append(BasinRecord(basin_id, dates, forcings, valid,
                                  MaskedSeries(q_values, q_mask), statics[basin_id]))

    return DomainDataset.build(basins, role, train_range, test_range)


# ---------------------------------------------------------------------------
# Windowing


@dataclass(frozen=True)
class Sample:
    """One training window: normalized inputs and a physical-unit target."""

    window: np.ndarray      # (sequence_length, input_dim)
    target: float           # discharge on the final day, m3/s (NaN if unobserved)
    basin_id: str
    target_date: np.datetime64


class SampleSet:
    """Window samples sharing per-basin normalized arrays.

    Windows are assembled on access instead of being materialized up
    front; a season of source-domain samples would otherwise occupy
    gigabytes.  Indexing returns materialized :class:`Sample` objects;
    :meth:`gather` assembles whole batches.
    """

    def __init__(self, config: ModelConfig, basin_ids: List[str],
                 dyn_norm: List[np.ndarray], static_norm: Optional[np.ndarray],
                 basin_index: np.ndarray, end_pos: np.ndarray,
                 targets: np.ndarray, target_observed: np.ndarray,
                 target_dates: np.ndarray, basin_variance: np.ndarray):
        self.config = config
        self.basin_ids = basin_ids
        self._dyn = dyn_norm
        self._static = static_norm
        self.basin_index = basin_index
        self.end_pos = end_pos
        self.targets = targets
        self.target_observed = target_observed
        self.target_dates = target_dates
        self.basin_variance = basin_variance

    def __len__(self) -> int:
        return self.basin_index.size

    def __getitem__(self, i: int) -> Sample:
        windows, targets = self.gather(np.array([i]))
        target = targets[0] if self.target_observed[i] else float("nan")
        return Sample(windows[0], float(target), self.basin_ids[self.basin_index[i]],
                      self.target_dates[i])

    def gather(self, indices: np.ndarray):
        """Assemble (windows, targets) arrays for the given sample indices."""
        indices = np.asarray(indices)
        seq_len = self.config.sequence_length
        windows = np.empty((indices.size, seq_len, self.config.input_dim))
        for j, s in enumerate(indices):
            b = self.basin_index[s]
            p = self.end_pos[s]
            windows[j, :, :DYNAMIC_DIM] = self._dyn[b][p - seq_len + 1:p + 1]
        if self._static is not None:
            windows[:, :, DYNAMIC_DIM:] = self._static[self.basin_index[indices]][:, None, :]
        return windows, self.targets[indices]

    def subset_by_basins(self, basin_ids: Sequence[str]) -> "SampleSet":
        wanted = {self.basin_ids.index(b) for b in basin_ids}
        keep = np.isin(self.basin_index, sorted(wanted))
        return self._take(keep)

    def only_observed(self) -> "SampleSet":
        return self._take(self.target_observed)

    def _take(self, keep) -> "SampleSet":
        return SampleSet(self.config, self.basin_ids, self._dyn, self._static,
                         self.basin_index[keep], self.end_pos[keep], self.targets[keep],
                         self.target_observed[keep], self.target_dates[keep],
                         self.basin_variance[keep])

    def per_basin_indices(self) -> Dict[str, np.ndarray]:
        out = {}
        for bi, basin_id in enumerate(self.basin_ids):
            idx = np.flatnonzero(self.basin_index == bi)
            if idx.size:
                out[basin_id] = idx
        return out


def make_samples(dataset: DomainDataset, which: str, config: ModelConfig,
                 require_observed_target: bool = True) -> SampleSet:
    """Window a dataset range into per-day samples.

    One sample per (basin, day) whose look-back window lies inside the
    range and covers no invalid forcing day.  By default only observed
    target days are emitted; pass ``require_observed_target=False`` to get
    one sample per valid window regardless (for simulation/export), with
    NaN targets where unobserved.

    Forcings and static attributes are z-scored with the dataset's
    training-range stats; targets stay in physical units.
    """
    if which not in ("train", "test"):
        raise ValueError(f"range must be 'train' or 'test', got {which!r}")
    date_range = dataset.train_range if which == "train" else dataset.test_range
    seq_len = config.sequence_length
    if seq_len > date_range.days:
        raise DataError(
            f"sequence_length {seq_len} exceeds the {which} range of {date_range.days} days"
        )
    expected = expected_input_dim(config.use_static)
    if config.input_dim != expected:
        raise ShapeMismatchError(
            f"config.input_dim is {config.input_dim}; schema implies {expected} "
            f"(use_static={config.use_static})"
        )

    stats = dataset.norm_stats
    dyn_norm = [stats.z_forcings(b.forcings) for b in dataset.basins]
    static_norm = (
        np.stack([stats.z_statics(b.static_attributes) for b in dataset.basins])
        if config.use_static else None
    )
    train_variance = {}
    for b in dataset.basins:
        sel = dataset.train_range.contains(b.dates) & b.discharge.mask
        obs = b.discharge.values[sel]
        train_variance[b.basin_id] = float(obs.var()) if obs.size else float("nan")

    basin_index, end_pos, targets, observed, dates = [], [], [], [], []
    for bi, b in enumerate(dataset.basins):
        in_range = date_range.contains(b.dates)
        if not in_range.any():
            continue
        positions = np.flatnonzero(in_range)
        start, stop = positions[0], positions[-1]
        # Window must fit inside the range: earliest target is start+T-1.
        candidates = np.arange(start + seq_len - 1, stop + 1)
        if candidates.size == 0:
            continue
        valid_csum = np.concatenate([[0], np.cumsum(b.forcing_valid)])
        window_ok = (valid_csum[candidates + 1] - valid_csum[candidates + 1 - seq_len]) == seq_len
        target_obs = b.discharge.mask[candidates]
        keep = window_ok & target_obs if require_observed_target else window_ok
        chosen = candidates[keep]
        basin_index.append(np.full(chosen.size, bi, dtype=np.int64))
        end_pos.append(chosen)
        targets.append(b.discharge.values[chosen])
        observed.append(b.discharge.mask[chosen])
        dates.append(b.dates[chosen])

    if basin_index:
        basin_index = np.concatenate(basin_index)
        end_pos = np.concatenate(end_pos)
        targets = np.concatenate(targets)
        observed = np.concatenate(observed)
        dates = np.concatenate(dates)
    else:
        basin_index = np.empty(0, dtype=np.int64)
        end_pos = np.empty(0, dtype=np.int64)
        targets = np.empty(0)
        observed = np.empty(0, dtype=bool)
        dates = np.empty(0, dtype="datetime64[D]")

    variance = np.array([train_variance[dataset.basins[bi].basin_id] for bi in basin_index])
    return SampleSet(config, dataset.basin_ids, dyn_norm, static_norm,
                     basin_index, end_pos, targets, observed, dates, variance)


# ---------------------------------------------------------------------------
# Synthetic basin families


@dataclass(frozen=True)
class ParameterRanges:
    """Per-basin draw ranges for the linear-reservoir toy model."""

    k: Tuple[float, float] = (0.08, 0.5)        # storage-to-discharge rate, 1/day
    c: Tuple[float, float] = (0.01, 0.06)       # evaporation coefficient, mm/day/degC
    s0: Tuple[float, float] = (5.0, 50.0)       # initial storage

    def __post_init__(self):
        for name in ("k", "c", "s0"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo < hi):
                raise ValueError(f"invalid range for {name}: ({lo}, {hi})")
        if not (0 < self.k[0] and self.k[1] <= 1.0):
            raise ValueError(f"k range must lie in (0, 1], got {self.k}")


def simulate_linear_reservoir(precip, tmax, k: float, c: float, s0: float):
    """Run the toy rainfall-runoff recursion.

    ``Q_t = k * S_t``, ``E_t = c * max(Tmax_t, 0)``,
    ``S_{t+1} = S_t + P_t - E_t - Q_t``.  Storage is floored at zero so
    evaporation cannot drive it negative.

    Returns:
        (discharge, evaporation) arrays, one value per day.
    """
    precip = np.asarray(precip, dtype=np.float64)
    tmax = np.asarray(tmax, dtype=np.float64)
    n = precip.size
    evap = c * np.maximum(tmax, 0.0)
    discharge = np.empty(n)
    storage = float(s0)
    for t in range(n):
        discharge[t] = k * storage
        storage = max(storage + precip[t] - evap[t] - discharge[t], 0.0)
    return discharge, evap


def _mean_run_length(flags: np.ndarray) -> float:
    runs = _runs(flags)
    if not runs:
        return 0.0
    return float(np.mean([end - start + 1 for start, end in runs]))


def _runs(flags: np.ndarray) -> List[Tuple[int, int]]:
    """Maximal runs of True as inclusive (start, end) index pairs."""
    out = []
    idx = np.flatnonzero(flags)
    if idx.size == 0:
        return out
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    return list(zip(starts.tolist(), ends.tolist()))


def _synthetic_forcings(rng: np.random.Generator, dates: np.ndarray):
    doy = ((dates - dates.astype("datetime64[Y]")) / DAY).astype(np.float64)
    phase_offset = rng.uniform(0.0, 2.0 * np.pi)
    season = np.sin(2.0 * np.pi * doy / 365.25 + phase_offset)

    wet_prob = np.clip(0.35 + 0.25 * season, 0.05, 0.95)
    wet = rng.random(dates.size) < wet_prob
    amounts = rng.gamma(shape=1.6, scale=5.0 * (1.0 + 0.6 * season))
    precip = np.where(wet, amounts, 0.0)

    tmax = 18.0 + 9.0 * season + rng.normal(0.0, 2.0, dates.size)
    tmin = tmax - (6.0 + np.abs(rng.normal(0.0, 1.5, dates.size)))
    humidity = np.clip(rng.normal(0.7, 0.08, dates.size), 0.2, 1.0)
    vapor_pressure = humidity * 610.94 * np.exp(17.625 * tmin / (tmin + 243.04))
    return np.column_stack([precip, tmin, tmax, vapor_pressure])


def generate_synthetic_family(seed: int, n_basins: int, n_days: int,
                              parameter_ranges: Optional[ParameterRanges] = None,
                              *, role: str = "target",
                              start_date: str = "2000-01-01",
                              train_days: Optional[int] = None) -> DomainDataset:
    """Generate a family of linear-reservoir basins with seasonal weather.

    Each basin draws (k, c, s0) from ``parameter_ranges``; those parameters
    leak (noisily) into the static attributes, so static conditioning is
    genuinely informative.  Fully deterministic per seed: every basin uses
    its own spawned RNG stream.
    """
    if n_basins < 1:
        raise ValueError(f"n_basins must be >= 1, got {n_basins}")
    if n_days < 2:
        raise ValueError(f"n_days must be >= 2, got {n_days}")
    ranges = parameter_ranges or ParameterRanges()
    if train_days is None:
        train_days = int(round(0.6 * n_days))
    if not (0 < train_days < n_days):
        raise ValueError(f"train_days must be in (0, n_days), got {train_days}")

    start = np.datetime64(start_date, "D")
    dates = start + np.arange(n_days) * DAY
    basins = []
    for bi in range(n_basins):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(bi,)))
        k = rng.uniform(*ranges.k)
        c = rng.uniform(*ranges.c)
        s0 = rng.uniform(*ranges.s0)

        forcings = _synthetic_forcings(rng, dates)
        precip, tmax = forcings[:, 0], forcings[:, 2]
        discharge, evap = simulate_linear_reservoir(precip, tmax, k, c, s0)

        precip_mean = float(precip.mean())
        pet_mean = float(evap.mean())
        high = precip >= 5.0 * max(precip_mean, 1e-12)
        dry = precip < 1.0
        noise = 1.0 + 0.05 * rng.normal(size=3)
        statics = np.array([
            rng.uniform(50.0, 500.0),            # area
            rng.uniform(500.0, 2500.0),          # elevation
            k * noise[0],                        # slope ~ recession rate
            precip_mean,
            float(high.mean()),
            _mean_run_length(high),
            float(dry.mean()),
            _mean_run_length(dry),
            pet_mean,
            pet_mean / max(precip_mean, 1e-12),  # aridity
            c * 50.0 * noise[1],                 # lai ~ evaporation coefficient
            s0 / 60.0 * noise[2],                # ndvi ~ initial storage
        ])
        basins.append(BasinRecord(
            basin_id=f"basin{bi:03d}",
            dates=dates.copy(),
            forcings=forcings,
            forcing_valid=np.ones(n_days, dtype=bool),
            discharge=MaskedSeries.fully_observed(discharge),
            static_attributes=statics,
        ))

    train_range = DateRange(start, start + train_days * DAY)
    test_range = DateRange(start + train_days * DAY, start + n_days * DAY)
    return DomainDataset.build(basins, role, train_range, test_range)


def inject_gaps(dataset: DomainDataset, seed: int, gap_fraction: float) -> DomainDataset:
    """Mask contiguous random discharge blocks totalling ``gap_fraction`` of days.

    Forcings are untouched; per basin, exactly ``floor(gap_fraction * n)``
    days are newly covered by gap blocks (on top of any existing mask).
    """
    if not (0.0 <= gap_fraction < 1.0):
        raise ValueError(f"gap_fraction must be in [0, 1), got {gap_fraction}")
    new_basins = []
    for bi, b in enumerate(dataset.basins):
        record = b.copy()
        n = record.n_days
        target = int(np.floor(gap_fraction * n))
        if target > 0:
            rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(bi,)))
            gap = np.zeros(n, dtype=bool)
            remaining = target
            while remaining > 0:
                length = int(min(remaining, rng.geometric(1.0 / 15.0)))
                free = ~gap
                csum = np.concatenate([[0], np.cumsum(free)])
                starts = np.flatnonzero(csum[length:] - csum[:-length] == length)
                if starts.size == 0:
                    # No free run that long; shrink to the longest one.
                    length = max(end - start + 1 for start, end in _runs(free))
                    csum = np.concatenate([[0], np.cumsum(free)])
                    starts = np.flatnonzero(csum[length:] - csum[:-length] == length)
                start = int(rng.choice(starts))
                gap[start:start + length] = True
                remaining -= length
            record.discharge = MaskedSeries(record.discharge.values,
                                            record.discharge.mask & ~gap)
        new_basins.append(record)
    return DomainDataset(new_basins, dataset.role, dataset.train_range, dataset.test_range,
                         dataset.norm_stats, dataset.forcing_names, dataset.static_names)


# ---------------------------------------------------------------------------
# Availability reporting


@dataclass(frozen=True)
class BasinAvailability:
    """Observed fraction and maximal missing runs for one basin."""

    basin_id: str
    observed_fraction: float
    gaps: List[Tuple[int, int]]  # inclusive index intervals


def availability_report(dataset: DomainDataset) -> Dict[str, BasinAvailability]:
    """Exact observed fractions and maximal gap intervals per basin."""
    out = {}
    for b in dataset.basins:
        mask = b.discharge.mask
        out[b.basin_id] = BasinAvailability(
            basin_id=b.basin_id,
            observed_fraction=float(mask.mean()),
            gaps=_runs(~mask),
        )
    return out


def write_availability_heatmap(dataset: DomainDataset, path) -> None:
    """Basins-by-dates CSV of discharge values, empty cells where missing."""
    start = min(b.dates[0] for b in dataset.basins)
    end = max(b.dates[-1] for b in dataset.basins)
    n = int((end - start) / DAY) + 1
    all_dates = start + np.arange(n) * DAY
    rows = []
    for b in dataset.basins:
        cells = [""] * n
        offset = int((b.dates[0] - start) / DAY)
        for i in range(b.n_days):
            if b.discharge.mask[i]:
                cells[offset + i] = _fmt(b.discharge.values[i])
        rows.append([b.basin_id, *cells])
    _write_csv(Path(path), ["basin_id", *(str(d) for d in all_dates)], rows)
