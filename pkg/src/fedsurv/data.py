"""Dataset ingestion, preprocessing, client partitioning, and a synthetic
Weibull proportional-hazards generator.

CSV schema: a header row, feature columns, plus a duration and an event
column (default names "duration" / "event"). Durations are positive reals
(months), events are 0/1.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class SurvivalDataset:
    """Covariates plus (duration, event) labels."""

    x: np.ndarray
    durations: np.ndarray
    events: np.ndarray
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.durations = np.asarray(self.durations, dtype=float).ravel()
        self.events = np.asarray(self.events, dtype=np.int64).ravel()
        if self.x.ndim != 2:
            raise ValueError("feature matrix must be 2-D")
        if not (self.x.shape[0] == self.durations.size == self.events.size):
            raise ValueError("features, durations and events must agree in length")
        if np.isnan(self.x).any() or np.isnan(self.durations).any():
            raise ValueError("dataset contains missing values")
        if self.durations.size and self.durations.min() <= 0:
            raise ValueError("durations must be positive")
        if not np.isin(self.events, (0, 1)).all():
            raise ValueError("events must be 0 or 1")

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "SurvivalDataset":
        idx = np.asarray(idx)
        return SurvivalDataset(self.x[idx], self.durations[idx], self.events[idx],
                               self.feature_names)


def load_csv(path, duration_col: str = "duration", event_col: str = "event") -> SurvivalDataset:
    """Parse a survival CSV; every non-label column becomes a float feature."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        for col in (duration_col, event_col):
            if col not in header:
                raise ValueError(f"{path}: missing required column {col!r}")
        d_pos = header.index(duration_col)
        e_pos = header.index(event_col)
        feat_pos = [i for i in range(len(header)) if i not in (d_pos, e_pos)]
        names = [header[i] for i in feat_pos]

        feats, durs, evs = [], [], []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ValueError(f"{path}: row {row_num} has {len(row)} fields, "
                                 f"expected {len(header)}")
            vals = []
            for i in feat_pos:
                cell = row[i].strip()
                if cell == "":
                    raise ValueError(f"{path}: missing value at row {row_num}, "
                                     f"column {header[i]!r}")
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ValueError(f"{path}: non-numeric value {cell!r} at row "
                                     f"{row_num}, column {header[i]!r}") from None
            try:
                dur = float(row[d_pos])
            except ValueError:
                raise ValueError(f"{path}: non-numeric duration at row {row_num}") from None
            if dur <= 0:
                raise ValueError(f"{path}: nonpositive duration at row {row_num}")
            ev_cell = row[e_pos].strip()
            if ev_cell not in ("0", "1", "0.0", "1.0"):
                raise ValueError(f"{path}: event must be 0 or 1 at row {row_num}, "
                                 f"got {ev_cell!r}")
            feats.append(vals)
            durs.append(dur)
            evs.append(int(float(ev_cell)))
    if not durs:
        raise ValueError(f"{path}: no data rows")
    return SurvivalDataset(np.array(feats), np.array(durs), np.array(evs), names)


def emit_csv(ds: SurvivalDataset, path) -> Path:
    """Write a dataset back out; float repr round-trips bit-exactly."""
    path = Path(path)
    names = ds.feature_names or [f"x{i}" for i in range(ds.p)]
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(names) + ["duration", "event"])
        for i in range(ds.n):
            writer.writerow([repr(v) for v in ds.x[i]]
                            + [repr(float(ds.durations[i])), int(ds.events[i])])
    return path


@dataclass(frozen=True)
class StandardizeTransform:
    """Per-feature train mean/std; constant features map to zero."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, ds: SurvivalDataset) -> SurvivalDataset:
        safe = np.where(self.std > 0, self.std, 1.0)
        return SurvivalDataset((ds.x - self.mean) / safe, ds.durations, ds.events,
                               ds.feature_names)


def standardize(train: SurvivalDataset, *others: SurvivalDataset):
    """Fit (population) mean/std on the train split and apply everywhere.

    Returns (train', others'..., transform).
    """
    if train.n == 0:
        raise ValueError("cannot standardize an empty training split")
    mean = train.x.mean(axis=0)
    std = train.x.std(axis=0)  # population std, ddof=0
    tf = StandardizeTransform(mean, std)
    return (tf.apply(train), *[tf.apply(o) for o in others], tf)


def duration_moments(ds: SurvivalDataset) -> tuple[float, float]:
    """Train-split duration mean/std for the coxtime time covariate."""
    return float(ds.durations.mean()), float(ds.durations.std())


def split_and_partition(ds: SurvivalDataset, test_fraction: float, n_clients: int,
                        seed: int, min_events_per_shard: int = 2, max_tries: int = 100):
    """Random 80/20-style split, then cut the training part into n_clients
    near-equal shards (sizes differ by at most 1).

    Permutations are redrawn (up to max_tries) until every shard has at
    least min_events_per_shard events and the test split has one.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    n_test = int(round(ds.n * test_fraction))
    n_train = ds.n - n_test
    if n_train < n_clients:
        raise ValueError(f"cannot split {n_train} training rows into {n_clients} shards")
    rng = np.random.default_rng(np.random.SeedSequence([_nonneg(seed), _TAG_SPLIT]))
    for _ in range(max_tries):
        perm = rng.permutation(ds.n)
        train_idx, test_idx = perm[:n_train], perm[n_train:]
        shard_idx = np.array_split(train_idx, n_clients)
        shards = [ds.subset(s) for s in shard_idx]
        test = ds.subset(test_idx)
        ok = all(int(s.events.sum()) >= min_events_per_shard for s in shards)
        if ok and int(test.events.sum()) >= 1:
            return shards, test
    raise ValueError(f"no permutation in {max_tries} tries gave every shard "
                     f">= {min_events_per_shard} events")


_TAG_SPLIT = 11
_TAG_SYNTH = 12


def _nonneg(seed: int) -> int:
    if seed < 0:
        raise ValueError("seeds must be non-negative")
    return int(seed)


@dataclass(frozen=True)
class SynthSpec:
    """Weibull proportional-hazards generator with exponential censoring.

    Event times follow hazard h0(t) * exp(beta . x) with a Weibull baseline
    H0(t) = (t / scale)^shape; observed time is min(event, censor) with the
    event flag recording which fired first.
    """

    n: int = 2000
    p: int = 7
    beta: tuple[float, ...] = (0.8, -0.6, 0.5, 0.4, -0.3, 0.2, 0.1)
    weibull_shape: float = 1.3
    weibull_scale: float = 40.0
    censor_rate: float = 0.015  # calibrated: ~40% censored (see tests)
    seed: int = 0

    def __post_init__(self):
        if self.n < 10 or self.p < 1:
            raise ValueError("need n >= 10 and p >= 1")
        if min(self.weibull_shape, self.weibull_scale, self.censor_rate) <= 0:
            raise ValueError("shape, scale and censor_rate must be positive")
        if len(self.beta) != self.p:
            raise ValueError(f"beta has {len(self.beta)} entries for p={self.p}")


def generate_synthetic(spec: SynthSpec) -> SurvivalDataset:
    rng = np.random.default_rng(np.random.SeedSequence([_nonneg(spec.seed), _TAG_SYNTH]))
    x = rng.standard_normal((spec.n, spec.p))
    lin = x @ np.asarray(spec.beta)
    u = rng.uniform(size=spec.n)
    # invert S(t|x) = exp(-(t/scale)^shape * e^lin) at u
    t_event = spec.weibull_scale * (-np.log(u) * np.exp(-lin)) ** (1.0 / spec.weibull_shape)
    t_censor = rng.exponential(1.0 / spec.censor_rate, size=spec.n)
    t = np.minimum(t_event, t_censor)
    e = (t_event <= t_censor).astype(np.int64)
    names = [f"x{i}" for i in range(spec.p)]
    return SurvivalDataset(x, t, e, names)


@dataclass(frozen=True)
class TimeBins:
    """Uniform half-open bins [k*w, (k+1)*w) covering (0, max duration]."""

    edges: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=float).ravel()
        if edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly increasing, >= 2 of them")
        object.__setattr__(self, "edges", edges)

    @property
    def n_bins(self) -> int:
        return self.edges.size - 1

    def assign(self, durations):
        """Bin index per duration, clamping past-the-end values to the last bin."""
        t = np.asarray(durations, dtype=float)
        idx = np.searchsorted(self.edges, t, side="right") - 1
        return self, np.clip(idx, 0, self.n_bins - 1).astype(np.int64)


def discretize(durations, width: float):
    """Build uniform TimeBins of the given width and assign every duration."""
    if width <= 0:
        raise ValueError("bin width must be positive")
    t = np.asarray(durations, dtype=float)
    n_bins = max(1, int(np.ceil(t.max() / width)))
    bins = TimeBins(np.arange(n_bins + 1) * width)
    return bins.assign(t)
