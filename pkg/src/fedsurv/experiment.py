"""Config-driven experiment runner: trains the requested scheme/model/sigma
grid across seeds, evaluates C-index, IBS and NIBLL on the held-out test
split, and aggregates a paper-style report with delta and rstd summaries.

Config files are flat ``key = value`` text with dotted keys (diff-friendly);
see DEFAULTS for the full key set. Comma-separated values make lists.
"""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import federation, nn
from .accountant import AccountantInputs, epsilon as compute_epsilon
from .data import (SurvivalDataset, SynthSpec, discretize, duration_moments,
                   generate_synthetic, load_csv, split_and_partition, standardize)
from .federation import FedConfig, PrivacyParams
from .metrics import censoring_km, concordance_td, integrated_brier, \
    negative_ibll, time_grid
from .models import Head, predict_survival

METRICS = ("cindex", "ibs", "nibll")
LOWER_IS_BETTER = {"cindex": False, "ibs": True, "nibll": True}
DP_SCHEMES = ("dpfed", "dpfed-post")

DEFAULTS = {
    "data.source": "synthetic",
    "data.path": "",
    "data.duration_col": "duration",
    "data.event_col": "event",
    "synth.n": "2000",
    "synth.p": "7",
    "synth.beta": "0.8,-0.6,0.5,0.4,-0.3,0.2,0.1",
    "synth.shape": "1.3",
    "synth.scale": "40.0",
    "synth.censor_rate": "0.015",
    "synth.seed": "0",
    "model": "coxph",
    "scheme": "centralized,stdfed",
    "fed.n_clients": "10",
    "fed.clients_per_round": "5",
    "fed.local_epochs": "50",
    "fed.batch_size": "64",
    "fed.rounds": "50",
    "fed.lr": "1e-4",
    "fed.local_opt": "adam",
    "privacy.sigma": "2,3",
    "privacy.delta": "1e-3",
    "privacy.post_clip_factor": "2",
    "head.controls_per_case": "1",
    "head.alpha": "0.2",
    "head.sigma_rank": "0.1",
    "head.bin_width": "12",
    "seeds": "1,2,3,4,5",
    "metrics.grid_size": "100",
    "report.traces": "1",
    "out": "",
}


def parse_kv(text: str) -> dict[str, str]:
    """Flat dotted-key config: one ``key = value`` per line, # comments."""
    out = {}
    for line_num, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {line_num}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict[str, str]

    @classmethod
    def from_mapping(cls, mapping: dict[str, str] | None = None,
                     overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        kv = dict(DEFAULTS)
        for src in (mapping or {}), (overrides or {}):
            for key, value in src.items():
                if key not in DEFAULTS:
                    raise ValueError(f"unknown config key {key!r}")
                kv[key] = str(value)
        cfg = cls(kv)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, overrides: dict[str, str] | None = None) -> "ExperimentConfig":
        return cls.from_mapping(parse_kv(Path(path).read_text()), overrides)

    def validate(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        for m in self.models:
            if m not in ("coxph", "coxcc", "coxtime", "deephit"):
                raise ValueError(f"unknown model {m!r}")
        for s in self.schemes:
            if s not in federation.SCHEMES:
                raise ValueError(f"unknown scheme {s!r}")
        if any(s in DP_SCHEMES for s in self.schemes) and not self.sigmas:
            raise ValueError("dp schemes need privacy.sigma")
        self.fed_config(0)  # runs FedConfig validation

    # typed accessors -------------------------------------------------------
    @property
    def models(self) -> tuple[str, ...]:
        return _strs(self.raw["model"])

    @property
    def schemes(self) -> tuple[str, ...]:
        return _strs(self.raw["scheme"])

    @property
    def sigmas(self) -> tuple[float, ...]:
        return _floats(self.raw["privacy.sigma"])

    @property
    def seeds(self) -> tuple[int, ...]:
        return _ints(self.raw["seeds"])

    @property
    def delta(self) -> float:
        return float(self.raw["privacy.delta"])

    @property
    def post_clip_factor(self) -> float:
        return float(self.raw["privacy.post_clip_factor"])

    @property
    def grid_size(self) -> int:
        return int(self.raw["metrics.grid_size"])

    @property
    def out_dir(self) -> Path | None:
        return Path(self.raw["out"]) if self.raw["out"] else None

    def fed_config(self, seed: int, scheme: str = "stdfed") -> FedConfig:
        r = self.raw
        return FedConfig(n_clients=int(r["fed.n_clients"]),
                         clients_per_round=int(r["fed.clients_per_round"]),
                         local_epochs=int(r["fed.local_epochs"]),
                         batch_size=int(r["fed.batch_size"]),
                         rounds=int(r["fed.rounds"]), lr=float(r["fed.lr"]),
                         scheme=scheme, seed=seed,
                         local_opt=r["fed.local_opt"])

    def synth_spec(self) -> SynthSpec:
        r = self.raw
        return SynthSpec(n=int(r["synth.n"]), p=int(r["synth.p"]),
                         beta=_floats(r["synth.beta"]),
                         weibull_shape=float(r["synth.shape"]),
                         weibull_scale=float(r["synth.scale"]),
                         censor_rate=float(r["synth.censor_rate"]),
                         seed=int(r["synth.seed"]))

    def load_dataset(self) -> SurvivalDataset:
        if self.raw["data.source"] == "synthetic":
            return generate_synthetic(self.synth_spec())
        if self.raw["data.source"] == "csv":
            return load_csv(self.raw["data.path"], self.raw["data.duration_col"],
                            self.raw["data.event_col"])
        raise ValueError(f"unknown data.source {self.raw['data.source']!r}")


@dataclass(frozen=True)
class RunResult:
    scheme: str
    model: str
    sigma: float | None
    seed: int
    metrics: dict[str, float] | None
    error: str | None = None


@dataclass(frozen=True)
class ReportCell:
    scheme: str
    model: str
    sigma: float | None
    epsilon: float | None
    n_seeds: int
    means: dict[str, float]
    stds: dict[str, float]

    def label(self) -> str:
        if self.sigma is None:
            return self.scheme
        return f"{self.scheme} sigma={self.sigma:g}"


@dataclass
class ExperimentReport:
    cells: list[ReportCell]
    runs: list[RunResult] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def cell(self, scheme: str, model: str, sigma: float | None = None) -> ReportCell:
        for c in self.cells:
            if (c.scheme, c.model) == (scheme, model) and _sigma_eq(c.sigma, sigma):
                return c
        raise KeyError(f"no cell for {(scheme, model, sigma)}")


def _sigma_eq(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return float(a) == float(b)


# ---------------------------------------------------------------------------
# the per-seed pipeline

@dataclass
class _SeedData:
    shards: list[SurvivalDataset]
    train: SurvivalDataset
    test: SurvivalDataset
    grid: np.ndarray
    censor: object
    time_mean: float
    time_std: float


def _prepare_seed(dataset: SurvivalDataset, cfg: ExperimentConfig, seed: int) -> _SeedData:
    fed = cfg.fed_config(seed)
    shards_raw, test_raw = split_and_partition(dataset, 0.2, fed.n_clients, seed)
    train_raw = SurvivalDataset(
        np.concatenate([s.x for s in shards_raw]),
        np.concatenate([s.durations for s in shards_raw]),
        np.concatenate([s.events for s in shards_raw]),
        dataset.feature_names)
    train, test, tf = standardize(train_raw, test_raw)
    shards = [tf.apply(s) for s in shards_raw]
    t_mean, t_std = duration_moments(train)
    return _SeedData(shards=shards, train=train, test=test,
                     grid=time_grid(test.durations, cfg.grid_size),
                     censor=censoring_km(train.durations, train.events),
                     time_mean=t_mean, time_std=t_std)


def build_head(cfg: ExperimentConfig, model: str, sd: _SeedData) -> tuple[nn.MlpSpec, Head]:
    r = cfg.raw
    kwargs = dict(controls_per_case=int(r["head.controls_per_case"]),
                  alpha=float(r["head.alpha"]),
                  sigma_rank=float(r["head.sigma_rank"]))
    if model == "deephit":
        bins, _ = discretize(sd.train.durations, float(r["head.bin_width"]))
        kwargs["bins"] = bins
    if model == "coxtime":
        kwargs["time_mean"], kwargs["time_std"] = sd.time_mean, sd.time_std
    head = Head(kind=model, **kwargs)
    spec = nn.MlpSpec((head.net_input_dim(sd.train.p), 32, 32, head.output_dim()))
    return spec, head


def evaluate_model(kind: str, spec, params, head: Head, train: SurvivalDataset,
                   test: SurvivalDataset, censor, grid) -> dict[str, float]:
    """All three test metrics for one trained parameter vector."""
    aux = head.fit_aux(spec, params, train.x, train.durations, train.events)
    curves = predict_survival(kind, spec, params, aux, test.x, grid)
    cif = [c.complement() for c in curves]
    return {
        "cindex": concordance_td(cif, test.durations, test.events),
        "ibs": integrated_brier(curves, test.durations, test.events, censor, grid),
        "nibll": negative_ibll(curves, test.durations, test.events, censor, grid),
    }


def _run_one(cfg: ExperimentConfig, sd: _SeedData, model: str, scheme: str,
             sigma: float | None, seed: int, sensitivity: float | None):
    spec, head = build_head(cfg, model, sd)
    init = nn.init_params(spec, federation.init_stream(seed))
    fed = cfg.fed_config(seed, scheme)
    if scheme == "centralized":
        params, trace = federation.run_centralized(fed, spec, head, sd.train, init)
    else:
        privacy = None
        if scheme in DP_SCHEMES:
            post = cfg.post_clip_factor * sensitivity if scheme == "dpfed-post" else None
            privacy = PrivacyParams(sensitivity=sensitivity, noise_multiplier=sigma,
                                    delta=cfg.delta, post_clip=post)
        params, trace = federation.run_federated(fed, privacy, spec, head,
                                                 sd.shards, init)
    metrics = evaluate_model(model, spec, params, head, sd.train, sd.test,
                             sd.censor, sd.grid)
    return metrics, trace


def run_experiment(cfg: ExperimentConfig, progress=None) -> ExperimentReport:
    """Run the full grid; failed cells are recorded, not fatal."""
    dataset = cfg.load_dataset()
    jobs = []
    for seed in cfg.seeds:
        sd = _prepare_seed(dataset, cfg, seed)
        sens: dict[str, float] = {}
        for model in cfg.models:
            if any(s in DP_SCHEMES for s in cfg.schemes):
                spec, head = build_head(cfg, model, sd)
                init = nn.init_params(spec, federation.init_stream(seed))
                norms = federation.warmup_update_norms(spec, head, init, sd.shards,
                                                       cfg.fed_config(seed))
                sens[model] = federation.calibrate_sensitivity(norms)
            for scheme in cfg.schemes:
                for sigma in (cfg.sigmas if scheme in DP_SCHEMES else (None,)):
                    jobs.append((seed, sd, model, scheme, sigma, sens.get(model)))

    def execute(job):
        seed, sd, model, scheme, sigma, sensitivity = job
        try:
            metrics, trace = _run_one(cfg, sd, model, scheme, sigma, seed, sensitivity)
            return RunResult(scheme, model, sigma, seed, metrics), trace
        except Exception as exc:  # contained: other cells still run
            msg = f"seed={seed} scheme={scheme} model={model} sigma={sigma}: {exc}"
            return RunResult(scheme, model, sigma, seed, None, error=msg), None

    workers = int(os.environ.get("FEDSURV_WORKERS", "1") or "1")
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(execute, jobs))
    else:
        outcomes = []
        for job in jobs:
            outcomes.append(execute(job))
            if progress:
                progress(job, outcomes[-1][0])

    runs = [r for r, _ in outcomes]
    traces = {(r.scheme, r.model, r.sigma, r.seed): t for (r, t) in outcomes
              if t is not None}
    if cfg.out_dir and cfg.raw["report.traces"] == "1":
        _write_traces(cfg.out_dir, traces)

    eps_cache: dict[float, float] = {}
    fed0 = cfg.fed_config(cfg.seeds[0])

    def eps_for(sigma: float) -> float:
        if sigma not in eps_cache:
            inputs = AccountantInputs(sigma, fed0.sampling_prob, fed0.rounds, cfg.delta)
            eps_cache[sigma] = compute_epsilon(inputs)[0]
        return eps_cache[sigma]

    cells = []
    for model in cfg.models:
        for scheme in cfg.schemes:
            for sigma in (cfg.sigmas if scheme in DP_SCHEMES else (None,)):
                good = [r for r in runs
                        if (r.scheme, r.model) == (scheme, model)
                        and _sigma_eq(r.sigma, sigma) and r.metrics is not None]
                if not good:
                    continue
                means = {m: float(np.mean([r.metrics[m] for r in good])) for m in METRICS}
                stds = {m: float(np.std([r.metrics[m] for r in good])) for m in METRICS}
                cells.append(ReportCell(scheme, model, sigma,
                                        eps_for(sigma) if sigma is not None else None,
                                        len(good), means, stds))
    failures = [r.error for r in runs if r.error]
    return ExperimentReport(cells, runs, failures)


def _write_traces(out_dir: Path, traces: dict):
    out_dir.mkdir(parents=True, exist_ok=True)
    for (scheme, model, sigma, seed), trace in traces.items():
        tag = f"{scheme}_{model}" + (f"_s{sigma:g}" if sigma is not None else "")
        path = out_dir / f"trace_{tag}_seed{seed}.jsonl"
        with path.open("w") as fh:
            for row in trace:
                fh.write(json.dumps(row.record()) + "\n")


# ---------------------------------------------------------------------------
# summaries

def compute_delta(report: ExperimentReport, scheme_a: str, scheme_b: str) -> dict:
    """Relative improvement of B over A per matched (model, sigma) cell and
    metric, sign-flipped for IBS/NIBLL so positive always means better.
    Cells with metric(A) = 0 are excluded with a note.
    """
    a_cells = [c for c in report.cells if c.scheme == scheme_a]
    b_cells = [c for c in report.cells if c.scheme == scheme_b]
    if not a_cells or not b_cells:
        raise KeyError(f"schemes {scheme_a!r}/{scheme_b!r} not both present")
    deltas, notes = {}, []
    for cb in b_cells:
        match = [ca for ca in a_cells if ca.model == cb.model
                 and (ca.sigma is None or _sigma_eq(ca.sigma, cb.sigma))]
        if not match:
            continue
        ca = match[0]
        for metric in METRICS:
            base = ca.means[metric]
            if base == 0.0:
                notes.append(f"{metric}/{cb.model}: metric(A)=0, delta undefined")
                continue
            d = (cb.means[metric] - base) / base
            if LOWER_IS_BETTER[metric]:
                d = -d
            deltas[(cb.model, cb.sigma, metric)] = d
    avg = float(np.mean(list(deltas.values()))) if deltas else float("nan")
    return {"deltas": deltas, "average": avg, "notes": notes}


def rstd(report: ExperimentReport, scheme: str, metric: str = "cindex") -> float:
    """Average std/mean over the scheme's cells (paper's stability summary)."""
    cells = [c for c in report.cells if c.scheme == scheme]
    if not cells:
        raise KeyError(f"scheme {scheme!r} not in report")
    vals = [c.stds[metric] / c.means[metric] for c in cells if c.means[metric] != 0]
    if not vals:
        raise ValueError(f"rstd undefined for {scheme}/{metric}")
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# emission

CSV_COLUMNS = ("scheme", "model", "sigma", "epsilon", "n_seeds",
               "cindex_mean", "cindex_std", "ibs_mean", "ibs_std",
               "nibll_mean", "nibll_std")


def report_to_csv_text(report: ExperimentReport) -> str:
    lines = [",".join(CSV_COLUMNS)]
    for c in report.cells:
        row = [c.scheme, c.model,
               "" if c.sigma is None else repr(float(c.sigma)),
               "" if c.epsilon is None else repr(float(c.epsilon)),
               str(c.n_seeds)]
        for m in METRICS:
            row += [repr(c.means[m]), repr(c.stds[m])]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def report_from_csv_text(text: str) -> ExperimentReport:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0] != ",".join(CSV_COLUMNS):
        raise ValueError("unrecognized report csv header")
    cells = []
    for line in lines[1:]:
        f = line.split(",")
        means = {m: float(f[5 + 2 * i]) for i, m in enumerate(METRICS)}
        stds = {m: float(f[6 + 2 * i]) for i, m in enumerate(METRICS)}
        cells.append(ReportCell(f[0], f[1],
                                float(f[2]) if f[2] else None,
                                float(f[3]) if f[3] else None,
                                int(f[4]), means, stds))
    return ExperimentReport(cells)


def format_table(report: ExperimentReport) -> str:
    """Text table in the metric x model x scheme layout of the paper tables."""
    labels = []
    for c in report.cells:
        if c.label() not in labels:
            labels.append(c.label())
    width = max([len(l) for l in labels] + [12]) + 2
    head = "metric  model    " + "".join(l.ljust(width) for l in labels)
    lines = [head, "-" * len(head)]
    models = []
    for c in report.cells:
        if c.model not in models:
            models.append(c.model)
    for metric in METRICS:
        for model in models:
            row = f"{metric:<7} {model:<8} "
            for label in labels:
                cell = next((c for c in report.cells
                             if c.label() == label and c.model == model), None)
                if cell is None:
                    row += "-".ljust(width)
                else:
                    row += f"{cell.means[metric]:.4f}+-{cell.stds[metric]:.4f}".ljust(width)
            lines.append(row)
    eps_cells = [c for c in report.cells if c.epsilon is not None]
    if eps_cells:
        seen = {}
        for c in eps_cells:
            seen[c.sigma] = c.epsilon
        lines.append("")
        for sigma, eps in sorted(seen.items()):
            lines.append(f"epsilon(sigma={sigma:g}) = {eps:.4f}")
    return "\n".join(lines) + "\n"


def emit_report(report: ExperimentReport, out_dir,
                formats: tuple[str, ...] = ("table", "csv", "records")) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "table" in formats:
        path = out_dir / "report.txt"
        path.write_text(format_table(report))
        written.append(path)
    if "csv" in formats:
        path = out_dir / "report.csv"
        path.write_text(report_to_csv_text(report))
        written.append(path)
    if "records" in formats:
        path = out_dir / "runs.jsonl"
        with path.open("w") as fh:
            for r in report.runs:
                fh.write(json.dumps({"scheme": r.scheme, "model": r.model,
                                     "sigma": r.sigma, "seed": r.seed,
                                     "metrics": r.metrics, "error": r.error}) + "\n")
        written.append(path)
    return written
