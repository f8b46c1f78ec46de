"""Survival loss heads with analytic gradients, baseline-hazard estimation,
and survival-curve prediction.

Four heads are supported: coxph (full partial likelihood), coxcc
(case-control approximation), coxtime (case-control with the event time fed
to the network as an extra covariate), and deephit (discrete-time pmf with a
ranking penalty). Risk sets include ties: j is at risk for event i whenever
durations[j] >= durations[i].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .data import TimeBins
from .stepfun import StepFunction

PROB_FLOOR = 1e-7

MODEL_KINDS = ("coxph", "coxcc", "coxtime", "deephit")


def _check_labels(durations, events):
    t = np.asarray(durations, dtype=float).ravel()
    e = np.asarray(events).ravel()
    if t.shape != e.shape:
        raise ValueError(f"durations {t.shape} and events {e.shape} differ in length")
    if t.size and t.min() <= 0:
        raise ValueError("durations must be positive")
    if not np.isin(e, (0, 1)).all():
        raise ValueError("events must be 0 or 1")
    return t, e.astype(np.int64)


def coxph_loss(g, durations, events):
    """Average negative Cox partial log-likelihood and its gradient wrt g.

    Returns (loss, dloss/dg). A batch without events is defined as loss 0
    with a zero gradient so small federated batches never abort a round.
    """
    g = np.asarray(g, dtype=float).ravel()
    t, e = _check_labels(durations, events)
    if g.shape != t.shape:
        raise ValueError(f"scores {g.shape} and durations {t.shape} differ in length")
    n = g.size
    if e.sum() == 0:
        return 0.0, np.zeros(n)

    order = np.argsort(t, kind="stable")
    shift = g.max()
    gs = g[order] - shift
    ts = t[order]
    ev = e[order] == 1
    # suffix log-sum-exp; tied times share the suffix of their group start
    rev_lse = np.logaddexp.accumulate(gs[::-1])[::-1]
    start = np.searchsorted(ts, ts, side="left")
    lse = rev_lse[start]
    loss = float(np.sum(lse[ev] - gs[ev]) / n)

    contrib = np.zeros(n)
    np.add.at(contrib, start[ev], np.exp(-lse[ev]))
    weight = np.cumsum(contrib)
    grad_sorted = (np.exp(gs) * weight - ev) / n
    grad = np.empty(n)
    grad[order] = grad_sorted
    return loss, grad


def sample_controls(durations, events, controls_per_case, rng):
    """Draw controls uniformly with replacement from each event's risk set
    minus the event itself.

    Returns (case_idx, ctrl_idx) with ctrl_idx shaped
    (n_cases, controls_per_case). Events whose risk set holds only
    themselves are dropped (their term would be log 1 = 0).
    """
    if controls_per_case < 1:
        raise ValueError("controls_per_case must be >= 1")
    t, e = _check_labels(durations, events)
    n = t.size
    order = np.argsort(t, kind="stable")
    ts = t[order]
    start = np.searchsorted(ts, ts, side="left")
    pos_of = np.empty(n, dtype=np.int64)
    pos_of[order] = np.arange(n)

    cases, ctrls = [], []
    for i in np.flatnonzero(e == 1):
        lo = start[pos_of[i]]
        m = n - lo  # risk-set size including the case
        if m <= 1:
            continue
        draws = rng.integers(0, m - 1, size=controls_per_case)
        own = pos_of[i] - lo
        draws = np.where(draws >= own, draws + 1, draws)  # skip self, stay uniform
        cases.append(i)
        ctrls.append(order[lo + draws])
    if not cases:
        return np.empty(0, dtype=np.int64), np.empty((0, controls_per_case), dtype=np.int64)
    return np.asarray(cases, dtype=np.int64), np.stack(ctrls)


def case_control_loss(g, case_idx, ctrl_idx, n):
    """Sum over cases of log(1 + sum_c exp(g_c - g_case)), divided by n.

    ctrl_idx may be a (n_cases, k) array or a list of per-case index arrays
    (ragged control sets, e.g. a full risk set). Returns (loss, dloss/dg).
    """
    g = np.asarray(g, dtype=float).ravel()
    grad = np.zeros(g.size)
    case_idx = np.asarray(case_idx, dtype=np.int64)
    if case_idx.size == 0:
        return 0.0, grad

    loss = 0.0
    if isinstance(ctrl_idx, np.ndarray) and ctrl_idx.ndim == 2:
        d = g[ctrl_idx] - g[case_idx][:, None]
        mx = np.maximum(d.max(axis=1), 0.0)
        z = np.exp(d - mx[:, None])
        denom = np.exp(-mx) + z.sum(axis=1)
        loss = float(np.sum(mx + np.log(denom)))
        p = z / denom[:, None]
        np.add.at(grad, ctrl_idx.ravel(), p.ravel())
        np.add.at(grad, case_idx, -p.sum(axis=1))
    else:
        for i, ctrl in zip(case_idx, ctrl_idx):
            ctrl = np.asarray(ctrl, dtype=np.int64)
            d = g[ctrl] - g[i]
            mx = max(d.max(), 0.0)
            z = np.exp(d - mx)
            denom = np.exp(-mx) + z.sum()
            loss += mx + np.log(denom)
            p = z / denom
            np.add.at(grad, ctrl, p)
            grad[i] -= p.sum()
    return loss / n, grad / n


def coxcc_loss(g, durations, events, controls_per_case, rng):
    """Case-control approximation of coxph_loss with sampled risk sets."""
    g = np.asarray(g, dtype=float).ravel()
    case_idx, ctrl_idx = sample_controls(durations, events, controls_per_case, rng)
    return case_control_loss(g, case_idx, ctrl_idx, g.size)


def standardize_times(t, mean, std):
    return (np.asarray(t, dtype=float) - mean) / (std if std > 0 else 1.0)


def coxtime_loss(spec, params, x, durations, events, controls_per_case, rng,
                 time_mean=0.0, time_std=1.0):
    """Case-control Cox loss with the (standardized) case event time fed to
    the network as the first input column; both the case's and its controls'
    scores are evaluated at the case's time.

    Returns (loss, gradient wrt the flat parameter vector).
    """
    x = np.asarray(x, dtype=float)
    if spec.input_dim != x.shape[1] + 1:
        raise nn.ShapeError(f"coxtime network expects {x.shape[1] + 1} inputs "
                            f"(features + time), spec has {spec.input_dim}")
    t, e = _check_labels(durations, events)
    n = t.size
    case_idx, ctrl_idx = sample_controls(t, e, controls_per_case, rng)
    if case_idx.size == 0:
        return 0.0, np.zeros(spec.n_params)

    m, k = ctrl_idx.shape
    t_case = standardize_times(t[case_idx], time_mean, time_std)
    rows = np.empty((m * (k + 1), spec.input_dim))
    rows[:, 0] = np.repeat(t_case, k + 1)
    people = np.concatenate([case_idx[:, None], ctrl_idx], axis=1).ravel()
    rows[:, 1:] = x[people]

    out, hidden = nn.forward_cached(spec, params, rows)
    scores = out[:, 0].reshape(m, k + 1)
    g_case = scores[:, 0]
    d = scores[:, 1:] - g_case[:, None]
    mx = np.maximum(d.max(axis=1), 0.0)
    z = np.exp(d - mx[:, None])
    denom = np.exp(-mx) + z.sum(axis=1)
    loss = float(np.sum(mx + np.log(denom)) / n)
    p = z / denom[:, None]

    dscores = np.empty_like(scores)
    dscores[:, 0] = -p.sum(axis=1) / n
    dscores[:, 1:] = p / n
    grad = nn.backward_from_cache(spec, params, rows, hidden, dscores.reshape(-1, 1))
    return loss, grad


def softmax(logits):
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def deephit_loss(pmf, bin_idx, events, alpha, sigma_rank):
    """alpha * discrete-time NLL + (1 - alpha) * exponential ranking penalty.

    pmf rows must be valid distributions (a softmax head guarantees this).
    The ranking part averages exp(-(F_i(T_i) - F_j(T_i)) / sigma_rank) over
    ordered pairs with bin_i < bin_j and event i, where F is the cumulative
    pmf at the case's bin. Returns (loss, gradient wrt the pre-softmax
    logits); the softmax Jacobian only needs the pmf itself.
    """
    pmf = np.asarray(pmf, dtype=float)
    if pmf.ndim != 2:
        raise ValueError("pmf must be 2-D (samples x bins)")
    if np.any(pmf < 0) or np.any(np.abs(pmf.sum(axis=1) - 1.0) > 1e-9):
        raise ValueError("pmf rows must be nonnegative and sum to 1 within 1e-9")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    n, n_bins = pmf.shape
    b = np.asarray(bin_idx, dtype=np.int64).ravel()
    e = np.asarray(events, dtype=np.int64).ravel()
    rows = np.arange(n)
    cum = np.cumsum(pmf, axis=1)

    # likelihood part: event mass at the bin, censored mass past the bin
    ev = e == 1
    dpmf_nll = np.zeros_like(pmf)
    terms = np.empty(n)
    p_event = pmf[rows, b]
    tail = 1.0 - cum[rows, b]
    col = np.arange(n_bins)

    terms[ev] = -np.log(np.maximum(p_event[ev], PROB_FLOOR))
    terms[~ev] = -np.log(np.maximum(tail[~ev], PROB_FLOOR))
    nll = float(terms.sum() / n)

    live_ev = ev & (p_event >= PROB_FLOOR)
    dpmf_nll[rows[live_ev], b[live_ev]] = -1.0 / (p_event[live_ev] * n)
    live_cn = (~ev) & (tail >= PROB_FLOOR)
    tail_mask = col[None, :] > b[:, None]
    dpmf_nll -= (live_cn / np.maximum(tail, PROB_FLOOR) / n)[:, None] * tail_mask

    # ranking part over qualifying ordered pairs
    comparable = (b[:, None] < b[None, :]) & ev[:, None]
    n_pairs = int(comparable.sum())
    if n_pairs > 0 and sigma_rank <= 0:
        raise ValueError("sigma_rank must be positive")
    dpmf_rank = np.zeros_like(pmf)
    if n_pairs:
        f_own = cum[rows, b]
        f_other = cum[:, b].T  # f_other[i, j] = F_j(T_i)
        w = np.where(comparable, np.exp(-(f_own[:, None] - f_other) / sigma_rank), 0.0)
        rank = float(w.sum() / n_pairs)
        scale = 1.0 / (sigma_rank * n_pairs)
        # d rank / dF_i(T_i) = -w/(sigma m); dF/dpmf is 1 on columns <= b_i
        cut = np.zeros_like(pmf)
        np.add.at(cut, (rows, b), -w.sum(axis=1) * scale)
        recv = np.zeros((n_bins, n))
        np.add.at(recv, b, w * scale)
        cut += recv.T
        dpmf_rank = np.cumsum(cut[:, ::-1], axis=1)[:, ::-1]
    else:
        rank = 0.0

    loss = alpha * nll + (1.0 - alpha) * rank
    dpmf = alpha * dpmf_nll + (1.0 - alpha) * dpmf_rank
    dlogits = pmf * (dpmf - (pmf * dpmf).sum(axis=1, keepdims=True))
    return loss, dlogits


def breslow_baseline(g, durations, events) -> StepFunction:
    """Breslow estimate of the cumulative baseline hazard.

    Jump times are the distinct uncensored event times; tied events each
    contribute 1/sum_{j at risk} exp(g_j) to the jump at their time.
    """
    g = np.asarray(g, dtype=float).ravel()
    t, e = _check_labels(durations, events)
    if e.sum() == 0:
        raise ValueError("baseline hazard undefined: no events")
    order = np.argsort(t, kind="stable")
    shift = g.max()
    gs = g[order] - shift
    ts = t[order]
    es = e[order]
    rev = np.cumsum(np.exp(gs[::-1]))[::-1]  # sum of exp over each suffix
    start = np.searchsorted(ts, ts, side="left")

    ev_pos = np.flatnonzero(es == 1)
    times, first = np.unique(ts[ev_pos], return_index=True)
    counts = np.diff(np.append(first, ev_pos.size))
    denom = rev[start[ev_pos[first]]]
    increments = counts * np.exp(-shift) / denom
    return StepFunction(times, np.cumsum(increments), initial=0.0)


def breslow_baseline_coxtime(spec, params, x, durations, events,
                             time_mean=0.0, time_std=1.0) -> StepFunction:
    """Breslow baseline for the coxtime head: the at-risk scores in each
    denominator are evaluated at that event time.
    """
    x = np.asarray(x, dtype=float)
    t, e = _check_labels(durations, events)
    if e.sum() == 0:
        raise ValueError("baseline hazard undefined: no events")
    order = np.argsort(t, kind="stable")
    ts = t[order]
    es = e[order]
    xs = x[order]

    ev_pos = np.flatnonzero(es == 1)
    times, first = np.unique(ts[ev_pos], return_index=True)
    counts = np.diff(np.append(first, ev_pos.size))
    increments = np.empty(times.size)
    for idx, (s, d) in enumerate(zip(times, counts)):
        lo = np.searchsorted(ts, s, side="left")
        rows = np.empty((ts.size - lo, spec.input_dim))
        rows[:, 0] = standardize_times(s, time_mean, time_std)
        rows[:, 1:] = xs[lo:]
        scores = nn.forward(spec, params, rows)[:, 0]
        mx = scores.max()
        increments[idx] = d * np.exp(-mx) / np.exp(scores - mx).sum()
    return StepFunction(times, np.cumsum(increments), initial=0.0)


def cox_survival(baseline: StepFunction, g) -> list[StepFunction]:
    """S(t|x) = exp(-H0(t) * exp(g(x))), one curve per score."""
    g = np.asarray(g, dtype=float).ravel()
    haz = np.exp(g)[:, None] * baseline.values[None, :]
    values = np.exp(-haz)
    return [StepFunction(baseline.times, row, initial=1.0) for row in values]


def coxtime_survival(spec, params, baseline: StepFunction, x, grid,
                     time_mean=0.0, time_std=1.0) -> list[StepFunction]:
    """Survival curves on the grid, with relative hazards re-evaluated at
    each grid time: H(t_k|x) = sum_{k' <= k} dH0(t_k'] * exp(g(t_k', x)).
    """
    x = np.asarray(x, dtype=float)
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing with >= 2 points")
    h0 = baseline(grid)
    dh0 = np.diff(np.concatenate(([0.0], h0)))
    n, m = x.shape[0], grid.size
    rows = np.empty((n * m, spec.input_dim))
    rows[:, 0] = np.tile(standardize_times(grid, time_mean, time_std), n)
    rows[:, 1:] = np.repeat(x, m, axis=0)
    g = nn.forward(spec, params, rows)[:, 0].reshape(n, m)
    cumhaz = np.cumsum(dh0[None, :] * np.exp(g), axis=1)
    values = np.exp(-cumhaz)
    return [StepFunction(grid, row, initial=1.0) for row in values]


def deephit_survival(pmf, bins: TimeBins) -> list[StepFunction]:
    """S steps down at each bin's upper edge by that bin's mass."""
    pmf = np.asarray(pmf, dtype=float)
    values = 1.0 - np.cumsum(pmf, axis=1)
    values = np.clip(values, 0.0, 1.0)  # guard cumsum round-off
    upper = bins.edges[1:]
    return [StepFunction(upper, row, initial=1.0) for row in values]


def predict_survival(kind, spec, params, aux, x, grid=None) -> list[StepFunction]:
    """Survival curve per row of x. ``aux`` carries the fitted pieces:
    a "baseline" StepFunction for the cox heads (plus "time_mean"/"time_std"
    for coxtime) or "bins" for deephit.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    x = np.asarray(x, dtype=float)
    if kind in ("coxph", "coxcc"):
        baseline = aux.get("baseline")
        if baseline is None:
            raise ValueError("baseline hazard not fitted")
        g = nn.forward(spec, params, x)[:, 0]
        return cox_survival(baseline, g)
    if kind == "coxtime":
        baseline = aux.get("baseline")
        if baseline is None:
            raise ValueError("baseline hazard not fitted")
        if grid is None:
            raise ValueError("coxtime prediction needs a time grid")
        return coxtime_survival(spec, params, baseline, x, grid,
                                aux.get("time_mean", 0.0), aux.get("time_std", 1.0))
    bins = aux.get("bins")
    if bins is None:
        raise ValueError("deephit prediction needs fitted time bins")
    logits = nn.forward(spec, params, x)
    return deephit_survival(softmax(logits), bins)


# ---------------------------------------------------------------------------
# training heads: couple a loss to the network so the federation layer only
# sees (params, batch) -> (loss, grad)

@dataclass
class Head:
    kind: str
    controls_per_case: int = 1
    alpha: float = 0.2
    sigma_rank: float = 0.1
    bins: TimeBins | None = None
    time_mean: float = 0.0
    time_std: float = 1.0

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.kind == "deephit" and self.bins is None:
            raise ValueError("deephit head needs TimeBins")

    def output_dim(self) -> int:
        return self.bins.n_bins if self.kind == "deephit" else 1

    def net_input_dim(self, n_features: int) -> int:
        return n_features + 1 if self.kind == "coxtime" else n_features

    def batch_trainable(self, durations, events) -> bool:
        """Cox-family batches without events carry no gradient; skip them."""
        if self.kind == "deephit":
            return True
        return bool(np.any(np.asarray(events) == 1))

    def loss_and_grad(self, spec, params, x, durations, events, rng):
        if self.kind == "coxtime":
            return coxtime_loss(spec, params, x, durations, events,
                                self.controls_per_case, rng,
                                self.time_mean, self.time_std)
        out, hidden = nn.forward_cached(spec, params, x)
        if self.kind == "coxph":
            loss, dg = coxph_loss(out[:, 0], durations, events)
            dout = dg[:, None]
        elif self.kind == "coxcc":
            loss, dg = coxcc_loss(out[:, 0], durations, events,
                                  self.controls_per_case, rng)
            dout = dg[:, None]
        else:
            pmf = softmax(out)
            _, bin_idx = self.bins.assign(durations)
            loss, dout = deephit_loss(pmf, bin_idx, events, self.alpha, self.sigma_rank)
        grad = nn.backward_from_cache(spec, params, x, hidden, dout)
        return loss, grad

    def fit_aux(self, spec, params, x, durations, events) -> dict:
        """Post-training pieces needed by predict_survival."""
        if self.kind == "deephit":
            return {"bins": self.bins}
        if self.kind == "coxtime":
            baseline = breslow_baseline_coxtime(spec, params, x, durations, events,
                                                self.time_mean, self.time_std)
            return {"baseline": baseline, "time_mean": self.time_mean,
                    "time_std": self.time_std}
        g = nn.forward(spec, params, np.asarray(x, dtype=float))[:, 0]
        return {"baseline": breslow_baseline(g, durations, events)}
