"""Evaluation metrics: Kaplan-Meier estimators, IPCW-weighted Brier score
and binomial log-likelihood with their time integrals, and the
time-dependent concordance index.

Conventions recorded here because values depend on them: the censoring
curve G feeding an event term is evaluated as the left limit G(T-); every
probability or G value inside a log or division is floored at 1e-7; C-index
ties in the predicted CIF score 0.5.
"""
from __future__ import annotations

import numpy as np

from .stepfun import StepFunction

PROB_FLOOR = 1e-7


def kaplan_meier(durations, flags) -> StepFunction:
    """Product-limit estimator; jumps only at times with at least one flag."""
    t = np.asarray(durations, dtype=float).ravel()
    f = np.asarray(flags).ravel()
    if t.size == 0:
        raise ValueError("kaplan_meier needs at least one observation")
    if t.min() <= 0:
        raise ValueError("durations must be positive")
    if not np.isin(f, (0, 1)).all():
        raise ValueError("flags must be 0 or 1")
    order = np.argsort(t, kind="stable")
    ts, fs = t[order], f[order]
    n = ts.size
    times, first = np.unique(ts, return_index=True)
    counts = np.diff(np.append(first, n))
    d = np.add.reduceat(fs, first)        # flagged at each distinct time
    at_risk = n - first                   # still under observation
    factors = 1.0 - d / at_risk
    surv = np.cumprod(factors)
    keep = d > 0
    if not keep.any():
        return StepFunction(np.empty(0), np.empty(0), initial=1.0)
    return StepFunction(times[keep], surv[keep], initial=1.0)


def censoring_km(durations, events) -> StepFunction:
    """Kaplan-Meier estimate of the censoring survival (flags flipped)."""
    e = np.asarray(events).ravel()
    return kaplan_meier(durations, 1 - e)


def time_grid(durations, size: int = 100) -> np.ndarray:
    """Equally spaced evaluation times spanning the observed durations."""
    t = np.asarray(durations, dtype=float)
    lo, hi = float(t.min()), float(t.max())
    if size < 2:
        raise ValueError("grid needs at least 2 points")
    if hi <= lo:
        raise ValueError("degenerate duration range for a time grid")
    return np.linspace(lo, hi, size)


def _ipcw_pieces(t, surv_at_t, durations, events, censor_surv: StepFunction):
    s = np.asarray(surv_at_t, dtype=float).ravel()
    dur = np.asarray(durations, dtype=float).ravel()
    ev = np.asarray(events).ravel() == 1
    if s.shape != dur.shape:
        raise ValueError("one survival value per test sample required")
    past = (dur <= t) & ev                      # event happened by t
    alive = dur > t                             # still event-free at t
    g_event = np.maximum(censor_surv.left_limit(dur), PROB_FLOOR)
    g_now = max(float(censor_surv(t)), PROB_FLOOR)
    return s, past, alive, g_event, g_now


def brier_score(t, surv_at_t, durations, events, censor_surv: StepFunction) -> float:
    """IPCW Brier score at time t; censored-before-t samples contribute 0."""
    s, past, alive, g_event, g_now = _ipcw_pieces(t, surv_at_t, durations,
                                                  events, censor_surv)
    terms = np.where(past, s ** 2 / g_event, 0.0) \
        + np.where(alive, (1.0 - s) ** 2 / g_now, 0.0)
    bs = float(terms.mean())
    w_max = max(float(np.max(1.0 / g_event, initial=0.0)), 1.0 / g_now)
    assert 0.0 <= bs <= w_max + 1e-12, f"Brier score {bs} outside [0, {w_max}]"
    return bs


def binomial_ll(t, surv_at_t, durations, events, censor_surv: StepFunction) -> float:
    """Mean IPCW binomial log-likelihood at t (nonpositive; higher is better)."""
    s, past, alive, g_event, g_now = _ipcw_pieces(t, surv_at_t, durations,
                                                  events, censor_surv)
    s = np.clip(s, PROB_FLOOR, 1.0 - PROB_FLOOR)
    terms = np.where(past, np.log(1.0 - s) / g_event, 0.0) \
        + np.where(alive, np.log(s) / g_now, 0.0)
    return float(terms.mean())


def _trapezoid_mean(values, grid):
    grid = np.asarray(grid, dtype=float)
    span = grid[-1] - grid[0]
    if span <= 0:
        raise ValueError("degenerate time grid")
    values = np.asarray(values, dtype=float)
    area = np.sum((values[1:] + values[:-1]) / 2.0 * np.diff(grid))
    return float(area / span)


def _curve_matrix(curves, grid):
    return np.stack([c(grid) for c in curves])


def integrated_brier(curves, durations, events, censor_surv: StepFunction,
                     grid) -> float:
    """Trapezoidal time-average of the Brier score over the grid."""
    sm = _curve_matrix(curves, grid)
    bs = [brier_score(t, sm[:, j], durations, events, censor_surv)
          for j, t in enumerate(grid)]
    return _trapezoid_mean(bs, grid)


def negative_ibll(curves, durations, events, censor_surv: StepFunction,
                  grid) -> float:
    """Negated trapezoidal time-average of the binomial log-likelihood,
    so lower is better like the Brier score."""
    sm = _curve_matrix(curves, grid)
    bll = [binomial_ll(t, sm[:, j], durations, events, censor_surv)
           for j, t in enumerate(grid)]
    return -_trapezoid_mean(bll, grid)


def concordance_td(cif_curves, durations, events) -> float:
    """Time-dependent concordance: among ordered pairs with T_i < T_j and
    event i, the fraction where sample i's predicted CIF at T_i exceeds
    sample j's (ties count 0.5).
    """
    dur = np.asarray(durations, dtype=float).ravel()
    ev = np.asarray(events).ravel() == 1
    n = dur.size
    if len(cif_curves) != n:
        raise ValueError("one CIF curve per test sample required")
    comparable = (dur[:, None] < dur[None, :]) & ev[:, None]
    total = int(comparable.sum())
    if total == 0:
        raise ValueError("concordance undefined: no comparable pairs")
    # fmat[i, j] = F_j(T_i)
    fmat = np.stack([c(dur) for c in cif_curves], axis=1)
    own = fmat[np.arange(n), np.arange(n)]
    wins = (own[:, None] > fmat) & comparable
    ties = (own[:, None] == fmat) & comparable
    return float((wins.sum() + 0.5 * ties.sum()) / total)
