"""Right-continuous step functions over time.

Houses every estimated curve in the package: Kaplan-Meier survival,
censoring survival, cumulative baseline hazard, and per-sample survival /
cumulative-incidence predictions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class StepFunction:
    """Piecewise-constant function: ``initial`` before the first jump, then
    ``values[k]`` on [times[k], times[k+1]).
    """

    times: np.ndarray
    values: np.ndarray
    initial: float = 1.0

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if times.shape != values.shape:
            raise ValueError(f"times {times.shape} and values {values.shape} differ")
        if times.size and np.any(np.diff(times) <= 0):
            raise ValueError("jump times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "initial", float(self.initial))

    def __call__(self, t):
        """Right-continuous evaluation: value of the last jump at or before t."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self._pick(idx, np.isscalar(t))

    def left_limit(self, t):
        """Value just before t; differs from __call__ exactly at jump times."""
        idx = np.searchsorted(self.times, t, side="left") - 1
        return self._pick(idx, np.isscalar(t))

    def _pick(self, idx, scalar: bool):
        idx = np.asarray(idx)
        padded = np.concatenate(([self.initial], self.values))
        out = padded[idx + 1]
        return float(out) if scalar else out

    def scaled(self, factor: float) -> "StepFunction":
        return StepFunction(self.times, self.values * factor, self.initial * factor)

    def complement(self) -> "StepFunction":
        """1 - f, e.g. cumulative incidence from survival."""
        return StepFunction(self.times, 1.0 - self.values, 1.0 - self.initial)
