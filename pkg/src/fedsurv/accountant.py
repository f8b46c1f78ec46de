"""Client-level (epsilon, delta) accounting for the subsampled Gaussian
mechanism via the moments accountant.

The per-round log moment is alpha(lam) = log max(E1, E2) with

    E1 = integral eta0 * (eta0 / eta1)^lam dx
    E2 = integral eta1 * (eta1 / eta0)^lam dx

where eta0 is the N(0, sigma^2) density and eta1 the mixture
(1-C) N(0, sigma^2) + C N(1, sigma^2); C is the per-round client sampling
probability and the noise std sigma is expressed in units of sensitivity.
Rounds compose additively in alpha, and

    epsilon = min_lam (T * alpha(lam) - log delta) / lam.

Quadrature note: the E2 integrand peaks near x = lam + 1 (and E1's near
x = -lam when C = 1), so the integration window scales with lam; a fixed
window of a few sigma around [0, 1] would silently truncate the dominant
mass for large lam.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

DEFAULT_LAMBDAS = tuple(range(1, 129))

_TAIL_SIGMAS = 12.0  # mass beyond 12 sigma is < 1e-30
_REL_TOL = 1e-10
_MAX_NODES = 1 << 22


@dataclass(frozen=True)
class AccountantInputs:
    noise_multiplier: float
    sampling_prob: float
    rounds: int
    delta: float
    lambdas: tuple[int, ...] = DEFAULT_LAMBDAS

    def __post_init__(self):
        if self.noise_multiplier <= 0:
            raise ValueError("noise multiplier must be positive for a finite epsilon")
        if not 0.0 <= self.sampling_prob <= 1.0:
            raise ValueError("sampling probability must be in [0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")
        if not self.lambdas or any(int(l) < 1 for l in self.lambdas):
            raise ValueError("lambda grid must be nonempty positive integers")
        object.__setattr__(self, "lambdas", tuple(int(l) for l in self.lambdas))


def _log_densities(x, sigma, c):
    norm = math.log(math.sqrt(2.0 * math.pi) * sigma)
    log_n0 = -np.square(x / sigma) / 2.0 - norm
    if c == 0.0:
        return log_n0, log_n0
    log_n1 = -np.square((x - 1.0) / sigma) / 2.0 - norm
    if c == 1.0:
        return log_n0, log_n1
    log_eta1 = np.logaddexp(math.log(1.0 - c) + log_n0, math.log(c) + log_n1)
    return log_n0, log_eta1


def _simpson_log(lam, sigma, c, lo, hi, n_intervals):
    """log of both moment integrals by composite Simpson on n_intervals."""
    x = np.linspace(lo, hi, n_intervals + 1)
    log_eta0, log_eta1 = _log_densities(x, sigma, c)
    coeff = np.full(n_intervals + 1, 2.0)
    coeff[1::2] = 4.0
    coeff[0] = coeff[-1] = 1.0
    log_w = np.log(coeff) + math.log((hi - lo) / n_intervals / 3.0)
    diff = log_eta0 - log_eta1
    log_e1 = logsumexp(log_eta0 + lam * diff + log_w)
    log_e2 = logsumexp(log_eta1 - lam * diff + log_w)
    return log_e1, log_e2


def log_moment(lam: int, sigma: float, sampling_prob: float) -> float:
    """alpha(lam | C): log of the larger moment integral, by adaptive
    composite Simpson in the log domain (relative tolerance 1e-10)."""
    lam = int(lam)
    if lam < 1:
        raise ValueError("lambda must be a positive integer")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0.0 <= sampling_prob <= 1.0:
        raise ValueError("sampling probability must be in [0, 1]")
    pad = _TAIL_SIGMAS * sigma
    lo, hi = -lam - pad, 1.0 + lam + pad

    n = 4096
    prev = None
    while True:
        cur = _simpson_log(lam, sigma, sampling_prob, lo, hi, n)
        if not all(math.isfinite(v) for v in cur):
            raise OverflowError(f"log moment not finite at lambda={lam} "
                                f"(sigma={sigma} too small)")
        if prev is not None and all(abs(a - b) < _REL_TOL for a, b in zip(cur, prev)):
            break
        if n >= _MAX_NODES:
            raise OverflowError(f"quadrature did not converge at lambda={lam}")
        prev = cur
        n *= 2
    alpha = max(cur)
    assert alpha > -1e-6, f"negative log moment {alpha} at lambda={lam}"
    return max(alpha, 0.0)


def epsilon(inputs: AccountantInputs) -> tuple[float, int]:
    """Composed privacy bound over the lambda grid: returns (epsilon, lam*)."""
    best = None
    failures = []
    for lam in inputs.lambdas:
        try:
            alpha = log_moment(lam, inputs.noise_multiplier, inputs.sampling_prob)
        except OverflowError as exc:
            failures.append(str(exc))
            continue
        cand = (inputs.rounds * alpha - math.log(inputs.delta)) / lam
        if best is None or cand < best[0]:
            best = (cand, lam)
    if best is None:
        raise OverflowError("every lambda overflowed; increase sigma or shrink "
                            f"the grid (first failure: {failures[0]})")
    return best


def noise_for_epsilon(target: float, sampling_prob: float, rounds: int,
                      delta: float, lo: float = 0.3, hi: float = 64.0,
                      tol: float = 1e-2,
                      lambdas: tuple[int, ...] = DEFAULT_LAMBDAS) -> float:
    """Invert epsilon over sigma by bisection on [lo, hi]."""
    if target <= 0:
        raise ValueError("target epsilon must be positive")

    def eps_at(sigma):
        return epsilon(AccountantInputs(sigma, sampling_prob, rounds, delta, lambdas))[0]

    eps_lo, eps_hi = eps_at(lo), eps_at(hi)
    assert eps_lo >= eps_hi, "epsilon must be nonincreasing in sigma"
    if not (eps_hi - tol <= target <= eps_lo + tol):
        raise ValueError(f"target epsilon {target} unreachable on sigma range "
                         f"[{lo}, {hi}]: epsilon spans [{eps_hi:.4g}, {eps_lo:.4g}]")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        val = eps_at(mid)
        if abs(val - target) < tol:
            return mid
        if val > target:
            lo = mid
        else:
            hi = mid
    raise RuntimeError("bisection failed to converge")
