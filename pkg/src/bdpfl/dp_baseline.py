"""Data-independent moments accountant for the subsampled Gaussian mechanism.

Sensitivity is normalised to 1, so only the noise multiplier and the
sampling probability matter. Log-moments are computed by quadrature of the
exact mixture likelihood ratio rather than a closed-form upper bound.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass

import numpy as np

from bdpfl.accountant import LambdaGrid, MechanismParams, ledger_from_text, ledger_to_text
from bdpfl.numerics import integrate

QUAD_TOL = 1e-12


def _log_ratio(x, sigma: float, q: float):
    # log of mixture density over base density, (1-q) + q exp((2x - 1) / (2 sigma^2))
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log1p(-q) if q < 1 else -np.inf,
                            math.log(q) + (2.0 * x - 1.0) / (2.0 * sigma * sigma))


def _log_moment_direction(sigma: float, q: float, lam: int, direction: int) -> float:
    log_norm = -math.log(sigma * math.sqrt(2.0 * math.pi))

    def logf(x):
        r = _log_ratio(x, sigma, q)
        base = log_norm - x * x / (2.0 * sigma * sigma)
        # direction 1: E_mix[(mix/base)^lam]; direction 2: E_base[(base/mix)^lam]
        return base + ((lam + 1) * r if direction == 1 else -lam * r)

    # The integrand peaks inside [-lam, lam + 1] (the ends are reached as q -> 1).
    lo, hi = -lam - 12.0 * sigma, lam + 1.0 + 12.0 * sigma
    step = sigma / 16.0
    xs = np.linspace(lo, hi, int(math.ceil((hi - lo) / step)) + 1)
    peak = float(np.max(logf(xs)))

    def f(x):
        return np.exp(logf(x) - peak)

    # Breakpoints every 2 sigma so no mass hides between Kronrod nodes. The
    # tolerance is absolute on the peak-normalised integrand (peak value 1);
    # only the few pieces near a peak carry non-negligible mass.
    cuts = np.linspace(lo, hi, int(math.ceil((hi - lo) / (2.0 * sigma))) + 1)
    tol = QUAD_TOL
    total = integrate(f, -math.inf, cuts[0], tol) + integrate(f, cuts[-1], math.inf, tol)
    for a, b in zip(cuts[:-1], cuts[1:]):
        total += integrate(f, float(a), float(b), tol)
    return peak + math.log(total)


@functools.lru_cache(maxsize=8192)
def _log_moment(sigma: float, q: float, lam: int) -> float:
    if q == 0.0:
        return 0.0
    a = _log_moment_direction(sigma, q, lam, 1)
    b = _log_moment_direction(sigma, q, lam, 2)
    return max(a, b, 0.0)


def dp_log_moment(params: MechanismParams, lam: int) -> float:
    """Per-step log-moment alpha(lam) of the subsampled Gaussian mechanism.

    The larger of ``log E_mix[(mix/base)^lam]`` and
    ``log E_base[(base/mix)^lam]``, where ``base = N(0, sigma^2)`` and
    ``mix = (1-q) N(0, sigma^2) + q N(1, sigma^2)``.
    """
    if lam < 1:
        raise ValueError(f"lambda must be >= 1, got {lam}")
    return _log_moment(float(params.sigma), float(params.sampling_prob), int(lam))


def dp_log_moments(params: MechanismParams, grid: LambdaGrid) -> np.ndarray:
    return np.array([dp_log_moment(params, lam) for lam in grid])


def dp_epsilon(params: MechanismParams, rounds: int, delta: float,
               grid: LambdaGrid) -> float:
    """Tail bound ``min_lam (rounds * alpha(lam) - log delta) / lam``."""
    if rounds < 0:
        raise ValueError("rounds must be non-negative")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    moments = dp_log_moments(params, grid) if rounds else np.zeros(len(grid))
    return float(np.min((rounds * moments - math.log(delta)) / grid.array()))


@dataclass(eq=False)
class DpLedger:
    grid: LambdaGrid
    log_moments: np.ndarray = None
    rounds: int = 0

    def __post_init__(self):
        if self.log_moments is None:
            self.log_moments = np.zeros(len(self.grid))
        else:
            self.log_moments = np.array(self.log_moments, dtype=float)

    def to_text(self) -> str:
        return ledger_to_text(self.grid, self.log_moments, self.rounds, 0.0)

    @classmethod
    def from_text(cls, text: str) -> "DpLedger":
        grid, values, rounds, _ = ledger_from_text(text)
        return cls(grid, values, rounds)


def dp_ledger_add(ledger: DpLedger, moments: np.ndarray) -> DpLedger:
    """Compose one round whose per-order log-moments are ``moments``."""
    moments = np.asarray(moments, dtype=float)
    if moments.shape != ledger.log_moments.shape:
        raise ValueError("moments do not match the ledger grid")
    return dataclasses.replace(ledger, log_moments=ledger.log_moments + moments,
                               rounds=ledger.rounds + 1)


def dp_ledger_epsilon(ledger: DpLedger, delta: float) -> float:
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta}")
    return float(np.min((ledger.log_moments - math.log(delta)) / ledger.grid.array()))
