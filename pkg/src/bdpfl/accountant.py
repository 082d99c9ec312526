"""Bayesian privacy accounting for the subsampled Gaussian mechanism.

The flow per round is: sample leave-one-out sensitivities (``delta_norm``),
turn each into a per-order log cost with :func:`log_costs`, fold the samples
into an upper-confidence round cost with :func:`estimate_round_cost`, add the
round to a :class:`PrivacyLedger`, and read off epsilon or delta.

Sensitivity samples are plain non-negative floats: the norm of the
difference between the aggregate with and without the left-out element.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from bdpfl.numerics import log_binomial_pmf_all, log_sum_exp_rows, student_t_quantile

SATURATION = 700.0
SIDES = ("L", "R")


class CostOverflowError(OverflowError):
    """A per-sample log cost exceeded the saturation threshold."""

    def __init__(self, lam: int, delta_norm: float, value: float):
        super().__init__(
            f"cost overflow at lambda={lam}, delta_norm={delta_norm!r} "
            f"(log-value {value:.1f} > {SATURATION:g})")
        self.lam = lam
        self.delta_norm = delta_norm


class GridMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class MechanismParams:
    """Noise multiplier, clipping norm and subsampling probability.

    The absolute noise standard deviation is ``sigma * clip``.
    """

    sigma: float
    clip: float
    sampling_prob: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.clip > 0:
            raise ValueError(f"clip must be positive, got {self.clip}")
        if not 0.0 <= self.sampling_prob <= 1.0:
            raise ValueError(f"sampling_prob must lie in [0, 1], got {self.sampling_prob}")

    @property
    def noise_std(self) -> float:
        return self.sigma * self.clip


@dataclass(frozen=True)
class LambdaGrid:
    lambdas: tuple[int, ...]

    def __post_init__(self):
        lams = tuple(int(x) for x in self.lambdas)
        if not lams:
            raise ValueError("empty lambda grid")
        if any(a >= b for a, b in zip(lams, lams[1:])):
            raise ValueError("lambda grid must be strictly increasing")
        if lams[0] < 1:
            raise ValueError("lambda values must be >= 1")
        object.__setattr__(self, "lambdas", lams)

    @classmethod
    def up_to(cls, lambda_max: int = 64) -> "LambdaGrid":
        return cls(tuple(range(1, lambda_max + 1)))

    def __len__(self):
        return len(self.lambdas)

    def __iter__(self):
        return iter(self.lambdas)

    def array(self) -> np.ndarray:
        return np.asarray(self.lambdas, dtype=float)


@dataclass(frozen=True)
class RoundCostEstimate:
    grid: LambdaGrid
    cost: np.ndarray
    sample_mean: np.ndarray
    sample_std: np.ndarray
    m: int
    delta_prime: float

    @property
    def per_lambda_cost(self) -> dict[int, float]:
        return dict(zip(self.grid.lambdas, self.cost.tolist()))


@dataclass(frozen=True)
class EpsDelta:
    epsilon: float
    delta: float
    order: int


@dataclass(eq=False)
class PrivacyLedger:
    """Accumulated round costs over a fixed lambda grid."""

    grid: LambdaGrid
    cumulative_cost: np.ndarray = None
    rounds: int = 0
    cumulative_delta_prime: float = 0.0

    def __post_init__(self):
        if self.cumulative_cost is None:
            self.cumulative_cost = np.zeros(len(self.grid))
        else:
            self.cumulative_cost = np.array(self.cumulative_cost, dtype=float)
        if self.cumulative_cost.shape != (len(self.grid),):
            raise GridMismatchError("cumulative_cost does not match the grid")

    def copy(self) -> "PrivacyLedger":
        return dataclasses.replace(self, cumulative_cost=self.cumulative_cost.copy())

    def to_text(self) -> str:
        return ledger_to_text(self.grid, self.cumulative_cost, self.rounds,
                              self.cumulative_delta_prime)

    @classmethod
    def from_text(cls, text: str) -> "PrivacyLedger":
        grid, cost, rounds, dprime = ledger_from_text(text)
        return cls(grid, cost, rounds, dprime)


def ledger_to_text(grid: LambdaGrid, values: np.ndarray, rounds: int,
                   delta_prime: float) -> str:
    """One ``lambda,cumulative_cost,rounds,cumulative_delta_prime`` line per order."""
    return "".join(
        f"{lam},{v:.17g},{rounds},{delta_prime:.17g}\n"
        for lam, v in zip(grid.lambdas, np.asarray(values, dtype=float).tolist()))


def ledger_from_text(text: str) -> tuple[LambdaGrid, np.ndarray, int, float]:
    lams, vals, rounds, dprimes = [], [], set(), set()
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            lams.append(int(parts[0]))
            vals.append(float(parts[1]))
            rounds.add(int(parts[2]))
            dprimes.add(float(parts[3]))
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from None
    if len(rounds) != 1 or len(dprimes) != 1:
        raise ValueError("inconsistent rounds/delta_prime across ledger lines")
    return LambdaGrid(tuple(lams)), np.array(vals), rounds.pop(), dprimes.pop()


def renyi_gaussian(delta_norm: float, sigma_abs: float, order: float) -> float:
    """Renyi divergence of ``order`` between two equal-variance Gaussians.

    ``delta_norm`` is the distance between the means and ``sigma_abs`` the
    (absolute) common standard deviation.
    """
    if order <= 1:
        raise ValueError(f"order must exceed 1, got {order}")
    if not sigma_abs > 0:
        raise ValueError("sigma_abs must be positive")
    if delta_norm < 0:
        raise ValueError("delta_norm must be non-negative")
    return order * delta_norm * delta_norm / (2.0 * sigma_abs * sigma_abs)


def _side_terms(lam: int, q: float, side: str) -> tuple[np.ndarray, np.ndarray]:
    if side == "L":
        n = lam + 1
        k = np.arange(n + 1, dtype=float)
        return log_binomial_pmf_all(n, q), k * k - k
    if side == "R":
        k = np.arange(lam + 1, dtype=float)
        return log_binomial_pmf_all(lam, q), k * k + k
    raise ValueError(f"side must be 'L' or 'R', got {side!r}")


def log_costs(delta_norms: Sequence[float], params: MechanismParams, lam: int,
              side: str) -> np.ndarray:
    """Vectorised :func:`cost_sample` over many sensitivity samples."""
    if lam < 1:
        raise ValueError(f"lambda must be >= 1, got {lam}")
    d = np.asarray(delta_norms, dtype=float)
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("delta_norm must be finite and non-negative")
    logpmf, expo = _side_terms(lam, params.sampling_prob, side)
    t = d * d / (2.0 * params.noise_std ** 2)
    out = log_sum_exp_rows(logpmf[None, :] + t[:, None] * expo[None, :])
    # The sum of binomial masses is 1 up to rounding; the true value is >= 0.
    out = np.where(t == 0.0, 0.0, np.maximum(out, 0.0))
    bad = np.flatnonzero(out > SATURATION)
    if bad.size:
        i = int(bad[0])
        raise CostOverflowError(lam, float(d[i]), float(out[i]))
    return out


def cost_sample(delta_norm: float, params: MechanismParams, lam: int, side: str) -> float:
    """Log of the inner binomial expectation for one sensitivity sample.

    Side ``L`` averages ``exp((k**2 - k) t)`` over ``k ~ Binomial(lam + 1, q)``;
    side ``R`` averages ``exp((k**2 + k) t)`` over ``k ~ Binomial(lam, q)``,
    with ``t = delta_norm**2 / (2 (clip * sigma)**2)``.
    """
    return float(log_costs([delta_norm], params, lam, side)[0])


@functools.lru_cache(maxsize=256)
def _side_tables(lambdas: tuple[int, ...], q: float, side: str) -> tuple[np.ndarray, np.ndarray]:
    # Padded (len(grid), kmax + 1) tables; missing terms carry log-mass -inf.
    width = max(lambdas) + 2
    logpmf = np.full((len(lambdas), width), -np.inf)
    expo = np.zeros((len(lambdas), width))
    for i, lam in enumerate(lambdas):
        lp, ex = _side_terms(lam, q, side)
        logpmf[i, :len(lp)] = lp
        expo[i, :len(ex)] = ex
    logpmf.setflags(write=False)
    expo.setflags(write=False)
    return logpmf, expo


def sample_log_values(delta_norms: Sequence[float], params: MechanismParams,
                      grid: LambdaGrid, drop_saturated: bool = False) -> np.ndarray:
    """Per-sample ``lam * D_hat`` in log space, shape ``(m, len(grid))``.

    Each entry is the larger of the two sides, so the estimator never sees
    the smaller direction. With ``drop_saturated`` an order whose cost
    overflows becomes ``+inf`` (removed from the epsilon minimisation)
    instead of raising. Agrees with :func:`log_costs` order by order.
    """
    d = np.asarray(delta_norms, dtype=float).ravel()
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("delta_norm must be finite and non-negative")
    t = d * d / (2.0 * params.noise_std ** 2)
    out = None
    for side in SIDES:
        logpmf, expo = _side_tables(grid.lambdas, float(params.sampling_prob), side)
        vals = log_sum_exp_rows(logpmf[None] + t[:, None, None] * expo[None])
        out = vals if out is None else np.maximum(out, vals)
    out = np.where(t[:, None] == 0.0, 0.0, np.maximum(out, 0.0))
    over = np.any(out > SATURATION, axis=0)
    if np.any(over):
        j = int(np.flatnonzero(over)[0])
        if not drop_saturated:
            i = int(np.argmax(out[:, j]))
            raise CostOverflowError(grid.lambdas[j], float(d[i]), float(out[i, j]))
        out[:, over] = np.inf
    return out


def confidence_multiplier(m: int, delta_prime: float) -> float:
    return student_t_quantile(1.0 - delta_prime, m - 1) / math.sqrt(m - 1)


def estimate_from_log_values(log_values: np.ndarray, grid: LambdaGrid,
                             delta_prime: float) -> RoundCostEstimate:
    """Upper-confidence round cost from per-sample log values.

    ``log_values[i, j]`` is the log of the exponentiated divergence of sample
    ``i`` at order ``grid[j]``. Means and deviations are computed on values
    rescaled by the column maximum so nothing overflows.
    """
    lv = np.asarray(log_values, dtype=float)
    if lv.ndim != 2 or lv.shape[1] != len(grid):
        raise GridMismatchError("log_values must have one column per lambda")
    m = lv.shape[0]
    if m < 2:
        raise ValueError(f"insufficient samples: m={m} (need at least 2)")
    if not 0.0 < delta_prime < 0.5:
        raise ValueError(f"delta_prime must lie in (0, 0.5), got {delta_prime}")
    finite = np.all(np.isfinite(lv), axis=0)
    over = finite & np.any(lv > SATURATION, axis=0)
    if np.any(over):
        j = int(np.flatnonzero(over)[0])
        raise CostOverflowError(grid.lambdas[j], math.nan, float(lv[:, j].max()))
    # Columns holding +inf are orders dropped for saturation.
    top = np.where(finite, lv.max(axis=0), 0.0)
    scaled = np.exp(np.where(finite, lv, 0.0) - top)
    mean = scaled.mean(axis=0)
    std = scaled.std(axis=0, ddof=1)
    k = confidence_multiplier(m, delta_prime)
    cost = np.where(finite, np.maximum(top + np.log(mean + k * std), 0.0), np.inf)
    # Round costs must not decrease in lambda; a running max keeps every
    # entry an upper bound.
    cost = np.maximum.accumulate(cost)
    scale = np.exp(top)
    return RoundCostEstimate(grid, cost, mean * scale, std * scale, m, float(delta_prime))


def estimate_round_cost(delta_norms: Sequence[float], params: MechanismParams,
                        grid: LambdaGrid, delta_prime: float,
                        drop_saturated: bool = False) -> RoundCostEstimate:
    """m-sample upper-confidence estimate of one round's privacy cost.

    For each order the per-sample values ``v = exp(max(cost_L, cost_R))``
    give ``log(M + t_{1-delta'}(m-1) / sqrt(m-1) * S)`` with ``M`` and ``S``
    the sample mean and standard deviation of ``v``.
    """
    d = np.asarray(delta_norms, dtype=float).ravel()
    if d.size < 2:
        raise ValueError(f"insufficient samples: m={d.size} (need at least 2)")
    lv = sample_log_values(d, params, grid, drop_saturated)
    return estimate_from_log_values(lv, grid, delta_prime)


def combine_estimates(estimates: Iterable[RoundCostEstimate], how: str) -> RoundCostEstimate:
    """Fold several per-client estimates into one round estimate.

    ``how="sum"`` adds costs (sequential composition across clients);
    ``how="max"`` takes the per-order maximum (parallel composition). The
    failure probabilities add in both cases.
    """
    ests = list(estimates)
    if not ests:
        raise ValueError("no estimates to combine")
    grid = ests[0].grid
    if any(e.grid != grid for e in ests):
        raise GridMismatchError("estimates use different lambda grids")
    costs = np.stack([e.cost for e in ests])
    if how == "sum":
        cost = costs.sum(axis=0)
    elif how == "max":
        cost = costs.max(axis=0)
    else:
        raise ValueError(f"unknown combination {how!r}")
    nan = np.full(len(grid), np.nan)
    return RoundCostEstimate(grid, cost, nan, nan, sum(e.m for e in ests),
                             sum(e.delta_prime for e in ests))


def ledger_add(ledger: PrivacyLedger, estimate: RoundCostEstimate) -> PrivacyLedger:
    """Compose one more round; returns a new ledger."""
    if estimate.grid != ledger.grid:
        raise GridMismatchError("estimate and ledger use different lambda grids")
    return PrivacyLedger(ledger.grid,
                         ledger.cumulative_cost + estimate.cost,
                         ledger.rounds + 1,
                         ledger.cumulative_delta_prime + estimate.delta_prime)


def epsilon_for_delta(ledger: PrivacyLedger, delta_tail: float) -> EpsDelta:
    """Smallest epsilon over the grid for a fixed tail probability.

    The reported delta adds the accumulated estimator failure mass.
    """
    if not 0.0 < delta_tail < 1.0:
        raise ValueError(f"delta_tail must lie in (0, 1), got {delta_tail}")
    lams = ledger.grid.array()
    eps = (ledger.cumulative_cost - math.log(delta_tail)) / lams
    i = int(np.argmin(eps))  # first minimiser, i.e. smallest lambda on ties
    return EpsDelta(float(eps[i]), delta_tail + ledger.cumulative_delta_prime,
                    ledger.grid.lambdas[i])


def delta_for_epsilon(ledger: PrivacyLedger, epsilon: float) -> float:
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    lams = ledger.grid.array()
    tail = float(np.exp(np.min(ledger.cumulative_cost - lams * epsilon)))
    return min(1.0, ledger.cumulative_delta_prime + tail)


def attack_advantage(epsilon: float) -> float:
    """Upper bound on a flat-prior membership attacker's accuracy."""
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return 1.0 / (1.0 + math.exp(-epsilon))
