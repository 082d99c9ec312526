"""Independent reference computations used by the tests.

None of these reuse the package's numerics: they rely on scipy quadrature,
plain Monte Carlo and closed forms only.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate as sint
from scipy import special


def renyi_quadrature(delta: float, s: float, order: float) -> float:
    """Order-``order`` Renyi divergence of N(delta, s^2) from N(0, s^2) by quadrature."""

    def log_integrand(x):
        lp = -0.5 * ((x - delta) / s) ** 2
        lq = -0.5 * (x / s) ** 2
        return order * lp + (1.0 - order) * lq - math.log(s * math.sqrt(2.0 * math.pi))

    # Peak of the tilted density; normalise there so nothing overflows.
    centre = order * delta
    top = log_integrand(centre)
    val, _ = sint.quad(lambda x: math.exp(log_integrand(x) - top),
                       centre - 40.0 * s, centre + 40.0 * s,
                       epsabs=1e-14, epsrel=1e-13, limit=500, points=[centre])
    return (top + math.log(val)) / (order - 1.0)


def _log_normal(x, mu, s):
    return -0.5 * ((x - mu) / s) ** 2 - math.log(s * math.sqrt(2.0 * math.pi))


def _log_mix(x, q, delta, s):
    a = _log_normal(x, 0.0, s)
    b = _log_normal(x, delta, s)
    with np.errstate(divide="ignore"):
        return np.logaddexp(np.log1p(-q) + a if q < 1 else -np.inf, math.log(q) + b if q > 0 else -np.inf)


def mc_cost(q: float, s: float, lam: int, side: str, delta: float = 1.0,
            draws: int = 10**6, seed: int = 0, chunk: int = 200_000):
    """Importance-sampled ``E[(mix/base)^lam]`` for one side.

    Side ``L`` averages under the mixture, side ``R`` under N(delta, s^2).
    The proposal is an equal-weight mixture of N(j delta, s^2) for
    j = 0..lam+1, which covers every component of the integrand, so the
    weights stay bounded.

    Returns ``(shift, mean, stderr)`` with the estimate equal to
    ``exp(shift) * mean`` and ``stderr`` on the same scale as ``mean``.
    """
    rng = np.random.default_rng(seed)
    centres = delta * np.arange(lam + 2)
    logw = []
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        x = centres[rng.integers(0, len(centres), n)] + s * rng.standard_normal(n)
        z = -0.5 * ((x[:, None] - centres[None, :]) / s) ** 2
        top = z.max(axis=1)
        log_prop = (top + np.log(np.exp(z - top[:, None]).sum(axis=1))
                    - math.log(len(centres)) - math.log(s * math.sqrt(2.0 * math.pi)))
        log_ratio = _log_mix(x, q, delta, s) - _log_normal(x, 0.0, s)
        log_target = _log_mix(x, q, delta, s) if side == "L" else _log_normal(x, delta, s)
        logw.append(log_target + lam * log_ratio - log_prop)
        done += n
    logw = np.concatenate(logw)
    shift = float(logw.max())
    w = np.exp(logw - shift)
    return shift, float(w.mean()), float(w.std(ddof=1) / math.sqrt(len(w)))


def mc_dp_direction(q: float, s: float, lam: int, direction: int, draws: int = 10**7,
                    seed: int = 0, chunk: int = 500_000):
    """Monte-Carlo log-moment of the subsampled Gaussian (sensitivity 1).

    Direction 1 is ``E_mix[(mix/base)^lam]`` (importance sampled as in
    :func:`mc_cost`); direction 2 is ``E_base[(base/mix)^lam]``, sampled
    directly since its integrand is bounded by ``(1 - q)^-lam``.
    Returns ``(shift, mean, stderr)`` like :func:`mc_cost`.
    """
    if direction == 1:
        return mc_cost(q, s, lam, "L", 1.0, draws, seed, chunk)
    rng = np.random.default_rng(seed)
    logw = []
    done = 0
    while done < draws:
        n = min(chunk, draws - done)
        x = s * rng.standard_normal(n)
        logw.append(-lam * (_log_mix(x, q, 1.0, s) - _log_normal(x, 0.0, s)))
        done += n
    logw = np.concatenate(logw)
    shift = float(logw.max())
    w = np.exp(logw - shift)
    return shift, float(w.mean()), float(w.std(ddof=1) / math.sqrt(len(w)))


def student_t_quantile_oracle(p: float, dof: float) -> float:
    """Bisection on a scipy-quadrature CDF of the Student-t density."""
    logc = (special.gammaln((dof + 1) / 2) - special.gammaln(dof / 2)
            - 0.5 * math.log(dof * math.pi))

    def pdf(x):
        return math.exp(logc - (dof + 1) / 2 * math.log1p(x * x / dof))

    def upper_tail(x):
        val, _ = sint.quad(pdf, x, math.inf, epsabs=1e-14, epsrel=1e-12, limit=200)
        return val

    target = 1.0 - p
    lo, hi = 0.0, 1.0
    while upper_tail(hi) > target:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if upper_tail(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def finite_difference_gradient(f, w: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.empty_like(w)
    for i in range(len(w)):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (f(w + e) - f(w - e)) / (2.0 * h)
    return g


def dp_moment_quadrature(q: float, s: float, lam: int) -> float:
    """Both directional log-moments of the subsampled Gaussian by scipy quadrature."""

    def log_ratio(x):  # log(mix / base) at sensitivity 1
        z = (2.0 * x - 1.0) / (2.0 * s * s)
        return z if q == 1 else float(np.logaddexp(math.log1p(-q), math.log(q) + z))

    def direction(power):
        # power = lam + 1 gives E_mix[r^lam]; power = -lam gives E_base[r^-lam]
        f = lambda x: power * log_ratio(x) + _log_normal(x, 0.0, s)
        lo, hi = -lam - 40.0 * s, lam + 1 + 40.0 * s
        xs = np.linspace(lo, hi, 20001)
        vals = [f(x) for x in xs]
        peak = xs[int(np.argmax(vals))]
        top = max(vals)
        val, _ = sint.quad(lambda x: math.exp(f(x) - top), lo, hi,
                           epsabs=1e-14, epsrel=1e-12, limit=1000, points=[peak])
        return top + math.log(val)

    return max(direction(lam + 1), direction(-lam), 0.0)
