"""Special functions and stable reductions used by the accountants.

Everything here is a pure function of its arguments. Probabilities are kept
in log space; only the reporting layer converts back.
"""

from __future__ import annotations

import functools
import heapq
import math
from typing import Callable, Sequence

import numpy as np

MAX_DEPTH = 60
MAX_INTERVALS = 2000
_EPS = float(np.finfo(float).eps)

# Gauss-Kronrod 7/15 nodes on [-1, 1] (positive half, centre last).
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])
_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
_KRONROD_W = np.concatenate([_WGK[:-1], _WGK[::-1]])
# Gauss nodes are the odd-indexed Kronrod nodes.
_GAUSS_W = np.zeros(15)
_GAUSS_W[[1, 3, 5, 7, 9, 11, 13]] = np.concatenate([_WG[:-1], _WG[::-1]])


class QuadratureError(ArithmeticError):
    """Adaptive quadrature hit the refinement cap before meeting tolerance."""

    def __init__(self, message: str, estimate: float, error: float):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


def log_sum_exp(values: Sequence[float]) -> float:
    """Return ``log(sum(exp(values)))`` without overflow."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empty reduction")
    top = float(np.max(v))
    if math.isinf(top):
        return top
    return top + math.log(float(np.sum(np.exp(v - top))))


def log_sum_exp_rows(values: np.ndarray) -> np.ndarray:
    """Row-wise ``log_sum_exp`` of a 2-D array (reduces the last axis)."""
    v = np.asarray(values, dtype=float)
    if v.shape[-1] == 0:
        raise ValueError("empty reduction")
    top = np.max(v, axis=-1, keepdims=True)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - safe), axis=-1)) + safe[..., 0]
    return np.where(np.isinf(top[..., 0]), top[..., 0], out)


def log_add(a: float, b: float) -> float:
    """Log-space addition of two values."""
    return float(np.logaddexp(a, b))


def log_binomial_pmf(k: int, n: int, q: float) -> float:
    """Log of the Binomial(n, q) probability mass at ``k`` (with 0**0 = 1)."""
    if not 0 <= k <= n:
        raise ValueError(f"k={k} outside [0, {n}]")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q={q} outside [0, 1]")
    out = math.lgamma(n + 1) - math.lgamma(k + 1) - math.lgamma(n - k + 1)
    if k:
        out += -math.inf if q == 0.0 else k * math.log(q)
    if n - k:
        out += -math.inf if q == 1.0 else (n - k) * math.log1p(-q)
    return out


@functools.lru_cache(maxsize=4096)
def log_binomial_pmf_all(n: int, q: float) -> np.ndarray:
    """Read-only vector of ``log_binomial_pmf(k, n, q)`` for k = 0..n."""
    out = np.array([log_binomial_pmf(k, n, q) for k in range(n + 1)])
    out.flags.writeable = False
    return out


def _eval(f: Callable, x: np.ndarray) -> np.ndarray:
    y = f(x)
    return np.broadcast_to(np.asarray(y, dtype=float), x.shape)


def _gk15(f: Callable, a: float, b: float) -> tuple[float, float, float]:
    half = 0.5 * (b - a)
    y = _eval(f, 0.5 * (a + b) + half * _NODES)
    kronrod = half * float(np.dot(_KRONROD_W, y))
    gauss = half * float(np.dot(_GAUSS_W, y))
    resabs = abs(half) * float(np.dot(_KRONROD_W, np.abs(y)))
    err = abs(kronrod - gauss)
    # A Gauss/Kronrod gap at rounding level carries no information.
    if err <= 50.0 * _EPS * resabs:
        err = 0.0
    return kronrod, err, resabs


def _adaptive(f: Callable, a: float, b: float, tol: float) -> tuple[float, float]:
    # Global refinement: always split the interval with the largest error.
    value, err, _ = _gk15(f, a, b)
    heap = [(-err, a, b, value, 0)]
    total_err = err
    while total_err > tol and heap:
        if len(heap) >= MAX_INTERVALS:
            break
        neg_err, lo, hi, value, depth = heap[0]
        if depth >= MAX_DEPTH or -neg_err == 0.0:
            break
        heapq.heappop(heap)
        mid = 0.5 * (lo + hi)
        left, right = _gk15(f, lo, mid), _gk15(f, mid, hi)
        heapq.heappush(heap, (-left[1], lo, mid, left[0], depth + 1))
        heapq.heappush(heap, (-right[1], mid, hi, right[0], depth + 1))
        total_err = math.fsum(-h[0] for h in heap)
    total = math.fsum(h[3] for h in heap)
    if total_err > tol or not math.isfinite(total):
        raise QuadratureError(
            f"quadrature did not converge on [{a}, {b}] (error {total_err:.3g})",
            total, total_err)
    return total, total_err


def integrate(f: Callable, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Adaptive Gauss-Kronrod quadrature of ``f`` over ``[lo, hi]``.

    ``f`` is called with numpy arrays of nodes and must be vectorised (a
    constant return is broadcast). Infinite limits are mapped onto finite
    intervals: ``x = t / (1 - t**2)`` on (-1, 1) for the whole line,
    ``x = lo + t / (1 - t)`` on [0, 1) for a right tail and
    ``x = hi - (1 - t) / t`` on (0, 1] for a left tail. The Kronrod rule
    never evaluates endpoints, so the singular ends of the maps are safe.

    Raises:
      QuadratureError: the interval or depth cap was reached before the
        error estimate fell below ``tol``; ``estimate`` holds the best value
        found.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if lo == hi:
        return 0.0
    if lo > hi:
        return -integrate(f, hi, lo, tol)
    lo_inf, hi_inf = math.isinf(lo), math.isinf(hi)
    if lo_inf and hi_inf:
        def g(t):
            s = 1.0 - t * t
            return _eval(f, t / s) * (1.0 + t * t) / (s * s)
        return _adaptive(g, -1.0, 1.0, tol)[0]
    if hi_inf:
        def g(t):
            s = 1.0 - t
            return _eval(f, lo + t / s) / (s * s)
        return _adaptive(g, 0.0, 1.0, tol)[0]
    if lo_inf:
        def g(t):
            return _eval(f, hi - (1.0 - t) / t) / (t * t)
        return _adaptive(g, 0.0, 1.0, tol)[0]
    return _adaptive(f, lo, hi, tol)[0]


def _t_log_norm(dof: int) -> float:
    return (math.lgamma(0.5 * (dof + 1)) - math.lgamma(0.5 * dof)
            - 0.5 * math.log(dof * math.pi))


def student_t_pdf(x, dof: int):
    c = _t_log_norm(dof)
    return np.exp(c - 0.5 * (dof + 1) * np.log1p(np.square(x) / dof))


def student_t_sf(x: float, dof: int) -> float:
    """Upper tail ``P[T > x]`` by quadrature of the density."""
    if x < 0:
        return 1.0 - student_t_sf(-x, dof)
    return integrate(lambda u: student_t_pdf(u, dof), x, math.inf, tol=1e-15)


def student_t_cdf(x: float, dof: int) -> float:
    return 1.0 - student_t_sf(x, dof) if x >= 0 else student_t_sf(-x, dof)


@functools.lru_cache(maxsize=256)
def student_t_quantile(p: float, dof: int) -> float:
    """Inverse CDF of Student's t with ``dof`` degrees of freedom.

    Bisection on the quadrature tail probability; the tail (not the CDF) is
    matched so that quantiles far out in the upper tail keep full relative
    precision. Results are cached per ``(p, dof)``.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p={p} outside (0, 1)")
    if dof < 1 or int(dof) != dof:
        raise ValueError(f"dof={dof} must be a positive integer")
    dof = int(dof)
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -student_t_quantile(1.0 - p, dof)
    target = 1.0 - p
    lo, hi = 0.0, 1.0
    while student_t_sf(hi, dof) > target:
        lo, hi = hi, 2.0 * hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if student_t_sf(mid, dof) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, hi):
            break
    return 0.5 * (lo + hi)


def normal_quantile(p: float) -> float:
    """Standard normal inverse CDF (bisection on ``erfc``)."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"p={p} outside (0, 1)")
    if p < 0.5:
        return -normal_quantile(1.0 - p)
    target = 1.0 - p
    lo, hi = 0.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if 0.5 * math.erfc(mid / math.sqrt(2.0)) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
