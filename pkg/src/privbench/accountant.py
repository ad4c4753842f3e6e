"""Renyi-DP accounting for the Poisson-subsampled Gaussian mechanism.

RDP of one step at order alpha is ``log(A_alpha) / (alpha - 1)`` with
``A_alpha = E_{z ~ N(0, s^2)} [((1 - q) + q exp((2z - 1) / (2 s^2)))^alpha]``.
Integer orders use the finite binomial expansion; fractional orders split the
integral at the point where the two mixture components cross and expand each
side as a convergent binomial series.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np
from scipy import special

from privbench.errors import CalibrationError, ConfigError, DomainError

DEFAULT_ORDERS: tuple[float, ...] = (1.25, 1.5, *map(float, range(2, 65)), 128.0, 256.0)

_FRAC_MAX_TERMS = 2000


def _log_add(a: float, b: float) -> float:
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = max(a, b), min(a, b)
    return hi + math.log1p(math.exp(lo - hi))


def _log_signed_add(sa: int, a: float, sb: int, b: float) -> tuple[int, float]:
    """log|x + y| and its sign, for x = sa*exp(a), y = sb*exp(b)."""
    if a == -math.inf:
        return sb, b
    if b == -math.inf:
        return sa, a
    if sa == sb:
        return sa, _log_add(a, b)
    if a == b:
        return 1, -math.inf
    if a > b:
        return sa, a + math.log1p(-math.exp(b - a))
    return sb, b + math.log1p(-math.exp(a - b))


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
    k = np.arange(alpha + 1, dtype=float)
    log_binom = special.gammaln(alpha + 1) - special.gammaln(k + 1) - special.gammaln(alpha - k + 1)
    terms = log_binom + k * math.log(q) + (alpha - k) * math.log1p(-q) + (k * k - k) / (2 * sigma**2)
    return float(special.logsumexp(terms))


def _log_a_frac(q: float, sigma: float, alpha: float) -> float:
    z0 = sigma**2 * math.log(1 / q - 1) + 0.5
    log_q, log_1mq = math.log(q), math.log1p(-q)
    s0, a0 = 1, -math.inf
    s1, a1 = 1, -math.inf
    for i in range(_FRAC_MAX_TERMS):
        coef = special.binom(alpha, i)
        if coef == 0:
            break
        sign = 1 if coef > 0 else -1
        log_coef = math.log(abs(coef))
        j = alpha - i
        # left of z0: expand around (1-q) mu0; right of z0: around q mu1
        t0 = (log_coef + i * log_q + j * log_1mq + (i * i - i) / (2 * sigma**2)
              + special.log_ndtr((z0 - i) / sigma))
        t1 = (log_coef + j * log_q + i * log_1mq + (j * j - j) / (2 * sigma**2)
              + special.log_ndtr((j - z0) / sigma))
        s0, a0 = _log_signed_add(s0, a0, sign, t0)
        s1, a1 = _log_signed_add(s1, a1, sign, t1)
        if i > alpha + 1 and max(t0, t1) < _log_add(a0, a1) - 40:
            break
    total_sign, total = _log_signed_add(s0, a0, s1, a1)
    if total_sign < 0:
        raise DomainError("numerical failure in fractional-order RDP series")
    return total


def rdp_of_subsampled_gaussian(q: float, sigma: float, alpha: float) -> float:
    """RDP at order `alpha` of one Poisson-subsampled Gaussian step."""
    if alpha <= 1:
        raise DomainError(f"RDP order must exceed 1, got {alpha}")
    if not 0 <= q <= 1:
        raise DomainError(f"sampling rate must lie in [0, 1], got {q}")
    if sigma < 0:
        raise DomainError("noise multiplier must be non-negative")
    if q == 0:
        return 0.0
    if sigma == 0:
        return math.inf
    if q == 1:
        return alpha / (2 * sigma**2)
    if float(alpha).is_integer():
        log_a = _log_a_int(q, sigma, int(alpha))
    else:
        log_a = _log_a_frac(q, sigma, alpha)
    return max(log_a, 0.0) / (alpha - 1)


def compute_rdp(q: float, sigma: float, steps: int, orders: Sequence[float] = DEFAULT_ORDERS) -> np.ndarray:
    """RDP of `steps` compositions at each order (additive in steps)."""
    return np.array([steps * rdp_of_subsampled_gaussian(q, sigma, a) for a in orders])


def epsilon_from_rdp(rdp: Mapping[float, float] | Sequence[tuple[float, float]], delta: float) -> tuple[float, float]:
    """Convert an RDP curve to (epsilon, best order) at `delta`.

    Uses ``eps = min_alpha rdp(alpha) + log(1/delta) / (alpha - 1)``.
    """
    items = list(rdp.items()) if isinstance(rdp, Mapping) else list(rdp)
    if not items:
        raise ConfigError("RDP order grid is empty")
    if not 0 < delta < 1:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    best_eps, best_alpha = math.inf, float(items[0][0])
    for alpha, value in items:
        eps = value + math.log(1 / delta) / (alpha - 1)
        if eps < best_eps:
            best_eps, best_alpha = eps, float(alpha)
    return best_eps, best_alpha


class RdpAccountant:
    """Accumulates RDP over training steps; composition is additive per order."""

    def __init__(self, orders: Sequence[float] = DEFAULT_ORDERS):
        self.orders = tuple(float(a) for a in orders)
        if not self.orders:
            raise ConfigError("RDP order grid is empty")
        self._rdp = np.zeros(len(self.orders))
        self._cache: dict[tuple[float, float], np.ndarray] = {}
        self.steps = 0

    def step(self, q: float, sigma: float, count: int = 1) -> None:
        key = (float(q), float(sigma))
        if key not in self._cache:
            self._cache[key] = compute_rdp(q, sigma, 1, self.orders)
        self._rdp = self._rdp + count * self._cache[key]
        self.steps += count

    @property
    def rdp(self) -> np.ndarray:
        return self._rdp.copy()

    def get_epsilon(self, delta: float) -> tuple[float, float]:
        return epsilon_from_rdp(list(zip(self.orders, self._rdp)), delta)


def epsilon_for(sigma: float, q: float, steps: int, delta: float,
                orders: Sequence[float] = DEFAULT_ORDERS) -> float:
    return epsilon_from_rdp(list(zip(orders, compute_rdp(q, sigma, steps, orders))), delta)[0]


def calibrate_sigma(target_epsilon: float, delta: float, q: float, steps: int,
                    orders: Sequence[float] = DEFAULT_ORDERS, bracket=(1e-2, 1e4),
                    tolerance: float = 1e-3, max_iter: int = 200) -> float:
    """Smallest-found noise multiplier whose composed epsilon lies in [target - tol, target]."""
    if target_epsilon <= 0:
        raise ConfigError("target epsilon must be positive")
    lo, hi = bracket
    eps_lo = epsilon_for(lo, q, steps, delta, orders)
    eps_hi = epsilon_for(hi, q, steps, delta, orders)
    if eps_hi > target_epsilon:
        raise CalibrationError(
            f"no sigma in [{lo}, {hi}] reaches epsilon {target_epsilon}: "
            f"eps({lo})={eps_lo:.4g}, eps({hi})={eps_hi:.4g}")
    if eps_lo <= target_epsilon:
        if eps_lo >= target_epsilon - tolerance:
            return lo
        raise CalibrationError(
            f"target epsilon {target_epsilon} is above eps({lo})={eps_lo:.4g}; widen the bracket")
    for _ in range(max_iter):
        mid = math.sqrt(lo * hi) if hi / lo > 4 else 0.5 * (lo + hi)
        eps_mid = epsilon_for(mid, q, steps, delta, orders)
        if eps_mid > target_epsilon:
            lo = mid
        else:
            hi, eps_hi = mid, eps_mid
        if eps_hi >= target_epsilon - tolerance:
            return hi
    raise CalibrationError(f"bisection did not converge; bracket [{lo}, {hi}], eps(hi)={eps_hi:.6g}")
