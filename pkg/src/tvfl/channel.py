"""Uplink channel model for the sensing users.

Covers the exponential integral used by truncated channel inversion, threshold
alignment across users, and the Shannon-rate link model.

Notes
-----
The activation ratio attached to a threshold ``G`` is ``E1(G)``. The probability
that a user actually transmits is ``exp(-G)``, a different number. Both are
exposed (:attr:`ChannelState.activation_ratio` and
:attr:`ChannelState.transmit_probability`) and neither is silently substituted
for the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, PreconditionError

EULER_GAMMA = 0.57721566490153286061

_SERIES_CUTOFF = 1.0
_EPS = 1e-17
_FPMIN = 1e-300
_MAXIT = 500

# exp(-x) underflows past this point
_G_MAX = 745.0


def _e1_scalar(x: float) -> float:
    if not x > 0.0:
        raise DomainError(f"E1 is defined for x > 0 only, got {x!r}")
    if x <= _SERIES_CUTOFF:
        # -gamma - ln x + sum_{k>=1} (-1)^(k+1) x^k / (k k!)
        term = 1.0
        total = 0.0
        for k in range(1, _MAXIT):
            term *= -x / k
            contrib = -term / k
            total += contrib
            if abs(contrib) < _EPS * abs(total):
                break
        return -EULER_GAMMA - math.log(x) + total
    if x > _G_MAX:
        return 0.0
    # modified Lentz evaluation of the continued fraction
    b = x + 1.0
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, _MAXIT):
        an = -float(i * i)
        b += 2.0
        d = 1.0 / (an * d + b)
        c = b + an / c
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return h * math.exp(-x)


def exp_integral_e1(x):
    """Exponential integral ``E1(x) = int_x^inf exp(-t)/t dt`` for ``x > 0``.

    Uses the power series for ``x <= 1`` and a continued fraction above.
    Accepts a scalar or an array; arrays are evaluated elementwise.

    Raises
    ------
    DomainError
        If any argument is not strictly positive.
    """
    if np.ndim(x) == 0:
        return _e1_scalar(float(x))
    arr = np.asarray(x, dtype=float)
    out = np.empty_like(arr)
    for idx, val in np.ndenumerate(arr):
        out[idx] = _e1_scalar(float(val))
    return out


def inv_exp_integral(target: float) -> float:
    """Return ``G`` with ``E1(G) = target``.

    ``E1`` maps ``(0, inf)`` monotonically onto ``(0, inf)``, so a bracket always
    exists; it is narrowed by bisection (geometric while the bracket spans
    decades) and finished with safeguarded Newton steps.
    """
    target = float(target)
    if not target > 0.0 or not math.isfinite(target):
        raise DomainError(f"activation ratio must be positive and finite, got {target!r}")
    lo, hi = 1e-300, _G_MAX
    if _e1_scalar(lo) < target:
        raise DomainError(f"activation ratio {target!r} needs a threshold below double precision")
    if target < 1e-320:
        return hi

    while hi / lo > 1.5:
        mid = math.sqrt(lo) * math.sqrt(hi)
        if _e1_scalar(mid) > target:
            lo = mid
        else:
            hi = mid

    g = 0.5 * (lo + hi)
    for _ in range(200):
        f = _e1_scalar(g) - target
        if f > 0.0:
            lo = g
        else:
            hi = g
        if f == 0.0 or hi - lo <= 2e-16 * hi:
            break
        # d/dG E1(G) = -exp(-G)/G
        step = f * g * math.exp(g)
        cand = g + step
        if not lo < cand < hi:
            cand = 0.5 * (lo + hi)
        if cand == g:
            break
        g = cand
    return g


def large_scale(shadowing, distance, pathloss_exponent: float):
    """Large-scale coefficient ``rho = shadowing * distance**(-kappa)``."""
    distance = np.asarray(distance, dtype=float)
    if np.any(distance <= 0):
        raise DomainError("distance must be positive")
    rho = np.asarray(shadowing, dtype=float) * distance ** (-float(pathloss_exponent))
    return float(rho) if rho.ndim == 0 else rho


def draw_fading_power(rng: np.random.Generator, size=None):
    """Draw ``|h|^2`` for ``h ~ CN(0, 1)``, i.e. a unit-mean exponential."""
    return rng.standard_exponential(size)


def truncated_inversion(rho, fading_power, threshold, power_budget):
    """Truncated channel inversion.

    Returns ``(p, active)``. Active users (``|h|^2 >= G``, boundary included)
    get ``p**2 = P_rx / (rho |h|^2)`` with ``P_rx = rho P / E1(G)``, so the
    received power equals ``P_rx``; silenced users get ``p = 0``.
    """
    rho = np.asarray(rho, dtype=float)
    h2 = np.asarray(fading_power, dtype=float)
    if np.any(rho <= 0) or power_budget <= 0:
        raise DomainError("rho and the power budget must be positive")
    if np.any(np.asarray(threshold) <= 0):
        raise DomainError("truncation threshold must be positive")
    p_rx = rho * power_budget / exp_integral_e1(threshold)
    active = h2 >= threshold
    with np.errstate(divide="ignore", invalid="ignore"):
        p2 = np.where(active, p_rx / (rho * h2), 0.0)
    p = np.sqrt(p2)
    if p.ndim == 0:
        return float(p), bool(active)
    return p, active


def received_power(rho, threshold, power_budget):
    """Aligned received power ``rho P / E1(G)``."""
    return np.asarray(rho, dtype=float) * power_budget / exp_integral_e1(threshold)


def weakest_index(rho) -> int:
    """Index of the smallest large-scale coefficient (lowest index on ties)."""
    return int(np.argmin(np.asarray(rho, dtype=float)))


def align_thresholds(rho, g_weakest: float) -> np.ndarray:
    """Thresholds that equalise ``rho_k / E1(G_k)`` across users.

    ``rho[0]`` must be the weakest user. Every other user gets
    ``G_k = E1^{-1}(E1(G_1) rho_k / rho_1)`` so all received powers, and hence
    all rates, coincide.
    """
    rho = np.asarray(rho, dtype=float)
    if rho.ndim != 1 or rho.size == 0:
        raise PreconditionError("rho must be a non-empty vector")
    if np.any(rho <= 0):
        raise PreconditionError("large-scale coefficients must be positive")
    if rho[0] > rho.min():
        raise PreconditionError(
            f"user 1 must have the smallest large-scale coefficient "
            f"(rho_1={rho[0]:.6g}, min={rho.min():.6g}); reorder so the weakest user comes first"
        )
    if not g_weakest > 0:
        raise DomainError("threshold of the weakest user must be positive")
    base = exp_integral_e1(g_weakest)
    out = np.empty_like(rho)
    out[0] = g_weakest
    for k in range(1, rho.size):
        out[k] = g_weakest if rho[k] == rho[0] else inv_exp_integral(base * rho[k] / rho[0])
    return out


def thresholds_for_ratio(rho, activation_ratio: float) -> np.ndarray:
    """Aligned thresholds for users in their natural order.

    The weakest user (see :func:`weakest_index`) is given activation ratio
    ``activation_ratio``; the result is indexed like ``rho``.
    """
    rho = np.asarray(rho, dtype=float)
    w = weakest_index(rho)
    order = np.r_[w, np.delete(np.arange(rho.size), w)]
    g = align_thresholds(rho[order], inv_exp_integral(activation_ratio))
    out = np.empty_like(g)
    out[order] = g
    return out


def uplink_rate(bandwidth: float, rx_power, noise_power: float):
    """Shannon rate ``B log2(1 + P_rx / sigma^2)`` in bit/s."""
    r = bandwidth * np.log2(1.0 + np.asarray(rx_power, dtype=float) / noise_power)
    return float(r) if np.ndim(r) == 0 else r


@dataclass(frozen=True)
class ChannelConfig:
    """Static uplink parameters plus per-user large-scale state."""

    bandwidth: float = 1e6
    noise_power: float = 1e-10
    power_budget: float = 0.1
    pathloss_exponent: float = 4.0
    distances: tuple = ()
    shadowing: tuple = ()

    def __post_init__(self):
        if self.bandwidth <= 0 or self.noise_power <= 0 or self.power_budget <= 0:
            raise ConfigError("bandwidth, noise power and power budget must be positive")
        if len(self.distances) != len(self.shadowing):
            raise ConfigError("distances and shadowing must have one entry per user")

    @property
    def num_users(self) -> int:
        return len(self.distances)

    @property
    def rho(self) -> np.ndarray:
        return np.asarray(large_scale(np.asarray(self.shadowing), np.asarray(self.distances),
                                      self.pathloss_exponent), dtype=float).reshape(-1)


@dataclass
class ChannelState:
    """Per-user channel quantities for one round."""

    rho: np.ndarray
    fading_power: np.ndarray
    threshold: np.ndarray
    power_budget: float = 1.0
    activation_ratio: np.ndarray = field(init=False)
    received_power: np.ndarray = field(init=False)

    def __post_init__(self):
        self.activation_ratio = exp_integral_e1(self.threshold)
        self.received_power = np.asarray(self.rho) * self.power_budget / self.activation_ratio

    @property
    def transmit_probability(self) -> np.ndarray:
        return np.exp(-np.asarray(self.threshold))

    @property
    def active(self) -> np.ndarray:
        return np.asarray(self.fading_power) >= np.asarray(self.threshold)

    @classmethod
    def draw(cls, config: ChannelConfig, threshold, rng: np.random.Generator) -> "ChannelState":
        return cls(config.rho, draw_fading_power(rng, config.num_users),
                   np.asarray(threshold, dtype=float), config.power_budget)
