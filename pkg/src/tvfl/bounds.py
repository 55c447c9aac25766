"""Latency model and convergence/round/latency bound calculators."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import exp_integral_e1, uplink_rate
from .errors import ConvergedError, DomainError, UnreachableTargetError
from .splitnn import NetSpec


@dataclass(frozen=True)
class BoundParams:
    """Constants of the smooth, strongly convex analysis.

    ``L`` smoothness, ``mu`` strong convexity, ``C`` loss range, ``c`` gradient
    variance, ``eps_acc`` target accuracy and ``v`` the effective activation
    level.
    """

    L: float
    mu: float
    C: float
    c: float = 0.0
    eps_acc: float = 0.1
    v: float = 1.0
    eta: float | None = None

    def __post_init__(self):
        if not 0 < self.mu <= self.L:
            raise DomainError(f"need 0 < mu <= L, got mu={self.mu}, L={self.L}")
        if not self.C > 0:
            raise DomainError("C must be positive")
        if self.c < 0:
            raise DomainError("c must be non-negative")
        if not 0 < self.v <= 1:
            raise DomainError(f"effective activation level must lie in (0, 1], got {self.v}")
        if self.eta is not None and not 0 < self.eta <= 1.0 / self.L:
            raise DomainError(f"step size {self.eta} exceeds 1/L = {1.0 / self.L}")

    @property
    def noise_floor(self) -> float:
        return self.c / (2.0 * self.mu * self.v)

    @property
    def contraction(self) -> float:
        return 1.0 - self.mu * self.v / self.L


def convergence_gap_bound(t, params: BoundParams, initial_gap: float):
    """Upper bound on ``E[L(theta_{t+1}) - L*]``:
    ``(1 - mu v / L)**(t+1) * gap_0 + c / (2 mu v)``."""
    t = np.asarray(t)
    out = params.contraction ** (t + 1) * initial_gap + params.noise_floor
    return float(out) if out.ndim == 0 else out


def expected_rounds(params: BoundParams) -> float:
    """Round count after which the gap bound falls below ``eps_acc``.

    ``ln(eps/C - c/(2 mu v C)) / ln(1 - mu v / L)``, clipped at zero.
    """
    if params.eps_acc <= params.noise_floor:
        raise UnreachableTargetError(
            f"target {params.eps_acc} is not above the noise floor c/(2 mu v) = {params.noise_floor}"
        )
    arg = params.eps_acc / params.C - params.noise_floor / params.C
    if arg >= 1.0 or params.contraction <= 0.0:
        return 0.0
    return math.log(arg) / math.log(params.contraction)


@dataclass(frozen=True)
class LatencyConfig:
    """Per-round communication payload and compute budget.

    ``local_ops`` and ``central_ops`` are operation counts for one round;
    :meth:`from_spec` derives them from a :class:`NetSpec`.
    """

    q: int = 32
    samples: int = 5000
    d: int = 8
    bandwidth: float = 1e6
    server_speed: float = 1e10
    su_speed: float | None = None
    local_ops: float = 0.0
    central_ops: float = 0.0

    def __post_init__(self):
        if self.q <= 0 or self.samples <= 0 or self.d <= 0 or self.bandwidth <= 0 or self.server_speed <= 0:
            raise DomainError("latency parameters must be positive")
        if self.su_speed is not None and self.su_speed <= 0:
            raise DomainError("SU speed must be positive")

    @property
    def su_speed_resolved(self) -> float:
        return self.server_speed / 4.0 if self.su_speed is None else self.su_speed

    @property
    def payload_bits(self) -> int:
        """``D = q M d`` bits uploaded by each scheduled SU."""
        return self.q * self.samples * self.d

    @classmethod
    def from_spec(cls, spec: NetSpec, samples: int, *, q: int = 32, bandwidth: float = 1e6,
                  server_speed: float = 1e10, su_speed: float | None = None) -> "LatencyConfig":
        return cls(q=q, samples=samples, d=spec.d, bandwidth=bandwidth, server_speed=server_speed,
                   su_speed=su_speed, local_ops=model_ops(spec.local_arch, samples),
                   central_ops=model_ops(spec.central_arch, samples))


def mac_count(arch) -> int:
    """Multiply-accumulates of one forward pass for one sample."""
    return int(sum(a * b for a, b in zip(arch[:-1], arch[1:])))


def model_ops(arch, samples: int = 1) -> float:
    """Operations for forward plus backward: ``2 * MAC`` per pass, two passes."""
    return 2.0 * 2.0 * mac_count(arch) * samples


def comm_latency(q, M, d, bandwidth, power_budget, noise_power, rho_1, g_1) -> float:
    """Upload time of the weakest SU: ``q M d / (B log2(1 + (P/sigma^2) rho_1 / E1(G_1)))``."""
    for name, val in (("q", q), ("M", M), ("d", d), ("bandwidth", bandwidth), ("power_budget", power_budget),
                      ("noise_power", noise_power), ("rho_1", rho_1), ("G_1", g_1)):
        if not val > 0:
            raise DomainError(f"{name} must be positive, got {val!r}")
    rate = uplink_rate(bandwidth, power_budget * rho_1 / exp_integral_e1(g_1), noise_power)
    return q * M * d / rate


def comp_latency(spec: NetSpec, active_count: int, server_speed: float = 1e10,
                 su_speed: float | None = None, samples: int = 1) -> float:
    """Compute time of one round.

    SUs work in parallel, so the local term is paid once if any SU is active;
    the central model runs every round.
    """
    su_speed = server_speed / 4.0 if su_speed is None else su_speed
    local = model_ops(spec.local_arch, samples) / su_speed if active_count > 0 else 0.0
    return local + model_ops(spec.central_arch, samples) / server_speed


def round_latency(latency: LatencyConfig, power_budget, noise_power, rho_1, g_1, active_count: int):
    """``(T_comm, T_comp)`` for one round; nothing is uploaded when no SU is active."""
    if active_count == 0:
        return 0.0, latency.central_ops / latency.server_speed
    t_comm = comm_latency(latency.q, latency.samples, latency.d, latency.bandwidth,
                          power_budget, noise_power, rho_1, g_1)
    t_comp = latency.local_ops / latency.su_speed_resolved + latency.central_ops / latency.server_speed
    return t_comm, t_comp


def total_latency_bound(params: BoundParams, latency: LatencyConfig, rho_1, g_1,
                        power_budget, noise_power) -> float:
    """``(T_comm + T_comp) * N_expect`` with every SU scheduled."""
    n = expected_rounds(params)
    if n == 0:
        return 0.0
    t_comm, t_comp = round_latency(latency, power_budget, noise_power, rho_1, g_1, active_count=1)
    return (t_comm + t_comp) * n


@dataclass
class EmpiricalV:
    v_t: np.ndarray
    v0_t: np.ndarray
    running_min: np.ndarray

    @property
    def v_min(self) -> float:
        finite = self.v_t[np.isfinite(self.v_t)]
        return float(finite.min()) if finite.size else float("nan")

    @property
    def mean_v0(self) -> float:
        finite = self.v0_t[np.isfinite(self.v0_t)]
        return float(finite.mean()) if finite.size else float("nan")


def v_from_weights(weights, active) -> float:
    """``v_0 + sum_{k active} v_k``; ``active`` is indexed from SU 1."""
    w = np.asarray(weights, dtype=float)
    return float(w[0] + w[1:][np.asarray(active, dtype=bool)].sum())


def empirical_v(metrics) -> EmpiricalV:
    """Per-round ``v_t`` and its running minimum from logged rounds.

    Rounds without logged block weights yield ``nan`` and are skipped by the
    running minimum.
    """
    v, v0 = [], []
    for m in metrics:
        w = m.block_weights
        if w is None:
            v.append(np.nan)
            v0.append(np.nan)
        else:
            v.append(v_from_weights(w, m.active))
            v0.append(float(w[0]))
    v = np.asarray(v)
    filled = np.where(np.isfinite(v), v, np.inf)
    running = np.minimum.accumulate(filled) if v.size else v
    running = np.where(np.isinf(running), np.nan, running)
    return EmpiricalV(v, np.asarray(v0), running)


def estimate_bound_params(params_seq, grads_seq, losses, c: float = 0.0, eps_acc: float = 0.1,
                          v: float = 1.0) -> BoundParams:
    """Rough ``L``, ``mu``, ``C`` from a probe trajectory of flattened parameters/gradients.

    ``L`` and ``mu`` are the largest and smallest observed
    ``||grad_{t+1} - grad_t|| / ||theta_{t+1} - theta_t||``; ``C`` is the observed
    loss range.
    """
    ratios = []
    for a, b, ga, gb in zip(params_seq[:-1], params_seq[1:], grads_seq[:-1], grads_seq[1:]):
        step = np.linalg.norm(np.asarray(b) - np.asarray(a))
        if step > 0:
            ratios.append(np.linalg.norm(np.asarray(gb) - np.asarray(ga)) / step)
    if not ratios:
        raise DomainError("probe trajectory never moved")
    L, mu = max(ratios), min(ratios)
    C = float(np.ptp(losses)) or 1.0
    return BoundParams(L=L, mu=max(mu, 1e-12 * L), C=C, c=c, eps_acc=eps_acc, v=v)


class BlockQuadratic:
    """``f(theta) = 0.5 theta^T A theta`` with ``theta`` split into K+1 blocks.

    Block 0 plays the central model and is updated every round; blocks
    ``1..K`` are updated only when scheduled. ``mu`` and ``L`` are the extreme
    eigenvalues of ``A``, the optimum is ``theta = 0`` and the gradient is exact
    (``c = 0``).
    """

    def __init__(self, A, block_sizes):
        self.A = np.asarray(A, dtype=float)
        self.block_sizes = tuple(int(s) for s in block_sizes)
        if sum(self.block_sizes) != self.A.shape[0]:
            raise DomainError("block sizes do not cover the matrix")
        eig = np.linalg.eigvalsh(self.A)
        if eig[0] <= 0:
            raise DomainError("A must be positive definite")
        self.mu, self.L = float(eig[0]), float(eig[-1])
        self.edges = np.cumsum((0,) + self.block_sizes)

    @classmethod
    def random(cls, rng, block_sizes, mu=0.5, L=4.0):
        n = sum(block_sizes)
        q, _ = np.linalg.qr(rng.normal(size=(n, n)))
        eig = np.concatenate([[mu, L], rng.uniform(mu, L, n - 2)])
        return cls(q @ np.diag(eig) @ q.T, block_sizes)

    def value(self, theta) -> float:
        return 0.5 * float(theta @ self.A @ theta)

    def grad(self, theta) -> np.ndarray:
        return self.A @ theta

    def block_weights(self, g) -> np.ndarray:
        norms = np.array([float(g[a:b] @ g[a:b]) for a, b in zip(self.edges[:-1], self.edges[1:])])
        if norms.sum() == 0:
            raise ConvergedError("gradient vanished")
        return norms / norms.sum()

    def run(self, theta0, eta, active_sets):
        """Scheduled block gradient descent.

        Returns ``(gaps, v_t)``: ``gaps[t]`` is ``f(theta_t)`` (``f* = 0``) for
        ``t = 0..T`` and ``v_t[t]`` the effective activation level of round ``t``.
        """
        theta = np.array(theta0, dtype=float)
        gaps, vs = [self.value(theta)], []
        for active in active_sets:
            g = self.grad(theta)
            w = self.block_weights(g)
            vs.append(v_from_weights(w, active))
            mask = np.zeros_like(theta)
            mask[self.edges[0]:self.edges[1]] = 1.0
            for k, on in enumerate(active, start=1):
                if on:
                    mask[self.edges[k]:self.edges[k + 1]] = 1.0
            theta = theta - eta * mask * g
            gaps.append(self.value(theta))
        return np.asarray(gaps), np.asarray(vs)
