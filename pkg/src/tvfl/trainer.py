"""Truncated VFL training loop.

Each round draws fresh small-scale fading for every SU, schedules the SUs whose
fading power clears their aligned threshold, and runs one split
forward/backward pass. Silenced SUs are represented at the server by the last
intermediate outputs they uploaded and neither receive gradients nor update.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bounds import LatencyConfig, round_latency, v_from_weights
from .channel import ChannelConfig, draw_fading_power, thresholds_for_ratio
from .errors import ConfigError, ConvergedError, DimensionMismatchError, DivergenceError, StaleCacheError
from .scenario import Dataset, ScenarioConfig
from .splitnn import (
    ActivationBundle,
    LossSpec,
    NetSpec,
    SplitNet,
    backward,
    central_backward,
    central_forward,
    forward,
    grad_block_weights,
    init_split_net,
    local_backward,
    local_forward,
    sgd_step,
)

METRIC_COLUMNS = ("round", "active_set", "train_mse", "test_mse", "v0", "v_measured",
                  "t_comm_s", "t_comp_s", "t_cum_s", "v_blocks")


@dataclass(frozen=True)
class TrainConfig:
    """Hyper-parameters of one training run.

    ``batch_size=None`` means full-batch descent. ``eval_every`` sets how often
    the test MSE and the gradient-share diagnostics are computed. With
    ``stop_at_target`` the run ends at the first evaluation whose test MSE is
    at most ``target_mse``.
    """

    eta: float = 1e-4
    rounds: int = 2000
    batch_size: int | None = None
    activation_ratio: float = 0.9
    seed: int = 0
    eval_every: int = 10
    target_mse: float | None = None
    stop_at_target: bool = False
    lam: float = 0.0
    output_bias: str = "label_mean"

    def __post_init__(self):
        if not self.eta >= 0 or not math.isfinite(self.eta):
            raise ConfigError("eta must be a finite non-negative number")
        if self.rounds < 0:
            raise ConfigError("rounds must be non-negative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if not self.activation_ratio > 0:
            raise ConfigError("activation ratio must be positive")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be at least 1")
        if self.output_bias not in ("label_mean", "random"):
            raise ConfigError("output_bias must be 'label_mean' or 'random'")
        if self.stop_at_target and self.target_mse is None:
            raise ConfigError("stop_at_target needs target_mse")

    @property
    def loss_spec(self) -> LossSpec:
        return LossSpec(self.lam)


class StaleCache:
    """Latest uploaded local outputs, keyed by SU and training-sample index.

    ``refreshed[k, i]`` is the round in which entry ``(k, i)`` was last written,
    or ``-1`` if it never was.
    """

    def __init__(self, num_su: int, num_samples: int, d: int):
        self.values = np.zeros((num_su, num_samples, d))
        self.refreshed = np.full((num_su, num_samples), -1, dtype=np.int64)

    def write(self, k: int, idx, p, t: int) -> None:
        self.values[k, idx] = p
        self.refreshed[k, idx] = t

    def read(self, k: int, idx) -> np.ndarray:
        if np.any(self.refreshed[k, idx] < 0):
            raise StaleCacheError(f"SU {k + 1} is silenced but has no cached output for some samples")
        return self.values[k, idx].copy()

    def is_warm(self) -> bool:
        return bool(np.all(self.refreshed >= 0))


@dataclass
class RoundMetrics:
    round: int
    active: np.ndarray
    train_mse: float
    test_mse: float = float("nan")
    block_weights: np.ndarray | None = None
    v_measured: float = float("nan")
    t_comm: float = 0.0
    t_comp: float = 0.0
    t_cum: float = 0.0

    @property
    def active_mask(self) -> int:
        """Bit ``k-1`` is set when SU ``k`` is scheduled."""
        return int(sum(1 << k for k, on in enumerate(self.active) if on))

    @property
    def v0(self) -> float:
        return float("nan") if self.block_weights is None else float(self.block_weights[0])

    def row(self) -> list:
        blocks = "" if self.block_weights is None else ";".join(repr(float(w)) for w in self.block_weights)
        return [self.round, self.active_mask, repr(self.train_mse), repr(self.test_mse), repr(self.v0),
                repr(self.v_measured), repr(self.t_comm), repr(self.t_comp), repr(self.t_cum), blocks]


@dataclass
class EvalResult:
    mse: float
    power_accuracy: np.ndarray
    location_error: np.ndarray
    predictions: np.ndarray = field(repr=False, default=None)


@dataclass
class TrainResult:
    net: SplitNet
    metrics: list
    thresholds: np.ndarray
    rho: np.ndarray
    rounds_to_target: int | None = None
    latency_to_target: float | None = None

    def evaluated(self) -> list:
        return [m for m in self.metrics if not math.isnan(m.test_mse)]


def mse(yhat, y) -> float:
    """Sum of squared label errors averaged over samples."""
    return float(((np.asarray(y) - np.asarray(yhat)) ** 2).sum() / np.asarray(y).shape[0])


def schedule_round(fading_power, thresholds, t: int) -> np.ndarray:
    """SU ``k`` is active iff ``|h_k|^2 >= G_k``; round 0 activates everyone."""
    if t == 0:
        return np.ones(np.shape(thresholds), dtype=bool)
    return np.asarray(fading_power) >= np.asarray(thresholds)


def true_gradients(net: SplitNet, xs, y, loss_spec: LossSpec | None = None):
    """Gradients of every block with fresh activations from all SUs."""
    return backward(net, forward(net, xs), y, loss_spec)


def run_round(net: SplitNet, xs, y, idx, active, cache: StaleCache, eta: float, t: int,
              loss_spec: LossSpec | None = None, track_v: bool = False):
    """One T-VFL round on a batch; updates ``net`` and ``cache`` in place.

    ``idx`` are the training-sample indices of the batch rows. Returns
    ``(train_mse, block_weights or None)``; the weights are taken from the true
    gradient at the pre-update parameters.
    """
    K = net.spec.num_su
    active = np.asarray(active, dtype=bool)
    outs, caches = [], []
    for k in range(K):
        if active[k]:
            p, c = local_forward(net.local[k], xs[k], net.spec)
            cache.write(k, idx, p, t)
        else:
            p, c = cache.read(k, idx), None
        outs.append(p)
        caches.append(c)
    yhat, cc = central_forward(net.central, outs, net.spec)
    bundle = ActivationBundle(outs, caches, cc, yhat)
    train_mse = mse(yhat, y)
    if not math.isfinite(train_mse):
        raise DivergenceError(f"round {t}: training loss is {train_mse}")

    g0, upstream = central_backward(net.central, bundle, y, net.spec, loss_spec)
    grads = {k: local_backward(net.local[k], caches[k], upstream[k], net.spec, loss_spec)
             for k in range(K) if active[k]}

    weights = None
    if track_v:
        if active.all():
            full = [g0] + [grads[k] for k in range(K)]
        else:
            full = true_gradients(net, xs, y, loss_spec)
        try:
            weights = grad_block_weights(full)
        except ConvergedError:
            weights = None

    net.central = sgd_step(net.central, g0, eta)
    for k, g in grads.items():
        net.local[k] = sgd_step(net.local[k], g, eta)
    return train_mse, weights


def evaluate(net: SplitNet, xs, y, power_levels=(1, 2, 3), num_pu: int = 2) -> EvalResult:
    """Test MSE, rounded power-level accuracy per PU and 3D location error per PU."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] == 0:
        raise ValueError("empty test set")
    yhat = forward(net, xs).yhat
    levels = np.asarray(sorted(power_levels), dtype=float)
    nearest = levels[np.abs(yhat[:, :num_pu, None] - levels).argmin(axis=-1)]
    acc = (nearest == y[:, :num_pu]).mean(axis=0)
    diff = (yhat[:, num_pu:] - y[:, num_pu:]).reshape(len(y), num_pu, 3)
    return EvalResult(mse(yhat, y), acc, np.sqrt((diff ** 2).sum(-1)), yhat)


def round_to_levels(values, power_levels=(1, 2, 3)) -> np.ndarray:
    levels = np.asarray(sorted(power_levels), dtype=float)
    v = np.asarray(values, dtype=float)
    return levels[np.abs(v[..., None] - levels).argmin(axis=-1)]


def su_channel(scenario: ScenarioConfig, seed: int, base: ChannelConfig | None = None) -> ChannelConfig:
    """Uplink large-scale state: SU region centres to the server, seeded log-normal shadowing."""
    base = base or ChannelConfig()
    server = np.asarray(scenario.server_position, dtype=float)
    centres = np.array([((r[0] + r[2]) / 2, (r[1] + r[3]) / 2) for r in scenario.su_regions[: scenario.num_su]])
    dist = np.sqrt(((centres - server) ** 2).sum(-1))
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    shadow = 10.0 ** (rng.normal(0.0, scenario.shadowing_std_db, scenario.num_su) / 10.0)
    return ChannelConfig(base.bandwidth, base.noise_power, base.power_budget, scenario.pathloss_exponent,
                         tuple(float(x) for x in dist), tuple(float(x) for x in shadow))


def _streams(seed: int):
    names = ("init", "fading", "batch")
    return {n: np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(10 + i,)))
            for i, n in enumerate(names)}


def build_net(spec: NetSpec, dataset: Dataset, config: TrainConfig) -> SplitNet:
    """Seeded initialisation; the output bias starts at the mean training label by default."""
    bias = dataset.targets("train").mean(axis=0) if config.output_bias == "label_mean" else None
    return init_split_net(spec, _streams(config.seed)["init"], bias)


def train(dataset: Dataset, net: SplitNet, config: TrainConfig, channel: ChannelConfig,
          latency: LatencyConfig | None = None, on_round=None) -> TrainResult:
    """Run T-VFL rounds until the budget (or the target MSE) is reached.

    ``net`` is trained in place. Fading draws come from their own stream, so
    runs that differ only in activation ratio see identical channels.
    """
    spec = net.spec
    if dataset.num_su != spec.num_su:
        raise DimensionMismatchError(f"dataset has {dataset.num_su} SUs, network expects {spec.num_su}")
    streams = _streams(config.seed)
    xs_train, y_train = dataset.inputs("train"), dataset.targets("train")
    xs_test, y_test = dataset.inputs("test"), dataset.targets("test")
    n = y_train.shape[0]
    batch = n if config.batch_size is None else min(config.batch_size, n)
    if latency is None:
        latency = LatencyConfig.from_spec(spec, batch, bandwidth=channel.bandwidth)

    rho = channel.rho
    thresholds = thresholds_for_ratio(rho, config.activation_ratio)
    weakest = int(np.argmin(rho))
    cache = StaleCache(spec.num_su, n, spec.d)
    loss_spec = config.loss_spec

    result = TrainResult(net, [], thresholds, rho)
    t_cum = 0.0
    full_idx = np.arange(n)
    for t in range(config.rounds):
        fading = draw_fading_power(streams["fading"], spec.num_su)
        active = schedule_round(fading, thresholds, t)
        if batch == n:
            idx, xs, y = full_idx, xs_train, y_train
        elif t == 0:
            # warm-up covers every sample so later silenced SUs always have a cache entry
            idx, xs, y = full_idx, xs_train, y_train
        else:
            idx = np.sort(streams["batch"].choice(n, batch, replace=False))
            xs, y = [x[idx] for x in xs_train], y_train[idx]
        evaluate_now = (t + 1) % config.eval_every == 0 or t == config.rounds - 1
        train_mse, weights = run_round(net, xs, y, idx, active, cache, config.eta, t, loss_spec,
                                       track_v=evaluate_now)
        t_comm, t_comp = round_latency(latency, channel.power_budget, channel.noise_power,
                                       rho[weakest], thresholds[weakest], int(active.sum()))
        t_cum += t_comm + t_comp
        m = RoundMetrics(t, active, train_mse, t_comm=t_comm, t_comp=t_comp, t_cum=t_cum)
        if weights is not None:
            m.block_weights = weights
            m.v_measured = v_from_weights(weights, active)
        if evaluate_now:
            m.test_mse = mse(forward(net, xs_test).yhat, y_test)
            if not math.isfinite(m.test_mse):
                raise DivergenceError(f"round {t}: test MSE is {m.test_mse}")
            if (config.target_mse is not None and result.rounds_to_target is None
                    and m.test_mse <= config.target_mse):
                result.rounds_to_target = t + 1
                result.latency_to_target = t_cum
        result.metrics.append(m)
        if on_round is not None:
            on_round(m)
        if config.stop_at_target and result.rounds_to_target is not None:
            break
    return result


def write_metrics_csv(metrics, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for m in metrics:
            w.writerow(m.row())


def read_metrics_csv(path, num_su: int) -> list:
    """Parse a metrics CSV back into :class:`RoundMetrics`."""
    out = []
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        blocks = r["v_blocks"]
        weights = np.array([float(x) for x in blocks.split(";")]) if blocks else None
        mask = int(r["active_set"])
        out.append(RoundMetrics(
            round=int(r["round"]),
            active=np.array([(mask >> i) & 1 == 1 for i in range(num_su)]),
            train_mse=float(r["train_mse"]), test_mse=float(r["test_mse"]), block_weights=weights,
            v_measured=float(r["v_measured"]), t_comm=float(r["t_comm_s"]), t_comp=float(r["t_comp_s"]),
            t_cum=float(r["t_cum_s"]),
        ))
    return out


def write_manifest(path, **fields) -> None:
    Path(path).write_text(json.dumps(fields, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    return str(obj)
