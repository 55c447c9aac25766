"""Split fully-connected network: K local models feeding one central model.

Parameters are plain lists of ``(W, b)`` pairs with ``W`` shaped
``(fan_in, fan_out)``; a batch is a ``(n, features)`` array. All arithmetic is
float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointFormatError,
    ConfigError,
    ConvergedError,
    DimensionMismatchError,
    StaleCacheError,
)

ACTIVATIONS = ("relu", "tanh", "linear")


@dataclass(frozen=True)
class NetSpec:
    local_arch: tuple = (203, 32, 8)
    central_arch: tuple = (32, 512, 8)
    num_su: int = 4
    hidden_activation: str = "relu"
    output_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "local_arch", tuple(int(w) for w in self.local_arch))
        object.__setattr__(self, "central_arch", tuple(int(w) for w in self.central_arch))
        if len(self.local_arch) < 2 or len(self.central_arch) < 2:
            raise ConfigError("each model needs at least an input and an output width")
        if min(self.local_arch + self.central_arch) < 0:
            raise ConfigError("layer widths must be non-negative")
        if self.hidden_activation not in ACTIVATIONS:
            raise ConfigError(f"hidden_activation must be one of {ACTIVATIONS}")
        if self.output_activation != "linear":
            raise ConfigError("only a linear output layer is supported")
        if self.central_arch[0] != self.num_su * self.local_arch[-1]:
            raise DimensionMismatchError(
                f"central input width {self.central_arch[0]} != K*d = {self.num_su}*{self.local_arch[-1]}"
            )

    @property
    def d(self) -> int:
        """Width of each local output block."""
        return self.local_arch[-1]

    @property
    def input_dim(self) -> int:
        return self.local_arch[0]

    @property
    def label_dim(self) -> int:
        return self.central_arch[-1]


def network_i(num_su: int = 4, input_dim: int = 203, local_hidden: int = 2048, d: int = 8,
              central_hidden: int = 24, label_dim: int = 8) -> NetSpec:
    """Large local models, small central model."""
    return NetSpec((input_dim, local_hidden, d), (num_su * d, central_hidden, label_dim), num_su)


def network_ii(num_su: int = 4, input_dim: int = 203, local_hidden: int = 32, d: int = 8,
               central_hidden: int = 512, label_dim: int = 8) -> NetSpec:
    """Small local models, large central model."""
    return NetSpec((input_dim, local_hidden, d), (num_su * d, central_hidden, label_dim), num_su)


@dataclass
class SplitNet:
    spec: NetSpec
    central: list
    local: list

    def blocks(self) -> list:
        """Parameter blocks ``[theta_0, theta_1, ..., theta_K]``."""
        return [self.central, *self.local]

    def copy(self) -> "SplitNet":
        def dup(theta):
            return [(W.copy(), b.copy()) for W, b in theta]
        return SplitNet(self.spec, dup(self.central), [dup(t) for t in self.local])

    def all_finite(self) -> bool:
        return all(np.isfinite(W).all() and np.isfinite(b).all() for t in self.blocks() for W, b in t)


def _init_dense(arch, rng):
    layers = []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        lim = 1.0 / np.sqrt(fan_in) if fan_in else 0.0
        layers.append((rng.uniform(-lim, lim, (fan_in, fan_out)), rng.uniform(-lim, lim, fan_out)))
    return layers


def init_split_net(spec: NetSpec, rng: np.random.Generator, output_bias=None) -> SplitNet:
    """Fan-in scaled uniform initialisation.

    ``output_bias`` (e.g. the mean training label) overrides the central
    model's final bias.
    """
    local = [_init_dense(spec.local_arch, rng) for _ in range(spec.num_su)]
    central = _init_dense(spec.central_arch, rng)
    if output_bias is not None:
        W, _ = central[-1]
        central[-1] = (W, np.array(output_bias, dtype=float).reshape(spec.label_dim))
    return SplitNet(spec, central, local)


def _act(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _apply_act_grad(delta, z, a, kind):
    """Multiply ``delta`` in place by the activation derivative."""
    if kind == "relu":
        np.multiply(delta, z > 0, out=delta)
    elif kind == "tanh":
        delta *= 1.0 - a * a


def dense_forward(theta, x, hidden_activation="relu"):
    """Forward pass through a dense stack; returns ``(output, cache)``.

    ``cache`` holds ``(layer_input, pre_activation)`` per layer.
    """
    cache = []
    h = x
    last = len(theta) - 1
    for i, (W, b) in enumerate(theta):
        z = h @ W
        z += b
        cache.append((h, z))
        h = z if i == last else _act(z, hidden_activation)
    return h, cache


def dense_backward(theta, cache, grad_out, hidden_activation="relu", need_input_grad=True):
    """Backward pass matching :func:`dense_forward`; returns ``(grads, grad_in)``."""
    grads = [None] * len(theta)
    delta = grad_out
    for i in range(len(theta) - 1, -1, -1):
        W, _ = theta[i]
        h, _ = cache[i]
        grads[i] = (h.T @ delta, delta.sum(axis=0))
        if i == 0 and not need_input_grad:
            return grads, None
        delta = delta @ W.T
        if i > 0:
            _apply_act_grad(delta, cache[i - 1][1], h, hidden_activation)
    return grads, delta


def _check_input(x, width, what):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionMismatchError(f"{what}: expected (n, {width}) input, got {x.shape}")
    return x


def local_forward(theta_k, x_k, spec: NetSpec):
    """Local model output ``p^k`` of width ``d`` plus the cache for backprop."""
    x_k = _check_input(x_k, spec.input_dim, "local_forward")
    return dense_forward(theta_k, x_k, spec.hidden_activation)


def central_forward(theta_0, blocks, spec: NetSpec):
    """Concatenate local outputs in SU order and run the central model."""
    if len(blocks) != spec.num_su:
        raise DimensionMismatchError(f"central_forward: expected {spec.num_su} blocks, got {len(blocks)}")
    for k, p in enumerate(blocks):
        if np.ndim(p) != 2 or np.shape(p)[1] != spec.d:
            raise DimensionMismatchError(f"central_forward: block {k} has shape {np.shape(p)}, expected (n, {spec.d})")
    return dense_forward(theta_0, np.concatenate(blocks, axis=1), spec.hidden_activation)


@dataclass(frozen=True)
class LossSpec:
    """Squared-error loss with optional squared-norm penalty ``lam * sum ||theta_k||^2``."""

    lam: float = 0.0
    regularizer: str = "l2"

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("regularisation weight must be non-negative")
        if self.regularizer != "l2":
            raise ConfigError("only the squared-norm regulariser is supported")


def squared_norm(theta) -> float:
    return float(sum((W * W).sum() + (b * b).sum() for W, b in theta))


def loss(yhat, y, net: SplitNet | None = None, loss_spec: LossSpec | None = None) -> float:
    yhat = np.asarray(yhat, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.shape[0] == 0:
        raise ValueError("loss of an empty batch is undefined")
    if yhat.shape != y.shape:
        raise DimensionMismatchError(f"prediction shape {yhat.shape} != label shape {y.shape}")
    value = float(((y - yhat) ** 2).sum() / y.shape[0])
    if loss_spec is not None and loss_spec.lam > 0:
        if net is None:
            raise ValueError("a regularised loss needs the parameters")
        value += loss_spec.lam * sum(squared_norm(t) for t in net.blocks())
    return value


def _add_penalty(grads, theta, loss_spec):
    if loss_spec is None or loss_spec.lam == 0:
        return grads
    c = 2.0 * loss_spec.lam
    return [(gW + c * W, gb + c * b) for (gW, gb), (W, b) in zip(grads, theta)]


@dataclass
class ActivationBundle:
    """Forward-pass state of one batch."""

    local_outputs: list
    local_caches: list
    central_cache: list
    yhat: np.ndarray


def forward(net: SplitNet, xs) -> ActivationBundle:
    """Full forward pass with fresh activations from every SU."""
    outs, caches = [], []
    for theta_k, x in zip(net.local, xs):
        p, c = local_forward(theta_k, x, net.spec)
        outs.append(p)
        caches.append(c)
    yhat, cc = central_forward(net.central, outs, net.spec)
    return ActivationBundle(outs, caches, cc, yhat)


def central_backward(theta_0, bundle: ActivationBundle, y, spec: NetSpec, loss_spec: LossSpec | None = None):
    """Gradient of the loss for the central model and for each input block.

    Returns ``(g_theta0, [dL/dp^1, ..., dL/dp^K])``.
    """
    if bundle is None or not bundle.central_cache:
        raise StaleCacheError("central_backward needs the forward cache of the same batch")
    y = np.asarray(y, dtype=float)
    if bundle.yhat.shape != y.shape:
        raise StaleCacheError(f"cached prediction {bundle.yhat.shape} does not match labels {y.shape}")
    grad_out = 2.0 * (bundle.yhat - y) / y.shape[0]
    grads, grad_in = dense_backward(theta_0, bundle.central_cache, grad_out, spec.hidden_activation)
    d = spec.d
    # each slice is the message sent to one SU, so it gets its own buffer
    upstream = [np.ascontiguousarray(grad_in[:, k * d:(k + 1) * d]) for k in range(spec.num_su)]
    return _add_penalty(grads, theta_0, loss_spec), upstream


def local_backward(theta_k, cache, upstream, spec: NetSpec, loss_spec: LossSpec | None = None):
    """Chain the server's ``dL/dp^k`` through SU ``k``'s model."""
    if not cache:
        raise StaleCacheError("local_backward needs the forward cache of the same batch")
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != cache[-1][1].shape:
        raise StaleCacheError(f"upstream gradient {upstream.shape} does not match cached output {cache[-1][1].shape}")
    grads, _ = dense_backward(theta_k, cache, upstream, spec.hidden_activation, need_input_grad=False)
    return _add_penalty(grads, theta_k, loss_spec)


def backward(net: SplitNet, bundle: ActivationBundle, y, loss_spec: LossSpec | None = None):
    """Gradients of every block, ``[g_theta0, g_theta1, ..., g_thetaK]``."""
    g0, upstream = central_backward(net.central, bundle, y, net.spec, loss_spec)
    gk = [local_backward(t, c, u, net.spec, loss_spec)
          for t, c, u in zip(net.local, bundle.local_caches, upstream)]
    return [g0, *gk]


def sgd_step(theta, grads, eta: float):
    """``theta - eta * g`` for every array in the block."""
    return [(W - eta * gW, b - eta * gb) for (W, b), (gW, gb) in zip(theta, grads)]


def grad_block_weights(grads) -> np.ndarray:
    """Share of the total squared gradient norm carried by each block.

    Raises :class:`ConvergedError` when every block is exactly zero.
    """
    norms = np.array([squared_norm(g) for g in grads])
    total = norms.sum()
    if total == 0:
        raise ConvergedError("all gradient blocks are zero")
    return norms / total


# ---------------------------------------------------------------------------
# Checkpoint format
#
#   b"TVFLCK1"
#   <q  byte length of the JSON spec, then the JSON (NetSpec fields)
#   <d  theta_0 layers, then theta_1 .. theta_K; each layer is W (row-major,
#       fan_in x fan_out) followed by b
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"TVFLCK1"


def save_checkpoint(net: SplitNet, path) -> None:
    blob = json.dumps(asdict(net.spec), sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<q", len(blob)), blob]
    for theta in net.blocks():
        for W, b in theta:
            parts.append(np.ascontiguousarray(W, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> SplitNet:
    raw = Path(path).read_bytes()
    if raw[: len(CKPT_MAGIC)] != CKPT_MAGIC or len(raw) < len(CKPT_MAGIC) + 8:
        raise CheckpointFormatError(f"{path}: not a checkpoint")
    pos = len(CKPT_MAGIC)
    (n,) = struct.unpack_from("<q", raw, pos)
    pos += 8
    try:
        spec = NetSpec(**json.loads(raw[pos: pos + n].decode()))
    except (ValueError, TypeError) as exc:
        raise CheckpointFormatError(f"{path}: bad spec header ({exc})") from exc
    pos += n

    def read_block(arch):
        nonlocal pos
        theta = []
        for fan_in, fan_out in zip(arch[:-1], arch[1:]):
            need = 8 * (fan_in * fan_out + fan_out)
            if len(raw) < pos + need:
                raise CheckpointFormatError(f"{path}: parameter payload is cut short")
            W = np.frombuffer(raw, "<f8", fan_in * fan_out, pos).reshape(fan_in, fan_out).astype(float)
            pos += 8 * fan_in * fan_out
            b = np.frombuffer(raw, "<f8", fan_out, pos).astype(float)
            pos += 8 * fan_out
            theta.append((W, b))
        return theta

    central = read_block(spec.central_arch)
    local = [read_block(spec.local_arch) for _ in range(spec.num_su)]
    if pos != len(raw):
        raise CheckpointFormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return SplitNet(spec, central, local)
