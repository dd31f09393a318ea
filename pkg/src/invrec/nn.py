"""Small fully connected networks with hand-written reverse mode.

Networks map a batch ``x`` of shape (B, in) to (B, out) with tanh hidden
layers and a linear output layer. Weight matrices are stored as (in, out).
Parameter objects are treated as values: updates return new objects.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, TrainingDivergence, UsageError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_STD_INIT = -0.5
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

SQUASH_KINDS = ("rec_unit_interval", "order_integer_box", "merged")

CHECKPOINT_MAGIC = b"INVRECNN"
CHECKPOINT_VERSION = 1


@dataclass
class MlpParams:
    weights: list
    biases: list

    @property
    def widths(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


@dataclass
class GaussianHead:
    mean: MlpParams
    log_std: np.ndarray

    @property
    def action_dim(self) -> int:
        return self.log_std.shape[0]

    def copy(self) -> "GaussianHead":
        return GaussianHead(self.mean.copy(), self.log_std.copy())

    def arrays(self) -> list:
        return self.mean.arrays() + [self.log_std]


@dataclass
class GradBuffer:
    """Gradients laid out like an MlpParams, with an optional log_std part."""

    weights: list
    biases: list
    log_std: np.ndarray | None = None

    @classmethod
    def zeros_like(cls, params) -> "GradBuffer":
        mlp = params.mean if isinstance(params, GaussianHead) else params
        log_std = np.zeros_like(params.log_std) if isinstance(params, GaussianHead) else None
        return cls([np.zeros_like(w) for w in mlp.weights], [np.zeros_like(b) for b in mlp.biases], log_std)

    def add_(self, other: "GradBuffer", scale: float = 1.0) -> "GradBuffer":
        if len(other.weights) != len(self.weights):
            raise DomainError("gradient buffers have different depth")
        for a, b in zip(self.weights + self.biases, other.weights + other.biases):
            if a.shape != b.shape:
                raise DomainError("gradient buffer shapes differ")
            a += scale * b
        if self.log_std is not None and other.log_std is not None:
            self.log_std += scale * other.log_std
        return self

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        if self.log_std is not None:
            out.append(self.log_std)
        return out

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


@dataclass
class Cache:
    params: MlpParams
    inputs: list = field(default_factory=list)   # input to each layer
    hidden: list = field(default_factory=list)   # tanh outputs of hidden layers


def init_mlp(widths, rng: np.random.Generator, out_scale: float = 1.0) -> MlpParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases.

    ``out_scale`` shrinks the last layer, which keeps initial policy means near zero.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or min(widths) < 1:
        raise DomainError("need at least input and output widths, all positive")
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if k == len(widths) - 2:
            w *= out_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases)


def init_gaussian_head(widths, rng, out_scale: float = 1.0, log_std: float = LOG_STD_INIT,
                       out_bias=0.0) -> GaussianHead:
    """Gaussian head whose initial mean output is ``out_bias`` plus a small net response."""
    mean = init_mlp(widths, rng, out_scale)
    mean.biases[-1] = mean.biases[-1] + np.asarray(out_bias, dtype=float)
    return GaussianHead(mean, np.full(widths[-1], float(log_std)))


def forward(params: MlpParams, x):
    """Evaluate the network; returns (y, cache)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.weights[0].shape[0]:
        raise DomainError(f"input width {h.shape[1]} != {params.weights[0].shape[0]}")
    cache = Cache(params)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        if k < last:
            h = np.tanh(z)
            cache.hidden.append(h)
        else:
            h = z
    return (h[0] if single else h), cache


def predict(params: MlpParams, x) -> np.ndarray:
    """Forward pass without keeping a cache."""
    h = np.asarray(x, dtype=float)
    last = len(params.weights) - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if k < last:
            h = np.tanh(h)
    return h


def backward(params: MlpParams, cache: Cache, dy):
    """Gradients of sum(dy * y) with respect to weights, biases and input.

    Returns (GradBuffer, dx).
    """
    if cache.params is not params:
        raise UsageError("cache was produced by a different parameter set")
    dy = np.asarray(dy, dtype=float)
    single = dy.ndim == 1
    g = dy[None, :] if single else dy
    n_layers = len(params.weights)
    dw = [None] * n_layers
    db = [None] * n_layers
    for k in range(n_layers - 1, -1, -1):
        if k < n_layers - 1:
            g = g * (1.0 - cache.hidden[k] ** 2)
        dw[k] = cache.inputs[k].T @ g
        db[k] = g.sum(axis=0)
        g = g @ params.weights[k].T
    return GradBuffer(dw, db), (g[0] if single else g)


# ---------------------------------------------------------------------------
# Gaussian policy head


def clamp_log_std(log_std: np.ndarray) -> np.ndarray:
    return np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


def _logp_from_mean(mu, log_std, raw):
    log_std = clamp_log_std(log_std)
    z = (raw - mu) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - HALF_LOG_2PI, axis=-1)


def gaussian_logprob(head: GaussianHead, x, raw) -> np.ndarray:
    """Log-density of the pre-squash action under the head at states ``x``."""
    mu = predict(head.mean, x)
    return _logp_from_mean(mu, head.log_std, np.asarray(raw, dtype=float))


def gaussian_logprob_and_grad(head: GaussianHead, x, raw, weights=None):
    """Log-density and the gradient of ``sum_b weights[b] * logp[b]``.

    With a single state ``x`` (1-d) the gradient is that of logp itself.
    """
    raw = np.asarray(raw, dtype=float)
    mu, cache = forward(head.mean, x)
    log_std = clamp_log_std(head.log_std)
    inv_var = np.exp(-2.0 * log_std)
    diff = raw - mu
    logp = np.sum(-0.5 * diff * diff * inv_var - log_std - HALF_LOG_2PI, axis=-1)
    if weights is None:
        weights = np.ones_like(logp)
    weights = np.asarray(weights, dtype=float)
    dmu = weights[..., None] * diff * inv_var
    grads, _ = backward(head.mean, cache, dmu)
    dlog_std = weights[..., None] * (diff * diff * inv_var - 1.0)
    # the clamp is flat outside its range
    inside = (head.log_std > LOG_STD_MIN) & (head.log_std < LOG_STD_MAX)
    grads.log_std = np.where(inside, dlog_std.reshape(-1, head.action_dim).sum(axis=0), 0.0)
    return logp, grads


def squash(raw, kind: str, q_max: float, n_orders: int = 0) -> np.ndarray:
    """Map unconstrained outputs to feasible actions."""
    raw = np.asarray(raw, dtype=float)
    if kind == "rec_unit_interval":
        return 0.5 * (np.tanh(raw) + 1.0)
    if kind == "order_integer_box":
        return np.round(np.clip(raw, 0.0, q_max))
    if kind == "merged":
        orders = np.round(np.clip(raw[..., :n_orders], 0.0, q_max))
        recs = 0.5 * (np.tanh(raw[..., n_orders:]) + 1.0)
        return np.concatenate([orders, recs], axis=-1)
    raise DomainError(f"unknown squash kind {kind!r}")


def sample_and_squash(head: GaussianHead, x, rng: np.random.Generator, kind: str, q_max: float = 1.0,
                      deterministic: bool = False, n_orders: int = 0):
    """Returns (raw, feasible action, logp of raw)."""
    mu = predict(head.mean, x)
    if deterministic:
        raw = mu
    else:
        raw = mu + np.exp(clamp_log_std(head.log_std)) * rng.standard_normal(mu.shape)
    logp = _logp_from_mean(mu, head.log_std, raw)
    return raw, squash(raw, kind, q_max, n_orders), logp


# ---------------------------------------------------------------------------
# Updates


def sgd_apply(params, grads: GradBuffer, step: float, ascent: bool = True):
    """One plain gradient step; returns new parameters."""
    if not grads.is_finite():
        raise TrainingDivergence("non-finite gradient", context="sgd_apply")
    sign = step if ascent else -step
    mlp = params.mean if isinstance(params, GaussianHead) else params
    if len(grads.weights) != len(mlp.weights):
        raise DomainError("gradient depth does not match parameters")
    new_w, new_b = [], []
    for w, b, gw, gb in zip(mlp.weights, mlp.biases, grads.weights, grads.biases):
        if w.shape != gw.shape or b.shape != gb.shape:
            raise DomainError("gradient shapes do not match parameters")
        new_w.append(w + sign * gw)
        new_b.append(b + sign * gb)
    new_mlp = MlpParams(new_w, new_b)
    if isinstance(params, GaussianHead):
        log_std = params.log_std
        if grads.log_std is not None:
            log_std = clamp_log_std(log_std + sign * grads.log_std)
        return GaussianHead(new_mlp, log_std)
    return new_mlp


# ---------------------------------------------------------------------------
# Checkpoints
#
# Binary layout, little endian:
#   8 bytes  magic "INVRECNN"
#   u32      format version
#   u32      kind (0 = plain network, 1 = Gaussian head)
#   u32      number of widths K, then K x u32 widths
#   per layer: weight matrix (in x out, row-major float64), bias (out float64)
#   kind 1 only: log_std (out float64)


def _pack(params) -> bytes:
    head = isinstance(params, GaussianHead)
    mlp = params.mean if head else params
    widths = mlp.widths
    parts = [CHECKPOINT_MAGIC, struct.pack("<III", CHECKPOINT_VERSION, int(head), len(widths)),
             struct.pack(f"<{len(widths)}I", *widths)]
    for a in params.arrays():
        parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return b"".join(parts)


def _unpack(blob: bytes):
    if blob[:8] != CHECKPOINT_MAGIC:
        raise DomainError("not a network checkpoint (bad magic)")
    version, kind, k = struct.unpack_from("<III", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise DomainError(f"unsupported checkpoint version {version}")
    offset = 20
    widths = list(struct.unpack_from(f"<{k}I", blob, offset))
    offset += 4 * k

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(float)
        offset += 8 * count
        return arr

    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(take((fan_in, fan_out)))
        biases.append(take((fan_out,)))
    mlp = MlpParams(weights, biases)
    if kind == 1:
        return GaussianHead(mlp, take((widths[-1],)))
    return mlp


def save_network(params, path) -> None:
    Path(path).write_bytes(_pack(params))


def load_network(path):
    return _unpack(Path(path).read_bytes())


def save_checkpoint(directory, networks: dict, meta: dict | None = None) -> None:
    """Write one binary file per network plus a plain-text manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = [f"format {CHECKPOINT_MAGIC.decode()} v{CHECKPOINT_VERSION}"]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta {key} {value}")
    for name in sorted(networks):
        params = networks[name]
        save_network(params, directory / f"{name}.bin")
        mlp = params.mean if isinstance(params, GaussianHead) else params
        kind = "gaussian_head" if isinstance(params, GaussianHead) else "mlp"
        lines.append(f"network {name} {kind} widths={','.join(map(str, mlp.widths))}")
    (directory / "manifest.txt").write_text("\n".join(lines) + "\n")


def load_checkpoint(directory):
    """Returns (networks, meta) from a directory written by ``save_checkpoint``."""
    directory = Path(directory)
    networks, meta = {}, {}
    for line in (directory / "manifest.txt").read_text().splitlines():
        parts = line.split(" ", 2)
        if parts[0] == "network":
            networks[parts[1]] = load_network(directory / f"{parts[1]}.bin")
        elif parts[0] == "meta":
            meta[parts[1]] = parts[2] if len(parts) > 2 else ""
    return networks, meta
