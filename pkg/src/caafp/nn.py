"""Small deterministic 1D-CNN engine on flat float64 parameter vectors.

The network is fixed: ``n`` blocks of (valid conv1d -> ReLU -> max-pool ->
dropout), flatten, an optional hidden dense layer with ReLU and dropout, and a
softmax output. Parameters live in one flat vector so that aggregation,
masking and scoring can treat the whole model as a single array.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, DataError

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8


@dataclass(frozen=True)
class ArchitectureSpec:
    input_len: int
    channels: int
    num_classes: int = 6
    filters: tuple[int, ...] = (64, 64)
    kernel: int = 5
    pool: int = 2
    conv_dropout: tuple[float, ...] = (0.3, 0.3)
    hidden: int = 32
    hidden_dropout: float = 0.2

    def __post_init__(self):
        if len(self.filters) != len(self.conv_dropout):
            raise ConfigError("filters and conv_dropout must have equal length")
        if min(self.input_len, self.channels, self.num_classes, self.kernel, self.pool) < 1:
            raise ConfigError(f"non-positive dimension in {self}")
        if self.flatten_size <= 0:
            raise ConfigError(f"input length {self.input_len} too short for {len(self.filters)} conv blocks")

    @classmethod
    def wisdm(cls) -> "ArchitectureSpec":
        return cls(input_len=200, channels=3)

    @classmethod
    def ucihar(cls) -> "ArchitectureSpec":
        return cls(input_len=128, channels=9)

    @property
    def block_lengths(self) -> list[tuple[int, int]]:
        """(conv output length, pooled length) per block."""
        out = []
        length = self.input_len
        for _ in self.filters:
            conv_len = length - self.kernel + 1
            length = conv_len // self.pool if conv_len > 0 else 0
            out.append((conv_len, length))
        return out

    @property
    def flatten_size(self) -> int:
        if not self.filters:
            return self.input_len * self.channels
        return self.block_lengths[-1][1] * self.filters[-1]

    def to_dict(self) -> dict:
        return {
            "input_len": self.input_len,
            "channels": self.channels,
            "num_classes": self.num_classes,
            "filters": list(self.filters),
            "kernel": self.kernel,
            "pool": self.pool,
            "conv_dropout": list(self.conv_dropout),
            "hidden": self.hidden,
            "hidden_dropout": self.hidden_dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        d = dict(d)
        d["filters"] = tuple(d.get("filters", (64, 64)))
        d["conv_dropout"] = tuple(d.get("conv_dropout", (0.3,) * len(d["filters"])))
        return cls(**d)


class LayerSlot(NamedTuple):
    name: str
    shape: tuple[int, ...]
    offset: int
    prunable: bool

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


@functools.lru_cache(maxsize=None)
def build_layout(arch: ArchitectureSpec) -> tuple[LayerSlot, ...]:
    shapes: list[tuple[str, tuple[int, ...], bool]] = []
    c_in = arch.channels
    for i, f in enumerate(arch.filters):
        shapes.append((f"conv{i}/kernel", (arch.kernel, c_in, f), True))
        shapes.append((f"conv{i}/bias", (f,), False))
        c_in = f
    width = arch.flatten_size
    if arch.hidden:
        shapes.append(("dense/kernel", (width, arch.hidden), True))
        shapes.append(("dense/bias", (arch.hidden,), False))
        width = arch.hidden
    shapes.append(("out/kernel", (width, arch.num_classes), True))
    shapes.append(("out/bias", (arch.num_classes,), False))

    slots = []
    offset = 0
    for name, shape, prunable in shapes:
        slot = LayerSlot(name, shape, offset, prunable)
        slots.append(slot)
        offset = slot.stop
    return tuple(slots)


@functools.lru_cache(maxsize=None)
def _prunable_index(arch: ArchitectureSpec) -> np.ndarray:
    idx = np.concatenate([np.arange(s.offset, s.stop) for s in build_layout(arch) if s.prunable])
    idx.setflags(write=False)
    return idx


@dataclass
class ParamSet:
    arch: ArchitectureSpec
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.size,):
            raise ConfigError(f"expected {self.size} parameters, got shape {self.values.shape}")

    @classmethod
    def zeros(cls, arch: ArchitectureSpec) -> "ParamSet":
        return cls(arch, np.zeros(num_params(arch)))

    @property
    def layout(self) -> tuple[LayerSlot, ...]:
        return build_layout(self.arch)

    @property
    def size(self) -> int:
        return num_params(self.arch)

    @property
    def prunable_index(self) -> np.ndarray:
        return _prunable_index(self.arch)

    def view(self, name: str) -> np.ndarray:
        for s in self.layout:
            if s.name == name:
                return self.values[s.offset:s.stop].reshape(s.shape)
        raise KeyError(name)

    def copy(self) -> "ParamSet":
        return ParamSet(self.arch, self.values.copy())

    def with_values(self, values: np.ndarray) -> "ParamSet":
        return ParamSet(self.arch, values)

    def dump(self, path) -> None:
        """Write values as raw little-endian float32 (debugging aid)."""
        self.values.astype("<f4").tofile(path)


# Gradients are plain float64 vectors aligned to a ParamSet's layout.
GradientSet = np.ndarray


def num_params(arch: ArchitectureSpec) -> int:
    return build_layout(arch)[-1].stop


def num_prunable(arch: ArchitectureSpec) -> int:
    return len(_prunable_index(arch))


def init_params(arch: ArchitectureSpec, seed: int) -> ParamSet:
    """He-uniform kernels for ReLU layers, Glorot-uniform output kernel, zero biases."""
    rng = np.random.default_rng(seed)
    params = ParamSet.zeros(arch)
    for s in params.layout:
        if not s.prunable:
            continue
        fan_in = int(np.prod(s.shape[:-1]))
        if s.name == "out/kernel":
            limit = np.sqrt(6.0 / (fan_in + s.shape[-1]))
        else:
            limit = np.sqrt(6.0 / fan_in)
        params.values[s.offset:s.stop] = rng.uniform(-limit, limit, s.size)
    return params


def _keep_vector(mask, size: int) -> np.ndarray | None:
    if mask is None:
        return None
    keep = mask.keep() if hasattr(mask, "keep") else np.asarray(mask, dtype=np.float64)
    if keep.shape != (size,):
        raise ConfigError(f"mask covers {keep.shape[0]} positions, params have {size}")
    return keep


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if seed is None:
        raise ConfigError("dropout in training mode needs an explicit seed")
    return np.random.default_rng(seed)


def _check_batch(arch: ArchitectureSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[1:] != (arch.input_len, arch.channels):
        raise ConfigError(f"batch shape {x.shape} does not match ({arch.input_len}, {arch.channels}) input")
    return x


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _run(arch, w, x, training, rng, keep_cache):
    """Forward pass over flat weights ``w``; returns probabilities and a cache."""
    slots = {s.name: s for s in build_layout(arch)}

    def get(name):
        s = slots[name]
        return w[s.offset:s.stop].reshape(s.shape)

    cache = []
    h = x
    n = x.shape[0]
    for i, (filters, rate) in enumerate(zip(arch.filters, arch.conv_dropout)):
        kernel = get(f"conv{i}/kernel")
        k, c_in, _ = kernel.shape
        conv_len = h.shape[1] - k + 1
        # (N, L', C, k) -> (N, L', k, C) -> (N, L', k*C)
        cols = np.lib.stride_tricks.sliding_window_view(h, k, axis=1)
        cols = cols.transpose(0, 1, 3, 2).reshape(n, conv_len, k * c_in)
        z = (cols.reshape(-1, k * c_in) @ kernel.reshape(k * c_in, filters)).reshape(n, conv_len, filters)
        z += get(f"conv{i}/bias")
        a = np.maximum(z, 0.0)
        pooled_len = conv_len // arch.pool
        windows = a[:, :pooled_len * arch.pool].reshape(n, pooled_len, arch.pool, filters)
        # running max over the (short) pool axis; strict > sends ties to the first slot
        h = windows[:, :, 0, :].copy()
        arg = np.zeros(h.shape, dtype=np.int8)
        for p in range(1, arch.pool):
            better = windows[:, :, p, :] > h
            h = np.where(better, windows[:, :, p, :], h)
            arg[better] = p
        drop = None
        if training and rate > 0:
            drop = (rng.random(h.shape) >= rate) / (1.0 - rate)
            h = h * drop
        if keep_cache:
            cache.append((cols, z, arg, drop, conv_len))

    h = h.reshape(n, -1)
    flat = h
    hidden_cache = None
    if arch.hidden:
        zh = flat @ get("dense/kernel") + get("dense/bias")
        h = np.maximum(zh, 0.0)
        drop = None
        if training and arch.hidden_dropout > 0:
            drop = (rng.random(h.shape) >= arch.hidden_dropout) / (1.0 - arch.hidden_dropout)
            h = h * drop
        hidden_cache = (zh, drop)
    logits = h @ get("out/kernel") + get("out/bias")
    probs = _softmax(logits)
    return probs, (cache, flat, hidden_cache, h)


def _backprop(arch, w, x, probs, state, labels):
    conv_cache, flat, hidden_cache, h_last = state
    slots = {s.name: s for s in build_layout(arch)}
    grad = np.zeros_like(w)

    def get(name):
        s = slots[name]
        return w[s.offset:s.stop].reshape(s.shape)

    def put(name, g):
        s = slots[name]
        grad[s.offset:s.stop] = g.ravel()

    n = x.shape[0]
    d = probs.copy()
    d[np.arange(n), labels] -= 1.0
    d /= n

    put("out/kernel", h_last.T @ d)
    put("out/bias", d.sum(axis=0))
    d = d @ get("out/kernel").T
    if arch.hidden:
        zh, drop = hidden_cache
        if drop is not None:
            d = d * drop
        d = d * (zh > 0)
        put("dense/kernel", flat.T @ d)
        put("dense/bias", d.sum(axis=0))
        d = d @ get("dense/kernel").T

    if not arch.filters:
        return grad
    last_len = arch.block_lengths[-1][1]
    d = d.reshape(n, last_len, arch.filters[-1])
    for i in reversed(range(len(arch.filters))):
        cols, z, arg, drop, conv_len = conv_cache[i]
        filters = arch.filters[i]
        kernel = get(f"conv{i}/kernel")
        k, c_in, _ = kernel.shape
        if drop is not None:
            d = d * drop
        pooled_len = arg.shape[1]
        d_windows = np.zeros((n, pooled_len, arch.pool, filters))
        for p in range(arch.pool):
            d_windows[:, :, p, :] = np.where(arg == p, d, 0.0)
        da = np.zeros((n, conv_len, filters))
        da[:, :pooled_len * arch.pool] = d_windows.reshape(n, pooled_len * arch.pool, filters)
        dz = da * (z > 0)
        put(f"conv{i}/kernel", cols.reshape(-1, k * c_in).T @ dz.reshape(-1, filters))
        put(f"conv{i}/bias", dz.sum(axis=(0, 1)))
        if i == 0:
            break
        dcols = (dz.reshape(-1, filters) @ kernel.reshape(k * c_in, filters).T).reshape(n, conv_len, k, c_in)
        in_len = conv_len + k - 1
        dh = np.zeros((n, in_len, c_in))
        for j in range(k):
            dh[:, j:j + conv_len] += dcols[:, :, j, :]
        d = dh
    return grad


def forward(params: ParamSet, batch: np.ndarray, training: bool = False, seed=None, mask=None) -> np.ndarray:
    """Class-probability matrix of shape (N, num_classes).

    Dropout is applied only when ``training`` is set and then requires ``seed``
    (an int or a ``numpy.random.Generator``).
    """
    arch = params.arch
    x = _check_batch(arch, batch)
    rng = _as_rng(seed) if training else None
    w = params.values
    keep = _keep_vector(mask, params.size)
    if keep is not None:
        w = w * keep
    probs, _ = _run(arch, w, x, training, rng, keep_cache=False)
    return probs


def loss_and_grad(params: ParamSet, batch, labels, ref: ParamSet | None = None, lam: float = 0.0,
                  mask=None, training: bool = False, seed=None) -> tuple[float, GradientSet]:
    """Mean cross-entropy plus ``lam/2 * ||w - ref||^2`` and its gradient.

    With ``mask`` the forward pass uses the masked weights, but the gradient is
    reported at every position, pruned ones included.
    """
    if lam < 0:
        raise ConfigError(f"regularization strength must be non-negative, got {lam}")
    arch = params.arch
    x = _check_batch(arch, batch)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise ConfigError("labels must be a vector with one entry per sample")
    if y.size and (y.min() < 0 or y.max() >= arch.num_classes):
        raise ConfigError(f"labels outside [0, {arch.num_classes})")
    rng = _as_rng(seed) if training else None
    w = params.values
    keep = _keep_vector(mask, params.size)
    if keep is not None:
        w = w * keep
    probs, state = _run(arch, w, x, training, rng, keep_cache=True)
    n = x.shape[0]
    picked = probs[np.arange(n), y]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))
    grad = _backprop(arch, w, x, probs, state, y)
    if ref is not None:
        if ref.arch != arch:
            raise ConfigError("reference parameters have a different layout")
        diff = w - ref.values
        loss += 0.5 * lam * float(diff @ diff)
        grad += lam * diff
    return loss, grad


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-3
    t: int = 0

    @classmethod
    def fresh(cls, size: int, lr: float = 1e-3) -> "OptimizerState":
        return cls(np.zeros(size), np.zeros(size), lr, 0)

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.m.copy(), self.v.copy(), self.lr, self.t)


def adam_step(params: ParamSet, grads: GradientSet, state: OptimizerState, mask=None) -> ParamSet:
    """Apply one Adam update in place and return ``params``.

    Masked-out positions end the step at exactly 0, as do their moments.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != params.values.shape or state.m.shape != g.shape:
        raise ConfigError("gradient, optimizer state and parameters are misaligned")
    state.t += 1
    state.m *= BETA1
    state.m += (1.0 - BETA1) * g
    state.v *= BETA2
    state.v += (1.0 - BETA2) * (g * g)
    m_hat = state.m / (1.0 - BETA1 ** state.t)
    v_hat = state.v / (1.0 - BETA2 ** state.t)
    params.values -= state.lr * m_hat / (np.sqrt(v_hat) + EPSILON)
    keep = _keep_vector(mask, params.size)
    if keep is not None:
        active = keep > 0
        params.values = np.where(active, params.values, 0.0)
        state.m = np.where(active, state.m, 0.0)
        state.v = np.where(active, state.v, 0.0)
    return params


def predict(params: ParamSet, x: np.ndarray, chunk: int = 1024) -> np.ndarray:
    out = [forward(params, x[i:i + chunk]).argmax(axis=1) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(params: ParamSet, dataset) -> float:
    """Test accuracy of ``params`` on ``dataset`` (argmax, ties to the lowest class)."""
    if len(dataset.y_test) == 0:
        raise DataError(f"client {dataset.client_id} has an empty test split")
    return float(np.mean(predict(params, dataset.x_test) == dataset.y_test))


@dataclass
class TrainResult:
    params: ParamSet
    state: OptimizerState
    first_epoch_grad: np.ndarray | None = field(default=None, repr=False)


def train_local(params: ParamSet, x: np.ndarray, y: np.ndarray, epochs: int, batch_size: int,
                state: OptimizerState, seed, ref: ParamSet | None = None, lam: float = 0.0,
                mask=None, dropout: bool = True, record_grad: bool = False) -> TrainResult:
    """Mini-batch Adam for ``epochs`` passes over (x, y); ``params`` is not modified.

    With ``record_grad`` the sum of batch gradients from the first epoch is
    returned alongside the trained parameters.
    """
    rng = _as_rng(seed)
    work = params.copy()
    keep = _keep_vector(mask, params.size)
    if keep is not None:
        work.values = np.where(keep > 0, work.values, 0.0)
    n = len(y)
    acc = np.zeros(params.size) if record_grad else None
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g = loss_and_grad(work, x[idx], y[idx], ref=ref, lam=lam, mask=keep,
                                 training=dropout, seed=rng)
            if acc is not None and epoch == 0:
                acc += g
            adam_step(work, g, state, mask=keep)
    return TrainResult(work, state, acc)
