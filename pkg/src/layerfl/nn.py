"""Minimal neural-network engine on numpy arrays.

Tensors are plain ``np.ndarray``s (row-major, float32 by default; reductions
accumulate in float64). A network is an immutable stack of layer descriptors;
parameters live outside the network in a :class:`ParamSet`, which lets the
federated code move, blend and mask model state as a value.

A "unit" is one parameterized layer (weight + bias pair). Activation and
reshape layers carry no parameters and do not consume unit indices, so unit
``i`` runs from 1 (nearest the input) to ``L``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError

PARAM_DTYPE = np.float32


@dataclass
class Batch:
    """A minibatch of inputs plus integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ConfigurationError(
                f"batch has {self.inputs.shape[0]} inputs but {self.labels.shape[0]} labels"
            )
        if self.labels.shape[0] < 1:
            raise ConfigurationError("batch must contain at least one sample")

    def __len__(self) -> int:
        return self.labels.shape[0]


@dataclass
class UnitTensors:
    """Weight and bias arrays for one parameterized layer unit."""

    weights: np.ndarray
    bias: np.ndarray

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size

    def ravel(self) -> np.ndarray:
        """Flat view: weights first, then bias, both row-major."""
        return np.concatenate([self.weights.ravel(), self.bias.ravel()])

    def copy(self) -> "UnitTensors":
        return UnitTensors(self.weights.copy(), self.bias.copy())


@dataclass
class ParamSet:
    """Ordered per-unit parameter tensors; index 0 is nearest the input.

    Also used for gradient sets, which mirror the parameter geometry
    (see the :data:`LayerGradients` alias).
    """

    units: list[UnitTensors] = field(default_factory=list)

    @property
    def n_units(self) -> int:
        return len(self.units)

    def copy(self) -> "ParamSet":
        return ParamSet([u.copy() for u in self.units])

    def astype(self, dtype) -> "ParamSet":
        return ParamSet(
            [UnitTensors(u.weights.astype(dtype), u.bias.astype(dtype)) for u in self.units]
        )

    def same_geometry(self, other: "ParamSet") -> bool:
        if self.n_units != other.n_units:
            return False
        return all(
            a.weights.shape == b.weights.shape and a.bias.shape == b.bias.shape
            for a, b in zip(self.units, other.units)
        )

    def unit_sizes(self) -> list[int]:
        return [u.size for u in self.units]


#: Gradients have the same per-unit geometry as the parameters they mirror.
LayerGradients = ParamSet


def zeros_like_params(params: ParamSet) -> ParamSet:
    return ParamSet(
        [UnitTensors(np.zeros_like(u.weights), np.zeros_like(u.bias)) for u in params.units]
    )


# ---------------------------------------------------------------------------
# Layer descriptors


class Dense:
    """Affine layer: y = x @ W + b, input (N, in_features)."""

    def __init__(self, in_features: int, out_features: int):
        if in_features < 1 or out_features < 1:
            raise ConfigurationError("dense dimensions must be positive")
        self.in_features = in_features
        self.out_features = out_features

    parameterized = True

    def init_unit(self, rng: np.random.Generator) -> UnitTensors:
        limit = np.sqrt(6.0 / (self.in_features + self.out_features))
        w = rng.uniform(-limit, limit, size=(self.in_features, self.out_features))
        return UnitTensors(w.astype(PARAM_DTYPE), np.zeros(self.out_features, dtype=PARAM_DTYPE))

    def out_shape(self, in_shape: tuple) -> tuple:
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ConfigurationError(
                f"dense layer expects flat input of {self.in_features} features, got {in_shape}"
            )
        return (self.out_features,)

    def forward(self, x, unit: UnitTensors):
        return x @ unit.weights + unit.bias

    def backward(self, x, dout, unit: UnitTensors):
        dw = x.T @ dout
        db = dout.sum(axis=0)
        dx = dout @ unit.weights.T
        return dx, UnitTensors(dw, db.astype(dw.dtype))


class Conv2d:
    """Direct 2-D convolution, stride 1, square kernel, valid or same padding.

    Input (N, C, H, W), weights (F, C, k, k).
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, padding: str = "same"):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigurationError("conv kernel size must be odd and positive")
        if padding not in ("valid", "same"):
            raise ConfigurationError(f"unsupported conv padding {padding!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding

    parameterized = True

    def init_unit(self, rng: np.random.Generator) -> UnitTensors:
        k = self.kernel_size
        fan_in = self.in_channels * k * k
        fan_out = self.out_channels * k * k
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(self.out_channels, self.in_channels, k, k))
        return UnitTensors(w.astype(PARAM_DTYPE), np.zeros(self.out_channels, dtype=PARAM_DTYPE))

    def _pad(self) -> int:
        return (self.kernel_size - 1) // 2 if self.padding == "same" else 0

    def out_shape(self, in_shape: tuple) -> tuple:
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ConfigurationError(
                f"conv layer expects input (C={self.in_channels}, H, W), got {in_shape}"
            )
        _, h, w = in_shape
        k, p = self.kernel_size, self._pad()
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        if ho < 1 or wo < 1:
            raise ConfigurationError(f"conv kernel {k} does not fit input {in_shape}")
        return (self.out_channels, ho, wo)

    def _cols(self, x):
        # (N, C, Ho, Wo, k, k) windows flattened to (N*Ho*Wo, C*k*k)
        k = self.kernel_size
        win = sliding_window_view(x, (k, k), axis=(2, 3))
        n, _, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, -1)
        return cols, ho, wo

    def forward(self, x, unit: UnitTensors):
        p = self._pad()
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols, ho, wo = self._cols(x)
        out = cols @ unit.weights.reshape(self.out_channels, -1).T + unit.bias
        return out.reshape(x.shape[0], ho, wo, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, x, dout, unit: UnitTensors):
        k, p = self.kernel_size, self._pad()
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols, ho, wo = self._cols(xp)
        dcols = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        dw = (dcols.T @ cols).reshape(unit.weights.shape)
        db = dout.sum(axis=(0, 2, 3))
        dxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di : di + ho, dj : dj + wo] += np.einsum(
                    "nfhw,fc->nchw", dout, unit.weights[:, :, di, dj]
                )
        dx = dxp[:, :, p : xp.shape[2] - p, p : xp.shape[3] - p] if p else dxp
        return dx, UnitTensors(dw, db.astype(dw.dtype))


class ReLU:
    parameterized = False

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def forward(self, x):
        return np.maximum(x, 0)

    def backward(self, x, dout):
        return dout * (x > 0)


class Flatten:
    parameterized = False

    def out_shape(self, in_shape: tuple) -> tuple:
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, dout):
        return dout.reshape(x.shape)


# ---------------------------------------------------------------------------
# Network


class Network:
    """Immutable layer stack. All per-call state (params, activations) is external.

    ``capture`` arguments select 1-based unit indices; the captured array is
    the unit's output after any activation/reshape layers that follow it,
    i.e. what the next unit would see (the last unit's capture is the logits).
    """

    def __init__(self, layers: list, input_shape: tuple, num_classes: int):
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.num_classes = int(num_classes)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if shape != (self.num_classes,):
            raise ConfigurationError(
                f"network output shape {shape} does not match num_classes={num_classes}"
            )
        self.n_units = sum(1 for l in self.layers if l.parameterized)
        if self.n_units < 2:
            raise ConfigurationError("network needs at least 2 parameterized units")

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        """Fresh float32 parameters, drawn unit by unit from ``rng``."""
        return ParamSet([l.init_unit(rng) for l in self.layers if l.parameterized])

    def _check_batch(self, inputs: np.ndarray):
        if tuple(inputs.shape[1:]) != self.input_shape:
            raise ConfigurationError(
                f"input shape {tuple(inputs.shape[1:])} does not match "
                f"network input {self.input_shape}"
            )

    def _check_params(self, params: ParamSet):
        if params.n_units != self.n_units:
            raise ConfigurationError(
                f"parameter set has {params.n_units} units, network has {self.n_units}"
            )

    def forward(
        self, params: ParamSet, inputs: np.ndarray, capture: set | tuple = ()
    ) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Run the stack; return logits (N, num_classes) and captured activations."""
        self._check_batch(inputs)
        self._check_params(params)
        capture = set(capture)
        bad = [i for i in capture if not 1 <= i <= self.n_units]
        if bad:
            raise ConfigurationError(f"capture indices {bad} outside 1..{self.n_units}")
        dtype = params.units[0].weights.dtype
        x = inputs.astype(dtype, copy=False)
        acts: dict[int, np.ndarray] = {}
        unit_idx = 0
        trace = []
        for layer in self.layers:
            if layer.parameterized:
                unit_idx += 1
                x = layer.forward(x, params.units[unit_idx - 1])
            else:
                x = layer.forward(x)
            trace.append(x)
            if unit_idx in capture:
                acts[unit_idx] = x
        if not np.isfinite(x).all():
            raise NumericError(
                f"non-finite values in layer unit {self._first_bad_unit(trace)}"
            )
        return x, acts

    def _first_bad_unit(self, trace) -> int:
        unit_idx = 0
        for layer, out in zip(self.layers, trace):
            if layer.parameterized:
                unit_idx += 1
            if not np.isfinite(out).all():
                return unit_idx
        return self.n_units

    def loss(self, params: ParamSet, batch: Batch) -> float:
        """Mean softmax cross-entropy of the batch."""
        logits, _ = self.forward(params, batch.inputs)
        return cross_entropy(logits, batch.labels)

    def loss_and_grads(self, params: ParamSet, batch: Batch) -> tuple[float, LayerGradients]:
        """Backward pass: mean cross-entropy loss plus per-unit gradients."""
        self._check_batch(batch.inputs)
        self._check_params(params)
        if batch.labels.max() >= self.num_classes or batch.labels.min() < 0:
            raise ConfigurationError("labels outside [0, num_classes)")
        dtype = params.units[0].weights.dtype
        x = batch.inputs.astype(dtype, copy=False)

        inputs_per_layer = []
        unit_idx = 0
        trace = []
        for layer in self.layers:
            inputs_per_layer.append(x)
            if layer.parameterized:
                unit_idx += 1
                x = layer.forward(x, params.units[unit_idx - 1])
            else:
                x = layer.forward(x)
            trace.append(x)

        logits = x
        loss = cross_entropy(logits, batch.labels)
        if not np.isfinite(loss):
            raise NumericError(
                f"non-finite loss; first bad layer unit {self._first_bad_unit(trace)}"
            )

        n = len(batch)
        probs = _softmax64(logits)
        probs[np.arange(n), batch.labels] -= 1.0
        dout = (probs / n).astype(dtype)

        grad_units: list[UnitTensors | None] = [None] * self.n_units
        for layer, x_in in zip(reversed(self.layers), reversed(inputs_per_layer)):
            if layer.parameterized:
                dout, grad = layer.backward(x_in, dout, params.units[unit_idx - 1])
                grad_units[unit_idx - 1] = grad
                unit_idx -= 1
            else:
                dout = layer.backward(x_in, dout)
        return loss, ParamSet(grad_units)


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(labels)), labels]))


def sgd_step(params: ParamSet, grads: LayerGradients, lr: list[float]) -> ParamSet:
    """One descent step with an independent rate per unit: p_i - lr[i] * g_i."""
    if len(lr) != params.n_units:
        raise ConfigurationError(
            f"learning-rate vector has length {len(lr)}, expected {params.n_units}"
        )
    if any(r <= 0 for r in lr):
        raise ConfigurationError("learning rates must be positive")
    if not params.same_geometry(grads):
        raise ConfigurationError("gradient geometry does not match parameters")
    dtype = params.units[0].weights.dtype
    out = []
    for u, g, r in zip(params.units, grads.units, lr):
        r = dtype.type(r)  # keep arithmetic in the parameter dtype
        out.append(UnitTensors(u.weights - r * g.weights, u.bias - r * g.bias))
    return ParamSet(out)


def finite_difference_check(
    network: Network,
    params: ParamSet,
    batch: Batch,
    samples_per_layer: int = 10,
    eps: float = 1e-4,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic gradients and central differences.

    Runs in float64 internally so rounding noise does not swamp the
    comparison; relative error is |analytic - fd| / max(|fd|, 1e-8). The loss
    is only piecewise differentiable, so parameters whose +/-eps perturbation
    flips a hidden activation (where central differences say nothing about
    the true derivative) are skipped and replaced by other samples.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    rng = rng if rng is not None else np.random.default_rng(0)
    p64 = params.astype(np.float64)
    _, grads = network.loss_and_grads(p64, batch)
    hidden = tuple(range(1, network.n_units))

    def loss_and_pattern(p):
        logits, acts = network.forward(p, batch.inputs, capture=hidden)
        pattern = [acts[i] > 0 for i in hidden]
        return cross_entropy(logits, batch.labels), pattern

    worst = 0.0
    for ui, unit in enumerate(p64.units):
        analytic_flat = grads.units[ui].ravel()
        taken = 0
        for flat in rng.permutation(unit.size):
            if taken >= samples_per_layer:
                break
            target, idx = _locate(unit, int(flat))
            orig = target[idx]
            target[idx] = orig + eps
            up, pat_up = loss_and_pattern(p64)
            target[idx] = orig - eps
            down, pat_down = loss_and_pattern(p64)
            target[idx] = orig
            if any((a != b).any() for a, b in zip(pat_up, pat_down)):
                continue  # kink inside the sampling window
            fd = (up - down) / (2 * eps)
            rel = abs(analytic_flat[flat] - fd) / max(abs(fd), 1e-8)
            worst = max(worst, rel)
            taken += 1
    return worst


def _locate(unit: UnitTensors, flat: int):
    """Map a flat unit index (weights then bias) to an array and unravelled index."""
    if flat < unit.weights.size:
        return unit.weights, np.unravel_index(flat, unit.weights.shape)
    return unit.bias, np.unravel_index(flat - unit.weights.size, unit.bias.shape)


# ---------------------------------------------------------------------------
# Stock architectures


def build_mlp(in_features: int, hidden: list[int], num_classes: int) -> Network:
    """Fully connected net with ReLU between affine layers; L = len(hidden) + 1."""
    layers: list = []
    d = in_features
    for h in hidden:
        layers += [Dense(d, h), ReLU()]
        d = h
    layers.append(Dense(d, num_classes))
    return Network(layers, (in_features,), num_classes)


def build_cnn(
    input_shape: tuple, channels: list[int], kernel: int, hidden: int, num_classes: int
) -> Network:
    """Small conv net: conv/ReLU blocks (same padding), then two dense layers."""
    c, h, w = input_shape
    layers: list = []
    for f in channels:
        layers += [Conv2d(c, f, kernel, padding="same"), ReLU()]
        c = f
    layers += [Flatten(), Dense(c * h * w, hidden), ReLU(), Dense(hidden, num_classes)]
    return Network(layers, input_shape, num_classes)
