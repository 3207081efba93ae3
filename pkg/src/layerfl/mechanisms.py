"""Client-side personalization mechanisms.

Three layer-wise mechanisms operate on a client's parameter set each round:

1. accuracy-guided head initialization: base units are overwritten from the
   global model, head units are blended ``a * local + (1 - a) * global`` with
   ``a`` the client's previous-round local accuracy;
2. adaptive per-unit learning rates that grow with depth and shrink with
   gradient magnitude;
3. change-magnitude upload masking that keeps, per unit ``i`` of ``L``, the
   ``ceil(clamp(i/L, 0.1, 1) * n_i)`` entries that moved most during local
   training.

Plus the local minibatch-SGD training loop that ties 2 into the update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset
from .errors import AggregationError, ConfigurationError
from .metrics import evaluate
from .nn import Batch, Network, ParamSet, UnitTensors, sgd_step

GRAD_NORM_FLOOR = 1e-8  # guards the 1/||g|| term when a gradient vanishes


@dataclass
class ClientState:
    """A client's persistent model, cached accuracy and private data."""

    client_id: int
    local_params: ParamSet
    data: ClientDataset
    head_size: int
    prev_accuracy: float = 0.0

    def __post_init__(self):
        if not 1 <= self.head_size < self.local_params.n_units:
            raise ConfigurationError(
                f"head_size must be in [1, {self.local_params.n_units - 1}], "
                f"got {self.head_size}"
            )
        if not 0.0 <= self.prev_accuracy <= 1.0:
            raise ConfigurationError("prev_accuracy must be in [0, 1]")


@dataclass
class MaskSet:
    """Per-unit binary selectors mirroring a ParamSet's geometry (uint8 arrays)."""

    units: list[UnitTensors] = field(default_factory=list)

    @property
    def n_units(self) -> int:
        return len(self.units)

    def density(self, i: int) -> float:
        """Fraction of ones in 1-based unit ``i``."""
        u = self.units[i - 1]
        return float(u.ravel().sum() / u.size)


@dataclass
class LrSchedule:
    """Per-unit rates for one step; every entry is at least the base rate."""

    base: float
    per_layer: list[float]


def init_local_model(local: ParamSet, global_: ParamSet, prev_acc: float, s: int) -> ParamSet:
    """Blend a client's model with the global one ahead of local training.

    Units 1..L-s come verbatim from the global model; the last ``s`` head
    units are the convex combination ``prev_acc * local + (1 - prev_acc) *
    global``. Inputs are left untouched.
    """
    if not local.same_geometry(global_):
        raise AggregationError("local and global parameter sets differ in geometry")
    if not 0.0 <= prev_acc <= 1.0:
        raise ConfigurationError(f"prev_acc must be in [0, 1], got {prev_acc}")
    L = local.n_units
    if not 1 <= s < L:
        raise ConfigurationError(f"head size must be in [1, {L - 1}], got {s}")
    a = float(prev_acc)
    out = [g.copy() for g in global_.units[: L - s]]
    for lo, gl in zip(local.units[L - s :], global_.units[L - s :]):
        out.append(UnitTensors(_blend(lo.weights, gl.weights, a), _blend(lo.bias, gl.bias, a)))
    return ParamSet(out)


def _blend(local_arr: np.ndarray, global_arr: np.ndarray, a: float) -> np.ndarray:
    # float64 blend, cast back: keeps the result inside [min, max] of the
    # operands even after rounding, and makes a=0 / a=1 exact copies
    mixed = a * local_arr.astype(np.float64) + (1.0 - a) * global_arr.astype(np.float64)
    return mixed.astype(local_arr.dtype)


def adaptive_lr(base: float, i: int, L: int, grad_l2: float) -> float:
    """Depth- and gradient-aware rate: base * (1 + ln(1 + 1/||g||) * i/L)."""
    if base <= 0:
        raise ConfigurationError("base learning rate must be positive")
    if not 1 <= i <= L:
        raise ConfigurationError(f"unit index {i} outside 1..{L}")
    if grad_l2 < 0:
        raise ConfigurationError("gradient norm cannot be negative")
    return base * (1.0 + math.log1p(1.0 / max(grad_l2, GRAD_NORM_FLOOR)) * (i / L))


def constant_lr(base: float, i: int, L: int, grad_l2: float) -> float:
    """Depth-agnostic policy used by the plain-averaging baselines."""
    return base


def upload_fraction(i: int, L: int) -> float:
    """Share of unit ``i``'s parameters selected for upload: clamp(i/L, 0.1, 1)."""
    if not 1 <= i <= L:
        raise ConfigurationError(f"unit index {i} outside 1..{L}")
    return min(max(i / L, 0.1), 1.0)


def build_mask(before: ParamSet, after: ParamSet) -> MaskSet:
    """Select, per unit, the entries that changed most during local training.

    Unit ``i`` keeps its top ``ceil(upload_fraction(i, L) * n_i)`` entries of
    |after - before|; ties break toward the lower flat index (weights first,
    then bias, row-major).
    """
    if not before.same_geometry(after):
        raise AggregationError("before/after parameter sets differ in geometry")
    L = before.n_units
    units = []
    for i, (pre, post) in enumerate(zip(before.units, after.units), start=1):
        delta = np.abs(post.ravel().astype(np.float64) - pre.ravel().astype(np.float64))
        k = math.ceil(upload_fraction(i, L) * delta.size)
        # lexsort: primary key -delta ascending (largest delta first),
        # secondary key flat index ascending
        order = np.lexsort((np.arange(delta.size), -delta))
        flat = np.zeros(delta.size, dtype=np.uint8)
        flat[order[:k]] = 1
        nw = pre.weights.size
        units.append(
            UnitTensors(
                flat[:nw].reshape(pre.weights.shape), flat[nw:].reshape(pre.bias.shape)
            )
        )
    return MaskSet(units)


def full_mask(params: ParamSet) -> MaskSet:
    """All-ones mask over the given geometry."""
    return MaskSet(
        [
            UnitTensors(
                np.ones(u.weights.shape, dtype=np.uint8), np.ones(u.bias.shape, dtype=np.uint8)
            )
            for u in params.units
        ]
    )


def head_zero_mask(params: ParamSet, s: int) -> MaskSet:
    """Base units all ones, last ``s`` head units all zeros."""
    L = params.n_units
    if not 1 <= s < L:
        raise ConfigurationError(f"head size must be in [1, {L - 1}], got {s}")
    mask = full_mask(params)
    for u in mask.units[L - s :]:
        u.weights[:] = 0
        u.bias[:] = 0
    return mask


def apply_mask(params: ParamSet, mask: MaskSet) -> ParamSet:
    """Elementwise product; deselected entries become exact zeros."""
    if mask.n_units != params.n_units:
        raise AggregationError("mask geometry does not match parameters")
    units = []
    for p, m in zip(params.units, mask.units):
        if p.weights.shape != m.weights.shape or p.bias.shape != m.bias.shape:
            raise AggregationError("mask geometry does not match parameters")
        units.append(UnitTensors(p.weights * m.weights, p.bias * m.bias))
    return ParamSet(units)


def local_train(
    network: Network,
    start_params: ParamSet,
    data: ClientDataset,
    epochs: int,
    batch_size: int,
    base_lr: float,
    lr_policy=adaptive_lr,
    rng: np.random.Generator | None = None,
) -> ParamSet:
    """Minibatch SGD on the client's train shard.

    Each step recomputes per-unit rates from that step's gradient L2 norms
    (taken over the unit's weights and bias together). Batch order is drawn
    from ``rng``, so the caller controls reproducibility.
    """
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    train = data.train
    params = start_params
    L = params.n_units
    for _ in range(epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch_size):
            picks = order[start : start + batch_size]
            batch = Batch(train.inputs[picks], train.labels[picks])
            _, grads = network.loss_and_grads(params, batch)
            norms = [
                float(np.sqrt(np.sum(g.ravel().astype(np.float64) ** 2))) for g in grads.units
            ]
            schedule = LrSchedule(
                base=base_lr,
                per_layer=[lr_policy(base_lr, i, L, norms[i - 1]) for i in range(1, L + 1)],
            )
            params = sgd_step(params, grads, schedule.per_layer)
    return params


def update_prev_accuracy(
    state: ClientState, trained: ParamSet, network: Network
) -> float:
    """Measure train-shard accuracy of the trained model and cache it.

    The cached value weights the next round's head blend; the test shard is
    reserved for reporting.
    """
    acc, _ = evaluate(network, trained, state.data.train)
    state.prev_accuracy = acc
    return acc
