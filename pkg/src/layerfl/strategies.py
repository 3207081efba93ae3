"""Per-round client behavior bundled behind one hook interface.

A strategy is three pure hooks: how a sampled client initializes its local
model from the global one, which learning rate each unit gets, and what the
client uploads. Plain averaging, frozen-head personalization and the full
adaptive pipeline all fit this shape, which keeps the server loop identical
across methods and makes reductions between them testable bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .errors import ConfigurationError
from .mechanisms import (
    ClientState,
    MaskSet,
    adaptive_lr,
    apply_mask,
    build_mask,
    constant_lr,
    full_mask,
    head_zero_mask,
    init_local_model,
)
from .nn import ParamSet

InitHook = Callable[[ParamSet, ParamSet, ClientState], ParamSet]
LrHook = Callable[[float, int, int, float], float]
UploadHook = Callable[[ParamSet, ParamSet], tuple[ParamSet, MaskSet]]


@dataclass(frozen=True)
class Strategy:
    name: str
    init_local: InitHook
    lr_policy: LrHook
    upload_transform: UploadHook


def _copy_global(local: ParamSet, global_: ParamSet, state: ClientState) -> ParamSet:
    return global_.copy()


def _upload_everything(before: ParamSet, after: ParamSet) -> tuple[ParamSet, MaskSet]:
    return after.copy(), full_mask(after)


def fedavg_strategy() -> Strategy:
    """Plain weighted averaging: take the global model, train, upload all of it."""
    return Strategy(
        name="fedavg",
        init_local=_copy_global,
        lr_policy=constant_lr,
        upload_transform=_upload_everything,
    )


def fedper_strategy(s: int) -> Strategy:
    """Frozen personal head: base comes from the server, head stays local.

    Head units are never uploaded, so under mask-aware aggregation the
    server's head parameters stay at their initial values.
    """
    if s < 1:
        raise ConfigurationError(f"head size must be >= 1, got {s}")

    def init_local(local: ParamSet, global_: ParamSet, state: ClientState) -> ParamSet:
        return init_local_model(local, global_, prev_acc=1.0, s=s)

    def upload(before: ParamSet, after: ParamSet) -> tuple[ParamSet, MaskSet]:
        mask = head_zero_mask(after, s)
        return apply_mask(after, mask), mask

    return Strategy(name="fedper", init_local=init_local, lr_policy=constant_lr, upload_transform=upload)


def flayer_strategy(agg: bool = True, adaptive: bool = True, masking: bool = True) -> Strategy:
    """Adaptive layer-wise pipeline; each mechanism can be toggled off.

    With a toggle off, the corresponding hook is literally the plain-averaging
    one, so disabling everything reproduces ``fedavg_strategy`` exactly.
    """

    def init_local(local: ParamSet, global_: ParamSet, state: ClientState) -> ParamSet:
        return init_local_model(local, global_, state.prev_accuracy, state.head_size)

    def upload(before: ParamSet, after: ParamSet) -> tuple[ParamSet, MaskSet]:
        mask = build_mask(before, after)
        return apply_mask(after, mask), mask

    toggles = [t for t, on in zip(("agg", "lr", "mask"), (agg, adaptive, masking)) if on]
    return Strategy(
        name="flayer" if len(toggles) == 3 else "flayer[" + ",".join(toggles) + "]",
        init_local=init_local if agg else _copy_global,
        lr_policy=adaptive_lr if adaptive else constant_lr,
        upload_transform=upload if masking else _upload_everything,
    )


def make_strategy(name: str, head_size: int, toggles: dict | None = None) -> Strategy:
    """Build a strategy from its config name."""
    if name == "fedavg":
        return fedavg_strategy()
    if name == "fedper":
        return fedper_strategy(head_size)
    if name == "flayer":
        toggles = toggles or {}
        return flayer_strategy(
            agg=toggles.get("agg", True),
            adaptive=toggles.get("adaptive_lr", True),
            masking=toggles.get("masking", True),
        )
    raise ConfigurationError(f"unknown strategy {name!r}")
