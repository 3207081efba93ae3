"""Round orchestration: sampling, local rounds, masked aggregation, stopping.

Each round the server samples clients, each sampled client initializes from
the global model, trains locally and uploads a (possibly masked) parameter
set. Uploads are weighted by train-shard size and folded into the next global
model; un-uploaded entries either shrink toward zero ("literal" mode, the
weighted sum taken at face value) or keep their previous global value
("mask_aware" mode, per-entry renormalization over the clients that actually
uploaded the entry).
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

import numpy as np

from . import seeding
from .codec import encode_payload
from .data import partition_dirichlet
from .errors import AggregationError, ConfigurationError
from .mechanisms import ClientState, MaskSet, local_train, update_prev_accuracy
from .metrics import ClientEval, RoundReport, evaluate, make_round_report
from .nn import Network, ParamSet, UnitTensors
from .strategies import Strategy

if TYPE_CHECKING:
    from .config import ExperimentConfig

AGGREGATION_MODES = ("mask_aware", "literal")

#: Optional hook receiving (round, client_id, payload_bytes) for file dumps.
PayloadSink = Callable[[int, int, bytes], None]


@dataclass
class UploadPayload:
    client_id: int
    params: ParamSet  # masked: zero wherever mask is 0
    mask: MaskSet
    m_k: int


@dataclass
class GlobalState:
    round: int
    params: ParamSet
    master_seed: int


@dataclass
class ExperimentResult:
    seed: int
    reports: list[RoundReport]
    clients: list[ClientState]
    global_params: ParamSet
    rounds_to_convergence: int
    total_time_s: float
    network: Network = field(repr=False, default=None)

    @property
    def final_mean_acc(self) -> float:
        return self.reports[-1].mean_acc if self.reports else 0.0


def sample_clients(n: int, rho: float, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement of max(1, round(rho * n)) client ids."""
    if not 0 < rho <= 1:
        raise ConfigurationError(f"join ratio must be in (0, 1], got {rho}")
    count = max(1, int(rho * n + 0.5))
    return sorted(int(i) for i in rng.choice(n, size=count, replace=False))


def aggregate(
    payloads: list[UploadPayload], prev_global: ParamSet, mode: str = "mask_aware"
) -> ParamSet:
    """Fold uploads into a new global model, weighted by train-shard size.

    literal: plain weighted sum of the masked uploads, zeros and all.
    mask_aware: per entry, weighted mean over only the clients whose mask
    selected that entry; entries nobody uploaded keep their previous value.
    """
    if not payloads:
        raise AggregationError("no payloads to aggregate")
    if mode not in AGGREGATION_MODES:
        raise ConfigurationError(f"unknown aggregation mode {mode!r}")
    for p in payloads:
        if not p.params.same_geometry(prev_global):
            raise AggregationError(f"payload from client {p.client_id} has wrong geometry")

    total = float(sum(p.m_k for p in payloads))
    weights = [p.m_k / total for p in payloads]
    dtype = prev_global.units[0].weights.dtype

    units = []
    for ui in range(prev_global.n_units):
        acc_w = np.zeros(prev_global.units[ui].weights.shape, dtype=np.float64)
        acc_b = np.zeros(prev_global.units[ui].bias.shape, dtype=np.float64)
        den_w = np.zeros_like(acc_w)
        den_b = np.zeros_like(acc_b)
        for w, p in zip(weights, payloads):
            acc_w += w * p.params.units[ui].weights
            acc_b += w * p.params.units[ui].bias
            den_w += w * p.mask.units[ui].weights
            den_b += w * p.mask.units[ui].bias
        if mode == "literal":
            units.append(UnitTensors(acc_w.astype(dtype), acc_b.astype(dtype)))
        else:
            prev = prev_global.units[ui]
            out_w = np.where(den_w > 0, acc_w / np.where(den_w > 0, den_w, 1.0), prev.weights)
            out_b = np.where(den_b > 0, acc_b / np.where(den_b > 0, den_b, 1.0), prev.bias)
            units.append(UnitTensors(out_w.astype(dtype), out_b.astype(dtype)))
    return ParamSet(units)


def _client_round(
    state: ClientState,
    global_params: ParamSet,
    network: Network,
    strategy: Strategy,
    round_idx: int,
    batch_size: int,
    local_epochs: int,
    base_lr: float,
    master_seed: int,
) -> UploadPayload:
    """One client's work for the round; mutates only its own state."""
    theta_tilde = strategy.init_local(state.local_params, global_params, state)
    rng = seeding.substream(
        master_seed, seeding.STREAM_BATCHING, round_idx, state.client_id
    )
    theta_hat = local_train(
        network,
        theta_tilde,
        state.data,
        epochs=local_epochs,
        batch_size=batch_size,
        base_lr=base_lr,
        lr_policy=strategy.lr_policy,
        rng=rng,
    )
    up_params, mask = strategy.upload_transform(theta_tilde, theta_hat)
    state.local_params = theta_hat
    update_prev_accuracy(state, theta_hat, network)
    return UploadPayload(state.client_id, up_params, mask, state.data.m_k)


def run_round(
    global_state: GlobalState,
    clients: list[ClientState],
    network: Network,
    strategy: Strategy,
    batch_size: int = 10,
    local_epochs: int = 1,
    base_lr: float = 0.05,
    rho: float = 1.0,
    aggregation: str = "mask_aware",
    workers: int = 1,
    payload_sink: PayloadSink | None = None,
) -> tuple[GlobalState, RoundReport]:
    """Advance the federation by one round; unsampled clients are untouched."""
    t = global_state.round + 1
    started = time.perf_counter()
    rng = seeding.substream(global_state.master_seed, seeding.STREAM_SAMPLING, t)
    sampled = sample_clients(len(clients), rho, rng)

    def job(k: int) -> UploadPayload:
        try:
            return _client_round(
                clients[k],
                global_state.params,
                network,
                strategy,
                t,
                batch_size,
                local_epochs,
                base_lr,
                global_state.master_seed,
            )
        except Exception as exc:
            raise type(exc)(f"round {t}, client {k}: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            payloads = list(pool.map(job, sampled))
    else:
        payloads = [job(k) for k in sampled]
    payloads.sort(key=lambda p: p.client_id)

    payload_bytes = 0
    for p in payloads:
        blob = encode_payload(p.client_id, t, p.params, p.mask)
        payload_bytes += len(blob)
        if payload_sink is not None:
            payload_sink(t, p.client_id, blob)

    new_global = aggregate(payloads, global_state.params, aggregation)

    evals = []
    for state in clients:
        train_acc, train_loss = evaluate(network, state.local_params, state.data.train)
        test_acc, test_loss = evaluate(network, state.local_params, state.data.test)
        evals.append(
            ClientEval(state.client_id, state.data.m_k, train_acc, train_loss, test_acc, test_loss)
        )
    report = make_round_report(t, evals, payload_bytes, time.perf_counter() - started)
    return GlobalState(t, new_global, global_state.master_seed), report


def run_experiment(
    cfg: "ExperimentConfig",
    master_seed: int,
    workers: int = 1,
    payload_sink: PayloadSink | None = None,
) -> ExperimentResult:
    """Run rounds until the budget or the early-stop rule says done.

    Stops once mean client test accuracy has failed to improve by more than
    ``delta`` for ``window`` consecutive rounds; rounds-to-convergence is the
    last round that did improve.
    """
    started = time.perf_counter()
    ds = cfg.build_dataset(seeding.stream_seed(master_seed, seeding.STREAM_DATA))
    shards = partition_dirichlet(ds, cfg.partition_spec(seeding.stream_seed(master_seed, seeding.STREAM_PARTITION)))
    network = cfg.build_network(ds)
    strategy = cfg.build_strategy()

    init_rng = seeding.substream(master_seed, seeding.STREAM_INIT)
    global_params = network.init_params(init_rng)
    clients = [
        ClientState(k, global_params.copy(), shard, cfg.head_size)
        for k, shard in enumerate(shards)
    ]
    state = GlobalState(0, global_params, master_seed)

    reports: list[RoundReport] = []
    best = -np.inf
    best_round = 0
    stall = 0
    for _ in range(cfg.t_max):
        state, report = run_round(
            state,
            clients,
            network,
            strategy,
            batch_size=cfg.batch_size,
            local_epochs=cfg.local_epochs,
            base_lr=cfg.base_lr,
            rho=cfg.rho,
            aggregation=cfg.aggregation,
            workers=workers,
            payload_sink=payload_sink,
        )
        reports.append(report)
        if report.mean_acc > best + cfg.early_stop_delta:
            best = report.mean_acc
            best_round = report.round
            stall = 0
        else:
            stall += 1
            if stall >= cfg.early_stop_window:
                break

    return ExperimentResult(
        seed=master_seed,
        reports=reports,
        clients=clients,
        global_params=state.params,
        rounds_to_convergence=best_round,
        total_time_s=time.perf_counter() - started,
        network=network,
    )
