"""Evaluation utilities: accuracy/loss, round reports, linear CKA."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigurationError
from .nn import Network, ParamSet, cross_entropy

EVAL_CHUNK = 512


@dataclass
class ClientEval:
    client_id: int
    m_k: int
    train_acc: float
    train_loss: float
    test_acc: float
    test_loss: float


@dataclass
class RoundReport:
    """Per-round metrics: client table, mean test accuracy, size-weighted loss."""

    round: int
    per_client: list[ClientEval]
    mean_acc: float
    weighted_loss: float
    payload_bytes: int = 0
    elapsed_s: float = 0.0

    def to_record(self) -> dict:
        """Deterministic log record; excludes wall-clock timing on purpose."""
        return {
            "type": "round",
            "round": self.round,
            "mean_acc": self.mean_acc,
            "weighted_loss": self.weighted_loss,
            "payload_bytes": self.payload_bytes,
            "per_client": [vars(c) for c in self.per_client],
        }


def make_round_report(
    round_idx: int, evals: list[ClientEval], payload_bytes: int = 0, elapsed_s: float = 0.0
) -> RoundReport:
    """Aggregate client evaluations; loss is weighted by train-shard size."""
    total = sum(c.m_k for c in evals)
    weighted = sum(c.m_k / total * c.train_loss for c in evals) if total else 0.0
    mean_acc = float(np.mean([c.test_acc for c in evals])) if evals else 0.0
    return RoundReport(round_idx, evals, mean_acc, weighted, payload_bytes, elapsed_s)


def evaluate(network: Network, params: ParamSet, ds: Dataset) -> tuple[float, float]:
    """Accuracy under argmax plus mean cross-entropy over the dataset."""
    if len(ds) == 0:
        raise ConfigurationError(f"cannot evaluate on empty dataset {ds.name!r}")
    correct = 0
    loss_sum = 0.0
    for start in range(0, len(ds), EVAL_CHUNK):
        sl = slice(start, start + EVAL_CHUNK)
        logits, _ = network.forward(params, ds.inputs[sl])
        labels = ds.labels[sl]
        correct += int((logits.argmax(axis=1) == labels).sum())
        loss_sum += cross_entropy(logits, labels) * len(labels)
    return correct / len(ds), loss_sum / len(ds)


# ---------------------------------------------------------------------------
# Representation similarity


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two feature matrices (n, d).

    Computed in feature space: ||Yc' Xc||_F^2 / (||Xc' Xc||_F ||Yc' Yc||_F)
    with column-centered Xc, Yc. Invariant to orthogonal transforms and
    isotropic scaling; returns a value in [0, 1]. Degenerate (zero-variance)
    inputs yield 0.0 with a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ConfigurationError("features must be 2-D with a shared sample count")
    if x.shape[0] < 2:
        raise ConfigurationError("need at least 2 samples")
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx == 0.0 or yy == 0.0:
        warnings.warn("zero-variance features; similarity defined as 0", RuntimeWarning)
        return 0.0
    return float(np.linalg.norm(yc.T @ xc) ** 2 / (xx * yy))


@dataclass
class SimilarityMatrix:
    """Pairwise same-layer similarity across clients for one layer unit."""

    layer_index: int
    values: np.ndarray = field(repr=False)

    @property
    def mean_offdiag(self) -> float:
        n = self.values.shape[0]
        mask = ~np.eye(n, dtype=bool)
        return float(self.values[mask].mean())


def cross_client_layer_similarity(
    network: Network,
    client_params: list[ParamSet],
    probe: Dataset,
    layers: list[int] | None = None,
) -> list[SimilarityMatrix]:
    """Same-layer activation similarity between every client pair.

    Every client's model is run on the identical probe inputs; the captured
    activation of each requested unit is flattened to (n, d) and compared
    pairwise with linear CKA.
    """
    if len(client_params) < 2:
        raise ConfigurationError("need at least 2 clients to compare")
    layer_set = list(layers) if layers is not None else list(range(1, network.n_units + 1))
    feats: list[dict[int, np.ndarray]] = []
    for params in client_params:
        _, acts = network.forward(params, probe.inputs, capture=layer_set)
        feats.append({i: a.reshape(a.shape[0], -1) for i, a in acts.items()})

    out = []
    n = len(client_params)
    for li in layer_set:
        values = np.eye(n)
        for a in range(n):
            for b in range(a + 1, n):
                values[a, b] = values[b, a] = linear_cka(feats[a][li], feats[b][li])
        out.append(SimilarityMatrix(layer_index=li, values=values))
    return out
