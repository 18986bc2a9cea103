"""Routing-log metrics: saturation, change rate, and Jain's fairness index.

A routing log records, for an ordered sequence of checkpoints and a fixed
token population, the set of k experts activated per token. Saturation at
checkpoint t against reference T is the mean fraction of each token's
activations already matching the reference; change rate at t is the mean
fraction replaced at the next checkpoint; Jain's index measures how evenly a
utilization vector spreads over experts.

Log files are flat CSV with columns checkpoint,token,experts, where experts
is a |-separated list of ids, each optionally id:weight when routing weights
are logged. Checkpoint order is the order of first appearance in the file.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "RoutingLog",
    "saturation",
    "change_rate",
    "jain_index",
    "utilization",
    "metric_curve",
    "mean_curves",
    "ingest_routing_log",
    "write_routing_log",
]

_HEADER = ("checkpoint", "token", "experts")


@dataclass(frozen=True)
class RoutingLog:
    """Expert activations per (checkpoint, token); k sets of uniform size.

    experts has shape (num_checkpoints, num_tokens, k) with distinct ids per
    row; weights, when present, is aligned with experts entry-for-entry.
    """

    checkpoints: tuple[str, ...]
    tokens: tuple[str, ...]
    experts: np.ndarray
    weights: np.ndarray | None = None
    num_experts: int = field(default=0)

    def __post_init__(self):
        if len(self.checkpoints) == 0 or len(self.tokens) == 0:
            raise ValueError("routing log needs at least one checkpoint and one token")
        if len(set(self.checkpoints)) != len(self.checkpoints):
            raise ValueError("duplicate checkpoint ids")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate token ids")
        experts = np.asarray(self.experts, dtype=int)
        expected = (len(self.checkpoints), len(self.tokens))
        if experts.ndim != 3 or experts.shape[:2] != expected:
            raise ValueError(
                f"experts must be (checkpoints, tokens, k) = {expected} + (k,), "
                f"got {experts.shape}"
            )
        object.__setattr__(self, "experts", experts)
        if experts.min() < 0:
            raise ValueError("expert ids must be nonnegative")
        n_e = self.num_experts if self.num_experts > 0 else int(experts.max()) + 1
        if experts.max() >= n_e:
            raise ValueError(f"expert id {experts.max()} out of range [0, {n_e})")
        object.__setattr__(self, "num_experts", n_e)
        k = experts.shape[2]
        sorted_sets = np.sort(experts, axis=2)
        if k > 1 and (sorted_sets[:, :, 1:] == sorted_sets[:, :, :-1]).any():
            raise ValueError("duplicate expert ids within one activation set")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != experts.shape:
                raise ValueError("weights must align with experts")
            object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.experts.shape[2]

    def checkpoint_index(self, checkpoint: str) -> int:
        try:
            return self.checkpoints.index(checkpoint)
        except ValueError:
            raise ValueError(f"unknown checkpoint id {checkpoint!r}") from None


def _overlap_fraction(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over tokens of |row(a) intersect row(b)| / k for (N, k) id arrays."""
    hits = (a[:, :, None] == b[:, None, :]).any(axis=2).sum(axis=1)
    return float(hits.mean() / a.shape[1])


def saturation(log: RoutingLog, t: str, T: str) -> float:
    """Mean fraction of activations at t that already match checkpoint T."""
    it, iT = log.checkpoint_index(t), log.checkpoint_index(T)
    return _overlap_fraction(log.experts[it], log.experts[iT])


def change_rate(log: RoutingLog, t: str) -> float:
    """Mean fraction of activations replaced between t and the next checkpoint."""
    it = log.checkpoint_index(t)
    if it == len(log.checkpoints) - 1:
        raise ValueError(f"checkpoint {t!r} is the last one; change rate needs a successor")
    return 1.0 - _overlap_fraction(log.experts[it + 1], log.experts[it])


def jain_index(R: Sequence[float]) -> float:
    """(sum r)^2 / (n sum r^2), in [1/n, 1]; rejects all-zero or negative input."""
    r = np.asarray(R, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise ValueError("utilization vector must be a nonempty 1-D array")
    if (r < 0).any():
        raise ValueError("utilization entries must be nonnegative")
    denom = float((r**2).sum())
    if denom == 0.0:
        raise ValueError("utilization vector must not be all zero")
    return float(r.sum() ** 2 / (r.size * denom))


def utilization(log: RoutingLog, checkpoint: str, mode: str = "tokens") -> np.ndarray:
    """Per-expert utilization at a checkpoint, normalized to sum to 1.

    mode "tokens" counts activations; mode "weight" sums logged routing
    weights and requires a weighted log.
    """
    it = log.checkpoint_index(checkpoint)
    ids = log.experts[it].ravel()
    if mode == "tokens":
        mass = np.bincount(ids, minlength=log.num_experts).astype(float)
    elif mode == "weight":
        if log.weights is None:
            raise ValueError("log has no routing weights; use mode='tokens'")
        mass = np.bincount(ids, weights=log.weights[it].ravel(), minlength=log.num_experts)
    else:
        raise ValueError(f"mode must be 'tokens' or 'weight', got {mode!r}")
    total = mass.sum()
    return mass / total if total > 0 else mass


def metric_curve(
    log: RoutingLog, metric: str, T: str | None = None, mode: str = "tokens"
) -> list[tuple[str, float]]:
    """Per-checkpoint series of one metric.

    saturation: against reference T (default: final checkpoint); change-rate:
    value at t is the rate from t to its successor (last checkpoint omitted);
    jain: fairness of the utilization vector at each checkpoint.
    """
    if metric == "saturation":
        ref = log.checkpoints[-1] if T is None else T
        return [(c, saturation(log, c, ref)) for c in log.checkpoints]
    if metric == "change-rate":
        return [(c, change_rate(log, c)) for c in log.checkpoints[:-1]]
    if metric == "jain":
        return [(c, jain_index(utilization(log, c, mode=mode))) for c in log.checkpoints]
    raise ValueError(f"unknown metric {metric!r}")


def mean_curves(curves: Sequence[list[tuple[str, float]]]) -> list[tuple[str, float]]:
    """Unweighted mean of per-layer curves sharing the same checkpoint labels."""
    if not curves:
        raise ValueError("need at least one curve")
    labels = [c for c, _ in curves[0]]
    for curve in curves[1:]:
        if [c for c, _ in curve] != labels:
            raise ValueError("curves must share identical checkpoint labels")
    values = np.array([[v for _, v in curve] for curve in curves])
    return list(zip(labels, values.mean(axis=0).tolist()))


def _parse_expert_field(field_text: str, lineno: int) -> tuple[list[int], list[float] | None]:
    entries = field_text.split("|")
    ids: list[int] = []
    weights: list[float] = []
    weighted = None
    for entry in entries:
        entry = entry.strip()
        has_weight = ":" in entry
        if weighted is None:
            weighted = has_weight
        elif weighted != has_weight:
            raise ValueError(f"line {lineno}: mixed id and id:weight entries")
        try:
            if has_weight:
                id_text, w_text = entry.split(":", 1)
                ids.append(int(id_text))
                weights.append(float(w_text))
            else:
                ids.append(int(entry))
        except ValueError:
            raise ValueError(f"line {lineno}: malformed expert entry {entry!r}") from None
    if len(set(ids)) != len(ids):
        raise ValueError(f"line {lineno}: duplicate expert ids {ids}")
    return ids, (weights if weighted else None)


def ingest_routing_log(path: str) -> RoutingLog:
    """Parse and validate a routing-log CSV; errors carry 1-based line numbers."""
    rows: dict[str, dict[str, tuple[list[int], list[float] | None]]] = {}
    checkpoint_order: list[str] = []
    token_order: list[str] = []
    k = None
    weighted = None
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        for lineno, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if lineno == 1 and tuple(x.strip().lower() for x in row) == _HEADER:
                continue
            if len(row) != 3:
                raise ValueError(f"line {lineno}: expected 3 columns, got {len(row)}")
            cp, token, expert_field = (x.strip() for x in row)
            ids, ws = _parse_expert_field(expert_field, lineno)
            if k is None:
                k = len(ids)
            elif len(ids) != k:
                raise ValueError(f"line {lineno}: expected {k} experts, got {len(ids)}")
            if weighted is None:
                weighted = ws is not None
            elif weighted != (ws is not None):
                raise ValueError(f"line {lineno}: inconsistent use of routing weights")
            if cp not in rows:
                rows[cp] = {}
                checkpoint_order.append(cp)
            if token in rows[cp]:
                raise ValueError(f"line {lineno}: duplicate row for checkpoint {cp!r}, token {token!r}")
            if cp == checkpoint_order[0]:
                token_order.append(token)
            rows[cp][token] = (ids, ws)
    if not rows:
        raise ValueError("empty routing log")
    token_set = set(token_order)
    for cp in checkpoint_order:
        have = set(rows[cp])
        if have != token_set:
            missing = sorted(token_set ^ have)[:3]
            raise ValueError(
                f"checkpoint {cp!r} does not cover the same tokens as the first "
                f"checkpoint (mismatch near {missing})"
            )
    experts = np.array(
        [[rows[cp][tok][0] for tok in token_order] for cp in checkpoint_order], dtype=int
    )
    weights = None
    if weighted:
        weights = np.array(
            [[rows[cp][tok][1] for tok in token_order] for cp in checkpoint_order]
        )
    return RoutingLog(tuple(checkpoint_order), tuple(token_order), experts, weights)


def write_routing_log(log: RoutingLog, path: str) -> None:
    """Write the CSV form read back by ingest_routing_log."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(_HEADER)
        for ic, cp in enumerate(log.checkpoints):
            for it, tok in enumerate(log.tokens):
                ids = log.experts[ic, it]
                if log.weights is None:
                    text = "|".join(str(int(e)) for e in ids)
                else:
                    text = "|".join(
                        f"{int(e)}:{w:.17g}" for e, w in zip(ids, log.weights[ic, it])
                    )
                writer.writerow([cp, tok, text])
