"""Parameter-weighted cost: layer weights r_l, the budget loss, and multi-task accounting.

The budget c covers eligible-layer deltas only. BN running statistics and
the classifier head are per-task storage too, so they enter the #Param.
ratios but not c.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, ClassifierHead, count_mults
from .diffcore import Tensor, ops
from .reparam import DeltaRecord

R_MODES = ("param-weighted", "equal")


@dataclass(frozen=True)
class CostWeights:
    r: np.ndarray
    mode: str = "param-weighted"

    def __len__(self):
        return len(self.r)


def compute_r(source, mode: str = "param-weighted") -> CostWeights:
    """r_l = N(w_l) / sum_i N(w_i) over eligible layers, or 1/L in equal mode.

    ``source`` is a Backbone or a sequence of per-layer parameter counts.
    """
    if mode not in R_MODES:
        raise ValueError(f"unknown weighting mode {mode!r}")
    counts = ([s.param_count for s in source.eligible] if isinstance(source, Backbone)
              else [int(n) for n in source])
    if not counts:
        raise ValueError("need at least one eligible layer")
    n = np.asarray(counts, dtype=np.float64)
    r = np.full(len(n), 1.0 / len(n)) if mode == "equal" else n / n.sum()
    return CostWeights(r, mode)


def policy_loss(probs: Tensor, r: CostWeights, c: float) -> Tensor:
    """| sum_l r_l * p_{l,1} - c | on soft (L, 2) probabilities."""
    if probs.shape != (len(r), 2):
        raise ValueError(f"probs shape {probs.shape} does not match {len(r)} layers")
    first = ops.getitem(probs, (slice(None), 0))
    rt = Tensor(r.r.astype(probs.data.dtype))
    expected = ops.sum(ops.mul(first, rt))
    return ops.abs(ops.sub(expected, Tensor(np.asarray(c, dtype=probs.data.dtype))))


def achieved_cost(bits, r: CostWeights) -> float:
    """Fraction of eligible-layer parameters made task-specific by a binary policy."""
    bits = np.asarray(bits).reshape(-1)
    if bits.shape != (len(r),):
        raise ValueError(f"{bits.size} bits for {len(r)} layers")
    return float(np.dot(r.r, bits.astype(np.float64)))


def controllability_tolerance(r: CostWeights, floor: float = 0.08) -> float:
    return max(floor, float(r.r.max()) / 2)


def attainable_costs(r: CostWeights) -> np.ndarray:
    """Sorted distinct achievable costs over all 2^L policies (subset sums)."""
    sums = np.zeros(1)
    for w in r.r:
        sums = np.unique(np.round(np.concatenate([sums, sums + w]), 12))
    return sums


def discreteness_gap(r: CostWeights, c: float) -> float:
    """Smallest |achieved - c| any binary policy can reach: the floor on controllability error."""
    costs = attainable_costs(r)
    return float(np.min(np.abs(costs - c)))


# multi-task accounting -----------------------------------------------------

def head_count(num_features: int, num_classes: int) -> int:
    return num_features * num_classes + num_classes


def task_specific_count(base: Backbone, record: DeltaRecord) -> int:
    """Per-task storage predicted from the layer table and the record's policy."""
    n_head = head_count(*record.head_weight.shape)
    if record.kind == "full":
        return base.storage_count() + n_head
    if record.kind == "classifier":
        return n_head
    affine = base.affine_count() if record.bn_mode == "stats-and-affine" else 0
    return swr_task_count([s.param_count for s in base.eligible], record.bits,
                          base.bn_stat_count(), n_head, affine)


def swr_task_count(layer_counts, bits, bn_stat_count: int, head_params: int, affine_count: int = 0) -> int:
    """Selected deltas + BN running stats + head (+ BN affine when transferred)."""
    if len(layer_counts) != len(bits):
        raise ValueError(f"{len(bits)} bits for {len(layer_counts)} layers")
    selected = sum(int(n) for n, b in zip(layer_counts, bits) if b)
    return selected + int(bn_stat_count) + int(head_params) + int(affine_count)


def multitask_param_ratio(base: Backbone, records: list[DeltaRecord]) -> float:
    """(N_base + sum over tasks of task-specific storage) / N_base; policy net excluded."""
    fp = base.fingerprint()
    for rec in records:
        if rec.base_fingerprint and rec.base_fingerprint != fp:
            raise ValueError(f"record for task {rec.task!r} references a different base")
    n_base = base.storage_count()
    return (n_base + sum(task_specific_count(base, rec) for rec in records)) / n_base


def mult_ratio(merged: Backbone, base: Backbone, input_shape=None, head: ClassifierHead | None = None) -> float:
    return count_mults(merged, input_shape, head) / count_mults(base, input_shape, head)


REPORT_COLUMNS = ("task", "c", "achieved_cost", "param_ratio", "mult_ratio")


def report_csv(rows: list[dict], columns=REPORT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(v) for k, v in row.items()})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return v
