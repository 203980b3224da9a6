"""Online reconfiguration decisions.

The controller periodically asks one question per candidate TP degree:
finishing the batch as-is versus paying a one-time switch cost and
finishing under the candidate layout, which is faster?  Remaining time is
always bounded using the configured max generation length, never the
hidden true stop points, which makes the estimate a conservative bound
for the samples that stop early.

Remaining-time model, per DP group with batch B and aggregate tokens T:
the group takes (l_max - l_gen) more lock-step decode steps, and step k
runs at the predicted latency for (tp, B, T + B*k).  The node finishes
when its slowest group does, so group estimates combine by max.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cluster import ClusterSpec, ModelSpec, ParallelConfig
from .errors import ConfigError
from .switchcost import (CommGroupPool, SwitchCalibration, SwitchCostBreakdown,
                         total_switch_cost)
from .workload import BatchStatus, Sample


@dataclass(frozen=True)
class ControllerParams:
    """Switch-policy knobs.

    chunk_steps > 1 evaluates the remaining-time sum in midpoint chunks,
    exact wherever the predictor is linear between grid knots.
    use_exact_predictor is an analysis hook that routes planning through
    the ground-truth oracle instead of the fitted predictor.
    """

    tp_list: tuple[int, ...] = (1, 2, 4, 8)
    eval_interval: int = 64
    enabled: bool = True
    chunk_steps: int = 64
    use_exact_predictor: bool = False

    def __post_init__(self):
        if not self.tp_list:
            raise ConfigError("tp_list must be non-empty")
        if list(self.tp_list) != sorted(set(self.tp_list)):
            raise ConfigError("tp_list must be strictly increasing")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")
        if self.chunk_steps < 1:
            raise ConfigError("chunk_steps must be >= 1")


@dataclass(frozen=True)
class CandidateEval:
    tp: int
    t_rem: float
    t_switch: float
    t_total: float


@dataclass(frozen=True)
class SwitchDecision:
    action: str  # "stay" or "switch"
    target: ParallelConfig | None
    t_cur: float
    t_best: float
    breakdown: SwitchCostBreakdown | None
    evaluated: tuple[CandidateEval, ...]


def est_rem_time(pred, tp: int, statuses: Sequence[BatchStatus], l_max: int,
                 l_gen: int, chunk_steps: int = 64) -> float:
    """Conservative remaining decode time under layout tp.

    Empty groups contribute nothing; the node estimate is the max over
    its non-empty groups.
    """
    if l_gen >= l_max:
        raise ConfigError("est_rem_time requires l_gen < l_max")
    remaining = l_max - l_gen
    worst = 0.0
    for st in statuses:
        batch = st.active_count
        if batch == 0:
            continue
        base = float(st.aggregate_tokens)
        starts = np.arange(0, remaining, chunk_steps, dtype=float)
        counts = np.minimum(chunk_steps, remaining - starts)
        mids = starts + (counts - 1) / 2.0
        lat = pred.predict_decode_latency(tp, batch, base + batch * mids)
        total = float(np.dot(counts, np.atleast_1d(lat)))
        worst = max(worst, total)
    return worst


def compute_merged_bs(rbs_list: Sequence[int], tp_tgt: int,
                      cluster: ClusterSpec) -> list[int]:
    """Per-group batch sizes after merging onto tp_tgt groups.

    The identity transition leaves groups untouched; otherwise samples are
    rebalanced so group sizes differ by at most one, larger groups first.
    """
    if not rbs_list:
        raise ConfigError("rbs_list must be non-empty")
    if cluster.gpus_per_node % len(rbs_list) != 0:
        raise ConfigError("rbs_list length must divide gpus_per_node")
    if tp_tgt < 1 or cluster.gpus_per_node % tp_tgt != 0:
        raise ConfigError(f"tp_tgt={tp_tgt} invalid for this cluster")
    tp_src = cluster.gpus_per_node // len(rbs_list)
    if tp_tgt == tp_src:
        return list(rbs_list)
    dp_tgt = cluster.gpus_per_node // tp_tgt
    total = sum(rbs_list)
    base, extra = divmod(total, dp_tgt)
    return [base + 1 if g < extra else base for g in range(dp_tgt)]


def assign_merged_groups(statuses: Sequence[BatchStatus], tp_tgt: int,
                         cluster: ClusterSpec) -> list[list[Sample]]:
    """Deterministically map active samples onto the target DP groups.

    Longest-context first; each sample goes to the group with the fewest
    samples, breaking ties by lightest aggregate tokens then group index.
    The resulting counts match compute_merged_bs.
    """
    dp_tgt = cluster.gpus_per_node // tp_tgt
    pool = [s for st in statuses for s in st.samples]
    pool.sort(key=lambda s: (-s.context_len, s.id))
    groups: list[list[Sample]] = [[] for _ in range(dp_tgt)]
    tokens = [0] * dp_tgt
    for s in pool:
        idx = min(range(dp_tgt), key=lambda g: (len(groups[g]), tokens[g], g))
        groups[idx].append(s)
        tokens[idx] += s.context_len
    return groups


def evaluate(params: ControllerParams, pred, pool: CommGroupPool,
             calib: SwitchCalibration, statuses: Sequence[BatchStatus],
             current: ParallelConfig, l_max: int, l_gen: int,
             model: ModelSpec, cluster: ClusterSpec,
             naive_mode: bool = False) -> SwitchDecision:
    """One pass of the switch policy over every candidate TP degree.

    Candidate totals are remaining-time plus switch cost; the current
    layout competes with a zero switch cost.  Ties break toward the
    smaller TP degree, and an exact tie with the current layout stays.
    """
    active_total = sum(st.active_count for st in statuses)
    if active_total == 0:
        raise ConfigError("evaluate requires at least one active sample")
    t_cur = est_rem_time(pred, current.tp, statuses, l_max, l_gen,
                         params.chunk_steps)
    samples = [s for st in statuses for s in st.samples]
    evaluated: list[CandidateEval] = []
    best: CandidateEval | None = None
    breakdowns: dict[int, SwitchCostBreakdown] = {}
    for tp in params.tp_list:
        if cluster.gpus_per_node % tp != 0:
            continue
        if tp == current.tp:
            cand = CandidateEval(tp=tp, t_rem=t_cur, t_switch=0.0, t_total=t_cur)
        else:
            merged = assign_merged_groups(statuses, tp, cluster)
            merged_statuses = [
                BatchStatus(node_id=statuses[0].node_id, group_index=g,
                            samples=tuple(members))
                for g, members in enumerate(merged) if members
            ]
            t_rem = est_rem_time(pred, tp, merged_statuses, l_max, l_gen,
                                 params.chunk_steps)
            cost = total_switch_cost(pred, pool, calib, samples, current.tp,
                                     tp, model, cluster, naive_mode=naive_mode)
            breakdowns[tp] = cost
            cand = CandidateEval(tp=tp, t_rem=t_rem, t_switch=cost.total,
                                 t_total=t_rem + cost.total)
        evaluated.append(cand)
        if best is None or cand.t_total < best.t_total:
            best = cand
    assert best is not None
    if best.tp != current.tp and t_cur > best.t_total:
        target = ParallelConfig.for_cluster(cluster, best.tp)
        return SwitchDecision(action="switch", target=target, t_cur=t_cur,
                              t_best=best.t_total, breakdown=breakdowns[best.tp],
                              evaluated=tuple(evaluated))
    return SwitchDecision(action="stay", target=None, t_cur=t_cur,
                          t_best=best.t_total, breakdown=None,
                          evaluated=tuple(evaluated))
