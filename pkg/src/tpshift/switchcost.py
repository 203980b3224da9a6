"""Cost model for reconfiguring the intra-node parallel layout mid-flight.

A switch pays for five things: getting the KV cache into the new layout
(moved over the interconnect or recomputed by prefill, whichever is
cheaper), resharding weights, recapturing CUDA graphs for the small batch
shapes the tail needs, communicator construction for layouts seen for the
first time, and a fixed control residual (pause/resume bookkeeping,
scheduler churn).  The total is the exact sum of the components.

A naive restart-style switch is modeled separately by calibrated totals:
full prefill, full weight reload, full graph recapture, and a restart
residual.  It exists so the planner can quantify what the incremental
path saves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .cluster import ClusterSpec, ModelSpec
from .errors import ConfigError
from .workload import Sample

MIGRATE = "migrate"
RECOMPUTE = "recompute"


@dataclass(frozen=True)
class SwitchCostBreakdown:
    """Per-component switch cost in seconds; total is always the sum."""

    t_state_handling: float
    state_method: str
    t_weight_reshard: float
    t_graph_recapture: float
    t_comm_group_init: float
    t_fixed_control: float
    total: float

    def __post_init__(self):
        parts = (self.t_state_handling + self.t_weight_reshard
                 + self.t_graph_recapture + self.t_comm_group_init
                 + self.t_fixed_control)
        if not math.isclose(parts, self.total, rel_tol=0, abs_tol=1e-12):
            raise ConfigError("breakdown total must equal the component sum")
        if min(self.t_state_handling, self.t_weight_reshard,
               self.t_graph_recapture, self.t_comm_group_init,
               self.t_fixed_control) < 0:
            raise ConfigError("switch cost components must be non-negative")
        if self.state_method not in (MIGRATE, RECOMPUTE):
            raise ConfigError(f"unknown state method {self.state_method!r}")

    @classmethod
    def build(cls, t_state: float, method: str, t_weight: float, t_graph: float,
              t_comm: float, t_fixed: float) -> "SwitchCostBreakdown":
        return cls(
            t_state_handling=t_state, state_method=method,
            t_weight_reshard=t_weight, t_graph_recapture=t_graph,
            t_comm_group_init=t_comm, t_fixed_control=t_fixed,
            total=t_state + t_weight + t_graph + t_comm + t_fixed,
        )

    def as_dict(self) -> dict:
        return {
            "t_state_handling": self.t_state_handling,
            "state_method": self.state_method,
            "t_weight_reshard": self.t_weight_reshard,
            "t_graph_recapture": self.t_graph_recapture,
            "t_comm_group_init": self.t_comm_group_init,
            "t_fixed_control": self.t_fixed_control,
            "total": self.total,
        }


@dataclass(frozen=True)
class CommGroupPool:
    """Which (tp, dp_intra) layouts already have live communicators.

    The pool only ever grows; the first request for a layout pays the
    construction cost, later requests are free.
    """

    initialized: frozenset[tuple[int, int]]
    init_cost_per_config: float

    def __post_init__(self):
        if self.init_cost_per_config < 0:
            raise ConfigError("init_cost_per_config must be non-negative")

    @classmethod
    def fresh(cls, init_cost: float,
              warm: tuple[tuple[int, int], ...] = ()) -> "CommGroupPool":
        return cls(initialized=frozenset(warm), init_cost_per_config=init_cost)


def comm_group_cost(pool: CommGroupPool, tp: int, dp_intra: int
                    ) -> tuple[float, CommGroupPool]:
    """Cost to have communicators for (tp, dp_intra), plus the grown pool."""
    key = (tp, dp_intra)
    if key in pool.initialized:
        return 0.0, pool
    grown = replace(pool, initialized=pool.initialized | {key})
    return pool.init_cost_per_config, grown


@dataclass(frozen=True)
class GraphCaptureCalibration:
    """CUDA-graph recapture costs for small decode batches.

    Graphs are captured per batch bucket; above small_batch_threshold the
    runtime falls back to eager mode and recapture costs nothing.
    """

    capture_buckets: tuple[int, ...] = (1, 2, 4, 8, 16, 32)
    cost_per_bucket: float = 0.146
    small_batch_threshold: int = 32

    def __post_init__(self):
        if not self.capture_buckets:
            raise ConfigError("capture_buckets must be non-empty")
        if list(self.capture_buckets) != sorted(set(self.capture_buckets)):
            raise ConfigError("capture_buckets must be strictly increasing")
        if self.cost_per_bucket < 0:
            raise ConfigError("cost_per_bucket must be non-negative")
        if self.small_batch_threshold < 1:
            raise ConfigError("small_batch_threshold must be >= 1")


def graph_recapture_cost(calib: GraphCaptureCalibration, merged_batch: int) -> float:
    """Recapture cost for a post-switch batch of `merged_batch` samples."""
    if merged_batch < 1:
        raise ConfigError("merged_batch must be >= 1")
    if merged_batch > calib.small_batch_threshold:
        return 0.0
    covering = [b for b in calib.capture_buckets if b >= merged_batch]
    limit = min(covering[0] if covering else math.inf, calib.small_batch_threshold)
    needed = [b for b in calib.capture_buckets if b <= limit]
    return calib.cost_per_bucket * len(needed)


@dataclass(frozen=True)
class NaiveSwitchCalibration:
    """Measured restart-style switch costs, recorded as totals."""

    state_s: float = 19.01
    weight_s: float = 7.47
    recapture_s: float = 3.59
    total_s: float = 58.98

    def __post_init__(self):
        if self.total_s < self.state_s + self.weight_s + self.recapture_s:
            raise ConfigError("naive total must cover its listed components")

    @property
    def residual_s(self) -> float:
        """Restart overhead not attributable to the three listed parts."""
        return self.total_s - (self.state_s + self.weight_s + self.recapture_s)


@dataclass(frozen=True)
class SwitchCalibration:
    """Everything needed to price a switch, bundled for the planner."""

    graph: GraphCaptureCalibration
    comm_init_cost: float = 0.30
    t_fixed_control: float = 1.40
    naive: NaiveSwitchCalibration = NaiveSwitchCalibration()

    def __post_init__(self):
        if self.comm_init_cost < 0 or self.t_fixed_control < 0:
            raise ConfigError("switch calibration costs must be non-negative")


def kv_send_bytes_per_rank(samples: list[Sample], model: ModelSpec,
                           tp_src: int) -> int:
    """Bytes each source rank ships when migrating the listed samples' KV.

    Every rank holds a 1/tp_src head slice of K and V for all layers, so
    per sample the rank moves 2 * num_layers * ctx * (hidden/tp_src) *
    bytes_per_elem.  Finished samples hold no live cache and contribute
    nothing.
    """
    if model.hidden_dim % tp_src != 0:
        raise ConfigError(
            f"hidden_dim={model.hidden_dim} not divisible by tp_src={tp_src}")
    shard = model.hidden_dim // tp_src
    total = 0
    for s in samples:
        if not s.is_active:
            continue
        total += 2 * model.num_layers * s.context_len * shard * model.bytes_per_elem
    return total


def kv_migration_time(bytes_per_rank: int, cluster: ClusterSpec) -> float:
    """Transfer time for the per-rank migration volume, one-way bandwidth."""
    if bytes_per_rank < 0:
        raise ConfigError("bytes_per_rank must be non-negative")
    return bytes_per_rank / cluster.intra_bw_unidir


def rms_context_length(samples: list[Sample]) -> float:
    """Root-mean-square context length over active samples.

    Chosen so that batch * rms^2 preserves the total attention work of
    the mixed-length batch when priced through a quadratic prefill cost.
    """
    ctx = [s.context_len for s in samples if s.is_active]
    if not ctx:
        raise ValueError("rms_context_length requires at least one active sample")
    return math.sqrt(sum(c * c for c in ctx) / len(ctx))


def recomputation_time(pred, samples: list[Sample], tp_tgt: int) -> float:
    """Estimated cost of rebuilding the KV by a fresh prefill."""
    active = [s for s in samples if s.is_active]
    rms = rms_context_length(active)
    return float(pred.predict_prefill_latency(tp_tgt, len(active), rms))


def state_handling_cost(pred, samples: list[Sample], tp_src: int, tp_tgt: int,
                        model: ModelSpec, cluster: ClusterSpec
                        ) -> tuple[float, str]:
    """Cheaper of migrating the live KV or recomputing it; ties migrate."""
    active = [s for s in samples if s.is_active]
    t_move = kv_migration_time(kv_send_bytes_per_rank(active, model, tp_src), cluster)
    t_recomp = recomputation_time(pred, active, tp_tgt)
    if t_move <= t_recomp:
        return t_move, MIGRATE
    return t_recomp, RECOMPUTE


def weight_reshard_time(model: ModelSpec, tp_tgt: int, cluster: ClusterSpec) -> float:
    """Layer-wise all-gather-and-slice reshard cost.

    Ring all-gather receive volume per rank is (tp_tgt - 1)/tp_tgt of each
    layer; tp_tgt = 1 therefore costs nothing, the weights are already
    wholly present on every rank of a 1-way group.
    """
    volume = model.num_layers * model.layer_param_bytes * (tp_tgt - 1) / tp_tgt
    return volume / cluster.intra_bw_unidir


def merged_batch_size(active_count: int, tp_tgt: int, cluster: ClusterSpec) -> int:
    """Largest per-group batch after rebalancing onto tp_tgt groups."""
    dp_tgt = cluster.gpus_per_node // tp_tgt
    return math.ceil(active_count / dp_tgt)


def total_switch_cost(pred, pool: CommGroupPool, calib: SwitchCalibration,
                      samples: list[Sample], tp_src: int, tp_tgt: int,
                      model: ModelSpec, cluster: ClusterSpec,
                      naive_mode: bool = False) -> SwitchCostBreakdown:
    """Price a tp_src -> tp_tgt switch for the given live samples.

    This is a quote: the communicator pool is consulted but never
    mutated, so evaluating candidates is free of side effects.  Callers
    that commit a switch grow the pool through comm_group_cost.
    """
    if tp_src == tp_tgt:
        raise ConfigError("switch cost requires tp_src != tp_tgt")
    if naive_mode:
        return naive_switch_cost(calib.naive)
    active = [s for s in samples if s.is_active]
    t_state, method = state_handling_cost(pred, active, tp_src, tp_tgt,
                                          model, cluster)
    t_weight = weight_reshard_time(model, tp_tgt, cluster)
    merged = merged_batch_size(len(active), tp_tgt, cluster)
    t_graph = graph_recapture_cost(calib.graph, merged)
    dp_tgt = cluster.gpus_per_node // tp_tgt
    t_comm, _ = comm_group_cost(pool, tp_tgt, dp_tgt)
    return SwitchCostBreakdown.build(
        t_state, method, t_weight, t_graph, t_comm, calib.t_fixed_control)


def naive_switch_cost(naive: NaiveSwitchCalibration) -> SwitchCostBreakdown:
    """Restart-style switch: every component at its calibrated full cost."""
    return SwitchCostBreakdown.build(
        naive.state_s, RECOMPUTE, naive.weight_s, naive.recapture_s,
        0.0, naive.residual_s)
