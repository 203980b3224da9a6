"""Layer-wise reshard planning for weights and KV cache.

Layouts are canonical: under tp-way sharding, rank r owns the contiguous
hidden-dimension slice [r*H/tp, (r+1)*H/tp).  A reshard step gathers one
layer inside the target TP group and immediately re-slices it, so peak
working memory stays bounded by a single layer regardless of model depth.
Local-shard overlap between source and target layouts is deliberately not
exploited; the cost model prices the straightforward gather, and the plan
mirrors it so the two stay consistent.

KV migration plans merge first: samples from all source DP groups are
mapped onto target groups before head slices are cut, so a plan is valid
for any dp_intra transition.
"""

from __future__ import annotations

from dataclasses import dataclass

from .cluster import ModelSpec
from .errors import ConfigError
from .workload import Sample


@dataclass(frozen=True)
class ShardLayout:
    """Canonical contiguous head partition of the hidden dimension."""

    tp: int
    dim: int

    def __post_init__(self):
        if self.tp < 1:
            raise ConfigError("tp must be >= 1")
        if self.dim < 1 or self.dim % self.tp != 0:
            raise ConfigError(
                f"dim={self.dim} must be positive and divisible by tp={self.tp}")

    def rank_slice(self, rank: int) -> tuple[int, int]:
        if not 0 <= rank < self.tp:
            raise ConfigError(f"rank {rank} out of range for tp={self.tp}")
        width = self.dim // self.tp
        return rank * width, (rank + 1) * width


@dataclass(frozen=True)
class PlanStep:
    """One layer's gather-and-slice: who receives what, who keeps which slice."""

    layer: int
    gather_ranks: tuple[int, ...]
    recv_bytes_per_rank: int
    slices: tuple[tuple[int, int, int], ...]  # (rank, start, stop)
    working_bytes: int


@dataclass(frozen=True)
class ReshardPlan:
    kind: str  # "weight" or "kv"
    dim: int
    steps: tuple[PlanStep, ...]
    total_per_rank_bytes: int
    peak_working_bytes: int
    peak_bound_bytes: int

    def describe(self) -> str:
        lines = [f"{self.kind} reshard plan: {len(self.steps)} steps, "
                 f"{self.total_per_rank_bytes} B/rank, "
                 f"peak {self.peak_working_bytes} B"]
        for st in self.steps:
            sl = " ".join(f"r{r}[{a}:{b})" for r, a, b in st.slices)
            lines.append(f"  layer {st.layer}: recv {st.recv_bytes_per_rank} B/rank, {sl}")
        return "\n".join(lines)


def _target_slices(layout_tgt: ShardLayout) -> tuple[tuple[int, int, int], ...]:
    return tuple((r, *layout_tgt.rank_slice(r)) for r in range(layout_tgt.tp))


def plan_weight_reshard(model: ModelSpec, layout_src: ShardLayout,
                        layout_tgt: ShardLayout) -> ReshardPlan:
    """Plan moving layer weights from one canonical layout to another.

    An identity transition produces a plan whose steps move zero bytes.
    """
    if layout_src.dim != layout_tgt.dim:
        raise ConfigError("source and target layouts must share dim")
    identity = layout_src.tp == layout_tgt.tp
    slices = _target_slices(layout_tgt)
    if not identity and model.layer_param_bytes % layout_tgt.tp != 0:
        raise ConfigError(
            f"layer_param_bytes={model.layer_param_bytes} not divisible by "
            f"tp_tgt={layout_tgt.tp}")
    if identity:
        recv = 0
        working = 0
    else:
        shard = model.layer_param_bytes // layout_tgt.tp
        recv = shard * (layout_tgt.tp - 1)
        working = model.layer_param_bytes
    steps = tuple(
        PlanStep(layer=m, gather_ranks=tuple(range(layout_tgt.tp)),
                 recv_bytes_per_rank=recv, slices=slices, working_bytes=working)
        for m in range(model.num_layers)
    )
    peak = max((st.working_bytes for st in steps), default=0)
    return ReshardPlan(kind="weight", dim=layout_tgt.dim, steps=steps,
                       total_per_rank_bytes=recv * model.num_layers,
                       peak_working_bytes=peak,
                       peak_bound_bytes=model.layer_param_bytes)


def plan_kv_migration(samples: list[Sample], model: ModelSpec, tp_src: int,
                      dp_groups_src: int, tp_tgt: int) -> ReshardPlan:
    """Plan moving the live KV cache into the target layout.

    Source DP groups are merged before slicing, so the per-layer volume is
    simply every unfinished sample's head shard.  The degenerate case of
    an identity layout with a single source group moves nothing.
    """
    if model.hidden_dim % tp_src != 0 or model.hidden_dim % tp_tgt != 0:
        raise ConfigError("hidden_dim must be divisible by both tp values")
    if dp_groups_src < 1:
        raise ConfigError("dp_groups_src must be >= 1")
    for s in samples:
        if s.is_active and not 0 <= s.intra_dp_group < dp_groups_src:
            raise ConfigError(
                f"sample {s.id} group {s.intra_dp_group} outside dp_groups_src")
    layout_tgt = ShardLayout(tp=tp_tgt, dim=model.hidden_dim)
    slices = _target_slices(layout_tgt)
    active = [s for s in samples if s.is_active]
    identity = tp_src == tp_tgt and dp_groups_src == 1
    shard = model.hidden_dim // tp_src
    per_layer_tokens = sum(s.context_len for s in active)
    if identity:
        recv = 0
        working = 0
    else:
        # per source rank, per layer: both K and V of its head shard
        recv = 2 * per_layer_tokens * shard * model.bytes_per_elem
        working = 2 * per_layer_tokens * model.hidden_dim * model.bytes_per_elem
    steps = tuple(
        PlanStep(layer=m, gather_ranks=tuple(range(tp_tgt)),
                 recv_bytes_per_rank=recv, slices=slices, working_bytes=working)
        for m in range(model.num_layers)
    )
    peak = max((st.working_bytes for st in steps), default=0)
    bound = 2 * per_layer_tokens * model.hidden_dim * model.bytes_per_elem
    return ReshardPlan(kind="kv", dim=model.hidden_dim, steps=steps,
                       total_per_rank_bytes=recv * model.num_layers,
                       peak_working_bytes=peak, peak_bound_bytes=bound)


def verify_plan(plan: ReshardPlan, layout_tgt: ShardLayout) -> list[str]:
    """Safety checks; returns human-readable violations, empty if clean."""
    issues: list[str] = []
    if plan.dim != layout_tgt.dim:
        issues.append(f"plan dim {plan.dim} != layout dim {layout_tgt.dim}")
        return issues
    expected = _target_slices(layout_tgt)
    seen_layers = set()
    for st in plan.steps:
        if st.layer in seen_layers:
            issues.append(f"layer {st.layer} planned twice")
        seen_layers.add(st.layer)
        ordered = tuple(sorted(st.slices, key=lambda s: s[1]))
        cursor = 0
        for rank, start, stop in ordered:
            if start != cursor:
                issues.append(
                    f"layer {st.layer}: slice gap or overlap at {start} (expected {cursor})")
                break
            if stop <= start:
                issues.append(f"layer {st.layer}: empty slice for rank {rank}")
                break
            cursor = stop
        else:
            if cursor != plan.dim:
                issues.append(
                    f"layer {st.layer}: slices cover [0, {cursor}) not [0, {plan.dim})")
        if tuple(sorted(st.slices)) != tuple(sorted(expected)):
            issues.append(f"layer {st.layer}: slices are not the canonical partition")
        if st.recv_bytes_per_rank < 0:
            issues.append(f"layer {st.layer}: negative receive volume")
    expected_peak = max((st.working_bytes for st in plan.steps), default=0)
    if plan.peak_working_bytes != expected_peak:
        issues.append(
            f"peak_working_bytes {plan.peak_working_bytes} != max step {expected_peak}")
    if plan.peak_working_bytes > plan.peak_bound_bytes:
        issues.append(
            f"peak {plan.peak_working_bytes} exceeds bound {plan.peak_bound_bytes}")
    total = sum(st.recv_bytes_per_rank for st in plan.steps)
    if total != plan.total_per_rank_bytes:
        issues.append(
            f"total_per_rank_bytes {plan.total_per_rank_bytes} != step sum {total}")
    return issues


def peak_extra_memory(plan: ReshardPlan) -> int:
    """Worst-case transient bytes a rank needs while executing the plan."""
    return plan.peak_working_bytes
