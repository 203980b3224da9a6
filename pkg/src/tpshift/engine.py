"""Generation-stage simulator.

One simulated iteration covers: prefill per DP group, lock-step decode
rounds in which every active sample gains one token, controller
evaluations on a fixed cadence plus immediately after any completion, and
committed switches that pause the node at a barrier, charge the realized
switch cost, rebalance samples onto the new groups, and resume.

Clock rules:
  * Each DP group advances on its own clock; groups only meet at switch
    barriers (max of the group clocks) and at the end of the stage.
  * Decode ground truth always comes from the analytic hardware model;
    the controller only ever sees the fitted predictor unless a scenario
    explicitly routes it through the oracle.
  * A committed switch jumps every active group clock to barrier + cost.
    Time the faster groups spend waiting at the barrier is tracked as
    bubble time.

Nodes are independent replicas under inter-node data parallelism; the
stage ends when the slowest node finishes, and iteration time adds the
constant preparation and training segments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import (ClusterSpec, ModelSpec, ParallelConfig, candidate_configs,
                      token_budget)
from .controller import (ControllerParams, SwitchDecision, assign_merged_groups,
                         evaluate)
from .errors import PlanVerificationError, ScenarioError
from .latency import (AnalyticHardwareModel, OracleCalibration,
                      OracleLatencyModel, ProfileTable, build_profile_grid,
                      fit_predictor, oracle_decode_latency,
                      oracle_prefill_latency, run_profiler)
from .reshard import (ShardLayout, plan_kv_migration, plan_weight_reshard,
                      verify_plan)
from .switchcost import (RECOMPUTE, CommGroupPool, SwitchCalibration,
                         SwitchCostBreakdown, comm_group_cost,
                         naive_switch_cost, rms_context_length,
                         total_switch_cost)
from .workload import (BatchStatus, LengthDistribution, Sample,
                       sample_response_lengths)

MODES = ("adaptive", "static", "naive-switch")


@dataclass
class ScenarioSpec:
    """Everything needed to reproduce one simulated generation stage."""

    model: ModelSpec
    cluster: ClusterSpec
    distribution: LengthDistribution
    oracle: OracleCalibration
    switch: SwitchCalibration
    controller: ControllerParams
    prompt_len: int = 512
    global_batch: int = 128
    l_max: int = 16384
    initial_tp: int = 2
    seed: int = 0
    prep_time: float = 20.0
    train_time: float = 40.0
    mode: str = "adaptive"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ScenarioError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.global_batch < 1:
            raise ScenarioError("global_batch must be >= 1")
        if self.global_batch % self.cluster.num_nodes != 0:
            raise ScenarioError(
                f"global_batch={self.global_batch} must divide evenly across "
                f"{self.cluster.num_nodes} nodes")
        if self.prompt_len < 1 or self.l_max < 1:
            raise ScenarioError("prompt_len and l_max must be >= 1")
        if self.prep_time < 0 or self.train_time < 0:
            raise ScenarioError("prep_time and train_time must be non-negative")
        # initial layout must be admissible and evaluable
        ParallelConfig.for_cluster(self.cluster, self.initial_tp)

    @property
    def initial_config(self) -> ParallelConfig:
        return ParallelConfig.for_cluster(self.cluster, self.initial_tp)


def build_hardware_model(spec: ScenarioSpec) -> AnalyticHardwareModel:
    return AnalyticHardwareModel(cluster=spec.cluster, model=spec.model,
                                 calib=spec.oracle)


def build_profile(spec: ScenarioSpec) -> ProfileTable:
    hw = build_hardware_model(spec)
    grid = build_profile_grid(spec.cluster, candidate_configs(spec.cluster))
    return run_profiler(hw, grid)


def _make_planner_view(spec: ScenarioSpec, hw: AnalyticHardwareModel,
                       table: ProfileTable | None):
    """The latency model the controller is allowed to consult."""
    if spec.controller.use_exact_predictor:
        return OracleLatencyModel(hw), table
    if table is None:
        table = build_profile(spec)
    return fit_predictor(table), table


@dataclass
class _GroupState:
    index: int
    samples: list[Sample]
    agg_tokens: int
    clock: float


@dataclass
class _NodeState:
    node_id: int
    tp: int
    groups: list[_GroupState]
    pool: CommGroupPool
    all_samples: list[Sample] = field(default_factory=list)
    round_ends: list[np.ndarray] = field(default_factory=list)
    round_counts: list[tuple[int, int]] = field(default_factory=list)  # (batch, rounds)
    events: list[dict] = field(default_factory=list)
    completions: list[tuple[float, int]] = field(default_factory=list)
    switches: list[dict] = field(default_factory=list)
    bubble_time: float = 0.0
    decode_start: float = 0.0
    eval_count: int = 0


def init_scenario(spec: ScenarioSpec) -> list[_NodeState]:
    """Draw targets, place samples, charge prefill, check admission."""
    targets = sample_response_lengths(spec.distribution, spec.global_batch,
                                      spec.seed)
    per_node = spec.global_batch // spec.cluster.num_nodes
    budget = token_budget(spec.cluster)
    need = per_node * (spec.prompt_len + spec.l_max)
    if need > budget:
        raise ScenarioError(
            f"scenario needs {need} KV tokens per node, budget is {budget}")
    cfg = spec.initial_config
    hw = build_hardware_model(spec)
    nodes: list[_NodeState] = []
    samples_by_node: list[list[Sample]] = [[] for _ in range(spec.cluster.num_nodes)]
    for i, target in enumerate(targets):
        node = i % spec.cluster.num_nodes
        s = Sample(id=i, prompt_len=spec.prompt_len, target_response_len=target,
                   node_id=node)
        samples_by_node[node].append(s)
    for node_id, node_samples in enumerate(samples_by_node):
        groups: list[list[Sample]] = [[] for _ in range(cfg.dp_intra)]
        for j, s in enumerate(node_samples):
            g = j % cfg.dp_intra
            s.intra_dp_group = g
            groups[g].append(s)
        gstates = []
        for g, members in enumerate(groups):
            if not members:
                continue
            prefill = oracle_prefill_latency(hw, cfg.tp, len(members),
                                             spec.prompt_len)
            gstates.append(_GroupState(index=g, samples=members,
                                       agg_tokens=sum(m.context_len for m in members),
                                       clock=prefill))
        pool = CommGroupPool.fresh(spec.switch.comm_init_cost,
                                   warm=((cfg.tp, cfg.dp_intra),))
        node = _NodeState(node_id=node_id, tp=cfg.tp, groups=gstates, pool=pool,
                          all_samples=list(node_samples))
        node.decode_start = min(g.clock for g in gstates) if gstates else 0.0
        nodes.append(node)
    return nodes


def _node_statuses(node: _NodeState) -> list[BatchStatus]:
    return [BatchStatus(node_id=node.node_id, group_index=g.index,
                        samples=tuple(g.samples))
            for g in node.groups if g.samples]


def _realize_breakdown(quote: SwitchCostBreakdown, hw: AnalyticHardwareModel,
                       node: _NodeState, tp_tgt: int,
                       naive_mode: bool) -> SwitchCostBreakdown:
    """Ground-truth switch cost.

    Transfer arithmetic and calibrated constants are already exact; only a
    recompute of the KV via prefill is re-priced through the oracle at the
    true batch state.
    """
    if naive_mode or quote.state_method != RECOMPUTE:
        return quote
    active = [s for g in node.groups for s in g.samples]
    rms = rms_context_length(active)
    t_state = oracle_prefill_latency(hw, tp_tgt, len(active), rms)
    return SwitchCostBreakdown.build(
        t_state, RECOMPUTE, quote.t_weight_reshard, quote.t_graph_recapture,
        quote.t_comm_group_init, quote.t_fixed_control)


def _commit_switch(spec: ScenarioSpec, hw: AnalyticHardwareModel,
                   node: _NodeState, decision: SwitchDecision,
                   round_idx: int, naive_mode: bool) -> None:
    target = decision.target
    assert target is not None and decision.breakdown is not None
    statuses = _node_statuses(node)
    active = [s for st in statuses for s in st.samples]
    barrier = max(g.clock for g in node.groups if g.samples)
    for g in node.groups:
        if g.samples:
            node.bubble_time += barrier - g.clock
    realized = _realize_breakdown(decision.breakdown, hw, node, target.tp,
                                  naive_mode)
    # reshard plans are generated and verified on every commit; a failure
    # here is a planner bug, not a scenario property
    layout_src = ShardLayout(tp=node.tp, dim=spec.model.hidden_dim)
    layout_tgt = ShardLayout(tp=target.tp, dim=spec.model.hidden_dim)
    wplan = plan_weight_reshard(spec.model, layout_src, layout_tgt)
    issues = verify_plan(wplan, layout_tgt)
    kv_info = None
    if realized.state_method != RECOMPUTE:
        dp_src = spec.cluster.gpus_per_node // node.tp
        kplan = plan_kv_migration(active, spec.model, node.tp, dp_src, target.tp)
        issues += verify_plan(kplan, layout_tgt)
        kv_info = {"per_rank_bytes": kplan.total_per_rank_bytes,
                   "peak_working_bytes": kplan.peak_working_bytes}
    if issues:
        raise PlanVerificationError("; ".join(issues))
    cost, node.pool = comm_group_cost(node.pool, target.tp, target.dp_intra)
    assert abs(cost - realized.t_comm_group_init) < 1e-12
    merged = assign_merged_groups(statuses, target.tp, spec.cluster)
    resume = barrier + realized.total
    new_groups: list[_GroupState] = []
    for g, members in enumerate(merged):
        if not members:
            continue
        for m in members:
            m.intra_dp_group = g
        new_groups.append(_GroupState(index=g, samples=members,
                                      agg_tokens=sum(m.context_len for m in members),
                                      clock=resume))
    old_tp = node.tp
    node.tp = target.tp
    node.groups = new_groups
    node.switches.append({
        "round": round_idx,
        "t_start": barrier,
        "t_end": resume,
        "from_tp": old_tp,
        "to_tp": target.tp,
        "t_cur": decision.t_cur,
        "t_best": decision.t_best,
        "samples_moved": len(active),
        "merged_counts": [len(m) for m in merged if m],
        "breakdown": realized.as_dict(),
        "quoted_total": decision.breakdown.total,
        "weight_plan_per_rank_bytes": wplan.total_per_rank_bytes,
        "kv_plan": kv_info,
    })
    node.events.append({"type": "switch", "round": round_idx, "time": barrier,
                        "active": len(active), "tp": target.tp,
                        "detail": f"from=tp{old_tp};to=tp{target.tp};"
                                  f"total={realized.total:.6g};"
                                  f"state={realized.state_method}"})


def _run_node(spec: ScenarioSpec, hw: AnalyticHardwareModel, planner,
              node: _NodeState) -> None:
    controller_on = (spec.controller.enabled and spec.mode != "static")
    naive_mode = spec.mode == "naive-switch"
    interval = spec.controller.eval_interval
    round_idx = 0
    while any(g.samples for g in node.groups):
        stops = [min(s.target_response_len, spec.l_max)
                 for g in node.groups for s in g.samples]
        next_stop = min(stops)
        next_eval = (round_idx // interval + 1) * interval
        r1 = min(next_stop, next_eval, spec.l_max)
        n = r1 - round_idx
        assert n > 0
        node_active = sum(len(g.samples) for g in node.groups)
        for g in node.groups:
            if not g.samples:
                continue
            batch = len(g.samples)
            lat = oracle_decode_latency(
                hw, node.tp, batch,
                g.agg_tokens + batch * np.arange(n, dtype=float))
            ends = g.clock + np.cumsum(lat)
            node.round_ends.append(ends)
            node.round_counts.append((batch, n))
            g.clock = float(ends[-1])
            g.agg_tokens += batch * n
            for s in g.samples:
                s.generated_len += n
        node.events.append({"type": "step-block", "round": r1,
                            "time": max(g.clock for g in node.groups if g.samples),
                            "active": node_active, "tp": node.tp,
                            "detail": f"rounds={round_idx}..{r1}"})
        round_idx = r1
        # completions happen at block boundaries by construction
        completed_here = False
        for g in node.groups:
            finished = [s for s in g.samples
                        if s.generated_len >= min(s.target_response_len, spec.l_max)]
            for s in finished:
                s.status = "finished"
                g.samples.remove(s)
                g.agg_tokens -= s.context_len
                completed_here = True
                node.completions.append((g.clock, s.id))
                node.events.append({"type": "completion", "round": round_idx,
                                    "time": g.clock,
                                    "active": sum(len(x.samples) for x in node.groups),
                                    "tp": node.tp,
                                    "detail": f"sample={s.id};group={g.index}"})
        if not any(g.samples for g in node.groups):
            break
        due = completed_here or (round_idx % interval == 0)
        if controller_on and due and round_idx < spec.l_max:
            statuses = _node_statuses(node)
            decision = evaluate(spec.controller, planner, node.pool, spec.switch,
                                statuses, ParallelConfig.for_cluster(spec.cluster, node.tp),
                                spec.l_max, round_idx, spec.model, spec.cluster,
                                naive_mode=naive_mode)
            node.eval_count += 1
            tgt = decision.target.tp if decision.target else node.tp
            node.events.append({"type": "evaluation", "round": round_idx,
                                "time": max(g.clock for g in node.groups if g.samples),
                                "active": sum(len(g.samples) for g in node.groups),
                                "tp": node.tp,
                                "detail": f"action={decision.action};"
                                          f"t_cur={decision.t_cur:.6g};"
                                          f"t_best={decision.t_best:.6g};"
                                          f"target=tp{tgt}"})
            if decision.action == "switch":
                _commit_switch(spec, hw, node, decision, round_idx, naive_mode)


@dataclass
class TailMetrics:
    decode_duration: float
    aligned_end: float
    aligned_duration: float
    aligned_tokens: int
    aligned_tps: float
    single_sample_start: float
    single_sample_duration: float
    single_sample_fraction: float
    tail_tokens: int
    tail_tps: float
    throughput_ratio: float | None

    def as_dict(self) -> dict:
        return {
            "decode_duration": self.decode_duration,
            "aligned_end": self.aligned_end,
            "aligned_duration": self.aligned_duration,
            "aligned_tokens": self.aligned_tokens,
            "aligned_tps": self.aligned_tps,
            "single_sample_start": self.single_sample_start,
            "single_sample_duration": self.single_sample_duration,
            "single_sample_fraction": self.single_sample_fraction,
            "tail_tokens": self.tail_tokens,
            "tail_tps": self.tail_tps,
            "throughput_ratio": self.throughput_ratio,
        }


def _tokens_in_window(round_ends: list[np.ndarray],
                      round_counts: list[tuple[int, int]],
                      start: float, end: float) -> int:
    """Tokens decoded in (start, end] given per-round end times."""
    total = 0
    for ends, (batch, _) in zip(round_ends, round_counts):
        lo = int(np.searchsorted(ends, start, side="right"))
        hi = int(np.searchsorted(ends, end, side="right"))
        total += batch * (hi - lo)
    return total


def _compute_tail(completions: list[tuple[float, int]], decode_start: float,
                  round_ends: list[np.ndarray],
                  round_counts: list[tuple[int, int]]) -> TailMetrics:
    times = sorted(t for t, _ in completions)
    initial = len(times)
    t_last = times[-1]
    decode_duration = t_last - decode_start
    # aligned phase ends when the active count first drops below half
    drop = initial // 2 + 1  # completions needed for count < initial/2
    aligned_end = times[drop - 1] if drop <= initial else t_last
    single_start = times[-2] if initial >= 2 else decode_start
    single_duration = t_last - single_start
    aligned_duration = aligned_end - decode_start
    aligned_tokens = _tokens_in_window(round_ends, round_counts,
                                       decode_start - 1e-12, aligned_end)
    tail_tokens = _tokens_in_window(round_ends, round_counts, single_start, t_last)
    aligned_tps = aligned_tokens / aligned_duration if aligned_duration > 0 else 0.0
    tail_tps = tail_tokens / single_duration if single_duration > 0 else 0.0
    ratio = aligned_tps / tail_tps if tail_tps > 0 else None
    fraction = single_duration / decode_duration if decode_duration > 0 else 0.0
    return TailMetrics(
        decode_duration=decode_duration, aligned_end=aligned_end,
        aligned_duration=aligned_duration, aligned_tokens=aligned_tokens,
        aligned_tps=aligned_tps, single_sample_start=single_start,
        single_sample_duration=single_duration, single_sample_fraction=fraction,
        tail_tokens=tail_tokens, tail_tps=tail_tps, throughput_ratio=ratio)


@dataclass
class SimReport:
    mode: str
    seed: int
    l_max: int
    global_batch: int
    initial_tp: int
    generation_time: float
    iteration_time: float
    tokens_generated: int
    bubble_time: float
    eval_count: int
    node_reports: list[dict]
    tail_by_node: list[TailMetrics]
    tail_global: TailMetrics

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "l_max": self.l_max,
            "global_batch": self.global_batch,
            "initial_tp": self.initial_tp,
            "generation_time": self.generation_time,
            "iteration_time": self.iteration_time,
            "tokens_generated": self.tokens_generated,
            "bubble_time": self.bubble_time,
            "eval_count": self.eval_count,
            "nodes": self.node_reports,
            "tail_by_node": [t.as_dict() for t in self.tail_by_node],
            "tail_global": self.tail_global.as_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    def timeline_rows(self) -> list[tuple]:
        rows = []
        for nr in self.node_reports:
            for ev in nr["events"]:
                rows.append((ev["time"], nr["node"], ev["type"], ev["active"],
                             ev["tp"], ev["detail"]))
        rows.sort(key=lambda r: (r[0], r[1], r[2]))
        return rows


def run(spec: ScenarioSpec, table: ProfileTable | None = None) -> SimReport:
    """Simulate one generation stage and report timings and tail shape."""
    hw = build_hardware_model(spec)
    planner = None
    if spec.controller.enabled and spec.mode != "static":
        planner, table = _make_planner_view(spec, hw, table)
    nodes = init_scenario(spec)
    all_round_ends: list[np.ndarray] = []
    all_round_counts: list[tuple[int, int]] = []
    node_reports = []
    tail_by_node = []
    completions_all: list[tuple[float, int]] = []
    tokens = 0
    bubble = 0.0
    eval_count = 0
    finish = 0.0
    decode_start_global = None
    for node in nodes:
        _run_node(spec, hw, planner, node)
        ends = node.round_ends
        counts = node.round_counts
        node_tokens = sum(b * n for b, n in counts)
        tokens += node_tokens
        node_finish = max(t for t, _ in node.completions)
        finish = max(finish, node_finish)
        tail = _compute_tail(node.completions, node.decode_start, ends, counts)
        tail_by_node.append(tail)
        completions_all.extend(node.completions)
        all_round_ends.extend(ends)
        all_round_counts.extend(counts)
        bubble += node.bubble_time
        eval_count += node.eval_count
        if decode_start_global is None or node.decode_start < decode_start_global:
            decode_start_global = node.decode_start
        node_reports.append({
            "node": node.node_id,
            "decode_start": node.decode_start,
            "finish_time": node_finish,
            "final_tp": node.tp,
            "bubble_time": node.bubble_time,
            "switches": node.switches,
            "events": node.events,
        })
    expected = sum(min(s.target_response_len, spec.l_max)
                   for node in nodes for s in node.all_samples)
    assert tokens == expected, "decoded token conservation violated"
    tail_global = _compute_tail(completions_all, decode_start_global or 0.0,
                                all_round_ends, all_round_counts)
    return SimReport(
        mode=spec.mode, seed=spec.seed, l_max=spec.l_max,
        global_batch=spec.global_batch, initial_tp=spec.initial_tp,
        generation_time=finish, iteration_time=spec.prep_time + finish + spec.train_time,
        tokens_generated=tokens, bubble_time=bubble, eval_count=eval_count,
        node_reports=node_reports, tail_by_node=tail_by_node,
        tail_global=tail_global)


def tail_metrics(report: SimReport) -> TailMetrics:
    """Global tail metrics of a completed run."""
    return report.tail_global


@dataclass
class ComparisonReport:
    l_max: int
    seed: int
    rows: list[dict]
    best_static_tp: int
    best_static_time: float
    adaptive_time: float
    speedup: float
    iteration_speedup: float
    reference_switch: dict

    def to_json_dict(self) -> dict:
        return {
            "l_max": self.l_max,
            "seed": self.seed,
            "rows": self.rows,
            "best_static_tp": self.best_static_tp,
            "best_static_time": self.best_static_time,
            "adaptive_time": self.adaptive_time,
            "speedup": self.speedup,
            "iteration_speedup": self.iteration_speedup,
            "reference_switch": self.reference_switch,
        }


def reference_switch_costs(spec: ScenarioSpec, table: ProfileTable | None = None
                           ) -> dict:
    """Cost-model probe at the standard reference state.

    Nine in-flight samples at 12288-token context, switching from the
    scenario's initial layout to the largest candidate, with communicators
    already warm.  Reported for both the incremental and restart paths.
    """
    hw = build_hardware_model(spec)
    planner, _ = _make_planner_view(spec, hw, table)
    tps = [c.tp for c in candidate_configs(spec.cluster)]
    tp_src = spec.initial_tp
    try:
        tp_tgt = max(t for t in tps if t != tp_src)
    except ValueError:
        return {}
    samples = [Sample(id=i, prompt_len=512, target_response_len=11776,
                      generated_len=11776, node_id=0)
               for i in range(9)]
    pool = CommGroupPool.fresh(spec.switch.comm_init_cost,
                               warm=((tp_tgt, spec.cluster.gpus_per_node // tp_tgt),))
    quote = total_switch_cost(planner, pool, spec.switch, samples, tp_src,
                              tp_tgt, spec.model, spec.cluster)
    naive = naive_switch_cost(spec.switch.naive)
    return {"tp_src": tp_src, "tp_tgt": tp_tgt,
            "incremental": quote.as_dict(), "naive": naive.as_dict()}


def compare(spec: ScenarioSpec, table: ProfileTable | None = None,
            include_naive: bool = False) -> ComparisonReport:
    """Adaptive against every static layout on identical draws."""
    hw = build_hardware_model(spec)
    if table is None:
        table = build_profile(spec)
    rows = []
    static_times: list[tuple[int, float]] = []
    for cfg in candidate_configs(spec.cluster):
        sspec = replace(spec, mode="static", initial_tp=cfg.tp)
        rep = run(sspec, table)
        static_times.append((cfg.tp, rep.generation_time))
        rows.append(_row_from(rep, "static"))
    aspec = replace(spec, mode="adaptive")
    arep = run(aspec, table)
    rows.append(_row_from(arep, "adaptive"))
    if include_naive:
        nspec = replace(spec, mode="naive-switch")
        nrep = run(nspec, table)
        rows.append(_row_from(nrep, "naive-switch"))
    best_tp, best_time = static_times[0]
    for tp, t in static_times[1:]:
        if t < best_time:
            best_tp, best_time = tp, t
    speedup = best_time / arep.generation_time
    it_speed = ((best_time + spec.prep_time + spec.train_time)
                / arep.iteration_time)
    return ComparisonReport(
        l_max=spec.l_max, seed=spec.seed, rows=rows, best_static_tp=best_tp,
        best_static_time=best_time, adaptive_time=arep.generation_time,
        speedup=speedup, iteration_speedup=it_speed,
        reference_switch=reference_switch_costs(spec, table))


def _row_from(rep: SimReport, mode: str) -> dict:
    switch_total = sum(sw["breakdown"]["total"]
                       for nr in rep.node_reports for sw in nr["switches"])
    switch_count = sum(len(nr["switches"]) for nr in rep.node_reports)
    return {
        "mode": mode,
        "initial_tp": rep.initial_tp,
        "generation_time": rep.generation_time,
        "iteration_time": rep.iteration_time,
        "switches": switch_count,
        "switch_time_total": switch_total,
        "bubble_time": rep.bubble_time,
        "single_sample_fraction": rep.tail_global.single_sample_fraction,
        "tokens_generated": rep.tokens_generated,
    }
