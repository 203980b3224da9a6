import numpy as np
import pytest

from tpshift import (BatchStatus, CommGroupPool, ConfigError,
                     ControllerParams, OracleLatencyModel, ParallelConfig,
                     Sample, assign_merged_groups, compute_merged_bs,
                     est_rem_time, evaluate, oracle_decode_latency)


def make_group(node, idx, count, ctx, first_id=0):
    samples = tuple(
        Sample(id=first_id + i, prompt_len=ctx, target_response_len=1,
               node_id=node, intra_dp_group=idx)
        for i in range(count))
    return BatchStatus(node_id=node, group_index=idx, samples=samples)


class LinearPred:
    """Latency = base + slope * agg_tokens, independent of tp and batch."""

    def __init__(self, base=1e-3, slope=1e-7):
        self.base = base
        self.slope = slope

    def predict_decode_latency(self, tp, batch, agg_tokens):
        t = np.asarray(agg_tokens, dtype=float)
        out = self.base + self.slope * t
        return float(out) if np.ndim(agg_tokens) == 0 else out

    def predict_prefill_latency(self, tp, batch, ctx_len):
        return 0.5


def test_est_rem_exact_at_chunk_one(a40_hw):
    pred = OracleLatencyModel(a40_hw)
    st = make_group(0, 0, 3, 700)
    l_max, l_gen = 1320, 1230
    got = est_rem_time(pred, 2, [st], l_max, l_gen, chunk_steps=1)
    base = st.aggregate_tokens
    want = sum(oracle_decode_latency(a40_hw, 2, 3, float(base + 3 * r))
               for r in range(l_max - l_gen))
    assert got == pytest.approx(want, rel=1e-12)


def test_est_rem_chunked_close_to_exact(a40_hw):
    pred = OracleLatencyModel(a40_hw)
    st = make_group(0, 0, 4, 900)
    exact = est_rem_time(pred, 4, [st], 4096, 512, chunk_steps=1)
    chunked = est_rem_time(pred, 4, [st], 4096, 512, chunk_steps=64)
    # the oracle is near-linear in aggregate tokens, so midpoint chunking
    # stays within a fraction of a percent
    assert chunked == pytest.approx(exact, rel=5e-3)


def test_est_rem_midpoint_exact_for_linear_model():
    pred = LinearPred()
    st = make_group(0, 0, 2, 100)
    exact = est_rem_time(pred, 2, [st], 1000, 0, chunk_steps=1)
    chunked = est_rem_time(pred, 2, [st], 1000, 0, chunk_steps=97)
    assert chunked == pytest.approx(exact, rel=1e-12)


def test_est_rem_takes_slowest_group():
    pred = LinearPred()
    small = make_group(0, 0, 1, 100)
    big = make_group(0, 1, 7, 100, first_id=10)
    both = est_rem_time(pred, 2, [small, big], 500, 0)
    alone = est_rem_time(pred, 2, [big], 500, 0)
    assert both == pytest.approx(alone)


def test_est_rem_ignores_empty_groups():
    pred = LinearPred()
    empty = BatchStatus(node_id=0, group_index=0, samples=())
    st = make_group(0, 1, 2, 50)
    assert est_rem_time(pred, 2, [empty, st], 100, 0) == \
        est_rem_time(pred, 2, [st], 100, 0)


def test_est_rem_requires_remaining_rounds():
    with pytest.raises(ConfigError):
        est_rem_time(LinearPred(), 2, [make_group(0, 0, 1, 10)], 100, 100)


def test_compute_merged_bs(tiny_cluster):
    # identity keeps the imbalance, merges rebalance to within one
    assert compute_merged_bs([3, 3, 2, 2], 2, tiny_cluster) == [3, 3, 2, 2]
    assert compute_merged_bs([3, 3, 2, 2], 4, tiny_cluster) == [5, 5]
    assert compute_merged_bs([3, 3, 2, 2], 8, tiny_cluster) == [10]
    assert compute_merged_bs([3, 3, 2, 2], 1, tiny_cluster) == \
        [2, 2, 1, 1, 1, 1, 1, 1]
    assert compute_merged_bs([9], 2, tiny_cluster) == [3, 2, 2, 2]


def test_compute_merged_bs_validation(tiny_cluster):
    with pytest.raises(ConfigError):
        compute_merged_bs([], 2, tiny_cluster)
    with pytest.raises(ConfigError):
        compute_merged_bs([1, 1, 1], 2, tiny_cluster)
    with pytest.raises(ConfigError):
        compute_merged_bs([1, 1], 3, tiny_cluster)


def test_assign_merged_groups_balanced(tiny_cluster):
    statuses = [make_group(0, g, c, 64 * (g + 1), first_id=10 * g)
                for g, c in enumerate([3, 3, 2, 2])]
    merged = assign_merged_groups(statuses, 4, tiny_cluster)
    assert [len(g) for g in merged] == compute_merged_bs([3, 3, 2, 2], 4,
                                                         tiny_cluster)
    # every sample appears exactly once
    ids = sorted(s.id for g in merged for s in g)
    assert ids == sorted(s.id for st in statuses for s in st.samples)
    # token load within one sample's context of even
    loads = [sum(s.context_len for s in g) for g in merged]
    assert max(loads) - min(loads) <= 256


def test_assign_does_not_mutate_samples(tiny_cluster):
    statuses = [make_group(0, 0, 4, 128)]
    before = [s.intra_dp_group for s in statuses[0].samples]
    assign_merged_groups(statuses, 1, tiny_cluster)
    assert [s.intra_dp_group for s in statuses[0].samples] == before


def test_assign_deterministic(tiny_cluster):
    statuses = [make_group(0, g, 3, 100 + 7 * g, first_id=10 * g)
                for g in range(4)]
    a = assign_merged_groups(statuses, 2, tiny_cluster)
    b = assign_merged_groups(statuses, 2, tiny_cluster)
    assert [[s.id for s in g] for g in a] == [[s.id for s in g] for g in b]


def eval_args(cfg, statuses, current_tp, l_gen, l_max=16384, params=None,
              pred=None, naive=False):
    pool = CommGroupPool.fresh(cfg.switch.comm_init_cost,
                               warm=((current_tp,
                                      cfg.cluster.gpus_per_node // current_tp),))
    return dict(params=params or cfg.controller,
                pred=pred, pool=pool, calib=cfg.switch, statuses=statuses,
                current=ParallelConfig.for_cluster(cfg.cluster, current_tp),
                l_max=l_max, l_gen=l_gen, model=cfg.model,
                cluster=cfg.cluster, naive_mode=naive)


def test_evaluate_stays_on_full_batch(a40_config, a40_hw):
    # 32 per group at tp2: communication-heavy wider layouts lose
    statuses = [make_group(0, g, 32, 1024, first_id=100 * g) for g in range(4)]
    args = eval_args(a40_config, statuses, 2, 512, pred=OracleLatencyModel(a40_hw))
    decision = evaluate(**args)
    assert decision.action == "stay"
    assert decision.target is None
    assert decision.breakdown is None
    assert {c.tp for c in decision.evaluated} == {1, 2, 4, 8}


def test_evaluate_switches_lone_straggler(a40_config, a40_hw):
    # one sample with thousands of rounds left: wide TP pays for itself
    statuses = [make_group(0, 0, 1, 12288)]
    args = eval_args(a40_config, statuses, 2, 12288 - 512,
                     pred=OracleLatencyModel(a40_hw))
    decision = evaluate(**args)
    assert decision.action == "switch"
    assert decision.target.tp == 8
    assert decision.breakdown is not None
    assert decision.t_cur > decision.t_best
    cur = next(c for c in decision.evaluated if c.tp == 2)
    best = next(c for c in decision.evaluated if c.tp == 8)
    assert best.t_total < cur.t_total


def test_evaluate_tie_prefers_smaller_tp(a40_config):
    # flat predictor: every layout sees identical remaining time, so no
    # switch clears its cost and the ranking falls back to degree order
    statuses = [make_group(0, 0, 4, 4096)]
    args = eval_args(a40_config, statuses, 4, 1024, pred=LinearPred(slope=0.0))
    decision = evaluate(**args)
    assert decision.action == "stay"
    nonswitch = [c for c in decision.evaluated if c.t_switch == 0.0]
    assert [c.tp for c in nonswitch] == [4]
    # among equal totals the first (smallest tp) candidate is kept
    assert decision.t_best == pytest.approx(
        min(c.t_total for c in decision.evaluated))


def test_evaluate_skips_nondivisor_degrees(a40_config, a40_hw):
    from dataclasses import replace
    narrow_cluster = replace(a40_config.cluster, gpus_per_node=4)
    statuses = [make_group(0, 0, 2, 512)]
    pool = CommGroupPool.fresh(0.3, warm=((2, 2),))
    decision = evaluate(a40_config.controller, LinearPred(), pool,
                        a40_config.switch, statuses,
                        ParallelConfig.for_cluster(narrow_cluster, 2),
                        4096, 128, a40_config.model, narrow_cluster)
    assert {c.tp for c in decision.evaluated} == {1, 2, 4}


def test_evaluate_naive_mode_uses_restart_costs(a40_config, a40_hw):
    statuses = [make_group(0, 0, 1, 12288)]
    args = eval_args(a40_config, statuses, 2, 12288 - 512,
                     pred=OracleLatencyModel(a40_hw), naive=True)
    decision = evaluate(**args)
    switched = [c for c in decision.evaluated if c.tp != 2]
    assert all(c.t_switch == pytest.approx(58.98) for c in switched)


def test_evaluate_requires_active_samples(a40_config):
    empty = BatchStatus(node_id=0, group_index=0, samples=())
    args = eval_args(a40_config, [empty], 2, 100, pred=LinearPred())
    with pytest.raises(ConfigError):
        evaluate(**args)


def test_controller_params_validation():
    with pytest.raises(ConfigError):
        ControllerParams(tp_list=())
    with pytest.raises(ConfigError):
        ControllerParams(tp_list=(4, 2))
    with pytest.raises(ConfigError):
        ControllerParams(eval_interval=0)
    with pytest.raises(ConfigError):
        ControllerParams(chunk_steps=0)
