import math

import pytest

from tpshift import (MIGRATE, RECOMPUTE, CommGroupPool, ConfigError,
                     GraphCaptureCalibration, NaiveSwitchCalibration,
                     OracleLatencyModel, Sample, SwitchCostBreakdown,
                     comm_group_cost, graph_recapture_cost, kv_migration_time,
                     kv_send_bytes_per_rank, merged_batch_size,
                     naive_switch_cost, recomputation_time,
                     rms_context_length, state_handling_cost,
                     total_switch_cost, weight_reshard_time)

# nine half-finished samples at 12288-token context, the standard probe
# state for pricing a tp2 -> tp8 transition on the calibrated node
KV_BYTES_PER_RANK_PROBE = 28991029248
KV_MOVE_S_PROBE = 2.3600642500814066
WEIGHT_RESHARD_S_2_TO_8 = 0.9942863275805927


def probe_samples(n=9, ctx=12288, prompt=512):
    return [Sample(id=i, prompt_len=prompt, target_response_len=ctx - prompt,
                   generated_len=ctx - prompt) for i in range(n)]


class FixedPrefill:
    """Predictor stub with a constant prefill answer."""

    def __init__(self, value):
        self.value = value

    def predict_prefill_latency(self, tp, batch, ctx_len):
        return self.value


def test_kv_bytes_probe(a40_config):
    got = kv_send_bytes_per_rank(probe_samples(), a40_config.model, 2)
    assert got == KV_BYTES_PER_RANK_PROBE
    # identity: 9 samples * 2 * 32 layers * 12288 tokens * 2048 dims * 2 B
    assert got == 9 * 2 * 32 * 12288 * (4096 // 2) * 2


def test_kv_bytes_skips_finished(a40_config):
    samples = probe_samples()
    samples[0].status = "finished"
    got = kv_send_bytes_per_rank(samples, a40_config.model, 2)
    assert got == KV_BYTES_PER_RANK_PROBE * 8 // 9


def test_kv_bytes_divisibility(a40_config):
    with pytest.raises(ConfigError):
        kv_send_bytes_per_rank(probe_samples(), a40_config.model, 3)


def test_kv_migration_time(a40_config):
    got = kv_migration_time(KV_BYTES_PER_RANK_PROBE, a40_config.cluster)
    assert got == pytest.approx(KV_MOVE_S_PROBE, rel=1e-12)
    with pytest.raises(ConfigError):
        kv_migration_time(-1, a40_config.cluster)


def test_rms_context_length():
    samples = [Sample(id=0, prompt_len=3, target_response_len=1),
               Sample(id=1, prompt_len=4, target_response_len=1)]
    assert rms_context_length(samples) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(ValueError):
        rms_context_length([])


def test_state_handling_prefers_migrate_long_context(a40_hw, a40_config):
    pred = OracleLatencyModel(a40_hw)
    cost, method = state_handling_cost(pred, probe_samples(), 2, 8,
                                       a40_config.model, a40_config.cluster)
    assert method == MIGRATE
    assert cost == pytest.approx(KV_MOVE_S_PROBE, rel=1e-12)


def test_state_handling_prefers_recompute_on_slow_interconnect(
        tiny_model, tiny_cluster, tiny_hw):
    # with a crawling interconnect, re-prefilling a short context beats
    # shipping the cache
    from dataclasses import replace
    slow = replace(tiny_cluster, intra_bw_unidir=1e6)
    samples = probe_samples(n=9, ctx=64, prompt=16)
    pred = OracleLatencyModel(tiny_hw)
    cost, method = state_handling_cost(pred, samples, 2, 8, tiny_model, slow)
    assert method == RECOMPUTE
    assert cost == pytest.approx(recomputation_time(pred, samples, 8), rel=1e-12)
    move = kv_migration_time(kv_send_bytes_per_rank(samples, tiny_model, 2), slow)
    assert cost < move


def test_state_handling_tie_migrates(a40_config):
    samples = probe_samples(n=4, ctx=1024)
    move = kv_migration_time(
        kv_send_bytes_per_rank(samples, a40_config.model, 2),
        a40_config.cluster)
    cost, method = state_handling_cost(FixedPrefill(move), samples, 2, 8,
                                       a40_config.model, a40_config.cluster)
    assert method == MIGRATE
    assert cost == pytest.approx(move)


def test_weight_reshard_times(a40_config):
    model, cluster = a40_config.model, a40_config.cluster
    assert weight_reshard_time(model, 8, cluster) == pytest.approx(
        WEIGHT_RESHARD_S_2_TO_8, rel=1e-12)
    assert weight_reshard_time(model, 1, cluster) == 0.0
    # receive fraction is (tp-1)/tp regardless of source degree
    t2 = weight_reshard_time(model, 2, cluster)
    t4 = weight_reshard_time(model, 4, cluster)
    assert t4 / t2 == pytest.approx((3 / 4) / (1 / 2))


def test_graph_recapture_bucket_rule():
    calib = GraphCaptureCalibration()
    cases = {1: 1, 2: 2, 3: 3, 4: 3, 8: 4, 9: 5, 16: 5, 17: 6, 32: 6}
    for merged, buckets in cases.items():
        assert graph_recapture_cost(calib, merged) == pytest.approx(
            0.146 * buckets), merged
    assert graph_recapture_cost(calib, 33) == 0.0
    assert graph_recapture_cost(calib, 128) == 0.0
    with pytest.raises(ConfigError):
        graph_recapture_cost(calib, 0)


def test_graph_calib_validation():
    with pytest.raises(ConfigError):
        GraphCaptureCalibration(capture_buckets=(4, 2, 1))
    with pytest.raises(ConfigError):
        GraphCaptureCalibration(capture_buckets=())
    with pytest.raises(ConfigError):
        GraphCaptureCalibration(cost_per_bucket=-0.1)


def test_comm_pool_grows_only():
    pool = CommGroupPool.fresh(0.3, warm=((2, 4),))
    cost, same = comm_group_cost(pool, 2, 4)
    assert cost == 0.0 and same is pool
    cost, grown = comm_group_cost(pool, 8, 1)
    assert cost == 0.3
    assert (8, 1) in grown.initialized
    # quotes never mutate: the original pool is unchanged
    assert (8, 1) not in pool.initialized
    cost2, again = comm_group_cost(grown, 8, 1)
    assert cost2 == 0.0 and again is grown


def test_merged_batch_size(a40_config):
    cluster = a40_config.cluster
    assert merged_batch_size(9, 8, cluster) == 9    # dp 1
    assert merged_batch_size(9, 2, cluster) == 3    # dp 4
    assert merged_batch_size(8, 4, cluster) == 4    # dp 2
    assert merged_batch_size(1, 1, cluster) == 1    # dp 8


def test_total_switch_cost_probe(a40_hw, a40_config):
    pred = OracleLatencyModel(a40_hw)
    pool = CommGroupPool.fresh(a40_config.switch.comm_init_cost,
                               warm=((8, 1),))
    bd = total_switch_cost(pred, pool, a40_config.switch, probe_samples(),
                           2, 8, a40_config.model, a40_config.cluster)
    assert bd.state_method == MIGRATE
    assert bd.t_state_handling == pytest.approx(KV_MOVE_S_PROBE, rel=1e-12)
    assert bd.t_weight_reshard == pytest.approx(WEIGHT_RESHARD_S_2_TO_8, rel=1e-12)
    assert bd.t_graph_recapture == pytest.approx(0.73)
    assert bd.t_comm_group_init == 0.0
    assert bd.t_fixed_control == pytest.approx(1.40)
    assert bd.total == pytest.approx(sum([
        bd.t_state_handling, bd.t_weight_reshard, bd.t_graph_recapture,
        bd.t_comm_group_init, bd.t_fixed_control]))


def test_total_switch_cost_cold_pool_pays_init(a40_hw, a40_config):
    pred = OracleLatencyModel(a40_hw)
    pool = CommGroupPool.fresh(a40_config.switch.comm_init_cost)
    bd = total_switch_cost(pred, pool, a40_config.switch, probe_samples(),
                           2, 8, a40_config.model, a40_config.cluster)
    assert bd.t_comm_group_init == pytest.approx(0.30)
    # quoting must not warm the pool
    assert (8, 1) not in pool.initialized


def test_total_switch_cost_rejects_identity(a40_hw, a40_config):
    pred = OracleLatencyModel(a40_hw)
    pool = CommGroupPool.fresh(0.3)
    with pytest.raises(ConfigError):
        total_switch_cost(pred, pool, a40_config.switch, probe_samples(),
                          2, 2, a40_config.model, a40_config.cluster)


def test_naive_switch_cost(a40_config):
    bd = naive_switch_cost(a40_config.switch.naive)
    assert bd.t_state_handling == pytest.approx(19.01)
    assert bd.t_weight_reshard == pytest.approx(7.47)
    assert bd.t_graph_recapture == pytest.approx(3.59)
    assert bd.t_comm_group_init == 0.0
    assert bd.t_fixed_control == pytest.approx(28.91)
    assert bd.total == pytest.approx(58.98)
    assert bd.state_method == RECOMPUTE


def test_naive_mode_flag(a40_hw, a40_config):
    pred = OracleLatencyModel(a40_hw)
    pool = CommGroupPool.fresh(0.3)
    bd = total_switch_cost(pred, pool, a40_config.switch, probe_samples(),
                           2, 8, a40_config.model, a40_config.cluster,
                           naive_mode=True)
    assert bd.total == pytest.approx(58.98)


def test_breakdown_consistency_enforced():
    with pytest.raises(ConfigError):
        SwitchCostBreakdown(t_state_handling=1.0, state_method=MIGRATE,
                            t_weight_reshard=1.0, t_graph_recapture=0.0,
                            t_comm_group_init=0.0, t_fixed_control=0.0,
                            total=3.0)
    with pytest.raises(ConfigError):
        SwitchCostBreakdown.build(-1.0, MIGRATE, 0.0, 0.0, 0.0, 2.0)
    with pytest.raises(ConfigError):
        SwitchCostBreakdown.build(1.0, "teleport", 0.0, 0.0, 0.0, 0.0)
    bd = SwitchCostBreakdown.build(1.0, MIGRATE, 0.5, 0.25, 0.0, 0.1)
    assert bd.total == pytest.approx(1.85)
    assert set(bd.as_dict()) == {
        "t_state_handling", "state_method", "t_weight_reshard",
        "t_graph_recapture", "t_comm_group_init", "t_fixed_control", "total"}


def test_naive_calibration_validation():
    with pytest.raises(ConfigError):
        NaiveSwitchCalibration(state_s=10.0, weight_s=10.0, recapture_s=10.0,
                               total_s=20.0)
    calib = NaiveSwitchCalibration()
    assert calib.residual_s == pytest.approx(58.98 - 19.01 - 7.47 - 3.59)
