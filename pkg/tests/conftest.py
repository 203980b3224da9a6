import pytest

from tpshift import (AnalyticHardwareModel, ClusterSpec, ControllerParams,
                     GraphCaptureCalibration, LengthDistribution, ModelSpec,
                     NaiveSwitchCalibration, OracleCalibration,
                     SwitchCalibration, load_config)


@pytest.fixture(scope="session")
def a40_config():
    return load_config("paper_a40")


@pytest.fixture(scope="session")
def a40_hw(a40_config):
    return AnalyticHardwareModel(cluster=a40_config.cluster,
                                 model=a40_config.model,
                                 calib=a40_config.oracle)


@pytest.fixture
def tiny_model():
    # 2 layers * 8192 B keeps reshard volumes readable by hand
    return ModelSpec(name="tiny", num_layers=2, hidden_dim=64,
                     bytes_per_elem=2, layer_param_bytes=8192)


@pytest.fixture
def tiny_cluster():
    return ClusterSpec(num_nodes=1, gpus_per_node=8, intra_bw_unidir=1e9,
                       kv_tokens_per_gpu=65536, hbm_bw=1e12, peak_flops=1e14,
                       per_layer_tp_comm_base=1e-5)


@pytest.fixture
def tiny_calib():
    return OracleCalibration(kernel_overhead_base=5e-4)


@pytest.fixture
def tiny_hw(tiny_cluster, tiny_model, tiny_calib):
    return AnalyticHardwareModel(cluster=tiny_cluster, model=tiny_model,
                                 calib=tiny_calib)


@pytest.fixture
def tiny_switch_calib():
    return SwitchCalibration(
        graph=GraphCaptureCalibration(capture_buckets=(1, 2, 4),
                                      cost_per_bucket=0.01,
                                      small_batch_threshold=4),
        comm_init_cost=0.02,
        t_fixed_control=0.05,
        naive=NaiveSwitchCalibration(state_s=1.0, weight_s=0.5,
                                     recapture_s=0.25, total_s=3.0),
    )


@pytest.fixture
def flat_dist():
    # every draw lands on the single point: deterministic targets
    def make(length):
        return LengthDistribution.empirical([(length, 1.0)], max_len_cap=length)
    return make


@pytest.fixture
def quiet_controller():
    return ControllerParams(enabled=False)
