"""Planning simulator for adaptive tensor-parallel reconfiguration.

During the generation stage of RL fine-tuning, a batch drains until a few
long-tail samples hold the whole node; the per-step arithmetic then favors
a different tensor-parallel width than the full batch did.  This package
models that regime: a synthetic but shape-faithful hardware timing model,
an offline latency profile and interpolating predictor, an incremental
switch-cost model (KV migration or recompute, weight resharding, graph
recapture, communicator setup), reshard planning with verifiable layouts,
the online controller that decides when switching pays, and a
discrete-event engine that replays whole generation stages under static,
adaptive, and restart-style switching policies.
"""

from .cluster import (SUPPORTED_TP, ClusterSpec, ModelSpec, ParallelConfig,
                      candidate_configs, token_budget)
from .config import (ExperimentConfig, build_scenario, list_presets,
                     load_config, parse_config)
from .controller import (CandidateEval, ControllerParams, SwitchDecision,
                         assign_merged_groups, compute_merged_bs, est_rem_time,
                         evaluate)
from .engine import (ComparisonReport, ScenarioSpec, SimReport, TailMetrics,
                     build_hardware_model, build_profile, compare,
                     init_scenario, reference_switch_costs, run, tail_metrics)
from .errors import (ConfigError, PlanVerificationError, ProfileLookupError,
                     ScenarioError, TpshiftError, TraceParseError)
from .latency import (AnalyticHardwareModel, LatencyPredictor,
                      OracleCalibration, OracleLatencyModel, ProfilePoint,
                      ProfileTable, build_profile_grid, fit_predictor,
                      load_table, oracle_decode_latency,
                      oracle_prefill_latency, predict_decode_latency,
                      predict_prefill_latency, profile_batches,
                      profile_lengths, run_profiler, save_table)
from .reshard import (PlanStep, ReshardPlan, ShardLayout, peak_extra_memory,
                      plan_kv_migration, plan_weight_reshard, verify_plan)
from .switchcost import (MIGRATE, RECOMPUTE, CommGroupPool,
                         GraphCaptureCalibration, NaiveSwitchCalibration,
                         SwitchCalibration, SwitchCostBreakdown,
                         comm_group_cost, graph_recapture_cost,
                         kv_migration_time, kv_send_bytes_per_rank,
                         merged_batch_size, naive_switch_cost,
                         recomputation_time, rms_context_length,
                         state_handling_cost, total_switch_cost,
                         weight_reshard_time)
from .workload import (BatchStatus, LengthDistribution, Sample,
                       aggregate_tokens, load_trace, sample_response_lengths)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
