"""Model geometry and cluster topology.

Parallelism follows the usual serving layout for mid-size dense models:
tensor parallelism (TP) stays inside a node, data parallelism fills the
remaining intra-node GPUs (dp_intra) and spans nodes (dp_inter).  Only the
intra-node split is ever reconfigured; the inter-node replication is fixed
for the lifetime of a generation stage.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError

SUPPORTED_TP = (1, 2, 4, 8)


@dataclass(frozen=True)
class ModelSpec:
    """Geometry of the served model, reduced to what the cost models need."""

    name: str
    num_layers: int
    hidden_dim: int
    bytes_per_elem: int
    layer_param_bytes: int

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.bytes_per_elem not in (1, 2, 4):
            raise ConfigError(
                f"bytes_per_elem must be one of 1, 2, 4, got {self.bytes_per_elem}"
            )
        if self.layer_param_bytes < 1:
            raise ConfigError("layer_param_bytes must be positive")

    @property
    def weight_bytes(self) -> int:
        """Total transformer-layer weight bytes."""
        return self.num_layers * self.layer_param_bytes

    @property
    def kv_bytes_per_token(self) -> int:
        """Unsharded KV-cache bytes per token (K and V, all layers)."""
        return 2 * self.num_layers * self.hidden_dim * self.bytes_per_elem


@dataclass(frozen=True)
class ClusterSpec:
    """A homogeneous cluster of identical multi-GPU nodes.

    intra_bw_unidir is the effective one-way per-rank bandwidth seen by
    intra-node collectives, in bytes/s.  hbm_bw, peak_flops and
    per_layer_tp_comm_base parameterize the analytic hardware model; they
    are calibrated constants, not datasheet values.
    """

    num_nodes: int
    gpus_per_node: int
    intra_bw_unidir: float
    kv_tokens_per_gpu: int
    hbm_bw: float
    peak_flops: float
    per_layer_tp_comm_base: float

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ConfigError(f"num_nodes must be >= 1, got {self.num_nodes}")
        if self.gpus_per_node not in (1, 2, 4, 8):
            raise ConfigError(
                "gpus_per_node must be a power of two in [1, 8], "
                f"got {self.gpus_per_node}"
            )
        for field in ("intra_bw_unidir", "hbm_bw", "peak_flops"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{field} must be positive")
        if self.kv_tokens_per_gpu < 1:
            raise ConfigError("kv_tokens_per_gpu must be positive")
        if self.per_layer_tp_comm_base < 0:
            raise ConfigError("per_layer_tp_comm_base must be non-negative")


@dataclass(frozen=True)
class ParallelConfig:
    """One intra-node parallel layout: tp * dp_intra == gpus_per_node."""

    tp: int
    dp_intra: int
    dp_inter: int

    def __post_init__(self):
        if self.tp not in SUPPORTED_TP:
            raise ConfigError(f"tp must be one of {SUPPORTED_TP}, got {self.tp}")
        if self.dp_intra < 1 or self.dp_inter < 1:
            raise ConfigError("dp_intra and dp_inter must be >= 1")

    @classmethod
    def for_cluster(cls, cluster: ClusterSpec, tp: int) -> "ParallelConfig":
        if tp not in SUPPORTED_TP:
            raise ConfigError(f"tp must be one of {SUPPORTED_TP}, got {tp}")
        if cluster.gpus_per_node % tp != 0:
            raise ConfigError(
                f"tp={tp} does not divide gpus_per_node={cluster.gpus_per_node}"
            )
        return cls(tp=tp, dp_intra=cluster.gpus_per_node // tp,
                   dp_inter=cluster.num_nodes)

    @property
    def label(self) -> str:
        return f"tp{self.tp}dp{self.dp_intra}"


def candidate_configs(cluster: ClusterSpec) -> list[ParallelConfig]:
    """All admissible intra-node layouts, ascending by tp."""
    out = []
    for tp in SUPPORTED_TP:
        if tp <= cluster.gpus_per_node and cluster.gpus_per_node % tp == 0:
            out.append(ParallelConfig.for_cluster(cluster, tp))
    return out


def token_budget(cluster: ClusterSpec, config: ParallelConfig | None = None) -> int:
    """Node-level KV token capacity.

    The budget is a property of the node, independent of how the GPUs are
    split: resharding moves cache shards around but cannot create capacity.
    The config argument is accepted for interface symmetry.
    """
    return cluster.kv_tokens_per_gpu * cluster.gpus_per_node
