"""Experiment configuration files.

Experiments are described by INI files.  A config names the model and
cluster geometry, the calibration constants of the timing model and the
switch-cost model, the response-length workload, the controller settings,
and the default scenario.  Shipped presets live in the package's
``presets/`` directory; ``TPSHIFT_CONFIG_DIR`` can point at a directory
of additional configs that is searched first.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path

from .cluster import ClusterSpec, ModelSpec
from .controller import ControllerParams
from .engine import ScenarioSpec
from .errors import ConfigError
from .latency import OracleCalibration
from .switchcost import (GraphCaptureCalibration, NaiveSwitchCalibration,
                         SwitchCalibration)
from .workload import LengthDistribution, load_trace

_REQUIRED = object()


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    model: ModelSpec
    cluster: ClusterSpec
    oracle: OracleCalibration
    switch: SwitchCalibration
    controller: ControllerParams
    distribution: LengthDistribution
    scenario_defaults: dict
    sweep_l_max: tuple[int, ...]


def _get(parser: configparser.ConfigParser, section: str, key: str, conv,
         default=_REQUIRED):
    if not parser.has_option(section, key):
        if default is _REQUIRED:
            raise ConfigError(f"missing required key [{section}] {key}")
        return default
    raw = parser.get(section, key)
    try:
        return conv(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc


def _to_bool(raw: str) -> bool:
    val = raw.strip().lower()
    if val in ("1", "true", "yes", "on"):
        return True
    if val in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _to_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(v.strip()) for v in raw.split(",") if v.strip())


def _load_distribution(parser: configparser.ConfigParser,
                       base_dir: Path) -> LengthDistribution:
    kind = _get(parser, "workload", "kind", str, "mixture").strip()
    if kind in ("mixture", "two-component-mixture"):
        return LengthDistribution.mixture(
            mu=_get(parser, "workload", "mu", float),
            sigma=_get(parser, "workload", "sigma", float),
            mu2=_get(parser, "workload", "mu2", float),
            sigma2=_get(parser, "workload", "sigma2", float),
            tail_weight=_get(parser, "workload", "tail_weight", float),
            max_len_cap=_get(parser, "workload", "max_len_cap", int),
        )
    if kind == "lognormal":
        return LengthDistribution.lognormal(
            mu=_get(parser, "workload", "mu", float),
            sigma=_get(parser, "workload", "sigma", float),
            max_len_cap=_get(parser, "workload", "max_len_cap", int),
        )
    if kind in ("trace", "empirical-cdf"):
        rel = _get(parser, "workload", "path", str)
        path = Path(rel)
        if not path.is_absolute():
            path = base_dir / path
        return load_trace(str(path))
    raise ConfigError(f"unknown workload kind {kind!r}")


def parse_config(path: str | Path, name: str | None = None) -> ExperimentConfig:
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in ("model", "cluster", "oracle"):
        if not parser.has_section(section):
            raise ConfigError(f"config {path} is missing the [{section}] section")

    model = ModelSpec(
        name=_get(parser, "model", "name", str, path.stem),
        num_layers=_get(parser, "model", "num_layers", int),
        hidden_dim=_get(parser, "model", "hidden_dim", int),
        bytes_per_elem=_get(parser, "model", "bytes_per_elem", int, 2),
        layer_param_bytes=_get(parser, "model", "layer_param_bytes", int),
    )
    cluster = ClusterSpec(
        num_nodes=_get(parser, "cluster", "num_nodes", int, 1),
        gpus_per_node=_get(parser, "cluster", "gpus_per_node", int, 8),
        intra_bw_unidir=_get(parser, "cluster", "intra_bw_unidir", float),
        kv_tokens_per_gpu=_get(parser, "cluster", "kv_tokens_per_gpu", int),
        hbm_bw=_get(parser, "cluster", "hbm_bw", float),
        peak_flops=_get(parser, "cluster", "peak_flops", float),
        per_layer_tp_comm_base=_get(parser, "cluster", "per_layer_tp_comm_base",
                                    float),
    )
    oracle = OracleCalibration(
        kernel_overhead_base=_get(parser, "oracle", "kernel_overhead_base", float),
        tile_quantum=_get(parser, "oracle", "tile_quantum", int, 8),
        kv_bytes_per_token=_get(parser, "oracle", "kv_bytes_per_token", float, None),
        noise_rel=_get(parser, "oracle", "noise_rel", float, 0.0),
        prefill_quad=_get(parser, "oracle", "prefill_quad", float, 7.0631e-8),
        prefill_lin=_get(parser, "oracle", "prefill_lin", float, 5.0e-4),
        prefill_const=_get(parser, "oracle", "prefill_const", float, 0.1),
    )
    graph = GraphCaptureCalibration(
        capture_buckets=_get(parser, "graph", "capture_buckets", _to_int_list,
                             GraphCaptureCalibration().capture_buckets),
        cost_per_bucket=_get(parser, "graph", "cost_per_bucket", float,
                             GraphCaptureCalibration().cost_per_bucket),
        small_batch_threshold=_get(parser, "graph", "small_batch_threshold", int,
                                   GraphCaptureCalibration().small_batch_threshold),
    )
    naive_defaults = NaiveSwitchCalibration()
    naive = NaiveSwitchCalibration(
        state_s=_get(parser, "naive", "state_s", float, naive_defaults.state_s),
        weight_s=_get(parser, "naive", "weight_s", float, naive_defaults.weight_s),
        recapture_s=_get(parser, "naive", "recapture_s", float,
                         naive_defaults.recapture_s),
        total_s=_get(parser, "naive", "total_s", float, naive_defaults.total_s),
    )
    switch = SwitchCalibration(
        graph=graph,
        comm_init_cost=_get(parser, "switch", "comm_init_cost", float, 0.30),
        t_fixed_control=_get(parser, "switch", "t_fixed_control", float, 1.40),
        naive=naive,
    )
    controller = ControllerParams(
        tp_list=_get(parser, "controller", "tp_list", _to_int_list,
                     ControllerParams().tp_list),
        eval_interval=_get(parser, "controller", "eval_interval", int,
                           ControllerParams().eval_interval),
        enabled=_get(parser, "controller", "enabled", _to_bool, True),
        chunk_steps=_get(parser, "controller", "chunk_steps", int,
                         ControllerParams().chunk_steps),
        use_exact_predictor=_get(parser, "controller", "use_exact_predictor",
                                 _to_bool, False),
    )
    distribution = _load_distribution(parser, path.parent)
    scenario_defaults = {
        "prompt_len": _get(parser, "scenario", "prompt_len", int, 512),
        "global_batch": _get(parser, "scenario", "global_batch", int, 128),
        "l_max": _get(parser, "scenario", "l_max", int, 16384),
        "initial_tp": _get(parser, "scenario", "initial_tp", int, 2),
        "seed": _get(parser, "scenario", "seed", int, 0),
        "prep_time": _get(parser, "scenario", "prep_time", float, 20.0),
        "train_time": _get(parser, "scenario", "train_time", float, 40.0),
        "mode": _get(parser, "scenario", "mode", str, "adaptive"),
    }
    sweep = _get(parser, "sweep", "l_max_values", _to_int_list,
                 (6144, 8192, 12288, 16384))
    return ExperimentConfig(
        name=name or path.stem, model=model, cluster=cluster, oracle=oracle,
        switch=switch, controller=controller, distribution=distribution,
        scenario_defaults=scenario_defaults, sweep_l_max=sweep)


def _preset_dir():
    return resources.files(__package__) / "presets"


def list_presets() -> list[str]:
    names = []
    env_dir = os.environ.get("TPSHIFT_CONFIG_DIR")
    if env_dir and Path(env_dir).is_dir():
        names += [p.stem for p in sorted(Path(env_dir).glob("*.cfg"))]
    for entry in _preset_dir().iterdir():
        if entry.name.endswith(".cfg"):
            names.append(entry.name[:-4])
    seen = set()
    out = []
    for n in names:
        if n not in seen:
            seen.add(n)
            out.append(n)
    return out


def load_config(name_or_path: str) -> ExperimentConfig:
    """Resolve a config by filesystem path or preset name."""
    direct = Path(name_or_path)
    if direct.is_file():
        return parse_config(direct)
    stem = name_or_path[:-4] if name_or_path.endswith(".cfg") else name_or_path
    env_dir = os.environ.get("TPSHIFT_CONFIG_DIR")
    if env_dir:
        candidate = Path(env_dir) / f"{stem}.cfg"
        if candidate.is_file():
            return parse_config(candidate, name=stem)
    packaged = _preset_dir() / f"{stem}.cfg"
    if packaged.is_file():
        with resources.as_file(packaged) as real:
            return parse_config(real, name=stem)
    raise ConfigError(
        f"no config named {name_or_path!r}; known presets: "
        f"{', '.join(list_presets())}")


def build_scenario(cfg: ExperimentConfig, **overrides) -> ScenarioSpec:
    """Instantiate the config's default scenario, with keyword overrides."""
    fields = dict(cfg.scenario_defaults)
    controller = cfg.controller
    for key, val in overrides.items():
        if val is None:
            continue
        if key in fields:
            fields[key] = val
        elif key == "eval_interval":
            controller = replace(controller, eval_interval=val)
        elif key == "controller":
            controller = val
        else:
            raise ConfigError(f"unknown scenario override {key!r}")
    return ScenarioSpec(
        model=cfg.model, cluster=cfg.cluster, distribution=cfg.distribution,
        oracle=cfg.oracle, switch=cfg.switch, controller=controller, **fields)
