"""Synthetic hardware timing and the profiled latency predictor.

Two layers live here and they are deliberately distinct:

  * AnalyticHardwareModel is the ground truth the simulator charges time
    against.  Decode steps cost the max of a memory-traffic term and a
    compute term, plus a TP-communication term that grows with the
    tile-quantized batch and a kernel overhead term with the sawtooth
    shape real launch/padding effects produce.  Per-token decode latency
    therefore falls with TP at small batch (weight traffic shards) and
    rises with TP at large batch (communication dominates), and grows
    near-linearly with the aggregate KV tokens in flight.
  * LatencyPredictor is what planning code is allowed to see: per
    (tp, batch) piecewise-linear curves fitted to an offline profile grid,
    exact at grid points, interpolating between profiled batches, with
    clamped extrapolation beyond the grid.

Keeping the two apart means prediction error is a measurable quantity
rather than an accident of shared code.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .cluster import ClusterSpec, ModelSpec, ParallelConfig
from .errors import ConfigError, ProfileLookupError, TraceParseError

PROFILE_BATCH_COUNT = 10
PROFILE_BATCH_MAX = 256
PROFILE_LEN_MIN = 8
PROFILE_LEN_MAX = 131072
PROFILE_DENSE_BELOW = 512
PROFILE_DECODE_STEPS = 60


@dataclass(frozen=True)
class OracleCalibration:
    """Scalar knobs of the analytic model not derivable from geometry."""

    kernel_overhead_base: float
    tile_quantum: int = 8
    kv_bytes_per_token: float | None = None
    noise_rel: float = 0.0
    # prefill cost a*B*L^2/tp + b*B*L/tp + c
    prefill_quad: float = 7.0631e-8
    prefill_lin: float = 5.0e-4
    prefill_const: float = 0.1

    def __post_init__(self):
        if self.kernel_overhead_base < 0:
            raise ConfigError("kernel_overhead_base must be non-negative")
        if self.tile_quantum < 1:
            raise ConfigError("tile_quantum must be >= 1")
        if not 0.0 <= self.noise_rel <= 0.2:
            raise ConfigError("noise_rel must lie in [0, 0.2]")
        if self.kv_bytes_per_token is not None and self.kv_bytes_per_token <= 0:
            raise ConfigError("kv_bytes_per_token must be positive")
        if min(self.prefill_quad, self.prefill_lin, self.prefill_const) < 0:
            raise ConfigError("prefill coefficients must be non-negative")


@dataclass(frozen=True)
class AnalyticHardwareModel:
    """Ground-truth step timing for a (cluster, model) pair."""

    cluster: ClusterSpec
    model: ModelSpec
    calib: OracleCalibration

    @property
    def prefill_quad(self) -> float:
        return self.calib.prefill_quad

    @property
    def prefill_lin(self) -> float:
        return self.calib.prefill_lin

    @property
    def prefill_const(self) -> float:
        return self.calib.prefill_const

    @property
    def kv_bytes_per_token(self) -> float:
        if self.calib.kv_bytes_per_token is not None:
            return self.calib.kv_bytes_per_token
        return float(self.model.kv_bytes_per_token)

    @property
    def flops_per_token(self) -> float:
        # two flops per weight element
        return 2.0 * self.model.weight_bytes / self.model.bytes_per_elem


def _shape_noise(hw: AnalyticHardwareModel, tp: int, batch: int, agg_tokens):
    """Deterministic pseudo-noise in [-1, 1], keyed on the query shape."""
    t = np.asarray(np.rint(np.asarray(agg_tokens, dtype=float) * 2.0), dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = t ^ (np.uint64(tp) * np.uint64(0x9E3779B97F4A7C15))
        x = x ^ (np.uint64(batch) * np.uint64(0xBF58476D1CE4E5B9))
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x.astype(np.float64) / 2.0**64) * 2.0 - 1.0


def oracle_decode_latency(hw: AnalyticHardwareModel, tp: int, batch: int, agg_tokens):
    """One decode step for `batch` samples with `agg_tokens` total context.

    Accepts a scalar or ndarray of agg_tokens; returns the same shape.
    """
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    t = np.asarray(agg_tokens, dtype=float)
    if np.any(t < batch):
        raise ConfigError("agg_tokens must be >= batch")
    q = hw.calib.tile_quantum
    batch_q = math.ceil(batch / q) * q
    mem = (hw.model.weight_bytes + t * hw.kv_bytes_per_token) / (tp * hw.cluster.hbm_bw)
    comp = batch * hw.flops_per_token / (tp * hw.cluster.peak_flops)
    comm = (hw.model.num_layers * hw.cluster.per_layer_tp_comm_base
            * (tp - 1) / tp * batch_q)
    overhead = hw.calib.kernel_overhead_base * batch_q / batch
    lat = np.maximum(mem, comp) + comm + overhead
    if hw.calib.noise_rel > 0.0:
        lat = lat * (1.0 + hw.calib.noise_rel * _shape_noise(hw, tp, batch, t))
    if np.ndim(agg_tokens) == 0:
        return float(lat)
    return lat


def oracle_prefill_latency(hw: AnalyticHardwareModel, tp: int, batch: int, ctx_len):
    """Prefill cost for `batch` prompts of length ctx_len each.

    Quadratic in length (attention) plus linear (MLP / weight traffic),
    both sharded by tp, plus a shared constant setup term.
    """
    if batch < 1:
        raise ConfigError(f"batch must be >= 1, got {batch}")
    length = np.asarray(ctx_len, dtype=float)
    if np.any(length < 1):
        raise ConfigError("ctx_len must be >= 1")
    lat = (hw.prefill_quad * batch * length * length / tp
           + hw.prefill_lin * batch * length / tp
           + hw.prefill_const)
    if np.ndim(ctx_len) == 0:
        return float(lat)
    return lat


@dataclass(frozen=True)
class ProfilePoint:
    tp: int
    batch: int
    ctx_len: int
    decode_latency: float
    prefill_latency: float


@dataclass(frozen=True)
class ProfileTable:
    """Offline profile measurements plus the grid they were taken on."""

    points: tuple[ProfilePoint, ...]
    grid_batches: tuple[int, ...]
    grid_lengths: tuple[int, ...]
    token_cap: int

    def __post_init__(self):
        per_key: dict[tuple[int, int], int] = {}
        for p in self.points:
            per_key[(p.tp, p.batch)] = per_key.get((p.tp, p.batch), 0) + 1
        for key, count in per_key.items():
            if count < 2:
                raise ConfigError(
                    f"profile needs >= 2 context points per (tp, batch), "
                    f"got {count} for {key}"
                )

    @property
    def tps(self) -> tuple[int, ...]:
        return tuple(sorted({p.tp for p in self.points}))


def profile_batches() -> list[int]:
    """Ten log-spaced batch sizes in [1, 256], endpoints included."""
    raw = [PROFILE_BATCH_MAX ** (i / (PROFILE_BATCH_COUNT - 1))
           for i in range(PROFILE_BATCH_COUNT)]
    vals = sorted({int(round(v)) for v in raw})
    assert len(vals) == PROFILE_BATCH_COUNT and vals[0] == 1 and vals[-1] == PROFILE_BATCH_MAX
    return vals


def profile_lengths() -> list[int]:
    """Log-spaced context lengths in [8, 128K], twice as dense below 512."""
    exps: list[float] = []
    e = math.log2(PROFILE_LEN_MIN)
    while e < math.log2(PROFILE_DENSE_BELOW) - 1e-9:
        exps.append(e)
        e += 0.5
    e = math.log2(PROFILE_DENSE_BELOW)
    while e < math.log2(PROFILE_LEN_MAX) + 1e-9:
        exps.append(e)
        e += 1.0
    vals = sorted({int(round(2 ** x)) for x in exps})
    return vals


def build_profile_grid(cluster: ClusterSpec,
                       configs: list[ParallelConfig],
                       token_cap: int | None = None) -> list[tuple[int, int, int]]:
    """(tp, batch, ctx_len) triples to profile.

    The (batch, length) grid is shared by every TP candidate; points whose
    batch * length would overflow the node KV budget are dropped.
    """
    if token_cap is None:
        token_cap = cluster.kv_tokens_per_gpu * cluster.gpus_per_node
    pairs = [(b, l) for b in profile_batches() for l in profile_lengths()
             if b * l <= token_cap]
    grid = [(cfg.tp, b, l) for cfg in configs for (b, l) in pairs]
    return grid


def run_profiler(hw: AnalyticHardwareModel,
                 grid: list[tuple[int, int, int]],
                 token_cap: int | None = None) -> ProfileTable:
    """Measure the grid against the hardware model.

    Decode latency at each point is the mean over a 60-step window that
    starts from a batch of prefixes of the given length, so the aggregate
    token count grows by `batch` each step, as it would on hardware.
    """
    if token_cap is None:
        token_cap = hw.cluster.kv_tokens_per_gpu * hw.cluster.gpus_per_node
    steps = np.arange(PROFILE_DECODE_STEPS, dtype=float)
    points = []
    for tp, batch, length in grid:
        window = batch * length + batch * steps
        decode = float(np.mean(oracle_decode_latency(hw, tp, batch, window)))
        prefill = oracle_prefill_latency(hw, tp, batch, length)
        points.append(ProfilePoint(tp, batch, length, decode, prefill))
    batches = tuple(sorted({p.batch for p in points}))
    lengths = tuple(sorted({p.ctx_len for p in points}))
    return ProfileTable(points=tuple(points), grid_batches=batches,
                        grid_lengths=lengths, token_cap=token_cap)


class LatencyPredictor:
    """Piecewise-linear interpolation over a ProfileTable.

    Decode curves map aggregate tokens to step latency per (tp, batch);
    prefill curves map per-sample context length to prefill time.  Queries
    off the batch grid interpolate between the two bracketing profiled
    batches; batch is clamped into the profiled range.  Beyond the largest
    profiled token count the last segment is extended linearly but never
    below the last profiled value.
    """

    def __init__(self, decode_curves, prefill_curves, batches_by_tp):
        self._decode = decode_curves
        self._prefill = prefill_curves
        self._batches = batches_by_tp

    @property
    def tps(self) -> tuple[int, ...]:
        return tuple(sorted(self._batches))

    def _bracket(self, tp: int, batch: int):
        if tp not in self._batches:
            raise ProfileLookupError(f"tp={tp} was not profiled")
        batches = self._batches[tp]
        if batch <= batches[0]:
            return batches[0], batches[0], 0.0
        if batch >= batches[-1]:
            return batches[-1], batches[-1], 0.0
        hi_idx = int(np.searchsorted(batches, batch, side="left"))
        lo, hi = batches[hi_idx - 1], batches[hi_idx]
        if lo == batch or hi == batch:
            b = batch
            return b, b, 0.0
        frac = (batch - lo) / (hi - lo)
        return lo, hi, frac

    @staticmethod
    def _eval_curve(xs: np.ndarray, ys: np.ndarray, x):
        q = np.asarray(x, dtype=float)
        out = np.interp(q, xs, ys)
        if xs.size >= 2:
            above = q > xs[-1]
            if np.any(above):
                slope = (ys[-1] - ys[-2]) / (xs[-1] - xs[-2])
                ext = ys[-1] + slope * (q - xs[-1])
                out = np.where(above, np.maximum(ext, ys[-1]), out)
        return out

    def predict_decode_latency(self, tp: int, batch: int, agg_tokens):
        lo, hi, frac = self._bracket(tp, batch)
        xs, ys = self._decode[(tp, lo)]
        val = self._eval_curve(xs, ys, agg_tokens)
        if hi != lo:
            xs2, ys2 = self._decode[(tp, hi)]
            val = val * (1.0 - frac) + self._eval_curve(xs2, ys2, agg_tokens) * frac
        if np.ndim(agg_tokens) == 0:
            return float(val)
        return val

    def predict_prefill_latency(self, tp: int, batch: int, ctx_len):
        lo, hi, frac = self._bracket(tp, batch)
        xs, ys = self._prefill[(tp, lo)]
        val = self._eval_curve(xs, ys, ctx_len)
        if hi != lo:
            xs2, ys2 = self._prefill[(tp, hi)]
            val = val * (1.0 - frac) + self._eval_curve(xs2, ys2, ctx_len) * frac
        # prefill curves are per profiled batch; rescale linearly in batch
        # between brackets happens above, outside brackets clamp applies
        if np.ndim(ctx_len) == 0:
            return float(val)
        return val


class OracleLatencyModel:
    """Predictor-shaped adapter that answers with the exact oracle.

    Used where planning should see ground truth, e.g. in no-regret tests.
    """

    def __init__(self, hw: AnalyticHardwareModel):
        self.hw = hw

    def predict_decode_latency(self, tp: int, batch: int, agg_tokens):
        return oracle_decode_latency(self.hw, tp, batch, agg_tokens)

    def predict_prefill_latency(self, tp: int, batch: int, ctx_len):
        return oracle_prefill_latency(self.hw, tp, batch, ctx_len)


def fit_predictor(table: ProfileTable) -> LatencyPredictor:
    """Build interpolation curves from a profile table."""
    by_key: dict[tuple[int, int], list[ProfilePoint]] = {}
    for p in table.points:
        by_key.setdefault((p.tp, p.batch), []).append(p)
    decode_curves = {}
    prefill_curves = {}
    batches_by_tp: dict[int, list[int]] = {}
    for (tp, batch), pts in by_key.items():
        pts.sort(key=lambda p: p.ctx_len)
        if len(pts) < 2:
            raise ConfigError(
                f"cannot fit (tp={tp}, batch={batch}): need >= 2 context points"
            )
        agg = np.array([batch * p.ctx_len for p in pts], dtype=float)
        dec = np.array([p.decode_latency for p in pts], dtype=float)
        ctx = np.array([p.ctx_len for p in pts], dtype=float)
        pre = np.array([p.prefill_latency for p in pts], dtype=float)
        decode_curves[(tp, batch)] = (agg, dec)
        prefill_curves[(tp, batch)] = (ctx, pre)
        batches_by_tp.setdefault(tp, []).append(batch)
    for tp in batches_by_tp:
        batches_by_tp[tp] = np.array(sorted(batches_by_tp[tp]))
    return LatencyPredictor(decode_curves, prefill_curves, batches_by_tp)


def predict_decode_latency(pred, tp: int, batch: int, agg_tokens):
    return pred.predict_decode_latency(tp, batch, agg_tokens)


def predict_prefill_latency(pred, tp: int, batch: int, ctx_len):
    return pred.predict_prefill_latency(tp, batch, ctx_len)


_TABLE_HEADER = ["tp", "batch", "ctx_len", "decode_ms", "prefill_ms"]


def save_table(table: ProfileTable, path: str) -> None:
    """Write the profile as CSV, milliseconds, sorted for reproducibility."""
    rows = sorted(table.points, key=lambda p: (p.tp, p.batch, p.ctx_len))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_TABLE_HEADER)
        writer.writerow(["# token_cap", table.token_cap, "", "", ""])
        for p in rows:
            writer.writerow([
                p.tp, p.batch, p.ctx_len,
                f"{p.decode_latency * 1e3:.17g}",
                f"{p.prefill_latency * 1e3:.17g}",
            ])


def load_table(path: str) -> ProfileTable:
    """Read a profile CSV written by save_table."""
    points = []
    token_cap = None
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise TraceParseError(f"cannot open table {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TraceParseError("empty table file", line=1) from None
        if [h.strip() for h in header] != _TABLE_HEADER:
            raise TraceParseError(
                f"expected header {','.join(_TABLE_HEADER)!r}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if row[0].startswith("#"):
                if row[0].strip() == "# token_cap":
                    token_cap = int(row[1])
                continue
            if len(row) != 5:
                raise TraceParseError(f"expected 5 fields, got {len(row)}", line=lineno)
            try:
                points.append(ProfilePoint(
                    tp=int(row[0]), batch=int(row[1]), ctx_len=int(row[2]),
                    decode_latency=float(row[3]) / 1e3,
                    prefill_latency=float(row[4]) / 1e3,
                ))
            except ValueError as exc:
                raise TraceParseError(str(exc), line=lineno) from exc
    if not points:
        raise TraceParseError("table contains no data rows")
    if token_cap is None:
        token_cap = max(p.batch * p.ctx_len for p in points)
    batches = tuple(sorted({p.batch for p in points}))
    lengths = tuple(sorted({p.ctx_len for p in points}))
    return ProfileTable(points=tuple(points), grid_batches=batches,
                        grid_lengths=lengths, token_cap=token_cap)
