"""Roofline/overlap performance model.

Component latencies come from calibrated achieved rates (HBM bandwidth, MLP
efficiency, collective bandwidth curves); the iteration latency composes them
with the dependency structure

    T_fwd = max(botmlp_fwd, emb_lookup + a2a_fwd) + interaction_fwd + topmlp_fwd
    T_bwd = max(topmlp_bwd + interaction_bwd
                 + max(a2a_bwd + emb_update, botmlp_bwd),
                allreduce_top + allreduce_bot)

with the input AlltoAll hidden under the top-MLP forward window and the
host-to-device copy hidden under the double-buffered iteration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from typing import Optional, Sequence

from .comms import (
    CollectiveVolume,
    LENGTH_BYTES,
    quantized_volume,
    volume_forward_alltoall,
    volume_gradient_collectives,
    volume_input_alltoall,
)
from .errors import Infeasible, InvalidValue
from .model import ClusterSpec, ModelSpec, Precision, PRECISION_BYTES
from .planner import (
    CandidatePolicy,
    CompressionFlags,
    CostWeights,
    SchemeKind,
    ShardingPlan,
    memory_check,
    plan_4d,
    shard_width,
)


def achieved_bw(points: Sequence[tuple[float, float]], message_bytes: float) -> float:
    """Log-linear interpolation of achieved bandwidth over message size,
    clamped at the calibration end points."""
    if not points:
        raise InvalidValue("points", "at least one calibration point required")
    if message_bytes <= points[0][0]:
        return points[0][1]
    if message_bytes >= points[-1][0]:
        return points[-1][1]
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        if x0 <= message_bytes <= x1:
            t = (math.log(message_bytes) - math.log(x0)) / (math.log(x1) - math.log(x0))
            return y0 * (y1 / y0) ** t
    raise AssertionError("unreachable: points are sorted")


@dataclass(frozen=True)
class ComponentLatencies:
    """Serialized per-component seconds, one field per dependency-graph node."""

    botmlp_fwd: float = 0.0
    emb_lookup: float = 0.0
    a2a_fwd: float = 0.0
    interaction_fwd: float = 0.0
    topmlp_fwd: float = 0.0
    topmlp_bwd: float = 0.0
    interaction_bwd: float = 0.0
    a2a_bwd: float = 0.0
    emb_update: float = 0.0
    botmlp_bwd: float = 0.0
    allreduce_top: float = 0.0
    allreduce_bot: float = 0.0
    input_a2a: float = 0.0
    h2d: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidValue(f.name, "must be >= 0")

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


COMM_COMPONENTS = (
    "a2a_fwd",
    "a2a_bwd",
    "allreduce_top",
    "allreduce_bot",
    "input_a2a",
    "h2d",
)


@dataclass(frozen=True)
class PerfEstimate:
    components: ComponentLatencies
    t_fwd: float
    t_bwd: float
    t_total: float
    qps: float
    serialized_total: float
    exposed_comm: float
    global_batch: int


def iteration_latency(c: ComponentLatencies, global_batch: int) -> PerfEstimate:
    """Compose component latencies into the per-iteration estimate.

    exposed_comm is the slowdown over the pure-compute critical path; the
    input AlltoAll beyond the top-MLP forward window and the H2D copy beyond
    one full iteration surface as additional exposed time.
    """
    t_fwd = max(c.botmlp_fwd, c.emb_lookup + c.a2a_fwd) + c.interaction_fwd + c.topmlp_fwd
    t_bwd = max(
        c.topmlp_bwd + c.interaction_bwd + max(c.a2a_bwd + c.emb_update, c.botmlp_bwd),
        c.allreduce_top + c.allreduce_bot,
    )
    core = t_fwd + t_bwd
    exposed_input = max(0.0, c.input_a2a - c.topmlp_fwd)
    exposed_h2d = max(0.0, c.h2d - core)
    t_total = core + exposed_input + exposed_h2d
    compute_only = (
        max(c.botmlp_fwd, c.emb_lookup)
        + c.interaction_fwd
        + c.topmlp_fwd
        + c.topmlp_bwd
        + c.interaction_bwd
        + max(c.emb_update, c.botmlp_bwd)
    )
    serialized = sum(c.as_dict().values())
    qps = global_batch / t_total if t_total > 0 else math.inf
    return PerfEstimate(
        components=c,
        t_fwd=t_fwd,
        t_bwd=t_bwd,
        t_total=t_total,
        qps=qps,
        serialized_total=serialized,
        exposed_comm=t_total - compute_only,
        global_batch=global_batch,
    )


def exposed_breakdown(
    c: ComponentLatencies, global_batch: int
) -> dict[str, dict[str, float]]:
    """Serialized vs exposed seconds per component; exposure is the marginal
    increase of t_total over running with that component zeroed."""
    base = iteration_latency(c, global_batch).t_total
    out = {}
    for name, serialized in c.as_dict().items():
        without = iteration_latency(replace(c, **{name: 0.0}), global_batch).t_total
        out[name] = {"serialized": serialized, "exposed": base - without}
    return out


# ---------------------------------------------------------------------------
# component latencies from a plan


def _dense_flop_split(model: ModelSpec) -> tuple[float, float, float]:
    """(bottom MLP, interaction, top MLP) forward FLOPs per sample."""
    if model.bottom_mlp_layers or model.top_mlp_layers:
        return (
            model.bottom_mlp_flops_per_sample,
            model.interaction_flops_per_sample,
            model.top_mlp_flops_per_sample,
        )
    mlp_total = max(model.mflops_per_sample * 1e6 - model.interaction_flops_per_sample, 0.0)
    return mlp_total / 2, model.interaction_flops_per_sample, mlp_total / 2


def _remote_fraction(num_workers: int, gpus_per_node: int) -> float:
    if num_workers <= gpus_per_node or num_workers < 2:
        return 0.0
    return (num_workers - gpus_per_node) / (num_workers - 1)


def _collective_time(
    max_bytes: float,
    remote_fraction: float,
    points,
    scaleup_bw: float,
    fixed: float,
    messages: int,
) -> float:
    """Straggler worker's time: remote share over the achieved-bandwidth
    curve, local share over the scale-up fabric, plus fixed latency per
    message. Zero-volume collectives never launch."""
    if max_bytes <= 0:
        return 0.0
    remote = max_bytes * remote_fraction
    local = max_bytes - remote
    t = local / scaleup_bw
    if remote > 0:
        t += remote / achieved_bw(points, remote)
    return t + fixed * messages


def component_latencies(
    model: ModelSpec,
    plan: ShardingPlan,
    cluster: ClusterSpec,
    cache_hit_rate: float = 1.0,
    compute_precision: Precision = Precision.TF32,
    a2a_fwd_precision: Precision = Precision.FP32,
    a2a_bwd_precision: Precision = Precision.FP32,
    flags: CompressionFlags = CompressionFlags(rowwise_optimizer=True),
) -> ComponentLatencies:
    """Calibrated per-component latencies for one training iteration.

    MLP terms divide layer FLOPs by peak x mlp_efficiency; embedding terms
    divide shard bytes touched by the effective row bandwidth of the worker's
    memory tier; collective terms divide the straggler's volume by the
    achieved bandwidth for its message size. Model-parallel terms take the
    max over workers.
    """
    from .cache import effective_row_bandwidth

    if plan.num_workers != cluster.num_workers:
        raise InvalidValue("plan", "plan and cluster disagree on worker count")
    if not 0 <= cache_hit_rate <= 1:
        raise InvalidValue("cache_hit_rate", "must be in [0, 1]")
    W = cluster.num_workers
    B = model.local_batch
    global_batch = B * W
    if compute_precision.value not in cluster.peak_flops:
        raise Infeasible(f"cluster lists no peak rate for {compute_precision.value}")
    rate = cluster.peak_flops[compute_precision.value] * cluster.mlp_efficiency
    bot_flops, inter_flops, top_flops = _dense_flop_split(model)
    botmlp_fwd = bot_flops * B / rate
    topmlp_fwd = top_flops * B / rate
    interaction_fwd = inter_flops * B / rate

    # memory tier per worker decides the effective embedding bandwidth
    report = memory_check(plan, model, cluster, flags)
    worker_bw = []
    for m in report.workers:
        if m.tier == "infeasible":
            raise Infeasible(f"worker {m.worker} exceeds its memory budget")
        if m.tier == "hbm":
            worker_bw.append(cluster.hbm_bw)
        else:
            worker_bw.append(
                effective_row_bandwidth(
                    cache_hit_rate, cluster.hbm_bw, cluster.dram_to_gpu_bw
                )
            )
    lookup_bytes = [0.0] * W
    for assignment in plan.assignments:
        table = model.tables[model.table_index(assignment.table_id)]
        prec = flags.table_precision or table.value_precision
        elem = PRECISION_BYTES[prec]
        kind = assignment.scheme.kind
        if kind is SchemeKind.DATA_PARALLEL:
            per_worker = B * table.avg_pooling * table.dim * elem
            for w in range(W):
                lookup_bytes[w] += per_worker
            continue
        k = len(assignment.shards)
        for shard in assignment.shards:
            share = 1.0 / k if kind is SchemeKind.ROW_WISE else 1.0
            width = shard_width(table, shard)
            lookup_bytes[shard.worker] += (
                global_batch * table.avg_pooling * share * width * elem
            )
    emb_lookup = max(
        (lookup_bytes[w] / worker_bw[w] for w in range(W)), default=0.0
    )
    # update re-reads and writes back the touched rows
    emb_update = max(
        (2.0 * lookup_bytes[w] / worker_bw[w] for w in range(W)), default=0.0
    )

    fixed = cluster.fixed_latency_per_collective
    remote_frac = _remote_fraction(W, cluster.gpus_per_node)
    fwd_vol = quantized_volume(
        volume_forward_alltoall(plan, model, W),
        a2a_fwd_precision,
        a2a_bwd_precision,
    )
    a2a_fwd = _collective_time(
        fwd_vol.max_bytes, remote_frac, cluster.alltoall_bw_points,
        cluster.scaleup_bw, fixed, 1,
    )
    grad_vols = [
        quantized_volume(v, a2a_fwd_precision, a2a_bwd_precision)
        for v in volume_gradient_collectives(plan, model, W)
    ]
    a2a_bwd = 0.0
    dp_allreduce_bytes = 0.0
    for vol in grad_vols:
        if vol.label == "pooled_a2a_bwd":
            a2a_bwd = _collective_time(
                vol.max_bytes, remote_frac, cluster.alltoall_bw_points,
                cluster.scaleup_bw, fixed, 1,
            )
        elif vol.label == "dp_table_allreduce":
            dp_allreduce_bytes += vol.max_bytes
    # Row-wise partial-pool exchanges ride with the pooled AlltoAll terms.
    # Hierarchical row shards stay inside one node, so their reduction runs
    # on the scale-up fabric; flat shards cross the scale-out network.
    rw_elem = PRECISION_BYTES[a2a_fwd_precision]
    rw_elem_bwd = PRECISION_BYTES[a2a_bwd_precision]
    flat_rs = [0.0] * W
    hier_rs = [0.0] * W
    for assignment in plan.assignments:
        if assignment.scheme.kind is not SchemeKind.ROW_WISE:
            continue
        table = model.tables[model.table_index(assignment.table_id)]
        k = len(assignment.shards)
        per_shard = (k - 1) / k * global_batch * table.dim
        target = hier_rs if assignment.scheme.hierarchical else flat_rs
        for shard in assignment.shards:
            target[shard.worker] += per_shard
    for bucket, frac in ((flat_rs, remote_frac), (hier_rs, 0.0)):
        a2a_fwd += _collective_time(
            max(bucket) * rw_elem, frac, cluster.alltoall_bw_points,
            cluster.scaleup_bw, fixed, 1,
        )
        a2a_bwd += _collective_time(
            max(bucket) * rw_elem_bwd, frac, cluster.alltoall_bw_points,
            cluster.scaleup_bw, fixed, 1,
        )

    ar_frac = 1.0 if W > cluster.gpus_per_node else 0.0
    dense_bot, dense_top = _dense_allreduce_split(model)
    scale = 2 * (W - 1) / W
    allreduce_top = _collective_time(
        scale * dense_top, ar_frac, cluster.allreduce_bw_points,
        cluster.scaleup_bw, fixed, 1,
    )
    allreduce_bot = _collective_time(
        scale * dense_bot + dp_allreduce_bytes, ar_frac, cluster.allreduce_bw_points,
        cluster.scaleup_bw, fixed, 1,
    )

    input_vol = volume_input_alltoall(plan, model, W)
    input_bytes = max(
        (p + m for p, m in zip(input_vol.per_worker_send_bytes, input_vol.metadata_bytes)),
        default=0.0,
    )
    input_a2a = _collective_time(
        input_bytes, remote_frac, cluster.alltoall_bw_points,
        cluster.scaleup_bw, fixed, input_vol.message_count,
    )

    h2d_bytes = B * sum(
        t.avg_pooling * t.index_bytes + LENGTH_BYTES for t in model.tables
    ) + B * model.dense_input_dim * 4
    h2d = h2d_bytes / cluster.dram_to_gpu_bw if h2d_bytes > 0 else 0.0

    return ComponentLatencies(
        botmlp_fwd=botmlp_fwd,
        emb_lookup=emb_lookup,
        a2a_fwd=a2a_fwd,
        interaction_fwd=interaction_fwd,
        topmlp_fwd=topmlp_fwd,
        topmlp_bwd=2 * topmlp_fwd,
        interaction_bwd=2 * interaction_fwd,
        a2a_bwd=a2a_bwd,
        emb_update=emb_update,
        botmlp_bwd=2 * botmlp_fwd,
        allreduce_top=allreduce_top,
        allreduce_bot=allreduce_bot,
        input_a2a=input_a2a,
        h2d=h2d,
    )


def _dense_allreduce_split(model: ModelSpec) -> tuple[float, float]:
    """Split dense_param_bytes into (bottom, top) by layer share."""
    from .model import mlp_param_bytes

    bot = mlp_param_bytes(model.bottom_mlp_layers)
    top = mlp_param_bytes(model.top_mlp_layers)
    if bot + top == 0:
        half = model.dense_param_bytes / 2
        return half, half
    scale = model.dense_param_bytes / (bot + top)
    return bot * scale, top * scale


def effective_performance(mflops_per_sample: float, qps: float) -> float:
    """Model complexity x throughput, in FLOPS/s."""
    if not mflops_per_sample > 0 or not qps > 0:
        raise InvalidValue("effective_performance", "inputs must be > 0")
    return mflops_per_sample * 1e6 * qps


# ---------------------------------------------------------------------------
# end-to-end simulation and scaling sweeps


@dataclass(frozen=True)
class SimulationResult:
    estimate: PerfEstimate
    volumes: tuple[CollectiveVolume, ...]
    breakdown: dict[str, dict[str, float]]


def simulate(
    model: ModelSpec,
    cluster: ClusterSpec,
    plan: ShardingPlan,
    cache_hit_rate: float = 0.9,
    compute_precision: Precision = Precision.TF32,
    a2a_fwd_precision: Precision = Precision.FP32,
    a2a_bwd_precision: Precision = Precision.FP32,
    flags: CompressionFlags = CompressionFlags(rowwise_optimizer=True),
) -> SimulationResult:
    comps = component_latencies(
        model,
        plan,
        cluster,
        cache_hit_rate=cache_hit_rate,
        compute_precision=compute_precision,
        a2a_fwd_precision=a2a_fwd_precision,
        a2a_bwd_precision=a2a_bwd_precision,
        flags=flags,
    )
    global_batch = model.local_batch * cluster.num_workers
    estimate = iteration_latency(comps, global_batch)
    volumes = [volume_forward_alltoall(plan, model, cluster.num_workers)]
    volumes += volume_gradient_collectives(plan, model, cluster.num_workers)
    volumes.append(volume_input_alltoall(plan, model, cluster.num_workers))
    volumes = [
        quantized_volume(v, a2a_fwd_precision, a2a_bwd_precision) for v in volumes
    ]
    return SimulationResult(
        estimate=estimate,
        volumes=tuple(volumes),
        breakdown=exposed_breakdown(comps, global_batch),
    )


def shrink_to_fit(
    model: ModelSpec, cluster: ClusterSpec, flags: CompressionFlags
) -> ModelSpec:
    """Scale table cardinality down until the heaviest worker fits in HBM.

    Mirrors the shrunk-model methodology for small node counts: inputs hash
    into the reduced row space, leaving per-iteration access volumes (and so
    the performance character) unchanged. The straggler estimate balances
    per-table bytes greedily, with 10% headroom for placement differences.
    """
    from .planner import greedy_partition, table_storage_bytes

    if not model.tables:
        return model
    per_table = {
        t.id: table_storage_bytes(t.num_rows, t.dim, t, flags) for t in model.tables
    }
    assign = greedy_partition(list(per_table.items()), cluster.num_workers)
    bins = [0.0] * cluster.num_workers
    for tid, b in per_table.items():
        bins[assign[tid]] += b
    heaviest = max(bins)
    budget = 0.9 * cluster.hbm_capacity_per_gpu
    if heaviest <= budget:
        return model
    factor = budget / heaviest
    tables = tuple(
        replace(t, num_rows=max(1, int(t.num_rows * factor))) for t in model.tables
    )
    return replace(model, tables=tables)


@dataclass(frozen=True)
class SweepEntry:
    nodes: int
    workers: int
    qps: Optional[float]
    efficiency: Optional[float]
    estimate: Optional[PerfEstimate]
    breakdown: Optional[dict]
    error: Optional[str] = None


def scaling_sweep(
    model: ModelSpec,
    cluster_template: ClusterSpec,
    node_counts: Sequence[int],
    weights: CostWeights = CostWeights(),
    policy: CandidatePolicy = CandidatePolicy(
        flags=CompressionFlags(rowwise_optimizer=True)
    ),
    heuristic: str = "greedy",
    cache_hit_rate: float = 0.9,
    compute_precision: Precision = Precision.TF32,
    a2a_fwd_precision: Precision = Precision.FP32,
    a2a_bwd_precision: Precision = Precision.FP32,
    shrink: bool = True,
) -> list[SweepEntry]:
    """Weak-scaling sweep: per-GPU batch fixed, re-planned at every scale.

    Efficiency is per-worker throughput relative to the smallest node count.
    Infeasible scales are reported per entry rather than raised.
    """
    if list(node_counts) != sorted(node_counts) or len(set(node_counts)) != len(
        node_counts
    ):
        raise InvalidValue("node_counts", "must be strictly ascending")
    entries: list[SweepEntry] = []
    baseline: Optional[tuple[int, float]] = None  # (workers, qps)
    for n in node_counts:
        cluster = cluster_template.with_nodes(n)
        scale_model = (
            shrink_to_fit(model, cluster, policy.flags) if shrink else model
        )
        try:
            plan = plan_4d(scale_model, cluster, weights, policy, heuristic)
            result = simulate(
                scale_model,
                cluster,
                plan,
                cache_hit_rate=cache_hit_rate,
                compute_precision=compute_precision,
                a2a_fwd_precision=a2a_fwd_precision,
                a2a_bwd_precision=a2a_bwd_precision,
                flags=policy.flags,
            )
        except Infeasible as exc:
            entries.append(
                SweepEntry(n, cluster.num_workers, None, None, None, None, str(exc))
            )
            continue
        qps = result.estimate.qps
        if baseline is None:
            baseline = (cluster.num_workers, qps)
        efficiency = (qps / cluster.num_workers) / (baseline[1] / baseline[0])
        entries.append(
            SweepEntry(
                nodes=n,
                workers=cluster.num_workers,
                qps=qps,
                efficiency=efficiency,
                estimate=result.estimate,
                breakdown=result.breakdown,
            )
        )
    return entries
