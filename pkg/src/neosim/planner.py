"""4D sharding planner: per-table scheme selection and worker placement.

The cost of a shard combines communication volume, embedding access load
(tables-per-worker x global batch x pooling x dim) and a fixed per-collective
latency; placement minimizes the per-worker maximum of the weighted sum using
either the greedy heuristic or the largest-differencing (Karmarkar-Karp)
heuristic.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from .errors import (
    Infeasible,
    InvalidScheme,
    InvalidValue,
    MalformedDocument,
    MissingKey,
    NoFeasibleScheme,
)
from .model import (
    SPEC_VERSION,
    ClusterSpec,
    ModelSpec,
    Precision,
    PRECISION_BYTES,
    TableSpec,
)

OPTIMIZER_STATE_BYTES = 4  # AdaGrad moments are kept in FP32


class SchemeKind(str, Enum):
    TABLE_WISE = "table_wise"
    ROW_WISE = "row_wise"
    COLUMN_WISE = "column_wise"
    DATA_PARALLEL = "data_parallel"


@dataclass(frozen=True)
class Scheme:
    """How one table is parallelized across workers."""

    kind: SchemeKind
    num_row_shards: int = 1
    col_splits: tuple[tuple[int, int], ...] = ()
    # (node-level kind, intra-node kind) when produced by hierarchical planning
    hierarchical: Optional[tuple[SchemeKind, SchemeKind]] = None

    @property
    def num_shards(self) -> int:
        if self.kind is SchemeKind.ROW_WISE:
            return self.num_row_shards
        if self.kind is SchemeKind.COLUMN_WISE:
            return len(self.col_splits)
        return 1

    def describe(self) -> str:
        if self.kind is SchemeKind.ROW_WISE:
            return f"row_wise(k={self.num_row_shards})"
        if self.kind is SchemeKind.COLUMN_WISE:
            return f"column_wise(c={len(self.col_splits)})"
        return self.kind.value


@dataclass(frozen=True)
class ShardCost:
    comm_bytes: float
    load: float
    memory_bytes: float
    fixed_latency: float

    def __post_init__(self):
        for name in ("comm_bytes", "load", "memory_bytes", "fixed_latency"):
            if getattr(self, name) < 0:
                raise InvalidValue(name, "must be >= 0")


@dataclass(frozen=True)
class CostWeights:
    w_comm: float = 1.0
    w_load: float = 1.0
    w_latency: float = 1.0

    def __post_init__(self):
        if min(self.w_comm, self.w_load, self.w_latency) < 0:
            raise InvalidValue("weights", "must be >= 0")
        if self.w_comm == self.w_load == self.w_latency == 0:
            raise InvalidValue("weights", "must not all be zero")


@dataclass(frozen=True)
class CompressionFlags:
    """Capacity-accounting levers: forced table precision and row-wise state."""

    table_precision: Optional[Precision] = None  # None keeps per-table precision
    rowwise_optimizer: bool = False


@dataclass(frozen=True)
class CandidatePolicy:
    dp_threshold_bytes: Optional[int] = None  # None -> HBM capacity / 1000
    fine_grain: bool = False
    flags: CompressionFlags = field(default_factory=CompressionFlags)
    max_row_shards: Optional[int] = None  # None -> worker count
    min_col_width: int = 4


@dataclass(frozen=True)
class Shard:
    """One placed piece of a table; None bounds mean the full extent.

    worker is None only for data-parallel shards, which are replicated on
    every worker.
    """

    worker: Optional[int]
    rows: Optional[tuple[int, int]] = None
    cols: Optional[tuple[int, int]] = None


@dataclass(frozen=True)
class TableAssignment:
    table_id: str
    scheme: Scheme
    shards: tuple[Shard, ...]


@dataclass(frozen=True)
class ShardingPlan:
    num_workers: int
    gpus_per_node: int
    assignments: tuple[TableAssignment, ...]
    heuristic: str = "greedy"

    def assignment_for(self, table_id: str) -> TableAssignment:
        for a in self.assignments:
            if a.table_id == table_id:
                return a
        raise KeyError(table_id)


def even_bounds(extent: int, parts: int) -> list[tuple[int, int]]:
    """Split [0, extent) into `parts` contiguous near-equal ranges."""
    base, rem = divmod(extent, parts)
    bounds, start = [], 0
    for i in range(parts):
        end = start + base + (1 if i < rem else 0)
        bounds.append((start, end))
        start = end
    return bounds


def shard_rows(table: TableSpec, shard: Shard) -> int:
    return (shard.rows[1] - shard.rows[0]) if shard.rows else table.num_rows


def shard_width(table: TableSpec, shard: Shard) -> int:
    return (shard.cols[1] - shard.cols[0]) if shard.cols else table.dim


def validate_scheme(table: TableSpec, scheme: Scheme) -> None:
    if scheme.kind is SchemeKind.ROW_WISE:
        if not 1 <= scheme.num_row_shards <= table.num_rows:
            raise InvalidScheme(
                f"{table.id}: row shard count {scheme.num_row_shards} "
                f"not in [1, {table.num_rows}]"
            )
    elif scheme.kind is SchemeKind.COLUMN_WISE:
        splits = scheme.col_splits
        if not splits:
            raise InvalidScheme(f"{table.id}: column-wise scheme needs slices")
        pos = 0
        for a, b in splits:
            if a != pos or b <= a:
                raise InvalidScheme(f"{table.id}: column slices must tile [0, D)")
            pos = b
        if pos != table.dim:
            raise InvalidScheme(f"{table.id}: column slices must cover [0, {table.dim})")


# ---------------------------------------------------------------------------
# shard cost model


def table_storage_bytes(
    rows: int, width: int, table: TableSpec, flags: CompressionFlags
) -> int:
    """Value bytes plus optimizer state for one (rows x width) shard."""
    prec = flags.table_precision or table.value_precision
    value_bytes = rows * width * PRECISION_BYTES[prec]
    if flags.rowwise_optimizer:
        state_bytes = rows * OPTIMIZER_STATE_BYTES
    else:
        state_bytes = rows * width * OPTIMIZER_STATE_BYTES
    return value_bytes + state_bytes


def shard_cost(
    table: TableSpec, scheme: Scheme, cluster: ClusterSpec, global_batch: int
) -> ShardCost:
    """Per-shard cost of applying `scheme` to `table` (shards are symmetric).

    load is the embedding access size: (table fraction on the worker) x global
    batch x pooling x dim. comm_bytes charges pooled output plus index payload
    for TW/CW, bucketized indices plus ReduceScatter volume for RW, and the
    ring AllReduce volume 2(p-1)/p x table bytes for DP. Pooled activations
    count 4 bytes per element; parameter gradients count the storage width.
    """
    validate_scheme(table, scheme)
    H, D, L = table.num_rows, table.dim, table.avg_pooling
    act = 4
    idx = table.index_bytes
    fixed = cluster.fixed_latency_per_collective
    if scheme.kind is SchemeKind.TABLE_WISE:
        load = global_batch * L * D
        comm = D * global_batch * act + global_batch * L * idx
        mem = table_storage_bytes(H, D, table, CompressionFlags())
        return ShardCost(comm, load, mem, 4 * fixed)
    if scheme.kind is SchemeKind.COLUMN_WISE:
        width = scheme.col_splits[0][1] - scheme.col_splits[0][0]
        load = global_batch * L * width
        # index payload replicated to every column shard
        comm = width * global_batch * act + global_batch * L * idx
        mem = table_storage_bytes(H, width, table, CompressionFlags())
        return ShardCost(comm, load, mem, 4 * fixed)
    if scheme.kind is SchemeKind.ROW_WISE:
        k = scheme.num_row_shards
        load = global_batch * (L / k) * D
        reduce_scatter = (k - 1) / k * global_batch * D * act
        comm = global_batch * (L / k) * idx + reduce_scatter
        mem = table_storage_bytes(-(-H // k), D, table, CompressionFlags())
        return ShardCost(comm, load, mem, 4 * fixed)
    # DATA_PARALLEL: replica computes only its local batch share; gradients
    # synchronize with a ring AllReduce over the whole table.
    p = cluster.num_workers
    load = (global_batch / p) * L * D
    comm = 2 * (p - 1) / p * H * D * table.elem_bytes
    mem = table_storage_bytes(H, D, table, CompressionFlags())
    return ShardCost(comm, load, mem, 1 * fixed)


# ---------------------------------------------------------------------------
# candidate enumeration


def _powers_of_two_up_to(limit: int):
    k = 2
    while k <= limit:
        yield k
        k *= 2


def enumerate_candidates(
    table: TableSpec, cluster: ClusterSpec, policy: CandidatePolicy
) -> list[Scheme]:
    """Feasible schemes for one table, in deterministic order.

    Data parallelism is offered only below the policy's size threshold;
    row/column sharding only when the table cannot fit one device or the
    policy asks for finer grain.
    """
    W = cluster.num_workers
    device_budget = cluster.hbm_capacity_per_gpu + cluster.dram_capacity_per_gpu
    full_bytes = table_storage_bytes(table.num_rows, table.dim, table, policy.flags)
    cluster_total = (
        W * cluster.hbm_capacity_per_gpu
        + cluster.num_nodes * cluster.dram_capacity_per_node
    )
    if full_bytes > cluster_total:
        raise NoFeasibleScheme(
            f"table {table.id} needs {full_bytes} bytes, cluster has {cluster_total}"
        )
    fits_device = full_bytes <= device_budget
    candidates: list[Scheme] = []
    if fits_device:
        candidates.append(Scheme(SchemeKind.TABLE_WISE))
    rw_candidates: list[Scheme] = []
    if not fits_device or policy.fine_grain:
        max_k = min(W, table.num_rows, policy.max_row_shards or W)
        for k in _powers_of_two_up_to(max_k):
            rows = -(-table.num_rows // k)
            if table_storage_bytes(rows, table.dim, table, policy.flags) <= device_budget:
                rw_candidates.append(Scheme(SchemeKind.ROW_WISE, num_row_shards=k))
    candidates.extend(rw_candidates)
    # Column splits serve the fine-grain load-balancing role; for oversized
    # tables they only step in when rows cannot split (they replicate input
    # indices and per-row optimizer state, defeating capacity sharding).
    if policy.fine_grain or (not fits_device and not rw_candidates):
        for c in _powers_of_two_up_to(min(W, table.dim // policy.min_col_width)):
            if table.dim % c:
                continue
            width = table.dim // c
            if table_storage_bytes(table.num_rows, width, table, policy.flags) <= device_budget:
                candidates.append(
                    Scheme(
                        SchemeKind.COLUMN_WISE,
                        col_splits=tuple(even_bounds(table.dim, c)),
                    )
                )
    threshold = policy.dp_threshold_bytes
    if threshold is None:
        threshold = cluster.hbm_capacity_per_gpu // 1000
    if table.num_rows * table.dim * table.elem_bytes <= threshold and fits_device:
        candidates.append(Scheme(SchemeKind.DATA_PARALLEL))
    if not candidates:
        raise NoFeasibleScheme(f"no scheme places table {table.id} on this cluster")
    return candidates


# ---------------------------------------------------------------------------
# partitioning heuristics


def greedy_partition(items: Sequence[tuple], k: int) -> dict:
    """Largest-first greedy: seed k bins, then fill the lightest bin.

    Ties between bins break toward the lowest bin index.
    """
    if k < 1:
        raise InvalidValue("k", "must be >= 1")
    order = sorted(items, key=lambda it: (-it[1], it[0]))
    sums = [0.0] * k
    assign = {}
    for i, (item_id, cost) in enumerate(order):
        if i < k:
            bin_idx = i
        else:
            bin_idx = min(range(k), key=lambda j: sums[j])
        assign[item_id] = bin_idx
        sums[bin_idx] += cost
    return assign


def karmarkar_karp_partition(items: Sequence[tuple], k: int) -> dict:
    """k-way largest differencing method with full partition reconstruction.

    Maintains a max-priority heap of k-tuples keyed by spread (max sum - min
    sum, ties toward the smallest contained id); combining merges the largest
    spread against the smallest sums. k=2 is the classic LDM.
    """
    if k < 1:
        raise InvalidValue("k", "must be >= 1")
    if not items:
        return {}
    if k == 1:
        return {item_id: 0 for item_id, _ in items}
    heap = []
    for seq, (item_id, cost) in enumerate(sorted(items, key=lambda it: it[0])):
        sums = [float(cost)] + [0.0] * (k - 1)
        groups = [[item_id]] + [[] for _ in range(k - 1)]
        heapq.heappush(heap, (-cost, seq, sums, groups))
    counter = len(heap)
    while len(heap) > 1:
        _, seq_a, sums_a, groups_a = heapq.heappop(heap)
        _, seq_b, sums_b, groups_b = heapq.heappop(heap)
        # largest sums of A absorb the smallest sums of B
        merged = [
            (sums_a[i] + sums_b[k - 1 - i], groups_a[i] + groups_b[k - 1 - i])
            for i in range(k)
        ]
        merged.sort(key=lambda sg: -sg[0])
        sums = [s for s, _ in merged]
        groups = [g for _, g in merged]
        spread = sums[0] - sums[-1]
        heapq.heappush(heap, (-spread, min(seq_a, seq_b), sums, groups))
        counter += 1
    _, _, sums, groups = heap[0]
    assign = {}
    for bin_idx, group in enumerate(groups):
        for item_id in group:
            assign[item_id] = bin_idx
    return assign


HEURISTICS = {"greedy": greedy_partition, "kk": karmarkar_karp_partition}


# ---------------------------------------------------------------------------
# scalar objective


@dataclass(frozen=True)
class CostNorms:
    """Per-term means used to bring comm/load/latency to a common scale."""

    comm: float
    load: float
    latency: float


def cost_norms(costs: Sequence[ShardCost]) -> CostNorms:
    n = max(len(costs), 1)
    return CostNorms(
        comm=sum(c.comm_bytes for c in costs) / n,
        load=sum(c.load for c in costs) / n,
        latency=sum(c.fixed_latency for c in costs) / n,
    )


def scalar_objective(cost: ShardCost, weights: CostWeights, norms: CostNorms) -> float:
    total = 0.0
    if norms.comm > 0:
        total += weights.w_comm * cost.comm_bytes / norms.comm
    if norms.load > 0:
        total += weights.w_load * cost.load / norms.load
    if norms.latency > 0:
        total += weights.w_latency * cost.fixed_latency / norms.latency
    return total


def candidate_costs(
    model: ModelSpec, cluster: ClusterSpec, policy: CandidatePolicy
) -> dict[str, list[tuple[Scheme, ShardCost]]]:
    global_batch = model.local_batch * cluster.num_workers
    return {
        t.id: [
            (scheme, shard_cost(t, scheme, cluster, global_batch))
            for scheme in enumerate_candidates(t, cluster, policy)
        ]
        for t in model.tables
    }


def plan_objective(
    plan: ShardingPlan,
    model: ModelSpec,
    cluster: ClusterSpec,
    weights: CostWeights,
    norms: CostNorms,
) -> float:
    """Max over workers of the weighted per-worker cost; DP shards charge
    every worker identically."""
    global_batch = model.local_batch * plan.num_workers
    totals = [0.0] * plan.num_workers
    for assignment in plan.assignments:
        table = model.tables[model.table_index(assignment.table_id)]
        cost = shard_cost(table, assignment.scheme, cluster, global_batch)
        obj = scalar_objective(cost, weights, norms)
        for shard in assignment.shards:
            if shard.worker is None:
                for w in range(plan.num_workers):
                    totals[w] += obj
            else:
                totals[shard.worker] += obj
    return max(totals) if totals else 0.0


# ---------------------------------------------------------------------------
# memory accounting


@dataclass(frozen=True)
class WorkerMemory:
    worker: int
    table_bytes: int
    optimizer_bytes: int
    dense_bytes: int
    tier: str  # "hbm" | "hbm+dram" | "infeasible"

    @property
    def total_bytes(self) -> int:
        return self.table_bytes + self.optimizer_bytes + self.dense_bytes


@dataclass(frozen=True)
class MemoryReport:
    workers: tuple[WorkerMemory, ...]
    feasible: bool

    @property
    def total_bytes(self) -> int:
        return sum(w.total_bytes for w in self.workers)


def memory_check(
    plan: ShardingPlan,
    model: ModelSpec,
    cluster: ClusterSpec,
    flags: CompressionFlags,
) -> MemoryReport:
    """Per-worker bytes (values + optimizer state + dense replica) and the
    memory tier each placement lands in."""
    table_by_id = {t.id: t for t in model.tables}
    values = [0] * plan.num_workers
    states = [0] * plan.num_workers
    for assignment in plan.assignments:
        table = table_by_id[assignment.table_id]
        prec = flags.table_precision or table.value_precision
        elem = PRECISION_BYTES[prec]
        for shard in assignment.shards:
            rows = shard_rows(table, shard)
            width = shard_width(table, shard)
            value_bytes = rows * width * elem
            if flags.rowwise_optimizer:
                state_bytes = rows * OPTIMIZER_STATE_BYTES
            else:
                state_bytes = rows * width * OPTIMIZER_STATE_BYTES
            targets = (
                range(plan.num_workers) if shard.worker is None else (shard.worker,)
            )
            for w in targets:
                values[w] += value_bytes
                states[w] += state_bytes
    workers = []
    feasible = True
    hbm = cluster.hbm_capacity_per_gpu
    budget = hbm + cluster.dram_capacity_per_gpu
    for w in range(plan.num_workers):
        total = values[w] + states[w] + model.dense_param_bytes
        if total <= hbm:
            tier = "hbm"
        elif total <= budget:
            tier = "hbm+dram"
        else:
            tier = "infeasible"
            feasible = False
        workers.append(
            WorkerMemory(
                worker=w,
                table_bytes=values[w],
                optimizer_bytes=states[w],
                dense_bytes=model.dense_param_bytes,
                tier=tier,
            )
        )
    return MemoryReport(workers=tuple(workers), feasible=feasible)


# ---------------------------------------------------------------------------
# plan construction


def _materialize(table: TableSpec, scheme: Scheme, workers: Sequence[int]) -> TableAssignment:
    if scheme.kind is SchemeKind.DATA_PARALLEL:
        return TableAssignment(table.id, scheme, (Shard(worker=None),))
    if scheme.kind is SchemeKind.TABLE_WISE:
        return TableAssignment(table.id, scheme, (Shard(worker=workers[0]),))
    if scheme.kind is SchemeKind.ROW_WISE:
        bounds = even_bounds(table.num_rows, scheme.num_row_shards)
        shards = tuple(
            Shard(worker=workers[i], rows=bounds[i]) for i in range(len(bounds))
        )
        return TableAssignment(table.id, scheme, shards)
    shards = tuple(
        Shard(worker=workers[i], cols=scheme.col_splits[i])
        for i in range(len(scheme.col_splits))
    )
    return TableAssignment(table.id, scheme, shards)


def _next_finer(ordered: list, idx: int) -> Optional[int]:
    """Index of the next candidate that splits into strictly more shards."""
    current = ordered[idx][0].num_shards
    for j in range(idx + 1, len(ordered)):
        if ordered[j][0].num_shards > current:
            return j
    return None


def plan_4d(
    model: ModelSpec,
    cluster: ClusterSpec,
    weights: CostWeights,
    policy: CandidatePolicy,
    heuristic: str = "greedy",
) -> ShardingPlan:
    """Select a scheme per table and place all shards across workers.

    Candidates are ranked by the normalized scalar objective; non-DP shards
    are partitioned with the chosen heuristic. If the resulting placement
    fails the memory check, the most memory-hungry offending table is moved
    to its next finer candidate and placement is retried; a final attempt
    balances shard bytes instead of the objective.
    """
    if heuristic not in HEURISTICS:
        raise InvalidValue("heuristic", f"unknown heuristic {heuristic!r}")
    W = cluster.num_workers
    if not model.tables:
        return ShardingPlan(W, cluster.gpus_per_node, (), heuristic)
    total_bytes = sum(
        table_storage_bytes(t.num_rows, t.dim, t, policy.flags) for t in model.tables
    )
    cluster_total = (
        W * cluster.hbm_capacity_per_gpu
        + cluster.num_nodes * cluster.dram_capacity_per_node
    )
    if total_bytes > cluster_total:
        raise Infeasible(
            f"model needs {total_bytes} bytes, cluster has {cluster_total}"
        )
    try:
        cands = candidate_costs(model, cluster, policy)
    except NoFeasibleScheme as exc:
        raise Infeasible(str(exc)) from None
    norms = cost_norms([c for lst in cands.values() for _, c in lst])

    def aggregate(entry):
        # DP replicas charge every worker, so they weigh W times in the
        # pooled-AlltoAll vs whole-table-AllReduce trade-off
        scheme, cost = entry
        multiplier = W if scheme.kind is SchemeKind.DATA_PARALLEL else scheme.num_shards
        return multiplier * scalar_objective(cost, weights, norms)

    ordered = {
        tid: sorted(lst, key=lambda e: (aggregate(e), e[0].kind.value, e[0].num_shards))
        for tid, lst in cands.items()
    }
    choice = {tid: 0 for tid in ordered}
    max_attempts = sum(len(lst) for lst in ordered.values()) + 1
    plan = None
    for _ in range(max_attempts):
        plan = _build_plan(model, cluster, ordered, choice, weights, norms, heuristic)
        report = memory_check(plan, model, cluster, policy.flags)
        if report.feasible:
            return plan
        overloaded = {m.worker for m in report.workers if m.tier == "infeasible"}
        offenders = []
        for assignment in plan.assignments:
            if any(s.worker in overloaded for s in assignment.shards):
                nxt = _next_finer(ordered[assignment.table_id], choice[assignment.table_id])
                if nxt is not None:
                    table = model.tables[model.table_index(assignment.table_id)]
                    scheme, _ = ordered[assignment.table_id][choice[assignment.table_id]]
                    rows = -(-table.num_rows // scheme.num_shards)
                    offenders.append(
                        (
                            table_storage_bytes(rows, table.dim, table, policy.flags),
                            assignment.table_id,
                            nxt,
                        )
                    )
        if not offenders:
            break
        offenders.sort(key=lambda o: (-o[0], o[1]))
        _, tid, nxt = offenders[0]
        choice[tid] = nxt
    # last resort: balance bytes rather than the objective
    plan = _build_plan(
        model, cluster, ordered, choice, weights, norms, heuristic, by_memory=policy
    )
    report = memory_check(plan, model, cluster, policy.flags)
    if report.feasible:
        return plan
    worst = max(report.workers, key=lambda m: m.total_bytes)
    raise Infeasible(
        f"no feasible placement found; worker {worst.worker} needs "
        f"{worst.total_bytes} bytes"
    )


def _build_plan(
    model: ModelSpec,
    cluster: ClusterSpec,
    ordered: dict,
    choice: dict,
    weights: CostWeights,
    norms: CostNorms,
    heuristic: str,
    by_memory: Optional[CandidatePolicy] = None,
) -> ShardingPlan:
    W = cluster.num_workers
    items = []
    shard_refs = {}
    dp_tables = []
    for table in model.tables:
        scheme, cost = ordered[table.id][choice[table.id]]
        if scheme.kind is SchemeKind.DATA_PARALLEL:
            dp_tables.append((table, scheme))
            continue
        if by_memory is not None:
            rows = -(-table.num_rows // scheme.num_shards)
            width = (
                scheme.col_splits[0][1] - scheme.col_splits[0][0]
                if scheme.kind is SchemeKind.COLUMN_WISE
                else table.dim
            )
            per_shard = float(
                table_storage_bytes(
                    rows if scheme.kind is SchemeKind.ROW_WISE else table.num_rows,
                    width,
                    table,
                    by_memory.flags,
                )
            )
        else:
            per_shard = scalar_objective(cost, weights, norms)
        for i in range(scheme.num_shards):
            uid = f"{table.id}#{i}"
            items.append((uid, per_shard))
            shard_refs[uid] = (table, scheme, i)
    assign = HEURISTICS[heuristic](items, W)
    workers_by_table: dict[str, list[int]] = {}
    for uid, worker in assign.items():
        table, scheme, i = shard_refs[uid]
        workers_by_table.setdefault(table.id, [None] * scheme.num_shards)
        workers_by_table[table.id][i] = worker
    assignments = []
    for table in model.tables:
        scheme, _ = ordered[table.id][choice[table.id]]
        if scheme.kind is SchemeKind.DATA_PARALLEL:
            assignments.append(_materialize(table, scheme, []))
        else:
            assignments.append(_materialize(table, scheme, workers_by_table[table.id]))
    return ShardingPlan(W, cluster.gpus_per_node, tuple(assignments), heuristic)


def hierarchical_plan(
    model: ModelSpec,
    cluster: ClusterSpec,
    weights: CostWeights,
    policy: CandidatePolicy,
) -> ShardingPlan:
    """Table-wise across nodes first, then row-wise across each node's GPUs.

    Keeps the partial-pool reduction on the intra-node fabric so only final
    pooled rows cross the scale-out network. A single-node cluster degenerates
    to the flat planner.
    """
    if cluster.num_nodes < 2:
        return plan_4d(model, cluster, weights, policy, heuristic="kk")
    W = cluster.num_workers
    if not model.tables:
        return ShardingPlan(W, cluster.gpus_per_node, (), "kk")
    global_batch = model.local_batch * W
    tw_costs = {
        t.id: shard_cost(t, Scheme(SchemeKind.TABLE_WISE), cluster, global_batch)
        for t in model.tables
    }
    norms = cost_norms(list(tw_costs.values()))
    items = [
        (t.id, scalar_objective(tw_costs[t.id], weights, norms)) for t in model.tables
    ]
    node_of_table = karmarkar_karp_partition(items, cluster.num_nodes)
    gpn = cluster.gpus_per_node
    assignments = []
    for table in model.tables:
        node = node_of_table[table.id]
        k = min(gpn, table.num_rows)
        bounds = even_bounds(table.num_rows, k)
        scheme = Scheme(
            SchemeKind.ROW_WISE,
            num_row_shards=k,
            hierarchical=(SchemeKind.TABLE_WISE, SchemeKind.ROW_WISE),
        )
        shards = tuple(
            Shard(worker=node * gpn + i % gpn, rows=bounds[i]) for i in range(k)
        )
        assignments.append(TableAssignment(table.id, scheme, shards))
    plan = ShardingPlan(W, gpn, tuple(assignments), "kk")
    report = memory_check(plan, model, cluster, policy.flags)
    if not report.feasible:
        worst = max(report.workers, key=lambda m: m.total_bytes)
        raise Infeasible(
            f"hierarchical placement overflows worker {worst.worker} "
            f"({worst.total_bytes} bytes)"
        )
    return plan


# ---------------------------------------------------------------------------
# plan validation and JSON round-trip


def validate_plan(plan: ShardingPlan, model: ModelSpec) -> None:
    """Coverage and placement invariants; raises InvalidScheme on breach."""
    seen = set()
    table_by_id = {t.id: t for t in model.tables}
    for assignment in plan.assignments:
        table = table_by_id.get(assignment.table_id)
        if table is None:
            raise InvalidScheme(f"plan names unknown table {assignment.table_id}")
        if assignment.table_id in seen:
            raise InvalidScheme(f"table {assignment.table_id} assigned twice")
        seen.add(assignment.table_id)
        kind = assignment.scheme.kind
        shards = assignment.shards
        for shard in shards:
            if shard.worker is not None and not 0 <= shard.worker < plan.num_workers:
                raise InvalidScheme(
                    f"{assignment.table_id}: worker {shard.worker} out of range"
                )
            if (shard.worker is None) != (kind is SchemeKind.DATA_PARALLEL):
                raise InvalidScheme(
                    f"{assignment.table_id}: replicated shard only valid for DP"
                )
        if kind is SchemeKind.ROW_WISE:
            bounds = sorted(s.rows for s in shards)
            if any(s.rows is None for s in shards):
                raise InvalidScheme(f"{assignment.table_id}: row shard missing bounds")
            pos = 0
            for a, b in bounds:
                if a != pos or b <= a:
                    raise InvalidScheme(
                        f"{assignment.table_id}: row shards must tile [0, H)"
                    )
                pos = b
            if pos != table.num_rows:
                raise InvalidScheme(
                    f"{assignment.table_id}: row shards must cover [0, {table.num_rows})"
                )
        elif kind is SchemeKind.COLUMN_WISE:
            bounds = sorted(s.cols for s in shards)
            pos = 0
            for a, b in bounds:
                if a != pos or b <= a:
                    raise InvalidScheme(
                        f"{assignment.table_id}: column shards must tile [0, D)"
                    )
                pos = b
            if pos != table.dim:
                raise InvalidScheme(
                    f"{assignment.table_id}: column shards must cover [0, {table.dim})"
                )
        elif len(shards) != 1:
            raise InvalidScheme(f"{assignment.table_id}: expected a single shard")
    missing = set(table_by_id) - seen
    if missing:
        raise InvalidScheme(f"tables not assigned: {sorted(missing)}")


def plan_to_json(
    plan: ShardingPlan,
    model: Optional[ModelSpec] = None,
    cluster: Optional[ClusterSpec] = None,
    flags: CompressionFlags = CompressionFlags(),
) -> str:
    doc = {
        "spec_version": SPEC_VERSION,
        "num_workers": plan.num_workers,
        "gpus_per_node": plan.gpus_per_node,
        "heuristic": plan.heuristic,
        "tables": [
            {
                "table_id": a.table_id,
                "scheme": _scheme_to_doc(a.scheme),
                "shards": [
                    {
                        "worker": s.worker,
                        **({"rows": list(s.rows)} if s.rows else {}),
                        **({"cols": list(s.cols)} if s.cols else {}),
                    }
                    for s in a.shards
                ],
            }
            for a in plan.assignments
        ],
    }
    if model is not None and cluster is not None:
        report = memory_check(plan, model, cluster, flags)
        doc["workers"] = [
            {
                "worker": m.worker,
                "table_bytes": m.table_bytes,
                "optimizer_bytes": m.optimizer_bytes,
                "dense_bytes": m.dense_bytes,
                "total_bytes": m.total_bytes,
                "tier": m.tier,
            }
            for m in report.workers
        ]
    return json.dumps(doc, indent=2, sort_keys=True)


def _scheme_to_doc(scheme: Scheme) -> dict:
    doc: dict = {"kind": scheme.kind.value}
    if scheme.kind is SchemeKind.ROW_WISE:
        doc["num_row_shards"] = scheme.num_row_shards
    if scheme.kind is SchemeKind.COLUMN_WISE:
        doc["col_splits"] = [list(p) for p in scheme.col_splits]
    if scheme.hierarchical:
        doc["hierarchical"] = [kind.value for kind in scheme.hierarchical]
    return doc


def plan_from_json(text: str) -> ShardingPlan:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedDocument(f"not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise MalformedDocument("plan document must be an object")
    try:
        num_workers = doc["num_workers"]
        gpus_per_node = doc.get("gpus_per_node", num_workers)
        heuristic = doc.get("heuristic", "greedy")
        assignments = []
        for td in doc["tables"]:
            sd = td["scheme"]
            kind = SchemeKind(sd["kind"])
            scheme = Scheme(
                kind,
                num_row_shards=sd.get("num_row_shards", 1),
                col_splits=tuple(tuple(p) for p in sd.get("col_splits", [])),
                hierarchical=(
                    tuple(SchemeKind(v) for v in sd["hierarchical"])
                    if "hierarchical" in sd
                    else None
                ),
            )
            shards = tuple(
                Shard(
                    worker=s.get("worker"),
                    rows=tuple(s["rows"]) if "rows" in s else None,
                    cols=tuple(s["cols"]) if "cols" in s else None,
                )
                for s in td["shards"]
            )
            assignments.append(TableAssignment(td["table_id"], scheme, shards))
    except KeyError as exc:
        raise MissingKey(str(exc)) from None
    except (TypeError, ValueError) as exc:
        raise InvalidValue("plan", str(exc)) from None
    return ShardingPlan(num_workers, gpus_per_node, tuple(assignments), heuristic)
