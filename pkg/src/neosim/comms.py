"""Input redistribution semantics, collective volume models and the
simulated multi-worker training step.

Collectives are executed in-process with deterministic scheduling: this
module owns the data movement and per-worker volumes, latency belongs to the
performance model. Pooled AlltoAll send volumes exclude a worker's own slice
(self-traffic is free under per-link accounting).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .embedding import (
    EmbeddingTable,
    OptimizerConfig,
    OptimizerKind,
    apply_optimizer,
    backward_sort_aggregate,
    build_tables,
    forward_pooled,
    merge_row_gradients,
    storage_roundtrip,
)
from .errors import IndexOutOfRange, InvalidValue, LayoutMismatch
from .model import (
    CombinedBatch,
    ClusterSpec,
    GlobalBatchLayout,
    LayoutTag,
    ModelSpec,
    Precision,
    PRECISION_BYTES,
)
from .planner import (
    Shard,
    ShardingPlan,
    SchemeKind,
    shard_width,
    validate_plan,
)

LENGTH_BYTES = 8  # lengths travel as int64 in the metadata phase


class CollectiveKind(str, Enum):
    ALLTOALL = "alltoall"
    ALLREDUCE = "allreduce"
    REDUCE_SCATTER = "reduce_scatter"
    ONE_TO_MANY = "one_to_many"
    MANY_TO_MANY = "many_to_many"


@dataclass(frozen=True)
class CollectiveVolume:
    """Per-worker send bytes for one logical collective.

    payload_elem_bytes records the element width the payload was computed at
    (None for raw-byte payloads); metadata_bytes is the lengths phase, which
    quantization never scales.
    """

    kind: CollectiveKind
    label: str
    per_worker_send_bytes: tuple[float, ...]
    message_count: int
    payload_elem_bytes: Optional[int] = None
    direction: Optional[str] = None  # "fwd" | "bwd" | None
    metadata_bytes: tuple[float, ...] = ()

    def __post_init__(self):
        if any(b < 0 for b in self.per_worker_send_bytes):
            raise InvalidValue("per_worker_send_bytes", "must be >= 0")
        if self.kind is CollectiveKind.ALLREDUCE and self.per_worker_send_bytes:
            first = self.per_worker_send_bytes[0]
            if any(b != first for b in self.per_worker_send_bytes):
                raise InvalidValue(
                    "per_worker_send_bytes", "AllReduce volume must match across workers"
                )

    @property
    def total_bytes(self) -> float:
        return sum(self.per_worker_send_bytes)

    @property
    def max_bytes(self) -> float:
        return max(self.per_worker_send_bytes, default=0.0)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "label": self.label,
            "per_worker_send_bytes": list(self.per_worker_send_bytes),
            "message_count": self.message_count,
            "metadata_bytes": list(self.metadata_bytes),
        }


# ---------------------------------------------------------------------------
# bucketize / replicate / permute


def bucketize_rowwise(
    lengths: np.ndarray,
    indices: np.ndarray,
    boundaries: Sequence[tuple[int, int]],
    table_id: str = "",
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Route each index to the row shard containing it, rebased to the shard.

    Per-sample lengths are recomputed per shard; the original order of
    indices is preserved within each bucket.
    """
    lengths = np.asarray(lengths, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    if int(lengths.sum()) != len(indices):
        raise LayoutMismatch("lengths do not cover the index buffer")
    pos = 0
    for a, b in boundaries:
        if a != pos or b <= a:
            raise InvalidValue("boundaries", "must tile [0, H) in order")
        pos = b
    if len(indices) and (indices.min() < 0 or indices.max() >= pos):
        bad = indices[(indices < 0) | (indices >= pos)][0]
        raise IndexOutOfRange(table_id, int(bad))
    starts = np.array([a for a, _ in boundaries], dtype=np.int64)
    ends = np.array([b for _, b in boundaries], dtype=np.int64)
    shard_of = np.searchsorted(ends, indices, side="right")
    sample_ids = np.repeat(np.arange(len(lengths)), lengths)
    out = []
    for s in range(len(boundaries)):
        mask = shard_of == s
        shard_lengths = np.bincount(
            sample_ids[mask], minlength=len(lengths)
        ).astype(np.int64)
        out.append((shard_lengths, indices[mask] - starts[s]))
    return out


def unbucketize_rowwise(
    parts: Sequence[tuple[np.ndarray, np.ndarray]],
    boundaries: Sequence[tuple[int, int]],
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of bucketize up to per-sample index order (multiset identity)."""
    num_samples = len(parts[0][0])
    lengths = np.zeros(num_samples, dtype=np.int64)
    per_sample_chunks: list[list[np.ndarray]] = [[] for _ in range(num_samples)]
    for (part_lengths, part_indices), (start, _) in zip(parts, boundaries):
        lengths += part_lengths
        offsets = np.concatenate(([0], np.cumsum(part_lengths)))
        for s in range(num_samples):
            per_sample_chunks[s].append(part_indices[offsets[s] : offsets[s + 1]] + start)
    chunks = [c for group in per_sample_chunks for c in group]
    indices = (
        np.concatenate(chunks) if chunks else np.empty(0, dtype=np.int64)
    )
    return lengths, indices


def replicate_columnwise(
    lengths: np.ndarray, indices: np.ndarray, num_col_shards: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Byte-identical input copies, one per column shard."""
    if num_col_shards < 1:
        raise InvalidValue("num_col_shards", "must be >= 1")
    lengths = np.asarray(lengths, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    return [(lengths.copy(), indices.copy()) for _ in range(num_col_shards)]


@dataclass(frozen=True)
class LaidOutBatch:
    """A flattened global batch whose blocks follow the layout tag order.

    In WTB order block (w, t) holds worker w's local-batch lengths and index
    chunk for table t; TWB is the table-major order the kernels consume.
    """

    layout: GlobalBatchLayout
    lengths: np.ndarray
    indices: np.ndarray

    def __post_init__(self):
        expected = self.layout.workers * self.layout.tables * self.layout.local_batch
        if len(self.lengths) != expected:
            raise LayoutMismatch(
                f"expected {expected} length entries, got {len(self.lengths)}"
            )
        if int(np.sum(self.lengths)) != len(self.indices):
            raise LayoutMismatch("lengths do not cover the index buffer")


def to_wtb(batch: CombinedBatch, workers: int) -> LaidOutBatch:
    """Lay a canonical batch out in (W, T, B) wire order.

    Global sample w*B + b is worker w's local sample b.
    """
    if workers < 1 or batch.num_samples % workers:
        raise LayoutMismatch("workers must divide the global sample count")
    T = batch.num_tables
    B = batch.num_samples // workers
    layout = GlobalBatchLayout(workers, T, B, LayoutTag.WTB)
    lengths_chunks = []
    index_chunks = []
    for w in range(workers):
        for t in range(T):
            lens_t, idx_t = batch.table_slice(t)
            offsets = np.concatenate(([0], np.cumsum(lens_t)))
            lengths_chunks.append(lens_t[w * B : (w + 1) * B])
            index_chunks.append(idx_t[offsets[w * B] : offsets[(w + 1) * B]])
    return LaidOutBatch(
        layout,
        np.concatenate(lengths_chunks) if lengths_chunks else np.empty(0, np.int64),
        np.concatenate(index_chunks) if index_chunks else np.empty(0, np.int64),
    )


def _permute_blocks(laidout: LaidOutBatch, new_tag: LayoutTag) -> LaidOutBatch:
    layout = laidout.layout
    W, T, B = layout.workers, layout.tables, layout.local_batch
    if layout.tag is LayoutTag.WTB:
        outer, inner = W, T
    else:
        outer, inner = T, W
    lengths_mat = laidout.lengths.reshape(outer, inner, B)
    block_counts = lengths_mat.sum(axis=2)
    offsets = np.concatenate(([0], np.cumsum(block_counts.reshape(-1))))
    lengths_chunks = []
    index_chunks = []
    for i in range(inner):
        for o in range(outer):
            blk = o * inner + i
            lengths_chunks.append(lengths_mat[o, i])
            index_chunks.append(laidout.indices[offsets[blk] : offsets[blk + 1]])
    return LaidOutBatch(
        GlobalBatchLayout(W, T, B, new_tag),
        np.concatenate(lengths_chunks) if lengths_chunks else np.empty(0, np.int64),
        np.concatenate(index_chunks) if index_chunks else np.empty(0, np.int64),
    )


def permute_WTB_to_TWB(laidout: LaidOutBatch) -> LaidOutBatch:
    """Block permutation from worker-major to table-major order."""
    if laidout.layout.tag is not LayoutTag.WTB:
        raise LayoutMismatch("expected WTB layout")
    return _permute_blocks(laidout, LayoutTag.TWB)


def permute_TWB_to_WTB(laidout: LaidOutBatch) -> LaidOutBatch:
    if laidout.layout.tag is not LayoutTag.TWB:
        raise LayoutMismatch("expected TWB layout")
    return _permute_blocks(laidout, LayoutTag.WTB)


def from_twb(laidout: LaidOutBatch) -> CombinedBatch:
    if laidout.layout.tag is not LayoutTag.TWB:
        raise LayoutMismatch("expected TWB layout")
    layout = laidout.layout
    lengths = laidout.lengths.reshape(layout.tables, layout.workers * layout.local_batch)
    return CombinedBatch(lengths, laidout.indices)


# ---------------------------------------------------------------------------
# redistribution


@dataclass
class ShardInput:
    """Post-redistribution input slice for one shard on one worker."""

    table_id: str
    shard: Shard
    lengths: np.ndarray
    indices: np.ndarray
    sample_base: int = 0  # first covered global sample (non-zero only for DP)


@dataclass
class WorkerSlice:
    worker: int
    inputs: list[ShardInput] = field(default_factory=list)


def _rw_boundaries(assignment) -> list[tuple[int, int]]:
    return sorted(s.rows for s in assignment.shards)


def alltoall_redistribute(
    laidout: LaidOutBatch, plan: ShardingPlan, model: ModelSpec
) -> list[WorkerSlice]:
    """Two-phase exchange: lengths first, then variable-size indices.

    Every worker ends up with the full global batch for each of its local
    table shards, received worker-major and permuted table-major; row-wise
    shards receive bucketized shard-local indices, column shards identical
    replicas, data-parallel tables keep their local slice.
    """
    layout = laidout.layout
    if layout.tag is not LayoutTag.WTB:
        raise LayoutMismatch("redistribution consumes the WTB wire order")
    if layout.workers != plan.num_workers or layout.tables != model.num_tables:
        raise LayoutMismatch("batch layout does not match plan/model")
    W, T, B = layout.workers, layout.tables, layout.local_batch
    lengths_mat = laidout.lengths.reshape(W, T, B)
    block_counts = lengths_mat.sum(axis=2)
    offsets = np.concatenate(([0], np.cumsum(block_counts.reshape(-1))))

    def block(w: int, t: int) -> tuple[np.ndarray, np.ndarray]:
        blk = w * T + t
        return lengths_mat[w, t], laidout.indices[offsets[blk] : offsets[blk + 1]]

    slices = [WorkerSlice(worker=v) for v in range(W)]
    for t, table in enumerate(model.tables):
        assignment = plan.assignment_for(table.id)
        kind = assignment.scheme.kind
        if kind is SchemeKind.DATA_PARALLEL:
            shard = assignment.shards[0]
            for v in range(W):
                lens, idx = block(v, t)
                slices[v].inputs.append(
                    ShardInput(table.id, shard, lens.copy(), idx.copy(), sample_base=v * B)
                )
            continue
        if kind is SchemeKind.ROW_WISE:
            boundaries = _rw_boundaries(assignment)
            shard_by_rows = {s.rows: s for s in assignment.shards}
            # phase 1+2 per source worker: bucketize locally, send to shard owners
            received: dict[tuple, list] = {bounds: [] for bounds in boundaries}
            for w in range(W):
                lens, idx = block(w, t)
                parts = bucketize_rowwise(lens, idx, boundaries, table.id)
                for bounds, part in zip(boundaries, parts):
                    received[bounds].append(part)
            for bounds in boundaries:
                shard = shard_by_rows[bounds]
                parts = received[bounds]
                lens = np.concatenate([p[0] for p in parts])
                idx = np.concatenate([p[1] for p in parts])
                slices[shard.worker].inputs.append(
                    ShardInput(table.id, shard, lens, idx)
                )
            continue
        # TABLE_WISE and COLUMN_WISE receive the raw global stream; column
        # shards each get a full replica of the indices.
        for shard in assignment.shards:
            lens = np.concatenate([block(w, t)[0] for w in range(W)])
            idx = np.concatenate([block(w, t)[1] for w in range(W)])
            slices[shard.worker].inputs.append(ShardInput(table.id, shard, lens, idx))
    return slices


# ---------------------------------------------------------------------------
# collective volume models


# Pooled embeddings travel as activations: 4-byte elements unless the caller
# overrides or quantized_volume rescales. Table storage precision only
# affects parameter traffic (DP gradient AllReduce) and memory reads.
ACTIVATION_BYTES = PRECISION_BYTES[Precision.FP32]


def volume_forward_alltoall(
    plan: ShardingPlan,
    model: ModelSpec,
    num_workers: int,
    elem_bytes: Optional[int] = None,
) -> CollectiveVolume:
    """Pooled-output exchange: each worker sends its local TW/CW shard rows
    destined to other workers, D_shard x (global - local) x elem bytes."""
    elem = ACTIVATION_BYTES if elem_bytes is None else elem_bytes
    global_batch = model.local_batch * num_workers
    remote = global_batch - model.local_batch
    send = [0.0] * num_workers
    for assignment in plan.assignments:
        table = model.tables[model.table_index(assignment.table_id)]
        if assignment.scheme.kind not in (SchemeKind.TABLE_WISE, SchemeKind.COLUMN_WISE):
            continue
        for shard in assignment.shards:
            width = shard_width(table, shard)
            send[shard.worker] += width * remote * elem
    return CollectiveVolume(
        kind=CollectiveKind.ALLTOALL,
        label="pooled_a2a_fwd",
        per_worker_send_bytes=tuple(send),
        message_count=1,
        payload_elem_bytes=elem,
        direction="fwd",
    )


def volume_gradient_collectives(
    plan: ShardingPlan,
    model: ModelSpec,
    num_workers: int,
    elem_bytes: Optional[int] = None,
) -> list[CollectiveVolume]:
    """Backward-path collectives plus the row-wise forward ReduceScatter.

    The backward pooled AlltoAll mirrors the forward volume; DP tables and
    dense parameters synchronize with ring AllReduce at 2(W-1)/W x bytes.
    """
    global_batch = model.local_batch * num_workers
    elem = ACTIVATION_BYTES if elem_bytes is None else elem_bytes
    fwd = volume_forward_alltoall(plan, model, num_workers, elem_bytes)
    out = [
        CollectiveVolume(
            kind=CollectiveKind.ALLTOALL,
            label="pooled_a2a_bwd",
            per_worker_send_bytes=fwd.per_worker_send_bytes,
            message_count=1,
            payload_elem_bytes=fwd.payload_elem_bytes,
            direction="bwd",
        )
    ]
    rs = [0.0] * num_workers
    gather = [0.0] * num_workers
    has_rw = False
    dp_bytes = 0.0
    for assignment in plan.assignments:
        table = model.tables[model.table_index(assignment.table_id)]
        kind = assignment.scheme.kind
        if kind is SchemeKind.ROW_WISE:
            has_rw = True
            k = len(assignment.shards)
            per_shard = (k - 1) / k * global_batch * table.dim * elem
            for shard in assignment.shards:
                rs[shard.worker] += per_shard
                gather[shard.worker] += per_shard
        elif kind is SchemeKind.DATA_PARALLEL:
            # parameter gradients synchronize at the table's storage width
            dp_bytes += (
                2 * (num_workers - 1) / num_workers
                * table.num_params
                * table.elem_bytes
            )
    if has_rw:
        out.append(
            CollectiveVolume(
                kind=CollectiveKind.REDUCE_SCATTER,
                label="rw_reduce_scatter_fwd",
                per_worker_send_bytes=tuple(rs),
                message_count=1,
                payload_elem_bytes=elem,
                direction="fwd",
            )
        )
        out.append(
            CollectiveVolume(
                kind=CollectiveKind.MANY_TO_MANY,
                label="rw_gather_bwd",
                per_worker_send_bytes=tuple(gather),
                message_count=1,
                payload_elem_bytes=elem,
                direction="bwd",
            )
        )
    if dp_bytes > 0:
        out.append(
            CollectiveVolume(
                kind=CollectiveKind.ALLREDUCE,
                label="dp_table_allreduce",
                per_worker_send_bytes=tuple([dp_bytes] * num_workers),
                message_count=1,
                direction="bwd",
            )
        )
    dense = 2 * (num_workers - 1) / num_workers * model.dense_param_bytes
    out.append(
        CollectiveVolume(
            kind=CollectiveKind.ALLREDUCE,
            label="dense_allreduce",
            per_worker_send_bytes=tuple([dense] * num_workers),
            message_count=1,
            direction="bwd",
        )
    )
    return out


def volume_input_alltoall(
    plan: ShardingPlan, model: ModelSpec, num_workers: int
) -> CollectiveVolume:
    """Two-phase index redistribution volume (expected under uniform skew).

    Payload counts each sender's local-batch indices routed to remote shard
    owners; column shards replicate, row shards take a 1/k split. The lengths
    phase rides in metadata_bytes.
    """
    B = model.local_batch
    send = [0.0] * num_workers
    meta = [0.0] * num_workers
    for assignment in plan.assignments:
        table = model.tables[model.table_index(assignment.table_id)]
        kind = assignment.scheme.kind
        if kind is SchemeKind.DATA_PARALLEL:
            continue
        k = len(assignment.shards)
        for shard in assignment.shards:
            share = 1.0 / k if kind is SchemeKind.ROW_WISE else 1.0
            payload = B * table.avg_pooling * share * table.index_bytes
            for w in range(num_workers):
                if w == shard.worker:
                    continue
                send[w] += payload
                meta[w] += B * LENGTH_BYTES
    return CollectiveVolume(
        kind=CollectiveKind.ALLTOALL,
        label="input_a2a",
        per_worker_send_bytes=tuple(send),
        message_count=2,  # lengths phase + indices phase
        payload_elem_bytes=None,  # integer ids, not quantizable
        direction=None,
        metadata_bytes=tuple(meta),
    )


def quantized_volume(
    volume: CollectiveVolume,
    fwd_precision: Precision,
    bwd_precision: Precision,
) -> CollectiveVolume:
    """Scale payload bytes by target/stored element width; metadata and
    direction-less payloads are untouched."""
    if volume.payload_elem_bytes is None or volume.direction is None:
        return volume
    target = fwd_precision if volume.direction == "fwd" else bwd_precision
    ratio = PRECISION_BYTES[target] / volume.payload_elem_bytes
    return CollectiveVolume(
        kind=volume.kind,
        label=volume.label,
        per_worker_send_bytes=tuple(b * ratio for b in volume.per_worker_send_bytes),
        message_count=volume.message_count,
        payload_elem_bytes=PRECISION_BYTES[target],
        direction=volume.direction,
        metadata_bytes=volume.metadata_bytes,
    )


# ---------------------------------------------------------------------------
# inter-node volume accounting


def inter_node_comm_bytes(
    plan: ShardingPlan, model: ModelSpec, cluster: ClusterSpec
) -> float:
    """Bytes crossing node boundaries per iteration under point-to-point
    accounting (forward + backward pooled traffic plus index distribution).

    Flat row-wise shards send every partial pool directly to the sample's
    origin; hierarchical row-wise reduces partials on the intra-node fabric
    and sends one pooled row per remote origin. Ring AllReduce crosses one
    link per node.
    """
    W = plan.num_workers
    gpn = plan.gpus_per_node
    B = model.local_batch
    total = 0.0

    def node(worker: int) -> int:
        return worker // gpn

    for assignment in plan.assignments:
        table = model.tables[model.table_index(assignment.table_id)]
        idx = table.index_bytes
        kind = assignment.scheme.kind
        if kind is SchemeKind.DATA_PARALLEL:
            num_nodes = -(-W // gpn)
            if num_nodes > 1:
                total += (
                    num_nodes * 2 * (W - 1) / W * table.num_params * table.elem_bytes
                )
            continue
        hierarchical = assignment.scheme.hierarchical is not None
        k = len(assignment.shards)
        if kind is SchemeKind.ROW_WISE and hierarchical:
            home = node(assignment.shards[0].worker)
            for w in range(W):
                if node(w) != home:
                    total += B * table.avg_pooling * idx  # bucketized indices
                    total += 2 * B * table.dim * ACTIVATION_BYTES  # pooled fwd + bwd
            continue
        for shard in assignment.shards:
            width = shard_width(table, shard)
            share = 1.0 / k if kind is SchemeKind.ROW_WISE else 1.0
            pooled_width = table.dim if kind is SchemeKind.ROW_WISE else width
            for w in range(W):
                if node(w) == node(shard.worker):
                    continue
                total += B * table.avg_pooling * share * idx
                total += 2 * B * pooled_width * ACTIVATION_BYTES
    num_nodes = -(-W // gpn)
    if num_nodes > 1:
        total += num_nodes * 2 * (W - 1) / W * model.dense_param_bytes
    return total


# ---------------------------------------------------------------------------
# sharded training step


@dataclass
class ShardedState:
    """Post-step parameter state: placed shards plus DP replicas per worker."""

    shards: dict[tuple[str, int], EmbeddingTable]
    dp_replicas: dict[str, list[EmbeddingTable]]


def _slice_table(
    full: EmbeddingTable, shard: Shard, cfg: OptimizerConfig
) -> EmbeddingTable:
    r0, r1 = shard.rows if shard.rows else (0, full.num_rows)
    c0, c1 = shard.cols if shard.cols else (0, full.dim)
    values = full.values[r0:r1, c0:c1].copy()
    if cfg.kind is OptimizerKind.SGD:
        moment = None
    elif cfg.kind is OptimizerKind.ROWWISE_ADAGRAD:
        # a column shard keeps an independent moment scalar per (row, shard)
        moment = np.zeros(r1 - r0, dtype=np.float64)
    else:
        moment = np.zeros((r1 - r0, c1 - c0), dtype=np.float64)
    return EmbeddingTable(full.spec, values, moment, row_base=r0, col_base=c0)


def train_step_sharded(
    model: ModelSpec,
    plan: ShardingPlan,
    batch: CombinedBatch,
    cfg: OptimizerConfig,
    seed: int = 0,
    zero_init: bool = False,
) -> tuple[np.ndarray, ShardedState]:
    """Execute one iteration across W logical workers, deterministically.

    Redistribute -> local fused forward -> pooled assembly (AlltoAll for
    TW/CW, ReduceScatter for RW, worker-local rows for DP) -> backward ->
    gradient AllReduce then one identical update per DP replica -> fused
    sparse update per shard. Outputs match train_step_reference's shape.
    """
    validate_plan(plan, model)
    batch.validate_against(model)
    W = plan.num_workers
    if batch.num_samples % W:
        raise LayoutMismatch("global batch must split evenly across workers")
    n = batch.num_samples
    full_tables = build_tables(model, cfg, seed, zero_init=zero_init)
    state = ShardedState(shards={}, dp_replicas={})
    for assignment in plan.assignments:
        t = model.table_index(assignment.table_id)
        if assignment.scheme.kind is SchemeKind.DATA_PARALLEL:
            shard = assignment.shards[0]
            state.dp_replicas[assignment.table_id] = [
                _slice_table(full_tables[t], shard, cfg) for _ in range(W)
            ]
        else:
            for i, shard in enumerate(assignment.shards):
                state.shards[(assignment.table_id, i)] = _slice_table(
                    full_tables[t], shard, cfg
                )
    laidout = to_wtb(batch, W)
    slices = alltoall_redistribute(laidout, plan, model)

    # forward: every worker pools its local shards over its received slice
    shard_inputs: dict[tuple[str, int], ShardInput] = {}
    dp_inputs: dict[tuple[str, int], ShardInput] = {}
    partials: dict[tuple[str, int], np.ndarray] = {}
    dp_partials: dict[tuple[str, int], np.ndarray] = {}
    shard_index = {
        (a.table_id, s): i
        for a in plan.assignments
        for i, s in enumerate(a.shards)
        if a.scheme.kind is not SchemeKind.DATA_PARALLEL
    }
    for worker_slice in slices:
        for si in worker_slice.inputs:
            if si.shard.worker is None:  # DP replica input, local batch only
                key = (si.table_id, worker_slice.worker)
                replica = state.dp_replicas[si.table_id][worker_slice.worker]
                dp_inputs[key] = si
                dp_partials[key] = forward_pooled(replica, si.lengths, si.indices)
            else:
                key = (si.table_id, shard_index[(si.table_id, si.shard)])
                shard_inputs[key] = si
                partials[key] = forward_pooled(
                    state.shards[key], si.lengths, si.indices
                )

    # pooled assembly into the reference output shape
    outputs = []
    for table in model.tables:
        assignment = plan.assignment_for(table.id)
        kind = assignment.scheme.kind
        if kind is SchemeKind.DATA_PARALLEL:
            full = np.vstack([dp_partials[(table.id, w)] for w in range(W)])
        elif kind is SchemeKind.ROW_WISE:
            full = np.zeros((n, table.dim), dtype=np.float64)
            for i in range(len(assignment.shards)):  # reduce partial pools
                full += partials[(table.id, i)]
        elif kind is SchemeKind.COLUMN_WISE:
            full = np.zeros((n, table.dim), dtype=np.float64)
            for i, shard in enumerate(assignment.shards):
                c0, c1 = shard.cols
                full[:, c0:c1] = partials[(table.id, i)]
        else:  # TABLE_WISE
            full = partials[(table.id, 0)]
        outputs.append(full)

    # backward from the sum-of-outputs loss: upstream gradient of ones
    for table in model.tables:
        assignment = plan.assignment_for(table.id)
        kind = assignment.scheme.kind
        if kind is SchemeKind.DATA_PARALLEL:
            parts = []
            for w in range(W):
                si = dp_inputs[(table.id, w)]
                upstream = np.ones((len(si.lengths), table.dim), dtype=np.float64)
                parts.append(backward_sort_aggregate(si.lengths, si.indices, upstream))
            merged = merge_row_gradients(parts, table.dim)  # gradient AllReduce
            for replica in state.dp_replicas[table.id]:
                apply_optimizer(replica, merged, cfg)
                storage_roundtrip(replica)
            continue
        for i, shard in enumerate(assignment.shards):
            key = (table.id, i)
            si = shard_inputs[key]
            shard_table = state.shards[key]
            upstream = np.ones((n, shard_table.dim), dtype=np.float64)
            grads = backward_sort_aggregate(si.lengths, si.indices, upstream)
            apply_optimizer(shard_table, grads, cfg)
            storage_roundtrip(shard_table)

    stacked = np.concatenate(outputs, axis=1) if outputs else np.zeros((n, 0))
    return stacked, state


def reassemble_values(
    model: ModelSpec, plan: ShardingPlan, state: ShardedState
) -> list[np.ndarray]:
    """Stitch post-step shard values back into full (H, D) matrices; DP
    tables come from replica 0 (replicas are identical by construction)."""
    out = []
    for table in model.tables:
        assignment = plan.assignment_for(table.id)
        if assignment.scheme.kind is SchemeKind.DATA_PARALLEL:
            out.append(state.dp_replicas[table.id][0].values.copy())
            continue
        full = np.zeros((table.num_rows, table.dim), dtype=np.float64)
        for i, shard in enumerate(assignment.shards):
            st = state.shards[(table.id, i)]
            r0, r1 = shard.rows if shard.rows else (0, table.num_rows)
            c0, c1 = shard.cols if shard.cols else (0, table.dim)
            full[r0:r1, c0:c1] = st.values
        out.append(full)
    return out
