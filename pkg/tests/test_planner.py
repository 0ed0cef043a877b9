"""Sharding planner: cost model, heuristics, plan construction, memory math."""

import itertools
import math

import numpy as np
import pytest

from conftest import desk_cluster, desk_model

from neosim import (
    CandidatePolicy,
    CompressionFlags,
    CostWeights,
    Infeasible,
    InvalidScheme,
    InvalidValue,
    NoFeasibleScheme,
    Precision,
    Scheme,
    SchemeKind,
    Shard,
    TableAssignment,
    TableSpec,
    ShardingPlan,
    enumerate_candidates,
    greedy_partition,
    hierarchical_plan,
    karmarkar_karp_partition,
    memory_check,
    plan_4d,
    plan_from_json,
    plan_to_json,
    shard_cost,
    validate_plan,
)
from neosim.bundled import load_bundled_cluster, load_bundled_model
from neosim.comms import inter_node_comm_bytes
from neosim.planner import (
    candidate_costs,
    cost_norms,
    even_bounds,
    plan_objective,
)

ITEMS_87654 = [("a", 8.0), ("b", 7.0), ("c", 6.0), ("d", 5.0), ("e", 4.0)]


def bin_sums(items, assignment, k):
    sums = [0.0] * k
    for item_id, cost in items:
        sums[assignment[item_id]] += cost
    return sums


def imbalance(items, assignment, k):
    sums = bin_sums(items, assignment, k)
    return max(sums) - min(sums)


def brute_force_imbalance(costs, k):
    """Exact minimal (max bin - min bin) by exhaustive assignment with
    identical-bin-sum symmetry pruning."""
    order = sorted(costs, reverse=True)
    best = math.inf
    sums = [0.0] * k

    def rec(i):
        nonlocal best
        if i == len(order):
            best = min(best, max(sums) - min(sums))
            return
        seen = set()
        for b in range(k):
            if sums[b] in seen:
                continue
            seen.add(sums[b])
            sums[b] += order[i]
            rec(i + 1)
            sums[b] -= order[i]

    rec(0)
    return best


class TestShardCost:
    def test_table_wise_load_is_batch_pooling_dim_product(self):
        table = TableSpec(id="t", num_rows=10**6, dim=128, avg_pooling=32.0)
        cost = shard_cost(table, Scheme(SchemeKind.TABLE_WISE), desk_cluster(4), 65536)
        assert cost.load == 65536 * 32 * 128

    def test_data_parallel_smallest_ring_allreduce(self):
        table = TableSpec(id="t", num_rows=1, dim=1, avg_pooling=1.0)
        cost = shard_cost(table, Scheme(SchemeKind.DATA_PARALLEL), desk_cluster(2), 2)
        assert cost.comm_bytes == 2 * (1 / 2) * 4  # 2(p-1)/p x H x D x elem

    def test_column_wise_doubles_index_payload_keeps_pooled_total(self):
        table = TableSpec(id="t", num_rows=1000, dim=128, avg_pooling=8.0)
        cluster = desk_cluster(4)
        global_batch = 1024
        tw = shard_cost(table, Scheme(SchemeKind.TABLE_WISE), cluster, global_batch)
        cw_scheme = Scheme(
            SchemeKind.COLUMN_WISE, col_splits=((0, 64), (64, 128))
        )
        cw = shard_cost(table, cw_scheme, cluster, global_batch)
        pooled_tw = table.dim * global_batch * table.elem_bytes
        index_tw = global_batch * table.avg_pooling * table.index_bytes
        # two slices together: pooled bytes unchanged, index payload doubled
        assert 2 * cw.comm_bytes == pytest.approx(pooled_tw + 2 * index_tw)
        assert tw.comm_bytes == pytest.approx(pooled_tw + index_tw)

    def test_row_wise_splits_load(self):
        table = TableSpec(id="t", num_rows=100, dim=16, avg_pooling=8.0)
        rw = shard_cost(
            table, Scheme(SchemeKind.ROW_WISE, num_row_shards=4), desk_cluster(4), 256
        )
        assert rw.load == 256 * (8.0 / 4) * 16

    def test_invalid_scheme(self):
        table = TableSpec(id="t", num_rows=3, dim=8, avg_pooling=1.0)
        with pytest.raises(InvalidScheme):
            shard_cost(
                table, Scheme(SchemeKind.ROW_WISE, num_row_shards=5), desk_cluster(2), 8
            )
        with pytest.raises(InvalidScheme):
            shard_cost(
                table,
                Scheme(SchemeKind.COLUMN_WISE, col_splits=((0, 4),)),
                desk_cluster(2),
                8,
            )


class TestEnumerateCandidates:
    def test_tiny_table_offers_data_parallel(self):
        table = TableSpec(id="t", num_rows=100, dim=4, avg_pooling=2.0)
        schemes = enumerate_candidates(table, desk_cluster(4), CandidatePolicy())
        kinds = {s.kind for s in schemes}
        assert SchemeKind.DATA_PARALLEL in kinds
        assert SchemeKind.TABLE_WISE in kinds

    def test_oversized_table_drops_table_wise_keeps_row_wise(self):
        cluster = desk_cluster(4, hbm=2**30, dram_per_node=2**30)
        rows = 2 * (cluster.hbm_capacity_per_gpu + cluster.dram_capacity_per_gpu) // (
            64 * 8
        )
        table = TableSpec(id="big", num_rows=int(rows), dim=64, avg_pooling=2.0)
        schemes = enumerate_candidates(table, cluster, CandidatePolicy())
        kinds = {s.kind for s in schemes}
        assert SchemeKind.TABLE_WISE not in kinds
        assert SchemeKind.ROW_WISE in kinds

    def test_table_exceeding_cluster_is_infeasible(self):
        cluster = desk_cluster(2, hbm=2**20, dram_per_node=2**20)
        table = TableSpec(id="huge", num_rows=10**9, dim=64, avg_pooling=2.0)
        with pytest.raises(NoFeasibleScheme):
            enumerate_candidates(table, cluster, CandidatePolicy())


class TestGreedyPartition:
    def test_descending_seed_then_lightest_bin(self):
        assignment = greedy_partition(ITEMS_87654, 2)
        sums = sorted(bin_sums(ITEMS_87654, assignment, 2))
        assert sums == [13.0, 17.0]
        assert imbalance(ITEMS_87654, assignment, 2) == 4.0

    def test_single_item_many_bins(self):
        assignment = greedy_partition([("only", 3.0)], 3)
        sums = bin_sums([("only", 3.0)], assignment, 3)
        assert sorted(sums, reverse=True) == [3.0, 0.0, 0.0]

    def test_equal_costs_one_per_bin(self):
        items = [(f"i{j}", 2.0) for j in range(4)]
        assignment = greedy_partition(items, 4)
        assert sorted(assignment.values()) == [0, 1, 2, 3]


class TestKarmarkarKarp:
    def test_largest_differencing_example(self):
        assignment = karmarkar_karp_partition(ITEMS_87654, 2)
        assert imbalance(ITEMS_87654, assignment, 2) == 2.0
        groups = {}
        for item_id, cost in ITEMS_87654:
            groups.setdefault(assignment[item_id], set()).add(cost)
        assert {frozenset(g) for g in groups.values()} == {
            frozenset({8.0, 6.0}),
            frozenset({7.0, 5.0, 4.0}),
        }

    def test_single_element(self):
        assignment = karmarkar_karp_partition([("a", 5.0)], 2)
        assert imbalance([("a", 5.0)], assignment, 2) == 5.0

    def test_brute_force_optimum_for_87654_is_zero(self):
        assert brute_force_imbalance([8, 7, 6, 5, 4], 2) == 0.0

    def test_kk_beats_greedy_on_average(self):
        # 200 seeded instances, 16 items, k=4, log-uniform costs; the margin
        # holds at every seed in 0..9, not just this one
        rng = np.random.default_rng(0)
        kk_total = greedy_total = 0.0
        for _ in range(200):
            costs = np.exp(rng.uniform(0, 3, size=16))
            items = [(f"i{j}", float(c)) for j, c in enumerate(costs)]
            kk_total += imbalance(items, karmarkar_karp_partition(items, 4), 4)
            greedy_total += imbalance(items, greedy_partition(items, 4), 4)
        assert kk_total / 200 <= greedy_total / 200

    def test_heuristics_never_beat_brute_force(self):
        rng = np.random.default_rng(1)
        for trial in range(15):
            n = int(rng.integers(4, 11))
            k = int(rng.integers(2, 4))
            costs = [float(c) for c in rng.integers(1, 64, size=n)]
            items = [(f"i{j}", c) for j, c in enumerate(costs)]
            optimum = brute_force_imbalance(costs, k)
            assert imbalance(items, karmarkar_karp_partition(items, k), k) >= optimum - 1e-9
            assert imbalance(items, greedy_partition(items, k), k) >= optimum - 1e-9

    def test_scale_invariance_of_assignments(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            items = [
                (f"i{j}", float(c)) for j, c in enumerate(rng.integers(1, 100, size=12))
            ]
            scaled = [(item_id, 8.0 * c) for item_id, c in items]
            assert greedy_partition(items, 3) == greedy_partition(scaled, 3)
            assert karmarkar_karp_partition(items, 3) == karmarkar_karp_partition(
                scaled, 3
            )


class TestPlan4d:
    def test_four_identical_tables_four_workers(self):
        tables = [
            TableSpec(id=f"t{i}", num_rows=500, dim=32, avg_pooling=4.0)
            for i in range(4)
        ]
        model = desk_model(tables)
        plan = plan_4d(
            model,
            desk_cluster(4),
            CostWeights(),
            CandidatePolicy(dp_threshold_bytes=0),
        )
        workers = sorted(a.shards[0].worker for a in plan.assignments)
        assert workers == [0, 1, 2, 3]
        assert all(
            a.scheme.kind is SchemeKind.TABLE_WISE for a in plan.assignments
        )

    def test_model_f_massive_tables_go_row_wise_across_nodes(self):
        model = load_bundled_model("model_f")
        cluster = load_bundled_cluster()
        policy = CandidatePolicy(
            flags=CompressionFlags(
                table_precision=Precision.FP16, rowwise_optimizer=True
            )
        )
        plan = plan_4d(model, cluster, CostWeights(), policy, heuristic="kk")
        for assignment in plan.assignments:
            assert assignment.scheme.kind is SchemeKind.ROW_WISE
            nodes = {s.worker // cluster.gpus_per_node for s in assignment.shards}
            assert len(nodes) > 1

    def test_empty_model_empty_plan(self):
        plan = plan_4d(desk_model(()), desk_cluster(2), CostWeights(), CandidatePolicy())
        assert plan.assignments == ()

    def test_infeasible_model(self):
        cluster = desk_cluster(2, hbm=2**20, dram_per_node=2**20)
        model = desk_model(
            [TableSpec(id="big", num_rows=10**8, dim=64, avg_pooling=2.0)]
        )
        with pytest.raises(Infeasible):
            plan_4d(model, cluster, CostWeights(), CandidatePolicy())

    def test_plan_passes_memory_check(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            tables = [
                TableSpec(
                    id=f"t{i}",
                    num_rows=int(rng.integers(100, 5000)),
                    dim=int(rng.integers(1, 16)) * 4,
                    avg_pooling=float(rng.uniform(1, 8)),
                )
                for i in range(int(rng.integers(1, 9)))
            ]
            model = desk_model(tables, local_batch=8)
            cluster = desk_cluster(4)
            policy = CandidatePolicy()
            plan = plan_4d(model, cluster, CostWeights(), policy)
            assert memory_check(plan, model, cluster, policy.flags).feasible

    def test_deterministic_byte_identical_plans(self):
        model = load_bundled_model("model_i")
        cluster = load_bundled_cluster()
        policy = CandidatePolicy(flags=CompressionFlags(rowwise_optimizer=True))
        a = plan_to_json(plan_4d(model, cluster, CostWeights(), policy, "kk"))
        b = plan_to_json(plan_4d(model, cluster, CostWeights(), policy, "kk"))
        assert a == b

    def test_objective_within_10pct_of_exhaustive(self):
        # 8 tables, 2 workers, TW/DP-only candidate space, 50 seeded instances
        rng = np.random.default_rng(4)
        cluster = desk_cluster(2)
        weights = CostWeights()
        for _ in range(50):
            tables = [
                TableSpec(
                    id=f"t{i}",
                    num_rows=int(np.exp(rng.uniform(3, 8))),
                    dim=int(rng.integers(1, 16)) * 4,
                    avg_pooling=float(rng.uniform(1, 10)),
                )
                for i in range(8)
            ]
            model = desk_model(tables, local_batch=16)
            policy = CandidatePolicy(dp_threshold_bytes=64 * 2**10)
            plan = plan_4d(model, cluster, weights, policy, heuristic="kk")
            cands = candidate_costs(model, cluster, policy)
            norms = cost_norms([c for lst in cands.values() for _, c in lst])
            achieved = plan_objective(plan, model, cluster, weights, norms)

            # exhaustive optimum over (scheme, placement) per table
            per_table_options = []
            for table in tables:
                options = []
                for scheme, cost in cands[table.id]:
                    from neosim.planner import scalar_objective

                    obj = scalar_objective(cost, weights, norms)
                    if scheme.kind is SchemeKind.DATA_PARALLEL:
                        options.append((obj, obj))
                    else:
                        options.append((obj, 0.0))
                        options.append((0.0, obj))
                per_table_options.append(options)
            best = math.inf
            for combo in itertools.product(*per_table_options):
                s0 = sum(c[0] for c in combo)
                s1 = sum(c[1] for c in combo)
                best = min(best, max(s0, s1))
            assert achieved <= 1.10 * best + 1e-12


class TestHierarchicalPlan:
    def test_two_nodes_two_gpus_symmetric(self):
        tables = [
            TableSpec(id=f"t{i}", num_rows=400, dim=16, avg_pooling=4.0)
            for i in range(2)
        ]
        model = desk_model(tables)
        cluster = desk_cluster(4, gpus_per_node=2)
        plan = hierarchical_plan(model, cluster, CostWeights(), CandidatePolicy())
        nodes_used = set()
        for assignment in plan.assignments:
            assert assignment.scheme.kind is SchemeKind.ROW_WISE
            assert len(assignment.shards) == 2
            table_nodes = {s.worker // 2 for s in assignment.shards}
            assert len(table_nodes) == 1  # both shards inside one node
            nodes_used.update(table_nodes)
        assert nodes_used == {0, 1}  # one table per node

    def test_hierarchical_reduces_inter_node_bytes(self):
        tables = [
            TableSpec(id=f"t{i}", num_rows=4000, dim=32, avg_pooling=6.0)
            for i in range(4)
        ]
        model = desk_model(tables, local_batch=8)
        cluster = desk_cluster(8, gpus_per_node=4)
        hier = hierarchical_plan(model, cluster, CostWeights(), CandidatePolicy())
        flat = ShardingPlan(
            8,
            4,
            tuple(
                TableAssignment(
                    t.id,
                    Scheme(SchemeKind.ROW_WISE, num_row_shards=8),
                    tuple(
                        Shard(worker=w, rows=b)
                        for w, b in enumerate(even_bounds(t.num_rows, 8))
                    ),
                )
                for t in tables
            ),
        )
        assert inter_node_comm_bytes(hier, model, cluster) <= inter_node_comm_bytes(
            flat, model, cluster
        )

    def test_single_node_degenerates_to_flat_plan(self):
        tables = [
            TableSpec(id=f"t{i}", num_rows=300, dim=8, avg_pooling=2.0)
            for i in range(3)
        ]
        model = desk_model(tables)
        cluster = desk_cluster(4)
        hier = hierarchical_plan(model, cluster, CostWeights(), CandidatePolicy())
        flat = plan_4d(model, cluster, CostWeights(), CandidatePolicy(), "kk")
        assert plan_to_json(hier) == plan_to_json(flat)


class TestMemoryCheck:
    def test_naive_fp32_elementwise_state_doubles(self):
        # 12e12 params x 4 bytes x 2 = 96e12 bytes
        model = load_bundled_model("model_f")
        cluster = load_bundled_cluster()
        policy = CandidatePolicy(
            flags=CompressionFlags(
                table_precision=Precision.FP16, rowwise_optimizer=True
            )
        )
        plan = plan_4d(model, cluster, CostWeights(), policy, heuristic="kk")
        naive = memory_check(
            plan,
            model,
            cluster,
            CompressionFlags(table_precision=Precision.FP32, rowwise_optimizer=False),
        )
        assert naive.total_bytes == pytest.approx(96e12, rel=0.05)
        optimized = memory_check(plan, model, cluster, policy.flags)
        # FP16 tables + one FP32 scalar per row: 24e12 + (12e12/256) x 4
        assert 24.0e12 <= optimized.total_bytes <= 24.3e12
        assert optimized.feasible

    def test_empty_model(self):
        plan = plan_4d(desk_model(()), desk_cluster(2), CostWeights(), CandidatePolicy())
        report = memory_check(plan, desk_model(()), desk_cluster(2), CompressionFlags())
        assert report.total_bytes == 0

    def test_column_shards_replicate_rowwise_state(self):
        table = TableSpec(id="t", num_rows=100, dim=8, avg_pooling=1.0)
        model = desk_model([table])
        plan = ShardingPlan(
            2,
            2,
            (
                TableAssignment(
                    "t",
                    Scheme(SchemeKind.COLUMN_WISE, col_splits=((0, 4), (4, 8))),
                    (Shard(worker=0, cols=(0, 4)), Shard(worker=1, cols=(4, 8))),
                ),
            ),
        )
        report = memory_check(
            plan, model, desk_cluster(2), CompressionFlags(rowwise_optimizer=True)
        )
        # one moment scalar per (row, column shard): 2 x 100 x 4 bytes
        assert sum(m.optimizer_bytes for m in report.workers) == 800


class TestPlanValidation:
    def make_gap_plan(self):
        return ShardingPlan(
            2,
            2,
            (
                TableAssignment(
                    "t",
                    Scheme(SchemeKind.ROW_WISE, num_row_shards=2),
                    (
                        Shard(worker=0, rows=(0, 40)),
                        Shard(worker=1, rows=(50, 100)),  # gap [40, 50)
                    ),
                ),
            ),
        )

    def test_row_gap_rejected(self):
        model = desk_model([TableSpec(id="t", num_rows=100, dim=4, avg_pooling=1.0)])
        with pytest.raises(InvalidScheme):
            validate_plan(self.make_gap_plan(), model)

    def test_missing_table_rejected(self):
        model = desk_model(
            [
                TableSpec(id="t", num_rows=100, dim=4, avg_pooling=1.0),
                TableSpec(id="u", num_rows=10, dim=4, avg_pooling=1.0),
            ]
        )
        plan = ShardingPlan(
            2,
            2,
            (TableAssignment("t", Scheme(SchemeKind.TABLE_WISE), (Shard(worker=0),)),),
        )
        with pytest.raises(InvalidScheme):
            validate_plan(plan, model)

    def test_json_round_trip(self):
        model = desk_model(
            [TableSpec(id=f"t{i}", num_rows=64, dim=8, avg_pooling=2.0) for i in range(3)]
        )
        cluster = desk_cluster(2)
        plan = plan_4d(model, cluster, CostWeights(), CandidatePolicy())
        loaded = plan_from_json(plan_to_json(plan, model, cluster))
        assert plan_to_json(loaded) == plan_to_json(plan)
        validate_plan(loaded, model)


class TestCostWeights:
    def test_all_zero_rejected(self):
        with pytest.raises(InvalidValue):
            CostWeights(0.0, 0.0, 0.0)

    def test_negative_rejected(self):
        with pytest.raises(InvalidValue):
            CostWeights(-1.0, 1.0, 1.0)
