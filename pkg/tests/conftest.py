import numpy as np

from neosim import ClusterSpec, ModelSpec, TableSpec


def desk_cluster(
    workers: int = 4,
    gpus_per_node: int = None,
    hbm: int = 16 * 2**30,
    dram_per_node: int = 0,
) -> ClusterSpec:
    gpn = workers if gpus_per_node is None else gpus_per_node
    assert workers % gpn == 0
    return ClusterSpec(
        num_nodes=workers // gpn,
        gpus_per_node=gpn,
        hbm_capacity_per_gpu=hbm,
        hbm_bw=1.3e12,
        dram_capacity_per_node=dram_per_node if dram_per_node else 64 * 2**30,
        dram_to_gpu_bw=26e9,
        scaleup_bw=300e9,
        scaleout_bw_per_gpu=25e9,
        peak_flops={"FP32": 19.5e12, "TF32": 156e12, "FP16": 312e12, "BF16": 312e12},
        mlp_efficiency=0.705,
        alltoall_bw_points=(
            (1048576.0, 8e8),
            (8388608.0, 2.5e9),
            (67108864.0, 5e9),
            (268435456.0, 7e9),
        ),
        allreduce_bw_points=(
            (8388608.0, 1.5e10),
            (268435456.0, 6e10),
            (4294967296.0, 1.4e11),
        ),
        fixed_latency_per_collective=2e-5,
    )


def desk_model(tables, local_batch=4, **kwargs) -> ModelSpec:
    defaults = dict(
        bottom_mlp_layers=(),
        top_mlp_layers=(),
        mflops_per_sample=1.0,
        interaction_flops_per_sample=0.0,
        dense_param_bytes=0,
    )
    defaults.update(kwargs)
    return ModelSpec(tables=tuple(tables), local_batch=local_batch, **defaults)


def random_desk_model(rng: np.random.Generator, max_tables=8, max_batch=4):
    num_tables = int(rng.integers(1, max_tables + 1))
    tables = [
        TableSpec(
            id=f"t{i}",
            num_rows=int(rng.integers(6, 40)),
            dim=int(rng.integers(1, 3)) * 2,
            avg_pooling=float(rng.uniform(1.0, 4.0)),
        )
        for i in range(num_tables)
    ]
    return desk_model(tables, local_batch=int(rng.integers(1, max_batch + 1)))
