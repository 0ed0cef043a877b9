"""Core domain types, spec parsing and batch format."""

import io
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from neosim import (
    CombinedBatch,
    IndexSkew,
    InvalidValue,
    MissingKey,
    MalformedDocument,
    ModelSpec,
    NonMonotonicOffsets,
    SkewKind,
    TableSpec,
    gen_synthetic_batch,
    lengths_to_offsets,
    offsets_to_lengths,
    parse_model_spec,
    serialize_model_spec,
)
from neosim.bundled import load_bundled_model
from neosim.model import dump_batch, load_batch


def small_model(tables=None, local_batch=4):
    tables = tables or (
        TableSpec(id="t0", num_rows=10, dim=2, avg_pooling=1.0),
        TableSpec(id="t1", num_rows=6, dim=3, avg_pooling=2.0),
    )
    return ModelSpec(
        tables=tuple(tables),
        bottom_mlp_layers=(),
        top_mlp_layers=(),
        local_batch=local_batch,
        mflops_per_sample=1.0,
        interaction_flops_per_sample=0.0,
        dense_param_bytes=0,
    )


class TestLengthsOffsets:
    def test_prefix_sum(self):
        assert lengths_to_offsets([2, 0, 3]).tolist() == [0, 2, 2, 5]

    def test_empty(self):
        assert lengths_to_offsets([]).tolist() == [0]

    def test_difference(self):
        assert offsets_to_lengths([0, 2, 2, 5]).tolist() == [2, 0, 3]

    def test_single_zero(self):
        assert offsets_to_lengths([0]).tolist() == []

    def test_non_monotonic_rejected(self):
        with pytest.raises(NonMonotonicOffsets):
            offsets_to_lengths([0, 3, 1])

    def test_must_start_at_zero(self):
        with pytest.raises(NonMonotonicOffsets):
            offsets_to_lengths([1, 2])

    @given(st.lists(st.integers(min_value=0, max_value=50), max_size=40))
    def test_round_trip(self, lengths):
        assert offsets_to_lengths(lengths_to_offsets(lengths)).tolist() == lengths


class TestTableSpec:
    def test_invariants(self):
        with pytest.raises(InvalidValue):
            TableSpec(id="x", num_rows=0, dim=4, avg_pooling=1.0)
        with pytest.raises(InvalidValue):
            TableSpec(id="x", num_rows=4, dim=0, avg_pooling=1.0)
        with pytest.raises(InvalidValue):
            TableSpec(id="x", num_rows=4, dim=4, avg_pooling=0.0)
        with pytest.raises(InvalidValue):
            IndexSkew(kind=SkewKind.ZIPF, alpha=0.0)

    def test_index_bytes_widens_past_int32(self):
        small = TableSpec(id="s", num_rows=100, dim=4, avg_pooling=1.0)
        big = TableSpec(id="b", num_rows=2**31 + 1, dim=4, avg_pooling=1.0)
        assert small.index_bytes == 4
        assert big.index_bytes == 8


class TestParseModelSpec:
    def test_bundled_model_f_avg_dim(self):
        model = load_bundled_model("model_f")
        assert model.avg_dim == 256
        assert model.local_batch == 512
        assert model.total_table_params == 12 * 10**12

    def test_dim_zero_rejected(self):
        doc = {
            "spec_version": 1,
            "local_batch": 4,
            "mflops_per_sample": 1,
            "tables": [{"id": "t", "num_rows": 5, "dim": 0, "avg_pooling": 1.0}],
        }
        with pytest.raises(InvalidValue) as err:
            parse_model_spec(json.dumps(doc))
        assert "dim" in err.value.path

    def test_round_trip_identity(self):
        model = load_bundled_model("model_a")
        again = parse_model_spec(serialize_model_spec(model))
        assert again == model

    def test_unknown_key_rejected_with_path(self):
        doc = {
            "spec_version": 1,
            "local_batch": 4,
            "mflops_per_sample": 1,
            "tables": [
                {"id": "t", "num_rows": 5, "dim": 2, "avg_pooling": 1.0, "bogus": 1}
            ],
        }
        with pytest.raises(InvalidValue) as err:
            parse_model_spec(json.dumps(doc))
        assert "tables[0].bogus" in str(err.value)

    def test_missing_key(self):
        with pytest.raises(MissingKey):
            parse_model_spec(json.dumps({"spec_version": 1, "local_batch": 4}))

    def test_malformed_document(self):
        with pytest.raises(MalformedDocument):
            parse_model_spec("not json {")

    def test_dense_bytes_must_match_layers(self):
        doc = {
            "spec_version": 1,
            "local_batch": 4,
            "mflops_per_sample": 1,
            "bottom_mlp_layers": [[4, 4]],
            "dense_param_bytes": 999,
        }
        with pytest.raises(InvalidValue):
            parse_model_spec(json.dumps(doc))
        doc["dense_param_bytes"] = (4 * 4 + 4) * 4
        assert parse_model_spec(json.dumps(doc)).dense_param_bytes == 80


class TestSyntheticBatch:
    def test_deterministic(self):
        model = small_model()
        a = gen_synthetic_batch(model, 32, seed=5)
        b = gen_synthetic_batch(model, 32, seed=5)
        assert a == b
        assert a != gen_synthetic_batch(model, 32, seed=6)

    def test_uniform_frequencies_within_3_sigma(self):
        # H=10, 1e5 draws: 3 sigma = 3 * sqrt(n p (1-p)) ~= 284.6
        table = TableSpec(id="u", num_rows=10, dim=2, avg_pooling=1.0)
        model = small_model(tables=(table,))
        batch = gen_synthetic_batch(model, 100_000, seed=0)
        _, idx = batch.table_slice(0)
        freq = np.bincount(idx, minlength=10)
        assert np.all(np.abs(freq - 10_000) <= 284.6)

    def test_unit_pooling_is_exact(self):
        model = small_model(
            tables=(
                TableSpec(id="a", num_rows=4, dim=2, avg_pooling=1.0),
                TableSpec(id="b", num_rows=4, dim=2, avg_pooling=1.0),
            )
        )
        batch = gen_synthetic_batch(model, 1, seed=0)
        assert batch.lengths.tolist() == [[1], [1]]

    def test_expected_pooling(self):
        table = TableSpec(id="p", num_rows=100, dim=2, avg_pooling=2.5)
        model = small_model(tables=(table,))
        batch = gen_synthetic_batch(model, 20_000, seed=1)
        mean = batch.lengths[0].mean()
        assert abs(mean - 2.5) < 0.02

    def test_zipf_skews_toward_low_ids(self):
        table = TableSpec(
            id="z",
            num_rows=1000,
            dim=2,
            avg_pooling=4.0,
            index_skew=IndexSkew(kind=SkewKind.ZIPF, alpha=1.2),
        )
        model = small_model(tables=(table,))
        batch = gen_synthetic_batch(model, 5000, seed=2)
        _, idx = batch.table_slice(0)
        assert (idx < 10).mean() > (idx >= 990).mean() * 5


class TestCombinedBatch:
    def test_length_index_consistency(self):
        with pytest.raises(InvalidValue):
            CombinedBatch(np.array([[2, 1]]), np.array([1]))

    def test_canonical_reserialization(self):
        model = small_model()
        batch = gen_synthetic_batch(model, 16, seed=3)
        clone = CombinedBatch(batch.lengths.copy(), batch.indices.copy())
        assert clone.indices.tobytes() == batch.indices.tobytes()
        # round-tripping the dump format is byte-identical too
        a, b = io.StringIO(), io.StringIO()
        dump_batch(batch, a, workers=4)
        loaded, _ = load_batch(io.StringIO(a.getvalue()))
        dump_batch(loaded, b, workers=4)
        assert a.getvalue() == b.getvalue()

    def test_dump_load_round_trip(self):
        model = small_model()
        batch = gen_synthetic_batch(model, 16, seed=4)
        buf = io.StringIO()
        dump_batch(batch, buf, workers=4)
        buf.seek(0)
        loaded, workers = load_batch(buf)
        assert workers == 4
        assert loaded == batch

    def test_dump_header(self):
        model = small_model()
        batch = gen_synthetic_batch(model, 6, seed=0)
        buf = io.StringIO()
        dump_batch(batch, buf, workers=2)
        assert buf.getvalue().splitlines()[0] == "2 2 3"
