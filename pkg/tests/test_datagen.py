import struct

import numpy as np
import pytest

from asyncdrop.datagen import (bias_classes, gen_classification, gen_synthetic, ingest_matrix,
                               partition_noniid, write_matrix)
from asyncdrop.errors import ConfigError, ParseError
from asyncdrop.fedsim import SimConfig, build_clients
from asyncdrop.nn import Dataset


def test_synthetic_norms_and_labels():
    data = gen_synthetic(200, 3, 5, 2, bound=0.7, seed=1)
    norms = np.linalg.norm(data.inputs.reshape(200, -1), axis=1)
    assert np.allclose(norms, 2 ** -0.5, rtol=0, atol=1e-12)
    assert np.abs(data.labels).max() <= 0.7 and data.bound == 0.7
    patched = data.patched(2).reshape(200, -1)
    assert np.all(np.linalg.norm(patched, axis=1) <= 1.0 + 1e-12)


def test_synthetic_samples_distinct():
    data = gen_synthetic(500, 1, 2, 1, seed=0)
    assert len({x.tobytes() for x in data.inputs}) == 500


def test_synthetic_is_seeded():
    a, b = gen_synthetic(10, 2, 3, 2, seed=4), gen_synthetic(10, 2, 3, 2, seed=4)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)


def test_synthetic_validation():
    with pytest.raises(ConfigError):
        gen_synthetic(0, 1, 1, 1)
    with pytest.raises(ConfigError):
        gen_synthetic(5, 1, 1, 1, bound=0.0)


def test_classification_balanced():
    data = gen_classification(80, 4, 8, seed=0)
    assert np.bincount(data.labels).tolist() == [10] * 8


def _plan(bias, clients=16, levels=4, n=1600, classes=4, seed=0, per_level=1):
    data = gen_classification(n, 4, classes, seed=seed)
    cl = build_clients(SimConfig(num_clients=clients, active_clients=levels, levels=levels))
    return data, cl, partition_noniid(data, cl, bias, seed, per_level)


def test_partition_is_a_partition():
    data, _, plan = _plan(0.8)
    all_idx = np.concatenate(list(plan.shards.values()))
    assert sorted(all_idx.tolist()) == list(range(len(data)))
    assert {len(v) for v in plan.shards.values()} == {100}


def test_full_bias_gives_pure_shards():
    data, clients, plan = _plan(1.0)
    for c in clients:
        labels = set(data.labels[plan.shards[c.id]].tolist())
        assert labels == set(plan.dominant[c.id])


def test_zero_bias_is_uniform_within_three_sigma():
    data, clients, plan = _plan(0.0, n=4000)
    for c in clients:
        labels = data.labels[plan.shards[c.id]]
        frac = np.mean(labels == plan.dominant[c.id][0])
        sigma = np.sqrt(0.25 * 0.75 / len(labels))
        assert abs(frac - 0.25) <= 3 * sigma + 0.01


def test_bias_sets_dominant_fraction():
    data, clients, plan = _plan(0.8)
    for c in clients:
        labels = data.labels[plan.shards[c.id]]
        assert np.mean(np.isin(labels, plan.dominant[c.id])) >= 0.8


def test_clients_on_a_level_share_dominant_classes():
    data, clients, plan = _plan(0.8, per_level=2, classes=8)
    by_level = {}
    for c in clients:
        by_level.setdefault(c.capacity_level, set()).add(plan.dominant[c.id])
    assert all(len(v) == 1 for v in by_level.values())
    assert plan.dominant[0] == (0, 1)


def test_regression_bias_uses_target_bands():
    data = gen_synthetic(100, 1, 2, 1, seed=0)
    bands = bias_classes(data, 4)
    assert np.bincount(bands).tolist() == [25] * 4


@pytest.mark.parametrize("fmt", ["csv", "binary"])
@pytest.mark.parametrize("kind", ["classification", "regression"])
def test_matrix_round_trip(tmp_path, fmt, kind):
    if kind == "classification":
        data = gen_classification(30, 5, 3, seed=2)
    else:
        data = Dataset(np.random.default_rng(0).standard_normal((30, 5)),
                       np.random.default_rng(1).uniform(-1, 1, 30))
    path = tmp_path / f"m.{fmt}"
    write_matrix(path, data, fmt)
    back = ingest_matrix(path, fmt)
    assert back.kind == kind
    assert back.flat().tobytes() == data.flat().tobytes()
    assert np.array_equal(back.labels, data.labels)


def test_csv_bad_value_reports_position(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("label,f0,f1\n1,0.5,0.5\n0,abc,1\n")
    with pytest.raises(ParseError) as err:
        ingest_matrix(path)
    assert (err.value.row, err.value.column) == (2, 2)


def test_csv_non_finite_rejected(tmp_path):
    path = tmp_path / "nan.csv"
    path.write_text("label,f0\n1,nan\n")
    with pytest.raises(ParseError) as err:
        ingest_matrix(path)
    assert (err.value.row, err.value.column) == (1, 2)


def test_csv_header_and_width_checked(tmp_path):
    path = tmp_path / "h.csv"
    path.write_text("y,f0\n1,2\n")
    with pytest.raises(ParseError):
        ingest_matrix(path)
    path.write_text("label,f0\n1,2,3\n")
    with pytest.raises(ParseError):
        ingest_matrix(path)


def test_binary_size_and_finiteness_checked(tmp_path):
    path = tmp_path / "b.bin"
    path.write_bytes(struct.pack("<QQ", 2, 2) + b"\0" * 8)
    with pytest.raises(ParseError):
        ingest_matrix(path, "binary")
    vals = np.array([1.0, np.inf, 0.0, 0.0, 1.0, 0.0], dtype="<f8")
    path.write_bytes(struct.pack("<QQ", 2, 2) + vals.tobytes())
    with pytest.raises(ParseError) as err:
        ingest_matrix(path, "binary")
    assert (err.value.row, err.value.column) == (1, 3)


def test_unknown_format():
    with pytest.raises(ConfigError):
        ingest_matrix("x", "parquet")
