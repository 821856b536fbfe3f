import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asyncdrop.errors import ConfigError, ContractError, NumericError, ParseError
from asyncdrop.masking import DropoutMask
from asyncdrop.params import ModelParams
from asyncdrop.store import (BUFFERED, GlobalStore, UpdateEnvelope, load_checkpoint, mix,
                             save_checkpoint, staleness_weight)


def _params(W):
    return ModelParams({"W": np.asarray(W, dtype=float)}, {"W": 0})


def _env(W, kept=None, base=0, cid=0):
    mask = None if kept is None else DropoutMask(kept, 0.5)
    return UpdateEnvelope(cid, mask, _params(W), base)


def test_masked_merge_replaces_kept_rows_exactly():
    store = GlobalStore(_params([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    store.masked_merge(_env([[9.0, 9.0], [0.0, 0.0], [7.0, 7.0]], [True, False, True]), 1.0)
    assert store.snapshot()["W"].tolist() == [[9, 9], [3, 4], [7, 7]]
    assert store.version == 1


def test_masked_merge_alpha_half():
    store = GlobalStore(_params([[0.0], [2.0]]))
    store.masked_merge(_env([[4.0], [100.0]], [True, False]), 0.5)
    assert store.snapshot()["W"].tolist() == [[2.0], [2.0]]


def test_empty_mask_leaves_values_but_bumps_version():
    store = GlobalStore(_params([[1.0], [2.0]]))
    store.masked_merge(_env([[5.0], [5.0]], [False, False]), 1.0)
    assert store.snapshot()["W"].tolist() == [[1.0], [2.0]] and store.version == 1


def test_dropped_coordinates_are_bit_identical(rng):
    W = rng.standard_normal((50, 7))
    store = GlobalStore(_params(W))
    kept = rng.random(50) < 0.5
    store.masked_merge(_env(rng.standard_normal((50, 7)), kept), 0.37)
    after = store.snapshot()["W"]
    assert after[~kept].tobytes() == W[~kept].tobytes()


def test_non_finite_kept_value_rejected_without_side_effects():
    store = GlobalStore(_params([[1.0], [2.0]]))
    with pytest.raises(NumericError):
        store.masked_merge(_env([[np.nan], [0.0]], [True, False]), 1.0)
    assert store.version == 0 and store.snapshot()["W"].tolist() == [[1.0], [2.0]]


def test_non_finite_dropped_value_is_ignored():
    store = GlobalStore(_params([[1.0], [2.0]]))
    store.masked_merge(_env([[3.0], [np.inf]], [True, False]), 1.0)
    assert store.snapshot()["W"].tolist() == [[3.0], [2.0]]


def test_alpha_validation():
    store = GlobalStore(_params([[1.0]]))
    for bad in (0.0, 1.5):
        with pytest.raises(ConfigError):
            store.masked_merge(_env([[2.0]], [True]), bad)


def test_staleness_is_version_gap():
    store = GlobalStore(_params([[0.0]]))
    first, second = _env([[1.0]], [True]), _env([[2.0]], [True])
    store.masked_merge(first, 1.0)
    store.masked_merge(second, 1.0)
    assert (first.staleness, second.staleness) == (0, 1)


def test_update_from_the_future_is_rejected():
    store = GlobalStore(_params([[0.0]]))
    with pytest.raises(ContractError):
        store.masked_merge(_env([[1.0]], [True], base=3), 1.0)


def test_weighted_merge_discounts_stale_updates():
    store = GlobalStore(_params([[0.0]]))
    store.plain_merge(_env([[0.0]]), 1.0)
    store.plain_merge(_env([[0.0]]), 1.0)
    store.weighted_merge(_env([[3.0]], base=0), 1.0)
    assert store.snapshot()["W"][0, 0] == pytest.approx(1.0)
    assert staleness_weight(0.6, 2) == pytest.approx(0.2)


def test_buffered_merge_applies_average_on_kth_write():
    store = GlobalStore(_params([[0.0]]))
    assert store.buffered_merge(_env([[2.0]]), 3, 1.0) == BUFFERED
    assert store.buffered_merge(_env([[4.0]]), 3, 1.0) == BUFFERED
    assert store.version == 0 and store.snapshot()["W"][0, 0] == 0.0
    assert store.buffered_merge(_env([[6.0]]), 3, 1.0) == 1
    assert store.snapshot()["W"][0, 0] == 4.0 and store.buffered_count == 0


def test_group_averaged_merge_overlaps_and_union():
    store = GlobalStore(_params([[0.0], [0.0], [9.0]]))
    a = _env([[2.0], [4.0], [0.0]], [True, True, False])
    b = _env([[6.0], [0.0], [0.0]], [True, False, False])
    store.group_averaged_merge([a, b], 1.0)
    assert store.snapshot()["W"].tolist() == [[4.0], [4.0], [9.0]]
    assert a.staleness == b.staleness == 0 and store.version == 1


def test_group_averaged_merge_rejects_mixed_bases():
    store = GlobalStore(_params([[0.0]]))
    store.plain_merge(_env([[1.0]]), 1.0)
    with pytest.raises(ContractError):
        store.group_averaged_merge([_env([[1.0]], [True], base=0), _env([[1.0]], [True], base=1)], 1.0)


def test_score_tracking_follows_merges():
    store = GlobalStore(_params([[0.0, 0.0], [0.0, 0.0]]), track_scores="unit")
    store.masked_merge(_env([[1.0, -2.0], [0.0, 0.0]], [True, False]), 1.0)
    assert store.scores.scores.tolist() == [3.0, 0.0]


def test_fetch_is_a_copy():
    store = GlobalStore(_params([[1.0]]))
    snap, version = store.fetch()
    snap["W"][0, 0] = 99.0
    assert store.snapshot()["W"][0, 0] == 1.0 and version == 0


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.floats(1e-6, 1.0))
@settings(max_examples=200, deadline=None)
def test_mix_stays_on_segment(a, b, alpha):
    out = float(mix(np.array(a), np.array(b), alpha))
    assert min(a, b) <= out <= max(a, b)
    assert float(mix(np.array(a), np.array(a), alpha)) == a


def test_concurrent_writers_keep_version_count():
    store = GlobalStore(_params(np.zeros((4, 3))), concurrent=True)

    def worker(cid):
        for _ in range(50):
            snap, base = store.fetch()
            store.masked_merge(UpdateEnvelope(cid, DropoutMask([True] * 4, 1.0),
                                              snap.replace({"W": snap["W"] + 1}), base), 1.0)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert store.version == 200 and store.commits == 200


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    groups = {"W1": rng.standard_normal((5, 3)), "W2": rng.standard_normal((2, 5)),
              "empty": np.zeros((0, 4))}
    path = tmp_path / "ck.adrp"
    save_checkpoint(path, groups)
    back = load_checkpoint(path)
    assert list(back) == list(groups)
    for k in groups:
        assert back[k].shape == groups[k].shape and back[k].tobytes() == groups[k].tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "one.adrp"
    save_checkpoint(path, {"W": np.array([[1.5]])})
    raw = path.read_bytes()
    assert raw[:4] == b"ADRP" and raw[4:8] == (1).to_bytes(4, "little")
    assert len(raw) == 4 + 4 + 8 + 8 + 1 + 8 + 16 + 8


def test_checkpoint_to_params(tmp_path):
    path = tmp_path / "p.adrp"
    save_checkpoint(path, _params([[1.0], [2.0]]))
    params = load_checkpoint(path, {"W": 0})
    assert params.num_units == 2


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing"])
def test_checkpoint_corruption_detected(tmp_path, damage):
    path = tmp_path / "bad.adrp"
    save_checkpoint(path, {"W": np.ones((2, 2))})
    raw = path.read_bytes()
    raw = {"magic": b"XXXX" + raw[4:], "truncate": raw[:-3], "trailing": raw + b"\0"}[damage]
    path.write_bytes(raw)
    with pytest.raises(ParseError):
        load_checkpoint(path)
