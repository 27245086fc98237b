import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedgcae import data
from fedgcae.data import (NUM_CLASSES, NormStats, PartitionSpec, PoolShortfallError, SensorStream,
                          SynthSpec, WindowPool, bounded_composition, load_csv, partition, random_composition,
                          segment_windows, synthesize_streams, template_separation, window_offsets,
                          window_params, windows_to_images, write_csv)


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2000))
def test_window_count_formula(L):
    offs = window_offsets(L)
    expected = max(0, math.floor((L - 200) / 40) + 1)
    assert len(offs) == expected
    np.testing.assert_array_equal(offs, 40 * np.arange(expected))


def test_window_count_examples():
    assert len(window_offsets(199)) == 0
    assert len(window_offsets(200)) == 1
    assert len(window_offsets(1000)) == 21


def test_window_params():
    assert window_params() == (200, 40)
    assert window_params(200, 1.0, 0.0) == (200, 200)
    with pytest.raises(ValueError, match="overlap"):
        window_params(200, 1.0, 1.0)


def _stream(lengths, labels, user=0, seed=0):
    rng = np.random.default_rng(seed)
    segs, pos = [], 0
    for n, lab in zip(lengths, labels):
        segs.append((pos, pos + n, lab))
        pos += n
    return SensorStream(user, rng.normal(size=(pos, 6)), segs)


def test_windows_never_cross_segments():
    s = _stream([450, 230, 199], [2, 5, 7])
    w, y, starts = segment_windows(s)
    assert len(w) == 7 + 1
    np.testing.assert_array_equal(y, [2] * 7 + [5])
    np.testing.assert_array_equal(starts[:3], [0, 40, 80])
    assert starts[-1] == 450
    np.testing.assert_array_equal(w[1], s.records[40:240])


def test_image_layout_and_normalisation():
    w = np.zeros((1, 200, 6))
    w[0, :, :3] = np.arange(200)[:, None] * [1, 2, 3]
    w[0, :, 3:] = -1.0
    stats = NormStats((-1.0, -1.0, -1.0), (199.0, 398.0, 597.0))
    img = windows_to_images(w, stats)
    assert img.shape == (1, 20, 20, 3)
    assert img.min() >= 0 and img.max() <= 1
    # acceleration sample i sits at row-major position i
    assert img[0, 0, 5, 0] == pytest.approx(6 / 200)
    assert img[0, 9, 19, 0] == pytest.approx(1.0)
    # gyroscope fills the lower half
    np.testing.assert_array_equal(img[0, 10:], 0.0)


def test_image_clips_out_of_range():
    w = np.full((1, 200, 6), 5.0)
    img = windows_to_images(w, NormStats((0.0,) * 3, (1.0,) * 3))
    np.testing.assert_array_equal(img, 1.0)


def test_degenerate_channel_warns():
    w = np.ones((1, 200, 6))
    with pytest.warns(RuntimeWarning, match="degenerate"):
        img = windows_to_images(w, NormStats((1.0, 0.0, 0.0), (1.0, 2.0, 2.0)))
    np.testing.assert_array_equal(img[..., 0], 0.5)


def test_norm_stats_pool_both_sensors():
    r = np.array([[0, 1, 2, 3, 4, 5], [-1, 0, 0, 9, 0, 0]], dtype=float)
    s = NormStats.from_records(r)
    assert s.low == (-1.0, 0.0, 0.0) and s.high == (9.0, 4.0, 5.0)
    assert NormStats.from_dict(s.to_dict()) == s


def test_csv_roundtrip_is_exact(tmp_path):
    s = _stream([250, 300], [0, 9], user=7)
    p = write_csv(s, tmp_path / "u.csv")
    back = load_csv(p)
    assert back == s
    first = p.read_text().splitlines()[0]
    assert first == ",".join(data.CSV_COLUMNS)


def test_csv_errors(tmp_path):
    head = ",".join(data.CSV_COLUMNS) + "\n"
    (tmp_path / "bad_label.csv").write_text(head + "1,0,0,0,0,0,0,0,RUN\n")
    with pytest.raises(ValueError, match=r":2: unknown label 'RUN'.*STD"):
        load_csv(tmp_path / "bad_label.csv")
    (tmp_path / "short.csv").write_text(head + "1,0,0,0\n")
    with pytest.raises(ValueError, match=":2: expected 9 fields"):
        load_csv(tmp_path / "short.csv")
    (tmp_path / "hdr.csv").write_text("a,b\n")
    with pytest.raises(ValueError, match="header"):
        load_csv(tmp_path / "hdr.csv")
    (tmp_path / "empty.csv").write_text(head)
    s = load_csv(tmp_path / "empty.csv")
    assert len(s.records) == 0 and s.segments == []


def test_csv_time_gap_splits_segment(tmp_path):
    head = ",".join(data.CSV_COLUMNS) + "\n"
    rows = [f"0,{t * 0.005},0,0,0,0,0,0,WAL" for t in (0, 1, 2, 10, 11)]
    (tmp_path / "g.csv").write_text(head + "\n".join(rows) + "\n")
    s = load_csv(tmp_path / "g.csv")
    assert s.segments == [(0, 3, 1), (3, 5, 1)]


def test_synthetic_streams_deterministic_and_complete():
    spec = SynthSpec(num_users=2, train_windows=5, test_windows=2)
    a = list(synthesize_streams(spec))
    b = list(synthesize_streams(spec))
    assert a == b
    for s in a:
        assert sorted(lab for _, _, lab in s.segments) == list(range(NUM_CLASSES))
        _, y, _ = segment_windows(s)
        counts = np.bincount(y, minlength=NUM_CLASSES)
        assert np.all(counts == counts[0])
    c = next(synthesize_streams(spec, seed=1))
    assert not np.array_equal(c.records, a[0].records)


def test_template_separation_exceeds_three_sigma():
    assert template_separation() > 3.0


@pytest.mark.slow
def test_default_data_is_separable_by_a_centralized_gcae():
    from fedgcae.evaluation import CentralConfig, run_centralized
    part = data.synthetic_partition()
    rep, _ = run_centralized("gcae", part.pooled_train(), part.test_sets, CentralConfig(epochs=2))
    assert rep.accuracy >= 0.90


def test_compositions():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = random_composition(rng, 480, 10)
        assert c.sum() == 480 and c.min() >= 1 and len(c) == 10
        h = bounded_composition(rng, 30, 10, 1, 5)
        assert h.sum() == 30 and h.min() >= 1 and h.max() <= 5
    with pytest.raises(ValueError):
        bounded_composition(rng, 60, 10, 1, 5)


def test_random_composition_is_uniform_small_case():
    # compositions of 4 into 2 parts: (1,3), (2,2), (3,1)
    rng = np.random.default_rng(1)
    seen = [tuple(random_composition(rng, 4, 2)) for _ in range(3000)]
    freq = {k: seen.count(k) / 3000 for k in set(seen)}
    assert set(freq) == {(1, 3), (2, 2), (3, 1)}
    assert all(abs(v - 1 / 3) < 0.04 for v in freq.values())


def test_pool_test_windows_do_not_overlap_training(small_synth):
    pool = WindowPool(synthesize_streams(small_synth), 16)
    for (u, c), train in pool.train.items():
        test = pool.test[u, c]
        assert len(test) == 16
        assert np.all(train + pool.length <= test.min())
        assert len(train) == small_synth.train_windows


def test_imbalanced_partition(small_partition):
    p = small_partition
    assert len(p.clients) == 4
    for c, t in zip(p.clients, p.test_sets):
        assert len(c) == 100 and c.class_histogram.min() >= 1
        np.testing.assert_array_equal(t.class_histogram, 16)
        assert not set(c.window_ids) & set(t.window_ids)
        assert c.X.min() >= 0 and c.X.max() <= 1
    hists = [tuple(c.class_histogram) for c in p.clients]
    assert len(set(hists)) == 4


def test_partition_is_seeded(small_synth, small_partition):
    again = data.synthetic_partition(PartitionSpec(num_users=4, per_user=100, seed=3), small_synth)
    for a, b in zip(small_partition.clients, again.clients):
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.window_ids, b.window_ids)


def test_balanced_partition(small_synth):
    p = data.synthetic_partition(PartitionSpec(scheme="balanced", num_users=4, per_user=100), small_synth)
    for c in p.clients:
        np.testing.assert_array_equal(c.class_histogram, 10)


def test_home_partition(small_home_partition):
    p = small_home_partition
    assert len(p.clients) == 2
    members = sorted(u for m in p.homes.values() for u in m)
    assert members == [0, 1, 2, 3]
    for c in p.clients:
        assert len(c) == 100 * len(c.members)
        assert set(c.user_ids.tolist()) == set(c.members)


def test_manifest(tmp_path, small_partition):
    path = small_partition.write_manifest(tmp_path / "partition.json")
    m = json.loads(path.read_text())
    assert m["spec"]["seed"] == 3 and m["spec"]["scheme"] == "imbalanced"
    assert [c["histogram"] for c in m["clients"]] == [c.class_histogram.tolist() for c in small_partition.clients]


def test_shortfall_lists_every_gap():
    spec = SynthSpec(num_users=2, train_windows=3, test_windows=16)
    pool = WindowPool(synthesize_streams(spec), 16)
    with pytest.raises(PoolShortfallError) as err:
        partition(pool, PartitionSpec(scheme="balanced", num_users=2, per_user=50))
    assert len(err.value.shortfalls) == 2 * NUM_CLASSES
    assert "need 5, have 3" in str(err.value)


def test_partition_spec_validation():
    with pytest.raises(ValueError):
        PartitionSpec(scheme="iid")
    with pytest.raises(ValueError):
        PartitionSpec(per_user=5)


def test_client_dataset_merge_and_subset(small_partition):
    a, b = small_partition.clients[:2]
    m = data.ClientDataset.merge(9, [a, b])
    assert len(m) == len(a) + len(b) and m.members == (0, 1)
    s = m.subset(m.user_ids == 1)
    np.testing.assert_array_equal(s.X, b.X)
