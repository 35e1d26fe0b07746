import json

import numpy as np
import pytest

from tpkd import container
from tpkd.data import (LEVELS, CorruptionLevel, Dataset, corrupt, gen_synthetic, iterate_batches,
                       load_csv, load_dataset, save_dataset)
from tpkd.topology import sublevel_diagram


def test_generator_deterministic_and_balanced():
    a = gen_synthetic(3, 5, channels=2, length=64, seed=9)
    b = gen_synthetic(3, 5, channels=2, length=64, seed=9)
    assert a == b and a.x.tobytes() == b.x.tobytes()
    assert a.x.shape == (15, 2, 64)
    assert np.bincount(a.y).tolist() == [5, 5, 5]
    assert gen_synthetic(3, 5, channels=2, length=64, seed=10) != a


def test_generator_empty_and_validation():
    ds = gen_synthetic(4, 0, seed=0)
    assert len(ds) == 0
    with pytest.raises(ValueError):
        gen_synthetic(1, 5)
    with pytest.raises(ValueError):
        gen_synthetic(2, 5, length=16)


def test_classes_differ_in_prominent_pairs():
    ds = gen_synthetic(4, 100, channels=1, length=128, seed=3)
    means = []
    for j in range(4):
        counts = [np.sum(np.diff(sublevel_diagram(w).pairs[0], axis=1) > 1.0)
                  for w in ds.x[ds.y == j]]
        means.append(np.mean(counts))
    assert all(b > a for a, b in zip(means, means[1:]))
    assert means[3] - means[0] > 1.0


def test_roundtrip(tmp_path):
    ds = gen_synthetic(3, 4, seed=1, split="val")
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back == ds
    assert back.windows[0].values.shape == (3, 128)


def test_pi_dataset_roundtrip(tmp_path):
    ds = Dataset(np.random.default_rng(0).random((5, 3, 4, 4)), [0, 1, 0, 1, 1], 2, "test")
    save_dataset(ds, tmp_path / "p.bin")
    assert load_dataset(tmp_path / "p.bin") == ds
    assert ds.kind == "pi"


def test_truncated_file(tmp_path):
    ds = gen_synthetic(2, 3, seed=1)
    raw = save_dataset(ds, tmp_path / "d.bin")
    (tmp_path / "t.bin").write_bytes(raw[:-10])
    with pytest.raises(container.TruncatedDataError, match="unexpected end of data"):
        load_dataset(tmp_path / "t.bin")


def _forge(raw, mutate):
    hlen = int.from_bytes(raw[4:8], "little")
    header = json.loads(raw[8:8 + hlen])
    mutate(header)
    hb = json.dumps(header).encode()
    return raw[:4] + len(hb).to_bytes(4, "little") + hb + raw[8 + hlen:]


def test_header_blob_mismatch_and_version(tmp_path):
    ds = gen_synthetic(2, 3, seed=1)
    raw = save_dataset(ds, tmp_path / "d.bin")
    bad = _forge(raw, lambda h: h.update(blob_nbytes=h["blob_nbytes"] + 4))
    with pytest.raises(container.ShapeMismatchError):
        container.decode(bad, "tpkd-data-v1")
    with pytest.raises(container.TruncatedDataError):
        container.decode(raw[:6], "tpkd-data-v1")
    with pytest.raises(container.UnsupportedVersionError):
        container.decode(raw, "tpkd-data-v9")
    with pytest.raises(container.MalformedHeaderError):
        container.decode(b"XXXX" + raw[4:], "tpkd-data-v1")
    with pytest.raises(container.MalformedHeaderError):
        container.decode(raw[:8] + b"{" * (len(raw) - 8), "tpkd-data-v1")


def test_shape_inconsistency_rejected_before_materializing(monkeypatch):
    raw = container.encode("tpkd-data-v1", {"x": np.zeros((2, 3), np.float32),
                                            "y": np.zeros(2, np.int64)}, {})
    forged = _forge(raw, lambda h: h["arrays"][0].update(shape=[2, 4]))
    calls = []
    monkeypatch.setattr(np, "frombuffer", lambda *a, **k: calls.append(1))
    with pytest.raises(container.ShapeMismatchError):
        container.decode(forged, "tpkd-data-v1")
    assert calls == []


def test_csv_import(tmp_path):
    p = tmp_path / "w.csv"
    p.write_text("1,0,1,2,3,4,5\n0,5,4,3,2,1,0\n")
    ds = load_csv(p, channels=2)
    assert ds.x.shape == (2, 2, 3)
    np.testing.assert_array_equal(ds.x[0], [[0, 1, 2], [3, 4, 5]])
    assert ds.y.tolist() == [1, 0] and ds.classes == 2
    p.write_text("1,0,1,2\n")
    with pytest.raises(ValueError, match="divisible"):
        load_csv(p, channels=2)


def test_corruption_levels_and_identity():
    assert LEVELS[1] == CorruptionLevel(0.15, 0.06)
    assert LEVELS[2] == CorruptionLevel(0.22, 0.09)
    assert LEVELS[3] == CorruptionLevel(0.30, 0.12)
    ds = gen_synthetic(2, 3, seed=0, split="test")
    assert corrupt(ds, CorruptionLevel(0, 0), seed=1) == ds
    with pytest.raises(ValueError):
        CorruptionLevel(1.0, 0.0)


def _zero_runs(row):
    runs, cur = [], 0
    for v in row:
        if v == 0:
            cur += 1
        elif cur:
            runs.append(cur)
            cur = 0
    if cur:
        runs.append(cur)
    return runs


def test_missing_segment_is_contiguous_and_exact():
    ds = gen_synthetic(2, 10, channels=2, length=500, seed=0, split="test")
    out = corrupt(ds, CorruptionLevel(0.15, 0.0), seed=4)
    for w in out.x:
        for ch in w:
            assert _zero_runs(ch) == [75]


def test_corruption_preserves_labels_and_shape():
    ds = gen_synthetic(3, 4, seed=0, split="test")
    out = corrupt(ds, LEVELS[3], seed=2)
    assert out.x.shape == ds.x.shape
    np.testing.assert_array_equal(out.y, ds.y)
    assert np.abs(out.x - ds.x).mean() > 0
    assert corrupt(ds, LEVELS[3], seed=2) == out


def test_iterate_batches_drop_last_multiple():
    batches = list(iterate_batches(50, 16, np.random.default_rng(0), multiple_of=5))
    assert [len(b) for b in batches] == [15, 15, 15]
    assert len(set(np.concatenate(batches))) == 45
