import collections
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pokedepth import sim
from pokedepth.dataset import (
    BadMagicError, DimensionError, TruncatedFileError, VersionMismatchError, batches,
    read_dataset, record_size, split, strip_ground_truth, write_dataset,
)


@pytest.fixture(scope="module")
def samples():
    data = sim.generate_dataset(sim.preset("adversarial"), 3, 2, seed=5, include_ground_truth=True)
    data[0].depth[0, 0] = 0.0  # make sure an invalid-pixel marker is present
    return data


def same(a, b):
    assert a.g == b.g and a.y == b.y
    assert np.float32(a.z).tobytes() == np.float32(b.z).tobytes()
    for name in ("rgb", "depth", "ground_truth", "material"):
        x, y = getattr(a, name), getattr(b, name)
        if x is None:
            assert y is None
        else:
            assert np.asarray(x, np.float32 if name != "material" else np.uint8).tobytes() == y.tobytes()


def test_round_trip_is_bitwise(samples, tmp_path):
    path = tmp_path / "a.dbpd"
    write_dataset(samples, path)
    back = read_dataset(path)
    assert len(back) == 6
    for a, b in zip(samples, back):
        same(a, b)
    write_dataset(back, tmp_path / "b.dbpd")
    assert path.read_bytes() == (tmp_path / "b.dbpd").read_bytes()


def test_file_length_matches_layout(samples, tmp_path):
    path = tmp_path / "a.dbpd"
    write_dataset(samples, path)
    assert path.stat().st_size == 12 + 6 * record_size(64, 64, True)
    write_dataset(strip_ground_truth(samples), path)
    assert path.stat().st_size == 12 + 6 * record_size(64, 64, False)


def test_header_fields(samples, tmp_path):
    path = tmp_path / "a.dbpd"
    write_dataset(samples, path)
    raw = path.read_bytes()
    assert raw[:4] == b"DBPD"
    assert struct.unpack_from("<II", raw, 4) == (1, 6)
    assert struct.unpack_from("<II", raw, 12) == (64, 64)


def test_training_file_holds_no_true_depth(samples, tmp_path):
    path = tmp_path / "train.dbpd"
    write_dataset(strip_ground_truth(samples), path)
    raw = path.read_bytes()
    gt = np.ascontiguousarray(samples[1].ground_truth, "<f4").tobytes()
    assert gt not in raw
    assert all(s.ground_truth is None for s in read_dataset(path))


def test_bad_magic(samples, tmp_path):
    path = tmp_path / "a.dbpd"
    write_dataset(samples, path)
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError, match="magic"):
        read_dataset(path)


def test_version_mismatch(samples, tmp_path):
    path = tmp_path / "a.dbpd"
    write_dataset(samples, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 7)
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError, match="version 7"):
        read_dataset(path)


def test_truncation_names_record(samples, tmp_path):
    path = tmp_path / "a.dbpd"
    write_dataset(samples, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(TruncatedFileError, match="record 5 of 6"):
        read_dataset(path)


def test_inconsistent_dims(samples, tmp_path):
    small = sim.PokeSample(rgb=np.zeros((8, 8, 3), np.float32), depth=np.ones((8, 8), np.float32),
                           g=(1, 1), y=1, z=3.0)
    with pytest.raises(DimensionError):
        write_dataset([samples[0], small], tmp_path / "x.dbpd")
    # hand-splice a record of different size after a valid one
    write_dataset([samples[0]], tmp_path / "a.dbpd")
    write_dataset([small], tmp_path / "b.dbpd")
    a, b = (tmp_path / "a.dbpd").read_bytes(), (tmp_path / "b.dbpd").read_bytes()
    spliced = a[:8] + struct.pack("<I", 2) + a[12:] + b[12:]
    (tmp_path / "c.dbpd").write_bytes(spliced)
    with pytest.raises(DimensionError, match="record 1"):
        read_dataset(tmp_path / "c.dbpd")


def test_split_sizes():
    assert [len(p) for p in split(list(range(100)))] == [90, 10]
    assert [len(p) for p in split(list(range(10)))] == [9, 1]
    with pytest.raises(ValueError):
        split([1])


def test_split_determinism():
    items = list(range(50))
    assert split(items, seed=3) == split(items, seed=3)
    assert split(items, seed=3) != split(items, seed=4)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 300), st.floats(0.05, 0.95), st.integers(0, 1000))
def test_split_is_a_partition(n, frac, seed):
    items = list(range(n))
    train, test = split(items, frac, seed)
    assert sorted(train + test) == items
    assert not set(train) & set(test)
    # round half up, but never leave either side empty
    assert len(train) == min(max(int(np.floor(frac * n + 0.5)), 1), n - 1)


def test_batches_example():
    assert [len(b) for b in batches(list(range(10)), 4, 0)] == [4, 4, 2]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 5), max_size=40), st.integers(1, 12), st.integers(0, 2**31))
def test_batches_cover_epoch(items, size, seed):
    epoch = list(batches(items, size, seed))
    flat = [x for b in epoch for x in b]
    assert collections.Counter(flat) == collections.Counter(items)
    assert all(len(b) == size for b in epoch[:-1])
    assert epoch == list(batches(items, size, seed))
