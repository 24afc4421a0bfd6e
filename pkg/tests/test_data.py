import numpy as np
import pytest

from synperf.data import (MAGIC, CaseRecord, DataError, DatasetManifest, MapKind, PerfusionMap, PerfusionSequence,
                          Split, assign_splits, list_cases, read_array, read_case, read_manifest, split_sizes,
                          write_array, write_case, write_manifest)

from conftest import make_case


def test_case_round_trip_is_bitwise(tmp_path, case):
    case = case.replace(seq_stats=(1.5, 2.0), target_stats={MapKind.TMAX: (3.0, 4.0)}, split=Split.VAL)
    write_case(case, tmp_path / "c0")
    back = read_case(tmp_path / "c0")
    assert back.equals(case)
    assert back.sequence.data.tobytes() == case.sequence.data.tobytes()


def test_round_trip_without_stats_or_split(tmp_path):
    case = make_case(kinds=(MapKind.TMAX, MapKind.TTP, MapKind.RBF))
    write_case(case, tmp_path / "x")
    back = read_case(tmp_path / "x")
    assert back.equals(case)
    assert back.split is None and back.seq_stats is None


def test_nan_in_sequence_rejected():
    data = np.ones((3, 1, 2, 2), dtype=np.float32)
    data[1, 0, 0, 0] = np.nan
    with pytest.raises(DataError, match="non-finite data"):
        PerfusionSequence(data, np.arange(3.0))


def test_frame_times_length_mismatch_rejected():
    with pytest.raises(DataError):
        PerfusionSequence(np.ones((3, 1, 2, 2)), np.arange(4.0))


def test_frame_times_must_increase():
    with pytest.raises(DataError):
        PerfusionSequence(np.ones((3, 1, 2, 2)), np.array([0.0, 1.0, 1.0]))


def test_target_shape_must_match_sequence(case):
    with pytest.raises(DataError):
        CaseRecord("bad", case.sequence, {MapKind.TMAX: PerfusionMap(np.zeros((1, 1, 1)), MapKind.TMAX)})


def test_invalid_case_id():
    with pytest.raises(DataError):
        make_case(case_id="a/b")


def test_wrong_magic(tmp_path):
    p = tmp_path / "a.pfsn"
    p.write_bytes(b"NOPE!!" + b"\0" * 20)
    with pytest.raises(DataError, match="unrecognized container"):
        read_array(p)


def test_truncated_payload(tmp_path):
    p = tmp_path / "a.pfsn"
    write_array(p, np.ones((4, 3), dtype=np.float32))
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(DataError, match="truncated"):
        read_array(p)


def test_trailing_bytes(tmp_path):
    p = tmp_path / "a.pfsn"
    write_array(p, np.ones(3, dtype=np.float32))
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(DataError, match="trailing"):
        read_array(p)


def test_header_frames_exceed_present_frames(tmp_path, case):
    d = write_case(case, tmp_path / "c")
    meta = (d / "meta.txt").read_text().replace("frames=6", "frames=7")
    (d / "meta.txt").write_text(meta)
    with pytest.raises(DataError, match="truncated"):
        read_case(d)


def test_container_layout(tmp_path):
    p = tmp_path / "a.pfsn"
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_array(p, a)
    raw = p.read_bytes()
    assert raw.startswith(MAGIC)
    assert raw[len(MAGIC)] == 2
    assert np.array_equal(read_array(p), a)


def test_container_rejects_float64(tmp_path):
    with pytest.raises(DataError):
        write_array(tmp_path / "a.pfsn", np.zeros(3))


def test_write_case_refuses_overwrite(tmp_path, case):
    write_case(case, tmp_path / "c")
    with pytest.raises(FileExistsError):
        write_case(case, tmp_path / "c")
    write_case(case, tmp_path / "c", force=True)


def test_list_cases(tmp_path):
    for i in (2, 0, 1):
        write_case(make_case(f"c{i}", seed=i), tmp_path / f"c{i}")
    (tmp_path / "junk").mkdir()
    assert list_cases(tmp_path) == ["c0", "c1", "c2"]


def test_split_sizes_151():
    sizes = split_sizes(151, (0.5, 0.2, 0.3))
    assert sum(sizes) == 151
    assert sizes == (76, 30, 45)


def test_three_cases_one_per_split():
    m = assign_splits(["a", "b", "c"], seed=3)
    assert sorted(len(m.ids(s)) for s in Split) == [1, 1, 1]


def test_splits_deterministic_and_disjoint():
    ids = [f"c{i}" for i in range(10)]
    m1, m2 = assign_splits(ids, seed=5), assign_splits(ids, seed=5)
    assert m1 == m2
    parts = [set(m1.ids(s)) for s in Split]
    assert set().union(*parts) == set(ids)
    assert sum(len(p) for p in parts) == len(ids)
    assert [len(p) for p in parts] == [5, 2, 3]


def test_splits_depend_on_seed():
    ids = [f"c{i}" for i in range(20)]
    assert assign_splits(ids, seed=0) != assign_splits(ids, seed=1)


def test_split_errors():
    with pytest.raises(DataError):
        assign_splits([])
    with pytest.raises(DataError):
        assign_splits(["a", "a", "b"])
    with pytest.raises(DataError):
        assign_splits(["a", "b", "c"], ratios=(0.5, 0.5, 0.5))


def test_manifest_round_trip(tmp_path):
    m = assign_splits([f"c{i}" for i in range(7)], seed=9)
    write_manifest(m, tmp_path / "m.tsv")
    assert read_manifest(tmp_path / "m.tsv") == m
    assert m.split_of(m.ids("val")[0]) is Split.VAL


def test_manifest_rejects_duplicates():
    with pytest.raises(DataError):
        DatasetManifest((("a", "train"), ("a", "val")), seed=0)
