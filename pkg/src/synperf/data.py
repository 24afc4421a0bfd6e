"""Domain types, the on-disk case format, and dataset splits."""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"PFSN1\0"
DTYPE_CODES = {0: np.dtype("<f4")}


class DataError(ValueError):
    """Raised when data violates a domain invariant or the container format."""


class MapKind(str, enum.Enum):
    TMAX = "tmax"
    TTP = "ttp"
    RBF = "rbf"


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


def _as_f4(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype != np.float32:
        a = a.astype(np.float32)
    return a


@dataclass(frozen=True, eq=False)
class PerfusionSequence:
    """Raw 4D signal, axes (frame, slice, row, col), with frame times in seconds."""

    data: np.ndarray
    frame_times: np.ndarray

    def __post_init__(self):
        data = _as_f4(self.data)
        times = _as_f4(self.frame_times)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "frame_times", times)
        if data.ndim != 4:
            raise DataError(f"sequence must be 4D, got shape {data.shape}")
        if times.ndim != 1 or len(times) != data.shape[0]:
            raise DataError(f"frame_times length {times.shape} does not match {data.shape[0]} frames")
        if len(times) > 1 and not np.all(np.diff(times) > 0):
            raise DataError("frame_times must be strictly increasing")
        if not np.isfinite(data).all() or not np.isfinite(times).all():
            raise DataError("non-finite data in sequence")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple:
        return self.data.shape[1:]

    def equals(self, other: "PerfusionSequence") -> bool:
        return _bit_equal(self.data, other.data) and _bit_equal(self.frame_times, other.frame_times)


@dataclass(frozen=True, eq=False)
class PerfusionMap:
    data: np.ndarray
    kind: MapKind

    def __post_init__(self):
        data = _as_f4(self.data)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "kind", MapKind(self.kind))
        if data.ndim != 3:
            raise DataError(f"perfusion map must be 3D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise DataError(f"non-finite data in {self.kind.value} map")

    @property
    def units(self) -> str:
        return "relative flow" if self.kind is MapKind.RBF else "s"

    def equals(self, other: "PerfusionMap") -> bool:
        return self.kind == other.kind and _bit_equal(self.data, other.data)


def _bit_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def _check_stats(stats, what):
    if stats is None:
        return None
    mean, std = (float(stats[0]), float(stats[1]))
    if not (math.isfinite(mean) and math.isfinite(std)) or std <= 0:
        raise DataError(f"{what} statistics must be finite with std > 0, got {stats}")
    return (mean, std)


@dataclass(frozen=True, eq=False)
class CaseRecord:
    """One subject.

    ``seq_stats`` and ``target_stats`` stay empty until the case is
    standardized; ``split`` stays None until a manifest assigns one.
    """

    case_id: str
    sequence: PerfusionSequence
    targets: dict = field(default_factory=dict)
    seq_stats: tuple | None = None
    target_stats: dict = field(default_factory=dict)
    split: Split | None = None

    def __post_init__(self):
        if not self.case_id or any(c in self.case_id for c in "/\\\n="):
            raise DataError(f"invalid case_id {self.case_id!r}")
        targets = {MapKind(k): v for k, v in self.targets.items()}
        for kind, m in targets.items():
            if m.kind != kind:
                raise DataError(f"target stored under {kind.value} has kind {m.kind.value}")
            if m.data.shape != self.sequence.spatial_shape:
                raise DataError(
                    f"{kind.value} map shape {m.data.shape} does not match sequence {self.sequence.spatial_shape}"
                )
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "seq_stats", _check_stats(self.seq_stats, "sequence"))
        object.__setattr__(
            self,
            "target_stats",
            {MapKind(k): _check_stats(v, f"{MapKind(k).value} target") for k, v in self.target_stats.items()},
        )
        if self.split is not None:
            object.__setattr__(self, "split", Split(self.split))

    def replace(self, **changes) -> "CaseRecord":
        return replace(self, **changes)

    def equals(self, other: "CaseRecord") -> bool:
        return (
            self.case_id == other.case_id
            and self.sequence.equals(other.sequence)
            and self.targets.keys() == other.targets.keys()
            and all(self.targets[k].equals(other.targets[k]) for k in self.targets)
            and self.seq_stats == other.seq_stats
            and self.target_stats == other.target_stats
            and self.split == other.split
        )


@dataclass(frozen=True)
class DatasetManifest:
    cases: tuple
    seed: int
    ratios: tuple = (0.5, 0.2, 0.3)

    def __post_init__(self):
        object.__setattr__(self, "cases", tuple((str(c), Split(s)) for c, s in self.cases))
        object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
        _check_ratios(self.ratios)
        ids = [c for c, _ in self.cases]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate case_id in manifest")

    def ids(self, split: Split | str) -> list:
        split = Split(split)
        return [c for c, s in self.cases if s is split]

    def split_of(self, case_id: str) -> Split:
        for c, s in self.cases:
            if c == case_id:
                return s
        raise KeyError(case_id)


def _check_ratios(ratios):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three non-negative values summing to 1, got {ratios}")


# ---------------------------------------------------------------------------
# array container


def write_array(path, array) -> None:
    a = np.asarray(array)
    if a.dtype != np.float32:
        raise DataError(f"container stores float32 only, got {a.dtype}")
    if a.ndim > 255:
        raise DataError("rank too large")
    header = MAGIC + struct.pack("<B", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape) + struct.pack("<B", 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"unrecognized container: {path}")
    pos = len(MAGIC)
    if len(raw) < pos + 1:
        raise DataError(f"truncated header: {path}")
    rank = raw[pos]
    pos += 1
    if len(raw) < pos + 4 * rank + 1:
        raise DataError(f"truncated header: {path}")
    shape = struct.unpack_from(f"<{rank}I", raw, pos)
    pos += 4 * rank
    code = raw[pos]
    pos += 1
    if code not in DTYPE_CODES:
        raise DataError(f"unknown dtype code {code} in {path}")
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    payload = len(raw) - pos
    if payload < expected:
        raise DataError(f"truncated payload in {path}: expected {expected} bytes, found {payload}")
    if payload > expected:
        raise DataError(f"trailing bytes in {path}: expected {expected} bytes, found {payload}")
    return np.frombuffer(raw, dtype=dtype, count=expected // dtype.itemsize, offset=pos).astype(np.float32).reshape(shape)


# ---------------------------------------------------------------------------
# key=value metadata


def write_kv(path, items: dict) -> None:
    lines = [f"{k}={v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_kv(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _fmt_stats(stats):
    return "none" if stats is None else f"{stats[0]!r},{stats[1]!r}"


def _parse_stats(text):
    if text == "none":
        return None
    a, b = text.split(",")
    return (float(a), float(b))


def write_case(case: CaseRecord, directory, force: bool = False) -> Path:
    """Write ``case`` as one container file per array plus ``meta.txt``."""
    directory = Path(directory)
    if directory.exists() and any(directory.iterdir()) and not force:
        raise FileExistsError(f"refusing to overwrite non-empty {directory} (use force)")
    directory.mkdir(parents=True, exist_ok=True)
    write_array(directory / "sequence.pfsn", case.sequence.data)
    write_array(directory / "frame_times.pfsn", case.sequence.frame_times)
    for kind, m in case.targets.items():
        write_array(directory / f"target_{kind.value}.pfsn", m.data)
    meta = {
        "case_id": case.case_id,
        "kinds": ",".join(k.value for k in case.targets),
        "frames": case.sequence.n_frames,
        "shape": "x".join(str(s) for s in case.sequence.data.shape),
        "seq_stats": _fmt_stats(case.seq_stats),
    }
    for kind in case.targets:
        meta[f"target_stats_{kind.value}"] = _fmt_stats(case.target_stats.get(kind))
    meta["split"] = case.split.value if case.split else "none"
    write_kv(directory / "meta.txt", meta)
    return directory


def read_case(directory) -> CaseRecord:
    directory = Path(directory)
    meta = read_kv(directory / "meta.txt")
    data = read_array(directory / "sequence.pfsn")
    times = read_array(directory / "frame_times.pfsn")
    if data.ndim != 4 or data.shape[0] != int(meta["frames"]):
        raise DataError(f"truncated sequence in {directory}: header says {meta['frames']} frames, found {data.shape}")
    kinds = [MapKind(k) for k in meta["kinds"].split(",") if k]
    targets = {k: PerfusionMap(read_array(directory / f"target_{k.value}.pfsn"), k) for k in kinds}
    target_stats = {}
    for k in kinds:
        stats = _parse_stats(meta.get(f"target_stats_{k.value}", "none"))
        if stats is not None:
            target_stats[k] = stats
    split = meta.get("split", "none")
    return CaseRecord(
        case_id=meta["case_id"],
        sequence=PerfusionSequence(data, times),
        targets=targets,
        seq_stats=_parse_stats(meta["seq_stats"]),
        target_stats=target_stats,
        split=None if split == "none" else Split(split),
    )


def list_cases(root) -> list:
    root = Path(root)
    return sorted(p.name for p in root.iterdir() if (p / "meta.txt").is_file())


def load_cases(root, ids=None) -> list:
    root = Path(root)
    ids = list_cases(root) if ids is None else ids
    return [read_case(root / cid) for cid in ids]


# ---------------------------------------------------------------------------
# splits


def split_sizes(n: int, ratios) -> tuple:
    n_val = int(math.floor(n * ratios[1] + 0.5))
    n_test = int(math.floor(n * ratios[2] + 0.5))
    return (n - n_val - n_test, n_val, n_test)


def assign_splits(case_ids, ratios=(0.5, 0.2, 0.3), seed: int = 0) -> DatasetManifest:
    """Seeded shuffle then contiguous slicing; the rounding remainder goes to TRAIN."""
    ids = [str(c) for c in case_ids]
    if not ids:
        raise DataError("empty case list")
    if len(ids) < 3:
        raise DataError(f"need at least 3 cases, got {len(ids)}")
    ratios = tuple(float(r) for r in ratios)
    _check_ratios(ratios)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate case_id")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    cases = []
    for i, cid in enumerate(shuffled):
        if i < n_train:
            s = Split.TRAIN
        elif i < n_train + n_val:
            s = Split.VAL
        else:
            s = Split.TEST
        cases.append((cid, s))
    return DatasetManifest(cases=tuple(cases), seed=int(seed), ratios=ratios)


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [
        f"# seed={manifest.seed}",
        "# ratios=" + ",".join(repr(r) for r in manifest.ratios),
        "case_id\tsplit",
    ]
    lines += [f"{c}\t{s.value}" for c, s in manifest.cases]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> DatasetManifest:
    seed, ratios, cases = 0, (0.5, 0.2, 0.3), []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("# seed="):
            seed = int(line.split("=", 1)[1])
        elif line.startswith("# ratios="):
            ratios = tuple(float(x) for x in line.split("=", 1)[1].split(","))
        elif line and not line.startswith("#") and line != "case_id\tsplit":
            cid, split = line.split("\t")
            cases.append((cid, split))
    return DatasetManifest(cases=tuple(cases), seed=seed, ratios=ratios)
