"""Video feature records, the binary record format, manifests and synthetic data.

Record file layout (all integers little-endian)::

    b"TSMM" | u16 version | u32 N | u32 D_v | u32 D_t | u32 D_a | u8 flags
    f32[N*D_v] v | f32[N*D_t] t | f32[N*D_a] a
    [u8[N*3] presence]   if flags & PRESENCE
    [f32[N] gt]          if flags & GT
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

MAGIC = b"TSMM"
VERSION = 1
FLAG_GT = 0x01
FLAG_PRESENCE = 0x02
_HEADER = struct.Struct("<4sHIIIIB")
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


class RecordFormatError(ValueError):
    """Raised for malformed or truncated record files."""


@dataclass
class VideoRecord:
    id: str
    v: np.ndarray
    t: np.ndarray
    a: np.ndarray
    presence: np.ndarray | None = None
    gt: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.v = np.ascontiguousarray(self.v, dtype=np.float32)
        self.t = np.ascontiguousarray(self.t, dtype=np.float32)
        self.a = np.ascontiguousarray(self.a, dtype=np.float32)
        n = self.v.shape[0]
        for name in ("v", "t", "a"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ValueError(f"{self.id}: modality {name} has shape {arr.shape}, expected [{n}, D]")
        if self.presence is not None:
            self.presence = np.ascontiguousarray(self.presence, dtype=bool)
            if self.presence.shape != (n, 3):
                raise ValueError(f"{self.id}: presence mask must be [{n}, 3]")
        if self.gt is not None:
            self.gt = np.ascontiguousarray(self.gt, dtype=np.float32)
            if self.gt.shape != (n,):
                raise ValueError(f"{self.id}: gt must have length {n}")

    @property
    def n_frames(self) -> int:
        return self.v.shape[0]

    @property
    def dims(self) -> tuple:
        return (self.v.shape[1], self.t.shape[1], self.a.shape[1])


def write_record(record: VideoRecord, path) -> None:
    flags = (FLAG_GT if record.gt is not None else 0) | (FLAG_PRESENCE if record.presence is not None else 0)
    n = record.n_frames
    parts = [_HEADER.pack(MAGIC, VERSION, n, *record.dims, flags)]
    for arr in (record.v, record.t, record.a):
        parts.append(arr.astype("<f4").tobytes())
    if record.presence is not None:
        parts.append(record.presence.astype(np.uint8).tobytes())
    if record.gt is not None:
        parts.append(record.gt.astype("<f4").tobytes())
    tmp = Path(f"{path}.tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


def read_record(path, record_id: str | None = None, meta: dict | None = None) -> VideoRecord:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise RecordFormatError(f"{path}: truncated header")
    magic, version, n, dv, dt, da, flags = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise RecordFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise RecordFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * (dv + dt + da)
    if flags & FLAG_PRESENCE:
        expected += 3 * n
    if flags & FLAG_GT:
        expected += 4 * n
    if len(buf) != expected:
        raise RecordFormatError(f"{path}: size {len(buf)} bytes does not match header (expected {expected})")

    off = _HEADER.size
    mats = []
    for d in (dv, dt, da):
        mats.append(np.frombuffer(buf, dtype="<f4", count=n * d, offset=off).reshape(n, d).astype(np.float32))
        off += 4 * n * d
    presence = gt = None
    if flags & FLAG_PRESENCE:
        presence = np.frombuffer(buf, dtype=np.uint8, count=3 * n, offset=off).reshape(n, 3).astype(bool)
        off += 3 * n
    if flags & FLAG_GT:
        gt = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32)
    rid = record_id if record_id is not None else Path(path).stem
    return VideoRecord(rid, *mats, presence=presence, gt=gt, meta=dict(meta or {}))


# ---------------------------------------------------------------------------
# manifest


@dataclass
class DatasetManifest:
    entries: list
    root: Path = Path(".")
    format_version: int = MANIFEST_VERSION

    def to_json(self) -> dict:
        return {"format_version": self.format_version, "records": self.entries}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        doc = json.loads(path.read_text())
        if doc.get("format_version") != MANIFEST_VERSION:
            raise RecordFormatError(f"{path}: unsupported manifest version {doc.get('format_version')}")
        entries = doc["records"]
        ids = [e["id"] for e in entries]
        if len(set(ids)) != len(ids):
            raise RecordFormatError(f"{path}: duplicate record ids")
        man = cls(entries, root=path.parent)
        for e in entries:
            if not (man.root / e["path"]).exists():
                raise FileNotFoundError(f"{path}: record file {e['path']} is missing")
        return man

    def ids(self, split: str | None = None) -> list:
        return [e["id"] for e in self.entries if split is None or e.get("split") == split]

    def load_records(self, split: str | None = None) -> list:
        return [read_record(self.root / e["path"], e["id"], e.get("meta"))
                for e in self.entries if split is None or e.get("split") == split]


def manifest_entry(record: VideoRecord, rel_path: str, split: str | None = None) -> dict:
    entry = {
        "id": record.id,
        "path": rel_path,
        "n_frames": record.n_frames,
        "dims": list(record.dims),
        "has_gt": record.gt is not None,
        "meta": record.meta,
    }
    if split is not None:
        entry["split"] = split
    return entry


def split_dataset(entries, ratios=(0.8, 0.1, 0.1), seed: int = 0, stratify_key: str = "tag") -> dict:
    """Seeded train/val/test assignment, stratified by ``meta[stratify_key]`` when present.

    Within each stratum, counts follow the largest-remainder rounding of
    ``ratios``. Returns ``{id: split}``.
    """
    ratios = np.asarray(ratios, dtype=float)
    if len(ratios) != len(SPLITS) or abs(ratios.sum() - 1.0) > 1e-6 or (ratios < 0).any():
        raise ValueError(f"ratios must be three nonnegative values summing to 1, got {ratios.tolist()}")
    ids = [e["id"] if isinstance(e, dict) else e.id for e in entries]
    if len(ids) < len(SPLITS):
        raise ValueError(f"need at least {len(SPLITS)} records to split, got {len(ids)}")
    metas = [(e.get("meta") if isinstance(e, dict) else e.meta) or {} for e in entries]

    strata: dict = {}
    for rid, meta in zip(ids, metas):
        strata.setdefault(str(meta.get(stratify_key, "")), []).append(rid)

    rng = np.random.default_rng(seed)
    assignment = {}
    for key in sorted(strata):
        members = sorted(strata[key])
        rng.shuffle(members)
        counts = _largest_remainder(len(members), ratios)
        start = 0
        for split, c in zip(SPLITS, counts):
            for rid in members[start:start + c]:
                assignment[rid] = split
            start += c
    return assignment


def _largest_remainder(n: int, ratios: np.ndarray) -> list:
    raw = ratios * n
    counts = np.floor(raw + 1e-9).astype(int)
    rem = raw - counts
    for i in np.argsort(-rem, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def zero_leading(gt, seconds: int = 5) -> np.ndarray:
    """Zero the first ``seconds`` frames of a 1 fps score vector."""
    out = np.array(gt, dtype=np.float32, copy=True)
    out[: min(max(int(seconds), 0), len(out))] = 0.0
    return out


# ---------------------------------------------------------------------------
# synthetic planted-saliency data


@dataclass
class SyntheticSpec:
    """Generator settings.

    Each frame has a latent dominant modality drawn from a sticky Markov
    chain. Every modality carries its own smooth importance curve on channel
    0, but only the dominant one's value becomes the frame's ground truth;
    channel 1 flags dominance. The remaining channels hold piecewise-constant
    scene content, and ``noise`` adds isotropic Gaussian noise everywhere.
    """

    n_videos: int = 50
    n_range: tuple = (100, 140)
    dims: tuple = (64, 64, 64)
    stay_prob: float = 0.95
    noise: float = 0.1
    smoothness: float = 6.0
    text_gap_prob: float = 0.0
    scene_rate: float = 0.05
    fixed_dominant: int | None = None
    seed: int = 0
    ratios: tuple = (0.8, 0.1, 0.1)
    n_tags: int = 1

    def __post_init__(self):
        self.n_range = tuple(int(x) for x in self.n_range)
        self.dims = tuple(int(x) for x in self.dims)
        self.ratios = tuple(float(x) for x in self.ratios)
        if len(self.dims) != 3 or min(self.dims) < 2:
            raise ValueError("synthetic dims need three extents of at least 2 (signal + marker channels)")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.n_videos < 1 or self.n_range[0] < 1 or self.n_range[0] > self.n_range[1]:
            raise ValueError("invalid video count or length range")
        if not 0.0 <= self.stay_prob <= 1.0:
            raise ValueError("stay_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("n_range", "dims", "ratios"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**d)


def _smooth_curve(rng: np.random.Generator, n: int, width: float) -> np.ndarray:
    raw = rng.normal(size=n + 6 * int(math.ceil(width)))
    k = np.arange(-3 * width, 3 * width + 1)
    kernel = np.exp(-0.5 * (k / width) ** 2)
    sm = np.convolve(raw, kernel / kernel.sum(), mode="same")
    off = 3 * int(math.ceil(width))
    sm = sm[off:off + n]
    return (sm - sm.mean()) / (sm.std() + 1e-12)


def dominance_chain(rng: np.random.Generator, n: int, stay_prob: float) -> np.ndarray:
    d = np.empty(n, dtype=np.int64)
    d[0] = rng.integers(3)
    for i in range(1, n):
        if rng.random() < stay_prob:
            d[i] = d[i - 1]
        else:
            d[i] = (d[i - 1] + rng.integers(1, 3)) % 3
    return d


def generate_video(spec: SyntheticSpec, rng: np.random.Generator, vid: str, tag: str = "") -> VideoRecord:
    n = int(rng.integers(spec.n_range[0], spec.n_range[1] + 1))
    if spec.fixed_dominant is not None:
        dom = np.full(n, int(spec.fixed_dominant), dtype=np.int64)
    else:
        dom = dominance_chain(rng, n, spec.stay_prob)
    curves = np.stack([_smooth_curve(rng, n, spec.smoothness) for _ in range(3)])   # [3, N]
    planted = curves[dom, np.arange(n)]

    # scene cuts for the content channels
    cuts = np.flatnonzero(rng.random(n) < spec.scene_rate)
    scene = np.zeros(n, dtype=np.int64)
    scene[cuts] = 1
    scene = np.cumsum(scene)

    mats = []
    for m, dm in enumerate(spec.dims):
        x = np.zeros((n, dm))
        x[:, 0] = curves[m]
        x[:, 1] = (dom == m).astype(float)
        if dm > 2:
            content = rng.normal(size=(scene[-1] + 1, dm - 2)) / math.sqrt(dm - 2) * 2.0
            x[:, 2:] = content[scene]
        if spec.noise > 0:
            x += spec.noise * rng.normal(size=x.shape)
        mats.append(x)

    presence = None
    if spec.text_gap_prob > 0:
        presence = np.ones((n, 3), dtype=bool)
        gap = (rng.random(n) < spec.text_gap_prob) & (dom != 1)
        presence[gap, 1] = False
        mats[1][gap] = 0.0

    lo, hi = planted.min(), planted.max()
    gt = (planted - lo) / (hi - lo) if hi > lo else np.zeros(n)
    meta = {"tag": tag, "dominant": dom.tolist()}
    return VideoRecord(vid, *mats, presence=presence, gt=gt, meta=meta)


def generate_synthetic(spec: SyntheticSpec) -> list:
    rng = np.random.default_rng(spec.seed)
    width = max(3, len(str(spec.n_videos - 1)))
    return [generate_video(spec, rng, f"syn{i:0{width}d}", tag=f"tag{i % spec.n_tags}")
            for i in range(spec.n_videos)]


def write_dataset(records: list, out_dir, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    out = Path(out_dir)
    (out / "records").mkdir(parents=True, exist_ok=True)
    assignment = split_dataset(records, ratios, seed)
    entries = []
    for r in records:
        rel = f"records/{r.id}.tsmm"
        write_record(r, out / rel)
        entries.append(manifest_entry(r, rel, assignment[r.id]))
    man = DatasetManifest(entries, root=out)
    man.save(out / "manifest.json")
    return man
