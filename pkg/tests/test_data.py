import json
import struct

import numpy as np
import pytest

from triplesumm.data import (DatasetManifest, RecordFormatError, SyntheticSpec, VideoRecord, generate_synthetic,
                             read_record, split_dataset, write_dataset, write_record, zero_leading)
from triplesumm.metrics import spearman_rho


def _record(n=7, presence=True, gt=True, seed=0):
    rng = np.random.default_rng(seed)
    pres = rng.random((n, 3)) > 0.3 if presence else None
    return VideoRecord("clip", rng.normal(size=(n, 4)), rng.normal(size=(n, 2)), rng.normal(size=(n, 3)),
                       presence=pres, gt=rng.uniform(size=n) if gt else None)


@pytest.mark.parametrize("presence,gt", [(True, True), (False, True), (True, False), (False, False)])
def test_record_round_trip_bit_exact(tmp_path, presence, gt):
    rec = _record(presence=presence, gt=gt)
    path = tmp_path / "clip.tsmm"
    write_record(rec, path)
    back = read_record(path)
    assert back.id == "clip"
    for name in ("v", "t", "a", "gt", "presence"):
        a, b = getattr(rec, name), getattr(back, name)
        if a is None:
            assert b is None
        else:
            assert a.tobytes() == b.tobytes()


def test_minimal_record(tmp_path):
    rec = VideoRecord("one", np.ones((1, 1)), np.ones((1, 1)), np.ones((1, 1)), gt=[0.5])
    write_record(rec, tmp_path / "one.tsmm")
    assert read_record(tmp_path / "one.tsmm").n_frames == 1


def test_header_layout(tmp_path):
    write_record(_record(n=3), tmp_path / "r.tsmm")
    buf = (tmp_path / "r.tsmm").read_bytes()
    magic, version, n, dv, dt, da, flags = struct.unpack_from("<4sHIIIIB", buf)
    assert (magic, version, n, dv, dt, da, flags) == (b"TSMM", 1, 3, 4, 2, 3, 3)
    assert len(buf) == 23 + 4 * 3 * 9 + 3 * 3 + 4 * 3


def test_corruption_errors(tmp_path):
    path = tmp_path / "r.tsmm"
    write_record(_record(), path)
    good = path.read_bytes()
    path.write_bytes(good[:-3])
    with pytest.raises(RecordFormatError):
        read_record(path)
    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(RecordFormatError):
        read_record(path)
    path.write_bytes(good[:4] + struct.pack("<H", 9) + good[6:])
    with pytest.raises(RecordFormatError):
        read_record(path)
    path.write_bytes(good[:10])
    with pytest.raises(RecordFormatError):
        read_record(path)
    # header claims a wider visual block than the payload holds
    path.write_bytes(good[:10] + struct.pack("<I", 5) + good[14:])
    with pytest.raises(RecordFormatError):
        read_record(path)


def test_record_validation():
    with pytest.raises(ValueError):
        VideoRecord("x", np.ones((3, 2)), np.ones((4, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        VideoRecord("x", np.ones((3, 2)), np.ones((3, 2)), np.ones((3, 2)), gt=np.ones(2))


def test_split_counts_and_determinism():
    entries = [{"id": f"r{i}", "meta": {}} for i in range(10)]
    a = split_dataset(entries, seed=3)
    assert a == split_dataset(entries, seed=3)
    counts = {s: list(a.values()).count(s) for s in ("train", "val", "test")}
    assert counts == {"train": 8, "val": 1, "test": 1}
    assert set(a) == {e["id"] for e in entries}
    with pytest.raises(ValueError):
        split_dataset(entries[:2])
    with pytest.raises(ValueError):
        split_dataset(entries, ratios=(0.5, 0.1, 0.1))


def test_split_stratification_preserves_proportions():
    entries = [{"id": f"r{i}", "meta": {"tag": "ab"[i % 2]}} for i in range(20)]
    a = split_dataset(entries, seed=1)
    for split, want in (("train", 8), ("val", 1), ("test", 1)):
        for tag in "ab":
            got = sum(1 for e in entries if e["meta"]["tag"] == tag and a[e["id"]] == split)
            assert got == want


def test_zero_leading():
    np.testing.assert_allclose(zero_leading([0.9, 0.8, 0.7, 0.6, 0.5, 0.4]), [0, 0, 0, 0, 0, 0.4])
    np.testing.assert_array_equal(zero_leading([0.3, 0.2, 0.1]), [0, 0, 0])
    np.testing.assert_allclose(zero_leading([0.3, 0.2], seconds=0), [0.3, 0.2])


def test_synthetic_properties():
    spec = SyntheticSpec(n_videos=6, n_range=(30, 40), dims=(6, 5, 4), seed=2)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    for ra, rb in zip(a, b):
        assert ra.v.tobytes() == rb.v.tobytes() and ra.gt.tobytes() == rb.gt.tobytes()
        assert ra.gt.min() == 0.0 and ra.gt.max() == 1.0
        assert 30 <= ra.n_frames <= 40 and ra.dims == (6, 5, 4)
        assert len(ra.meta["dominant"]) == ra.n_frames
    assert generate_synthetic(SyntheticSpec(n_videos=1, seed=3))[0].v.tobytes() != a[0].v.tobytes()


def test_noiseless_single_dominant_recovers_gt():
    spec = SyntheticSpec(n_videos=3, noise=0.0, fixed_dominant=2, dims=(4, 4, 4))
    for rec in generate_synthetic(spec):
        sig = rec.a[:, 0].astype(np.float64)
        np.testing.assert_allclose(rec.gt, (sig - sig.min()) / (sig.max() - sig.min()), atol=1e-6)
        assert (rec.a[:, 1] == 1).all() and (rec.v[:, 1] == 0).all()


def test_noiseless_gt_tracks_planted_signal():
    for rec in generate_synthetic(SyntheticSpec(n_videos=5, noise=0.0, seed=4)):
        dom = np.asarray(rec.meta["dominant"])
        mats = np.stack([rec.v[:, 0], rec.t[:, 0], rec.a[:, 0]])
        planted = mats[dom, np.arange(rec.n_frames)]
        assert spearman_rho(rec.gt, planted) >= 0.99


def test_text_gaps_fill_zero():
    rec = generate_synthetic(SyntheticSpec(n_videos=1, text_gap_prob=0.3, seed=5))[0]
    gaps = ~rec.presence[:, 1]
    assert gaps.any() and not rec.t[gaps].any()


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(noise=-1)
    with pytest.raises(ValueError):
        SyntheticSpec(dims=(1, 4, 4))
    with pytest.raises(KeyError):
        SyntheticSpec.from_dict({"videos": 3})
    spec = SyntheticSpec(n_videos=4)
    assert SyntheticSpec.from_dict(spec.to_dict()) == spec


def test_dataset_directory_round_trip(tmp_path):
    recs = generate_synthetic(SyntheticSpec(n_videos=10, n_range=(12, 15), dims=(3, 3, 3), n_tags=2))
    man = write_dataset(recs, tmp_path / "ds", seed=0)
    loaded = DatasetManifest.load(tmp_path / "ds")
    assert loaded.ids() == man.ids() and len(loaded.ids()) == 10
    assert sum(len(loaded.ids(s)) for s in ("train", "val", "test")) == 10
    back = {r.id: r for r in loaded.load_records()}
    for r in recs:
        assert back[r.id].v.tobytes() == r.v.tobytes()
        assert back[r.id].meta["dominant"] == r.meta["dominant"]
    doc = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    doc["records"].append(dict(doc["records"][0]))
    (tmp_path / "ds" / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        DatasetManifest.load(tmp_path / "ds")


def test_manifest_missing_file(tmp_path):
    recs = generate_synthetic(SyntheticSpec(n_videos=3, n_range=(5, 6), dims=(2, 2, 2)))
    write_dataset(recs, tmp_path)
    (tmp_path / "records" / f"{recs[0].id}.tsmm").unlink()
    with pytest.raises((FileNotFoundError, ValueError)):
        DatasetManifest.load(tmp_path)
