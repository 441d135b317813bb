import numpy as np
import pytest

from autoseg3d.archive import CheckpointArchive
from autoseg3d.errors import FormatError


def make_archive():
    arc = CheckpointArchive()
    arc.meta["epoch"] = 3
    arc.meta["flags"] = {"apg_enabled": True}
    arc.add("a.weight", np.arange(12, dtype=np.float32).reshape(3, 4), frozen=True)
    arc.add("a.bias", np.array([1.5, -2.5], dtype=np.float64))
    arc.add("b.labels", np.array([[1, 2], [3, 4]], dtype=np.int16))
    return arc


def test_round_trip_lossless(tmp_path):
    arc = make_archive()
    path = tmp_path / "model.ckpt"
    arc.save(path)
    back = CheckpointArchive.load(path)
    assert back.meta == arc.meta
    assert back.names() == arc.names()
    for name in arc.names():
        np.testing.assert_array_equal(back[name], arc[name])
        assert back[name].dtype == arc[name].dtype
        assert back.frozen[name] == arc.frozen[name]


def test_save_is_byte_deterministic(tmp_path):
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    make_archive().save(p1)
    make_archive().save(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_manifest_lists_every_entry():
    arc = make_archive()
    manifest = arc.manifest()
    assert [m[0] for m in manifest] == ["a.weight", "a.bias", "b.labels"]
    assert manifest[0][1] == (3, 4)
    assert manifest[0][2] == "f32"
    assert manifest[1][2] == "f64"


def test_duplicate_name_rejected():
    arc = CheckpointArchive()
    arc.add("x", np.zeros(2, dtype=np.float32))
    with pytest.raises(FormatError, match="duplicate"):
        arc.add("x", np.zeros(2, dtype=np.float32))


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOT-AN-ARCHIVE\nwhatever")
    with pytest.raises(FormatError, match="magic"):
        CheckpointArchive.load(path)


def test_truncated_payload_rejected(tmp_path):
    arc = make_archive()
    path = tmp_path / "model.ckpt"
    arc.save(path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(FormatError, match="truncated"):
        CheckpointArchive.load(path)
