import numpy as np
import pytest

from autoseg3d.archive import CheckpointArchive
from autoseg3d.encoder import expected_2d_entries, validate_2d_archive
from autoseg3d.errors import ConfigError, PlacementError
from autoseg3d.phantoms import (
    PhantomSpec,
    generate_phantom,
    generate_phantom_dataset,
    generate_surrogate_2d_checkpoint,
)

from oracles import ball_voxel_count


def test_same_seed_bit_identical():
    spec = PhantomSpec(num_organs=3, noise_sigma=7.0, seed=7)
    vol1, lab1 = generate_phantom(spec)
    vol2, lab2 = generate_phantom(spec)
    assert vol1.data.tobytes() == vol2.data.tobytes()
    assert lab1.data.tobytes() == lab2.data.tobytes()


def test_different_seed_differs():
    a, _ = generate_phantom(PhantomSpec(noise_sigma=5.0, seed=1))
    b, _ = generate_phantom(PhantomSpec(noise_sigma=5.0, seed=2))
    assert a.data.tobytes() != b.data.tobytes()


def test_sphere_volume_matches_enumeration_oracle():
    spec = PhantomSpec(
        grid_shape=(32, 32, 32), num_organs=1, shape_family="sphere",
        centers=[(16, 16, 16)], radii=[6], seed=0,
    )
    _, lab = generate_phantom(spec)
    expected = ball_voxel_count((32, 32, 32), (16, 16, 16), 6)
    assert int((lab.data == 1).sum()) == expected
    assert expected > 0


def test_no_noise_zero_background_is_exactly_zero():
    spec = PhantomSpec(num_organs=1, background_intensity=0.0, noise_sigma=0.0, seed=3)
    vol, lab = generate_phantom(spec)
    assert np.all(vol.data[lab.data == 0] == 0.0)


def test_shapes_and_values_agree():
    spec = PhantomSpec(grid_shape=(16, 24, 20), num_organs=2, seed=5)
    vol, lab = generate_phantom(spec)
    assert vol.shape == lab.shape == (16, 24, 20)
    assert vol.spacing_mm == lab.spacing_mm
    values = set(np.unique(lab.data).tolist())
    assert values <= {0, 1, 2}
    for organ in (1, 2):
        assert (lab.data == organ).sum() >= 1


def test_organs_disjoint_with_margin():
    spec = PhantomSpec(grid_shape=(40, 40, 40), num_organs=3, seed=9)
    _, lab = generate_phantom(spec)
    for organ in range(1, 4):
        mask = lab.data == organ
        others = (lab.data > 0) & ~mask
        # no other organ voxel within one face-step of this organ
        for axis in range(3):
            for shift in (1, -1):
                rolled = np.roll(mask, shift, axis=axis)
                sl = [slice(None)] * 3
                sl[axis] = slice(0, 1) if shift == 1 else slice(-1, None)
                rolled[tuple(sl)] = False
                assert not (rolled & others).any()


def test_impossible_placement_names_organ():
    # two organs pinned to the same spot cannot be disjoint
    spec = PhantomSpec(grid_shape=(16, 16, 16), num_organs=2, radii=[4, 4],
                       centers=[(8, 8, 8), (8, 8, 8)], seed=0)
    with pytest.raises(PlacementError, match="organ 1"):
        generate_phantom(spec)


def test_too_many_organs_raises():
    spec = PhantomSpec(grid_shape=(16, 16, 16), num_organs=60, radius_range=(3, 4), seed=0)
    with pytest.raises(PlacementError):
        generate_phantom(spec)


def test_bad_spec_rejected():
    with pytest.raises(ConfigError, match="grid_shape"):
        PhantomSpec(grid_shape=(4, 32, 32))
    with pytest.raises(ConfigError, match="shape_family"):
        PhantomSpec(shape_family="torus")


def test_dataset_cases_differ_but_are_reproducible():
    spec = PhantomSpec(num_organs=1, noise_sigma=3.0, seed=21)
    cases1 = generate_phantom_dataset(spec, 3)
    cases2 = generate_phantom_dataset(spec, 3)
    for (v1, _), (v2, _) in zip(cases1, cases2):
        assert v1.data.tobytes() == v2.data.tobytes()
    assert cases1[0][0].data.tobytes() != cases1[1][0].data.tobytes()


# --- surrogate checkpoints -------------------------------------------------

def test_surrogate_deterministic(desk_cfg):
    a = generate_surrogate_2d_checkpoint(desk_cfg, seed=4)
    b = generate_surrogate_2d_checkpoint(desk_cfg, seed=4)
    assert a.names() == b.names()
    for name in a.names():
        np.testing.assert_array_equal(a[name], b[name])


def test_surrogate_matches_expected_naming(desk_cfg):
    arc = generate_surrogate_2d_checkpoint(desk_cfg, seed=4)
    expected = expected_2d_entries(desk_cfg)
    assert set(arc.names()) == set(expected)
    for name, shape in expected.items():
        assert tuple(arc[name].shape) == shape
    # exactly one qkv/proj weight+bias per block
    for stem in ("attn.qkv.weight", "attn.qkv.bias", "attn.proj.weight", "attn.proj.bias"):
        hits = [n for n in arc.names() if n.endswith(stem)]
        assert len(hits) == desk_cfg.num_blocks


def test_surrogate_passes_importer_validation(desk_cfg):
    arc = generate_surrogate_2d_checkpoint(desk_cfg, seed=4)
    validate_2d_archive(arc, desk_cfg)   # must not raise


def test_surrogate_round_trips_through_disk(tmp_path, desk_cfg):
    arc = generate_surrogate_2d_checkpoint(desk_cfg, seed=4)
    path = tmp_path / "surrogate.ckpt"
    arc.save(path)
    back = CheckpointArchive.load(path)
    for name in arc.names():
        np.testing.assert_array_equal(back[name], arc[name])
