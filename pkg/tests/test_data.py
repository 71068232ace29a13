import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lifelong_pose.data import (FormatError, InvalidSpec, SkeletonHashMismatch, SynthDomainSpec, normalize_2d,
                                padded_windows, read_dataset, read_pose_file, synth_domain, template_bone_lengths,
                                write_dataset, write_pose_file)
from lifelong_pose.skeleton import Camera, bones_from_joints, project


def _spec(**kw):
    base = dict(name="d", seed=3, seq_len=40)
    base.update(kw)
    return SynthDomainSpec(**base)


def test_zero_noise_2d_is_projection_of_3d():
    ds = synth_domain(_spec(), 100)
    assert ds.n_frames == 100
    np.testing.assert_array_equal(project(ds.frames3d(), ds.camera), ds.frames2d())


def test_noise_changes_only_2d():
    clean, noisy = synth_domain(_spec(), 80), synth_domain(_spec(noise_px=2.0), 80)
    np.testing.assert_array_equal(clean.frames3d(), noisy.frames3d())
    resid = noisy.frames2d() - clean.frames2d()
    assert 1.5 < resid.std() < 2.5


@pytest.mark.parametrize("scale", [1.0, 1.2])
def test_bone_lengths_follow_scale(scale):
    ds = synth_domain(_spec(scale=scale, mixture={"squat": 0.5, "wave": 0.5}), 120)
    lengths = bones_from_joints(ds.frames3d()).lengths
    np.testing.assert_allclose(lengths, np.broadcast_to(template_bone_lengths(scale), lengths.shape), rtol=1e-9)


def test_seeds_and_splits():
    a, b = synth_domain(_spec(), 60), synth_domain(_spec(), 60)
    np.testing.assert_array_equal(a.frames2d(), b.frames2d())
    assert not np.array_equal(a.frames3d(), synth_domain(_spec(seed=4), 60).frames3d())
    assert not np.array_equal(a.frames3d(), synth_domain(_spec(), 60, split="eval").frames3d())


@settings(max_examples=15)
@given(st.integers(0, 10_000))
def test_poses_stay_in_a_human_envelope(seed):
    ds = synth_domain(_spec(seed=seed, mixture={"walk": .25, "reach": .25, "squat": .25, "wave": .25},
                            yaw_deg=(-90.0, 90.0)), 50)
    p = ds.frames3d()
    assert np.all(np.isfinite(p)) and np.abs(p).max() < 1200
    assert np.all(np.isfinite(ds.frames2d()))


def test_invalid_specs():
    for kw in ({"scale": 0.0}, {"noise_px": -1.0}, {"mixture": {"run": 1.0}}, {"mixture": {"walk": 0.5}}):
        with pytest.raises(InvalidSpec):
            synth_domain(_spec(**kw), 10)
    with pytest.raises(InvalidSpec):
        synth_domain(_spec(), 10, T=4)


def test_normalize_2d():
    cam = Camera(fx=800.0, fy=900.0, cx=400.0, cy=300.0)
    out = normalize_2d(np.array([[[1200.0, 1200.0]]]), cam)
    np.testing.assert_allclose(out, [[[1.0, 1.0]]])


def test_padded_windows_edges():
    seqs = [np.arange(3.0), np.arange(10.0, 12.0)]
    stacked, idx = padded_windows(seqs, 1)
    np.testing.assert_array_equal(stacked[idx], [[0, 0, 1], [0, 1, 2], [1, 2, 2], [10, 10, 11], [10, 11, 11]])


def test_pose_file_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    seqs = [rng.standard_normal((7, 16, 3)) * 1e3, rng.standard_normal((1, 16, 3)) * 1e-7]
    header, back = read_pose_file(write_pose_file(tmp_path / "a.pose", seqs, dims=3, units="mm", domain="x", seed=4))
    assert header["seed"] == 4 and header["sequences"] == [7, 1]
    assert all(np.array_equal(a, b) for a, b in zip(seqs, back))


def test_dataset_round_trip(tmp_path):
    ds = synth_domain(_spec(noise_px=1.0), 50)
    path = write_dataset(tmp_path / "d.train.2d.pose", ds)
    back = read_dataset(path)
    assert (tmp_path / "d.train.3d.pose").exists()
    np.testing.assert_array_equal(back.frames2d(), ds.frames2d())
    np.testing.assert_array_equal(back.frames3d(), ds.frames3d())
    assert back.camera == ds.camera
    assert read_dataset(path, with_labels=False).pose3d is None


def test_truncated_record_names_its_line(tmp_path):
    path = write_pose_file(tmp_path / "a.pose", [np.zeros((3, 16, 2))], dims=2, units="px", domain="x")
    lines = path.read_text().splitlines()
    lines[2] = " ".join(lines[2].split()[:-1])
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(FormatError) as e:
        read_pose_file(path)
    assert e.value.line == 3 and "line 3" in str(e.value)


def test_missing_frames_and_bad_header(tmp_path):
    path = write_pose_file(tmp_path / "a.pose", [np.zeros((3, 16, 2))], dims=2, units="px", domain="x")
    path.write_text("\n".join(path.read_text().splitlines()[:-1]) + "\n")
    with pytest.raises(FormatError):
        read_pose_file(path)
    (tmp_path / "b.pose").write_text("not json\n")
    with pytest.raises(FormatError) as e:
        read_pose_file(tmp_path / "b.pose")
    assert e.value.line == 1


def test_skeleton_hash_mismatch(tmp_path):
    path = write_pose_file(tmp_path / "a.pose", [np.zeros((2, 16, 2))], dims=2, units="px", domain="x")
    text = path.read_text()
    header, rest = text.split("\n", 1)
    import json
    h = json.loads(header)
    h["skeleton_hash"] = "0" * len(h["skeleton_hash"])
    path.write_text(json.dumps(h) + "\n" + rest)
    with pytest.raises(SkeletonHashMismatch):
        read_pose_file(path)


def test_non_finite_values_refused(tmp_path):
    with pytest.raises(FormatError):
        write_pose_file(tmp_path / "a.pose", [np.full((1, 16, 2), np.nan)], dims=2, units="px", domain="x")
