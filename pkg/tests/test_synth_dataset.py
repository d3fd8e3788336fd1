import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevmotion.dataset import read_collection, read_dataset, sequences_equal, write_collection, write_dataset
from bevmotion.errors import ChecksumError, DatasetError, TruncatedFileError, VersionError
from bevmotion.geometry import bev_occupancy, sync_to_frame
from bevmotion.synth import MOVER_BASE, SceneSpec, generate


def test_single_mover_speed():
    seq = generate(SceneSpec(n_movers=1, velocities=((2.0, 0.0),), n_static=0, seed=4))
    gt = seq.ground_truth(5)
    mover = np.linalg.norm(gt.motion_02.disp, axis=-1)
    assert np.allclose(mover[mover > 0], 0.4)
    assert np.allclose(gt.speed[mover > 0], 2.0)


def test_static_world_has_zero_motion():
    seq = generate(SceneSpec(n_movers=0, artifact_rate=0.0, seed=2))
    for g in (seq.ground_truth(t) for t in range(len(seq))):
        assert not g.motion_02.disp.any() and not g.speed.any()


def test_same_seed_same_sequence():
    spec = SceneSpec(artifact_rate=2.0, seed=11)
    assert sequences_equal(generate(spec), generate(spec))
    assert not sequences_equal(generate(spec), generate(SceneSpec(artifact_rate=2.0, seed=12)))


def test_degenerate_spec():
    with pytest.raises(ValueError):
        SceneSpec(n_frames=0)


@settings(max_examples=10)
@given(st.integers(0, 10_000), st.floats(0, 3))
def test_ground_truth_horizons_are_consistent(seed, rate):
    seq = generate(SceneSpec(seed=seed, artifact_rate=rate, ego_velocity=(1.0, -0.5)))
    for t in (0, 6, 11):
        g = seq.ground_truth(t)
        assert np.array_equal(g.motion_04.disp, 2.0 * g.motion_02.disp)
        assert np.array_equal(g.motion_1s.disp, 5.0 * g.motion_02.disp)


def test_ground_truth_matches_object_motion():
    # every mover cell at t is occupied by the same mover, one gt step later
    seq = generate(SceneSpec(n_movers=2, velocity_quantum=0.25, seed=5, artifact_rate=0.0))
    g = seq.ground_truth(4)
    nxt = seq.frames[5]
    mover_pts = sync_to_frame(type(nxt)(nxt.points[seq.labels[5] >= MOVER_BASE], nxt.timestamp, nxt.pose), seq.frames[4].pose)
    occ = bev_occupancy(mover_pts, seq.grid)
    moving = np.argwhere(np.linalg.norm(g.motion_02.disp, axis=-1) > 0)
    assert len(moving) > 0
    cell = np.array([seq.grid.cell_x, seq.grid.cell_y])
    dest = moving + np.rint(g.motion_02.disp[moving[:, 0], moving[:, 1]] / cell).astype(int)
    inside = (dest >= 0).all(1) & (dest[:, 0] < seq.grid.H) & (dest[:, 1] < seq.grid.W)
    assert occ[dest[inside, 0], dest[inside, 1]].all()


def test_round_trip(tmp_path):
    seq = generate(SceneSpec(artifact_rate=1.0, seed=7, ego_velocity=(2.0, 1.0)))
    write_dataset(seq, tmp_path / "s")
    back = read_dataset(tmp_path / "s")
    assert sequences_equal(seq, back)
    for t in range(len(seq)):
        assert np.array_equal(seq.ground_truth(t).motion_02.disp, back.ground_truth(t).motion_02.disp)


def test_collection_round_trip(tmp_path):
    seqs = [generate(SceneSpec(seed=s)) for s in range(3)]
    write_collection(seqs, tmp_path / "d")
    back = read_collection(tmp_path / "d")
    assert len(back) == 3 and all(sequences_equal(a, b) for a, b in zip(seqs, back))
    assert sequences_equal(read_collection(tmp_path / "d" / "seq_001")[0], seqs[1])


@pytest.fixture
def written(tmp_path):
    root = write_dataset(generate(SceneSpec(seed=9)), tmp_path / "s")
    return root


def test_corrupt_byte_gives_checksum_error(written):
    blob = written / "frame_0003.bin"
    raw = bytearray(blob.read_bytes())
    raw[-5] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        read_dataset(written)


def test_truncated_blob(written):
    blob = written / "frame_0000.bin"
    blob.write_bytes(blob.read_bytes()[:-7])
    with pytest.raises(TruncatedFileError):
        read_dataset(written)


def test_old_major_version(written):
    m = json.loads((written / "manifest.json").read_text())
    m["version"] = "0.9"
    (written / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(VersionError):
        read_dataset(written)


def test_newer_minor_version_is_read(written):
    m = json.loads((written / "manifest.json").read_text())
    m["version"] = "1.7"
    (written / "manifest.json").write_text(json.dumps(m))
    assert len(read_dataset(written)) == 12


def test_missing_paths(tmp_path):
    with pytest.raises(DatasetError):
        read_collection(tmp_path / "nope")
    with pytest.raises(DatasetError):
        read_dataset(tmp_path)
