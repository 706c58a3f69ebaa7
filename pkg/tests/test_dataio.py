import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from graspsight import dataio
from graspsight import worldsim as ws
from graspsight.dataio import GenParams, GraspRecord
from graspsight.worldsim import GraspCommand, WorldParams

P = WorldParams()


@pytest.fixture(scope="module")
def small():
    return dataio.generate_records(P, GenParams(n=200, seed=3), workers=1)


@pytest.fixture(scope="module")
def thousand():
    return dataio.generate_records(P, GenParams(n=1000, seed=1), workers=1)


# --------------------------------------------------------------------------
# record files


def test_roundtrip_is_exact(small, tmp_path):
    path = tmp_path / "r.bin"
    n = dataio.write_records(small, path)
    assert n == path.stat().st_size == 8 + len(small) * small.table.dtype.itemsize
    h, w = small.image_shape
    back = dataio.read_records(path, h, w)
    assert back == small.records()
    assert dataio.read_dataset(path, h, w).table.tobytes() == small.table.tobytes()


def test_record_layout(small):
    blob = dataio.encode_records(small.subset([0]))
    assert blob[:4] == b"GRSP"
    assert struct.unpack("<HH", blob[4:8]) == (1, 0)
    x, y, theta, a = struct.unpack("<4f", blob[8:24])
    c = small.record(0).command
    assert (x, y, theta, a) == (c.x, c.y, c.theta, c.aperture)
    assert blob[24] == int(small.record(0).label) and blob[25] == 0
    h, w = small.image_shape
    # header, 4 x f32 command, label, reserved byte, f32 occlusion, two images
    assert len(blob) == 8 + 16 + 1 + 1 + 4 + 2 * h * w


def test_empty_file_is_header_only(tmp_path):
    path = tmp_path / "empty.bin"
    assert dataio.write_records([], path) == 8
    assert path.read_bytes() == b"GRSP\x01\x00\x00\x00"
    assert dataio.read_records(path, 64, 64) == []


def test_distinct_format_errors(small, tmp_path):
    blob = dataio.encode_records(small.subset([0, 1]))
    h, w = small.image_shape
    with pytest.raises(dataio.BadMagicError):
        dataio.decode_records(b"XXXX" + blob[4:], h, w)
    with pytest.raises(dataio.VersionMismatchError):
        dataio.decode_records(blob[:4] + struct.pack("<HH", 2, 0) + blob[8:], h, w)
    with pytest.raises(dataio.TruncatedFileError):
        dataio.decode_records(blob[:-1], h, w)
    with pytest.raises(dataio.TruncatedFileError):
        dataio.decode_records(blob[:5], h, w)
    assert len({dataio.BadMagicError, dataio.VersionMismatchError, dataio.TruncatedFileError}) == 3


def test_generation_is_deterministic(tmp_path):
    gen = GenParams(n=100, seed=1)
    dataio.generate_dataset(P, gen, tmp_path / "a", workers=1)
    dataio.generate_dataset(P, gen, tmp_path / "b", workers=2)
    for name in (dataio.RECORDS_FILE, dataio.MANIFEST_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest(tmp_path):
    gen = GenParams(n=50, seed=4)
    m = dataio.generate_dataset(P, gen, tmp_path)
    ds, m2 = dataio.load_dataset_dir(tmp_path)
    assert m == m2
    assert m.count == 50 == len(ds) and m.positive_count == int(ds.labels.sum())
    assert 0 <= m.split_boundary <= m.count and (m.image_h, m.image_w) == ds.image_shape
    assert m.world_params_digest == dataio.world_params_digest(P, gen)
    assert m.world_params_digest != dataio.world_params_digest(WorldParams(jitter_max=0.02), gen)


# --------------------------------------------------------------------------
# labels


def test_positive_rate(thousand):
    assert 0.05 < thousand.labels.mean() < 0.95


def test_labels_match_the_generating_scenes(small):
    gen = GenParams(n=200, seed=3)
    for i in range(0, 200, 2):
        scene, c = dataio.regenerate_scene(gen.seed, i, P, gen)
        rec = small.record(i)
        assert rec.command == c
        assert rec.label == ws.grasp_outcome(scene, c, P).success
        assert rec.occlusion == pytest.approx(ws.occlusion_fraction(scene, c, 64, P), abs=1e-7)
        assert np.array_equal(rec.before, np.round(ws.render_before(scene, 64, P) * 255).astype(np.uint8))


def test_commands_are_in_range(thousand):
    c = thousand.commands
    assert np.all(np.abs(c[:, 2]) < math.pi / 2)
    assert np.all((c[:, 3] > 0) & (c[:, 3] <= P.a_max))
    for row in c[:100]:
        f1, f2 = ws.fingertips(GraspCommand(*map(float, row)))
        assert all(0 <= v <= 1 for v in (*f1, *f2))


# --------------------------------------------------------------------------
# split and filter


def test_split_sizes():
    train, val = dataio.split(1000, 0.9, seed=5)
    assert len(train) == 900 and len(val) == 100
    assert not set(train) & set(val)


@given(st.integers(1, 3000), st.floats(0.01, 0.99), st.integers(0, 2**32 - 1))
def test_split_is_an_exhaustive_partition(count, fraction, seed):
    train, val = dataio.split(count, fraction, seed)
    assert np.array_equal(np.sort(np.concatenate([train, val])), np.arange(count))
    again = dataio.split(count, fraction, seed)
    assert np.array_equal(train, again[0]) and np.array_equal(val, again[1])


def test_split_rejects_bad_fractions():
    for f in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError):
            dataio.split(10, f)


def test_filter_identity_and_zero(small):
    assert dataio.filter_by_occlusion(small, 1.0).table.tobytes() == small.table.tobytes()
    records = small.records()
    assert dataio.filter_by_occlusion(records, 1.0) == records
    zero = dataio.filter_by_occlusion(records, 0.0)
    assert all(r.occlusion == 0.0 for r in zero)
    assert len(zero) == sum(r.occlusion == 0.0 for r in records)


def test_filter_matches_empirical_cdf(thousand):
    kept = dataio.filter_by_occlusion(thousand, 0.25)
    direct = sum(1 for v in thousand.occlusion.tolist() if v <= 0.25)
    assert len(kept) == direct
    assert 0 < direct < len(thousand)


# --------------------------------------------------------------------------
# augmentation and batching


def test_augment_is_an_involution(small):
    for i in range(20):
        r = small.record(i)
        assert dataio.augment_record(dataio.augment_record(r)) == r


def test_augment_mirrors_columns(small):
    r = small.record(0)
    f = dataio.augment_record(r)
    w = r.before.shape[1]
    for j in (0, 7, w - 1):
        assert np.array_equal(f.before[:, j], r.before[:, w - 1 - j])
    assert f.command.x == pytest.approx(P.bin_min + P.bin_max - r.command.x)
    assert f.command.theta == -r.command.theta and f.command.aperture == r.command.aperture


def test_mirrored_label_matches_the_mirrored_world(small):
    gen = GenParams(n=200, seed=3)
    for i in range(40):
        scene, c = dataio.regenerate_scene(gen.seed, i, P, gen)
        f = dataio.augment_record(small.record(i))
        assert f.label == ws.grasp_outcome(ws.mirror_scene(scene), f.command, P).success
        mirrored = np.round(ws.render_before(ws.mirror_scene(scene), 64, P) * 255)
        assert np.max(np.abs(f.before.astype(float) - mirrored)) <= 1


def test_mirrored_render_is_the_flipped_render():
    scene = ws.Scene(ws.sample_scene(9, 4).objects, ws.Vec2(0.0, 0.01))
    a = ws.render_before(ws.mirror_scene(scene))
    b = ws.render_before(scene)[:, ::-1]
    assert np.max(np.abs(a - b)) < 1e-9


def test_batch_sizes(small):
    ten = small.subset(range(10))
    sizes = [len(b.labels) for b in dataio.batches(ten, dataio.BatchSpec(batch_size=4))]
    assert sizes == [4, 4, 2]


def test_batches_without_augment_are_a_permutation(small):
    ten = small.subset(range(10))
    got = np.concatenate([b.indices for b in dataio.batches(ten, dataio.BatchSpec(3, shuffle_seed=2))])
    assert sorted(got.tolist()) == list(range(10))
    again = np.concatenate([b.indices for b in dataio.batches(ten, dataio.BatchSpec(3, shuffle_seed=2))])
    assert np.array_equal(got, again)


def test_flipped_batches(small):
    data = small.subset(range(64))
    arrays = dataio.as_arrays(data)
    flipped = 0
    for b in dataio.batches(data, dataio.BatchSpec(16, shuffle_seed=1, augment=True)):
        for k, i in enumerate(b.indices):
            same = np.array_equal(b.before[k], arrays.before[i])
            if not same:
                flipped += 1
                assert np.array_equal(b.before[k], arrays.before[i][..., ::-1])
                assert b.commands[k, 0] == pytest.approx(1.0 - arrays.commands[i, 0])
                assert b.commands[k, 2] == -arrays.commands[i, 2]
            assert b.labels[k] == arrays.labels[i]
    assert 10 < flipped < 54


def test_empty_batches_rejected():
    with pytest.raises(ValueError):
        list(dataio.batches(dataio.GraspDataset.empty(8, 8), dataio.BatchSpec()))
    with pytest.raises(ValueError):
        dataio.BatchSpec(batch_size=0)
