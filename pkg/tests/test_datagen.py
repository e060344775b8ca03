import hashlib

import numpy as np
import pytest

from minivfi import datagen as D

GOLDEN_PNG_SHA256 = "58a1967928a242bc2e0f2c8ceba1d85dc76ed6d4e51b74e8a6d0e5c11264e650"


@pytest.mark.parametrize("kind", D.KINDS)
def test_frames_in_range_and_deterministic(kind):
    a = D.gen_sequence(11, kind, 32)
    b = D.gen_sequence(11, kind, 32)
    assert a.frames.shape == (5, 1, 32, 32)
    assert np.isfinite(a.frames).all() and a.frames.min() >= 0 and a.frames.max() <= 1
    assert np.array_equal(a.frames, b.frames) and a.motion_meta == b.motion_meta


def test_static_scene_has_identical_frames():
    q = D.gen_sequence(4, "translate", 32, velocity=(0.0, 0.0))
    for f in q.frames[1:]:
        assert np.array_equal(f, q.frames[0])


def test_translation_ground_truth_is_shifted_frame():
    q = D.gen_sequence(3, "translate", 64, velocity=(2.0, 0.0))
    # half a frame at 2 px/frame is a 1 px shift to the right
    assert np.abs(q.Igt[:, :, 1:] - q.I1[:, :, :-1]).max() < 1e-6
    assert np.abs(q.I2[:, :, 2:] - q.I1[:, :, :-2]).max() < 1e-6


def test_rgb_and_bad_resolution():
    q = D.gen_sequence(0, "multi-object", 32, channels=3)
    assert q.frames.shape == (5, 3, 32, 32)
    with pytest.raises(ValueError):
        D.gen_sequence(0, "translate", 40)
    with pytest.raises(ValueError):
        D.gen_sequence(0, "spin", 32)


def test_quantization_rule(tmp_path):
    path = tmp_path / "half.png"
    D.write_frame(np.full((1, 8, 8), 0.5), path)
    back = D.read_frame(path)
    assert np.all(back == np.float32(128 / 255))
    assert D.quantize(np.array([0.0, 1 / 510, 1.0])).tolist() == [0, 1, 255]


def test_write_rejects_out_of_range(tmp_path):
    with pytest.raises(D.FrameError):
        D.write_frame(np.full((1, 4, 4), 1.01), tmp_path / "x.png")
    with pytest.raises(D.FrameError):
        D.write_frame(np.full((1, 4, 4), np.nan), tmp_path / "x.png")


def test_roundtrip_within_quantization(tmp_path):
    x = np.random.default_rng(0).random((3, 16, 16))
    D.write_frame(x, tmp_path / "rgb.png")
    assert np.abs(D.read_frame(tmp_path / "rgb.png") - x).max() <= 0.5 / 255 + 1e-7


def test_malformed_file(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(D.FrameError):
        D.read_frame(bad)


def test_golden_fixture_checksum(tmp_path):
    x = (np.arange(256).reshape(1, 16, 16) % 256) / 255.0
    D.write_frame(x, tmp_path / "g.png")
    assert hashlib.sha256((tmp_path / "g.png").read_bytes()).hexdigest() == GOLDEN_PNG_SHA256


def test_split_counts():
    assert D.split_counts(10) == (8, 1, 1)
    assert D.split_counts(200) == (160, 20, 20)
    assert D.split_counts(15) == (11, 2, 2)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    D.build_dataset(root, n_sequences=20, seed=5, res=32)
    return root


def test_dataset_regenerates_byte_identical(small_dataset, tmp_path):
    m = D.load_dataset(small_dataset).manifest
    D.build_dataset(tmp_path, n_sequences=m.count, seed=m.seed, res=m.res, channels=m.channels)
    for p in sorted(small_dataset.iterdir()):
        assert p.read_bytes() == (tmp_path / p.name).read_bytes(), p.name


def test_dataset_splits_disjoint_and_loadable(small_dataset):
    ds = D.load_dataset(small_dataset)
    s = ds.manifest.splits
    assert len(s["train"]) == 16 and len(s["val"]) == 2 and len(s["test"]) == 2
    assert not set(s["train"]) & set(s["val"]) and not set(s["val"]) & set(s["test"])
    assert sorted(s["train"] + s["val"] + s["test"]) == list(range(20))
    arr = ds.split("val")
    assert arr.shape == (2, 5, 1, 32, 32) and arr.dtype == np.float32
    assert D.DatasetManifest.parse(ds.manifest.text()) == ds.manifest


def test_dataset_needs_ten_sequences(tmp_path):
    with pytest.raises(ValueError):
        D.build_dataset(tmp_path, n_sequences=9)


def test_motion_histogram_covers_easy_and_hard():
    speeds = [D.gen_sequence(s, k, 16).motion_meta["speed"]
              for s in range(60) for k in ("translate", "rotate")]
    assert min(speeds) >= D.SPEED_RANGE[0] - 1e-9 and max(speeds) <= D.SPEED_RANGE[1] + 1e-9
    assert sum(v < 2 for v in speeds) > 0 and sum(v > 5 for v in speeds) > 0
