import json

import numpy as np
import pytest

from oracles import percentile_linear
from uxnet3d.data import (AugmentParams, DatasetManifest, augment, clip_intensity, pad_to, percentile_normalize,
                          random_crop_foreground, rescale, rotate, synth_generate, synth_volume)
from uxnet3d.rng import Rng
from uxnet3d.volumes import Volume, load_raw


def test_clip_examples():
    out = clip_intensity(np.array([300.0, -200.0, 0.0]), -175, 250)
    assert out.tolist() == [250.0, -175.0, 0.0]
    v = clip_intensity(Volume(np.full((2, 2, 2), 400.0)))
    assert isinstance(v, Volume) and np.all(v.data == 250)
    with pytest.raises(ValueError):
        clip_intensity(np.zeros(3), 1, 1)


def test_percentile_normalize_ramp():
    ramp = np.arange(101, dtype=np.float64).reshape(101, 1, 1)
    out = percentile_normalize(ramp)
    lo, hi = percentile_linear(ramp, 1), percentile_linear(ramp, 99)
    assert (lo, hi) == (1.0, 99.0)
    assert out[50, 0, 0] == pytest.approx(49 / 98)
    assert out[1, 0, 0] == 0 and out[99, 0, 0] == 1
    assert out.min() == 0 and out.max() == 1


def test_percentile_matches_oracle_on_random_data():
    x = np.random.default_rng(0).gamma(2.0, size=(7, 9, 11))
    lo, hi = percentile_linear(x, 1), percentile_linear(x, 99)
    expected = np.clip((x - lo) / (hi - lo), 0, 1)
    assert np.allclose(percentile_normalize(x), expected, atol=1e-6)


def test_percentile_is_order_preserving():
    x = np.random.default_rng(1).standard_normal(500).reshape(5, 10, 10)
    out = percentile_normalize(x).ravel()
    order = np.argsort(x.ravel(), kind="stable")
    assert np.all(np.diff(out[order]) >= 0)


def test_percentile_constant_volume_errors():
    with pytest.raises(ValueError, match="constant"):
        percentile_normalize(np.full((3, 3, 3), 2.0))


def test_pad_to():
    assert pad_to(np.ones((2, 3, 4)), (4, 3, 5)).shape == (4, 3, 5)
    x = np.ones((5, 5, 5))
    assert pad_to(x, (4, 4, 4)) is x


def test_crop_all_background_is_uniform_and_sized():
    img = np.random.default_rng(2).standard_normal((20, 20, 20)).astype(np.float32)
    lab = np.zeros((20, 20, 20), np.int32)
    pi, pl = random_crop_foreground(img, lab, (8, 8, 8), Rng(0))
    assert pi.shape == pl.shape == (8, 8, 8) and not pl.any()


def test_crop_single_foreground_voxel_is_inside_patch():
    img = np.arange(24**3, dtype=np.float32).reshape(24, 24, 24)
    lab = np.zeros((24, 24, 24), np.int32)
    lab[3, 20, 11] = 1
    hits = 0
    for seed in range(40):
        pi, pl = random_crop_foreground(img, lab, (8, 8, 8), Rng(seed), fg_prob=1.0)
        assert pl.sum() == 1
        # the image crop is the same window as the label crop
        idx = np.argwhere(pl)[0]
        assert pi[tuple(idx)] == img[3, 20, 11]
        hits += 1
    assert hits == 40


def test_crop_whole_volume_and_padding():
    img = np.random.default_rng(3).standard_normal((8, 8, 8)).astype(np.float32)
    lab = np.zeros((8, 8, 8), np.int32)
    pi, _ = random_crop_foreground(img, lab, (8, 8, 8), Rng(1))
    assert np.array_equal(pi, img)
    small, _ = random_crop_foreground(img[:5], lab[:5], (8, 8, 8), Rng(1))
    assert small.shape == (8, 8, 8) and not small[5:].any()


def test_augment_identity_params():
    rng = np.random.default_rng(4)
    img = rng.standard_normal((8, 8, 8)).astype(np.float32)
    lab = rng.integers(0, 3, (8, 8, 8)).astype(np.int32)
    params = AugmentParams(rotation_deg=0, scale=0, offset=0, p_rotate=1, p_scale=1, p_offset=1)
    a, b = augment(img, lab, params, Rng(5))
    assert np.array_equal(a, img) and np.array_equal(b, lab)


def test_quarter_rotation_permutes_box_exactly():
    lab = np.zeros((12, 12, 12), np.int32)
    lab[1:4, 2:9, 5:7] = 2
    img = lab.astype(np.float32)
    ri, rl = rotate(img, lab, axis=0, angle_deg=90)
    assert rl.sum() == lab.sum()
    extents = [np.ptp(np.argwhere(rl)[:, a]) + 1 for a in range(3)]
    assert extents == [3, 2, 7]
    assert np.array_equal(ri, rl.astype(np.float32))


def test_offset_shifts_mean_only():
    img = np.random.default_rng(6).standard_normal((6, 6, 6)).astype(np.float32)
    lab = np.ones((6, 6, 6), np.int32)
    params = AugmentParams(rotation_deg=0, scale=0, offset=0.1, p_rotate=0, p_scale=0, p_offset=1)
    for seed in range(5):
        a, b = augment(img, lab, params, Rng(seed))
        shift = float((a - img).mean())
        assert abs(shift) <= 0.1 + 1e-6
        assert np.allclose(a - img, shift, atol=1e-6)
        assert np.array_equal(b, lab)


def test_augment_labels_stay_within_input_values():
    rng = np.random.default_rng(7)
    lab = np.zeros((16, 16, 16), np.int32)
    lab[2:8, 3:10, 4:12] = 1
    lab[9:14, 9:14, 2:6] = 3
    img = lab.astype(np.float32) + rng.standard_normal(lab.shape).astype(np.float32) * 0.1
    params = AugmentParams(p_rotate=1, p_scale=1, p_offset=1)
    for seed in range(6):
        a, b = augment(img, lab, params, Rng(seed))
        assert a.shape == img.shape and b.shape == lab.shape
        assert set(np.unique(b)) <= {0, 1, 3}


def test_augment_is_deterministic_given_seed():
    rng = np.random.default_rng(8)
    img = rng.standard_normal((10, 10, 10)).astype(np.float32)
    lab = (img > 0).astype(np.int32)
    params = AugmentParams(p_rotate=1, p_scale=1, p_offset=1)
    a1, b1 = augment(img, lab, params, Rng(3))
    a2, b2 = augment(img, lab, params, Rng(3))
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def test_rescale_unit_factor_is_identity():
    img = np.random.default_rng(9).standard_normal((6, 7, 8)).astype(np.float32)
    lab = (img > 0).astype(np.int32)
    a, b = rescale(img, lab, (1.0, 1.0, 1.0))
    assert np.allclose(a, img, atol=1e-6) and np.array_equal(b, lab)


def test_augment_params_validation():
    with pytest.raises(ValueError):
        AugmentParams(p_rotate=1.5)
    with pytest.raises(ValueError):
        AugmentParams(rotation_deg=-1)
    with pytest.raises(ValueError, match="unknown"):
        AugmentParams.from_dict({"angle": 3})
    assert AugmentParams.from_dict(AugmentParams().to_dict()) == AugmentParams()


def test_synth_volume_noise_free_is_piecewise_constant():
    img, lab, placed = synth_volume((24, 24, 24), 3, 2, 0.0, Rng(0))
    assert placed == 4
    for c in range(3):
        vals = np.unique(img[lab == c])
        assert len(vals) <= 2 if c else len(vals) == 1
        assert np.all((vals >= c / 3) & (vals < (c + 1) / 3))


def test_synth_generate_dataset(tmp_path):
    path = synth_generate(tmp_path / "d", num_volumes=20, extent=32, num_classes=3, seed=7)
    man = DatasetManifest.load(path)
    assert len(man.entries) == 20
    assert [len(man.split(s)) for s in ("train", "val", "test")] == [14, 3, 3]
    seen = set()
    for e in man.entries:
        lab = load_raw(man.root / e["label"]).data
        seen |= set(np.unique(lab).tolist())
    assert seen == {0, 1, 2}
    again = synth_generate(tmp_path / "e", num_volumes=20, extent=32, num_classes=3, seed=7)
    for e in man.entries:
        for key in ("image", "label"):
            assert (man.root / e[key]).read_bytes() == (again.parent / e[key]).read_bytes()


def test_synth_generate_errors_and_warnings(tmp_path):
    with pytest.raises(ValueError):
        synth_generate(tmp_path / "x", num_classes=1)
    with pytest.raises(ValueError):
        synth_generate(tmp_path / "x", extent=0)
    with pytest.warns(UserWarning) as rec:
        path = synth_generate(tmp_path / "crowded", num_volumes=1, extent=8, num_classes=6, shapes_per_class=8)
    assert any("placed" in str(w.message) for w in rec)
    assert json.loads(path.read_text())["warnings"]


def test_manifest_validation(tmp_path):
    path = synth_generate(tmp_path / "d", num_volumes=3, extent=16, seed=1)
    doc = json.loads(path.read_text())
    doc["entries"].append(dict(doc["entries"][0], split="test" if doc["entries"][0]["split"] != "test" else "val"))
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="appears in splits"):
        DatasetManifest.load(path)
    doc["entries"] = [dict(doc["entries"][0], image="missing.uxv")]
    path.write_text(json.dumps(doc))
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(path)


def test_manifest_preprocessing_pipeline(tmp_path):
    man = DatasetManifest([], 2, clip=[-175, 250], percentiles=[1, 99], root=tmp_path)
    x = np.linspace(-400, 400, 1000).reshape(10, 10, 10).astype(np.float32)
    out = man.preprocess(x)
    expected = percentile_normalize(clip_intensity(x))
    assert np.array_equal(out, expected) and out.min() == 0 and out.max() == 1
