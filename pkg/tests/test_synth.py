import json

import numpy as np
import pytest

from msgaze import synth
from msgaze.errors import ConfigError, RenderError
from msgaze.metrics import miou
from msgaze.synth import EyeSceneParams, SceneRanges


def frontal(**kw):
    base = dict(gaze=(0.0, 0.0), head_pose=(0.0, 0.0), light_intensity=1.0, iris_radius_px=5.5,
                eyeball_center_px=(30.0, 18.0), aperture=0.9, texture_seed=4)
    base.update(kw)
    return EyeSceneParams(**base)


def test_render_shapes_and_types():
    s = synth.render_eye(frontal())
    assert s.image.shape == (36, 60) and s.image.dtype == np.uint8
    assert s.iris_landmarks.shape == (32, 2)
    assert s.interior_landmarks.shape == (16, 2)
    assert s.caruncle_landmarks.shape == (6, 2)


def test_render_deterministic():
    a, b = synth.render_eye(frontal()), synth.render_eye(frontal())
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.iris_landmarks, b.iris_landmarks)


def test_iris_darker_than_sclera():
    s = synth.render_eye(frontal())
    m = s.mask_pair()
    iris_vis = (m.iris == 1) & (m.visible == 1)
    sclera = (m.iris == 0) & (m.visible == 1)
    assert s.image[iris_vis].mean() < s.image[sclera].mean()


def test_iris_area_tracks_foreshortening():
    flat = synth.render_eye(frontal()).mask_pair().iris.sum()
    turned = synth.render_eye(frontal(gaze=(0.0, 0.6))).mask_pair().iris.sum()
    assert turned < flat
    assert turned / flat == pytest.approx(np.cos(0.6), abs=0.08)


def test_gaze_moves_iris_horizontally():
    left = synth.render_eye(frontal(gaze=(0.0, -0.5))).iris_landmarks.mean(axis=0)
    right = synth.render_eye(frontal(gaze=(0.0, 0.5))).iris_landmarks.mean(axis=0)
    # positive yaw gives a negative x component of the gaze vector
    assert right[0] < left[0]


def test_mirrored_eye_is_flipped():
    p = frontal(gaze=(0.1, 0.3), head_pose=(0.05, 0.2))
    r = synth.render_eye(p)
    l = synth.render_eye(p.mirrored())
    np.testing.assert_array_equal(l.image, r.image[:, ::-1])
    assert l.gaze[1] == pytest.approx(-r.gaze[1])


def test_landmark_masks_match_label_json():
    s = synth.render_eye(frontal())
    lab = json.loads(json.dumps(s.label_dict()))
    from msgaze import maskgen
    pair = maskgen.make_mask_pair(lab["iris_landmarks"], lab["interior_landmarks"], lab["caruncle_landmarks"])
    assert miou(pair.stack(), s.mask_pair().stack()) == 1.0


def test_scene_ranges_validation():
    with pytest.raises(ConfigError):
        SceneRanges(aperture=(1.0, 0.5)).validate()
    with pytest.raises(ConfigError):
        SceneRanges(gaze_pitch=(-2.0, 0.0)).validate()
    with pytest.raises(ConfigError):
        SceneRanges.from_dict({"bogus": [0, 1]})
    r = SceneRanges.from_dict(SceneRanges().to_dict())
    assert r == SceneRanges()


def test_sample_scene_within_ranges():
    rng = np.random.default_rng(0)
    ranges = SceneRanges()
    for _ in range(50):
        p = synth.sample_scene(rng, ranges)
        assert ranges.gaze_pitch[0] <= p.gaze[0] <= ranges.gaze_pitch[1]
        assert ranges.gaze_yaw[0] <= p.gaze[1] <= ranges.gaze_yaw[1]


def test_out_of_frame_raises():
    with pytest.raises(RenderError):
        synth.render_eye(frontal(eyeball_center_px=(-20.0, 18.0)))


def test_generate_dataset(tmp_path):
    m = synth.generate_dataset(8, SceneRanges(), seed=5, out_dir=tmp_path, n_subjects=4)
    assert m.counts["total"] == 8 and m.counts["val"] == 2 and m.counts["train"] == 6
    again = synth.DatasetManifest.load(tmp_path)
    assert [e["id"] for e in again.entries] == [e["id"] for e in m.entries]
    assert {e["subject"] for e in m.entries} == {"s00", "s01", "s02", "s03"}
    for e in m.entries:
        assert (tmp_path / e["image"]).exists() and (tmp_path / e["label"]).exists()


def test_generate_dataset_deterministic(tmp_path):
    a = synth.generate_dataset(4, SceneRanges(), seed=2, out_dir=tmp_path / "a")
    b = synth.generate_dataset(4, SceneRanges(), seed=2, out_dir=tmp_path / "b")
    for ea, eb in zip(a.entries, b.entries):
        assert (tmp_path / "a" / ea["image"]).read_bytes() == (tmp_path / "b" / eb["image"]).read_bytes()
