import json

import numpy as np
import pytest

from chatsplat import cstf
from chatsplat.errors import ConfigError, FormatError
from chatsplat.teacher import (TeacherTokens, import_raw_teacher, load_teacher,
                               make_synthetic_teacher, projection_bound,
                               save_teacher)


@pytest.fixture(scope="module")
def teacher(tiny_scene):
    return make_synthetic_teacher(tiny_scene, d_tok=8, patch=14, range_scale=20.0,
                                  seed=2)


def test_round_trip_equality(tmp_path, teacher):
    path = str(tmp_path / "t.cstf")
    save_teacher(teacher, path)
    back = load_teacher(path)
    assert set(back.view_targets) == set(teacher.view_targets)
    assert set(back.object_targets) == set(teacher.object_targets)
    for cam, arr in teacher.view_targets.items():
        assert np.array_equal(back.view_targets[cam],
                              arr.astype(np.float32).astype(np.float64))
    for key, arr in teacher.object_targets.items():
        assert np.array_equal(back.object_targets[key],
                              arr.astype(np.float32).astype(np.float64))


def test_same_seed_is_deterministic(tiny_scene):
    a = make_synthetic_teacher(tiny_scene, d_tok=8, patch=14, range_scale=50.0, seed=9)
    b = make_synthetic_teacher(tiny_scene, d_tok=8, patch=14, range_scale=50.0, seed=9)
    for cam in a.view_targets:
        assert np.array_equal(a.view_targets[cam], b.view_targets[cam])
    for key in a.object_targets:
        assert np.array_equal(a.object_targets[key], b.object_targets[key])


def test_range_zero_equals_unscaled_projection(tiny_scene):
    from chatsplat.teacher import PROJECTION_GAIN, _patch_descriptors

    t = make_synthetic_teacher(tiny_scene, d_tok=8, patch=14, range_scale=0.0, seed=3)
    rng = np.random.default_rng(3)
    proj = rng.standard_normal((8, tiny_scene.object_count + 3)) * PROJECTION_GAIN
    for cam_id, labels in enumerate(tiny_scene.label_images):
        desc = _patch_descriptors(labels, tiny_scene.object_count, 14)
        assert np.allclose(t.view_targets[cam_id], desc @ proj.T, atol=1e-12)


def test_targets_respect_documented_bound(tiny_scene):
    for scale in (0.0, 25.0, 100.0):
        t = make_synthetic_teacher(tiny_scene, d_tok=8, patch=14, range_scale=scale,
                                   seed=4)
        bound = 1.5 * projection_bound(tiny_scene, d_tok=8, patch=14, seed=4) + scale
        vals = [np.max(np.abs(a)) for a in t.view_targets.values()]
        vals += [np.max(np.abs(a)) for a in t.object_targets.values()]
        assert max(vals) <= bound + 1e-9


def test_wide_range_actually_spans(tiny_scene):
    t = make_synthetic_teacher(tiny_scene, d_tok=8, patch=14, range_scale=100.0, seed=5)
    allv = np.concatenate([a.ravel() for a in t.view_targets.values()])
    assert allv.max() > 50 and allv.min() < -50


def test_objects_absent_from_view_have_no_target(tiny_scene, teacher):
    for (cam, m) in teacher.object_targets:
        assert np.any(tiny_scene.label_images[cam] == m)


def test_missing_object_targets_allowed(tmp_path, teacher):
    path = str(tmp_path / "t.cstf")
    save_teacher(TeacherTokens(view_targets=dict(teacher.view_targets)), path)
    back = load_teacher(path)
    assert back.object_targets == {}
    assert back.objects_for(0) == []


def test_token_dim_mismatch_names_both_dims(tmp_path, teacher):
    path = str(tmp_path / "t.cstf")
    save_teacher(teacher, path)
    with pytest.raises(ConfigError, match=r"8.*16|16.*8"):
        load_teacher(path, expect_d=16)
    with pytest.raises(ConfigError):
        load_teacher(path, expect_t=999)


def test_corrupt_file_raises_format_error(tmp_path):
    path = tmp_path / "bad.cstf"
    path.write_bytes(b"CSTF\x01\x00\x00\x00" + b"\x05\x00vie")
    with pytest.raises(FormatError):
        load_teacher(str(path))


def test_nonfinite_record_rejected(tmp_path):
    arr = np.full((4, 4), np.nan, np.float32)
    path = str(tmp_path / "nan.cstf")
    cstf.write_records(path, {"view/0": arr})
    with pytest.raises(FormatError):
        load_teacher(path)


def test_stats_are_computed(teacher):
    assert "view/0" in teacher.stats
    s = teacher.stats["view/0"]
    assert np.isfinite(s["mean"]) and np.isfinite(s["std"])


def test_import_raw_teacher_manifest(tmp_path):
    rng = np.random.default_rng(0)
    view = rng.standard_normal((16, 8)).astype("<f4")
    obj = rng.standard_normal((16, 8)).astype("<f4")
    view.tofile(tmp_path / "v0.f32")
    obj.tofile(tmp_path / "o00.f32")
    manifest = {"records": [
        {"name": "view/0", "shape": [16, 8], "path": "v0.f32"},
        {"name": "obj/0/0", "shape": [16, 8], "path": "o00.f32"},
    ]}
    mpath = tmp_path / "manifest.json"
    mpath.write_text(json.dumps(manifest))
    teacher = import_raw_teacher(str(mpath), str(tmp_path / "out.cstf"))
    assert np.allclose(teacher.view_targets[0], view)
    assert np.allclose(teacher.object_targets[(0, 0)], obj)


def test_import_raw_teacher_bad_shape(tmp_path):
    np.zeros(10, "<f4").tofile(tmp_path / "v.f32")
    mpath = tmp_path / "m.json"
    mpath.write_text(json.dumps({"records": [
        {"name": "view/0", "shape": [16, 8], "path": "v.f32"}]}))
    with pytest.raises(FormatError):
        import_raw_teacher(str(mpath), str(tmp_path / "o.cstf"))
