import struct
import warnings

import numpy as np
import pytest

from chatsplat import errors
from chatsplat.scene import (Gaussian3D, export_ply, export_sidecar, geometry_digest,
                             import_ply, import_sidecar)
from chatsplat.synth import cluster_ids, make_synthetic_scene


def write_ply(path, rows, props=None, fmt="binary_little_endian"):
    """Independent minimal PLY writer for import tests."""
    props = props or ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3",
                      "scale_0", "scale_1", "scale_2", "opacity",
                      "f_dc_0", "f_dc_1", "f_dc_2"]
    header = ["ply", f"format {fmt} 1.0", f"element vertex {len(rows)}"]
    header += [f"property float {p}" for p in props]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode())
        for row in rows:
            fh.write(struct.pack(f"<{len(props)}f", *row))


def test_ply_identity_activation_case(tmp_path):
    # rot=(1,0,0,0), scale stored pre-activation as 0 -> exp(0) = 1
    path = str(tmp_path / "one.ply")
    write_ply(path, [[0.5, -1.0, 2.0, 1, 0, 0, 0, 0, 0, 0, 3.0, 0.2, 0.4, 0.6]])
    g = import_ply(path, d_g=4, d_id=2)
    assert g.count == 1
    assert np.allclose(g.scales[0], [1, 1, 1])
    assert abs(np.linalg.norm(g.rotations[0]) - 1) < 1e-6
    assert np.allclose(g.positions[0], [0.5, -1.0, 2.0])
    assert g.feat_view.shape == (1, 4) and not g.feat_view.any()


def test_ply_logistic_of_zero_opacity(tmp_path):
    path = str(tmp_path / "o.ply")
    write_ply(path, [[0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0.0, 0, 0, 0]])
    g = import_ply(path)
    assert abs(g.opacities[0] - 0.5) < 1e-7


def test_ply_missing_property_names_it(tmp_path):
    path = str(tmp_path / "m.ply")
    props = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3",
             "scale_0", "scale_1", "scale_2", "f_dc_0", "f_dc_1", "f_dc_2"]
    write_ply(path, [[0] * len(props)], props=props)
    with pytest.raises(errors.ImportError, match="opacity"):
        import_ply(path)


def test_ply_non_finite_reports_element_index(tmp_path):
    path = str(tmp_path / "nan.ply")
    rows = [[0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
            [0, float("nan"), 0, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]]
    write_ply(path, rows)
    with pytest.raises(errors.DataError, match="element 1"):
        import_ply(path)


def test_ply_drops_higher_order_color_with_warning(tmp_path):
    path = str(tmp_path / "sh.ply")
    props = ["x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3",
             "scale_0", "scale_1", "scale_2", "opacity",
             "f_dc_0", "f_dc_1", "f_dc_2", "f_rest_0", "f_rest_1"]
    row = [0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0.1, 0.2, 0.3, 9, 9]
    write_ply(path, [row], props=props)
    with pytest.warns(UserWarning, match="higher-order"):
        import_ply(path)


def test_ply_export_import_round_trip(tmp_path):
    bundle = make_synthetic_scene(2, 30, seed=2, width=56, height=56, n_cameras=1,
                                  d_g=4, d_id=4)
    path = str(tmp_path / "rt.ply")
    export_ply(bundle.gaussians, path)
    back = import_ply(path, d_g=4, d_id=4)
    for name in ("positions", "colors"):
        assert np.allclose(getattr(back, name), getattr(bundle.gaussians, name),
                           atol=1e-6)
    assert np.allclose(back.scales, bundle.gaussians.scales, rtol=1e-5)
    assert np.allclose(back.opacities, bundle.gaussians.opacities, atol=1e-5)
    # quaternions may flip by float noise only; compare absolute dot
    dots = np.abs(np.sum(back.rotations * bundle.gaussians.rotations, axis=1))
    assert np.all(dots > 1 - 1e-6)


def test_sidecar_round_trip_bit_exact(tmp_path):
    bundle = make_synthetic_scene(3, 40, seed=9, width=56, height=56, n_cameras=2,
                                  d_g=8, d_id=8, identity="onehot")
    rng = np.random.default_rng(1)
    bundle.gaussians.feat_view[...] = rng.standard_normal(
        bundle.gaussians.feat_view.shape).astype(np.float32)
    path = str(tmp_path / "s.cstf")
    export_sidecar(bundle, path)
    back = import_sidecar(path)
    for name in ("positions", "rotations", "scales", "opacities", "colors",
                 "feat_view", "feat_object", "identity"):
        a, b = getattr(bundle.gaussians, name), getattr(back.gaussians, name)
        assert np.array_equal(a, b), name  # max abs diff must be exactly 0
    assert back.object_count == bundle.object_count
    assert len(back.cameras) == 2
    assert np.allclose(back.cameras[1].rotation, bundle.cameras[1].rotation, atol=1e-7)
    for la, lb in zip(bundle.label_images, back.label_images):
        assert np.array_equal(la, lb)


def test_sidecar_empty_scene(tmp_path):
    from chatsplat.scene import SceneBundle

    bundle = SceneBundle(gaussians=Gaussian3D.zeros(0, 4, 2), cameras=[],
                         object_count=0)
    path = str(tmp_path / "e.cstf")
    export_sidecar(bundle, path)
    back = import_sidecar(path)
    assert back.gaussians.count == 0


def test_sidecar_wrong_magic(tmp_path):
    path = tmp_path / "w.cstf"
    path.write_bytes(b"XXXX\x01\x00\x00\x00")
    with pytest.raises(errors.FormatError):
        import_sidecar(str(path))


def test_validate_rejects_bad_quaternion():
    g = Gaussian3D.zeros(2, 4, 2)
    g.rotations[1] = [2.0, 0, 0, 0]
    with pytest.raises(errors.DataError, match="quaternion 1"):
        g.validate()


def test_validate_rejects_nan_feature():
    g = Gaussian3D.zeros(2, 4, 2)
    g.feat_view[0, 1] = np.nan
    with pytest.raises(errors.DataError, match="feat_view"):
        g.validate()


def test_synthetic_scene_single_gaussian_labels():
    bundle = make_synthetic_scene(1, 1, seed=0, width=56, height=56, n_cameras=1,
                                  d_g=4, d_id=4)
    values = np.unique(bundle.label_images[0])
    assert len(values) <= 2
    assert set(values.tolist()) <= {-1, 0}


def test_synthetic_scene_deterministic():
    a = make_synthetic_scene(3, 50, seed=7, width=56, height=56, d_g=4, d_id=4)
    b = make_synthetic_scene(3, 50, seed=7, width=56, height=56, d_g=4, d_id=4)
    for name in ("positions", "rotations", "scales", "opacities", "colors"):
        assert np.array_equal(getattr(a.gaussians, name), getattr(b.gaussians, name))
    for la, lb in zip(a.label_images, b.label_images):
        assert np.array_equal(la, lb)


def test_synthetic_scene_centroid_margin():
    margin = 1.5
    bundle = make_synthetic_scene(2, 100, seed=1, width=56, height=56,
                                  d_g=4, d_id=4, margin=margin)
    ids = cluster_ids(bundle)
    cents = np.stack([bundle.gaussians.positions[ids == m].mean(axis=0)
                      for m in range(2)])
    assert np.linalg.norm(cents[0] - cents[1]) >= margin * 0.9


def test_synthetic_scene_invariants_hold():
    bundle = make_synthetic_scene(2, 80, seed=4, width=56, height=56, d_g=4, d_id=4,
                                  identity="onehot")
    bundle.validate()


def test_degenerate_spec_clamped():
    bundle = make_synthetic_scene(0, 0, seed=0, width=56, height=56, d_g=4, d_id=4)
    assert bundle.object_count == 1
    assert bundle.gaussians.count == 1


def test_geometry_digest_tracks_frozen_fields():
    bundle = make_synthetic_scene(1, 10, seed=3, width=56, height=56, d_g=4, d_id=4)
    d0 = geometry_digest(bundle.gaussians)
    bundle.gaussians.feat_view[0, 0] = 5.0  # trainable field: digest unchanged
    assert geometry_digest(bundle.gaussians) == d0
    bundle.gaussians.positions[0, 0] += 1.0
    assert geometry_digest(bundle.gaussians) != d0
