"""Target token tensors: file ingestion plus a deterministic synthetic
generator.

Synthetic targets are a fixed random affine projection of per-patch scene
descriptors (class-coverage histogram + patch coordinates), then offset
per token by seeded values spanning +/- range_scale. The wide, heterogeneous
offsets are deliberate: they reproduce the broad embedding ranges that make
the learnable scale-shift necessary.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from . import cstf
from .errors import ConfigError, FormatError
from .scene import SceneBundle

RANGE_SCALE_DEFAULT = 100.0
PROJECTION_GAIN = 2.0


@dataclass
class TeacherTokens:
    view_targets: Dict[int, np.ndarray] = field(default_factory=dict)       # cam -> (T, D)
    object_targets: Dict[Tuple[int, int], np.ndarray] = field(default_factory=dict)  # (cam, m)
    stats: Dict[str, Dict[str, float]] = field(default_factory=dict)

    @property
    def d_tok(self) -> Optional[int]:
        for arr in self.view_targets.values():
            return arr.shape[1]
        for arr in self.object_targets.values():
            return arr.shape[1]
        return None

    def objects_for(self, cam_id: int):
        return sorted(m for (c, m) in self.object_targets if c == cam_id)

    def compute_stats(self) -> None:
        self.stats = {}
        for cam, arr in sorted(self.view_targets.items()):
            self.stats[f"view/{cam}"] = {"mean": float(arr.mean()), "std": float(arr.std())}
        for (cam, m), arr in sorted(self.object_targets.items()):
            self.stats[f"obj/{cam}/{m}"] = {"mean": float(arr.mean()), "std": float(arr.std())}


def save_teacher(teacher: TeacherTokens, path: str) -> None:
    recs: Dict[str, np.ndarray] = {}
    for cam, arr in sorted(teacher.view_targets.items()):
        recs[f"view/{cam}"] = arr.astype(np.float32)
    for (cam, m), arr in sorted(teacher.object_targets.items()):
        recs[f"obj/{cam}/{m}"] = arr.astype(np.float32)
    cstf.write_records(path, recs)


_VIEW_RE = re.compile(r"^view/(\d+)$")
_OBJ_RE = re.compile(r"^obj/(\d+)/(\d+)$")


def load_teacher(path: str, expect_t: Optional[int] = None,
                 expect_d: Optional[int] = None) -> TeacherTokens:
    """Read teacher records; missing object targets are allowed (those objects
    are skipped in the object-level mean)."""
    recs = cstf.read_records(path)
    teacher = TeacherTokens()
    for name, arr in recs.items():
        mv = _VIEW_RE.match(name)
        mo = _OBJ_RE.match(name)
        if not (mv or mo):
            continue
        if arr.ndim != 2:
            raise FormatError(f"teacher record {name!r} must be rank 2, got rank {arr.ndim}")
        a = arr.astype(np.float64)
        if expect_d is not None and a.shape[1] != expect_d:
            raise ConfigError(f"teacher record {name!r} has token dim {a.shape[1]}, "
                              f"encoder expects {expect_d}")
        if expect_t is not None and a.shape[0] != expect_t:
            raise ConfigError(f"teacher record {name!r} has {a.shape[0]} tokens, "
                              f"encoder expects {expect_t}")
        if not np.all(np.isfinite(a)):
            raise FormatError(f"teacher record {name!r} contains non-finite values")
        if mv:
            teacher.view_targets[int(mv.group(1))] = a
        else:
            teacher.object_targets[(int(mo.group(1)), int(mo.group(2)))] = a
    teacher.compute_stats()
    return teacher


def _patch_descriptors(labels: np.ndarray, n_objects: int, patch: int) -> np.ndarray:
    """Per-patch descriptor: class coverage fractions (background + objects)
    and normalized patch-grid coordinates."""
    h, w = labels.shape
    hp, wp = h // patch, w // patch
    tiles = labels.reshape(hp, patch, wp, patch).transpose(0, 2, 1, 3).reshape(hp, wp, -1)
    desc = np.zeros((hp * wp, n_objects + 3), np.float64)
    flat = tiles.reshape(hp * wp, -1)
    for cls in range(-1, n_objects):
        desc[:, cls + 1] = np.mean(flat == cls, axis=1)
    rows, cols = np.divmod(np.arange(hp * wp), wp)
    desc[:, n_objects + 1] = rows / max(hp - 1, 1)
    desc[:, n_objects + 2] = cols / max(wp - 1, 1)
    return desc


def make_synthetic_teacher(bundle: SceneBundle, d_tok: int, patch: int,
                           range_scale: float = RANGE_SCALE_DEFAULT,
                           seed: int = 0) -> TeacherTokens:
    """Deterministic targets for every camera and every visible object.

    target = projection(descriptor) * gain + shift, with per-token gain in
    [0.5, 1.5] and shift in [-range_scale, +range_scale]; both collapse to
    the identity when range_scale == 0, so the unscaled projection comes
    back exactly. Bound: max|target| <= 1.5 * max|projection| + range_scale.
    """
    if bundle.label_images is None:
        raise ConfigError("synthetic teacher needs label images on the scene bundle")
    rng = np.random.default_rng(seed)
    n_obj = bundle.object_count
    proj = rng.standard_normal((d_tok, n_obj + 3)) * PROJECTION_GAIN
    teacher = TeacherTokens()
    for cam_id, (cam, labels) in enumerate(zip(bundle.cameras, bundle.label_images)):
        desc = _patch_descriptors(labels, n_obj, patch)
        base = desc @ proj.T  # (T, d_tok)
        t = base.shape[0]
        if range_scale > 0:
            gain = rng.uniform(0.5, 1.5, (t, d_tok))
            shift = rng.uniform(-range_scale, range_scale, (t, d_tok))
        else:
            gain = np.ones((t, d_tok))
            shift = np.zeros((t, d_tok))
        teacher.view_targets[cam_id] = base * gain + shift
        for m in range(n_obj):
            if not np.any(labels == m):
                continue  # object invisible in this view: no target
            masked = np.where(labels == m, labels, -1)
            mdesc = _patch_descriptors(masked, n_obj, patch)
            mbase = mdesc @ proj.T
            if range_scale > 0:
                mgain = rng.uniform(0.5, 1.5, (t, d_tok))
                mshift = rng.uniform(-range_scale, range_scale, (t, d_tok))
            else:
                mgain = np.ones((t, d_tok))
                mshift = np.zeros((t, d_tok))
            teacher.object_targets[(cam_id, m)] = mbase * mgain + mshift
    teacher.compute_stats()
    return teacher


def projection_bound(bundle: SceneBundle, d_tok: int, patch: int, seed: int = 0) -> float:
    """Upper bound of |projection| for the synthetic generator's range test."""
    rng = np.random.default_rng(seed)
    n_obj = bundle.object_count
    proj = rng.standard_normal((d_tok, n_obj + 3)) * PROJECTION_GAIN
    bound = 0.0
    for labels in bundle.label_images or []:
        desc = _patch_descriptors(labels, n_obj, patch)
        bound = max(bound, float(np.max(np.abs(desc @ proj.T))))
        for m in range(n_obj):
            masked = np.where(labels == m, labels, -1)
            mdesc = _patch_descriptors(masked, n_obj, patch)
            bound = max(bound, float(np.max(np.abs(mdesc @ proj.T))))
    return bound


def import_raw_teacher(manifest_path: str, out_path: str) -> TeacherTokens:
    """Convert raw float32 blobs + JSON manifest into a teacher CSTF file.

    Manifest format:
        {"records": [{"name": "view/0", "shape": [T, D], "path": "view0.f32"}, ...]}
    Paths are resolved relative to the manifest. Names must follow the
    view/{cam} and obj/{cam}/{m} convention.
    """
    import os

    with open(manifest_path) as fh:
        manifest = json.load(fh)
    base = os.path.dirname(os.path.abspath(manifest_path))
    recs: Dict[str, np.ndarray] = {}
    for entry in manifest.get("records", []):
        name, shape = entry["name"], entry["shape"]
        if not (_VIEW_RE.match(name) or _OBJ_RE.match(name)):
            raise FormatError(f"manifest record name {name!r} must be view/<cam> "
                              "or obj/<cam>/<m>")
        blob = np.fromfile(os.path.join(base, entry["path"]), dtype="<f4")
        expected = int(np.prod(shape))
        if blob.size != expected:
            raise FormatError(f"blob for {name!r} has {blob.size} floats, "
                              f"shape {shape} needs {expected}")
        recs[name] = blob.reshape(shape)
    cstf.write_records(out_path, recs)
    return load_teacher(out_path)
