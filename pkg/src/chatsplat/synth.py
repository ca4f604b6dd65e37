"""Deterministic synthetic scenes for desk-scale training and verification.

Objects are disjoint Gaussian clusters on a ring facing a small camera orbit.
Ground-truth label images are rendered by the reference rasterizer: one-hot
cluster membership is composited and argmaxed, with low-opacity pixels
labeled background (-1).
"""

from __future__ import annotations

import math
from typing import Tuple

import numpy as np

from .masking import ALPHA_BACKGROUND_THRESHOLD, IdentityClassifier
from .rasterizer import render_payload
from .scene import Camera, Gaussian3D, SceneBundle

CLUSTER_SIGMA = 0.16
CLUSTER_MAX_OFFSET = 0.4
CAMERA_DISTANCE = 4.2


def look_at_camera(eye, target, width: int, height: int, fx: float,
                   near: float = 0.1, far: float = 50.0) -> Camera:
    eye = np.asarray(eye, np.float64)
    target = np.asarray(target, np.float64)
    up = np.array([0.0, 1.0, 0.0])
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)
    return Camera(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height,
                  rotation=rot, translation=-rot @ eye, near=near, far=far)


def _ring_centroids(n_objects: int, margin: float) -> np.ndarray:
    if n_objects == 1:
        return np.zeros((1, 3))
    spacing = max(margin, 1.4)
    radius = spacing / (2.0 * math.sin(math.pi / n_objects))
    angles = 2.0 * math.pi * np.arange(n_objects) / n_objects
    return np.stack([radius * np.cos(angles), radius * np.sin(angles),
                     np.zeros(n_objects)], axis=1)


def make_synthetic_scene(n_objects: int = 2, gaussians_per_object: int = 250,
                         seed: int = 0, *, width: int = 112, height: int = 112,
                         n_cameras: int = 3, d_g: int = 32, d_id: int = 16,
                         margin: float = 1.4, identity: str = "zeros") -> SceneBundle:
    """Build a scene of disjoint clusters plus rendered ground-truth labels.

    identity="onehot" plants one-hot identity features (dimension = object id),
    which together with `perfect_classifier` yields masks that match the
    ground-truth labels exactly; "zeros" leaves them for stage-1 training.
    """
    n_objects = max(1, int(n_objects))
    gaussians_per_object = max(1, int(gaussians_per_object))
    rng = np.random.default_rng(seed)
    centroids = _ring_centroids(n_objects, margin)

    n = n_objects * gaussians_per_object
    g = Gaussian3D.zeros(n, d_g=d_g, d_id=d_id)
    cluster_id = np.repeat(np.arange(n_objects), gaussians_per_object)
    offsets = rng.normal(0.0, CLUSTER_SIGMA, (n, 3))
    norms = np.linalg.norm(offsets, axis=1, keepdims=True)
    too_far = norms[:, 0] > CLUSTER_MAX_OFFSET
    offsets[too_far] *= CLUSTER_MAX_OFFSET / norms[too_far]
    g.positions = (centroids[cluster_id] + offsets).astype(np.float32)
    quat = rng.normal(size=(n, 4))
    g.rotations = (quat / np.linalg.norm(quat, axis=1, keepdims=True)).astype(np.float32)
    g.scales = np.exp(rng.normal(math.log(0.06), 0.25, (n, 3))).astype(np.float32)
    g.opacities = rng.uniform(0.55, 0.95, n).astype(np.float32)
    base_colors = rng.uniform(0.15, 0.95, (n_objects, 3))
    g.colors = np.clip(base_colors[cluster_id]
                       + rng.normal(0, 0.05, (n, 3)), 0.0, 1.0).astype(np.float32)
    if identity == "onehot":
        if d_id < n_objects:
            raise ValueError(f"d_id={d_id} too small for {n_objects} one-hot objects")
        g.identity[np.arange(n), cluster_id] = 1.0

    cams = []
    spread = 0.35 if n_cameras > 1 else 0.0
    for i in range(n_cameras):
        az = -spread + 2 * spread * (i / max(n_cameras - 1, 1))
        eye = np.array([CAMERA_DISTANCE * math.sin(az), 1.0,
                        -CAMERA_DISTANCE * math.cos(az)])
        cams.append(look_at_camera(eye, (0, 0, 0), width, height, fx=float(width)))

    onehot = np.zeros((n, n_objects), np.float64)
    onehot[np.arange(n), cluster_id] = 1.0
    labels = []
    for cam in cams:
        out = render_payload(g, cam, onehot, tiled=False)
        lab = np.argmax(out.payload, axis=2).astype(np.int32)
        lab[out.alpha_acc < ALPHA_BACKGROUND_THRESHOLD] = -1
        labels.append(lab)
    return SceneBundle(gaussians=g, cameras=cams, object_count=n_objects,
                       label_images=labels)


def cluster_ids(bundle: SceneBundle) -> np.ndarray:
    """Recover per-Gaussian object ids of a synthetic scene from its layout."""
    n = bundle.gaussians.count
    per = n // max(bundle.object_count, 1)
    return np.repeat(np.arange(bundle.object_count), per)[:n]


def perfect_classifier(n_objects: int, d_id: int, gain: float = 40.0) -> IdentityClassifier:
    """Classifier that maps planted one-hot identity composites to their object
    class; background wins wherever the composite is ~zero."""
    cls = IdentityClassifier.init(n_objects, d_id)
    for m in range(n_objects):
        cls.weight[m + 1, m] = gain
    return cls


def random_scene(n: int, seed: int = 0, *, width: int = 64, height: int = 64,
                 d_g: int = 8, d_id: int = 4, feature_range: float = 1.0,
                 spread: float = 1.1, scale: float = 0.05
                 ) -> Tuple[Gaussian3D, Camera]:
    """Unstructured random scene in front of one camera; used by the
    rasterizer oracle suite and the benchmark."""
    rng = np.random.default_rng(seed)
    g = Gaussian3D.zeros(max(0, n), d_g=d_g, d_id=d_id)
    if n > 0:
        g.positions = np.stack([
            rng.uniform(-spread, spread, n),
            rng.uniform(-spread, spread, n),
            rng.uniform(-0.9, 0.9, n)], axis=1).astype(np.float32)
        quat = rng.normal(size=(n, 4))
        g.rotations = (quat / np.linalg.norm(quat, axis=1, keepdims=True)).astype(np.float32)
        g.scales = np.exp(rng.normal(math.log(scale), 0.35, (n, 3))).astype(np.float32)
        g.opacities = rng.uniform(0.05, 0.98, n).astype(np.float32)
        g.colors = rng.uniform(0, 1, (n, 3)).astype(np.float32)
        g.feat_view = rng.uniform(-feature_range, feature_range, (n, d_g)).astype(np.float32)
        g.feat_object = rng.uniform(-feature_range, feature_range, (n, d_g)).astype(np.float32)
        g.identity = rng.uniform(-feature_range, feature_range, (n, d_id)).astype(np.float32)
    cam = look_at_camera((0, 0, -4.0), (0, 0, 0), width, height, fx=float(width))
    return g, cam
