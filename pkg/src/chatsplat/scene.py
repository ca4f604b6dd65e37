"""Scene representation: per-Gaussian arrays, cameras, and serialization.

Geometry and color are imported (PLY) and frozen; only the language feature
arrays (`feat_view`, `feat_object`) and the identity array are trained.
Everything is stored struct-of-arrays in float32; compute paths upcast to
float64 as needed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from . import cstf
from .errors import DataError, ImportError as SceneImportError, ShapeError

D_G_DEFAULT = 32
D_ID_DEFAULT = 16


@dataclass
class Gaussian3D:
    """Flat arrays over N Gaussians.

    positions   (N, 3)  world-space centers
    rotations   (N, 4)  unit quaternions (w, x, y, z)
    scales      (N, 3)  positive axis scales (post-activation)
    opacities   (N,)    in [0, 1] (post-activation)
    colors      (N, 3)  view-independent linear RGB in [0, 1]
    feat_view   (N, D_g)  view-level language feature
    feat_object (N, D_g)  object-level language feature
    identity    (N, D_id) identity feature classified into object masks
    """

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    feat_view: np.ndarray
    feat_object: np.ndarray
    identity: np.ndarray

    @property
    def count(self) -> int:
        return self.positions.shape[0]

    @property
    def d_g(self) -> int:
        return self.feat_view.shape[1]

    @property
    def d_id(self) -> int:
        return self.identity.shape[1]

    @classmethod
    def zeros(cls, n: int, d_g: int = D_G_DEFAULT, d_id: int = D_ID_DEFAULT) -> "Gaussian3D":
        g = cls(
            positions=np.zeros((n, 3), np.float32),
            rotations=np.zeros((n, 4), np.float32),
            scales=np.ones((n, 3), np.float32),
            opacities=np.ones(n, np.float32),
            colors=np.ones((n, 3), np.float32),
            feat_view=np.zeros((n, d_g), np.float32),
            feat_object=np.zeros((n, d_g), np.float32),
            identity=np.zeros((n, d_id), np.float32),
        )
        g.rotations[:, 0] = 1.0
        return g

    def validate(self) -> None:
        n = self.count
        for name in ("positions", "rotations", "scales", "opacities", "colors",
                     "feat_view", "feat_object", "identity"):
            a = getattr(self, name)
            if a.shape[0] != n:
                raise ShapeError(f"{name} has {a.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(a)):
                idx = int(np.argwhere(~np.isfinite(a))[0][0])
                raise DataError(f"non-finite value in {name} at element {idx}")
        norms = np.linalg.norm(self.rotations.astype(np.float64), axis=1)
        if n and np.max(np.abs(norms - 1.0)) > 1e-6:
            idx = int(np.argmax(np.abs(norms - 1.0)))
            raise DataError(f"quaternion {idx} not unit norm (|q| = {norms[idx]:.8f})")
        if n and (np.min(self.scales) <= 0):
            idx = int(np.argwhere(self.scales <= 0)[0][0])
            raise DataError(f"non-positive scale at element {idx}")
        if n and (np.min(self.opacities) < 0 or np.max(self.opacities) > 1):
            raise DataError("opacity outside [0, 1]")

    def copy(self) -> "Gaussian3D":
        return Gaussian3D(**{k: getattr(self, k).copy() for k in (
            "positions", "rotations", "scales", "opacities", "colors",
            "feat_view", "feat_object", "identity")})


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    Pixel (ix, iy) covers [ix, ix+1) x [iy, iy+1); splats are sampled at the
    pixel center (ix + 0.5, iy + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # (3, 3) world-to-camera rotation
    translation: np.ndarray  # (3,)
    near: float = 0.1
    far: float = 100.0

    def validate(self, patch_size: Optional[int] = None) -> None:
        R = np.asarray(self.rotation, np.float64)
        if R.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {R.shape}")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-6:
            raise DataError("world-to-cam rotation is not orthonormal within 1e-6")
        if not (self.near > 0 and self.far > self.near):
            raise DataError(f"need 0 < near < far, got near={self.near} far={self.far}")
        if patch_size is not None and (self.width % patch_size or self.height % patch_size):
            raise ShapeError(
                f"image {self.width}x{self.height} is not a multiple of patch size {patch_size}")

    def cam_from_world(self, pts: np.ndarray) -> np.ndarray:
        return pts @ np.asarray(self.rotation).T + np.asarray(self.translation)


@dataclass
class SceneBundle:
    """A scene: Gaussians, its cameras, and optional per-camera object labels.

    Label images hold the object id in [0, object_count) per covered pixel and
    -1 for background.
    """

    gaussians: Gaussian3D
    cameras: List[Camera]
    object_count: int = 0
    label_images: Optional[List[np.ndarray]] = None

    def validate(self) -> None:
        self.gaussians.validate()
        for cam in self.cameras:
            cam.validate()
        if self.label_images is not None:
            if len(self.label_images) != len(self.cameras):
                raise ShapeError("one label image per camera required")
            for cam, lab in zip(self.cameras, self.label_images):
                if lab.shape != (cam.height, cam.width):
                    raise ShapeError(f"label image {lab.shape} does not match camera "
                                     f"{cam.height}x{cam.width}")
                if lab.size and (lab.max() >= self.object_count or lab.min() < -1):
                    raise DataError("label id outside [-1, object_count)")


# ---------------------------------------------------------------------------
# PLY import/export (binary little-endian subset)

_REQUIRED_PROPS = ("x", "y", "z", "rot_0", "rot_1", "rot_2", "rot_3",
                   "scale_0", "scale_1", "scale_2", "opacity",
                   "f_dc_0", "f_dc_1", "f_dc_2")

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "ushort": "<u2", "int": "<i4", "int32": "<i4",
    "uint": "<u4", "uint32": "<u4",
}


def import_ply(path: str, d_g: int = D_G_DEFAULT, d_id: int = D_ID_DEFAULT) -> Gaussian3D:
    """Read geometry/color/opacity from a 3DGS-style binary PLY.

    Scale fields are stored pre-activation (exp applied here), opacity is
    stored as a logit (logistic applied here), quaternions are normalized.
    Feature arrays come back zero-initialized. Higher-order color
    coefficients (f_rest_*) are dropped with a warning.
    """
    with open(path, "rb") as fh:
        line = fh.readline().strip()
        if line != b"ply":
            raise SceneImportError("not a PLY file (missing 'ply' header)")
        fmt = None
        n_vertex = 0
        props: List[tuple] = []
        in_vertex = False
        while True:
            raw = fh.readline()
            if not raw:
                raise SceneImportError("PLY header has no end_header")
            line = raw.decode("ascii", "replace").strip()
            if line.startswith("format"):
                fmt = line.split()[1]
            elif line.startswith("element"):
                _, name, cnt = line.split()
                in_vertex = name == "vertex"
                if in_vertex:
                    n_vertex = int(cnt)
            elif line.startswith("property") and in_vertex:
                _, dtype, name = line.split()
                if dtype not in _PLY_TYPES:
                    raise SceneImportError(f"unsupported property type {dtype!r}")
                props.append((name, _PLY_TYPES[dtype]))
            elif line == "end_header":
                break
        if fmt != "binary_little_endian":
            raise SceneImportError(f"unsupported PLY format {fmt!r}; need binary_little_endian")
        names = [p[0] for p in props]
        for req in _REQUIRED_PROPS:
            if req not in names:
                raise SceneImportError(f"PLY is missing required property {req!r}")
        rest = [n for n in names if n.startswith("f_rest_")]
        if rest:
            warnings.warn(f"dropping {len(rest)} higher-order color coefficients "
                          "(view-independent color only)", stacklevel=2)
        dtype = np.dtype(props)
        data = np.frombuffer(fh.read(n_vertex * dtype.itemsize), dtype=dtype, count=n_vertex)

    def col(name: str) -> np.ndarray:
        a = np.asarray(data[name], np.float64)
        bad = ~np.isfinite(a)
        if bad.any():
            raise DataError(f"non-finite value in property {name!r} at element "
                            f"{int(np.argmax(bad))}")
        return a

    pos = np.stack([col("x"), col("y"), col("z")], axis=1)
    quat = np.stack([col(f"rot_{i}") for i in range(4)], axis=1)
    qn = np.linalg.norm(quat, axis=1, keepdims=True)
    if n_vertex and qn.min() <= 0:
        raise DataError(f"zero quaternion at element {int(np.argmin(qn))}")
    quat = quat / qn
    scales = np.exp(np.stack([col(f"scale_{i}") for i in range(3)], axis=1))
    opac = 1.0 / (1.0 + np.exp(-col("opacity")))
    color = np.stack([col(f"f_dc_{i}") for i in range(3)], axis=1)

    g = Gaussian3D.zeros(n_vertex, d_g=d_g, d_id=d_id)
    g.positions = pos.astype(np.float32)
    g.rotations = quat.astype(np.float32)
    g.scales = scales.astype(np.float32)
    g.opacities = np.clip(opac, 0.0, 1.0).astype(np.float32)
    g.colors = color.astype(np.float32)
    if n_vertex:
        # float32 rounding can leave |q| off unit by ~1e-7; renormalize in f32
        norms = np.linalg.norm(g.rotations.astype(np.float64), axis=1, keepdims=True)
        g.rotations = (g.rotations / norms).astype(np.float32)
    return g


def export_ply(g: Gaussian3D, path: str) -> None:
    """Write geometry/color/opacity as a 3DGS-style binary PLY (inverse activations)."""
    n = g.count
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    fields = (["x", "y", "z"] + [f"rot_{i}" for i in range(4)]
              + [f"scale_{i}" for i in range(3)] + ["opacity"]
              + [f"f_dc_{i}" for i in range(3)])
    header += [f"property float {f}" for f in fields]
    header.append("end_header")
    o = np.clip(g.opacities.astype(np.float64), 1e-7, 1 - 1e-7)
    cols = np.concatenate([
        g.positions,
        g.rotations,
        np.log(g.scales.astype(np.float64)).astype(np.float32),
        np.log(o / (1 - o)).astype(np.float32)[:, None],
        g.colors,
    ], axis=1).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(cols).tobytes())


# ---------------------------------------------------------------------------
# CSTF sidecar: a self-contained SceneBundle (plus optional extra records)

_GAUSS_FIELDS = ("positions", "rotations", "scales", "opacities", "colors",
                 "feat_view", "feat_object", "identity")


def bundle_records(bundle: SceneBundle) -> Dict[str, np.ndarray]:
    recs: Dict[str, np.ndarray] = {}
    g = bundle.gaussians
    for name in _GAUSS_FIELDS:
        recs[f"gauss.{name}"] = getattr(g, name)
    recs["meta.object_count"] = np.array([bundle.object_count], np.uint32)
    recs["meta.n_cameras"] = np.array([len(bundle.cameras)], np.uint32)
    recs["meta.d_g"] = np.array([g.d_g], np.uint32)
    recs["meta.d_id"] = np.array([g.d_id], np.uint32)
    for i, cam in enumerate(bundle.cameras):
        recs[f"cam.{i}.intrinsics"] = np.array(
            [cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height, cam.near, cam.far],
            np.float32)
        recs[f"cam.{i}.world_to_cam"] = np.concatenate(
            [np.asarray(cam.rotation, np.float32),
             np.asarray(cam.translation, np.float32).reshape(3, 1)], axis=1)
    if bundle.label_images is not None:
        for i, lab in enumerate(bundle.label_images):
            recs[f"label.{i}"] = (lab.astype(np.int64) + 1).astype(np.uint32)
    return recs


def export_sidecar(bundle: SceneBundle, path: str,
                   extras: Optional[Mapping[str, np.ndarray]] = None) -> None:
    """Write the whole bundle (geometry, features, cameras, labels) to CSTF.

    `extras` lets callers append encoder/scale-shift/classifier records
    (names `enc.*`, `ss.*`, `cls.*`) or optimizer state.
    """
    recs = bundle_records(bundle)
    if extras:
        recs.update(extras)
    cstf.write_records(path, recs)


def import_sidecar(path: str) -> SceneBundle:
    recs = cstf.read_records(path)
    return bundle_from_records(recs)


def bundle_from_records(recs: Mapping[str, np.ndarray]) -> SceneBundle:
    missing = [f"gauss.{n}" for n in _GAUSS_FIELDS if f"gauss.{n}" not in recs]
    if missing:
        raise SceneImportError(f"sidecar is missing records: {', '.join(missing)}")
    g = Gaussian3D(**{n: np.array(recs[f"gauss.{n}"], np.float32) for n in _GAUSS_FIELDS})
    n_cams = int(recs["meta.n_cameras"][0]) if "meta.n_cameras" in recs else 0
    cams = []
    for i in range(n_cams):
        k = recs[f"cam.{i}.intrinsics"].astype(np.float64)
        rt = recs[f"cam.{i}.world_to_cam"].astype(np.float64)
        cams.append(Camera(fx=float(k[0]), fy=float(k[1]), cx=float(k[2]), cy=float(k[3]),
                           width=int(round(k[4])), height=int(round(k[5])),
                           rotation=rt[:, :3].copy(), translation=rt[:, 3].copy(),
                           near=float(k[6]), far=float(k[7])))
    labels = None
    if any(name.startswith("label.") for name in recs):
        labels = [recs[f"label.{i}"].astype(np.int64) - 1 for i in range(n_cams)]
        labels = [lab.astype(np.int32) for lab in labels]
    obj_count = int(recs["meta.object_count"][0]) if "meta.object_count" in recs else 0
    return SceneBundle(gaussians=g, cameras=cams, object_count=obj_count, label_images=labels)


def geometry_digest(g: Gaussian3D) -> str:
    """SHA-256 over the frozen fields (positions, rotations, scales, opacities, colors)."""
    import hashlib

    h = hashlib.sha256()
    for name in ("positions", "rotations", "scales", "opacities", "colors"):
        h.update(np.ascontiguousarray(getattr(g, name)).tobytes())
    return h.hexdigest()
