"""Forward rasterization of Gaussian payloads into 2D maps.

Two implementations share one inner compositing routine so they agree
bitwise: `render_tiled` bins splats into 16x16 tiles and runs tiles in
parallel; `render_reference` walks every splat per pixel with no binning and
serves as the correctness oracle.

Per pixel k and payload x_i, the composited value is
    sum_i x_i * w_i,   w_i = alpha_i * prod_{j<i} (1 - alpha_j),
with alpha_i = opacity_i * exp(-0.5 d^T conic d) evaluated at the pixel
center, front-to-back over depth-sorted splats. Shared rules: alpha clamped
to 0.99, contributions below 1/255 skipped, accumulation stops before the
contribution that would push transmittance under 1e-4, and a splat only has
support inside the square box of half-width `radius` used for tile binning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numba
import numpy as np
from numba import njit, prange

from .errors import ArgError
from .projection import SplatBatch, project_splats, sort_by_depth
from .scene import Gaussian3D, SceneBundle

CHANNELS = ("color", "feat_v", "feat_o", "identity")


@dataclass
class RenderSettings:
    tile: int = 16
    alpha_clamp: float = 0.99
    alpha_floor: float = 1.0 / 255.0
    transmittance_min: float = 1e-4
    contrib_cap: int = 256


@dataclass
class Contrib:
    """Per-pixel (gaussian_index, weight) lists recorded for the backward pass."""

    indices: np.ndarray   # (H, W, cap) int32
    weights: np.ndarray   # (H, W, cap) float64
    count: np.ndarray     # (H, W) int32, number recorded (<= cap)
    overflow: np.ndarray  # (H, W) int32, contributions dropped past the cap
    cap: int

    def pixel(self, iy: int, ix: int) -> List[Tuple[int, float]]:
        n = int(self.count[iy, ix])
        return [(int(self.indices[iy, ix, k]), float(self.weights[iy, ix, k]))
                for k in range(n)]


@dataclass
class RenderOutput:
    color: Optional[np.ndarray] = None      # (H, W, 3)
    feat_v: Optional[np.ndarray] = None     # (H, W, D_g)
    feat_o: Optional[np.ndarray] = None     # (H, W, D_g)
    identity: Optional[np.ndarray] = None   # (H, W, D_id)
    payload: Optional[np.ndarray] = None    # (H, W, C) for render_payload
    alpha_acc: Optional[np.ndarray] = None  # (H, W)
    contrib: Optional[Contrib] = None


@njit(cache=True, inline="always")
def _composite_pixel(px, py, order, j0, j1, means, conics, opacs, radii, gidx, payload,
                     out_px, cidx_px, cw_px, cap,
                     alpha_floor, alpha_clamp, t_min):
    T = 1.0
    wsum = 0.0
    recorded = 0
    overflow = 0
    C = payload.shape[1]
    for k in range(j0, j1):
        j = order[k]
        r = radii[j]
        dx = px - means[j, 0]
        if dx > r or dx < -r:
            continue
        dy = py - means[j, 1]
        if dy > r or dy < -r:
            continue
        power = -0.5 * (conics[j, 0] * dx * dx + conics[j, 2] * dy * dy) \
            - conics[j, 1] * dx * dy
        if power > 0.0:
            continue
        alpha = opacs[j] * math.exp(power)
        if alpha < alpha_floor:
            continue
        if alpha > alpha_clamp:
            alpha = alpha_clamp
        test_t = T * (1.0 - alpha)
        if test_t < t_min:
            break
        w = alpha * T
        for c in range(C):
            out_px[c] += w * payload[j, c]
        if cap > 0:
            if recorded < cap:
                cidx_px[recorded] = gidx[j]
                cw_px[recorded] = w
                recorded += 1
            else:
                overflow += 1
        wsum += w
        T = test_t
    return wsum, recorded, overflow


@njit(cache=True, parallel=True)
def _render_tiles(lists, offsets, tw, th, tile, H, W,
                  means, conics, opacs, radii, gidx, payload,
                  out, alpha, cidx, cw, ccount, coverflow, cap,
                  alpha_floor, alpha_clamp, t_min):
    for tid in prange(tw * th):
        ty = tid // tw
        tx = tid % tw
        j0 = offsets[tid]
        j1 = offsets[tid + 1]
        y_end = min((ty + 1) * tile, H)
        x_end = min((tx + 1) * tile, W)
        for iy in range(ty * tile, y_end):
            py = iy + 0.5
            for ix in range(tx * tile, x_end):
                px = ix + 0.5
                wsum, rec, ovf = _composite_pixel(
                    px, py, lists, j0, j1, means, conics, opacs, radii, gidx, payload,
                    out[iy, ix], cidx[iy, ix], cw[iy, ix], cap,
                    alpha_floor, alpha_clamp, t_min)
                alpha[iy, ix] = wsum
                ccount[iy, ix] = rec
                coverflow[iy, ix] = ovf


@njit(cache=True, parallel=True)
def _render_brute(order, H, W,
                  means, conics, opacs, radii, gidx, payload,
                  out, alpha, cidx, cw, ccount, coverflow, cap,
                  alpha_floor, alpha_clamp, t_min):
    K = order.shape[0]
    for iy in prange(H):
        py = iy + 0.5
        for ix in range(W):
            px = ix + 0.5
            wsum, rec, ovf = _composite_pixel(
                px, py, order, 0, K, means, conics, opacs, radii, gidx, payload,
                out[iy, ix], cidx[iy, ix], cw[iy, ix], cap,
                alpha_floor, alpha_clamp, t_min)
            alpha[iy, ix] = wsum
            ccount[iy, ix] = rec
            coverflow[iy, ix] = ovf


@njit(cache=True)
def _build_tile_lists(means, radii, W, H, tile):
    K = means.shape[0]
    tw = (W + tile - 1) // tile
    th = (H + tile - 1) // tile
    ntiles = tw * th
    tx0 = np.empty(K, np.int64)
    tx1 = np.empty(K, np.int64)
    ty0 = np.empty(K, np.int64)
    ty1 = np.empty(K, np.int64)
    counts = np.zeros(ntiles, np.int64)
    for j in range(K):
        r = radii[j]
        # conservative pixel range of the support box, then its tile range
        ax0 = min(max(int(math.floor(means[j, 0] - r)) - 1, 0), W - 1)
        ax1 = min(max(int(math.ceil(means[j, 0] + r)) + 1, 0), W - 1)
        ay0 = min(max(int(math.floor(means[j, 1] - r)) - 1, 0), H - 1)
        ay1 = min(max(int(math.ceil(means[j, 1] + r)) + 1, 0), H - 1)
        tx0[j] = ax0 // tile
        tx1[j] = ax1 // tile
        ty0[j] = ay0 // tile
        ty1[j] = ay1 // tile
        for ty in range(ty0[j], ty1[j] + 1):
            for tx in range(tx0[j], tx1[j] + 1):
                counts[ty * tw + tx] += 1
    offsets = np.zeros(ntiles + 1, np.int64)
    for i in range(ntiles):
        offsets[i + 1] = offsets[i] + counts[i]
    lists = np.empty(offsets[ntiles], np.int32)
    fill = offsets[:ntiles].copy()
    for j in range(K):  # ascending j keeps each tile's list in depth order
        for ty in range(ty0[j], ty1[j] + 1):
            for tx in range(tx0[j], tx1[j] + 1):
                tid = ty * tw + tx
                lists[fill[tid]] = j
                fill[tid] += 1
    return lists, offsets, tw, th


def _gaussians_of(scene: Union[Gaussian3D, SceneBundle]) -> Gaussian3D:
    return scene.gaussians if isinstance(scene, SceneBundle) else scene


def _payload_for(g: Gaussian3D, batch: SplatBatch, channels: Sequence[str]) -> Tuple[np.ndarray, List[Tuple[str, int]]]:
    planes: List[Tuple[str, int]] = []
    cols = []
    rows = batch.gaussian_index
    for ch in CHANNELS:
        if ch not in channels:
            continue
        src = {"color": g.colors, "feat_v": g.feat_view,
               "feat_o": g.feat_object, "identity": g.identity}[ch]
        cols.append(src[rows].astype(np.float64))
        planes.append((ch, src.shape[1]))
    payload = (np.concatenate(cols, axis=1) if cols
               else np.zeros((batch.count, 0), np.float64))
    return np.ascontiguousarray(payload), planes


def _run(scene, cam, channels, settings: RenderSettings, record_contrib: bool,
         tiled: bool, payload_override: Optional[np.ndarray] = None) -> RenderOutput:
    g = _gaussians_of(scene)
    channels = tuple(channels)
    if payload_override is None and not channels:
        raise ArgError("channels must be a nonempty subset of " + str(CHANNELS))
    for ch in channels:
        if ch not in CHANNELS:
            raise ArgError(f"unknown channel {ch!r}")
    H, W = cam.height, cam.width
    batch = sort_by_depth(project_splats(g, cam))
    if payload_override is not None:
        payload = np.ascontiguousarray(
            payload_override[batch.gaussian_index].astype(np.float64))
        planes = [("payload", payload.shape[1])]
    else:
        payload, planes = _payload_for(g, batch, channels)
    C = payload.shape[1]

    out = np.zeros((H, W, C), np.float64)
    alpha = np.zeros((H, W), np.float64)
    cap = settings.contrib_cap if record_contrib else 0
    cidx = np.empty((H, W, max(cap, 1)), np.int32)
    cw = np.empty((H, W, max(cap, 1)), np.float64)
    ccount = np.zeros((H, W), np.int32)
    coverflow = np.zeros((H, W), np.int32)

    means = np.ascontiguousarray(batch.mean2d)
    conics = np.ascontiguousarray(batch.conic)
    opacs = np.ascontiguousarray(g.opacities[batch.gaussian_index].astype(np.float64))
    radii = np.ascontiguousarray(batch.radius.astype(np.float64))
    gidx = np.ascontiguousarray(batch.gaussian_index.astype(np.int32))

    if batch.count:
        if tiled:
            lists, offsets, tw, th = _build_tile_lists(means, radii, W, H, settings.tile)
            _render_tiles(lists, offsets, tw, th, settings.tile, H, W,
                          means, conics, opacs, radii, gidx, payload,
                          out, alpha, cidx, cw, ccount, coverflow, cap,
                          settings.alpha_floor, settings.alpha_clamp,
                          settings.transmittance_min)
        else:
            order = np.arange(batch.count, dtype=np.int32)
            _render_brute(order, H, W,
                          means, conics, opacs, radii, gidx, payload,
                          out, alpha, cidx, cw, ccount, coverflow, cap,
                          settings.alpha_floor, settings.alpha_clamp,
                          settings.transmittance_min)

    result = RenderOutput(alpha_acc=alpha)
    ofs = 0
    for name, width in planes:
        plane = out[:, :, ofs:ofs + width]
        ofs += width
        setattr(result, name, plane)
    if record_contrib:
        result.contrib = Contrib(indices=cidx, weights=cw, count=ccount,
                                 overflow=coverflow, cap=cap)
    return result


def render_tiled(scene, cam, channels: Sequence[str],
                 settings: Optional[RenderSettings] = None,
                 record_contrib: bool = False) -> RenderOutput:
    """Tile-binned parallel rasterization of the requested channels."""
    return _run(scene, cam, channels, settings or RenderSettings(), record_contrib, True)


def render_reference(scene, cam, channels: Sequence[str],
                     settings: Optional[RenderSettings] = None,
                     record_contrib: bool = True) -> RenderOutput:
    """Brute-force per-pixel oracle; same compositing rules, no tile binning."""
    return _run(scene, cam, channels, settings or RenderSettings(), record_contrib, False)


def render_payload(scene, cam, payload: np.ndarray, tiled: bool = True,
                   settings: Optional[RenderSettings] = None,
                   record_contrib: bool = False) -> RenderOutput:
    """Composite an arbitrary per-Gaussian payload (N, C); used for ground-truth
    label rendering and linearity checks. The plane comes back in `.payload`."""
    return _run(scene, cam, (), settings or RenderSettings(), record_contrib,
                tiled, payload_override=np.asarray(payload, np.float64))


def set_thread_count(n: int) -> None:
    numba.set_num_threads(max(1, int(n)))
