"""Closed-form gradients for the token losses and the feature-rendering map.

Geometry, opacity and color are frozen, so per-pixel compositing weights are
constants of the forward pass; the gradient of a rendered map with respect to
per-Gaussian features is exactly the transpose of the (linear) forward map,
evaluated from the recorded contribution lists.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np
from numba import njit, prange

from .errors import ShapeError, StateError
from .rasterizer import Contrib

# partial-buffer memory guard: above this the reduction runs tile-serial
_PARTIAL_BUDGET = 1.5e8


@njit(cache=True, parallel=True)
def _scatter_parallel(cidx, cw, count, upstream, partials, tile, tw, th):
    h, w = count.shape
    d = upstream.shape[2]
    for tid in prange(tw * th):
        ty = tid // tw
        tx = tid % tw
        for iy in range(ty * tile, min((ty + 1) * tile, h)):
            for ix in range(tx * tile, min((tx + 1) * tile, w)):
                for k in range(count[iy, ix]):
                    j = cidx[iy, ix, k]
                    wgt = cw[iy, ix, k]
                    for c in range(d):
                        partials[tid, j, c] += wgt * upstream[iy, ix, c]


@njit(cache=True)
def _scatter_serial(cidx, cw, count, upstream, out, tile, tw, th):
    h, w = count.shape
    d = upstream.shape[2]
    for tid in range(tw * th):
        ty = tid // tw
        tx = tid % tw
        for iy in range(ty * tile, min((ty + 1) * tile, h)):
            for ix in range(tx * tile, min((tx + 1) * tile, w)):
                for k in range(count[iy, ix]):
                    j = cidx[iy, ix, k]
                    wgt = cw[iy, ix, k]
                    for c in range(d):
                        out[j, c] += wgt * upstream[iy, ix, c]


def grad_render_features(contrib: Optional[Contrib], upstream: np.ndarray,
                         n_gaussians: int, tile: int = 16) -> np.ndarray:
    """d(loss)/d(features) = sum_k w_i(k) * upstream(k) per Gaussian i.

    Accumulation goes through per-tile partial buffers reduced in a fixed
    order, so results are bitwise reproducible across thread counts.
    """
    if contrib is None:
        raise StateError("forward pass did not record contributions "
                         "(render with record_contrib=True)")
    if upstream.ndim != 3 or upstream.shape[:2] != contrib.count.shape:
        raise ShapeError(f"upstream gradient {upstream.shape} does not match the "
                         f"rendered image {contrib.count.shape}")
    h, w = contrib.count.shape
    d = upstream.shape[2]
    tw = (w + tile - 1) // tile
    th = (h + tile - 1) // tile
    up = np.ascontiguousarray(upstream, np.float64)
    if tw * th * n_gaussians * d <= _PARTIAL_BUDGET:
        partials = np.zeros((tw * th, n_gaussians, d), np.float64)
        _scatter_parallel(contrib.indices, contrib.weights, contrib.count,
                          up, partials, tile, tw, th)
        return partials.sum(axis=0)
    out = np.zeros((n_gaussians, d), np.float64)
    _scatter_serial(contrib.indices, contrib.weights, contrib.count,
                    up, out, tile, tw, th)
    return out


def l1_loss_and_grad(pred: np.ndarray, target: np.ndarray, grad_scale: float = 1.0,
                     normalization: str = "mean") -> Tuple[float, np.ndarray]:
    """L1 loss and its subgradient (0 at exact ties).

    normalization="mean" (the default, recorded in train configs) divides by
    the element count so loss magnitudes are resolution-independent; "sum"
    keeps the raw norm."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    if normalization == "mean":
        loss = float(np.mean(np.abs(diff)))
        grad = np.sign(diff) * (grad_scale / diff.size)
    elif normalization == "sum":
        loss = float(np.sum(np.abs(diff)))
        grad = np.sign(diff) * grad_scale
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return loss, grad


def object_l1_loss_and_grads(preds: Dict[int, np.ndarray],
                             targets: Dict[int, np.ndarray]
                             ) -> Tuple[float, Dict[int, np.ndarray]]:
    """Mean of per-object mean-L1 terms over the objects present in `preds`.

    Objects without predictions were skipped upstream (no target or not
    visible); the mean divides by the number actually compared, so it stays
    well-defined. Returns (loss, per-object aligned-token grads)."""
    if not preds:
        return 0.0, {}
    n = len(preds)
    total = 0.0
    grads: Dict[int, np.ndarray] = {}
    for m, pred in preds.items():
        term, g = l1_loss_and_grad(pred, targets[m], grad_scale=1.0 / n)
        total += term
        grads[m] = g
    return total / n, grads


def cross_entropy_and_grad(logits: np.ndarray, classes: np.ndarray
                           ) -> Tuple[float, np.ndarray]:
    """Softmax cross-entropy over (N, K) logits vs integer classes (N,).

    Returns mean loss and d(loss)/d(logits)."""
    if logits.ndim != 2 or classes.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} vs classes {classes.shape}")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    expz = np.exp(z)
    p = expz / expz.sum(axis=1, keepdims=True)
    eps = 1e-12
    loss = float(-np.mean(np.log(p[np.arange(n), classes] + eps)))
    d = p.copy()
    d[np.arange(n), classes] -= 1.0
    return loss, d / n
