"""Object masks from composited identity maps, MaskOut, and click selection.

The composited identity map is classified per pixel by a learned linear map
into M+1 classes. Class 0 is reserved for background; object m occupies
class m+1. Pixels whose accumulated opacity falls below the threshold are
forced to background so empty space never adopts an object id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import BoundsError, ConfigError, ShapeError

ALPHA_BACKGROUND_THRESHOLD = 0.5


@dataclass
class IdentityClassifier:
    weight: np.ndarray  # (M+1, d_id)
    bias: np.ndarray    # (M+1,)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def init(cls, n_objects: int, d_id: int) -> "IdentityClassifier":
        return cls(weight=np.zeros((n_objects + 1, d_id), np.float32),
                   bias=np.zeros(n_objects + 1, np.float32))


@dataclass
class MaskSet:
    """Per-pixel class probabilities and one-hot masks over M+1 classes
    (class 0 = background, class m+1 = object m)."""

    masks: np.ndarray   # (M+1, H, W) uint8 one-hot argmax
    probs: np.ndarray   # (M+1, H, W) float64, sums to 1 per pixel
    classifier: IdentityClassifier

    @property
    def n_objects(self) -> int:
        return self.masks.shape[0] - 1

    def object_mask(self, m: int) -> np.ndarray:
        """Binary H x W mask of object m (0-based object id)."""
        if not 0 <= m < self.n_objects:
            raise BoundsError(f"object id {m} outside [0, {self.n_objects})")
        return self.masks[m + 1]

    def label_map(self) -> np.ndarray:
        """Object id per pixel, -1 for background."""
        return np.argmax(self.probs, axis=0).astype(np.int32) - 1


def classify_identity(identity: np.ndarray, classifier: IdentityClassifier,
                      alpha_acc: Optional[np.ndarray] = None,
                      n_objects: Optional[int] = None,
                      alpha_threshold: float = ALPHA_BACKGROUND_THRESHOLD) -> MaskSet:
    """Softmax-classify an (H, W, d_id) identity map into a MaskSet.

    Low-opacity pixels (alpha_acc < alpha_threshold) get a hard background
    assignment, probabilities included, so the one-hot/argmax invariant holds.
    """
    if identity.ndim != 3:
        raise ShapeError(f"identity map must be (H, W, d_id), got {identity.shape}")
    h, w, d_id = identity.shape
    if classifier.weight.shape[1] != d_id:
        raise ConfigError(f"classifier expects d_id={classifier.weight.shape[1]}, "
                          f"identity map has {d_id}")
    if n_objects is not None and classifier.n_classes != n_objects + 1:
        raise ConfigError(f"classifier has {classifier.n_classes} classes, "
                          f"expected {n_objects + 1} (background + {n_objects} objects)")
    logits = (identity.reshape(-1, d_id).astype(np.float64)
              @ classifier.weight.T.astype(np.float64)
              + classifier.bias.astype(np.float64))
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    probs = p.T.reshape(classifier.n_classes, h, w)
    if alpha_acc is not None:
        if alpha_acc.shape != (h, w):
            raise ShapeError("alpha_acc shape does not match identity map")
        bg = alpha_acc < alpha_threshold
        probs[:, bg] = 0.0
        probs[0, bg] = 1.0
    cls = np.argmax(probs, axis=0)
    masks = np.zeros_like(probs, dtype=np.uint8)
    np.put_along_axis(masks, cls[None], 1, axis=0)
    return MaskSet(masks=masks, probs=probs, classifier=classifier)


def mask_out(feat: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero a feature map outside a binary mask (broadcast over channels).

    Keeps the full image shape so downstream tokenization sees a fixed grid.
    """
    if feat.ndim != 3:
        raise ShapeError(f"feature map must be (H, W, D), got {feat.shape}")
    if mask.shape != feat.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match map {feat.shape[:2]}")
    return feat * np.asarray(mask, feat.dtype)[:, :, None]


def select_object(mask_set: MaskSet, x: int, y: int) -> Optional[int]:
    """Object id under pixel (x, y), or None for the background class."""
    n_cls, h, w = mask_set.masks.shape
    if not (0 <= x < w and 0 <= y < h):
        raise BoundsError(f"pixel ({x}, {y}) outside {w}x{h} image")
    cls = int(np.argmax(mask_set.probs[:, y, x]))
    return None if cls == 0 else cls - 1


def masks_to_png_bytes(mask: np.ndarray) -> bytes:
    """Binary mask to an 8-bit grayscale PNG (0/255)."""
    import io

    from PIL import Image

    img = Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()
