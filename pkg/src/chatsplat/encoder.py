"""Feature-map encoder: pointwise dimension lifting followed by a
non-overlapping patch-convolution tokenizer, plus the learnable per-token
scale-shift that aligns tokens to the target embedding distribution.

The same encoder weights serve view- and object-level maps; each level keeps
its own ScaleShift instance because token statistics differ between levels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ArgError, ShapeError

ACTIVATIONS = ("tanh", "identity")
SCENE_TOKEN_CAP_DEFAULT = 4096


@dataclass
class EncoderConfig:
    d_g: int = 32
    d_mid: int = 256
    d_tok: int = 64
    patch: int = 14
    activation: str = "tanh"
    scene_token_cap: int = SCENE_TOKEN_CAP_DEFAULT


@dataclass
class EncoderParams:
    """Two pointwise lift layers (nonlinearity between) and the P x P
    stride-P tokenizer. Tokenizer weight is kept flattened as
    (d_tok, P*P*d_mid) with (row, col, channel) patch ordering."""

    config: EncoderConfig
    lift1_w: np.ndarray  # (d_mid, d_g)
    lift1_b: np.ndarray  # (d_mid,)
    lift2_w: np.ndarray  # (d_mid, d_mid)
    lift2_b: np.ndarray  # (d_mid,)
    tok_w: np.ndarray    # (d_tok, P*P*d_mid)
    tok_b: np.ndarray    # (d_tok,)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int = 0) -> "EncoderParams":
        if config.activation not in ACTIVATIONS:
            raise ArgError(f"activation must be one of {ACTIVATIONS}")
        rng = np.random.default_rng(seed)
        c = config
        return cls(
            config=c,
            lift1_w=(rng.standard_normal((c.d_mid, c.d_g)) / np.sqrt(c.d_g)).astype(np.float32),
            lift1_b=np.zeros(c.d_mid, np.float32),
            lift2_w=(rng.standard_normal((c.d_mid, c.d_mid)) / np.sqrt(c.d_mid)).astype(np.float32),
            lift2_b=np.zeros(c.d_mid, np.float32),
            tok_w=(rng.standard_normal((c.d_tok, c.patch * c.patch * c.d_mid))
                   / np.sqrt(c.patch * c.patch * c.d_mid)).astype(np.float32),
            tok_b=np.zeros(c.d_tok, np.float32),
        )

    def param_dict(self) -> Dict[str, np.ndarray]:
        return {"enc.lift1.w": self.lift1_w, "enc.lift1.b": self.lift1_b,
                "enc.lift2.w": self.lift2_w, "enc.lift2.b": self.lift2_b,
                "enc.tok.w": self.tok_w, "enc.tok.b": self.tok_b}

    def to_records(self) -> Dict[str, np.ndarray]:
        c = self.config
        recs = dict(self.param_dict())
        # rank-4 on disk is self-describing; flattened in memory for matmul
        recs["enc.tok.w"] = self.tok_w.reshape(c.d_tok, c.patch, c.patch, c.d_mid)
        recs["cfg.d_g"] = np.array([c.d_g], np.uint32)
        recs["cfg.d_mid"] = np.array([c.d_mid], np.uint32)
        recs["cfg.d_tok"] = np.array([c.d_tok], np.uint32)
        recs["cfg.patch"] = np.array([c.patch], np.uint32)
        recs["cfg.activation"] = np.array([ACTIVATIONS.index(c.activation)], np.uint32)
        recs["cfg.scene_token_cap"] = np.array([c.scene_token_cap], np.uint32)
        return recs

    @classmethod
    def from_records(cls, recs: Dict[str, np.ndarray]) -> "EncoderParams":
        c = EncoderConfig(
            d_g=int(recs["cfg.d_g"][0]), d_mid=int(recs["cfg.d_mid"][0]),
            d_tok=int(recs["cfg.d_tok"][0]), patch=int(recs["cfg.patch"][0]),
            activation=ACTIVATIONS[int(recs["cfg.activation"][0])],
            scene_token_cap=int(recs["cfg.scene_token_cap"][0]))
        return cls(
            config=c,
            lift1_w=np.array(recs["enc.lift1.w"], np.float32),
            lift1_b=np.array(recs["enc.lift1.b"], np.float32),
            lift2_w=np.array(recs["enc.lift2.w"], np.float32),
            lift2_b=np.array(recs["enc.lift2.b"], np.float32),
            tok_w=np.array(recs["enc.tok.w"], np.float32).reshape(
                c.d_tok, c.patch * c.patch * c.d_mid),
            tok_b=np.array(recs["enc.tok.b"], np.float32),
        )


@dataclass
class TokenGrid:
    tokens: np.ndarray            # (T, d_tok) float64
    grid: Tuple[int, int]         # (rows, cols) of the patch layout
    level: str                    # "view" | "object" | "scene"
    view_ids: Optional[List[int]] = None  # populated for scene-level grids

    @property
    def count(self) -> int:
        return self.tokens.shape[0]


@dataclass
class ScaleShift:
    a: np.ndarray  # (T, d_tok) learnable scale
    b: np.ndarray  # (T, d_tok) learnable shift

    @classmethod
    def identity(cls, t: int, d_tok: int) -> "ScaleShift":
        return cls(a=np.ones((t, d_tok), np.float32), b=np.zeros((t, d_tok), np.float32))


@dataclass
class EncodeCache:
    """Forward activations kept for the backward pass."""

    x: np.ndarray        # (H*W, d_g) input pixels
    a1: np.ndarray       # (H*W, d_mid) post-activation of the first lift
    patches: np.ndarray  # (T, P*P*d_mid)
    shape: Tuple[int, int]


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(z) if kind == "tanh" else z


def _act_grad_from_output(a: np.ndarray, kind: str) -> np.ndarray:
    # derivative expressed through the cached activation output: tanh' = 1 - tanh^2
    if kind == "tanh":
        return 1.0 - a * a
    return np.ones_like(a)


def _to_patches(y: np.ndarray, h: int, w: int, p: int, d: int) -> np.ndarray:
    hp, wp = h // p, w // p
    return (y.reshape(hp, p, wp, p, d).transpose(0, 2, 1, 3, 4)
            .reshape(hp * wp, p * p * d))


def _from_patches(dp: np.ndarray, h: int, w: int, p: int, d: int) -> np.ndarray:
    hp, wp = h // p, w // p
    return (dp.reshape(hp, wp, p, p, d).transpose(0, 2, 1, 3, 4)
            .reshape(h * w, d))


def encode(feat: np.ndarray, params: EncoderParams, level: str = "view",
           want_cache: bool = False) -> Tuple[TokenGrid, Optional[EncodeCache]]:
    """Lift pointwise, then tokenize each non-overlapping P x P patch.

    `feat` is (H, W, d_g) with H and W multiples of the patch size. Returns
    the pre-alignment token grid and, when requested, the cached activations.
    """
    c = params.config
    if feat.ndim != 3 or feat.shape[2] != c.d_g:
        raise ShapeError(f"expected (H, W, {c.d_g}) feature map, got {feat.shape}")
    h, w = feat.shape[:2]
    if h % c.patch or w % c.patch:
        raise ShapeError(f"{h}x{w} map is not a multiple of patch size {c.patch}")
    x = feat.reshape(h * w, c.d_g).astype(np.float64)
    z1 = x @ params.lift1_w.T.astype(np.float64) + params.lift1_b.astype(np.float64)
    a1 = _act(z1, c.activation)
    z2 = a1 @ params.lift2_w.T.astype(np.float64) + params.lift2_b.astype(np.float64)
    patches = _to_patches(z2, h, w, c.patch, c.d_mid)
    tokens = patches @ params.tok_w.T.astype(np.float64) + params.tok_b.astype(np.float64)
    grid = TokenGrid(tokens=tokens, grid=(h // c.patch, w // c.patch), level=level)
    cache = EncodeCache(x=x, a1=a1, patches=patches, shape=(h, w)) if want_cache else None
    return grid, cache


def encode_backward(d_tokens: np.ndarray, params: EncoderParams, cache: EncodeCache,
                    grads: Optional[Dict[str, np.ndarray]] = None
                    ) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """Backpropagate token gradients to the input map and encoder parameters.

    Parameter gradients accumulate into `grads` (created if absent) under the
    same keys as `EncoderParams.param_dict`. Returns (d_feat, grads) with
    d_feat shaped like the original (H, W, d_g) input.
    """
    from .errors import StateError

    if cache is None:
        raise StateError("encode_backward needs the cache from encode(want_cache=True)")
    c = params.config
    h, w = cache.shape
    if grads is None:
        grads = {}

    def acc(key: str, val: np.ndarray) -> None:
        if key in grads:
            grads[key] += val
        else:
            grads[key] = val

    acc("enc.tok.w", d_tokens.T @ cache.patches)
    acc("enc.tok.b", d_tokens.sum(axis=0))
    d_patches = d_tokens @ params.tok_w.astype(np.float64)
    d_z2 = _from_patches(d_patches, h, w, c.patch, c.d_mid)
    acc("enc.lift2.w", d_z2.T @ cache.a1)
    acc("enc.lift2.b", d_z2.sum(axis=0))
    d_a1 = d_z2 @ params.lift2_w.astype(np.float64)
    d_z1 = d_a1 * _act_grad_from_output(cache.a1, c.activation)
    acc("enc.lift1.w", d_z1.T @ cache.x)
    acc("enc.lift1.b", d_z1.sum(axis=0))
    d_x = d_z1 @ params.lift1_w.astype(np.float64)
    return d_x.reshape(h, w, c.d_g), grads


def scale_shift(grid: TokenGrid, ss: ScaleShift) -> TokenGrid:
    """Elementwise affine alignment: tokens * a + b."""
    if ss.a.shape != grid.tokens.shape or ss.b.shape != grid.tokens.shape:
        raise ShapeError(f"scale-shift {ss.a.shape} does not match tokens "
                         f"{grid.tokens.shape}")
    out = grid.tokens * ss.a.astype(np.float64) + ss.b.astype(np.float64)
    return TokenGrid(tokens=out, grid=grid.grid, level=grid.level, view_ids=grid.view_ids)


def scale_shift_backward(d_aligned: np.ndarray, grid: TokenGrid, ss: ScaleShift
                         ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (d_tokens, d_a, d_b) for upstream gradient d_aligned."""
    if d_aligned.shape != grid.tokens.shape:
        raise ShapeError("upstream gradient shape mismatch")
    d_a = d_aligned * grid.tokens
    d_b = d_aligned.copy()
    d_tokens = d_aligned * ss.a.astype(np.float64)
    return d_tokens, d_a, d_b


def concat_scene_tokens(per_view: List[TokenGrid], cap: int = SCENE_TOKEN_CAP_DEFAULT,
                        view_ids: Optional[List[int]] = None) -> TokenGrid:
    """Row-concatenate per-view token grids into one scene-level grid.

    When the total would exceed `cap`, whole views are kept at a uniform
    stride (indices floor(i*n/k) for k retained views) so coverage stays
    spread across the camera ring.
    """
    if not per_view:
        raise ArgError("concat_scene_tokens needs at least one view")
    d = per_view[0].tokens.shape[1]
    for gdx, g in enumerate(per_view):
        if g.tokens.shape[1] != d:
            raise ArgError(f"view {gdx} has token dim {g.tokens.shape[1]}, expected {d}")
    n = len(per_view)
    ids = list(view_ids) if view_ids is not None else list(range(n))
    total = sum(g.count for g in per_view)
    if total > cap:
        t_each = per_view[0].count
        keep = cap // t_each if t_each else 0
        if keep < 1:
            raise ArgError(f"a single view's {t_each} tokens already exceed the cap {cap}")
        sel = [int(np.floor(i * n / keep)) for i in range(keep)]
        per_view = [per_view[i] for i in sel]
        ids = [ids[i] for i in sel]
    tokens = np.concatenate([g.tokens for g in per_view], axis=0)
    return TokenGrid(tokens=tokens, grid=per_view[0].grid, level="scene", view_ids=ids)
