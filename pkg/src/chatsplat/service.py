"""HTTP/JSON service: scene loading, rendering, selection, tokenization, and
chat routing for the browser viewer.

All GET endpoints are pure reads over an immutable engine snapshot; loading a
scene builds a new snapshot and swaps it atomically. The service never
mutates scene parameters (training is CLI-only). Feature-map visualization
uses a 3-component PCA basis fixed at load time so repeated renders are
byte-identical.

Environment: CHATSPLAT_ADDR, CHATSPLAT_SCENE, CHATSPLAT_CKPT,
CHATSPLAT_LLM_URL.
"""

from __future__ import annotations

import base64
import hashlib
import io
import os
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .chat import MockCodebook, load_codebook, mock_chat, proxy_chat
from .encoder import TokenGrid, concat_scene_tokens, encode, scale_shift
from .errors import ArgError, BoundsError, ChatSplatError, ProxyError, ShapeError
from .masking import MaskSet, mask_out, masks_to_png_bytes, select_object
from .rasterizer import render_tiled
from .training import TrainState, compute_masks, load_checkpoint

RENDER_CHANNELS = ("rgb", "feat_v_pca", "mask", "alpha")
LEVELS = ("view", "object", "scene")
_MASK_PALETTE = np.array([[230, 80, 60], [70, 160, 240], [90, 200, 120],
                          [240, 200, 70], [180, 100, 220], [240, 140, 60],
                          [100, 220, 220], [220, 120, 160]], np.uint8)


@dataclass
class Engine:
    """Immutable per-checkpoint snapshot served to all requests."""

    state: TrainState
    masks: List[MaskSet]
    pca_basis: np.ndarray  # (3, d_g)
    pca_mean: np.ndarray   # (d_g,)
    pca_lo: np.ndarray     # (3,)
    pca_hi: np.ndarray     # (3,)
    codebook: Optional[MockCodebook]
    checkpoint_id: str
    llm_url: Optional[str] = None
    llm_timeout: float = 60.0


def _fit_pca(state: TrainState, max_pixels: int = 50000):
    """Fixed 3-component basis over view-feature pixels of all cameras."""
    d_g = state.bundle.gaussians.d_g
    samples = []
    for cam in state.bundle.cameras:
        out = render_tiled(state.bundle.gaussians, cam, ("feat_v",))
        px = out.feat_v[out.alpha_acc >= 0.5]
        if px.size:
            samples.append(px)
    if not samples:
        return (np.zeros((3, d_g)), np.zeros(d_g), np.zeros(3), np.ones(3))
    data = np.concatenate(samples, axis=0)
    if data.shape[0] > max_pixels:
        stride = int(np.ceil(data.shape[0] / max_pixels))
        data = data[::stride]
    mean = data.mean(axis=0)
    centered = data - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    basis = np.zeros((3, d_g))
    basis[:min(3, vt.shape[0])] = vt[:3]
    proj = centered @ basis.T
    lo = proj.min(axis=0)
    hi = proj.max(axis=0)
    hi = np.where(hi - lo < 1e-9, lo + 1.0, hi)
    return basis, mean, lo, hi


def build_engine(scene_path: Optional[str] = None, checkpoint_path: Optional[str] = None,
                 codebook_path: Optional[str] = None, llm_url: Optional[str] = None,
                 llm_timeout: float = 60.0) -> Engine:
    path = checkpoint_path or scene_path
    if not path:
        raise ArgError("need a scene or checkpoint path")
    state = load_checkpoint(path)
    masks = compute_masks(state)
    basis, mean, lo, hi = _fit_pca(state)
    codebook = load_codebook(codebook_path) if codebook_path else None
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        digest.update(fh.read())
    return Engine(state=state, masks=masks, pca_basis=basis, pca_mean=mean,
                  pca_lo=lo, pca_hi=hi, codebook=codebook,
                  checkpoint_id=digest.hexdigest()[:16],
                  llm_url=llm_url, llm_timeout=llm_timeout)


def tokens_for(engine: Engine, level: str, cams: List[int],
               object_id: Optional[int] = None) -> TokenGrid:
    """The one token pipeline all chat surfaces share."""
    state = engine.state
    g = state.bundle.gaussians
    n_cams = len(state.bundle.cameras)
    if level not in LEVELS:
        raise ArgError(f"level must be one of {LEVELS}")
    for c in cams:
        if not 0 <= c < n_cams:
            raise KeyError(f"unknown camera {c}")
    cap = state.encoder.config.scene_token_cap
    if level == "view":
        cam = state.bundle.cameras[cams[0]]
        out = render_tiled(g, cam, ("feat_v",))
        grid, _ = encode(out.feat_v, state.encoder, "view")
        grid = scale_shift(grid, state.ss["view"])
    elif level == "object":
        if object_id is None:
            raise ArgError("object level needs object_id")
        if not 0 <= object_id < state.bundle.object_count:
            raise KeyError(f"unknown object {object_id}")
        cam = state.bundle.cameras[cams[0]]
        out = render_tiled(g, cam, ("feat_o",))
        masked = mask_out(out.feat_o, engine.masks[cams[0]].object_mask(object_id))
        grid, _ = encode(masked, state.encoder, "object")
        grid = scale_shift(grid, state.ss["object"])
    else:
        per_view = []
        for c in cams:
            cam = state.bundle.cameras[c]
            out = render_tiled(g, cam, ("feat_v",))
            vg, _ = encode(out.feat_v, state.encoder, "view")
            per_view.append(scale_shift(
                TokenGrid(tokens=vg.tokens, grid=vg.grid, level="scene"),
                state.ss["scene"]))
        grid = concat_scene_tokens(per_view, cap=cap, view_ids=list(cams))
    if grid.count > cap:
        raise ArgError(f"token payload of {grid.count} exceeds the cap {cap}")
    return grid


def build_object_codebook(engine: Engine, captions: Optional[List[str]] = None
                          ) -> MockCodebook:
    """One codebook entry per object: the mean token vector of its masked
    encoding in the first camera where it is visible."""
    state = engine.state
    n_obj = state.bundle.object_count
    if captions is None:
        captions = [f"synthetic object {m}" for m in range(n_obj)]
    if len(captions) != n_obj:
        raise ArgError(f"need {n_obj} captions, got {len(captions)}")
    vectors = []
    for m in range(n_obj):
        cam_id = 0
        for c in range(len(state.bundle.cameras)):
            if np.any(engine.masks[c].object_mask(m)):
                cam_id = c
                break
        grid = tokens_for(engine, "object", [cam_id], m)
        vectors.append(grid.tokens.mean(axis=0))
    return MockCodebook(vectors=np.asarray(vectors, np.float32), captions=list(captions))


def _to_png(img: np.ndarray) -> bytes:
    from PIL import Image

    pil = Image.fromarray(img)
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    return buf.getvalue()


def render_channel_png(engine: Engine, cam_id: int, channel: str) -> bytes:
    state = engine.state
    cam = state.bundle.cameras[cam_id]
    g = state.bundle.gaussians
    if channel == "rgb":
        out = render_tiled(g, cam, ("color",))
        img = (np.clip(out.color, 0, 1) * 255).astype(np.uint8)
    elif channel == "alpha":
        out = render_tiled(g, cam, ("color",))
        img = (np.clip(out.alpha_acc, 0, 1) * 255).astype(np.uint8)
    elif channel == "feat_v_pca":
        out = render_tiled(g, cam, ("feat_v",))
        proj = (out.feat_v - engine.pca_mean) @ engine.pca_basis.T
        scaled = (proj - engine.pca_lo) / (engine.pca_hi - engine.pca_lo)
        img = (np.clip(scaled, 0, 1) * 255).astype(np.uint8)
        img[out.alpha_acc < 0.5] = 0
    elif channel == "mask":
        labels = engine.masks[cam_id].label_map()
        img = np.zeros((cam.height, cam.width, 3), np.uint8)
        for m in range(state.bundle.object_count):
            img[labels == m] = _MASK_PALETTE[m % len(_MASK_PALETTE)]
    else:
        raise ArgError(f"channel must be one of {RENDER_CHANNELS}")
    return _to_png(img)


# ---------------------------------------------------------------------------
# HTTP layer

class LoadRequest(BaseModel):
    scene: Optional[str] = None
    checkpoint: Optional[str] = None
    codebook: Optional[str] = None


class SelectRequest(BaseModel):
    cam: int
    x: int
    y: int


class TokensRequest(BaseModel):
    level: str
    cam: Optional[int] = None
    cams: Optional[List[int]] = None
    object_id: Optional[int] = None


class ChatRequest(BaseModel):
    level: str
    cam: Optional[int] = None
    cams: Optional[List[int]] = None
    object_id: Optional[int] = None
    question: str
    backend: str = "mock"


def _request_cams(req) -> List[int]:
    if req.cams:
        return list(req.cams)
    if req.cam is not None:
        return [req.cam]
    raise ArgError("request needs a camera id (cam) or list (cams)")


def create_app(scene_path: Optional[str] = None, checkpoint_path: Optional[str] = None,
               codebook_path: Optional[str] = None, llm_url: Optional[str] = None,
               llm_timeout: float = 60.0) -> FastAPI:
    app = FastAPI(title="chatsplat")
    app.state.engine = None
    app.state.lock = threading.Lock()
    app.state.llm_url = llm_url or os.environ.get("CHATSPLAT_LLM_URL")
    app.state.llm_timeout = llm_timeout

    scene_path = scene_path or os.environ.get("CHATSPLAT_SCENE")
    checkpoint_path = checkpoint_path or os.environ.get("CHATSPLAT_CKPT")
    if scene_path or checkpoint_path:
        app.state.engine = build_engine(scene_path, checkpoint_path, codebook_path,
                                        app.state.llm_url, llm_timeout)

    @app.exception_handler(RequestValidationError)
    async def _validation_handler(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"detail": str(exc.errors())})

    def engine_or_409() -> Engine:
        eng = app.state.engine
        if eng is None:
            raise HTTPException(status_code=409, detail="no scene loaded")
        return eng

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "scene_loaded": app.state.engine is not None}

    @app.post("/scene/load")
    def scene_load(req: LoadRequest):
        if not (req.scene or req.checkpoint):
            raise HTTPException(status_code=400, detail="need scene or checkpoint path")
        try:
            eng = build_engine(req.scene, req.checkpoint, req.codebook,
                               app.state.llm_url, app.state.llm_timeout)
        except FileNotFoundError as exc:
            raise HTTPException(status_code=400, detail=f"file not found: {exc}")
        except ChatSplatError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        with app.state.lock:
            app.state.engine = eng
        return {"checkpoint_id": eng.checkpoint_id,
                "cameras": len(eng.state.bundle.cameras),
                "objects": eng.state.bundle.object_count}

    @app.get("/views")
    def views():
        eng = engine_or_409()
        return {"views": [{"id": i, "width": c.width, "height": c.height}
                          for i, c in enumerate(eng.state.bundle.cameras)]}

    @app.get("/render")
    def render(cam: int, channel: str = "rgb"):
        eng = engine_or_409()
        if not 0 <= cam < len(eng.state.bundle.cameras):
            raise HTTPException(status_code=404, detail=f"unknown camera {cam}")
        if channel not in RENDER_CHANNELS:
            raise HTTPException(status_code=400,
                                detail=f"channel must be one of {RENDER_CHANNELS}")
        return Response(content=render_channel_png(eng, cam, channel),
                        media_type="image/png")

    @app.post("/select")
    def select(req: SelectRequest):
        eng = engine_or_409()
        if not 0 <= req.cam < len(eng.state.bundle.cameras):
            raise HTTPException(status_code=404, detail=f"unknown camera {req.cam}")
        try:
            obj = select_object(eng.masks[req.cam], req.x, req.y)
        except BoundsError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        if obj is None:
            return {"object_id": None, "mask_png": None}
        png = masks_to_png_bytes(eng.masks[req.cam].object_mask(obj))
        return {"object_id": obj, "mask_png": base64.b64encode(png).decode("ascii")}

    def _tokens(eng: Engine, level: str, cams: List[int], object_id) -> TokenGrid:
        try:
            return tokens_for(eng, level, cams, object_id)
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except (ArgError, ShapeError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/tokens")
    def tokens(req: TokensRequest):
        eng = engine_or_409()
        try:
            cams = _request_cams(req)
        except ArgError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        grid = _tokens(eng, req.level, cams, req.object_id)
        arr = grid.tokens
        handle = hashlib.sha256(
            f"{eng.checkpoint_id}|{req.level}|{cams}|{req.object_id}".encode()
        ).hexdigest()[:16]
        return {"handle": handle, "t": int(grid.count), "d": int(arr.shape[1]),
                "level": req.level,
                "stats": {"mean": float(arr.mean()), "std": float(arr.std()),
                          "min": float(arr.min()), "max": float(arr.max())}}

    @app.post("/chat")
    def chat(req: ChatRequest):
        eng = engine_or_409()
        if req.level not in LEVELS:
            raise HTTPException(status_code=400, detail=f"level must be one of {LEVELS}")
        if req.backend not in ("mock", "proxy"):
            raise HTTPException(status_code=400, detail="backend must be mock or proxy")
        if req.level == "object" and req.object_id is None:
            raise HTTPException(status_code=400, detail="object level needs object_id")
        try:
            cams = _request_cams(req)
        except ArgError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        grid = _tokens(eng, req.level, cams, req.object_id)
        if req.backend == "mock":
            if eng.codebook is None:
                raise HTTPException(status_code=400,
                                    detail="mock backend needs a loaded codebook")
            answer = mock_chat(grid, req.question, eng.codebook)
        else:
            url = eng.llm_url or app.state.llm_url
            if not url:
                raise HTTPException(status_code=400,
                                    detail="proxy backend needs CHATSPLAT_LLM_URL")
            try:
                answer = proxy_chat(grid, req.question, url,
                                    timeout=app.state.llm_timeout)
            except ProxyError as exc:
                raise HTTPException(status_code=502, detail=str(exc))
        return {"answer": answer, "tokens_used": int(grid.count), "backend": req.backend}

    return app


def main() -> None:
    import uvicorn

    addr = os.environ.get("CHATSPLAT_ADDR", "127.0.0.1:8000")
    host, _, port = addr.partition(":")
    uvicorn.run(create_app(), host=host or "127.0.0.1", port=int(port or 8000))


if __name__ == "__main__":
    main()
