"""Two-stage optimization driver.

Stage 1 fits identity features and the per-pixel classifier with
cross-entropy against label images. Stage 2 fits the two language feature
arrays, the encoder, and the per-level scale-shift with the combined
view + object token loss; geometry, opacity and color stay frozen (asserted
by hash). Camera order is a deterministic round-robin, so a run is a pure
function of (checkpointed state, config), which is what makes
checkpoint/resume bitwise exact.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional

import numpy as np

from . import cstf
from .backward import (cross_entropy_and_grad, grad_render_features,
                       l1_loss_and_grad)
from .encoder import (EncoderConfig, EncoderParams, ScaleShift, encode,
                      encode_backward, scale_shift, scale_shift_backward)
from .errors import ConfigError, StateError
from .masking import IdentityClassifier, MaskSet, classify_identity, mask_out
from .optim import make_optimizer
from .rasterizer import RenderSettings, render_tiled
from .scene import SceneBundle, bundle_records, bundle_from_records, geometry_digest
from .teacher import TeacherTokens

SS_LEVELS = ("view", "object", "scene")


@dataclass
class TrainConfig:
    lr: float = 0.05
    iterations: int = 500
    batch: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_normalization: str = "mean"
    optimizer: str = "adam"
    seed: int = 0
    checkpoint_every: int = 0
    learn_scale_shift: bool = True
    alpha_threshold: float = 0.5
    contrib_cap: int = 256

    def validate(self) -> None:
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")


@dataclass
class LossReport:
    step: int
    loss_view: float = 0.0
    loss_object: float = 0.0
    loss_total: float = 0.0
    identity_ce: float = 0.0
    wall_ms: float = 0.0
    grad_norm: float = 0.0


def write_loss_csv(reports: List[LossReport], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(asdict(LossReport(0)).keys()))
        writer.writeheader()
        for r in reports:
            writer.writerow(asdict(r))


@dataclass
class TrainState:
    bundle: SceneBundle
    encoder: EncoderParams
    ss: Dict[str, ScaleShift]
    classifier: IdentityClassifier
    lang_opt: object = None
    id_opt: object = None
    lang_step: int = 0
    id_step: int = 0
    masks_ready: bool = False
    restore_records: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False)

    @property
    def tokens_per_view(self) -> int:
        cam = self.bundle.cameras[0]
        p = self.encoder.config.patch
        return (cam.height // p) * (cam.width // p)


def make_train_state(bundle: SceneBundle, enc_config: Optional[EncoderConfig] = None,
                     seed: int = 0) -> TrainState:
    cfg = enc_config or EncoderConfig(d_g=bundle.gaussians.d_g)
    if cfg.d_g != bundle.gaussians.d_g:
        raise ConfigError(f"encoder d_g={cfg.d_g} but scene features have "
                          f"{bundle.gaussians.d_g} channels")
    if not bundle.cameras:
        raise ConfigError("scene bundle has no cameras")
    w0, h0 = bundle.cameras[0].width, bundle.cameras[0].height
    for cam in bundle.cameras:
        cam.validate(patch_size=cfg.patch)
        if (cam.width, cam.height) != (w0, h0):
            raise ConfigError("all cameras must share one resolution so the "
                              "per-level scale-shift shape is fixed")
    t = (h0 // cfg.patch) * (w0 // cfg.patch)
    # small random classifier init breaks the zero-identity/zero-weight
    # symmetry so gradients reach the identity features from step one
    classifier = IdentityClassifier.init(bundle.object_count, bundle.gaussians.d_id)
    rng = np.random.default_rng(seed + 1)
    classifier.weight[...] = rng.normal(0.0, 0.2, classifier.weight.shape).astype(np.float32)
    return TrainState(
        bundle=bundle,
        encoder=EncoderParams.init(cfg, seed=seed),
        ss={lvl: ScaleShift.identity(t, cfg.d_tok) for lvl in SS_LEVELS},
        classifier=classifier,
    )


# ---------------------------------------------------------------------------
# Stage 1: identity features + classifier

def _identity_params(state: TrainState) -> Dict[str, np.ndarray]:
    return {"gauss.identity": state.bundle.gaussians.identity,
            "cls.w": state.classifier.weight,
            "cls.b": state.classifier.bias}


def train_identity(state: TrainState, cfg: TrainConfig) -> List[LossReport]:
    """Fit identity features and the classifier with per-pixel cross-entropy."""
    cfg.validate()
    bundle = state.bundle
    if bundle.label_images is None:
        raise ConfigError("train_identity needs label images on the scene bundle")
    params = _identity_params(state)
    if state.id_opt is None:
        state.id_opt = make_optimizer(cfg.optimizer, params, cfg.lr,
                                      cfg.beta1, cfg.beta2, cfg.eps)
        if state.restore_records:
            state.id_opt.load_state_records("opt.id", state.restore_records)
    opt = state.id_opt
    settings = RenderSettings(contrib_cap=cfg.contrib_cap)
    g = bundle.gaussians
    n_cams = len(bundle.cameras)
    reports: List[LossReport] = []
    for _ in range(cfg.iterations):
        t0 = time.perf_counter()
        grads_acc: Dict[str, np.ndarray] = {}
        ce_total = 0.0
        for b in range(cfg.batch):
            cam_i = (state.id_step * cfg.batch + b) % n_cams
            cam = bundle.cameras[cam_i]
            out = render_tiled(g, cam, ("identity",), settings, record_contrib=True)
            idmap = out.identity.reshape(-1, g.d_id)
            logits = (idmap @ state.classifier.weight.T.astype(np.float64)
                      + state.classifier.bias.astype(np.float64))
            classes = (bundle.label_images[cam_i].astype(np.int64) + 1).reshape(-1)
            ce, d_logits = cross_entropy_and_grad(logits, classes)
            ce_total += ce
            step_grads = {
                "cls.w": d_logits.T @ idmap,
                "cls.b": d_logits.sum(axis=0),
            }
            d_idmap = (d_logits @ state.classifier.weight.astype(np.float64)
                       ).reshape(cam.height, cam.width, g.d_id)
            step_grads["gauss.identity"] = grad_render_features(
                out.contrib, d_idmap, g.count, tile=settings.tile)
            for k, v in step_grads.items():
                grads_acc[k] = grads_acc.get(k, 0) + v / cfg.batch
        opt.step(grads_acc)
        state.id_step += 1
        gnorm = float(np.sqrt(sum(float(np.sum(v * v)) for v in grads_acc.values())))
        reports.append(LossReport(step=state.id_step, identity_ce=ce_total / cfg.batch,
                                  wall_ms=(time.perf_counter() - t0) * 1e3,
                                  grad_norm=gnorm))
    if state.id_step > 0:
        state.masks_ready = True
    return reports


def plant_classifier(state: TrainState, classifier: IdentityClassifier) -> None:
    """Install an externally built classifier and mark masks usable."""
    state.classifier = classifier
    state.masks_ready = True


def compute_masks(state: TrainState, alpha_threshold: float = 0.5) -> List[MaskSet]:
    """Per-camera masks from the current identity features and classifier."""
    out = []
    for cam in state.bundle.cameras:
        rendered = render_tiled(state.bundle.gaussians, cam, ("identity",))
        out.append(classify_identity(rendered.identity, state.classifier,
                                     alpha_acc=rendered.alpha_acc,
                                     n_objects=state.bundle.object_count,
                                     alpha_threshold=alpha_threshold))
    return out


# ---------------------------------------------------------------------------
# Stage 2: language features + encoder + scale-shift

_LANG_PARAM_ORDER = ("gauss.feat_view", "gauss.feat_object",
                     "enc.lift1.w", "enc.lift1.b", "enc.lift2.w", "enc.lift2.b",
                     "enc.tok.w", "enc.tok.b",
                     "ss.view.a", "ss.view.b", "ss.object.a", "ss.object.b")


def _language_params(state: TrainState, learn_scale_shift: bool) -> Dict[str, np.ndarray]:
    g = state.bundle.gaussians
    enc = state.encoder
    pool = {"gauss.feat_view": g.feat_view, "gauss.feat_object": g.feat_object,
            **enc.param_dict(),
            "ss.view.a": state.ss["view"].a, "ss.view.b": state.ss["view"].b,
            "ss.object.a": state.ss["object"].a, "ss.object.b": state.ss["object"].b}
    keys = [k for k in _LANG_PARAM_ORDER if learn_scale_shift or not k.startswith("ss.")]
    return {k: pool[k] for k in keys}


def _check_teacher(state: TrainState, teacher: TeacherTokens) -> None:
    t_expect = state.tokens_per_view
    d_expect = state.encoder.config.d_tok
    for name, arr in [(f"view/{c}", a) for c, a in teacher.view_targets.items()] + \
                     [(f"obj/{c}/{m}", a) for (c, m), a in teacher.object_targets.items()]:
        if arr.shape != (t_expect, d_expect):
            raise ConfigError(f"teacher {name} has shape {arr.shape}, encoder "
                              f"produces ({t_expect}, {d_expect})")
    n_cams = len(state.bundle.cameras)
    for c in teacher.view_targets:
        if not 0 <= c < n_cams:
            raise ConfigError(f"teacher references camera {c}, scene has {n_cams}")


def language_loss_step(state: TrainState, teacher: TeacherTokens, cam_id: int,
                       cfg: TrainConfig, masks: List[Optional[MaskSet]],
                       want_grads: bool = True):
    """One camera's forward (and optional backward) pass of the combined loss.

    Returns (loss_view, loss_object, grads) where grads maps parameter names
    to float64 arrays; empty when want_grads is False.
    """
    bundle = state.bundle
    g = bundle.gaussians
    cam = bundle.cameras[cam_id]
    enc = state.encoder
    norm = cfg.loss_normalization
    settings = RenderSettings(contrib_cap=cfg.contrib_cap)
    out = render_tiled(g, cam, ("feat_v", "feat_o"), settings, record_contrib=want_grads)

    grads: Dict[str, np.ndarray] = {}
    loss_view = 0.0
    if cam_id in teacher.view_targets:
        grid_v, cache_v = encode(out.feat_v, enc, "view", want_cache=want_grads)
        aligned_v = scale_shift(grid_v, state.ss["view"])
        loss_view, d_aligned = l1_loss_and_grad(
            aligned_v.tokens, teacher.view_targets[cam_id], normalization=norm)
        if want_grads:
            d_tok, d_a, d_b = scale_shift_backward(d_aligned, grid_v, state.ss["view"])
            if cfg.learn_scale_shift:
                grads["ss.view.a"] = d_a
                grads["ss.view.b"] = d_b
            d_feat_v, grads = encode_backward(d_tok, enc, cache_v, grads)
            grads["gauss.feat_view"] = grad_render_features(
                out.contrib, d_feat_v, g.count, tile=settings.tile)

    object_ids = teacher.objects_for(cam_id)
    loss_object = 0.0
    if object_ids:
        mask_set = masks[cam_id]
        if mask_set is None:
            raise StateError("object targets exist but no masks are available; "
                             "run stage-1 identity training first")
        n_vis = len(object_ids)
        d_feat_o_map = None
        for m in object_ids:
            mask = mask_set.object_mask(m)
            masked = mask_out(out.feat_o, mask)
            grid_o, cache_o = encode(masked, enc, "object", want_cache=want_grads)
            aligned_o = scale_shift(grid_o, state.ss["object"])
            term, d_aligned = l1_loss_and_grad(
                aligned_o.tokens, teacher.object_targets[(cam_id, m)],
                grad_scale=1.0 / n_vis, normalization=norm)
            loss_object += term / n_vis
            if not want_grads:
                continue
            d_tok, d_a, d_b = scale_shift_backward(d_aligned, grid_o, state.ss["object"])
            if cfg.learn_scale_shift:
                grads["ss.object.a"] = grads.get("ss.object.a", 0) + d_a
                grads["ss.object.b"] = grads.get("ss.object.b", 0) + d_b
            d_masked, grads = encode_backward(d_tok, enc, cache_o, grads)
            contribution = mask_out(d_masked, mask)
            d_feat_o_map = contribution if d_feat_o_map is None else d_feat_o_map + contribution
        if want_grads and d_feat_o_map is not None:
            grads["gauss.feat_object"] = grad_render_features(
                out.contrib, d_feat_o_map, g.count, tile=settings.tile)
    return loss_view, loss_object, grads


def train_language(state: TrainState, teacher: TeacherTokens, cfg: TrainConfig,
                   checkpoint_dir: Optional[str] = None) -> List[LossReport]:
    """Stage-2 training; geometry/opacity/color are asserted unchanged."""
    cfg.validate()
    _check_teacher(state, teacher)
    bundle = state.bundle
    digest_before = geometry_digest(bundle.gaussians)
    train_cams = sorted(set(teacher.view_targets)
                        | {c for (c, _m) in teacher.object_targets})
    if not train_cams:
        raise ConfigError("teacher has no targets; nothing to train")

    masks: List[Optional[MaskSet]] = [None] * len(bundle.cameras)
    if teacher.object_targets:
        if not state.masks_ready:
            raise StateError("object targets exist but stage-1 masks are not "
                             "available; run identity training first")
        masks = list(compute_masks(state, cfg.alpha_threshold))

    params = _language_params(state, cfg.learn_scale_shift)
    if state.lang_opt is None:
        state.lang_opt = make_optimizer(cfg.optimizer, params, cfg.lr,
                                        cfg.beta1, cfg.beta2, cfg.eps)
        if state.restore_records:
            state.lang_opt.load_state_records("opt.lang", state.restore_records)
    opt = state.lang_opt

    reports: List[LossReport] = []
    for _ in range(cfg.iterations):
        t0 = time.perf_counter()
        grads_acc: Dict[str, np.ndarray] = {}
        lv = lo = 0.0
        for b in range(cfg.batch):
            cam_id = train_cams[(state.lang_step * cfg.batch + b) % len(train_cams)]
            loss_v, loss_o, grads = language_loss_step(
                state, teacher, cam_id, cfg, masks, want_grads=True)
            lv += loss_v / cfg.batch
            lo += loss_o / cfg.batch
            for k, v in grads.items():
                grads_acc[k] = grads_acc.get(k, 0) + v / cfg.batch
        opt.step(grads_acc)
        state.lang_step += 1
        gnorm = float(np.sqrt(sum(float(np.sum(np.asarray(v) ** 2))
                                  for v in grads_acc.values())))
        reports.append(LossReport(step=state.lang_step, loss_view=lv, loss_object=lo,
                                  loss_total=lv + lo,
                                  wall_ms=(time.perf_counter() - t0) * 1e3,
                                  grad_norm=gnorm))
        if (checkpoint_dir and cfg.checkpoint_every
                and state.lang_step % cfg.checkpoint_every == 0):
            save_checkpoint(state, f"{checkpoint_dir}/ckpt_{state.lang_step:06d}.cstf")
    if geometry_digest(bundle.gaussians) != digest_before:
        raise StateError("geometry changed during language training; "
                         "frozen-parameter contract violated")
    return reports


def total_language_loss(state: TrainState, teacher: TeacherTokens, cfg: TrainConfig,
                        masks: Optional[List[Optional[MaskSet]]] = None) -> float:
    """Combined loss averaged over every camera with targets (forward only)."""
    if masks is None:
        masks = (list(compute_masks(state, cfg.alpha_threshold))
                 if teacher.object_targets else [None] * len(state.bundle.cameras))
    cams = sorted(set(teacher.view_targets) | {c for (c, _m) in teacher.object_targets})
    total = 0.0
    for cam_id in cams:
        lv, lo, _ = language_loss_step(state, teacher, cam_id, cfg, masks,
                                       want_grads=False)
        total += (lv + lo) / len(cams)
    return total


# ---------------------------------------------------------------------------
# Evaluation and checkpoints

def iou(pred: np.ndarray, truth: np.ndarray) -> float:
    p = np.asarray(pred, bool)
    t = np.asarray(truth, bool)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def evaluate(state: TrainState, teacher: Optional[TeacherTokens] = None,
             cams: Optional[List[int]] = None, cfg: Optional[TrainConfig] = None
             ) -> Dict:
    """Deterministic metric report: token L1 per level plus mask IoU."""
    cfg = cfg or TrainConfig()
    bundle = state.bundle
    cam_ids = cams if cams is not None else list(range(len(bundle.cameras)))
    masks = list(compute_masks(state, cfg.alpha_threshold))
    report: Dict = {"view_l1": {}, "object_l1": {}, "mask_iou": {}}
    if teacher is not None:
        for cam_id in cam_ids:
            lv, lo, _ = language_loss_step(state, teacher, cam_id, cfg, masks,
                                           want_grads=False)
            if cam_id in teacher.view_targets:
                report["view_l1"][str(cam_id)] = lv
            if teacher.objects_for(cam_id):
                report["object_l1"][str(cam_id)] = lo
        vs = list(report["view_l1"].values())
        os_ = list(report["object_l1"].values())
        report["view_l1_mean"] = float(np.mean(vs)) if vs else 0.0
        report["object_l1_mean"] = float(np.mean(os_)) if os_ else 0.0
    if bundle.label_images is not None:
        per_obj: Dict[str, List[float]] = {}
        for cam_id in cam_ids:
            labels = bundle.label_images[cam_id]
            for m in range(bundle.object_count):
                if not np.any(labels == m):
                    continue
                val = iou(masks[cam_id].object_mask(m), labels == m)
                per_obj.setdefault(str(m), []).append(val)
        report["mask_iou"] = {m: float(np.mean(v)) for m, v in sorted(per_obj.items())}
        if report["mask_iou"]:
            report["mask_iou_mean"] = float(np.mean(list(report["mask_iou"].values())))
    return report


def checkpoint_records(state: TrainState) -> Dict[str, np.ndarray]:
    recs = bundle_records(state.bundle)
    recs.update(state.encoder.to_records())
    for lvl in SS_LEVELS:
        recs[f"ss.{lvl}.a"] = state.ss[lvl].a
        recs[f"ss.{lvl}.b"] = state.ss[lvl].b
    recs["cls.w"] = state.classifier.weight
    recs["cls.b"] = state.classifier.bias
    recs["train.lang_step"] = np.array([state.lang_step], np.uint32)
    recs["train.id_step"] = np.array([state.id_step], np.uint32)
    recs["train.masks_ready"] = np.array([int(state.masks_ready)], np.uint32)
    for prefix, opt in (("opt.lang", state.lang_opt), ("opt.id", state.id_opt)):
        if opt is not None:
            recs.update(opt.state_records(prefix))
        elif state.restore_records:
            # a stage that never ran this session keeps its restored state
            recs.update({k: v for k, v in state.restore_records.items()
                         if k.startswith(prefix + ".")})
    return recs


def save_checkpoint(state: TrainState, path: str) -> None:
    cstf.write_records(path, checkpoint_records(state))


def load_checkpoint(path: str) -> TrainState:
    """Rebuild a TrainState from a checkpoint; a bare scene sidecar (no
    trainer records) comes back as a freshly initialized state."""
    recs = cstf.read_records(path)
    bundle = bundle_from_records(recs)
    if "enc.lift1.w" not in recs:
        return make_train_state(bundle)
    enc = EncoderParams.from_records(recs)
    ss = {lvl: ScaleShift(a=np.array(recs[f"ss.{lvl}.a"], np.float32),
                          b=np.array(recs[f"ss.{lvl}.b"], np.float32))
          for lvl in SS_LEVELS}
    classifier = IdentityClassifier(weight=np.array(recs["cls.w"], np.float32),
                                    bias=np.array(recs["cls.b"], np.float32))
    return TrainState(bundle=bundle, encoder=enc, ss=ss, classifier=classifier,
                      lang_step=int(recs.get("train.lang_step", [0])[0]),
                      id_step=int(recs.get("train.id_step", [0])[0]),
                      masks_ready=bool(int(recs.get("train.masks_ready", [0])[0])),
                      restore_records=recs)
