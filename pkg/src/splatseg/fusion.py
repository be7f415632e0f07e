"""View-dependent / view-independent feature fusion for per-view segmentation.

Two convolutional encoders run side by side: one over the rendered image
and one over the splatted 3D features concatenated with the image.  At
every scale the second branch absorbs the first through a 1x1 fusion
block; the lowest scale is merged once more and decoded back to full
resolution.  Images are handled channels-first internally while the
public functions speak H x W x C.
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .camera import Camera
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import IGNORE
from .nn import Module
from .optim import AdamW, warmup_lr
from .raster import DEFAULT_CONFIG, RasterConfig, RenderOutput, rasterize_backward, render
from .scene import GaussianScene, to_channels10
from .vi_features import EncoderConfig, PointEncoder

log = logging.getLogger(__name__)

LAMBDA_CECO = 0.4
EPS_LSR = 0.1
SEM_LR = 1e-4
SEM_WEIGHT_DECAY = 1e-4
WARMUP_EPOCHS = 4


class UnlabeledViewError(ValueError):
    """Every pixel of the view carries the ignore label."""


class MissingMaskError(ValueError):
    pass


# -- network ----------------------------------------------------------------------

class FusionNet(Module):
    """Dual-branch encoder, per-scale fusion, shared decoder.

    Stage widths are c, 2c, 4c at strides 1, 2, 4.  ``skips`` adds the
    fused scale features back in on the way up.
    """

    def __init__(self, n_classes: int | None, feat_dim: int = 32, c: int = 16, seed: int = 0,
                 depth_head: bool = False, skips: bool = True):
        super().__init__()
        if n_classes is None and not depth_head:
            raise ValueError("FusionNet needs a segmentation head, a depth head or both")
        self.n_classes, self.feat_dim, self.c = n_classes, feat_dim, c
        self.depth_head, self.skips = depth_head, skips
        rng = np.random.default_rng(seed)
        widths = [c, 2 * c, 4 * c]
        prev_vd, prev_vi = 3, feat_dim + 3
        for s, wd in enumerate(widths):
            self.conv(rng, f"vd{s}", prev_vd, wd, 3)
            self.conv(rng, f"vi{s}", prev_vi, wd, 3)
            self.conv(rng, f"fuse{s}", 2 * wd, wd, 1)
            prev_vd = prev_vi = wd
        self.conv(rng, "psi", 8 * c, 4 * c, 1)
        heads = []
        if n_classes is not None:
            heads.append(("dec", n_classes))
        if depth_head:
            heads.append(("ddec", 1))
        for prefix, out in heads:
            self.conv(rng, f"{prefix}1", 4 * c, 2 * c, 3)
            self.conv(rng, f"{prefix}0", 2 * c, c, 3)
            self.conv(rng, f"{prefix}.head", c, out, 1)

    def classifier_weights(self) -> T.Tensor:
        w = self.params["dec.head.weight"]
        return T.reshape(w, (w.shape[0], w.shape[1]))

    def encode(self, img: T.Tensor, z: T.Tensor):
        vd, vi = img, T.concat([z, img], axis=0)
        fused = []
        for s in range(3):
            stride = 1 if s == 0 else 2
            vd = T.relu(self.apply_conv(f"vd{s}", vd, stride))
            vi = T.relu(self.apply_conv(f"vi{s}", vi, stride))
            vi = T.relu(self.apply_conv(f"fuse{s}", T.concat([vi, vd], axis=0)))
            fused.append(vi)
        low = T.relu(self.apply_conv("psi", T.concat([vd, vi], axis=0)))
        return low, fused

    def decode(self, prefix: str, low: T.Tensor, fused):
        x = T.relu(self.apply_conv(f"{prefix}1", T.upsample2x(low)))
        if self.skips:
            x = x + fused[1]
        x = T.relu(self.apply_conv(f"{prefix}0", T.upsample2x(x)))
        if self.skips:
            x = x + fused[0]
        return self.apply_conv(f"{prefix}.head", x), x


def _chw_input(x, channels: int, name: str) -> T.Tensor:
    t = T.as_tensor(x)
    if t.ndim != 3 or t.shape[2] != channels:
        raise ValueError(f"{name} must be H x W x {channels}, got shape {t.shape}")
    return T.transpose(t, (2, 0, 1))


def _prepare_inputs(net: FusionNet, image, z, use_image: bool):
    img = T.as_tensor(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"image must be H x W x 3, got shape {img.shape}")
    h, w = img.shape[:2]
    if h % 4 or w % 4:
        raise ValueError(f"H and W must be divisible by 4, got {h} x {w}")
    if not use_image:
        img = T.Tensor(np.zeros(img.shape))
    img_c = _chw_input(img, 3, "image")
    if z is None:
        z_c = T.Tensor(np.zeros((net.feat_dim, h, w)))
    else:
        z_c = _chw_input(z, net.feat_dim, "Z")
        if z_c.shape[1:] != (h, w):
            raise ValueError(f"Z spatial size {z_c.shape[1:]} != image {(h, w)}")
    return img_c, z_c


def fusion_forward(net: FusionNet, image, z=None, use_image: bool = True) -> dict:
    """Logits (H, W, K) and penultimate features (H, W, c) as tensors.

    ``z=None`` feeds zeros to the 3D-feature channels; ``use_image=False``
    zeroes the image in both branches.
    """
    if net.n_classes is None:
        raise ValueError("network has no segmentation head")
    img_c, z_c = _prepare_inputs(net, image, z, use_image)
    low, fused = net.encode(img_c, z_c)
    logits, pen = net.decode("dec", low, fused)
    return {"logits": T.transpose(logits, (1, 2, 0)), "penultimate": T.transpose(pen, (1, 2, 0))}


def depth_forward(net: FusionNet, image, z=None, use_image: bool = True) -> T.Tensor:
    if not net.depth_head:
        raise ValueError("network has no depth head")
    img_c, z_c = _prepare_inputs(net, image, z, use_image)
    low, fused = net.encode(img_c, z_c)
    d, _ = net.decode("ddec", low, fused)
    return T.reshape(d, d.shape[1:])


# -- losses -------------------------------------------------------------------------

def _flat_labels(logits: T.Tensor, mask, ignore: int):
    k = logits.shape[-1]
    m = np.asarray(mask).reshape(-1).astype(np.int64)
    if m.size * k != logits.size:
        raise ValueError(f"mask has {m.size} pixels, logits {logits.shape}")
    keep = np.flatnonzero(m != ignore)
    if keep.size == 0:
        raise UnlabeledViewError("every pixel is unannotated; the view carries no labels")
    lab = m[keep]
    if lab.min() < 0 or lab.max() >= k:
        raise ValueError(f"mask labels must lie in [0, {k}) or equal {ignore}")
    return keep, lab


def lsr_cross_entropy(logits, mask, eps: float = EPS_LSR, ignore: int = IGNORE) -> T.Tensor:
    """Label-smoothed cross-entropy: targets (1 - eps) on the true class plus eps / K."""
    logits = T.as_tensor(logits)
    k = logits.shape[-1]
    keep, lab = _flat_labels(logits, mask, ignore)
    flat = T.reshape(logits, (-1, k))
    ls = T.log_softmax(T.take_rows(flat, keep), axis=1)
    target = np.full((keep.size, k), eps / k)
    target[np.arange(keep.size), lab] += 1.0 - eps
    return -T.tsum(ls * target) * (1.0 / keep.size)


def class_centres(penultimate, mask, ignore: int = IGNORE):
    """Per-class mean features (present classes only) and the class ids."""
    pen = T.as_tensor(penultimate)
    c = pen.shape[-1]
    m = np.asarray(mask).reshape(-1).astype(np.int64)
    keep = m != ignore
    if not keep.any():
        raise UnlabeledViewError("no labelled pixels for class centres")
    classes = np.unique(m[keep])
    rows, cols, vals = [], [], []
    for r, k in enumerate(classes):
        idx = np.flatnonzero(m == k)
        rows.append(np.full(idx.size, r))
        cols.append(idx)
        vals.append(np.full(idx.size, 1.0 / idx.size))
    avg = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(classes.size, m.size))
    return T.sparse_matmul(avg, T.reshape(pen, (-1, c))), classes


def ceco_loss(penultimate, mask, classifier_weights, ignore: int = IGNORE,
              variant: str = "cross") -> T.Tensor:
    """Centre/classifier alignment summed over the classes present in ``mask``.

    ``variant="cross"`` normalises each centre against every present class
    weight; ``"matched"`` uses the shared denominator sum_k' exp(z_k' . w_k').
    """
    if variant not in ("cross", "matched"):
        raise ValueError(f"unknown CeCo variant {variant!r}")
    centres, classes = class_centres(penultimate, mask, ignore)
    zc = T.l2_normalize(centres, axis=1)
    w = T.l2_normalize(T.take_rows(T.as_tensor(classifier_weights), classes), axis=1)
    sim = T.matmul(zc, w.T)
    p = classes.size
    ar = np.arange(p)
    if variant == "cross":
        return -T.tsum(T.log_softmax(sim, axis=1)[ar, ar])
    diag = sim[ar, ar]
    return -(T.tsum(diag) - T.logsumexp(diag, axis=0) * float(p))


@dataclass
class SemLossConfig:
    lambda_ceco: float = LAMBDA_CECO
    eps_lsr: float = EPS_LSR
    ignore: int = IGNORE
    ceco_variant: str = "cross"

    def __post_init__(self) -> None:
        if self.lambda_ceco < 0:
            raise ValueError(f"lambda_ceco must be >= 0, got {self.lambda_ceco}")
        if not 0.0 <= self.eps_lsr < 1.0:
            raise ValueError(f"eps_lsr must lie in [0, 1), got {self.eps_lsr}")


def semantic_loss(logits, penultimate, mask, weights, cfg: SemLossConfig = SemLossConfig()) -> T.Tensor:
    ce = lsr_cross_entropy(logits, mask, cfg.eps_lsr, cfg.ignore)
    if cfg.lambda_ceco == 0:
        return ce
    return ce + ceco_loss(penultimate, mask, weights, cfg.ignore, cfg.ceco_variant) * cfg.lambda_ceco


def _valid_depth(gt) -> np.ndarray:
    g = np.asarray(gt, dtype=np.float64)
    valid = np.isfinite(g) & (g > 0)
    if not valid.any():
        raise ValueError("no valid ground-truth depth pixels")
    return valid


def depth_mse(pred, gt) -> T.Tensor:
    pred = T.as_tensor(pred)
    valid = _valid_depth(gt)
    if pred.shape != valid.shape:
        raise ValueError(f"depth shapes differ: {pred.shape} vs {valid.shape}")
    idx = np.flatnonzero(valid)
    diff = T.take_rows(T.reshape(pred, (-1,)), idx) - np.asarray(gt, dtype=np.float64).reshape(-1)[idx]
    return T.mean(diff * diff)


def depth_forward_loss(net: FusionNet, image, z, gt_depth, use_image: bool = True) -> T.Tensor:
    return depth_mse(depth_forward(net, image, z, use_image), gt_depth)


# -- model wrapper, caching and inference --------------------------------------------

class SegModel:
    """Point encoder + fusion network + a per-scene feature cache.

    The cache is single-flight: concurrent first requests for one scene
    wait for a single encoder pass.
    """

    def __init__(self, encoder: PointEncoder | None, fusion: FusionNet, use_z: bool = True,
                 use_image: bool = True, raster: RasterConfig = DEFAULT_CONFIG):
        if use_z and encoder is None:
            raise ValueError("a model using 3D features needs an encoder")
        self.encoder, self.fusion = encoder, fusion
        self.use_z, self.use_image = use_z, use_image
        self.raster = raster
        self._cache: dict[int, tuple[GaussianScene, np.ndarray]] = {}
        self._lock = threading.Lock()
        self._inflight: dict[int, threading.Event] = {}

    def scene_features(self, scene: GaussianScene) -> np.ndarray | None:
        if not self.use_z:
            return None
        key = id(scene)
        while True:
            with self._lock:
                hit = self._cache.get(key)
                if hit is not None and hit[0] is scene:
                    return hit[1]
                ev = self._inflight.get(key)
                if ev is None:
                    ev = self._inflight[key] = threading.Event()
                    owner = True
                else:
                    owner = False
            if not owner:
                ev.wait()
                continue
            try:
                feats = self.encoder.scene_features(scene)
                with self._lock:
                    self._cache[key] = (scene, feats)
                return feats
            finally:
                with self._lock:
                    del self._inflight[key]
                ev.set()

    def invalidate(self) -> None:
        with self._lock:
            self._cache.clear()

    # checkpoint layout: "fusion.*", "encoder.*" and small "meta.*" vectors
    def state_dict(self) -> dict[str, np.ndarray]:
        f = self.fusion
        meta = {
            "meta.fusion": np.array([-1 if f.n_classes is None else f.n_classes, f.feat_dim, f.c,
                                     float(f.depth_head), float(f.skips)], dtype=np.float64),
            "meta.flags": np.array([float(self.use_z), float(self.use_image)]),
        }
        state = {f"fusion.{k}": v for k, v in f.state_dict().items()}
        if self.encoder is not None:
            e = self.encoder.cfg
            meta["meta.encoder"] = np.array([e.hidden, e.layers, e.k, e.feat_dim], dtype=np.float64)
            state.update({f"encoder.{k}": v for k, v in self.encoder.state_dict().items()})
        state.update(meta)
        return state

    @classmethod
    def from_state_dict(cls, state, raster: RasterConfig = DEFAULT_CONFIG) -> "SegModel":
        try:
            k, d, c, dh, sk = state["meta.fusion"]
            use_z, use_image = state["meta.flags"]
        except KeyError as exc:
            raise KeyError(f"not a segmentation-model checkpoint (missing {exc})") from None
        fusion = FusionNet(None if k < 0 else int(k), int(d), int(c), depth_head=bool(dh), skips=bool(sk))
        fusion.load_state_dict(state, "fusion.")
        encoder = None
        if "meta.encoder" in state:
            h, L, kk, fd = (int(v) for v in state["meta.encoder"])
            encoder = PointEncoder(EncoderConfig(h, L, kk, fd))
            encoder.load_state_dict(state, "encoder.")
        return cls(encoder, fusion, bool(use_z), bool(use_image), raster)

    def save(self, path) -> None:
        save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path, raster: RasterConfig = DEFAULT_CONFIG) -> "SegModel":
        return cls.from_state_dict(load_checkpoint(path), raster)


def predict_mask(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the last axis; ties go to the lowest class id."""
    return np.argmax(np.asarray(logits), axis=-1).astype(np.uint8)


def segment_rendered(model: SegModel, out: RenderOutput) -> dict:
    z = out.features if model.use_z else None
    res = fusion_forward(model.fusion, out.image, z, model.use_image)
    logits = res["logits"].data
    return {"logits": logits, "mask": predict_mask(logits)}


def infer_view(model: SegModel, scene: GaussianScene, cam: Camera) -> dict:
    """Render, fuse and segment one view; scene features come from the cache."""
    feats = model.scene_features(scene)
    out = render(scene, cam, feats, model.raster)
    seg = segment_rendered(model, out)
    return {"image": out.image, "Z": out.features, "mask": seg["mask"], "logits": seg["logits"],
            "depth": out.depth}


# -- training --------------------------------------------------------------------------

@dataclass
class SemTrainConfig:
    lr: float = SEM_LR
    weight_decay: float = SEM_WEIGHT_DECAY
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_epochs: int = WARMUP_EPOCHS
    steps: int = 300
    mode: str = "frozen"   # or "joint"
    use_z: bool = True
    use_image: bool = True
    c: int = 16
    skips: bool = True
    seed: int = 0
    loss: SemLossConfig = field(default_factory=SemLossConfig)
    raster: RasterConfig = field(default_factory=lambda: DEFAULT_CONFIG)
    checkpoint_dir: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("frozen", "joint"):
            raise ValueError(f"mode must be 'frozen' or 'joint', got {self.mode!r}")


@dataclass
class TrainingView:
    scene: int
    camera: Camera
    mask: np.ndarray | None
    depth: np.ndarray | None = None


def _collect_views(scenes, cameras, masks, depths=None) -> list[TrainingView]:
    views = []
    for s, cams in enumerate(cameras):
        for j, cam in enumerate(cams):
            m = None if masks is None else masks[s][j]
            d = None if depths is None else depths[s][j]
            views.append(TrainingView(s, cam, m, d))
    return views


class _RenderCache:
    """Frozen-feature renders are reused across epochs."""

    def __init__(self, model: SegModel, scenes, raster: RasterConfig):
        self.model, self.scenes, self.raster = model, scenes, raster
        self._renders: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}

    def get(self, i: int, view: TrainingView):
        if i not in self._renders:
            scene = self.scenes[view.scene]
            feats = self.model.scene_features(scene)
            out = render(scene, view.camera, feats, self.raster)
            self._renders[i] = (out.image, out.features)
        return self._renders[i]


def _joint_step(model: SegModel, scene, graph, view: TrainingView, cfg: SemTrainConfig):
    feats_t = model.encoder(None, graph=graph)
    out = render(scene, view.camera, feats_t.data, cfg.raster, keep_aux=True)
    z = T.Tensor(out.features, requires_grad=True)
    res = fusion_forward(model.fusion, out.image, z, model.use_image)
    loss = semantic_loss(res["logits"], res["penultimate"], view.mask,
                         model.fusion.classifier_weights(), cfg.loss)
    loss.backward()
    g = rasterize_backward(out, None, z.grad)
    feats_t.backward(g.features)
    return loss


def train_sem(scenes: Sequence[GaussianScene], cameras: Sequence[Sequence[Camera]],
              masks: Sequence[Sequence[np.ndarray]], model: SegModel,
              cfg: SemTrainConfig | None = None, warmup: bool = True):
    """AdamW over training views (shuffled per epoch); returns (model, per-step losses)."""
    cfg = cfg or SemTrainConfig()
    views = _collect_views(scenes, cameras, masks)
    for i, v in enumerate(views):
        if v.mask is None:
            raise MissingMaskError(f"training view {i} (scene {v.scene}) has no mask")
    if not views:
        raise ValueError("train_sem needs at least one view")
    model.raster = cfg.raster
    joint = cfg.mode == "joint" and model.use_z
    params = dict(model.fusion.params)
    if joint:
        params.update({f"encoder.{k}": p for k, p in model.encoder.params.items()})
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    warm = cfg.warmup_epochs * len(views) if warmup else 0
    cache = _RenderCache(model, scenes, cfg.raster)
    graphs = {}
    if joint:
        graphs = {s: model.encoder.prepare(to_channels10(sc)) for s, sc in enumerate(scenes)}
    trace: list[float] = []
    step = epoch = 0
    while step < cfg.steps:
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(views))
        for i in order:
            if step >= cfg.steps:
                break
            v = views[i]
            opt.lr = warmup_lr(cfg.lr, step, warm)
            if joint:
                loss = _joint_step(model, scenes[v.scene], graphs[v.scene], v, cfg)
            else:
                img, z = cache.get(int(i), v)
                res = fusion_forward(model.fusion, img, z if model.use_z else None, model.use_image)
                loss = semantic_loss(res["logits"], res["penultimate"], v.mask,
                                     model.fusion.classifier_weights(), cfg.loss)
                loss.backward()
            opt.step()
            trace.append(loss.item())
            step += 1
        epoch += 1
        if cfg.checkpoint_dir:
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            model.save(Path(cfg.checkpoint_dir) / f"sem_epoch{epoch:03d}.ckpt")
    if joint:
        model.invalidate()
    return model, trace


def finetune_scene(model: SegModel, scene: GaussianScene, cameras: Sequence[Camera],
                   masks: Sequence[np.ndarray], cfg: SemTrainConfig | None = None):
    """Continue semantic training on one scene, without warm-up."""
    cfg = cfg or SemTrainConfig()
    model.invalidate()
    return train_sem([scene], [cameras], [masks], model, cfg, warmup=False)


def evaluate_views(model: SegModel, scene: GaussianScene, cameras: Sequence[Camera],
                   masks: Sequence[np.ndarray], n_classes: int) -> dict:
    """Pooled segmentation scores over ``cameras``."""
    from .metrics import ConfusionMatrix, confusion, scores_from_confusion

    cm = ConfusionMatrix(np.zeros((n_classes, n_classes), dtype=np.int64))
    for cam, gt in zip(cameras, masks):
        cm = cm + confusion(infer_view(model, scene, cam)["mask"], gt, n_classes)
    return scores_from_confusion(cm)


# -- depth variant ---------------------------------------------------------------------

@dataclass
class DepthTrainConfig:
    lr: float = 1e-3
    weight_decay: float = SEM_WEIGHT_DECAY
    steps: int = 300
    use_z: bool = True
    c: int = 16
    seed: int = 0
    raster: RasterConfig = field(default_factory=lambda: DEFAULT_CONFIG)


def train_depth(scenes, cameras, depths, encoder: PointEncoder | None, cfg: DepthTrainConfig | None = None):
    """Fusion network with a depth head, MSE on valid pixels; encoder frozen."""
    cfg = cfg or DepthTrainConfig()
    feat_dim = encoder.cfg.feat_dim if encoder is not None else 32
    net = FusionNet(None, feat_dim, cfg.c, cfg.seed, depth_head=True)
    model = SegModel(encoder if cfg.use_z else None, net, cfg.use_z, True, cfg.raster)
    views = _collect_views(scenes, cameras, None, depths)
    valid = np.concatenate([np.asarray(v.depth)[_valid_depth(v.depth)] for v in views])
    net.params["ddec.head.bias"].data[:] = valid.mean()
    opt = AdamW(net.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    cache = _RenderCache(model, scenes, cfg.raster)
    trace = []
    step = epoch = 0
    while step < cfg.steps:
        for i in np.random.default_rng((cfg.seed, epoch)).permutation(len(views)):
            if step >= cfg.steps:
                break
            img, z = cache.get(int(i), views[i])
            loss = depth_forward_loss(net, img, z if cfg.use_z else None, views[i].depth)
            loss.backward()
            opt.step()
            trace.append(loss.item())
            step += 1
        epoch += 1
    return model, trace


def predict_depth(model: SegModel, scene: GaussianScene, cam: Camera) -> np.ndarray:
    feats = model.scene_features(scene)
    out = render(scene, cam, feats, model.raster)
    return depth_forward(model.fusion, out.image, out.features if model.use_z else None).data
