"""Photometric L1 + D-SSIM loss and an appearance-only fitting loop."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .camera import Camera
from .metrics import ssim_tensor
from .optim import Adam
from .raster import DEFAULT_CONFIG, RasterConfig, rasterize_backward, render
from .scene import GaussianScene

LAMBDA_DSSIM = 0.2


def appearance_loss(rendered, gt, lam: float = LAMBDA_DSSIM) -> T.Tensor:
    """(1 - lam) * mean|I_hat - I| + lam * (1 - SSIM) / 2 over (C, H, W) images."""
    rendered = T.as_tensor(rendered)
    gt = T.as_tensor(gt)
    if rendered.shape != gt.shape:
        raise ValueError(f"appearance_loss: shapes {rendered.shape} and {gt.shape} differ")
    l1 = T.mean(T.tabs(rendered - gt))
    dssim = (1.0 - ssim_tensor(rendered, gt)) * 0.5
    return l1 * (1.0 - lam) + dssim * lam


@dataclass
class FitConfig:
    steps: int = 300
    lr_sh: float = 0.01
    lr_opacity: float = 0.05
    lam: float = LAMBDA_DSSIM
    lr_final: float = 0.01   # both learning rates decay exponentially to this fraction
    raster: RasterConfig = field(default_factory=lambda: DEFAULT_CONFIG)


def appearance_step_grads(scene: GaussianScene, cam: Camera, target: np.ndarray, cfg: FitConfig):
    """Loss and gradients (sh (N,16,3), opacity logits (N,)) for one view."""
    out = render(scene, cam, cfg=cfg.raster, keep_aux=True)
    img = T.Tensor(np.moveaxis(out.image, -1, 0), requires_grad=True)
    loss = appearance_loss(img, np.moveaxis(np.asarray(target, dtype=np.float64), -1, 0), cfg.lam)
    loss.backward()
    g = rasterize_backward(out, np.moveaxis(img.grad, 0, -1))
    return loss.item(), g.sh.reshape(len(scene), 16, 3), g.opacity_logits, out


def fit_appearance(scene: GaussianScene, cameras: Sequence[Camera], images: Sequence[np.ndarray],
                   cfg: FitConfig | None = None):
    """Optimise SH coefficients and opacity logits with geometry frozen.

    Returns ``(fitted_scene, step_losses, epoch_losses)``; views are visited
    round-robin, an epoch being one pass over all views.  Without the lr
    decay Adam keeps dithering around the L1 optimum and the loss creeps
    back up late in the run.
    """
    cfg = cfg or FitConfig()
    if len(cameras) == 0 or len(cameras) != len(images):
        raise ValueError("fit_appearance needs at least one (camera, image) pair")
    fitted = scene.copy()
    sh = T.Tensor(fitted.sh, requires_grad=True, name="sh")
    op = T.Tensor(fitted.opacity_logits, requires_grad=True, name="opacity")
    opt_sh = Adam({"sh": sh}, lr=cfg.lr_sh)
    opt_op = Adam({"opacity": op}, lr=cfg.lr_opacity)
    losses: list[float] = []
    epoch_losses: list[float] = []
    acc = []
    for step in range(cfg.steps):
        j = step % len(cameras)
        decay = cfg.lr_final ** (step / max(cfg.steps - 1, 1))
        opt_sh.lr = cfg.lr_sh * decay
        opt_op.lr = cfg.lr_opacity * decay
        fitted.sh = sh.data
        fitted.opacity_logits = op.data
        loss, g_sh, g_op, _ = appearance_step_grads(fitted, cameras[j], images[j], cfg)
        losses.append(loss)
        acc.append(loss)
        if j == len(cameras) - 1:
            epoch_losses.append(float(np.mean(acc)))
            acc = []
        sh.grad, op.grad = g_sh, g_op
        opt_sh.step()
        opt_op.step()
    fitted.sh = sh.data.copy()
    fitted.opacity_logits = op.data.copy()
    return fitted, losses, epoch_losses
