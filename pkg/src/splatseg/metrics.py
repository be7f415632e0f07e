"""Segmentation, image-quality and depth metrics, plus the FPS benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np

from . import tensor as T

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
IGNORE = 255


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _chw(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        return a[None]
    return np.moveaxis(a, -1, 0)


def _filter(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    av = np.lib.stride_tricks.sliding_window_view(x, n, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(av, n, axis=2) @ g


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows and channels; images HxW[xC] on [0, 1]."""
    a, b = _chw(a), _chw(b)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.shape[1] < SSIM_WINDOW or a.shape[2] < SSIM_WINDOW:
        raise ValueError(f"ssim: image {a.shape[1:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    saa = _filter(a * a, g) - mu_a ** 2
    sbb = _filter(b * b, g) - mu_b ** 2
    sab = _filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return float(np.mean(num / den))


def ssim_tensor(a: T.Tensor, b) -> T.Tensor:
    """Differentiable SSIM for (C, H, W) tensors; same definition as :func:`ssim`."""
    b = T.as_tensor(b)
    g = gaussian_window()
    f = lambda x: T.separable_filter(x, g)
    mu_a, mu_b = f(a), f(b)
    saa = f(a * a) - mu_a * mu_a
    sbb = f(b * b) - mu_b * mu_b
    sab = f(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return T.mean(num / den)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


# -- segmentation ---------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    counts: np.ndarray   # (K, K) rows = ground truth, cols = prediction
    ignored: int = 0

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts, self.ignored + other.ignored)


def confusion(pred: np.ndarray, gt: np.ndarray, n_classes: int, ignore: int = IGNORE) -> ConfusionMatrix:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred/gt size mismatch {pred.size} vs {gt.size}")
    keep = gt != ignore
    p, g = pred[keep], gt[keep]
    if np.any((g < 0) | (g >= n_classes)):
        raise ValueError("ground truth contains labels outside [0, K)")
    p = np.where((p >= 0) & (p < n_classes), p, n_classes)
    counts = np.bincount(g * (n_classes + 1) + p, minlength=n_classes * (n_classes + 1))
    counts = counts.reshape(n_classes, n_classes + 1)[:, :n_classes]
    return ConfusionMatrix(counts.astype(np.int64), int((~keep).sum()))


def scores_from_confusion(cm: ConfusionMatrix, include_absent: bool = False) -> dict:
    c = cm.counts.astype(np.float64)
    if c.sum() == 0:
        raise ValueError("no annotated pixels to score")
    tp = np.diag(c)
    gt_n = c.sum(axis=1)
    pr_n = c.sum(axis=0)
    union = gt_n + pr_n - tp
    present = union > 0
    iou = np.divide(tp, union, out=np.zeros_like(tp), where=present)
    acc = np.divide(tp, gt_n, out=np.zeros_like(tp), where=gt_n > 0)
    if include_absent:
        miou, macc = iou.mean(), acc.mean()
    else:
        miou = iou[present].mean()
        macc = acc[gt_n > 0].mean()
    return {"mIoU": float(miou), "mAcc": float(macc), "oAcc": float(tp.sum() / c.sum()),
            "IoU": iou, "confusion": cm}


def seg_metrics(pred: np.ndarray, gt: np.ndarray, n_classes: int, ignore: int = IGNORE,
                include_absent: bool = False) -> dict:
    """mIoU / mAcc / oAcc; classes absent from both prediction and GT are skipped."""
    return scores_from_confusion(confusion(pred, gt, n_classes, ignore), include_absent)


# -- depth ----------------------------------------------------------------------

@dataclass
class DepthReport:
    abs_rel: float
    abs_diff: float
    sq_rel: float
    rmse: float
    delta1: float
    delta2: float
    delta3: float
    comp: float

    def as_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred: np.ndarray, gt: np.ndarray) -> DepthReport:
    """Depth errors over pixels with valid GT (finite, > 0) and a valid prediction."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    valid = np.isfinite(gt) & (gt > 0)
    if not valid.any():
        raise ValueError("depth_metrics: no valid ground-truth pixels")
    ok = valid & np.isfinite(pred) & (pred > 0)
    comp = ok.sum() / valid.sum()
    if not ok.any():
        nan = float("nan")
        return DepthReport(nan, nan, nan, nan, 0.0, 0.0, 0.0, float(comp))
    d, g = pred[ok], gt[ok]
    err = np.abs(d - g)

    def within(th: float) -> float:
        # max(d/g, g/d) < th without the rounding of a division
        return float(np.mean((d < th * g) & (g < th * d)))

    return DepthReport(
        abs_rel=float(np.mean(err / g)),
        abs_diff=float(np.mean(err)),
        sq_rel=float(np.mean(err ** 2 / g)),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        delta1=within(1.25),
        delta2=within(1.25 ** 2),
        delta3=within(1.25 ** 3),
        comp=float(comp),
    )


# -- speed ----------------------------------------------------------------------

def fps_benchmark(scene, cameras, model, clock: Callable[[], int] = time.perf_counter_ns,
                  warmup: int = 10, frames: int = 100, cfg=None,
                  stage_clock: Callable[[], int] = time.perf_counter_ns) -> dict:
    """Steady-state render + fusion throughput.

    Scene features are computed once before timing (reported separately).
    ``clock`` returns integer nanoseconds and is read once before the timed
    loop and once after each timed frame, so ``fps = frames / elapsed``.
    The per-stage split is measured with ``stage_clock``.  Frames cycle
    through ``cameras``.
    """
    from .fusion import segment_rendered
    from .raster import DEFAULT_CONFIG, render

    if not cameras:
        raise ValueError("fps_benchmark needs at least one camera")
    cfg = cfg or DEFAULT_CONFIG
    t0 = stage_clock()
    feats = model.scene_features(scene)
    t_enc = stage_clock() - t0
    stages = [0, 0]

    def frame(i: int) -> None:
        cam = cameras[i % len(cameras)]
        a = stage_clock()
        out = render(scene, cam, feats, cfg)
        b = stage_clock()
        segment_rendered(model, out)
        c = stage_clock()
        stages[0] += b - a
        stages[1] += c - b

    for i in range(warmup):
        frame(i)
    stages[:] = [0, 0]
    start = clock()
    end = start
    for i in range(frames):
        frame(warmup + i)
        end = clock()
    elapsed = end - start
    return {
        "fps": frames * 1e9 / elapsed if elapsed > 0 else float("inf"),
        "frames": frames,
        "elapsed_ms": elapsed / 1e6,
        "encoder_ms": t_enc / 1e6,
        "render_ms": stages[0] / 1e6 / max(frames, 1),
        "fusion_ms": stages[1] / 1e6 / max(frames, 1),
    }
