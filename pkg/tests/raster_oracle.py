"""Untiled per-pixel compositing oracle shared by the rasterizer tests.

Every pixel sees every projected Gaussian (no binning, no footprint cull),
sorted by (depth, index) and blended one contributor at a time.
"""

import numpy as np

from splatseg.camera import Camera
from splatseg.raster import RasterConfig, project_gaussians, rasterize_backward, render
from splatseg.sh import eval_sh
from splatseg.synthetic import random_scene

from gradcheck import numeric_grad, rel_error


def front_camera(width=64, height=64, focal=60.0):
    K = np.array([[focal, 0, width / 2], [0, focal, height / 2], [0, 0, 1.0]])
    return Camera(K, np.eye(3), np.zeros(3), width, height, near=0.1, far=50.0)


def brute_force_render(scene, cam, features=None, cfg=RasterConfig(), terminate=True):
    """Returns (image, features, depth, transmittance) as H x W [x C] arrays."""
    sp = project_gaussians(cam, scene, cfg, cull_footprint=False)
    H, W = cam.height, cam.width
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    yy, xx = yy.ravel().astype(float), xx.ravel().astype(float)
    dirs = scene.means[sp.index] - cam.center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    colour = np.clip(eval_sh(scene.sh[sp.index], dirs), 0.0, 1.0)
    D = 0 if features is None else features.shape[1]
    acc = np.zeros((H * W, 4 + D))
    T = np.ones(H * W)
    done = np.zeros(H * W, dtype=bool)
    for r in np.lexsort((sp.index, sp.depth)):
        inv = np.linalg.inv(sp.cov2d[r])
        d = np.stack([xx - sp.mean2d[r, 0], yy - sp.mean2d[r, 1]], axis=1)
        maha = np.einsum("pi,ij,pj->p", d, inv, d)
        a = np.minimum(cfg.alpha_max, sp.opacity[r] * np.exp(-0.5 * maha))
        a[a < cfg.alpha_min] = 0.0
        if terminate:
            done |= (a > 0) & (T * (1.0 - a) < cfg.t_min)
        live = ~done & (a > 0)
        value = np.concatenate([colour[r], [sp.depth[r]]]
                               + ([features[sp.index[r]]] if D else []))
        acc[live] += (a[live] * T[live])[:, None] * value[None, :]
        T[live] *= 1.0 - a[live]
    bg = np.asarray(cfg.background)
    img = acc[:, :3] + T[:, None] * bg
    feats = acc[:, 4:].reshape(H, W, D) if D else None
    return img.reshape(H, W, 3), feats, acc[:, 3].reshape(H, W), T.reshape(H, W)


# -- backward-pass finite differences -------------------------------------------------

def backward_case(seed, d=3):
    """Six small Gaussians with colours inside the clamp, plus random upstream gradients."""
    rng = np.random.default_rng(seed)
    scene = random_scene(6, seed, extent=0.25, depth=3.0)
    scene.log_scales[:] = np.log(rng.uniform(0.05, 0.12, (6, 3)))
    scene.sh[:, 0] = rng.normal(0, 0.3, (6, 3))
    feats = rng.normal(size=(6, d))
    cam = front_camera(16, 16, focal=40.0)
    gI = rng.normal(size=(16, 16, 3))
    gZ = rng.normal(size=(16, 16, d))
    return scene, feats, cam, gI, gZ


def backward_loss(scene, feats, cam, gI, gZ):
    out = render(scene, cam, feats)
    return float((out.image * gI).sum() + (out.features * gZ).sum())


def backward_error(seed, kind):
    """Relative error of rasterize_backward against central differences for one input kind."""
    scene, feats, cam, gI, gZ = backward_case(seed)
    g = rasterize_backward(render(scene, cam, feats, keep_aux=True), gI, gZ)
    if kind == "features":
        return rel_error(g.features, numeric_grad(lambda f: backward_loss(scene, f, cam, gI, gZ), feats))
    if kind == "sh":
        def f(flat):
            s = scene.copy()
            s.sh = flat.reshape(scene.sh.shape)
            return backward_loss(s, feats, cam, gI, gZ)
        return rel_error(g.sh, numeric_grad(f, scene.sh.reshape(len(scene), -1)))
    if kind == "opacity_logits":
        def f(x):
            s = scene.copy()
            s.opacity_logits = x
            return backward_loss(s, feats, cam, gI, gZ)
        return rel_error(g.opacity_logits, numeric_grad(f, scene.opacity_logits))
    raise ValueError(kind)
