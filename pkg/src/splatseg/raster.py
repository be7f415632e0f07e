"""Tile-based Gaussian splatting of colours, features and depth.

Compositing per pixel is front to back (ties broken by Gaussian index)::

    a_i = min(alpha_max, opacity_i * exp(-d^T cov2d^-1 d / 2))   (0 if < alpha_min)
    w_i = a_i * prod_{m<i} (1 - a_m)

and stops before the contributor that would push transmittance under
``t_min``.  The same weights produce the RGB image, the feature image and
the blended depth map.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .camera import Camera
from .scene import GaussianScene
from .sh import sh_basis
from .tensor import stable_sigmoid

UNANNOTATED = 255


@dataclass(frozen=True)
class RasterConfig:
    tile: int = 16
    alpha_max: float = 0.99
    alpha_min: float = 1.0 / 255.0
    t_min: float = 1e-4
    lowpass: float = 0.3
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    threads: int = 1


DEFAULT_CONFIG = RasterConfig()


@dataclass
class Splats:
    """Projected Gaussians (structure of arrays), one row per surviving Gaussian."""

    index: np.ndarray      # (n,) source Gaussian index
    mean2d: np.ndarray     # (n, 2) pixel coords (u = column, v = row)
    cov2d: np.ndarray      # (n, 2, 2)
    conic: np.ndarray      # (n, 3) inverse covariance entries (a, b, c)
    depth: np.ndarray      # (n,)
    color: np.ndarray      # (n, 3) clamped SH colour
    color_raw: np.ndarray  # (n, 3) before clamping
    basis: np.ndarray      # (n, 16) SH basis at the view direction
    opacity: np.ndarray    # (n,)
    extent: np.ndarray     # (n,) Mahalanobis cut-off radius used for binning

    def __len__(self) -> int:
        return self.index.size


def project_gaussians(cam: Camera, scene: GaussianScene, cfg: RasterConfig = DEFAULT_CONFIG,
                      cull_footprint: bool = True) -> Splats:
    """EWA projection: cov2d = J W Sigma W^T J^T + lowpass * I."""
    n = len(scene)
    p = scene.means @ cam.R.T + cam.t
    depth = p[:, 2]
    opacity = stable_sigmoid(scene.opacity_logits)
    keep = (depth > cam.near) & (opacity >= cfg.alpha_min)
    idx = np.flatnonzero(keep)
    p, depth, opacity = p[idx], depth[idx], opacity[idx]
    fx, fy = cam.fx, cam.fy
    x, y, z = p[:, 0], p[:, 1], depth
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = fx / z
    J[:, 0, 2] = -fx * x / (z * z)
    J[:, 1, 1] = fy / z
    J[:, 1, 2] = -fy * y / (z * z)
    cov3 = scene.subset(idx).covariances() if n else np.zeros((0, 3, 3))
    cov_cam = cam.R @ cov3 @ cam.R.T
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d[:, 0, 0] += cfg.lowpass
    cov2d[:, 1, 1] += cfg.lowpass
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)
    mean2d = np.stack([fx * x / z + cam.cx, fy * y / z + cam.cy], axis=1)

    # beyond this Mahalanobis radius opacity * G < alpha_min, so nothing is lost
    ratio = np.maximum(opacity / cfg.alpha_min, 1.0)
    extent = np.maximum(3.0, np.sqrt(2.0 * np.log(ratio)))
    if cull_footprint:
        ru = extent * np.sqrt(a)
        rv = extent * np.sqrt(c)
        vis = ((mean2d[:, 0] + ru >= 0) & (mean2d[:, 0] - ru <= cam.width - 1)
               & (mean2d[:, 1] + rv >= 0) & (mean2d[:, 1] - rv <= cam.height - 1))
        sel = np.flatnonzero(vis)
        idx, mean2d, cov2d, conic = idx[sel], mean2d[sel], cov2d[sel], conic[sel]
        depth, opacity, extent = depth[sel], opacity[sel], extent[sel]

    dirs = scene.means[idx] - cam.center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    basis = sh_basis(dirs)
    color_raw = np.einsum("nk,nkc->nc", basis, scene.sh[idx]) + 0.5
    return Splats(idx, mean2d, cov2d, conic, depth, np.clip(color_raw, 0.0, 1.0), color_raw,
                  basis, opacity, extent)


def project_gaussian(cam: Camera, scene: GaussianScene, i: int,
                     cfg: RasterConfig = DEFAULT_CONFIG) -> Splats | None:
    """Single-Gaussian projection; ``None`` when culled."""
    s = project_gaussians(cam, scene.subset([i]), cfg)
    if len(s) == 0:
        return None
    s.index = np.array([i])
    return s


@dataclass
class TileAux:
    pixels: np.ndarray   # (P,) flat pixel ids
    splat: np.ndarray    # (n,) rows into Splats, front to back
    alpha: np.ndarray    # (n, P) effective alpha, 0 for skipped/terminated
    clamped: np.ndarray  # (n, P) alpha hit alpha_max


@dataclass
class RenderOutput:
    image: np.ndarray                 # (H, W, 3)
    features: np.ndarray | None       # (H, W, D)
    depth: np.ndarray                 # (H, W)
    transmittance: np.ndarray         # (H, W) after the last contributor
    n_contrib: np.ndarray             # (H, W) contributors with non-zero weight
    splats: Splats
    camera: Camera
    scene_size: int
    config: RasterConfig
    scene_features: np.ndarray | None = None
    tiles: list[TileAux] | None = field(default=None, repr=False)

    def contributors(self, row: int, col: int) -> list[tuple[int, float]]:
        """Ordered (gaussian index, blend weight) list for one pixel."""
        if self.tiles is None:
            raise ValueError("render was run without keep_aux")
        pid = row * self.camera.width + col
        for t in self.tiles:
            hit = np.flatnonzero(t.pixels == pid)
            if hit.size:
                a = t.alpha[:, hit[0]]
                trans = np.concatenate([[1.0], np.cumprod(1.0 - a)[:-1]])
                w = a * trans
                return [(int(self.splats.index[s]), float(wi)) for s, wi in zip(t.splat, w) if wi > 0]
        return []


def _bin_tiles(splats: Splats, width: int, height: int, tile: int):
    """Sorted splat rows per tile, keyed by (depth, gaussian index)."""
    n = len(splats)
    tiles_x = (width + tile - 1) // tile
    tiles_y = (height + tile - 1) // tile
    if n == 0:
        return tiles_x, tiles_y, [np.zeros(0, dtype=np.intp)] * (tiles_x * tiles_y)
    ru = splats.extent * np.sqrt(splats.cov2d[:, 0, 0])
    rv = splats.extent * np.sqrt(splats.cov2d[:, 1, 1])
    x0 = np.clip(np.ceil(splats.mean2d[:, 0] - ru) - 1, 0, width - 1).astype(np.int64)
    x1 = np.clip(np.floor(splats.mean2d[:, 0] + ru) + 1, 0, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(splats.mean2d[:, 1] - rv) - 1, 0, height - 1).astype(np.int64)
    y1 = np.clip(np.floor(splats.mean2d[:, 1] + rv) + 1, 0, height - 1).astype(np.int64)
    tx0, tx1, ty0, ty1 = x0 // tile, x1 // tile, y0 // tile, y1 // tile
    rank = np.empty(n, dtype=np.int64)
    rank[np.lexsort((splats.index, splats.depth))] = np.arange(n)
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    rows = np.repeat(np.arange(n), counts)
    local = np.arange(rows.size) - np.repeat(np.cumsum(counts) - counts, counts)
    tx = tx0[rows] + local % nx[rows]
    ty = ty0[rows] + local // nx[rows]
    tid = ty * tiles_x + tx
    order = np.lexsort((rank[rows], tid))
    tid, rows = tid[order], rows[order]
    bounds = np.searchsorted(tid, np.arange(tiles_x * tiles_y + 1))
    return tiles_x, tiles_y, [rows[bounds[k]:bounds[k + 1]] for k in range(tiles_x * tiles_y)]


def _tile_pixels(k: int, tiles_x: int, width: int, height: int, tile: int):
    ty, tx = divmod(k, tiles_x)
    ys = np.arange(ty * tile, min((ty + 1) * tile, height))
    xs = np.arange(tx * tile, min((tx + 1) * tile, width))
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return yy.ravel(), xx.ravel()


def _tile_alpha(splats: Splats, rows: np.ndarray, yy: np.ndarray, xx: np.ndarray,
                cfg: RasterConfig):
    dx = xx[None, :] - splats.mean2d[rows, 0:1]
    dy = yy[None, :] - splats.mean2d[rows, 1:2]
    con = splats.conic[rows]
    power = -0.5 * (con[:, 0:1] * dx * dx + 2.0 * con[:, 1:2] * dx * dy + con[:, 2:3] * dy * dy)
    raw = splats.opacity[rows, None] * np.exp(power)
    clamped = raw >= cfg.alpha_max
    alpha = np.where(clamped, cfg.alpha_max, raw)
    alpha[alpha < cfg.alpha_min] = 0.0
    return alpha, clamped


def composite_weights(alpha: np.ndarray, t_min: float):
    """Front-to-back weights for (n, P) alphas with early termination.

    Returns (effective alpha, weights, final transmittance).
    """
    if alpha.shape[0] == 0:
        return alpha, alpha, np.ones(alpha.shape[1])
    t_after = np.cumprod(1.0 - alpha, axis=0)
    active = t_after >= t_min
    a_eff = np.where(active, alpha, 0.0)
    t_before = np.ones_like(alpha)
    t_before[1:] = np.cumprod(1.0 - a_eff, axis=0)[:-1]
    w = a_eff * t_before
    t_final = t_before[-1] * (1.0 - a_eff[-1])
    return a_eff, w, t_final


def render(scene: GaussianScene, cam: Camera, features: np.ndarray | None = None,
           cfg: RasterConfig = DEFAULT_CONFIG, keep_aux: bool = False,
           splats: Splats | None = None) -> RenderOutput:
    """Splat ``scene`` (and optional per-Gaussian ``features``, N x D) into ``cam``."""
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != len(scene):
            raise ValueError(f"features must have {len(scene)} rows, got shape {features.shape}")
    if splats is None:
        splats = project_gaussians(cam, scene, cfg)
    W, H, tile = cam.width, cam.height, cfg.tile
    tiles_x, _, bins = _bin_tiles(splats, W, H, tile)
    D = 0 if features is None else features.shape[1]
    # one fused value matrix: rgb | depth | features
    values = np.concatenate(
        [splats.color, splats.depth[:, None]] + ([features[splats.index]] if D else []), axis=1)
    out = np.zeros((H * W, 4 + D))
    trans = np.ones(H * W)
    ncon = np.zeros(H * W, dtype=np.int64)
    aux: list[TileAux | None] = [None] * len(bins)
    bg = np.asarray(cfg.background, dtype=np.float64)

    def work(k: int) -> None:
        yy, xx = _tile_pixels(k, tiles_x, W, H, tile)
        pid = yy * W + xx
        rows = bins[k]
        if rows.size == 0:
            out[pid, :3] = bg
            return
        alpha, clamped = _tile_alpha(splats, rows, yy, xx, cfg)
        a_eff, w, t_final = composite_weights(alpha, cfg.t_min)
        out[pid] = w.T @ values[rows]
        out[pid, :3] += t_final[:, None] * bg
        trans[pid] = t_final
        ncon[pid] = (w > 0).sum(axis=0)
        if keep_aux:
            live = np.flatnonzero(a_eff.any(axis=1))
            if live.size:
                aux[k] = TileAux(pid, rows[live], a_eff[live], clamped[live])

    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            list(pool.map(work, range(len(bins))))
    else:
        for k in range(len(bins)):
            work(k)

    return RenderOutput(
        image=out[:, :3].reshape(H, W, 3),
        features=out[:, 4:].reshape(H, W, D) if D else None,
        depth=out[:, 3].reshape(H, W),
        transmittance=trans.reshape(H, W),
        n_contrib=ncon.reshape(H, W),
        splats=splats, camera=cam, scene_size=len(scene), config=cfg,
        scene_features=features,
        tiles=[a for a in aux if a is not None] if keep_aux else None,
    )


def render_depth(scene: GaussianScene, cam: Camera, cfg: RasterConfig = DEFAULT_CONFIG) -> np.ndarray:
    return render(scene, cam, cfg=cfg).depth


def render_semantic_gt(scene: GaussianScene, cam: Camera, n_classes: int | None = None,
                       cfg: RasterConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Per-pixel argmax of summed blend weights per class; 255 where uncovered."""
    if scene.labels is None:
        raise ValueError("scene has no semantic labels")
    if np.any(scene.labels < 0):
        raise ValueError(f"Gaussian {int(np.flatnonzero(scene.labels < 0)[0])} is unlabeled")
    k = int(n_classes if n_classes is not None else scene.labels.max() + 1)
    onehot = np.zeros((len(scene), k))
    onehot[np.arange(len(scene)), scene.labels] = 1.0
    acc = render(scene, cam, onehot, cfg).features
    mask = np.argmax(acc, axis=2).astype(np.uint8)
    mask[acc.sum(axis=2) <= 0] = UNANNOTATED
    return mask


@dataclass
class RasterGrads:
    features: np.ndarray | None   # (N, D)
    sh: np.ndarray                # (N, 48) coefficient-major, i.e. sh.reshape(N, 48)
    opacity_logits: np.ndarray    # (N,)


def rasterize_backward(output: RenderOutput, dL_dI: np.ndarray | None = None,
                       dL_dZ: np.ndarray | None = None) -> RasterGrads:
    """Exact gradients of the composite w.r.t. features, SH and opacity logits.

    2-D means/covariances are treated as constants.
    """
    if output.tiles is None:
        raise ValueError("render aux missing: call render(..., keep_aux=True)")
    sp = output.splats
    H, W = output.camera.height, output.camera.width
    N = output.scene_size
    D = 0 if output.features is None else output.features.shape[2]
    gI = np.zeros((H * W, 3)) if dL_dI is None else np.asarray(dL_dI, dtype=np.float64).reshape(H * W, 3)
    if D:
        gZ = np.zeros((H * W, D)) if dL_dZ is None else np.asarray(dL_dZ, dtype=np.float64).reshape(H * W, D)
        feats = output.scene_features[sp.index]
    bg = np.asarray(output.config.background, dtype=np.float64)
    n = len(sp)
    g_color = np.zeros((n, 3))
    g_feat = np.zeros((n, D))
    g_logit = np.zeros(n)
    for t in output.tiles:
        rows, a = t.splat, t.alpha
        gi = gI[t.pixels]
        one_minus = 1.0 - a
        t_before = np.ones_like(a)
        t_before[1:] = np.cumprod(one_minus, axis=0)[:-1]
        w = a * t_before
        t_final = t_before[-1] * one_minus[-1]
        v = sp.color[rows] @ gi.T
        g_color[rows] += w @ gi
        if D:
            gz = gZ[t.pixels]
            v += feats[rows] @ gz.T
            g_feat[rows] += w @ gz
        vw = v * w
        after = np.cumsum(vw[::-1], axis=0)[::-1] - vw
        g_alpha = t_before * v - (after + t_final[None, :] * (gi @ bg)[None, :]) / one_minus
        dalpha = np.where(t.clamped | (a == 0), 0.0, a * (1.0 - sp.opacity[rows, None]))
        g_logit[rows] += (g_alpha * dalpha).sum(axis=1)

    inside = (sp.color_raw > 0.0) & (sp.color_raw < 1.0)
    g_raw = g_color * inside
    sh_rows = np.einsum("nk,nc->nkc", sp.basis, g_raw)
    out_sh = np.zeros((N, 16, 3))
    out_sh[sp.index] = sh_rows
    out_logit = np.zeros(N)
    out_logit[sp.index] = g_logit
    out_feat = None
    if D:
        out_feat = np.zeros((N, D))
        out_feat[sp.index] = g_feat
    return RasterGrads(out_feat, out_sh.reshape(N, 48), out_logit)
