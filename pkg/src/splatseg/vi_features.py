"""Self-supervised, view-independent per-Gaussian features.

A k-NN message-passing point network stands in for a large point
transformer.  It is trained contrastively on pairs of overlapping views:
the same Gaussian seen in both (independently augmented) frustum crops
forms a positive pair, every other Gaussian of the second crop a negative.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .camera import Camera, OVERLAP_HI, OVERLAP_LO, compute_frustum, gaussians_in_frustum, mine_view_pairs
from .checkpoint import save_checkpoint
from .nn import Module
from .optim import Adam
from .scene import VOXEL_SIZE, GaussianScene, to_channels10, voxel_subsample

log = logging.getLogger(__name__)

TAU = 0.07
N_CORRESPONDENCES = 4096
FEAT_DIM = 32
VI_WEIGHT_DECAY = 1e-5


def knn_graph(points: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
    """(M, k) Euclidean neighbours excluding self, nearest first, ties by index."""
    pts = np.asarray(points, dtype=np.float64)
    m = pts.shape[0]
    if m <= k:
        raise ValueError(f"knn_graph needs more than k={k} points, got {m}")
    sq = (pts ** 2).sum(axis=1)
    out = np.empty((m, k), dtype=np.intp)
    for s in range(0, m, chunk):
        e = min(m, s + chunk)
        d = sq[s:e, None] + sq[None, :] - 2.0 * pts[s:e] @ pts.T
        # exact distances for the candidates keep tie handling honest
        d[np.arange(e - s), np.arange(s, e)] = np.inf
        kth = np.partition(d, k - 1, axis=1)[:, k - 1]
        for r in range(e - s):
            cand = np.flatnonzero(d[r] <= kth[r] * (1 + 1e-9) + 1e-12)
            exact = ((pts[cand] - pts[s + r]) ** 2).sum(axis=1)
            order = np.lexsort((cand, exact))
            out[s + r] = cand[order[:k]]
    return out


def neighbour_mean_matrix(nbrs: np.ndarray, m: int) -> sp.csr_matrix:
    k = nbrs.shape[1]
    rows = np.repeat(np.arange(m), k)
    return sp.csr_matrix((np.full(m * k, 1.0 / k), (rows, nbrs.reshape(-1))), shape=(m, m))


# channel gains: activated scales are ~1e-2, lift them to the range of the rest
INPUT_GAIN = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 10.0, 10.0, 10.0, 1.0])


@dataclass
class EncoderConfig:
    hidden: int = 64
    layers: int = 3
    k: int = 16
    feat_dim: int = FEAT_DIM
    seed: int = 0


class PointEncoder(Module):
    """Per-point MLP, ``layers`` rounds of neighbour-mean message passing, linear head.

    Outputs are l2-normalised.  ``calls`` counts forward invocations.
    """

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or EncoderConfig()
        rng = np.random.default_rng(cfg.seed)
        self.linear(rng, "inp", 10, cfg.hidden)
        for layer in range(cfg.layers):
            self.linear(rng, f"mp{layer}", 2 * cfg.hidden, cfg.hidden)
        self.linear(rng, "head", cfg.hidden, cfg.feat_dim)
        self.calls = 0

    def prepare(self, channels10: np.ndarray):
        ch = np.asarray(channels10, dtype=np.float64)
        if ch.ndim != 2 or ch.shape[1] != 10:
            raise ValueError(f"encoder input must be M x 10, got shape {ch.shape}")
        x = ch.copy()
        x[:, :3] -= x[:, :3].mean(axis=0)
        nbrs = knn_graph(x[:, :3], min(self.cfg.k, x.shape[0] - 1))
        return x * INPUT_GAIN, neighbour_mean_matrix(nbrs, x.shape[0])

    def __call__(self, channels10: np.ndarray, graph=None) -> T.Tensor:
        self.calls += 1
        x, agg = graph if graph is not None else self.prepare(channels10)
        h = T.relu(self.apply_linear("inp", T.Tensor(x)))
        for layer in range(self.cfg.layers):
            msg = T.sparse_matmul(agg, h)
            h = h + T.relu(self.apply_linear(f"mp{layer}", T.concat([h, msg], axis=1)))
        return T.l2_normalize(self.apply_linear("head", h), axis=1)

    forward = __call__

    def scene_features(self, scene: GaussianScene) -> np.ndarray:
        """Whole-scene features (N, D), one encoder pass."""
        return self(to_channels10(scene)).data


def point_encoder_forward(params: PointEncoder, channels10: np.ndarray) -> T.Tensor:
    return params(channels10)


@dataclass
class AugmentConfig:
    max_angle: float = np.pi
    translate: float = 0.05
    log_scale: tuple[float, float] = (np.log(0.8), np.log(1.25))
    opacity_jitter: float = 0.05


IDENTITY_AUGMENT = AugmentConfig(0.0, 0.0, (0.0, 0.0), 0.0)


def augment_crop(channels10: np.ndarray, seed, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Rotation about +z, global translation, scale multiplier, per-point opacity jitter."""
    rng = np.random.default_rng(seed)
    x = np.array(channels10, dtype=np.float64, copy=True)
    ang = rng.uniform(-cfg.max_angle, cfg.max_angle)
    shift = rng.uniform(-cfg.translate, cfg.translate, 3)
    mult = np.exp(rng.uniform(*cfg.log_scale))
    jitter = rng.uniform(-cfg.opacity_jitter, cfg.opacity_jitter, x.shape[0])
    c, s = np.cos(ang), np.sin(ang)
    px, py = x[:, 0].copy(), x[:, 1].copy()
    x[:, 0] = c * px - s * py
    x[:, 1] = s * px + c * py
    x[:, :3] += shift
    x[:, 6:9] *= mult
    x[:, 9] = np.clip(x[:, 9] + jitter, 1e-6, 1.0 - 1e-6) if cfg.opacity_jitter else x[:, 9]
    return x


@dataclass
class Correspondences:
    crop_m: np.ndarray   # ascending Gaussian indices in view m
    crop_n: np.ndarray
    pairs: np.ndarray    # (P, 2) positions into crop_m / crop_n

    def __len__(self) -> int:
        return self.pairs.shape[0]


def sample_correspondences(scene: GaussianScene, cam_m: Camera, cam_n: Camera,
                           n_max: int = N_CORRESPONDENCES, seed=0,
                           voxel: float | None = None) -> Correspondences:
    """Shared Gaussians of two frustum crops, uniformly subsampled to ``n_max``."""
    crop_m = gaussians_in_frustum(compute_frustum(cam_m), scene)
    crop_n = gaussians_in_frustum(compute_frustum(cam_n), scene)
    if voxel is not None:
        crop_m = crop_m[voxel_subsample(scene.means[crop_m], voxel)]
        crop_n = crop_n[voxel_subsample(scene.means[crop_n], voxel)]
    shared = np.intersect1d(crop_m, crop_n, assume_unique=True)
    if shared.size == 0:
        raise ValueError("views share no Gaussians")
    if shared.size > n_max:
        rng = np.random.default_rng(seed)
        shared = np.sort(rng.choice(shared, size=n_max, replace=False))
    pairs = np.stack([np.searchsorted(crop_m, shared), np.searchsorted(crop_n, shared)], axis=1)
    return Correspondences(crop_m, crop_n, pairs)


def contrastive_loss(f_m, f_n, tau: float = TAU) -> T.Tensor:
    """-sum_i log softmax_j(f_m[i] . f_n[j] / tau)[i]; rows are expected unit length."""
    f_m, f_n = T.as_tensor(f_m), T.as_tensor(f_n)
    if f_m.ndim != 2 or f_m.shape != f_n.shape:
        raise ValueError(f"contrastive_loss: need equal P x D inputs, got {f_m.shape} and {f_n.shape}")
    p = f_m.shape[0]
    if p == 0:
        raise ValueError("contrastive_loss: no correspondences")
    logits = T.matmul(f_m, f_n.T) * (1.0 / tau)
    ls = T.log_softmax(logits, axis=1)
    ar = np.arange(p)
    return -T.tsum(ls[ar, ar])


@dataclass
class VITrainConfig:
    tau: float = TAU
    n_corr: int = N_CORRESPONDENCES
    voxel: float = VOXEL_SIZE
    overlap_lo: float = OVERLAP_LO
    overlap_hi: float = OVERLAP_HI
    lr: float = 1e-3
    weight_decay: float = VI_WEIGHT_DECAY
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    k: int = 16
    hidden: int = 64
    layers: int = 3
    feat_dim: int = FEAT_DIM
    checkpoint_dir: str | None = None

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.hidden, self.layers, self.k, self.feat_dim, self.seed)


def _pair_step(encoder: PointEncoder, scene: GaussianScene, cam_m: Camera, cam_n: Camera,
               cfg: VITrainConfig, seed: int, augment: bool = True):
    corr = sample_correspondences(scene, cam_m, cam_n, cfg.n_corr, seed, cfg.voxel)
    xm = to_channels10(scene, corr.crop_m)
    xn = to_channels10(scene, corr.crop_n)
    if augment:
        xm = augment_crop(xm, (seed, 1))
        xn = augment_crop(xn, (seed, 2))
    fm = encoder(xm)
    fn = encoder(xn)
    return contrastive_loss(T.take_rows(fm, corr.pairs[:, 0]), T.take_rows(fn, corr.pairs[:, 1]),
                            cfg.tau), corr, fm, fn


def train_vi(scenes: Sequence[GaussianScene], cameras: Sequence[Sequence[Camera]],
             cfg: VITrainConfig | None = None, encoder: PointEncoder | None = None):
    """Contrastive training over mined view pairs; returns (encoder, per-step losses)."""
    cfg = cfg or VITrainConfig()
    pairs = []
    for s, (scene, cams) in enumerate(zip(scenes, cameras)):
        for m, n, _ in mine_view_pairs(scene, cams, cfg.overlap_lo, cfg.overlap_hi):
            pairs.append((s, m, n))
    if not pairs:
        raise ValueError(f"no view pairs with overlap in [{cfg.overlap_lo}, {cfg.overlap_hi}] "
                         f"across {len(scenes)} scene(s)")
    encoder = encoder or PointEncoder(cfg.encoder_config())
    opt = Adam(encoder.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    trace: list[float] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng((cfg.seed, epoch)).permutation(len(pairs))
        for pi in order:
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            s, m, n = pairs[pi]
            loss, corr, _, _ = _pair_step(encoder, scenes[s], cameras[s][m], cameras[s][n], cfg,
                                          seed=cfg.seed * 1_000_003 + step)
            loss.backward()
            opt.step()
            trace.append(loss.item() / len(corr))
            step += 1
        if cfg.checkpoint_dir:
            Path(cfg.checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(cfg.checkpoint_dir) / f"encoder_epoch{epoch:03d}.ckpt",
                            encoder.state_dict())
        log.info("train_vi epoch %d: mean loss/pair %.4f", epoch, np.mean(trace[-len(pairs):]))
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break
    return encoder, trace


def pair_similarities(encoder: PointEncoder, scene: GaussianScene, cam_m: Camera, cam_n: Camera,
                      seed: int = 0, n_max: int = N_CORRESPONDENCES):
    """Cosine similarities of positive pairs and of a shuffled (mismatched) pairing."""
    corr = sample_correspondences(scene, cam_m, cam_n, n_max, seed)
    fm = encoder(to_channels10(scene, corr.crop_m)).data[corr.pairs[:, 0]]
    fn = encoder(to_channels10(scene, corr.crop_n)).data[corr.pairs[:, 1]]
    pos = (fm * fn).sum(axis=1)
    perm = np.random.default_rng(seed).permutation(len(corr))
    perm = np.where(perm == np.arange(len(corr)), (perm + 1) % len(corr), perm)
    neg = (fm * fn[perm]).sum(axis=1)
    return pos, neg
