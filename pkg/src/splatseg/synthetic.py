"""Seeded toy scenes: a floor plane plus axis-aligned boxes, one class per shape family."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera, look_at, save_cameras
from .imageio import write_pfm, write_pgm, write_ppm
from .raster import DEFAULT_CONFIG, RasterConfig, render
from .scene import GaussianScene, rotmat_to_quat, save_ply
from .sh import rgb_to_dc

FLOOR_HALF = 2.5
PLACE_HALF = 1.7

# (footprint x range, footprint y range, height range) per shape family
SHAPE_FAMILIES = [
    ((0.55, 0.8), (0.55, 0.8), (0.5, 0.8)),      # crate
    ((0.25, 0.35), (0.25, 0.35), (1.2, 1.6)),    # pillar
    ((1.0, 1.4), (0.6, 0.9), (0.2, 0.35)),       # low slab
    ((0.35, 0.5), (1.0, 1.3), (0.9, 1.1)),       # long cabinet
]

CLASS_COLORS = np.array([
    [0.72, 0.68, 0.60],   # floor
    [0.80, 0.35, 0.20],
    [0.25, 0.45, 0.80],
    [0.30, 0.70, 0.35],
    [0.75, 0.70, 0.20],
    [0.60, 0.30, 0.70],
    [0.20, 0.65, 0.70],
])


@dataclass
class SyntheticData:
    scene: GaussianScene
    cameras: list[Camera]
    images: list[np.ndarray]
    masks: list[np.ndarray]
    depths: list[np.ndarray]
    n_classes: int


def _face_frames():
    """(normal, tangent1, tangent2) for +x, -x, +y, -y, +z faces."""
    e = np.eye(3)
    return [
        (e[0], e[1], e[2]), (-e[0], e[2], e[1]),
        (e[1], e[2], e[0]), (-e[1], e[0], e[2]),
        (e[2], e[0], e[1]),
    ]


def _place_on_rect(rng, n, origin, t1, t2, a, b):
    nx = max(1, int(round(np.sqrt(n * a / b))))
    ny = max(1, int(np.ceil(n / nx)))
    cells = rng.choice(nx * ny, size=n, replace=False) if n <= nx * ny else np.arange(n) % (nx * ny)
    cx, cy = cells % nx, cells // nx
    u = (cx + rng.uniform(0.15, 0.85, n)) / nx * a
    v = (cy + rng.uniform(0.15, 0.85, n)) / ny * b
    pts = origin[None] + u[:, None] * t1[None] + v[:, None] * t2[None]
    spacing = np.sqrt(a * b / max(n, 1))
    return pts, spacing


def _allocate(areas, total, minimum=1):
    areas = np.asarray(areas, dtype=np.float64)
    raw = areas / areas.sum() * (total - minimum * len(areas))
    base = np.floor(raw).astype(int)
    rem = total - minimum * len(areas) - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rem]] += 1
    return base + minimum


def _place_objects(rng, n_classes):
    boxes = []
    for cls in range(1, n_classes):
        fam = SHAPE_FAMILIES[(cls - 1) % len(SHAPE_FAMILIES)]
        for _ in range(int(rng.integers(1, 3))):
            for _attempt in range(200):
                sx, sy, sz = (rng.uniform(*fam[0]), rng.uniform(*fam[1]), rng.uniform(*fam[2]))
                if rng.random() < 0.5:
                    sx, sy = sy, sx
                cx, cy = rng.uniform(-PLACE_HALF + sx / 2, PLACE_HALF - sx / 2), \
                    rng.uniform(-PLACE_HALF + sy / 2, PLACE_HALF - sy / 2)
                lo = np.array([cx - sx / 2, cy - sy / 2, 0.0])
                hi = np.array([cx + sx / 2, cy + sy / 2, sz])
                if all(np.any(lo[:2] > b[1][:2] + 0.15) or np.any(hi[:2] < b[0][:2] - 0.15)
                       for b in boxes):
                    boxes.append((lo, hi, cls))
                    break
    return boxes


def make_room_scene(n_classes: int, count: int, seed: int, palette_mix: float = 0.0,
                    sh_rest_std: float = 0.01) -> GaussianScene:
    """Floor (class 0) plus boxes of class-specific shape families.

    ``palette_mix`` is the probability that an object takes a colour from
    another class, which makes colour alone an unreliable class cue.
    """
    rng = np.random.default_rng(seed)
    boxes = _place_objects(rng, n_classes)
    # rectangles: (origin, t1, t2, a, b, normal, class, colour)
    rects = []
    floor_col = CLASS_COLORS[0]
    rects.append((np.array([-FLOOR_HALF, -FLOOR_HALF, 0.0]), np.eye(3)[0], np.eye(3)[1],
                  2 * FLOOR_HALF, 2 * FLOOR_HALF, np.eye(3)[2], 0, floor_col))
    for lo, hi, cls in boxes:
        src = cls
        if palette_mix > 0 and rng.random() < palette_mix:
            src = int(rng.integers(1, n_classes))
        col = np.clip(CLASS_COLORS[src % len(CLASS_COLORS)] + rng.uniform(-0.08, 0.08, 3), 0.02, 0.98)
        size = hi - lo
        for normal, t1, t2 in _face_frames():
            origin = np.where(normal > 0, hi, lo).astype(np.float64)
            a1, a2 = int(np.argmax(np.abs(t1))), int(np.argmax(np.abs(t2)))
            origin[a1], origin[a2] = lo[a1], lo[a2]
            rects.append((origin, np.abs(t1), np.abs(t2), size[a1], size[a2], normal, cls, col))
    areas = [r[3] * r[4] for r in rects]
    if count < len(rects):
        raise ValueError(f"count {count} too small for {len(rects)} surfaces")
    alloc = _allocate(areas, count)

    means, quats, scales, labels, colors = [], [], [], [], []
    for (origin, t1, t2, a, b, normal, cls, col), n in zip(rects, alloc):
        pts, spacing = _place_on_rect(rng, int(n), origin, t1, t2, a, b)
        frame = np.stack([t1, t2, normal], axis=1)
        if np.linalg.det(frame) < 0:
            frame[:, 0] = -frame[:, 0]
        q = rotmat_to_quat(frame[None])[0]
        sig_t = 0.55 * spacing
        means.append(pts)
        quats.append(np.repeat(q[None], n, axis=0))
        s = np.log(np.array([sig_t, sig_t, 0.15 * sig_t]))
        scales.append(np.repeat(s[None], n, axis=0) + rng.normal(0, 0.05, (n, 3)))
        labels.append(np.full(n, cls))
        noise = rng.uniform(-0.04, 0.04, (n, 3))
        if cls == 0:
            # two-tone tiling on the floor
            tile = (np.floor(pts[:, 0] / 0.5) + np.floor(pts[:, 1] / 0.5)) % 2
            noise = noise + (tile[:, None] - 0.5) * 0.12
        colors.append(np.clip(col + noise, 0.0, 1.0))
    means = np.concatenate(means)
    n = means.shape[0]
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = rgb_to_dc(np.concatenate(colors))
    if sh_rest_std > 0:
        sh[:, 1:, :] = rng.normal(0.0, sh_rest_std, (n, 15, 3))
    opacity = np.log(0.95 / 0.05) + rng.normal(0, 0.2, n)
    return GaussianScene(means, np.concatenate(quats), np.concatenate(scales), opacity, sh,
                         np.concatenate(labels))


def camera_ring(n_views: int, width: int, height: int, seed: int, radius: float = 2.8,
                height_m: float = 1.8, fov_deg: float = 60.0, aim_radius: float = 1.5,
                aim_offset: float = 0.7) -> list[Camera]:
    """Ring of inward cameras, each aimed off-centre (alternating sides)."""
    rng = np.random.default_rng(seed + 7919)
    phase = rng.uniform(0, 2 * np.pi)
    cams = []
    for j in range(n_views):
        ang = phase + 2 * np.pi * j / n_views
        pos = np.array([radius * np.cos(ang), radius * np.sin(ang), height_m + rng.uniform(-0.1, 0.1)])
        aim = ang + np.pi + (aim_offset if j % 2 else -aim_offset)
        target = np.array([aim_radius * np.cos(aim), aim_radius * np.sin(aim), 0.2])
        target[:2] += rng.uniform(-0.1, 0.1, 2)
        cams.append(look_at(pos, target, width, height, fov_deg, near=0.1, far=20.0))
    return cams


def random_scene(n: int, seed: int, extent: float = 1.0, depth: float = 4.0,
                 sh_rest_std: float = 0.1) -> GaussianScene:
    """Unstructured Gaussians in a box in front of a camera at the origin looking +z."""
    rng = np.random.default_rng(seed)
    means = np.column_stack([rng.uniform(-extent, extent, n), rng.uniform(-extent, extent, n),
                             rng.uniform(depth - 1.0, depth + 1.0, n)])
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    scales = np.log(rng.uniform(0.02, 0.15, (n, 3)))
    opacity = rng.normal(0.0, 1.5, n)
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = rng.normal(0, 0.8, (n, 3))
    sh[:, 1:] = rng.normal(0, sh_rest_std, (n, 15, 3))
    return GaussianScene(means, q, scales, opacity, sh, rng.integers(0, 3, n))


GT_COVERAGE = 0.5


def normalized_depth(out, coverage: float = GT_COVERAGE) -> np.ndarray:
    """Blended depth divided by accumulated opacity; 0 (invalid) where coverage is low."""
    acc = 1.0 - out.transmittance
    ok = acc > coverage
    return np.where(ok, out.depth / np.where(ok, acc, 1.0), 0.0)


def generate_synthetic_scene(layout: str = "room", n_classes: int = 4, count: int = 3000,
                             seed: int = 0, n_views: int = 8, width: int = 128, height: int = 128,
                             palette_mix: float = 0.0,
                             cfg: RasterConfig = DEFAULT_CONFIG) -> SyntheticData:
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if count < 1:
        raise ValueError(f"need at least one Gaussian, got {count}")
    if n_classes > count:
        raise ValueError(f"more classes ({n_classes}) than Gaussians ({count})")
    if layout != "room":
        raise ValueError(f"unknown layout {layout!r}")
    scene = make_room_scene(n_classes, count, seed, palette_mix)
    cams = camera_ring(n_views, width, height, seed)
    images, masks, depths = [], [], []
    onehot = np.zeros((len(scene), n_classes))
    onehot[np.arange(len(scene)), scene.labels] = 1.0
    for cam in cams:
        out = render(scene, cam, onehot, cfg)
        images.append(out.image)
        depths.append(normalized_depth(out))
        m = np.argmax(out.features, axis=2).astype(np.uint8)
        m[out.features.sum(axis=2) <= 0] = 255
        masks.append(m)
    return SyntheticData(scene, cams, images, masks, depths, n_classes)


def write_dataset(data: SyntheticData, root: str | Path, precision: str = "double") -> Path:
    """scene.ply, cameras.json, images/NNN.ppm, masks/NNN.pgm, depth/NNN.pfm."""
    root = Path(root)
    for sub in ("images", "masks", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    save_ply(data.scene, root / "scene.ply", precision)
    save_cameras(root / "cameras.json", data.cameras)
    for j, (img, mask, dep) in enumerate(zip(data.images, data.masks, data.depths)):
        write_ppm(root / "images" / f"{j:03d}.ppm", img)
        write_pgm(root / "masks" / f"{j:03d}.pgm", mask)
        write_pfm(root / "depth" / f"{j:03d}.pfm", dep)
    return root
