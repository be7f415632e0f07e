"""Pinhole cameras, view frustums, and overlap-based view-pair mining."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

OVERLAP_LO = 0.3
OVERLAP_HI = 0.8


@dataclass
class Camera:
    """World-to-camera pose (x_cam = R x + t); +x right, +y down, +z forward."""

    K: np.ndarray
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int
    near: float = 0.1
    far: float = 100.0

    def __post_init__(self) -> None:
        self.K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not 0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near}, far={self.far}")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-9:
            raise ValueError("R is not orthonormal")

    fx = property(lambda self: float(self.K[0, 0]))
    fy = property(lambda self: float(self.K[1, 1]))
    cx = property(lambda self: float(self.K[0, 2]))
    cy = property(lambda self: float(self.K[1, 2]))

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def forward(self) -> np.ndarray:
        return self.R[2].copy()

    def to_json(self) -> dict:
        return {"K": self.K.reshape(-1).tolist(), "R": self.R.reshape(-1).tolist(),
                "t": self.t.tolist(), "width": self.width, "height": self.height,
                "near": self.near, "far": self.far}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(np.asarray(d["K"]).reshape(3, 3), np.asarray(d["R"]).reshape(3, 3),
                   d["t"], d["width"], d["height"], d.get("near", 0.1), d.get("far", 100.0))


def look_at(position, target, width: int, height: int, fov_deg: float = 60.0,
            near: float = 0.1, far: float = 100.0, up=(0.0, 0.0, 1.0)) -> Camera:
    pos = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        # looking along ``up``: any perpendicular axis will do
        alt = np.eye(3)[int(np.argmin(np.abs(fwd)))]
        right = np.cross(fwd, alt)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
    return Camera(K, R, -R @ pos, width, height, near, far)


def save_cameras(path: str | Path, cams: Sequence[Camera]) -> None:
    Path(path).write_text(json.dumps([c.to_json() for c in cams], indent=1))


def load_cameras(path: str | Path) -> list[Camera]:
    return [Camera.from_json(d) for d in json.loads(Path(path).read_text())]


class Projection(NamedTuple):
    u: np.ndarray
    v: np.ndarray
    depth: np.ndarray
    in_front: np.ndarray


def project_points(cam: Camera, x: np.ndarray) -> Projection:
    """Project (N, 3) world points; u is the column coordinate, v the row."""
    p = np.atleast_2d(np.asarray(x, dtype=np.float64)) @ cam.R.T + cam.t
    depth = p[:, 2]
    in_front = depth > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(in_front, cam.fx * p[:, 0] / depth + cam.cx, np.nan)
        v = np.where(in_front, cam.fy * p[:, 1] / depth + cam.cy, np.nan)
    return Projection(u, v, depth, in_front)


def project_point(cam: Camera, x) -> Projection:
    pr = project_points(cam, np.asarray(x, dtype=np.float64).reshape(1, 3))
    return Projection(float(pr.u[0]), float(pr.v[0]), float(pr.depth[0]), bool(pr.in_front[0]))


@dataclass
class Frustum:
    """Six inward planes n.x + d, ordered left, right, top, bottom, near, far.

    Left/top are closed (>= 0), the rest open (> 0), matching the
    half-open pixel rectangle [0, W) x [0, H) and the open depth range.
    """

    normals: np.ndarray
    offsets: np.ndarray

    closed = (True, False, True, False, False, False)

    def signed(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(x) @ self.normals.T + self.offsets

    def contains(self, x: np.ndarray) -> np.ndarray:
        s = self.signed(x)
        inside = np.ones(s.shape[0], dtype=bool)
        for j, closed in enumerate(self.closed):
            inside &= (s[:, j] >= 0) if closed else (s[:, j] > 0)
        return inside


def compute_frustum(cam: Camera) -> Frustum:
    fx, fy, cx, cy = cam.fx, cam.fy, cam.cx, cam.cy
    w, h = cam.width, cam.height
    # camera-space planes n_c . p + d_c
    nc = np.array([
        [fx, 0.0, cx],
        [-fx, 0.0, w - cx],
        [0.0, fy, cy],
        [0.0, -fy, h - cy],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ])
    dc = np.array([0.0, 0.0, 0.0, 0.0, -cam.near, cam.far])
    norms = np.linalg.norm(nc, axis=1)
    nc = nc / norms[:, None]
    dc = dc / norms
    normals = nc @ cam.R
    offsets = nc @ cam.t + dc
    return Frustum(normals, offsets)


def in_view(cam: Camera, x: np.ndarray) -> np.ndarray:
    """Reference membership test by projection and bounds check."""
    pr = project_points(cam, x)
    with np.errstate(invalid="ignore"):
        return (pr.in_front & (pr.depth > cam.near) & (pr.depth < cam.far)
                & (pr.u >= 0) & (pr.u < cam.width) & (pr.v >= 0) & (pr.v < cam.height))


def gaussians_in_frustum(frustum: Frustum, scene) -> np.ndarray:
    means = scene.means if hasattr(scene, "means") else np.asarray(scene)
    if len(means) == 0:
        return np.zeros(0, dtype=np.intp)
    return np.flatnonzero(frustum.contains(means))


def _overlap(a: np.ndarray, b: np.ndarray) -> float:
    if a.size == 0 or b.size == 0:
        return 0.0
    inter = np.intersect1d(a, b, assume_unique=True).size
    return inter / min(a.size, b.size)


def frustum_overlap(scene, cam_m: Camera, cam_n: Camera) -> float:
    """|G_m & G_n| / min(|G_m|, |G_n|) over frustum-member index sets."""
    return _overlap(gaussians_in_frustum(compute_frustum(cam_m), scene),
                    gaussians_in_frustum(compute_frustum(cam_n), scene))


def mine_view_pairs(scene, cameras: Sequence[Camera], lo: float = OVERLAP_LO,
                    hi: float = OVERLAP_HI) -> list[tuple[int, int, float]]:
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    members = [gaussians_in_frustum(compute_frustum(c), scene) for c in cameras]
    pairs = []
    for m in range(len(cameras)):
        for n in range(m + 1, len(cameras)):
            ov = _overlap(members[m], members[n])
            if lo <= ov <= hi:
                pairs.append((m, n, ov))
    return pairs
