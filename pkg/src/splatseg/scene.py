"""Gaussian scene container, 3DGS-style PLY persistence and point encodings."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sh import N_COEFFS, dc_to_rgb
from .tensor import stable_sigmoid


class SceneError(ValueError):
    pass


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N, 4) quaternions in (w, x, y, z) order -> (N, 3, 3); a single (4,) gives (3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    if q.ndim == 1:
        return quat_to_rotmat(q[None])[0]
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    r = np.empty((q.shape[0], 3, 3))
    r[:, 0, 0] = 1 - 2 * (y * y + z * z)
    r[:, 0, 1] = 2 * (x * y - w * z)
    r[:, 0, 2] = 2 * (x * z + w * y)
    r[:, 1, 0] = 2 * (x * y + w * z)
    r[:, 1, 1] = 1 - 2 * (x * x + z * z)
    r[:, 1, 2] = 2 * (y * z - w * x)
    r[:, 2, 0] = 2 * (x * z - w * y)
    r[:, 2, 1] = 2 * (y * z + w * x)
    r[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def rotmat_to_quat(r: np.ndarray) -> np.ndarray:
    """(N, 3, 3) rotation matrices -> (N, 4) unit quaternions (w, x, y, z), w >= 0."""
    r = np.asarray(r, dtype=np.float64)
    out = np.empty((r.shape[0], 4))
    for i, m in enumerate(r):
        tr = np.trace(m)
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        q = np.asarray(q)
        q = q / np.linalg.norm(q)
        out[i] = q if q[0] >= 0 else -q
    return out


@dataclass
class GaussianScene:
    """N Gaussians with opacity stored as a logit and scale as a log.

    ``sh`` is (N, 16, 3): coefficient-major, DC first, RGB last axis.
    """

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray
    labels: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = self.means.shape[0]
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, N_COEFFS, 3)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def count(self) -> int:
        return len(self)

    @classmethod
    def empty(cls) -> "GaussianScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, N_COEFFS, 3)))

    def copy(self) -> "GaussianScene":
        return GaussianScene(self.means.copy(), self.quats.copy(), self.log_scales.copy(),
                             self.opacity_logits.copy(), self.sh.copy(),
                             None if self.labels is None else self.labels.copy())

    def subset(self, idx) -> "GaussianScene":
        idx = np.asarray(idx, dtype=np.intp)
        return GaussianScene(self.means[idx], self.quats[idx], self.log_scales[idx],
                             self.opacity_logits[idx], self.sh[idx],
                             None if self.labels is None else self.labels[idx])

    @property
    def opacities(self) -> np.ndarray:
        return stable_sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def rotations(self) -> np.ndarray:
        return quat_to_rotmat(self.quats)

    def covariances(self) -> np.ndarray:
        """World-space covariances R diag(s)^2 R^T, (N, 3, 3)."""
        r = self.rotations()
        m = r * self.scales[:, None, :]
        return m @ np.swapaxes(m, 1, 2)


# -- PLY ---------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

REQUIRED_PROPERTIES = (
    ["x", "y", "z"] + [f"f_dc_{i}" for i in range(3)] + [f"f_rest_{i}" for i in range(45)]
    + ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
)


def _parse_header(buf: bytes) -> tuple[int, list[tuple[str, str]], int]:
    end = buf.find(b"end_header")
    if not buf.startswith(b"ply") or end < 0:
        raise SceneError("not a PLY file (missing 'ply' magic or 'end_header')")
    nl = buf.find(b"\n", end)
    body_start = nl + 1
    lines = buf[:end].decode("ascii").splitlines()
    count = None
    props: list[tuple[str, str]] = []
    in_vertex = False
    fmt = None
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise SceneError("list properties are not supported on vertices")
            if parts[1] not in _PLY_TYPES:
                raise SceneError(f"unknown PLY property type {parts[1]!r}")
            props.append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise SceneError(f"unsupported PLY format {fmt!r}; need binary_little_endian")
    if count is None:
        raise SceneError("PLY header declares no vertex element")
    return count, props, body_start


def load_ply(path: str | Path) -> GaussianScene:
    buf = Path(path).read_bytes()
    count, props, start = _parse_header(buf)
    names = [p[0] for p in props]
    for req in REQUIRED_PROPERTIES:
        if req not in names:
            raise SceneError(f"PLY is missing required property {req!r}")
    dtype = np.dtype([(n, "<" + t) for n, t in props])
    expected = count * dtype.itemsize
    actual = len(buf) - start
    if actual < expected:
        raise SceneError(f"truncated PLY payload: expected {expected} bytes, got {actual}")
    v = np.frombuffer(buf, dtype=dtype, count=count, offset=start)
    col = lambda n: v[n].astype(np.float64)

    means = np.stack([col("x"), col("y"), col("z")], axis=1) if count else np.zeros((0, 3))
    bad = np.flatnonzero(~np.isfinite(means).all(axis=1))
    if bad.size:
        raise SceneError(f"non-finite coordinate at vertex index {int(bad[0])}")
    dc = np.stack([col(f"f_dc_{i}") for i in range(3)], axis=1) if count else np.zeros((0, 3))
    rest = np.stack([col(f"f_rest_{i}") for i in range(45)], axis=1) if count else np.zeros((0, 45))
    sh = np.empty((count, N_COEFFS, 3))
    sh[:, 0, :] = dc
    sh[:, 1:, :] = rest.reshape(count, 3, 15).transpose(0, 2, 1)
    quats = np.stack([col(f"rot_{i}") for i in range(4)], axis=1) if count else np.zeros((0, 4))
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    if count and np.any(norms == 0):
        raise SceneError(f"zero quaternion at vertex index {int(np.flatnonzero(norms[:, 0] == 0)[0])}")
    off = np.abs(norms[:, 0] - 1.0) > 1e-12 if count else np.zeros(0, bool)
    quats[off] = quats[off] / norms[off]
    scales = np.stack([col(f"scale_{i}") for i in range(3)], axis=1) if count else np.zeros((0, 3))
    labels = v["label"].astype(np.int64) if "label" in names else None
    return GaussianScene(means, quats, scales, col("opacity") if count else np.zeros(0), sh, labels)


def save_ply(scene: GaussianScene, path: str | Path, precision: str = "double") -> None:
    """Write a binary little-endian PLY.  ``precision='double'`` round-trips exactly."""
    if precision not in ("double", "float"):
        raise ValueError("precision must be 'double' or 'float'")
    ftype = "f8" if precision == "double" else "f4"
    n = len(scene)
    fields = [(name, "<" + ftype) for name in REQUIRED_PROPERTIES]
    if scene.labels is not None:
        fields.append(("label", "<i4"))
    arr = np.zeros(n, dtype=np.dtype(fields))
    for i, axis in enumerate("xyz"):
        arr[axis] = scene.means[:, i]
    for i in range(3):
        arr[f"f_dc_{i}"] = scene.sh[:, 0, i]
    rest = scene.sh[:, 1:, :].transpose(0, 2, 1).reshape(n, 45)
    for i in range(45):
        arr[f"f_rest_{i}"] = rest[:, i]
    arr["opacity"] = scene.opacity_logits
    for i in range(3):
        arr[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(4):
        arr[f"rot_{i}"] = scene.quats[:, i]
    if scene.labels is not None:
        arr["label"] = scene.labels
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {precision} {name}" for name in REQUIRED_PROPERTIES]
    if scene.labels is not None:
        header.append("property int label")
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


# -- subsampling and encodings -----------------------------------------------

VOXEL_SIZE = 0.07


def voxel_subsample(points_or_scene, voxel: float = VOXEL_SIZE) -> np.ndarray:
    """One representative per occupied voxel, ascending indices.

    The representative is the point closest to the voxel's cell centre;
    ties go to the smallest index.
    """
    if voxel <= 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    pts = points_or_scene.means if isinstance(points_or_scene, GaussianScene) else np.asarray(points_or_scene)
    if pts.shape[0] == 0:
        return np.zeros(0, dtype=np.intp)
    keys = np.floor(pts / voxel).astype(np.int64)
    _, group = np.unique(keys, axis=0, return_inverse=True)
    group = group.reshape(-1)
    centres = (keys + 0.5) * voxel
    d2 = ((pts - centres) ** 2).sum(axis=1)
    idx = np.arange(pts.shape[0])
    order = np.lexsort((idx, d2, group))
    first = np.ones(order.size, dtype=bool)
    first[1:] = group[order[1:]] != group[order[:-1]]
    return np.sort(order[first])


CHANNELS10 = ("x", "y", "z", "r", "g", "b", "scale_x", "scale_y", "scale_z", "opacity")


def to_channels10(scene: GaussianScene, indices=None) -> np.ndarray:
    """Per-Gaussian encoder input: xyz, DC colour as RGB, activated scale, opacity."""
    if indices is None:
        indices = np.arange(len(scene))
    indices = np.asarray(indices, dtype=np.intp)
    if indices.size and (indices.min() < 0 or indices.max() >= len(scene)):
        raise IndexError(f"index out of range for scene of {len(scene)} Gaussians")
    out = np.empty((indices.size, 10))
    out[:, 0:3] = scene.means[indices]
    out[:, 3:6] = dc_to_rgb(scene.sh[indices, 0, :])
    out[:, 6:9] = np.exp(scene.log_scales[indices])
    out[:, 9] = stable_sigmoid(scene.opacity_logits[indices])
    return out
