"""Real spherical harmonics up to degree 3 (16 coefficients per channel)."""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)

N_COEFFS = 16


def sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Basis values (N, 16) for unit directions (N, 3)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((d.shape[0], N_COEFFS))
    out[:, 0] = SH_C0
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    out[:, 4] = SH_C2[0] * x * y
    out[:, 5] = SH_C2[1] * y * z
    out[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[:, 7] = SH_C2[3] * x * z
    out[:, 8] = SH_C2[4] * (xx - yy)
    out[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
    out[:, 10] = SH_C3[1] * x * y * z
    out[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
    out[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
    out[:, 14] = SH_C3[5] * z * (xx - yy)
    out[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh(sh: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Unclamped RGB (N, 3) from coefficients (N, 16, 3); includes the +0.5 offset."""
    return np.einsum("nk,nkc->nc", sh_basis(dirs), sh) + 0.5


def dc_to_rgb(f_dc: np.ndarray) -> np.ndarray:
    return SH_C0 * np.asarray(f_dc) + 0.5


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    return (np.asarray(rgb) - 0.5) / SH_C0
