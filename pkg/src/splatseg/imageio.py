"""Minimal PPM (P6), PGM (P5) and little-endian PFM readers/writers."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _read_tokens(buf: bytes, n: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < n:
        while buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            i = buf.index(b"\n", i) + 1
            continue
        j = i
        while not buf[j:j + 1].isspace():
            j += 1
        tokens.append(buf[i:j])
        i = j
    return tokens, i + 1


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = a.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + a.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Return float64 (H, W, 3) on [0, 1]."""
    buf = Path(path).read_bytes()
    (magic, w, h, _), off = _read_tokens(buf, 4)
    if magic != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = int(w), int(h)
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    a = np.asarray(img, dtype=np.uint8)
    h, w = a.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + a.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, _), off = _read_tokens(buf, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(w), int(h)
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).copy()


def write_pfm(path: str | Path, img: np.ndarray) -> None:
    """1- or 3-channel float32 PFM, little-endian, rows stored bottom to top."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        magic, h, w = "Pf", a.shape[0], a.shape[1]
    elif a.ndim == 3 and a.shape[2] == 3:
        magic, h, w = "PF", a.shape[0], a.shape[1]
    else:
        raise ValueError(f"PFM holds 1 or 3 channels, got shape {a.shape}")
    body = np.ascontiguousarray(a[::-1]).astype("<f4").tobytes()
    Path(path).write_bytes(f"{magic}\n{w} {h}\n-1.0\n".encode() + body)


def read_pfm(path: str | Path) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, scale), off = _read_tokens(buf, 4)
    if magic not in (b"PF", b"Pf"):
        raise ValueError(f"{path}: not a PFM file")
    w, h, scale = int(w), int(h), float(scale)
    ch = 3 if magic == b"PF" else 1
    dt = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(buf, dtype=dt, count=w * h * ch, offset=off).astype(np.float64)
    data = data.reshape(h, w, ch)[::-1]
    return data[:, :, 0].copy() if ch == 1 else data.copy()
