"""Image files: PFM for linear float layers, 8-bit PNG previews with gamma 2.2."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

GAMMA = 2.2


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM (scale -1.0). Rows are stored bottom-to-top per the format."""
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.ascontiguousarray(img[::-1]).astype("<f4").tobytes())


_PFM_HEADER = re.compile(rb"^(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PFM_HEADER.match(data)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=m.end())
    shape = (h, w, 3) if channels == 3 else (h, w)
    return arr.reshape(shape)[::-1].astype(np.float32)


def to_uint8(img: np.ndarray, gamma: float = GAMMA) -> np.ndarray:
    img = np.clip(np.nan_to_num(np.asarray(img, float)), 0.0, 1.0)
    return np.round(255.0 * img ** (1.0 / gamma)).astype(np.uint8)


def write_png(path, img: np.ndarray, gamma: float = GAMMA) -> None:
    """Linear image in [0, 1] to an 8-bit PNG after ``x ** (1/gamma)`` encoding."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img, gamma)).save(path)


def read_png(path, gamma: float = GAMMA) -> np.ndarray:
    """8-bit image back to linear float RGB."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return arr**gamma


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        img = read_pfm(path).astype(np.float64)
        return np.repeat(img[..., None], 3, axis=-1) if img.ndim == 2 else img
    return read_png(path)


def layer_name(layer: str, view: int, ext: str) -> str:
    return f"{layer}_{view:04d}.{ext}"
