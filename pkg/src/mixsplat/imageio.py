"""Image I/O: 8-bit PNG via Pillow, 32-bit float PFM for depth/alpha."""

import numpy as np
from PIL import Image

from .errors import FormatError


def save_png(path, img):
    """img: (H, W, 3) or (H, W) float in [0, 1]."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    u8 = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(u8).save(path)


def load_png(path):
    """Returns (H, W, 3) float64 in [0, 1]; grayscale is expanded."""
    img = np.asarray(Image.open(path))
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.shape[2] == 4:
        img = img[:, :, :3]
    return img.astype(np.float64) / 255.0


def save_pfm(path, img):
    """Write a little-endian PFM ('PF' color / 'Pf' grayscale)."""
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise FormatError("PFM needs (H, W) or (H, W, 3) data")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale = little endian
        f.write(arr[::-1].astype("<f4").tobytes())  # bottom-up row order


def load_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: not a PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        count = w * h * (3 if header == b"PF" else 1)
        data = np.frombuffer(f.read(count * 4), dtype=dtype)
        if data.size != count:
            raise FormatError(f"{path}: truncated PFM data")
    shape = (h, w, 3) if header == b"PF" else (h, w)
    return data.reshape(shape)[::-1].astype(np.float64)
