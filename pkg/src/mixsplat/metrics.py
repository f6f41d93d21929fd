"""Rendering quality metrics: L2 (MSE), PSNR, SSIM.

LPIPS is a learned metric needing external network weights and is
reported as unavailable rather than computed.
"""

import numpy as np

from .losses import ssim


def mse(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image shape mismatch")
    return float(np.mean((a - b) ** 2))


def psnr_from_mse(value):
    return float("inf") if value == 0.0 else float(-10.0 * np.log10(value))


def compute_metrics(renders, truths):
    """Per-image and mean L2 / PSNR / SSIM for paired image lists."""
    if len(renders) != len(truths):
        raise ValueError("render/truth counts differ")
    if not renders:
        raise ValueError("no images given")
    rows = []
    for i, (r, t) in enumerate(zip(renders, truths)):
        m = mse(r, t)
        rows.append({"index": i, "l2": m, "psnr": psnr_from_mse(m),
                     "ssim": float(ssim(r, t)), "lpips": None})
    mean = {"index": "mean",
            "l2": float(np.mean([r["l2"] for r in rows])),
            "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows])),
            "lpips": None}
    return rows, mean


def format_metrics(rows, mean):
    def fmt(row):
        p = "inf" if row["psnr"] == float("inf") else f"{row['psnr']:.4f}"
        return (f"{row['index']:>5}  l2 {row['l2']:.6f}  psnr {p:>9}  "
                f"ssim {row['ssim']:.4f}  lpips unavailable")
    lines = [fmt(r) for r in rows]
    lines.append(fmt(mean))
    return "\n".join(lines)
