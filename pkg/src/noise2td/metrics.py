"""Image quality metrics and low-dose / denoised / full-dose comparison reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
REPORT_COLUMNS = ("domain", "pair", "frame_index", "psnr_db", "ssim", "l1")


def _pair(x, ref):
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {ref.shape}")
    return x, ref


def _data_range(ref, data_range):
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    return float(data_range)


def psnr(x, ref, data_range: Optional[float] = None) -> float:
    """10 log10(L^2 / MSE) in dB, capped at 99 dB (exact match)."""
    x, ref = _pair(x, ref)
    data_range = _data_range(ref, data_range)
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(data_range**2 / mse), PSNR_CAP_DB)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    half = len(g) // 2
    out = correlate1d(correlate1d(img, g, axis=-1, mode="nearest"), g, axis=-2, mode="nearest")
    return out[..., half:img.shape[-2] - half, half:img.shape[-1] - half]


def ssim_map(x, ref, data_range: Optional[float] = None) -> np.ndarray:
    x, ref = _pair(x, ref)
    if x.ndim != 2:
        raise ValueError("ssim expects 2-D images")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"image {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    L = _data_range(ref, data_range)
    c1, c2 = (SSIM_K1 * L) ** 2, (SSIM_K2 * L) ** 2
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(ref, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(ref * ref, g) - my * my
    sxy = _filter_valid(x * ref, g) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))


def ssim(x, ref, data_range: Optional[float] = None) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), mean over valid positions."""
    return float(ssim_map(x, ref, data_range).mean())


def l1(x, ref) -> float:
    x, ref = _pair(x, ref)
    return float(np.mean(np.abs(x - ref)))


def stop_metric(ssim_value: float, l1_value: float, w_ssim: float = 0.86, w_l1: float = 0.14) -> float:
    """Validation loss 0.86 (1 - SSIM) + 0.14 L1; zero for a perfect output."""
    return w_ssim * (1.0 - ssim_value) + w_l1 * l1_value


@dataclass
class MetricReport:
    domain: str
    data_range: float
    # pair name -> list of per-frame dicts {frame_index, psnr_db, ssim, l1}
    pairs: dict = field(default_factory=dict)
    noise_params: Optional[dict] = None

    def aggregate(self, pair: str) -> dict:
        rows = self.pairs[pair]
        return {key: float(np.mean([r[key] for r in rows])) for key in ("psnr_db", "ssim", "l1")}

    def rows(self) -> list[dict]:
        out = []
        for pair, frames in self.pairs.items():
            for r in frames:
                out.append({"domain": self.domain, "pair": pair, **r})
            out.append({"domain": self.domain, "pair": pair, "frame_index": -1, **self.aggregate(pair)})
        return out


def compare_frames(x, ref, data_range: float) -> list[dict]:
    return [
        {"frame_index": i, "psnr_db": psnr(a, b, data_range), "ssim": ssim(a, b, data_range), "l1": l1(a, b)}
        for i, (a, b) in enumerate(zip(x, ref))
    ]


def _check_aligned(*stacks):
    first = stacks[0]
    for s in stacks[1:]:
        if s.shape != first.shape:
            raise ValueError(f"misaligned stacks: {s.shape} vs {first.shape}")
        if not np.allclose(s.geometry.angles, first.geometry.angles):
            raise ValueError("misaligned stacks: rotation angles differ")


def evaluate_report(noisy_stack, denoised_stack, clean_stack, with_recon: bool = False,
                    noise_params: Optional[dict] = None, grid: int = 128) -> list[MetricReport]:
    """Compare low-dose and denoised stacks to full dose, per frame and on average."""
    _check_aligned(noisy_stack, denoised_stack, clean_stack)
    clean = clean_stack.clean_frames if clean_stack.clean_frames is not None else clean_stack.frames
    data_range = float(clean.max() - clean.min())
    report = MetricReport("projection", data_range, noise_params=noise_params)
    report.pairs["noisy_vs_clean"] = compare_frames(noisy_stack.frames, clean, data_range)
    report.pairs["denoised_vs_clean"] = compare_frames(denoised_stack.frames, clean, data_range)
    reports = [report]
    if with_recon:
        from .recon import reconstruct_frames

        g = clean_stack.geometry
        ref = reconstruct_frames(clean, g, grid)
        img_range = float(ref.max() - ref.min())
        image = MetricReport("image", img_range, noise_params=noise_params)
        image.pairs["noisy_vs_clean"] = compare_frames(reconstruct_frames(noisy_stack.frames, g, grid), ref, img_range)
        image.pairs["denoised_vs_clean"] = compare_frames(
            reconstruct_frames(denoised_stack.frames, g, grid), ref, img_range)
        reports.append(image)
    return reports


def reports_to_csv(reports, path=None) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        for row in rep.rows():
            writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as f:
            f.write(text)
    return text
