"""Parallel-beam filtered back-projection, one detector row at a time."""

from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .projsim import Geometry, ProjectionStack, TruncatedPayloadError, read_container_header

CTVL_MAGIC = b"CTVL"
CTVL_VERSION = 1
DEFAULT_GRID = 128


@dataclass
class Volume:
    voxels: np.ndarray  # (Z, P, P); voxels[z, iy, ix], y and x ascending over [-1, 1]
    pixel_size: float

    @property
    def grid(self) -> int:
        return self.voxels.shape[-1]


def ramlak_kernel(n: np.ndarray, tau: float) -> np.ndarray:
    """Discrete Ram-Lak impulse response h[n] for detector spacing tau."""
    n = np.asarray(n)
    h = np.zeros(n.shape, dtype=float)
    h[n == 0] = 1.0 / (4 * tau**2)
    odd = n % 2 == 1
    h[odd] = -1.0 / (math.pi**2 * n[odd].astype(float) ** 2 * tau**2)
    return h


def _padded_length(u: int) -> int:
    return 1 << max(int(math.ceil(math.log2(2 * u))), 2)


def filter_response(u: int, tau: float, window: str = "ramlak") -> np.ndarray:
    """Real frequency response of the (optionally windowed) kernel at padded length."""
    size = _padded_length(u)
    n = np.fft.fftfreq(size, 1.0 / size).astype(int)
    response = np.real(np.fft.fft(tau * ramlak_kernel(n, tau)))
    if window == "cosine":
        response = response * np.cos(np.pi * np.fft.fftfreq(size))
    elif window != "ramlak":
        raise ValueError(f"unknown window {window!r}")
    return response


def ramp_filter(sinogram, tau: float | None = None, window: str = "ramlak") -> np.ndarray:
    """Filter every detector row (last axis) with the Ram-Lak kernel.

    Linear convolution through FFTs zero-padded to a power of two >= 2U.
    ``tau`` defaults to the bin width of a [-1, 1] detector.
    """
    sinogram = np.asarray(sinogram, dtype=float)
    u = sinogram.shape[-1]
    if u < 4:
        raise ValueError("need at least 4 detector bins")
    tau = 2.0 / u if tau is None else tau
    size = _padded_length(u)
    spectrum = np.fft.fft(sinogram, n=size, axis=-1) * filter_response(u, tau, window)
    return np.real(np.fft.ifft(spectrum, axis=-1))[..., :u]


def _check_coverage(geometry: Geometry):
    span = geometry.num_angles * abs(geometry.angle_step)
    if span < math.pi - 1e-9:
        warnings.warn(f"angular coverage {span:.3f} rad is less than pi", RuntimeWarning, stacklevel=3)


def backproject(filtered, geometry: Geometry, grid: int = DEFAULT_GRID) -> np.ndarray:
    """Back-project filtered rows (N, ..., U) onto a grid x grid image per leading slice."""
    filtered = np.asarray(filtered, dtype=float)
    n, u = filtered.shape[0], filtered.shape[-1]
    rows = filtered.reshape(n, -1, u)
    tau = geometry.bin_width
    coords = -1.0 + (np.arange(grid) + 0.5) * (2.0 / grid)
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    xx, yy = xx.ravel(), yy.ravel()
    image = np.zeros((rows.shape[1], grid * grid))
    padded = np.concatenate([rows, np.zeros((n, rows.shape[1], 1))], axis=-1)
    for i, theta in enumerate(geometry.angles):
        pos = (xx * math.cos(theta) + yy * math.sin(theta) + 1.0) / tau - 0.5
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        # out-of-range taps read the trailing zero column
        i0 = np.where((lo >= 0) & (lo < u), lo, u)
        i1 = np.where((lo + 1 >= 0) & (lo + 1 < u), lo + 1, u)
        image += padded[i][:, i0] * (1 - frac) + padded[i][:, i1] * frac
    image *= math.pi / n
    return image.reshape(*filtered.shape[1:-1], grid, grid)


def fbp_slice(sinogram, geometry: Geometry, grid: int = DEFAULT_GRID, window: str = "ramlak") -> np.ndarray:
    """Reconstruct one (N, U) sinogram into a grid x grid slice."""
    _check_coverage(geometry)
    sinogram = np.asarray(sinogram, dtype=float)
    if sinogram.shape != (geometry.num_angles, geometry.detector_bins):
        raise ValueError(f"sinogram shape {sinogram.shape} does not match geometry")
    return backproject(ramp_filter(sinogram, geometry.bin_width, window), geometry, grid)


def reconstruct_frames(frames, geometry: Geometry, grid: int = DEFAULT_GRID, window: str = "ramlak") -> np.ndarray:
    """(N, Z, U) projections -> (Z, grid, grid) slices."""
    _check_coverage(geometry)
    filtered = ramp_filter(frames, geometry.bin_width, window)
    return backproject(filtered, geometry, grid)


def reconstruct(stack: ProjectionStack, grid: int = DEFAULT_GRID, window: str = "ramlak") -> Volume:
    voxels = reconstruct_frames(stack.frames, stack.geometry, grid, window)
    return Volume(voxels, 2.0 / grid)


def write_volume(volume: Volume, path) -> None:
    header = json.dumps({"version": CTVL_VERSION, "n_slices": int(volume.voxels.shape[0]),
                         "grid": int(volume.grid), "pixel_size": float(volume.pixel_size)},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CTVL_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(volume.voxels, dtype="<f4").tobytes())


def read_volume(path) -> Volume:
    data = Path(path).read_bytes()
    h, offset = read_container_header(data, CTVL_MAGIC, CTVL_VERSION, path)
    shape = (int(h["n_slices"]), int(h["grid"]), int(h["grid"]))
    count = shape[0] * shape[1] * shape[2]
    if len(data) - offset < 4 * count:
        raise TruncatedPayloadError(f"{path}: voxel block shorter than {4 * count} bytes")
    voxels = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).copy()
    return Volume(voxels, float(h["pixel_size"]))
