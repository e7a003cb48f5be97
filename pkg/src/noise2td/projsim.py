"""Synthetic projection stacks: ellipse phantoms, parallel-beam projection,
mixed Poisson-Gaussian dose degradation and the ``.ctpk`` container."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

MIN_SEMI_AXIS = 1e-6
CTPK_MAGIC = b"CTPK"
CTPK_VERSION = 1
# slice z in (-1, 1) shrinks the ellipse set by sqrt(1 - SLICE_TAPER * z**2)
SLICE_TAPER = 0.75


class StackFormatError(ValueError):
    """Base class for ``.ctpk`` read errors."""


class MalformedHeaderError(StackFormatError):
    pass


class VersionMismatchError(StackFormatError):
    pass


class TruncatedPayloadError(StackFormatError):
    pass


@dataclass(frozen=True)
class Ellipse:
    center: tuple[float, float]
    semi_axes: tuple[float, float]
    rotation: float = 0.0
    density: float = 1.0

    def __post_init__(self):
        if min(self.semi_axes) < MIN_SEMI_AXIS:
            raise ValueError(f"degenerate ellipse, semi-axes {self.semi_axes}")

    def half_extent(self) -> tuple[float, float]:
        """Half width/height of the rotated bounding box."""
        A, B = self.semi_axes
        c, s = math.cos(self.rotation), math.sin(self.rotation)
        return math.hypot(A * c, B * s), math.hypot(A * s, B * c)

    def inside_fov(self) -> bool:
        hx, hy = self.half_extent()
        x0, y0 = self.center
        return abs(x0) + hx <= 1.0 and abs(y0) + hy <= 1.0

    def scaled(self, factor: float) -> "Ellipse":
        return Ellipse(
            (self.center[0] * factor, self.center[1] * factor),
            (max(self.semi_axes[0] * factor, MIN_SEMI_AXIS), max(self.semi_axes[1] * factor, MIN_SEMI_AXIS)),
            self.rotation,
            self.density,
        )


@dataclass(frozen=True)
class Phantom:
    ellipses: tuple[Ellipse, ...]

    def __post_init__(self):
        object.__setattr__(self, "ellipses", tuple(self.ellipses))
        if not self.ellipses:
            raise ValueError("phantom needs at least one ellipse")
        for e in self.ellipses:
            if not e.inside_fov():
                raise ValueError(f"ellipse {e} leaves the [-1, 1]^2 field of view")

    def density(self, x, y, slice_scale: float = 1.0) -> np.ndarray:
        """Summed density at points (x, y) of the slice with the given scale."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.broadcast(x, y).shape)
        for e in self.ellipses:
            e = e.scaled(slice_scale) if slice_scale != 1.0 else e
            c, s = math.cos(e.rotation), math.sin(e.rotation)
            dx, dy = x - e.center[0], y - e.center[1]
            u = (dx * c + dy * s) / e.semi_axes[0]
            v = (-dx * s + dy * c) / e.semi_axes[1]
            out += np.where(u * u + v * v <= 1.0, e.density, 0.0)
        return out

    def rotated(self, angle: float) -> "Phantom":
        """Phantom rotated counter-clockwise about the origin."""
        c, s = math.cos(angle), math.sin(angle)
        return Phantom(tuple(
            Ellipse((c * e.center[0] - s * e.center[1], s * e.center[0] + c * e.center[1]),
                    e.semi_axes, e.rotation + angle, e.density)
            for e in self.ellipses
        ))


@dataclass(frozen=True)
class PhantomSpec:
    seed: int = 0
    num_ellipses_range: tuple[int, int] = (5, 10)
    density_range: tuple[float, float] = (0.1, 0.5)
    background_density: float = 1.0
    forced: Optional[tuple[Ellipse, ...]] = None


@dataclass(frozen=True)
class Geometry:
    num_angles: int
    angle_start: float = 0.0
    angle_step: float = 2 * math.pi / 360
    detector_bins: int = 128
    num_rows: int = 64
    circular: bool = True

    def __post_init__(self):
        if self.num_angles < 1 or self.detector_bins < 1 or self.num_rows < 1:
            raise ValueError("num_angles, detector_bins and num_rows must be positive")
        if self.circular and abs(self.num_angles * self.angle_step - 2 * math.pi) > 1e-9:
            raise ValueError("circular geometry requires num_angles * angle_step == 2*pi")

    @classmethod
    def full_circle(cls, num_angles: int, detector_bins: int = 128, num_rows: int = 64,
                    angle_start: float = 0.0) -> "Geometry":
        return cls(num_angles, angle_start, 2 * math.pi / num_angles, detector_bins, num_rows, True)

    @property
    def angles(self) -> np.ndarray:
        return self.angle_start + self.angle_step * np.arange(self.num_angles)

    @property
    def bin_width(self) -> float:
        return 2.0 / self.detector_bins

    @property
    def detector_coords(self) -> np.ndarray:
        return -1.0 + (np.arange(self.detector_bins) + 0.5) * self.bin_width

    @property
    def row_coords(self) -> np.ndarray:
        return -1.0 + (np.arange(self.num_rows) + 0.5) * (2.0 / self.num_rows)

    @property
    def slice_scales(self) -> np.ndarray:
        return np.sqrt(1.0 - SLICE_TAPER * self.row_coords**2)


@dataclass
class ProjectionStack:
    geometry: Geometry
    frames: np.ndarray
    clean_frames: Optional[np.ndarray] = None
    noise_truth: Optional[dict] = None
    id: str = "stack"
    scale_factor: float = 1.0

    def __post_init__(self):
        g = self.geometry
        shape = (g.num_angles, g.num_rows, g.detector_bins)
        self.frames = np.asarray(self.frames)
        if self.frames.shape != shape:
            raise ValueError(f"frames shape {self.frames.shape} != {shape}")
        if self.clean_frames is not None:
            self.clean_frames = np.asarray(self.clean_frames)
            if self.clean_frames.shape != shape:
                raise ValueError(f"clean_frames shape {self.clean_frames.shape} != {shape}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape

    def __eq__(self, other):
        if not isinstance(other, ProjectionStack):
            return NotImplemented
        same_clean = (self.clean_frames is None) == (other.clean_frames is None) and (
            self.clean_frames is None or np.array_equal(self.clean_frames, other.clean_frames))
        return (self.geometry == other.geometry and self.id == other.id
                and self.noise_truth == other.noise_truth
                and self.scale_factor == other.scale_factor
                and np.array_equal(self.frames, other.frames) and same_clean)


@dataclass
class SequenceSample:
    frames: np.ndarray
    middle_index: int
    source_angle_index: int
    crop_origin: tuple[int, int] = (0, 0)
    # clean middle frame, only filled in for supervised batches
    target: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        t = self.frames.shape[0]
        if t < 3 or t % 2 == 0 or self.middle_index != t // 2:
            raise ValueError(f"sequence needs an odd frame count >= 3 centred on the middle, got {t}")

    @property
    def middle(self) -> np.ndarray:
        return self.frames[self.middle_index]


def make_phantom(spec: PhantomSpec) -> Phantom:
    """Random ellipse phantom: one background ellipse plus inserts, all inside the FOV."""
    if spec.forced is not None:
        return Phantom(spec.forced)
    lo, hi = spec.num_ellipses_range
    dlo, dhi = spec.density_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad num_ellipses_range {spec.num_ellipses_range}")
    if dlo <= 0 or dhi < dlo or spec.background_density <= 0:
        raise ValueError("densities must be positive with a non-empty range")
    rng = np.random.default_rng(spec.seed)
    count = int(rng.integers(lo, hi + 1))
    ellipses = [Ellipse((0.0, 0.0), (float(rng.uniform(0.7, 0.85)), float(rng.uniform(0.55, 0.75))),
                        float(rng.uniform(-0.3, 0.3)), spec.background_density)]
    while len(ellipses) < count:
        e = Ellipse((float(rng.uniform(-0.6, 0.6)), float(rng.uniform(-0.5, 0.5))),
                    (float(rng.uniform(0.04, 0.3)), float(rng.uniform(0.04, 0.3))),
                    float(rng.uniform(0, math.pi)), float(rng.uniform(dlo, dhi)))
        if e.inside_fov():
            ellipses.append(e)
    return Phantom(tuple(ellipses))


def ellipse_chords(e: Ellipse, angle: float, s: np.ndarray) -> np.ndarray:
    """Chord length of the rays at detector offsets ``s`` through ellipse ``e``.

    Rays at angle theta are the lines x*cos(theta) + y*sin(theta) = s.
    """
    A, B = e.semi_axes
    shift = np.asarray(s, dtype=float) - (e.center[0] * math.cos(angle) + e.center[1] * math.sin(angle))
    alpha = angle - e.rotation
    a2 = (A * math.cos(alpha)) ** 2 + (B * math.sin(alpha)) ** 2
    return 2.0 * A * B / a2 * np.sqrt(np.clip(a2 - shift**2, 0.0, None))


def project_frame(phantom: Phantom, geometry: Geometry, angle: float) -> np.ndarray:
    """Z x U frame of line integrals at one rotation angle."""
    s = geometry.detector_coords
    frame = np.zeros((geometry.num_rows, geometry.detector_bins))
    for z, scale in enumerate(geometry.slice_scales):
        for e in phantom.ellipses:
            frame[z] += e.density * ellipse_chords(e.scaled(scale), angle, s)
    return np.clip(frame, 0.0, None)


def project_stack(phantom: Phantom, geometry: Geometry, id: str = "stack") -> ProjectionStack:
    frames = np.stack([project_frame(phantom, geometry, a) for a in geometry.angles])
    return ProjectionStack(geometry, frames, clean_frames=frames.copy(), id=id)


def normalize_stack(stack: ProjectionStack, percentile: float = 99.9) -> ProjectionStack:
    """Rescale so the given percentile of clean values maps to 1.0."""
    ref = stack.clean_frames if stack.clean_frames is not None else stack.frames
    v = float(np.percentile(ref, percentile))
    if v <= 0:
        raise ValueError("cannot normalize an all-zero stack")
    factor = 1.0 / v
    return replace(
        stack,
        frames=stack.frames * factor,
        clean_frames=None if stack.clean_frames is None else stack.clean_frames * factor,
        scale_factor=stack.scale_factor * factor,
    )


def apply_noise(stack: ProjectionStack, lam: float, a: float, seed: int) -> ProjectionStack:
    """Draw y = Poisson(lam * x) / lam + N(0, a) per pixel of the clean frames."""
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not a >= 0:
        raise ValueError(f"a must be non-negative, got {a}")
    if stack.clean_frames is None:
        raise ValueError("apply_noise needs clean_frames")
    clean = stack.clean_frames
    if (clean < 0).any():
        raise ValueError("clean frames contain negative values")
    rng = np.random.default_rng(seed)
    noisy = rng.poisson(lam * clean) / lam
    if a > 0:
        noisy = noisy + rng.normal(0.0, math.sqrt(a), size=clean.shape)
    return replace(stack, frames=noisy, noise_truth={"lambda": float(lam), "a": float(a), "seed": int(seed)})


def sequence_centers(num_angles: int, k: int, boundary: str, circular: bool) -> range:
    if k < 1 or 2 * k + 1 > num_angles:
        raise ValueError(f"window 2k+1={2 * k + 1} does not fit {num_angles} frames")
    if boundary == "wrap":
        if not circular:
            raise ValueError("wrap boundary requires circular geometry")
        return range(num_angles)
    if boundary == "skip":
        return range(k, num_angles - k)
    raise ValueError(f"unknown boundary mode {boundary!r}")


def window_indices(center: int, k: int, num_angles: int) -> np.ndarray:
    return np.arange(center - k, center + k + 1) % num_angles


def make_sequences(stack: ProjectionStack, k: int = 3, boundary: str = "wrap") -> Iterator[SequenceSample]:
    g = stack.geometry
    for c in sequence_centers(g.num_angles, k, boundary, g.circular):
        yield SequenceSample(stack.frames[window_indices(c, k, g.num_angles)], k, c)


def _header(stack: ProjectionStack) -> dict:
    g = stack.geometry
    return {
        "version": CTPK_VERSION,
        "n_angles": g.num_angles,
        "n_rows": g.num_rows,
        "n_bins": g.detector_bins,
        "angle_start": g.angle_start,
        "angle_step": g.angle_step,
        "circular": g.circular,
        "scale_factor": stack.scale_factor,
        "has_clean": stack.clean_frames is not None,
        "noise_truth": stack.noise_truth,
        "id": stack.id,
    }


def write_stack(stack: ProjectionStack, path) -> None:
    header = json.dumps(_header(stack), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CTPK_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(stack.frames, dtype="<f4").tobytes())
        if stack.clean_frames is not None:
            f.write(np.ascontiguousarray(stack.clean_frames, dtype="<f4").tobytes())


def read_container_header(data: bytes, magic: bytes, version: int, path) -> tuple[dict, int]:
    """Parse magic + length + JSON header; return (header, payload offset)."""
    if len(data) < 8 or data[:4] != magic:
        raise MalformedHeaderError(f"{path}: bad magic bytes, expected {magic!r}")
    (length,) = struct.unpack("<I", data[4:8])
    if 8 + length > len(data):
        raise MalformedHeaderError(f"{path}: header length {length} exceeds file size")
    try:
        header = json.loads(data[8:8 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: header is not a JSON object")
    if header.get("version") != version:
        raise VersionMismatchError(f"{path}: version {header.get('version')!r}, expected {version}")
    return header, 8 + length


def read_stack(path) -> ProjectionStack:
    data = Path(path).read_bytes()
    h, offset = read_container_header(data, CTPK_MAGIC, CTPK_VERSION, path)
    try:
        shape = (int(h["n_angles"]), int(h["n_rows"]), int(h["n_bins"]))
        geometry = Geometry(shape[0], float(h["angle_start"]), float(h["angle_step"]),
                            shape[2], shape[1], bool(h["circular"]))
        has_clean = bool(h["has_clean"])
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"{path}: bad header field ({exc})") from None
    block = 4 * shape[0] * shape[1] * shape[2]
    expected = block * (2 if has_clean else 1)
    if len(data) - offset < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(data) - offset} bytes, expected {expected}")
    frames = np.frombuffer(data, dtype="<f4", count=block // 4, offset=offset).reshape(shape).copy()
    clean = None
    if has_clean:
        clean = np.frombuffer(data, dtype="<f4", count=block // 4, offset=offset + block).reshape(shape).copy()
    return ProjectionStack(geometry, frames, clean, h.get("noise_truth"), str(h.get("id", "")),
                           float(h.get("scale_factor", 1.0)))


def simulate(phantom_spec: PhantomSpec, geometry: Geometry, lam: float, a: float, noise_seed: int,
             id: str = "stack") -> ProjectionStack:
    """Project, normalize, and degrade in one go. The result keeps its clean frames."""
    stack = normalize_stack(project_stack(make_phantom(phantom_spec), geometry, id=id))
    return apply_noise(stack, lam, a, noise_seed)


def ellipse_bound(phantom: Phantom) -> float:
    """Upper bound on any line integral: sum of density times the major chord."""
    return sum(abs(e.density) * 2 * max(e.semi_axes) for e in phantom.ellipses)


def to_float32(stack: ProjectionStack) -> ProjectionStack:
    """Round to the container precision so in-memory and on-disk stacks agree."""
    return replace(
        stack,
        frames=stack.frames.astype(np.float32),
        clean_frames=None if stack.clean_frames is None else stack.clean_frames.astype(np.float32),
    )


__all__: Sequence[str] = [
    "Ellipse", "Phantom", "PhantomSpec", "Geometry", "ProjectionStack", "SequenceSample",
    "make_phantom", "project_frame", "project_stack", "normalize_stack", "apply_noise",
    "make_sequences", "write_stack", "read_stack", "simulate",
    "StackFormatError", "MalformedHeaderError", "VersionMismatchError", "TruncatedPayloadError",
]
