import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid

from noise2td.projsim import (
    Ellipse, Geometry, MalformedHeaderError, Phantom, PhantomSpec, ProjectionStack, TruncatedPayloadError,
    VersionMismatchError, apply_noise, ellipse_bound, ellipse_chords, make_phantom, make_sequences,
    normalize_stack, project_frame, project_stack, read_stack, write_stack,
)

from oracles import inside_ellipse, ray_march

DISK = Phantom((Ellipse((0.0, 0.0), (0.5, 0.5), 0.0, 1.0),))


def small_geometry(n=8, bins=32, rows=4):
    return Geometry.full_circle(n, detector_bins=bins, num_rows=rows)


def test_forced_phantom():
    ph = make_phantom(PhantomSpec(seed=7, forced=DISK.ellipses))
    assert ph == DISK


def test_phantom_deterministic():
    assert make_phantom(PhantomSpec(seed=3)) == make_phantom(PhantomSpec(seed=3))
    assert make_phantom(PhantomSpec(seed=3)) != make_phantom(PhantomSpec(seed=4))


def test_phantom_inside_fov_by_sampling():
    ph = make_phantom(PhantomSpec(seed=1, num_ellipses_range=(5, 10)))
    assert 5 <= len(ph.ellipses) <= 10
    rng = np.random.default_rng(0)
    for e in ph.ellipses:
        # rejection sampling: points drawn from the ellipse never leave [-1, 1]^2
        pts = rng.uniform(-1.5, 1.5, size=(200_000, 2))
        hit = inside_ellipse(pts[:, 0], pts[:, 1], e.center, e.semi_axes, e.rotation)
        assert hit.any()
        assert np.abs(pts[hit]).max() <= 1.0


def test_phantom_has_background():
    ph = make_phantom(PhantomSpec(seed=5))
    assert max(e.semi_axes[0] * e.semi_axes[1] for e in ph.ellipses) > 0.3


@pytest.mark.parametrize("spec", [
    PhantomSpec(num_ellipses_range=(0, 3)),
    PhantomSpec(num_ellipses_range=(4, 2)),
    PhantomSpec(density_range=(-1.0, 0.5)),
    PhantomSpec(density_range=(0.5, 0.1)),
])
def test_bad_phantom_spec(spec):
    with pytest.raises(ValueError):
        make_phantom(spec)


def test_degenerate_ellipse_rejected():
    with pytest.raises(ValueError):
        Ellipse((0, 0), (1e-7, 0.3))
    with pytest.raises(ValueError):
        Phantom((Ellipse((0.9, 0.0), (0.3, 0.1)),))


def test_disk_projection_center_value():
    g = Geometry.full_circle(4, detector_bins=2, num_rows=1)
    # two bins centred at s = -0.5 and 0.5; use the chord helper at s = 0 too
    assert ellipse_chords(DISK.ellipses[0], 0.7, np.array([0.0]))[0] == pytest.approx(1.0)
    frame = project_frame(DISK, Geometry(1, 0.0, 1.0, 3, 1, circular=False), 0.0)
    # middle bin of a 3-bin detector sits at s = 0; row scale sqrt(1 - 0.75*0) = 1
    assert frame[0, 1] == pytest.approx(1.0)
    assert g.angles.shape == (4,)


def test_disk_projection_rotation_invariant():
    g = small_geometry(n=12)
    stack = project_stack(DISK, g)
    assert np.allclose(stack.frames, stack.frames[0], atol=1e-12)


def test_project_stack_contract():
    g = Geometry.full_circle(4, detector_bins=16, num_rows=3)
    stack = project_stack(DISK, g)
    assert stack.frames.shape == (4, 3, 16)
    assert np.array_equal(stack.frames, stack.clean_frames)
    assert stack.noise_truth is None
    single = project_stack(DISK, Geometry(1, 0.0, 0.1, 16, 3, circular=False))
    assert single.frames.shape == (1, 3, 16)


def test_projection_bound():
    ph = make_phantom(PhantomSpec(seed=11))
    stack = project_stack(ph, small_geometry(n=16, bins=48, rows=6))
    assert stack.frames.max() <= ellipse_bound(ph)
    assert stack.frames.min() >= 0


def test_off_center_ellipse_matches_ray_marching():
    e = Ellipse((0.2, -0.15), (0.4, 0.2), 0.6, 1.3)
    for s in np.linspace(-0.6, 0.6, 13):
        analytic = e.density * ellipse_chords(e, 0.3, np.array([s]))[0]
        assert abs(analytic - ray_march(e.center, e.semi_axes, e.rotation, e.density, 0.3, s)) < 1e-3


@settings(max_examples=25, deadline=None)
@given(
    cx=st.floats(-0.3, 0.3), cy=st.floats(-0.3, 0.3), A=st.floats(0.05, 0.5), B=st.floats(0.05, 0.5),
    rot=st.floats(0, math.pi), angle=st.floats(0, 2 * math.pi),
)
def test_mass_conservation(cx, cy, A, B, rot, angle):
    e = Ellipse((cx, cy), (A, B), rot, 0.7)
    # trapezoid over a fine detector; chord profile is a semicircle-like bump
    s = np.linspace(-1.5, 1.5, 60001)
    mass = trapezoid(e.density * ellipse_chords(e, angle, s), s)
    assert mass == pytest.approx(math.pi * A * B * e.density, rel=1e-3)


def test_normalize_maps_percentile_to_one():
    stack = normalize_stack(project_stack(make_phantom(PhantomSpec(seed=2)), small_geometry(bins=40, rows=8)))
    assert np.percentile(stack.clean_frames, 99.9) == pytest.approx(1.0)
    assert stack.scale_factor > 0


def clean_stack(values, n=2):
    values = np.asarray(values, dtype=float)
    frames = np.broadcast_to(values, (n, *values.shape)).copy()
    g = Geometry(n, 0.0, 0.1, values.shape[1], values.shape[0], circular=False)
    return ProjectionStack(g, frames, clean_frames=frames.copy())


def test_noise_vanishing_limit():
    stack = clean_stack(np.linspace(0.1, 1.0, 20).reshape(4, 5))
    noisy = apply_noise(stack, 1e12, 0.0, seed=1)
    assert np.allclose(noisy.frames, stack.clean_frames, rtol=1e-4)
    assert noisy.noise_truth == {"lambda": 1e12, "a": 0.0, "seed": 1}
    assert np.array_equal(noisy.clean_frames, stack.clean_frames)


def test_noise_variance_monte_carlo():
    stack = clean_stack(np.full((100, 100), 0.5), n=10)
    y = apply_noise(stack, 50.0, 0.001, seed=3).frames.ravel()
    assert y.size == 10**5
    assert y.var() == pytest.approx(0.5 / 50 + 0.001, rel=0.03)


@pytest.mark.parametrize("x", [0.05, 0.5, 1.0])
def test_noise_mean_preserving(x):
    lam, a = 50.0, 0.001
    y = apply_noise(clean_stack(np.full((100, 100), x), n=10), lam, a, seed=4).frames
    assert abs(y.mean() - x) <= 4 * math.sqrt((x / lam + a) / y.size)


def test_noise_negative_values_at_zero():
    y = apply_noise(clean_stack(np.zeros((10, 10))), 50.0, 0.01, seed=5).frames
    assert (y < 0).any()


def test_noise_deterministic_and_rejects():
    stack = clean_stack(np.full((5, 5), 0.3))
    assert np.array_equal(apply_noise(stack, 20, 0.01, 9).frames, apply_noise(stack, 20, 0.01, 9).frames)
    with pytest.raises(ValueError):
        apply_noise(stack, 0.0, 0.01, 1)
    with pytest.raises(ValueError):
        apply_noise(stack, 10.0, -0.1, 1)
    with pytest.raises(ValueError):
        apply_noise(clean_stack(np.full((5, 5), -0.1)), 10.0, 0.0, 1)


def frame_stack(n, circular=True):
    g = Geometry.full_circle(n, 4, 4) if circular else Geometry(n, 0.0, 0.01, 4, 4, circular=False)
    frames = np.arange(n, dtype=float)[:, None, None] * np.ones((n, 4, 4))
    return ProjectionStack(g, frames)


def test_sequences_wrap_counts_and_coverage():
    samples = list(make_sequences(frame_stack(360), k=3, boundary="wrap"))
    assert len(samples) == 360
    assert sorted(s.source_angle_index for s in samples) == list(range(360))
    first = samples[0]
    assert first.frames[:, 0, 0].tolist() == [357, 358, 359, 0, 1, 2, 3]
    assert first.middle_index == 3


def test_sequences_skip():
    centers = [s.source_angle_index for s in make_sequences(frame_stack(10, False), k=3, boundary="skip")]
    assert centers == [3, 4, 5, 6]
    one = list(make_sequences(frame_stack(7, False), k=3, boundary="skip"))
    assert [s.source_angle_index for s in one] == [3]
    for s in make_sequences(frame_stack(10, False), 3, "skip"):
        assert s.frames[:, 0, 0].tolist() == list(range(s.source_angle_index - 3, s.source_angle_index + 4))


def test_sequences_errors():
    with pytest.raises(ValueError):
        list(make_sequences(frame_stack(10, False), 3, "wrap"))
    with pytest.raises(ValueError):
        list(make_sequences(frame_stack(6, False), 3, "skip"))


def test_stack_round_trip(tmp_path):
    ph = make_phantom(PhantomSpec(seed=8))
    stack = normalize_stack(project_stack(ph, small_geometry(n=6, bins=20, rows=5), id="rt"))
    stack = apply_noise(stack, 40.0, 1e-3, seed=2)
    stack.frames = stack.frames.astype(np.float32)
    stack.clean_frames = stack.clean_frames.astype(np.float32)
    path = tmp_path / "s.ctpk"
    write_stack(stack, path)
    back = read_stack(path)
    assert back == stack
    no_clean = ProjectionStack(stack.geometry, stack.frames, id="x")
    write_stack(no_clean, path)
    assert read_stack(path) == no_clean


def test_stack_header_layout(tmp_path):
    stack = ProjectionStack(small_geometry(n=2, bins=4, rows=1), np.ones((2, 1, 4), np.float32))
    path = tmp_path / "s.ctpk"
    write_stack(stack, path)
    data = path.read_bytes()
    assert data[:4] == b"CTPK"
    (length,) = struct.unpack("<I", data[4:8])
    assert len(data) == 8 + length + 2 * 4 * 4
    assert np.frombuffer(data[8 + length:], "<f4").tolist() == [1.0] * 8


def test_stack_read_errors(tmp_path):
    stack = ProjectionStack(small_geometry(n=2, bins=4, rows=1), np.ones((2, 1, 4), np.float32))
    path = tmp_path / "s.ctpk"
    write_stack(stack, path)
    good = path.read_bytes()

    path.write_bytes(b"XXXX" + good[4:])
    with pytest.raises(MalformedHeaderError):
        read_stack(path)

    path.write_bytes(good[:-3])
    with pytest.raises(TruncatedPayloadError):
        read_stack(path)

    (length,) = struct.unpack("<I", good[4:8])
    header = good[8:8 + length].replace(b'"version": 1', b'"version": 2')
    path.write_bytes(good[:4] + struct.pack("<I", len(header)) + header + good[8 + length:])
    with pytest.raises(VersionMismatchError):
        read_stack(path)

    path.write_bytes(good[:8] + b"{" * length + good[8 + length:])
    with pytest.raises(MalformedHeaderError):
        read_stack(path)


def test_projection_deterministic():
    ph = make_phantom(PhantomSpec(seed=21))
    g = small_geometry(n=5, bins=16, rows=3)
    assert np.array_equal(project_stack(ph, g).frames, project_stack(ph, g).frames)
