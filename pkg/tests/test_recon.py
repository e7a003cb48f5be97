import math

import numpy as np
import pytest

from noise2td.projsim import Ellipse, Geometry, Phantom, ProjectionStack, ellipse_chords, project_stack
from noise2td.recon import (
    Volume, backproject, fbp_slice, filter_response, ramlak_kernel, ramp_filter, read_volume, reconstruct,
    write_volume,
)
from noise2td.metrics import ssim


def disk_sinogram(g, radius=0.5, density=1.0, center=(0.0, 0.0)):
    e = Ellipse(center, (radius, radius), 0.0, density)
    return np.stack([density * ellipse_chords(e, a, g.detector_coords) for a in g.angles])


def grid_coords(p):
    c = -1 + (np.arange(p) + 0.5) * 2 / p
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return xx, yy


def test_ramp_zero():
    assert np.count_nonzero(ramp_filter(np.zeros((3, 16)))) == 0


def test_ramp_impulse_matches_kernel_table():
    u, tau = 32, 2 / 32
    row = np.zeros(u)
    row[10] = 1.0
    out = ramp_filter(row[None], tau)[0]
    n = np.arange(u) - 10
    table = np.array([1 / (4 * tau**2) if k == 0 else (0.0 if k % 2 == 0 else -1 / (math.pi**2 * k**2 * tau**2))
                      for k in n])
    assert np.allclose(out, tau * table, rtol=0, atol=1e-9 * table.max())
    assert np.allclose(ramlak_kernel(n, tau), table)


def test_ramp_suppresses_dc():
    # the frequency response vanishes at DC up to kernel truncation (about 0.4 / padded length)
    u = 256
    response = filter_response(u, 2 / u)
    assert abs(response[0]) <= 1e-3 * np.abs(response).max()


def test_ramp_constant_row_truncation_tail():
    # a finite constant segment is not DC: its filtered interior equals minus the kernel
    # mass that falls outside the segment, which the closed-form table gives directly
    u, tau = 64, 2 / 64
    out = ramp_filter(np.ones((1, u)), tau)[0]
    n = np.arange(-4 * u, 4 * u + 1)
    h = ramlak_kernel(n, tau)
    for i in (16, 32, 48):
        inside = (n >= -i) & (n <= u - 1 - i)
        assert out[i] == pytest.approx(tau * h[inside].sum(), rel=1e-9)
    assert np.abs(out[16:48]).max() < 0.2 * np.abs(out).max()


def test_ramp_windowed_is_smoother():
    u = 64
    row = np.random.default_rng(0).normal(size=(1, u))
    plain, cos = ramp_filter(row), ramp_filter(row, window="cosine")
    assert np.abs(np.diff(cos)).mean() < np.abs(np.diff(plain)).mean()
    with pytest.raises(ValueError):
        ramp_filter(row, window="hann-ish")


def test_fbp_zero_and_linearity():
    g = Geometry.full_circle(90, detector_bins=64, num_rows=1)
    assert np.count_nonzero(fbp_slice(np.zeros((90, 64)), g, 32)) == 0
    s = np.random.default_rng(1).uniform(size=(90, 64))
    assert np.allclose(fbp_slice(3.5 * s, g, 32), 3.5 * fbp_slice(s, g, 32), atol=1e-6)


def test_fbp_disk_oracle():
    g = Geometry.full_circle(360, detector_bins=128, num_rows=1)
    img = fbp_slice(disk_sinogram(g), g, 128)
    xx, yy = grid_coords(128)
    interior = np.hypot(xx, yy) < 0.5 - 2 * (2 / 128)
    assert abs(img[interior].mean() - 1.0) < 0.05
    assert np.linalg.norm(img[interior] - 1.0) / math.sqrt(interior.sum()) < 0.10


def test_fbp_half_circle_and_coverage_warning():
    half = Geometry(180, 0.0, math.pi / 180, 128, 1, circular=False)
    img = fbp_slice(disk_sinogram(half), half, 64)
    xx, yy = grid_coords(64)
    assert abs(img[np.hypot(xx, yy) < 0.4].mean() - 1.0) < 0.05
    short = Geometry(20, 0.0, math.pi / 180, 64, 1, circular=False)
    with pytest.warns(RuntimeWarning):
        fbp_slice(np.zeros((20, 64)), short, 16)


def test_fbp_mass_consistency():
    g = Geometry.full_circle(360, detector_bins=128, num_rows=1)
    e = Ellipse((0.1, -0.2), (0.3, 0.15), 0.4, 0.8)
    sino = np.stack([e.density * ellipse_chords(e, a, g.detector_coords) for a in g.angles])
    img = fbp_slice(sino, g, 128)
    pixel_area = (2 / 128) ** 2
    projection_mass = sino.sum(axis=1).mean() * g.bin_width
    assert img.sum() * pixel_area == pytest.approx(projection_mass, rel=0.05)


def test_fbp_rotation_covariance():
    g = Geometry.full_circle(360, detector_bins=128, num_rows=1)
    ph = Phantom((Ellipse((0.3, 0.1), (0.25, 0.1), 0.3, 1.0), Ellipse((-0.2, -0.3), (0.1, 0.15), 1.0, 0.5)))
    rot = ph.rotated(math.pi / 2)

    def recon(p):
        sino = np.stack([sum(e.density * ellipse_chords(e, a, g.detector_coords) for e in p.ellipses)
                         for a in g.angles])
        return fbp_slice(sino, g, 128)

    a, b = recon(ph), recon(rot)
    # +90 degrees maps (x, y) -> (-y, x); rows index increasing y, so on the array this is rot90(k=-1)
    expected = np.rot90(a, -1)
    assert np.linalg.norm(b - expected) / np.linalg.norm(expected) < 0.02


def test_reconstruct_composes_slices():
    g = Geometry.full_circle(120, detector_bins=64, num_rows=3)
    ph = Phantom((Ellipse((0.0, 0.0), (0.5, 0.5), 0.0, 1.0),))
    stack = project_stack(ph, g)
    vol = reconstruct(stack, grid=32)
    assert vol.voxels.shape == (3, 32, 32)
    for z in range(3):
        assert np.allclose(vol.voxels[z], fbp_slice(stack.frames[:, z], g, 32), atol=1e-12)


def test_noisy_recon_ssim_below_one():
    g = Geometry.full_circle(120, detector_bins=64, num_rows=1)
    clean = disk_sinogram(g)[:, None]
    noisy = clean + np.random.default_rng(2).normal(0, 0.05, clean.shape)
    rc = reconstruct(ProjectionStack(g, clean), 32).voxels[0]
    rn = reconstruct(ProjectionStack(g, noisy), 32).voxels[0]
    assert ssim(rn, rc) < 1.0


def test_volume_round_trip(tmp_path):
    vol = Volume(np.random.default_rng(3).normal(size=(2, 8, 8)).astype(np.float32), 0.25)
    path = tmp_path / "v.ctvl"
    write_volume(vol, path)
    data = path.read_bytes()
    assert data[:4] == b"CTVL"
    back = read_volume(path)
    assert np.array_equal(back.voxels, vol.voxels) and back.pixel_size == 0.25


def test_backproject_shapes():
    g = Geometry.full_circle(8, detector_bins=16, num_rows=2)
    out = backproject(np.ones((8, 2, 16)), g, 10)
    assert out.shape == (2, 10, 10)
