import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from advaug import grid as G
from advaug.gradcheck import SMOOTH_STEP, check_blocks, grid_cases

f64 = torch.float64


def rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=f64)


# ------------------------------------------------------------ identity grid


def test_identity_grid_corners_and_spacing():
    g = G.identity_grid(1, 5, 7, dtype=f64)[0]
    assert g[0, 0].tolist() == [-1.0, -1.0]
    assert g[-1, -1].tolist() == [1.0, 1.0]
    assert torch.allclose(torch.diff(g[0, :, 0]), torch.full((6,), 2 / 6, dtype=f64))
    assert torch.allclose(torch.diff(g[:, 0, 1]), torch.full((4,), 2 / 4, dtype=f64))


# ------------------------------------------------------------ bilinear sampling


@pytest.mark.parametrize("dtype", [torch.float32, f64])
@pytest.mark.parametrize("shape", [(1, 1, 8, 8), (2, 3, 5, 9), (1, 2, 16, 16)])
def test_identity_sampling_is_exact(dtype, shape):
    x = torch.randn(*shape, dtype=dtype)
    out = G.bilinear_sample(x, G.identity_grid(shape[0], shape[2], shape[3], dtype=dtype))
    assert torch.equal(out, x)


def test_center_of_2x2_is_mean_of_corners():
    img = torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]], dtype=f64)
    grid = torch.zeros(1, 2, 2, 2, dtype=f64)
    assert torch.allclose(G.bilinear_sample(img, grid), torch.full((1, 1, 2, 2), 1.5, dtype=f64))


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-5, 5), seed=st.integers(0, 1000))
def test_constant_image_stays_constant(c, seed):
    img = torch.full((1, 1, 6, 6), c, dtype=f64)
    grid = rand(1, 6, 6, 2, seed=seed) * 2 - 1
    assert torch.allclose(G.bilinear_sample(img, grid), img, atol=1e-12)


def test_out_of_bounds_reads_zero_or_border():
    img = torch.ones(1, 1, 4, 4, dtype=f64)
    grid = torch.full((1, 4, 4, 2), 3.0, dtype=f64)
    assert torch.all(G.bilinear_sample(img, grid) == 0)
    assert torch.all(G.bilinear_sample(img, grid, padding="border") == 1)


def test_sample_matches_hand_interpolation():
    img = torch.arange(16, dtype=f64).view(1, 1, 4, 4)
    # pixel coordinate (x=1.25, y=2.5) -> 0.75/0.25 and 0.5/0.5 weights
    u, v = 1.25 / 3 * 2 - 1, 2.5 / 3 * 2 - 1
    grid = torch.tensor([u, v], dtype=f64).expand(1, 4, 4, 2)
    a = img[0, 0].numpy()
    expected = 0.5 * (0.75 * a[2, 1] + 0.25 * a[2, 2]) + 0.5 * (0.75 * a[3, 1] + 0.25 * a[3, 2])
    assert torch.allclose(G.bilinear_sample(img, grid), torch.full_like(img, expected))


def test_sample_shape_mismatch_raises():
    with pytest.raises(ValueError):
        G.bilinear_sample(torch.zeros(1, 1, 4, 4), torch.zeros(1, 5, 4, 2))
    with pytest.raises(ValueError):
        G.bilinear_sample(torch.zeros(2, 1, 4, 4), torch.zeros(1, 4, 4, 2))


# ------------------------------------------------------------ affine grid


def test_identity_matrix_gives_identity_grid():
    assert torch.equal(G.make_affine_grid(torch.eye(3, dtype=f64), 6, 5), G.identity_grid(1, 6, 5, dtype=f64))


def test_translation_shifts_u_by_tx():
    m = torch.eye(3, dtype=f64)
    m[0, 2] = 0.1
    g = G.make_affine_grid(m, 6, 6)
    ident = G.identity_grid(1, 6, 6, dtype=f64)
    assert torch.allclose(g[..., 0], ident[..., 0] + 0.1)
    assert torch.equal(g[..., 1], ident[..., 1])


def test_affine_grid_composition():
    gen = torch.Generator().manual_seed(3)
    m1, m2 = torch.eye(3, dtype=f64), torch.eye(3, dtype=f64)
    m1[:2] = torch.randn(2, 3, generator=gen, dtype=f64)
    m2[:2] = torch.randn(2, 3, generator=gen, dtype=f64)
    direct = G.make_affine_grid(m1 @ m2, 7, 9)
    g2 = G.make_affine_grid(m2, 7, 9)
    mapped = torch.einsum("ij,bhwj->bhwi", m1[:2, :2], g2) + m1[:2, 2]
    assert torch.allclose(direct, mapped, atol=1e-6)


def test_non_affine_last_row_raises():
    m = torch.eye(3)
    m[2, 0] = 0.5
    with pytest.raises(ValueError):
        G.make_affine_grid(m, 4, 4)


# ------------------------------------------------------------ B-spline


def test_bspline_zero_and_constant():
    assert torch.equal(G.bspline_interpolate(torch.zeros(1, 4, 4, dtype=f64), 9, 9), torch.zeros(1, 1, 9, 9, dtype=f64))
    out = G.bspline_interpolate(torch.full((1, 5, 5), 2.5, dtype=f64), 11, 13)
    assert torch.allclose(out, torch.full((1, 1, 11, 13), 2.5, dtype=f64), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_bspline_stays_within_control_range(seed):
    c = torch.randn(1, 4, 4, generator=torch.Generator().manual_seed(seed), dtype=f64)
    out = G.bspline_interpolate(c, 32, 32)
    assert out.min() >= c.min() - 1e-12 and out.max() <= c.max() + 1e-12


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_bspline_is_linear(a, b, seed):
    gen = torch.Generator().manual_seed(seed)
    c1, c2 = torch.randn(2, 1, 6, 6, generator=gen, dtype=f64)
    lhs = G.bspline_interpolate(a * c1 + b * c2, 16, 16)
    rhs = a * G.bspline_interpolate(c1, 16, 16) + b * G.bspline_interpolate(c2, 16, 16)
    assert torch.allclose(lhs, rhs, atol=1e-6)


def test_bspline_interpolates_basis_at_knots():
    # at an interior knot the cubic B-spline weights are 1/6, 4/6, 1/6
    c = torch.zeros(1, 7, 7, dtype=f64)
    c[0, 3, 3] = 1.0
    out = G.bspline_interpolate(c, 7, 7)[0, 0]
    assert out[3, 3] == pytest.approx((4 / 6) ** 2)
    assert out[3, 2] == pytest.approx(4 / 6 * 1 / 6)
    assert out[2, 2] == pytest.approx(1 / 36)


def test_bspline_needs_four_control_points():
    with pytest.raises(ValueError):
        G.bspline_interpolate(torch.zeros(1, 3, 3), 8, 8)


# ------------------------------------------------------------ Gaussian


def test_gaussian_constant_unchanged():
    x = torch.full((1, 2, 10, 12), 0.7, dtype=f64)
    assert torch.allclose(G.gaussian_smooth(x, 1.5), x, atol=1e-12)


def test_gaussian_impulse_mass_and_center():
    x = torch.zeros(1, 1, 33, 33, dtype=f64)
    x[0, 0, 16, 16] = 1.0
    out = G.gaussian_smooth(x, 1.0)
    assert abs(float(out.sum()) - 1.0) < 1e-6
    taps = np.exp(-0.5 * np.arange(-3, 4) ** 2)
    center = (taps[3] / taps.sum()) ** 2
    assert float(out[0, 0, 16, 16]) == pytest.approx(center, abs=1e-12)


def test_gaussian_kernel_radius():
    assert G.gaussian_kernel1d(1.0).numel() == 7
    assert G.gaussian_kernel1d(1.2).numel() == 2 * math.ceil(3.6) + 1
    assert float(G.gaussian_kernel1d(0.7).sum()) == pytest.approx(1.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), sigma=st.floats(0.5, 2.0))
def test_gaussian_commutes_with_reflection(seed, sigma):
    x = rand(1, 1, 12, 10, seed=seed)
    assert torch.allclose(G.gaussian_smooth(x.flip(-1), sigma), G.gaussian_smooth(x, sigma).flip(-1), atol=1e-12)
    assert torch.allclose(G.gaussian_smooth(x.flip(-2), sigma), G.gaussian_smooth(x, sigma).flip(-2), atol=1e-12)


def test_gaussian_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        G.gaussian_smooth(torch.zeros(1, 1, 4, 4), 0.0)


# ------------------------------------------------------------ upsampling


def test_upsample_identity_and_constant():
    x = rand(1, 2, 4, 4)
    assert torch.equal(G.upsample_bilinear(x, 1), x)
    c = torch.full((1, 2, 3, 3), -0.4, dtype=f64)
    assert torch.allclose(G.upsample_bilinear(c, 4), torch.full((1, 2, 12, 12), -0.4, dtype=f64))


def test_upsample_2x2_to_4x4_by_hand():
    x = torch.tensor([[[[0.0, 1.0], [2.0, 3.0]]]], dtype=f64)
    # corner-aligned lattice: output pixel j sits at low-res coordinate j / 3
    j = np.arange(4) / 3
    expected = j[None, :] * 1.0 + j[:, None] * 2.0
    assert np.allclose(G.upsample_bilinear(x, 2)[0, 0].numpy(), expected)


def test_upsample_rejects_bad_factor():
    with pytest.raises(ValueError):
        G.upsample_bilinear(torch.zeros(1, 2, 2, 2), 0)
    with pytest.raises(ValueError):
        G.upsample_bilinear(torch.zeros(1, 2, 2, 2), 4, size=(10, 8))


# ------------------------------------------------------------ Sobel


def test_sobel_constant_is_zero():
    sx, sy = G.sobel_gradients(torch.full((1, 1, 5, 6), 3.0, dtype=f64))
    assert torch.all(sx == 0) and torch.all(sy == 0)


def test_sobel_vertical_edge():
    x = torch.zeros(1, 1, 6, 6, dtype=f64)
    x[..., 3:] = 1.0
    sx, sy = G.sobel_gradients(x)
    assert torch.all(sx[0, 0, :, 2:4] == 4.0)
    assert torch.all(sx[0, 0, :, :2] == 0) and torch.all(sx[0, 0, :, 4:] == 0)
    assert torch.all(sy == 0)


def test_sobel_unit_ramp_gives_eight():
    x = torch.arange(7, dtype=f64).expand(1, 1, 5, 7).clone()
    sx, sy = G.sobel_gradients(x)
    assert torch.all(sx[0, 0, :, 1:-1] == 8.0)
    assert torch.all(sy == 0)


def test_sobel_too_small_raises():
    with pytest.raises(ValueError):
        G.sobel_gradients(torch.zeros(1, 1, 2, 5))


# ------------------------------------------------------------ gradients


@pytest.mark.parametrize("instance", range(3))
def test_grid_kernels_match_finite_differences(instance):
    gen = torch.Generator().manual_seed(instance)
    for name, fn, values, labels, step in grid_cases(gen):
        assert step == SMOOTH_STEP
        for r in check_blocks(name, fn, values, labels, f64, step, 48):
            assert r.max_rel_error < 1e-4, r
