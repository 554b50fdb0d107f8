"""Differentiable grid kernels shared by the transforms and the losses.

Layout conventions used throughout the package:

* images, probability maps and scalar fields are ``(B, C, H, W)`` tensors;
* vector fields (displacements, velocities) are ``(B, 2, H, W)`` tensors whose
  channel 0 is the ``u`` (width / x) component and channel 1 the ``v``
  (height / y) component, both in normalized units;
* coordinate grids are ``(B, H, W, 2)`` tensors holding ``(u, v)`` pairs.

Normalized coordinates put -1 and +1 on the *centers* of the first and last
pixel along each axis, so one pixel spans ``2 / (n - 1)`` normalized units.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F

__all__ = [
    "identity_grid",
    "bilinear_sample",
    "make_affine_grid",
    "bspline_interpolate",
    "gaussian_kernel1d",
    "gaussian_smooth",
    "upsample_bilinear",
    "sobel_gradients",
    "pixels_to_normalized",
    "normalized_to_pixels",
]


def identity_grid(batch: int, height: int, width: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Identity grid of shape ``(batch, height, width, 2)``."""
    v = torch.linspace(-1.0, 1.0, height, dtype=dtype, device=device)
    u = torch.linspace(-1.0, 1.0, width, dtype=dtype, device=device)
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    grid = torch.stack((uu, vv), dim=-1)
    return grid.unsqueeze(0).expand(batch, height, width, 2)


def normalized_to_pixels(value, n: int):
    """Convert a normalized length along an axis of ``n`` pixels to pixels."""
    return value * (n - 1) / 2.0


def pixels_to_normalized(value, n: int):
    return value * 2.0 / (n - 1)


def _snap(coord: torch.Tensor, n: int) -> torch.Tensor:
    # Round-off in (u + 1) / 2 * (n - 1) puts identity samples a few ulps of
    # (n - 1) off integer positions; snap the value only so gradients are untouched.
    nearest = torch.round(coord.detach())
    tol = 4 * torch.finfo(coord.dtype).eps * max(1, n - 1)
    close = (coord.detach() - nearest).abs() <= tol
    return torch.where(close, coord + (nearest - coord).detach(), coord)


def _sample(field: torch.Tensor, grid: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Bilinear sampling of ``field`` at ``grid``; output size follows the grid."""
    b, c, h, w = field.shape
    ho, wo = grid.shape[1], grid.shape[2]
    x = _snap((grid[..., 0] + 1.0) * 0.5 * (w - 1), w)
    y = _snap((grid[..., 1] + 1.0) * 0.5 * (h - 1), h)
    if padding == "border":
        x = x.clamp(0, w - 1)
        y = y.clamp(0, h - 1)
    elif padding != "zeros":
        raise ValueError(f"unknown padding mode {padding!r}")

    x0 = torch.floor(x.detach())
    y0 = torch.floor(y.detach())
    wx1 = x - x0
    wy1 = y - y0
    wx0 = 1.0 - wx1
    wy0 = 1.0 - wy1

    flat = field.reshape(b, c, h * w)
    out = field.new_zeros(b, c, ho * wo)
    for dx, wx in ((0, wx0), (1, wx1)):
        for dy, wy in ((0, wy0), (1, wy1)):
            xi = (x0 + dx).long()
            yi = (y0 + dy).long()
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(b, 1, ho * wo)
            vals = flat.gather(2, idx.expand(b, c, ho * wo))
            weight = (wx * wy * valid.to(field.dtype)).reshape(b, 1, ho * wo)
            out = out + vals * weight
    return out.reshape(b, c, ho, wo)


def bilinear_sample(field: torch.Tensor, grid: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Sample ``field`` (B, C, H, W) at the normalized locations in ``grid`` (B, H, W, 2).

    Locations outside [-1, 1] read as zero unless ``padding="border"``, which
    clamps them to the nearest edge pixel. Differentiable with respect to
    both the field values and the grid coordinates.
    """
    if field.dim() != 4 or grid.dim() != 4 or grid.shape[-1] != 2:
        raise ValueError(f"expected field (B,C,H,W) and grid (B,H,W,2), got {tuple(field.shape)} and {tuple(grid.shape)}")
    if field.shape[0] != grid.shape[0] or field.shape[2:] != grid.shape[1:3]:
        raise ValueError(f"grid shape {tuple(grid.shape)} does not match field shape {tuple(field.shape)}")
    return _sample(field, grid, padding)


def make_affine_grid(matrix: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Map the identity grid through a batch of 3x3 homogeneous matrices.

    ``matrix`` is ``(3, 3)`` or ``(B, 3, 3)``; the last row must be (0, 0, 1).
    """
    if matrix.dim() == 2:
        matrix = matrix.unsqueeze(0)
    if matrix.shape[-2:] != (3, 3):
        raise ValueError(f"expected 3x3 matrices, got {tuple(matrix.shape)}")
    last = matrix[:, 2, :].detach()
    expected = torch.tensor([0.0, 0.0, 1.0], dtype=last.dtype, device=last.device)
    if not torch.allclose(last, expected.expand_as(last), atol=1e-7):
        raise ValueError("affine matrix last row must be (0, 0, 1)")
    b = matrix.shape[0]
    ident = identity_grid(b, height, width, dtype=matrix.dtype, device=matrix.device)
    lin = matrix[:, :2, :2]
    shift = matrix[:, :2, 2]
    return torch.einsum("bij,bhwj->bhwi", lin, ident) + shift[:, None, None, :]


def _bspline_weights(n_out: int, n_ctrl: int, dtype, device) -> torch.Tensor:
    """(n_out, n_ctrl) cubic B-spline weights with edge-replicated control points."""
    t = torch.linspace(0.0, n_ctrl - 1.0, n_out, dtype=torch.float64)
    base = torch.floor(t)
    frac = t - base
    # uniform cubic B-spline basis for offsets -1, 0, +1, +2
    basis = (
        (1 - frac) ** 3 / 6.0,
        (3 * frac**3 - 6 * frac**2 + 4) / 6.0,
        (-3 * frac**3 + 3 * frac**2 + 3 * frac + 1) / 6.0,
        frac**3 / 6.0,
    )
    weights = torch.zeros(n_out, n_ctrl, dtype=torch.float64)
    rows = torch.arange(n_out)
    for offset, wk in zip((-1, 0, 1, 2), basis):
        idx = (base.long() + offset).clamp(0, n_ctrl - 1)
        weights.index_put_((rows, idx), wk, accumulate=True)
    return weights.to(dtype=dtype, device=device)


def bspline_interpolate(control_points: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Cubic B-spline tensor-product field from a ``b x b`` control lattice.

    ``control_points`` is ``(B, b, b)`` or ``(B, 1, b, b)``; the lattice is
    spread uniformly over the full image extent. Returns ``(B, 1, H, W)``.
    Every output value is a convex combination of control points.
    """
    if control_points.dim() == 4:
        control_points = control_points[:, 0]
    if control_points.dim() != 3:
        raise ValueError(f"expected (B, b, b) control points, got {tuple(control_points.shape)}")
    by, bx = control_points.shape[1:]
    if min(by, bx) < 4:
        raise ValueError(f"cubic B-spline needs at least 4x4 control points, got {by}x{bx}")
    wy = _bspline_weights(height, by, control_points.dtype, control_points.device)
    wx = _bspline_weights(width, bx, control_points.dtype, control_points.device)
    field = torch.einsum("hi,bij,wj->bhw", wy, control_points, wx)
    return field.unsqueeze(1)


def gaussian_kernel1d(sigma: float, dtype=torch.float64, device=None) -> torch.Tensor:
    radius = int(math.ceil(3.0 * sigma))
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    k = torch.exp(-0.5 * (x / sigma) ** 2)
    return (k / k.sum()).to(dtype=dtype, device=device)


def gaussian_smooth(field: torch.Tensor, sigma: float) -> torch.Tensor:
    """Separable Gaussian smoothing of every channel, reflection boundary."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    b, c, h, w = field.shape
    k = gaussian_kernel1d(sigma, field.dtype, field.device)
    r = (k.numel() - 1) // 2
    x = field.reshape(b * c, 1, h, w)
    x = F.pad(x, (r, r, 0, 0), mode="reflect" if r < w else "replicate")
    x = F.conv2d(x, k.view(1, 1, 1, -1))
    x = F.pad(x, (0, 0, r, r), mode="reflect" if r < h else "replicate")
    x = F.conv2d(x, k.view(1, 1, -1, 1))
    return x.reshape(b, c, h, w)


def upsample_bilinear(field: torch.Tensor, ds: int, size: tuple[int, int] | None = None) -> torch.Tensor:
    """Bilinear upsampling by an integer factor under the pixel-center convention.

    The low-resolution lattice and the output lattice share the normalized
    extent [-1, 1], so a ``(h, w)`` field becomes ``(h * ds, w * ds)``. When
    ``size`` is given it must be exactly divisible by ``ds``.
    """
    if int(ds) != ds or ds < 1:
        raise ValueError(f"ds must be a positive integer, got {ds}")
    b, c, h, w = field.shape
    if size is not None:
        if size[0] % ds or size[1] % ds or (size[0] // ds, size[1] // ds) != (h, w):
            raise ValueError(f"target size {size} is not the low-res shape {(h, w)} times {ds}")
    if ds == 1:
        return field
    grid = identity_grid(b, h * ds, w * ds, dtype=field.dtype, device=field.device)
    return _sample(field, grid, padding="border")


_SOBEL_X = ((-1.0, 0.0, 1.0), (-2.0, 0.0, 2.0), (-1.0, 0.0, 1.0))


def sobel_gradients(field: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel 3x3 Sobel responses ``(S_x, S_y)`` with reflection padding."""
    b, c, h, w = field.shape
    if h < 3 or w < 3:
        raise ValueError(f"Sobel filtering needs at least 3x3 maps, got {h}x{w}")
    kx = torch.tensor(_SOBEL_X, dtype=field.dtype, device=field.device)
    ky = kx.t().contiguous()
    kernel = torch.stack((kx, ky)).unsqueeze(1)
    x = F.pad(field.reshape(b * c, 1, h, w), (1, 1, 1, 1), mode="reflect")
    out = F.conv2d(x, kernel).reshape(b, c, 2, h, w)
    return out[:, :, 0], out[:, :, 1]
