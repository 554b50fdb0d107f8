"""Parameterized, differentiable transformation families.

Four families are provided: additive noise and a multiplicative bias field
(photometric, they change values only) and an affine warp and a diffeomorphic
deformation (geometric, they move coordinates and have exact inverses).

Every parameter object carries a leading batch dimension so each image in a
batch gets its own parameters; constraints are enforced per image.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import ClassVar, Union

import torch

from .grid import (
    bilinear_sample,
    bspline_interpolate,
    gaussian_smooth,
    identity_grid,
    make_affine_grid,
    upsample_bilinear,
)

FAMILIES = ("noise", "bias", "affine", "morph")
PHOTOMETRIC = ("noise", "bias")
GEOMETRIC = ("affine", "morph")


@dataclass(frozen=True)
class Constraints:
    """Search-space bounds for every family (defaults follow the reference setup)."""

    noise_epsilon: float = 1.0
    bias_epsilon: float = 0.3
    bias_control_points: int = 4
    translation: float = 0.1
    rotation: float = 15.0 / 180.0
    scale: float = 0.2
    morph_epsilon: float = 1.5
    morph_ds: int = 8
    morph_sigma: float = 1.0
    n_squaring: int = 8

    @property
    def affine_bounds(self) -> tuple[float, ...]:
        return (self.translation, self.translation, self.rotation, self.scale, self.scale)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "Constraints":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


DEFAULT_CONSTRAINTS = Constraints()


def _per_item_norm(t: torch.Tensor) -> torch.Tensor:
    return t.flatten(1).norm(dim=1).view(-1, *([1] * (t.dim() - 1)))


@dataclass(frozen=True)
class NoiseParams:
    r: torch.Tensor  # (B, 1, H, W)
    epsilon: float = 1.0

    family: ClassVar[str] = "noise"
    tensor_name: ClassVar[str] = "r"


@dataclass(frozen=True)
class BiasParams:
    c: torch.Tensor  # (B, b, b), log-space control points
    epsilon: float = 0.3

    family: ClassVar[str] = "bias"
    tensor_name: ClassVar[str] = "c"

    @property
    def log_bounds(self) -> tuple[float, float]:
        return math.log(1.0 - self.epsilon), math.log(1.0 + self.epsilon)


@dataclass(frozen=True)
class AffineParams:
    a: torch.Tensor  # (B, 5): t_x, t_y, rot (fraction of pi), s_x, s_y
    bounds: tuple[float, ...] = DEFAULT_CONSTRAINTS.affine_bounds

    family: ClassVar[str] = "affine"
    tensor_name: ClassVar[str] = "a"


@dataclass(frozen=True)
class MorphParams:
    v_low: torch.Tensor  # (B, 2, H/ds, W/ds), normalized units
    epsilon: float = 1.5
    ds: int = 8
    sigma: float = 1.0
    n_squaring: int = 8

    family: ClassVar[str] = "morph"
    tensor_name: ClassVar[str] = "v_low"


TransformParams = Union[NoiseParams, BiasParams, AffineParams, MorphParams]


def tensor_of(p: TransformParams) -> torch.Tensor:
    return getattr(p, p.tensor_name)


def with_tensor(p: TransformParams, value: torch.Tensor) -> TransformParams:
    return replace(p, **{p.tensor_name: value})


def is_geometric(p: TransformParams) -> bool:
    return p.family in GEOMETRIC


# --------------------------------------------------------------------------- apply


def _check_batch(x: torch.Tensor, t: torch.Tensor) -> None:
    if x.dim() != 4:
        raise ValueError(f"expected a (B, C, H, W) tensor, got shape {tuple(x.shape)}")
    if t.shape[0] != x.shape[0]:
        raise ValueError(f"parameter batch {t.shape[0]} does not match input batch {x.shape[0]}")


def renormalize(prob: torch.Tensor) -> torch.Tensor:
    """Project each pixel back onto the probability simplex (uniform if empty)."""
    prob = prob.clamp_min(0.0)
    total = prob.sum(dim=1, keepdim=True)
    uniform = torch.full_like(prob, 1.0 / prob.shape[1])
    return torch.where(total > 0, prob / total.clamp_min(torch.finfo(prob.dtype).tiny), uniform)


def _warp(x: torch.Tensor, grid: torch.Tensor, is_prob: bool) -> torch.Tensor:
    if is_prob:
        # probability maps extend their border (background) instead of reading zeros
        return renormalize(bilinear_sample(x, grid, padding="border"))
    return bilinear_sample(x, grid)


def apply_noise(x: torch.Tensor, p: NoiseParams) -> torch.Tensor:
    _check_batch(x, p.r)
    if p.r.shape[1:] != x.shape[1:]:
        raise ValueError(f"noise shape {tuple(p.r.shape)} does not match image {tuple(x.shape)}")
    return x + p.r


def bias_field(p: BiasParams, height: int, width: int) -> torch.Tensor:
    """Multiplicative field ``exp(B(c))`` of shape ``(B, 1, H, W)``."""
    return torch.exp(bspline_interpolate(p.c, height, width))


def apply_bias(x: torch.Tensor, p: BiasParams) -> torch.Tensor:
    _check_batch(x, p.c)
    return x * bias_field(p, x.shape[2], x.shape[3])


def affine_matrix(p: AffineParams) -> torch.Tensor:
    """Forward homogeneous matrices ``T @ R @ S`` of shape ``(B, 3, 3)``."""
    tx, ty, rot, sx, sy = p.a.unbind(dim=1)
    if bool(((1 + sx) <= 0).any() or ((1 + sy) <= 0).any()):
        raise ValueError("degenerate affine scale: 1 + s must be positive")
    one, zero = torch.ones_like(tx), torch.zeros_like(tx)
    cos, sin = torch.cos(rot * math.pi), torch.sin(rot * math.pi)
    T = torch.stack([one, zero, tx, zero, one, ty, zero, zero, one], dim=1).view(-1, 3, 3)
    R = torch.stack([cos, -sin, zero, sin, cos, zero, zero, zero, one], dim=1).view(-1, 3, 3)
    S = torch.stack([1 + sx, zero, zero, zero, 1 + sy, zero, zero, zero, one], dim=1).view(-1, 3, 3)
    return T @ R @ S


def invert_affine(p: AffineParams) -> torch.Tensor:
    """Closed-form inverse ``S^-1 @ R^-1 @ T^-1`` of :func:`affine_matrix`."""
    tx, ty, rot, sx, sy = p.a.unbind(dim=1)
    one, zero = torch.ones_like(tx), torch.zeros_like(tx)
    cos, sin = torch.cos(rot * math.pi), torch.sin(rot * math.pi)
    T_inv = torch.stack([one, zero, -tx, zero, one, -ty, zero, zero, one], dim=1).view(-1, 3, 3)
    R_inv = torch.stack([cos, sin, zero, -sin, cos, zero, zero, zero, one], dim=1).view(-1, 3, 3)
    S_inv = torch.stack([1 / (1 + sx), zero, zero, zero, 1 / (1 + sy), zero, zero, zero, one], dim=1).view(-1, 3, 3)
    return S_inv @ R_inv @ T_inv


def warp_affine(x: torch.Tensor, matrix: torch.Tensor, is_prob: bool = False) -> torch.Tensor:
    grid = make_affine_grid(matrix, x.shape[2], x.shape[3])
    return _warp(x, grid, is_prob)


def apply_affine(x: torch.Tensor, p: AffineParams, is_prob: bool = False) -> torch.Tensor:
    """Resample ``x`` at ``M @ (u, v, 1)``; set ``is_prob`` for probability maps."""
    _check_batch(x, p.a)
    return warp_affine(x, affine_matrix(p), is_prob)


def velocity_field(p: MorphParams, height: int, width: int) -> torch.Tensor:
    """Smooth the low-resolution field (sigma in low-res pixels), then upsample."""
    if height % p.ds or width % p.ds:
        raise ValueError(f"image size {height}x{width} is not divisible by ds={p.ds}")
    return upsample_bilinear(gaussian_smooth(p.v_low, p.sigma), p.ds, size=(height, width))


def integrate_velocity(p: MorphParams, height: int, width: int, direction: str = "forward") -> torch.Tensor:
    """Displacement field ``(B, 2, H, W)`` of the deformation by scaling and squaring.

    ``direction="backward"`` integrates the negated velocity, giving the
    inverse deformation.
    """
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    v = velocity_field(p, height, width)
    if direction == "backward":
        v = -v
    disp = v / (2**p.n_squaring)
    ident = identity_grid(v.shape[0], height, width, dtype=v.dtype, device=v.device)
    for _ in range(p.n_squaring):
        grid = ident + disp.permute(0, 2, 3, 1)
        disp = disp + bilinear_sample(disp, grid, padding="border")
    return gaussian_smooth(disp, p.sigma)


def warp_displacement(x: torch.Tensor, disp: torch.Tensor, is_prob: bool = False) -> torch.Tensor:
    b, _, h, w = x.shape
    grid = identity_grid(b, h, w, dtype=x.dtype, device=x.device) + disp.permute(0, 2, 3, 1)
    return _warp(x, grid, is_prob)


def apply_morph(x: torch.Tensor, p: MorphParams, is_prob: bool = False, direction: str = "forward") -> torch.Tensor:
    _check_batch(x, p.v_low)
    disp = integrate_velocity(p, x.shape[2], x.shape[3], direction)
    return warp_displacement(x, disp, is_prob)


def apply(x: torch.Tensor, p: TransformParams, is_prob: bool = False) -> torch.Tensor:
    """Apply any transform; photometric ones are skipped for probability maps."""
    if p.family == "noise":
        return x if is_prob else apply_noise(x, p)
    if p.family == "bias":
        return x if is_prob else apply_bias(x, p)
    if p.family == "affine":
        return apply_affine(x, p, is_prob)
    if p.family == "morph":
        return apply_morph(x, p, is_prob)
    raise ValueError(f"unknown transform family {p.family!r}")


def apply_inverse(prob: torch.Tensor, p: TransformParams) -> torch.Tensor:
    """Map a probability map back through the inverse of a geometric transform."""
    if p.family == "affine":
        return warp_affine(prob, invert_affine(p), is_prob=True)
    if p.family == "morph":
        return apply_morph(prob, p, is_prob=True, direction="backward")
    return prob


# ---------------------------------------------------------------- constraints


def project(p: TransformParams, rng: torch.Generator | None = None) -> TransformParams:
    """Project parameters onto their family's feasible set (per batch item)."""
    t = tensor_of(p).detach()
    if p.family == "noise":
        norm = _per_item_norm(t)
        scale = torch.clamp(p.epsilon / norm.clamp_min(1e-30), max=1.0)
        return with_tensor(p, t * scale)
    if p.family == "bias":
        lo, hi = p.log_bounds
        return with_tensor(p, t.clamp(lo, hi))
    if p.family == "affine":
        bound = torch.tensor(p.bounds, dtype=t.dtype, device=t.device)
        return with_tensor(p, torch.maximum(torch.minimum(t, bound), -bound))
    if p.family == "morph":
        norm = _per_item_norm(t)
        dead = (norm == 0).flatten()
        if bool(dead.any()):
            gen = rng if rng is not None else torch.Generator().manual_seed(0)
            fresh = torch.randn(t.shape, generator=gen, dtype=t.dtype)
            t = torch.where(dead.view(-1, 1, 1, 1), fresh, t)
            norm = _per_item_norm(t)
        return with_tensor(p, p.epsilon * t / norm)
    raise ValueError(f"unknown transform family {p.family!r}")


def satisfies(p: TransformParams, rtol: float = 1e-5) -> bool:
    """True when ``p`` lies in its feasible set (up to float round-off)."""
    t = tensor_of(p).detach().double()
    if p.family == "noise":
        return bool((_per_item_norm(t) <= p.epsilon * (1 + rtol)).all())
    if p.family == "bias":
        height = max(4 * t.shape[1], 32)
        phi = torch.exp(bspline_interpolate(t, height, height))
        return bool(((phi - 1).abs().amax() <= p.epsilon * (1 + rtol)))
    if p.family == "affine":
        bound = torch.tensor(p.bounds, dtype=t.dtype)
        return bool((t.abs() <= bound * (1 + rtol)).all())
    if p.family == "morph":
        return bool(((_per_item_norm(t) - p.epsilon).abs() <= p.epsilon * rtol).all())
    raise ValueError(f"unknown transform family {p.family!r}")


def random_init(
    family: str,
    shape: tuple[int, int, int],
    rng: torch.Generator,
    constraints: Constraints = DEFAULT_CONSTRAINTS,
    dtype=torch.float32,
) -> TransformParams:
    """Random feasible parameters for ``family`` on a ``(B, H, W)`` image batch."""
    b, h, w = shape
    cfg = constraints
    if family == "noise":
        r = torch.randn((b, 1, h, w), generator=rng, dtype=torch.float64)
        return project(NoiseParams(r.to(dtype), cfg.noise_epsilon))
    if family == "bias":
        n = cfg.bias_control_points
        lo, hi = math.log(1 - cfg.bias_epsilon), math.log(1 + cfg.bias_epsilon)
        c = lo + (hi - lo) * torch.rand((b, n, n), generator=rng, dtype=torch.float64)
        return BiasParams(c.to(dtype), cfg.bias_epsilon)
    if family == "affine":
        bound = torch.tensor(cfg.affine_bounds, dtype=torch.float64)
        a = (2 * torch.rand((b, 5), generator=rng, dtype=torch.float64) - 1) * bound
        return AffineParams(a.to(dtype), cfg.affine_bounds)
    if family == "morph":
        if h % cfg.morph_ds or w % cfg.morph_ds:
            raise ValueError(f"image size {h}x{w} is not divisible by ds={cfg.morph_ds}")
        v = torch.randn((b, 2, h // cfg.morph_ds, w // cfg.morph_ds), generator=rng, dtype=torch.float64)
        p = MorphParams(v, cfg.morph_epsilon, cfg.morph_ds, cfg.morph_sigma, cfg.n_squaring)
        p = project(p)
        return with_tensor(p, p.v_low.to(dtype))
    raise ValueError(f"unknown transform family {family!r}")


def identity_params(
    family: str,
    shape: tuple[int, int, int],
    constraints: Constraints = DEFAULT_CONSTRAINTS,
    dtype=torch.float32,
) -> TransformParams:
    """Parameters that leave images unchanged (zero velocity is infeasible for morph)."""
    b, h, w = shape
    cfg = constraints
    if family == "noise":
        return NoiseParams(torch.zeros(b, 1, h, w, dtype=dtype), cfg.noise_epsilon)
    if family == "bias":
        n = cfg.bias_control_points
        return BiasParams(torch.zeros(b, n, n, dtype=dtype), cfg.bias_epsilon)
    if family == "affine":
        return AffineParams(torch.zeros(b, 5, dtype=dtype), cfg.affine_bounds)
    if family == "morph":
        v = torch.zeros(b, 2, h // cfg.morph_ds, w // cfg.morph_ds, dtype=dtype)
        return MorphParams(v, cfg.morph_epsilon, cfg.morph_ds, cfg.morph_sigma, cfg.n_squaring)
    raise ValueError(f"unknown transform family {family!r}")


# -------------------------------------------------------------- serialization

_META = {
    "noise": ("epsilon",),
    "bias": ("epsilon",),
    "affine": ("bounds",),
    "morph": ("epsilon", "ds", "sigma", "n_squaring"),
}
_TYPES = {"noise": NoiseParams, "bias": BiasParams, "affine": AffineParams, "morph": MorphParams}


def params_to_dict(p: TransformParams) -> dict:
    t = tensor_of(p).detach().cpu()
    d = {"family": p.family, "dtype": str(t.dtype).replace("torch.", ""), "shape": list(t.shape)}
    for key in _META[p.family]:
        value = getattr(p, key)
        d[key] = list(value) if isinstance(value, tuple) else value
    d[p.tensor_name] = t.tolist()
    return d


def params_from_dict(d: dict) -> TransformParams:
    family = d["family"]
    if family not in _TYPES:
        raise ValueError(f"unknown transform family {family!r}")
    cls = _TYPES[family]
    dtype = getattr(torch, d.get("dtype", "float32"))
    value = torch.tensor(d[cls.tensor_name], dtype=dtype).reshape(d["shape"])
    meta = {k: (tuple(d[k]) if isinstance(d[k], list) else d[k]) for k in _META[family] if k in d}
    return cls(value, **meta)
