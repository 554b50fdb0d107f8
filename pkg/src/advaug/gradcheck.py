"""Central finite-difference verification of every differentiable operation.

The oracle perturbs one parameter entry at a time and evaluates the scalar
objective in float64; it never calls autograd. The checked gradient comes
from autograd in either float64 or float32. Errors are reported as
``max|analytic - numeric| / max|numeric|`` per parameter block, where
entries sitting on a sampler kink are compared with the matching one-sided
difference (see ``_kink_aware_error``).

Bilinear sampling is piecewise linear in the sample coordinates, so checks
that move sample positions use a small step (1e-6) to make kink crossings
negligible. The KL distance has large curvature where probabilities are
small and uses the same step. Linear kernels use 1e-4.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from . import grid as G
from . import transforms as tf
from .chain import Chain, apply_chain
from .losses import DistanceConfig, VARIANTS, composite_distance, consistency_loss
from .segnet import SegNet

SMOOTH_STEP = 1e-4
WARP_STEP = 1e-6
KINK_GAP = 1e-4
TOLERANCE = {torch.float64: 1e-5, torch.float32: 1e-3}


@dataclass
class GradResult:
    name: str
    block: str
    dtype: str
    max_rel_error: float
    n_entries: int
    kinks: int = 0

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def _differences(fn, value, step, indices):
    """Forward and backward one-sided differences of scalar ``fn`` (float64)."""
    base = value.detach().to(torch.float64).clone()
    flat = base.view(-1)
    with torch.no_grad():
        f0 = float(fn(base))
        fwd = torch.zeros(len(indices), dtype=torch.float64)
        bwd = torch.zeros(len(indices), dtype=torch.float64)
        for j, i in enumerate(indices):
            old = float(flat[i])
            flat[i] = old + step
            fwd[j] = (float(fn(base)) - f0) / step
            flat[i] = old - step
            bwd[j] = (f0 - float(fn(base))) / step
            flat[i] = old
    return fwd, bwd


def numeric_gradient(
    fn: Callable[[torch.Tensor], torch.Tensor],
    value: torch.Tensor,
    step: float,
    indices: Sequence[int] | None = None,
) -> torch.Tensor:
    """Central differences of scalar ``fn`` at ``value`` (float64) for flat ``indices``."""
    idx = list(range(value.numel())) if indices is None else list(indices)
    fwd, bwd = _differences(fn, value, step, idx)
    return 0.5 * (fwd + bwd)


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    analytic = analytic.detach().to(torch.float64).reshape(-1)
    numeric = numeric.detach().to(torch.float64).reshape(-1)
    scale = float(numeric.abs().max())
    diff = float((analytic - numeric).abs().max())
    if scale == 0.0:
        return diff
    return diff / scale


def _kink_aware_error(analytic, fn, value, step, idx):
    """Relative error against central differences, allowing one-sided matches at kinks.

    Bilinear sampling is only piecewise smooth. When a perturbation crosses a
    lattice line the forward and backward differences disagree; autograd then
    returns one of the two one-sided derivatives. An entry is accepted at a
    kink only if it matches one side. Returns ``(error, kinks)``.
    """
    fwd, bwd = _differences(fn, value, step, idx)
    central = 0.5 * (fwd + bwd)
    scale = float(central.abs().max()) or 1.0
    err = (analytic - central).abs() / scale
    # curvature also separates the one-sided values (by about 2 * step * f''),
    # but there autograd matches the central value, so only entries where a
    # one-sided value fits better are counted as kinks
    split = (fwd - bwd).abs() / scale > KINK_GAP
    sided = torch.minimum((analytic - fwd).abs(), (analytic - bwd).abs()) / scale
    kink = split & (sided < err)
    err = torch.where(kink, sided, err)
    return float(err.max()), int(kink.sum())


def check_blocks(
    name: str,
    fn: Callable[[Sequence[torch.Tensor]], torch.Tensor],
    values: Sequence[torch.Tensor],
    labels: Sequence[str],
    dtype: torch.dtype = torch.float64,
    step: float = WARP_STEP,
    max_entries: int | None = None,
    rng: torch.Generator | None = None,
) -> list[GradResult]:
    """Compare autograd (in ``dtype``) against float64 central differences.

    ``fn`` maps a list of parameter tensors to a scalar and must be
    dtype-agnostic. With ``max_entries`` only a random subset of each block
    is perturbed.
    """
    leaves = [v.detach().to(dtype).clone().requires_grad_(True) for v in values]
    grads = torch.autograd.grad(fn(leaves), leaves, allow_unused=True)
    results = []
    for b, (v, g, label) in enumerate(zip(values, grads, labels)):
        n = v.numel()
        if max_entries is not None and n > max_entries:
            gen = rng if rng is not None else torch.Generator().manual_seed(b)
            idx = torch.randperm(n, generator=gen)[:max_entries].tolist()
        else:
            idx = list(range(n))
        fixed = [w.detach().to(torch.float64) for w in values]

        def scalar(x, b=b):
            args = list(fixed)
            args[b] = x
            return fn(args)

        analytic = torch.zeros(len(idx), dtype=torch.float64) if g is None else g.reshape(-1)[idx].to(torch.float64)
        err, kinks = _kink_aware_error(analytic, scalar, v, step, idx)
        results.append(GradResult(name, label, str(dtype).replace("torch.", ""), err, len(idx), kinks))
    return results


def _probe(out: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    # generic nonlinear scalar: linear probe plus a quadratic term
    return (out * weights.to(out.dtype)).sum() + 0.5 * (out**2).mean()


def _simplex(shape, gen) -> torch.Tensor:
    return torch.softmax(2 * torch.randn(shape, generator=gen, dtype=torch.float64), dim=1)


def _off_lattice_grid(b, h, w, gen) -> torch.Tensor:
    """Random in-bounds grid whose pixel coordinates stay >= 0.01 px from integers."""
    x = torch.rand(b, h, w, generator=gen, dtype=torch.float64) * (w - 1)
    y = torch.rand(b, h, w, generator=gen, dtype=torch.float64) * (h - 1)
    x = torch.floor(x) + 0.01 + 0.98 * (x - torch.floor(x))
    y = torch.floor(y) + 0.01 + 0.98 * (y - torch.floor(y))
    return torch.stack((x / (w - 1) * 2 - 1, y / (h - 1) * 2 - 1), dim=-1)


def grid_cases(gen: torch.Generator, size: int = 16):
    """(name, fn, values, labels, step) for the grid kernels."""
    h = w = size
    wts = torch.randn(1, 2, h, w, generator=gen, dtype=torch.float64)
    img = torch.rand(1, 2, h, w, generator=gen, dtype=torch.float64)
    grid = _off_lattice_grid(1, h, w, gen)
    ctrl = torch.randn(1, 4, 4, generator=gen, dtype=torch.float64)
    low = torch.randn(1, 2, h // 4, w // 4, generator=gen, dtype=torch.float64)
    yield ("bilinear_sample", lambda a: _probe(G.bilinear_sample(a[0], a[1]), wts), [img, grid], ["image", "grid"], SMOOTH_STEP)
    yield ("bspline_interpolate", lambda a: _probe(G.bspline_interpolate(a[0], h, w), wts[:, :1]), [ctrl], ["control_points"], SMOOTH_STEP)
    yield ("gaussian_smooth", lambda a: _probe(G.gaussian_smooth(a[0], 1.0), wts), [img], ["field"], SMOOTH_STEP)
    yield ("upsample_bilinear", lambda a: _probe(G.upsample_bilinear(a[0], 4), wts), [low], ["field"], SMOOTH_STEP)
    yield ("sobel_gradients", lambda a: sum(_probe(s, wts) for s in G.sobel_gradients(a[0])), [img], ["map"], SMOOTH_STEP)


def transform_cases(gen: torch.Generator, size: int = 16):
    """Each family through its full apply pipeline, plus the morph integrator alone."""
    h = w = size
    cons = tf.Constraints(morph_ds=4)
    x = G.gaussian_smooth(torch.rand(1, 1, h, w, generator=gen, dtype=torch.float64), 1.0)
    wts = torch.randn(1, 1, h, w, generator=gen, dtype=torch.float64)
    for fam in tf.FAMILIES:
        p = tf.random_init(fam, (1, h, w), gen, cons, torch.float64)

        def fn(a, p=p):
            return _probe(tf.apply(x.to(a[0].dtype), tf.with_tensor(p, a[0])), wts)

        yield (f"apply_{fam}", fn, [tf.tensor_of(p)], [p.tensor_name], WARP_STEP)
    p = tf.random_init("morph", (1, h, w), gen, cons, torch.float64)
    wv = torch.randn(1, 2, h, w, generator=gen, dtype=torch.float64)
    for direction in ("forward", "backward"):
        yield (
            f"integrate_velocity_{direction}",
            lambda a, d=direction: _probe(tf.integrate_velocity(tf.with_tensor(p, a[0]), h, w, d), wv),
            [p.v_low],
            ["v_low"],
            WARP_STEP,
        )
    prob = G.gaussian_smooth(_simplex((1, 3, h, w), gen), 1.0)
    wp = torch.randn(1, 3, h, w, generator=gen, dtype=torch.float64)
    for fam in tf.GEOMETRIC:
        q = tf.random_init(fam, (1, h, w), gen, cons, torch.float64)
        yield (
            f"inverse_{fam}",
            lambda a, q=q: _probe(tf.apply_inverse(prob.to(a[0].dtype), tf.with_tensor(q, a[0])), wp),
            [tf.tensor_of(q)],
            [q.tensor_name],
            WARP_STEP,
        )


def _full_chain(gen, size, dtype=torch.float64) -> Chain:
    cons = tf.Constraints(morph_ds=4)
    order = torch.randperm(4, generator=gen).tolist()
    return Chain(tuple(tf.random_init(tf.FAMILIES[i], (1, size, size), gen, cons, dtype) for i in order))


def chain_cases(gen: torch.Generator, size: int = 16):
    chain = _full_chain(gen, size)
    x = G.gaussian_smooth(torch.rand(1, 1, size, size, generator=gen, dtype=torch.float64), 1.0)
    wts = torch.randn(1, 1, size, size, generator=gen, dtype=torch.float64)
    labels = [f"{m.family}.{m.tensor_name}" for m in chain.members]
    yield ("apply_chain", lambda a: _probe(apply_chain(chain.with_tensors(a), x.to(a[0].dtype)), wts), chain.tensors(), labels, WARP_STEP)


def distance_cases(gen: torch.Generator, size: int = 16):
    p = _simplex((1, 3, size, size), gen)
    q = _simplex((1, 3, size, size), gen)
    for variant in VARIANTS:
        cfg = DistanceConfig(0.5, variant)
        yield (f"distance_{variant}", lambda a, cfg=cfg: composite_distance(p.to(a[0].dtype), a[0], cfg), [q], ["p_prime"], WARP_STEP)


def _tiny_predictor(gen: torch.Generator, n_classes: int = 3):
    """Fixed random two-layer convolutional predictor (softmax output)."""
    w1 = 0.5 * torch.randn(6, 1, 3, 3, generator=gen, dtype=torch.float64)
    w2 = 0.5 * torch.randn(n_classes, 6, 3, 3, generator=gen, dtype=torch.float64)

    def f(x):
        hdn = torch.tanh(torch.nn.functional.conv2d(x, w1.to(x.dtype), padding=1))
        return torch.softmax(3 * torch.nn.functional.conv2d(hdn, w2.to(x.dtype), padding=1), dim=1)

    return f


def consistency_cases(gen: torch.Generator, size: int = 16):
    chain = _full_chain(gen, size)
    f = _tiny_predictor(gen)
    x = G.gaussian_smooth(torch.rand(1, 1, size, size, generator=gen, dtype=torch.float64), 1.0)
    labels = [f"{m.family}.{m.tensor_name}" for m in chain.members]
    yield ("consistency_loss", lambda a: consistency_loss(x.to(a[0].dtype), f, chain.with_tensors(a)), chain.tensors(), labels, WARP_STEP)


def predictor_cases(gen: torch.Generator, size: int = 16, n_params: int = 20):
    """Loss gradients w.r.t. ``n_params`` random network weights and input pixels."""
    torch.manual_seed(int(torch.randint(0, 2**31 - 1, (1,), generator=gen)))
    net = SegNet(n_classes=4, width=4, in_channels=2).double()
    names = [n for n, _ in net.named_parameters()]
    base = {n: p.detach().clone() for n, p in net.named_parameters()}
    x = torch.rand(1, 2, size, size, generator=gen, dtype=torch.float64)
    wts = torch.randn(1, 4, size, size, generator=gen, dtype=torch.float64)
    sizes = [base[n].numel() for n in names]
    total = sum(sizes)
    picks = torch.randperm(total, generator=gen)[:n_params].tolist()

    def params_fn(a):
        flat = torch.cat([base[n].reshape(-1).to(a[0].dtype) for n in names])
        flat = flat.index_put((torch.tensor(picks),), a[0])
        params, off = {}, 0
        for n, s in zip(names, sizes):
            params[n] = flat[off:off + s].view_as(base[n])
            off += s
        out = torch.func.functional_call(net.to(a[0].dtype), params, (x.to(a[0].dtype),))
        return _probe(out, wts)

    flat0 = torch.cat([base[n].reshape(-1) for n in names])
    yield ("predictor_params", params_fn, [flat0[picks]], ["theta"], SMOOTH_STEP)

    def input_fn(a):
        net.to(a[0].dtype)
        return _probe(net(a[0]), wts)

    yield ("predictor_input", input_fn, [x], ["x"], SMOOTH_STEP)


CASE_GROUPS = {
    "grid": grid_cases,
    "transforms": transform_cases,
    "chain": chain_cases,
    "distances": distance_cases,
    "consistency": consistency_cases,
    "predictor": predictor_cases,
}


def run_suite(
    n_instances: int = 5,
    seed: int = 0,
    dtypes: Sequence[torch.dtype] = (torch.float64, torch.float32),
    groups: Sequence[str] = tuple(CASE_GROUPS),
    max_entries: int | None = 64,
) -> list[GradResult]:
    results = []
    for inst in range(n_instances):
        for group in groups:
            gen = torch.Generator().manual_seed(seed * 1000 + inst)
            for name, fn, values, labels, step in CASE_GROUPS[group](gen):
                for dtype in dtypes:
                    sub = torch.Generator().manual_seed(seed * 1000 + inst)
                    results.extend(check_blocks(name, fn, values, labels, dtype, step, max_entries, sub))
    return results


def summarize(results: Sequence[GradResult]) -> dict[tuple[str, str, str], float]:
    """Worst relative error per (operation, block, dtype)."""
    worst: dict[tuple[str, str, str], float] = {}
    for r in results:
        key = (r.name, r.block, r.dtype)
        worst[key] = max(worst.get(key, 0.0), r.max_rel_error)
    return worst
