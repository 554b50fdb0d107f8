"""Inner maximization over transform parameters and the resulting regularizer.

Strategies:

* ``advchain``   - sample a chain, run ``k`` projected gradient ascent steps on
  all members jointly, regularize with the optimized chain;
* ``advcomb``    - optimize every selected family on its own and sum the
  per-family consistency losses;
* ``randchain``  - sampled chain at its random initialization, no ascent;
* ``randsingle`` - a single random transform of ``family``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from . import transforms as tf
from .chain import Chain, apply_chain, project_chain, sample_chain, select_families
from .losses import DistanceConfig, Predictor, consistency_loss

STRATEGIES = ("advchain", "advcomb", "randchain", "randsingle")


@dataclass(frozen=True)
class AdversaryConfig:
    k: int = 1
    alpha: float = 1.0
    strategy: str = "advchain"
    family: str | None = None
    p: float = 0.5
    families: tuple[str, ...] = tf.FAMILIES
    distance: DistanceConfig = field(default_factory=DistanceConfig)
    constraints: tf.Constraints = tf.DEFAULT_CONSTRAINTS

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.k < 1:
            raise ValueError(f"k must be at least 1, got {self.k}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.strategy == "randsingle" and self.family not in tf.FAMILIES:
            raise ValueError("randsingle needs a family")


# gradient norms below this are round-off (e.g. a predictor that ignores its input)
GRAD_FLOOR = 1e-12


def _normalized(g: torch.Tensor) -> torch.Tensor:
    norm = g.flatten(1).norm(dim=1).view(-1, *([1] * (g.dim() - 1)))
    return torch.where(norm > GRAD_FLOOR, g / norm.clamp_min(GRAD_FLOOR), torch.zeros_like(g))


def pgd_step(
    chain: Chain,
    x: torch.Tensor,
    f: Predictor,
    cfg: AdversaryConfig = AdversaryConfig(),
    reference: torch.Tensor | None = None,
) -> Chain:
    """One projected ascent step on every member, gradients from one backward pass.

    Each member's per-image parameter block moves by ``alpha`` along its own
    L2-normalized gradient; blocks with zero gradient stay put.
    """
    live = chain.requires_grad_()
    loss = consistency_loss(x, f, live, cfg.distance, reference)
    if not loss.requires_grad:
        # the loss does not depend on any parameter: zero gradient everywhere
        return project_chain(chain.detach())
    grads = torch.autograd.grad(loss, live.tensors(), allow_unused=True)
    stepped = []
    for t, g in zip(live.tensors(), grads):
        t = t.detach()
        stepped.append(t if g is None else t + cfg.alpha * _normalized(g))
    return project_chain(chain.with_tensors(stepped))


def _shape(x: torch.Tensor) -> tuple[int, int, int]:
    if x.dim() != 4 or x.shape[0] == 0:
        raise ValueError(f"expected a non-empty (B, 1, H, W) batch, got {tuple(x.shape)}")
    return x.shape[0], x.shape[2], x.shape[3]


def _ascend(chain, x, f, cfg, reference):
    for _ in range(cfg.k):
        chain = pgd_step(chain, x, f, cfg, reference)
    return chain


def optimize_chain(
    x: torch.Tensor,
    f: Predictor,
    cfg: AdversaryConfig,
    rng: torch.Generator,
    reference: torch.Tensor | None = None,
) -> tuple[Chain, torch.Tensor]:
    """Sample a chain and (for adversarial strategies) run ``k`` ascent steps."""
    shape = _shape(x)
    if cfg.strategy == "randsingle":
        chain = Chain((tf.random_init(cfg.family, shape, rng, cfg.constraints, x.dtype),), cfg.p)
    else:
        chain = sample_chain(rng, shape, cfg.p, cfg.families, cfg.constraints, x.dtype)
    if cfg.strategy == "advchain":
        if reference is None:
            with torch.no_grad():
                reference = f(x)
        chain = _ascend(chain, x, f, cfg, reference)
    with torch.no_grad():
        x_adv = apply_chain(chain, x)
    return chain, x_adv


def regularizer(
    x: torch.Tensor,
    f: Predictor,
    cfg: AdversaryConfig,
    rng: torch.Generator,
    reference: torch.Tensor | None = None,
) -> tuple[torch.Tensor, list[Chain]]:
    """Consistency regularizer for a batch plus the chains that produced it.

    Gradients reach the predictor only; chain parameters are frozen at their
    optimized values.
    """
    _shape(x)
    if reference is None:
        with torch.no_grad():
            reference = f(x)
    reference = reference.detach()

    if cfg.strategy == "advcomb":
        shape = _shape(x)
        families = select_families(rng, cfg.p, cfg.families)
        total, chains = 0.0, []
        for fam in families:
            single = Chain((tf.random_init(fam, shape, rng, cfg.constraints, x.dtype),), cfg.p)
            single = _ascend(single, x, f, cfg, reference).detach()
            total = total + consistency_loss(x, f, single, cfg.distance, reference)
            chains.append(single)
        return total, chains

    chain, _ = optimize_chain(x, f, cfg, rng, reference)
    chain = chain.detach()
    return consistency_loss(x, f, chain, cfg.distance, reference), [chain]


def regularizer_loss(
    x: torch.Tensor,
    f: Predictor,
    cfg: AdversaryConfig,
    rng: torch.Generator,
    reference: torch.Tensor | None = None,
) -> torch.Tensor:
    return regularizer(x, f, cfg, rng, reference)[0]


class CountingPredictor(torch.nn.Module):
    """Wraps a predictor and counts forward calls and the images they processed."""

    def __init__(self, f: Predictor):
        super().__init__()
        self.f = f
        self.calls = 0
        self.items = 0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        self.items += x.shape[0]
        return self.f(x)

    def reset(self) -> None:
        self.calls = 0
        self.items = 0


def allowed(families: Sequence[str]) -> tuple[str, ...]:
    bad = [f for f in families if f not in tf.FAMILIES]
    if bad:
        raise ValueError(f"unknown families {bad}")
    return tuple(families)
