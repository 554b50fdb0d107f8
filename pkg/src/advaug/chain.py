"""Chains of transforms: sampling, application, pull-back and diversity counts.

Members are stored in *application order*: ``Chain((noise, affine))`` first
adds noise, then warps.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Sequence

import torch

from . import transforms as tf
from .transforms import Constraints, DEFAULT_CONSTRAINTS, TransformParams


@dataclass(frozen=True)
class Chain:
    members: tuple[TransformParams, ...]
    p: float = 0.5

    def __post_init__(self):
        if not self.members:
            raise ValueError("a chain needs at least one member")
        fams = self.families
        if len(set(fams)) != len(fams):
            raise ValueError(f"families repeat within chain: {fams}")

    @property
    def families(self) -> tuple[str, ...]:
        return tuple(m.family for m in self.members)

    def tensors(self) -> list[torch.Tensor]:
        return [tf.tensor_of(m) for m in self.members]

    def with_tensors(self, values: Sequence[torch.Tensor]) -> "Chain":
        return replace(self, members=tuple(tf.with_tensor(m, v) for m, v in zip(self.members, values)))

    def detach(self) -> "Chain":
        return self.with_tensors([t.detach() for t in self.tensors()])

    def requires_grad_(self) -> "Chain":
        """Fresh leaf copies of every parameter tensor with gradients enabled."""
        return self.with_tensors([t.detach().clone().requires_grad_(True) for t in self.tensors()])

    def to_dict(self) -> dict:
        return {"p": self.p, "order": list(self.families), "members": [tf.params_to_dict(m) for m in self.members]}

    @classmethod
    def from_dict(cls, d: dict) -> "Chain":
        members = tuple(tf.params_from_dict(m) for m in d["members"])
        if "order" in d and list(d["order"]) != [m.family for m in members]:
            raise ValueError(f"chain order {d['order']} does not match member families")
        return cls(members, d.get("p", 0.5))


def select_families(rng: torch.Generator, p: float, allowed: Sequence[str]) -> list[str]:
    """Bernoulli(p) selection of families in random order; empty draws are retried."""
    if not allowed:
        raise ValueError("allowed_families must be non-empty")
    if not 0 < p <= 1:
        raise ValueError(f"selection probability must be in (0, 1], got {p}")
    while True:
        keep = torch.rand(len(allowed), generator=rng) < p
        chosen = [f for f, k in zip(allowed, keep.tolist()) if k]
        if chosen:
            break
    order = torch.randperm(len(chosen), generator=rng).tolist()
    return [chosen[i] for i in order]


def sample_chain(
    rng: torch.Generator,
    shape: tuple[int, int, int],
    p: float = 0.5,
    allowed_families: Sequence[str] = tf.FAMILIES,
    constraints: Constraints = DEFAULT_CONSTRAINTS,
    dtype=torch.float32,
) -> Chain:
    families = select_families(rng, p, allowed_families)
    members = tuple(tf.random_init(f, shape, rng, constraints, dtype) for f in families)
    return Chain(members, p)


def apply_chain(chain: Chain, x: torch.Tensor) -> torch.Tensor:
    """Apply members left to right to an image batch."""
    for m in chain.members:
        x = tf.apply(x, m)
    return torch.nan_to_num(x, nan=0.0, posinf=0.0, neginf=0.0)


def warp_forward(chain: Chain, prob: torch.Tensor) -> torch.Tensor:
    """Move a probability map along the chain's geometric members only."""
    for m in chain.members:
        if tf.is_geometric(m):
            prob = tf.apply(prob, m, is_prob=True)
    return prob


def pull_back(chain: Chain, prob: torch.Tensor) -> torch.Tensor:
    """Map a prediction on the transformed image back to original coordinates."""
    for m in reversed(chain.members):
        if tf.is_geometric(m):
            prob = tf.apply_inverse(prob, m)
    return prob


def project_chain(chain: Chain) -> Chain:
    return replace(chain, members=tuple(tf.project(m) for m in chain.members))


def enumerate_diversity(n_families: int) -> tuple[int, int]:
    """Count ordered chains and unordered combinations of distinct families.

    Both counts are obtained by explicit enumeration and cross-checked
    against their closed forms.
    """
    if not 1 <= n_families <= 8:
        raise ValueError(f"n_families must be in 1..8, got {n_families}")
    items = range(n_families)
    chains = sum(1 for k in range(1, n_families + 1) for _ in itertools.permutations(items, k))
    combos = sum(1 for k in range(1, n_families + 1) for _ in itertools.combinations(items, k))
    n = n_families
    closed_chains = sum(math.factorial(n) // math.factorial(n - k) for k in range(1, n + 1))
    closed_combos = sum(math.comb(n, k) for k in range(1, n + 1))
    if (chains, combos) != (closed_chains, closed_combos):
        raise AssertionError("enumeration disagrees with closed form")
    return chains, combos
