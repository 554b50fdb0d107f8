"""Consistency distances, the consistency regularizer, supervised loss and Dice."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .chain import Chain, apply_chain, pull_back
from .grid import sobel_gradients

Predictor = Callable[[torch.Tensor], torch.Tensor]

VARIANTS = ("mse", "kl", "mse+contour", "kl+contour")
KL_FLOOR = 1e-8
DICE_SMOOTH = 1e-5


@dataclass(frozen=True)
class DistanceConfig:
    w: float = 0.5
    variant: str = "mse+contour"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown distance variant {self.variant!r}; choose from {VARIANTS}")
        if self.w < 0:
            raise ValueError(f"contour weight must be nonnegative, got {self.w}")


@dataclass(frozen=True)
class SupervisedLossConfig:
    class_weights: tuple[float, ...] = (0.01, 0.33, 0.33, 0.33)

    def __post_init__(self):
        if any(w < 0 for w in self.class_weights):
            raise ValueError("class weights must be nonnegative")


def _same_shape(p: torch.Tensor, q: torch.Tensor) -> None:
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")


def mse_distance(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    _same_shape(p, q)
    return ((p - q) ** 2).mean()


def kl_distance(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Per-pixel KL(p || q) summed over classes, averaged over pixels."""
    _same_shape(p, q)
    # the floor applies to both sides so that KL(p || p) is exactly zero
    kl = p * (torch.log(p.clamp_min(KL_FLOOR)) - torch.log(q.clamp_min(KL_FLOOR)))
    return kl.sum(dim=1).mean()


def contour_distance(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Squared Sobel-response differences of the foreground channels (class 0 is background)."""
    _same_shape(p, q)
    if p.shape[1] < 2:
        raise ValueError("contour distance needs at least two classes")
    px, py = sobel_gradients(p[:, 1:])
    qx, qy = sobel_gradients(q[:, 1:])
    per_class = ((px - qx) ** 2).mean(dim=(0, 2, 3)) + ((py - qy) ** 2).mean(dim=(0, 2, 3))
    return per_class.sum()


def composite_distance(p: torch.Tensor, q: torch.Tensor, cfg: DistanceConfig = DistanceConfig()) -> torch.Tensor:
    base = kl_distance(p, q) if cfg.variant.startswith("kl") else mse_distance(p, q)
    if cfg.variant.endswith("+contour"):
        return base + cfg.w * contour_distance(p, q)
    return base


def consistency_loss(
    x: torch.Tensor,
    f: Predictor,
    chain: Chain,
    cfg: DistanceConfig = DistanceConfig(),
    reference: torch.Tensor | None = None,
) -> torch.Tensor:
    """Distance between ``f(x)`` and the pulled-back prediction on the chained image.

    The clean prediction is a fixed target: pass it as ``reference`` to reuse a
    cached forward pass, otherwise it is computed here without gradients.
    """
    if reference is None:
        with torch.no_grad():
            reference = f(x)
    reference = reference.detach()
    perturbed = f(apply_chain(chain, x))
    if perturbed.shape != reference.shape:
        raise ValueError(f"predictor output {tuple(perturbed.shape)} does not match {tuple(reference.shape)}")
    return composite_distance(reference, pull_back(chain, perturbed), cfg)


def supervised_loss(
    pred: torch.Tensor,
    label: torch.Tensor,
    cfg: SupervisedLossConfig = SupervisedLossConfig(),
) -> torch.Tensor:
    """Class-weighted cross entropy plus soft Dice over the foreground classes.

    ``pred`` is a ``(B, C, H, W)`` probability map and ``label`` a ``(B, H, W)``
    integer map.
    """
    n_classes = pred.shape[1]
    if len(cfg.class_weights) != n_classes:
        raise ValueError(f"{len(cfg.class_weights)} class weights for {n_classes} classes")
    label = label.long()
    if label.min() < 0 or label.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    weights = torch.tensor(cfg.class_weights, dtype=pred.dtype, device=pred.device)
    log_p = torch.log(pred.clamp_min(1e-12))
    nll = -log_p.gather(1, label.unsqueeze(1)).squeeze(1)
    pixel_w = weights[label]
    ce = (pixel_w * nll).sum() / pixel_w.sum().clamp_min(1e-12)

    onehot = torch.nn.functional.one_hot(label, n_classes).permute(0, 3, 1, 2).to(pred.dtype)
    inter = (pred * onehot).sum(dim=(0, 2, 3))[1:]
    denom = pred.sum(dim=(0, 2, 3))[1:] + onehot.sum(dim=(0, 2, 3))[1:]
    dice = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return ce + (1 - dice).mean()


def dice_score(pred_labels, true_labels, class_id: int) -> float:
    """Hard Dice overlap of one class; 1.0 when the class is absent from both."""
    a = torch.as_tensor(pred_labels) == class_id
    b = torch.as_tensor(true_labels) == class_id
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


def per_class_dice(pred_labels, true_labels, classes: Sequence[int]) -> dict[int, float]:
    return {c: dice_score(pred_labels, true_labels, c) for c in classes}
