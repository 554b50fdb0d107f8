"""Two-phase training: supervised pre-training, then consistency-regularized fine-tuning."""
from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import transforms as tf
from .adversary import AdversaryConfig, regularizer
from .data import AugmentConfig, Sample, augment_batch, stack
from .losses import DistanceConfig, SupervisedLossConfig, dice_score, supervised_loss
from .segnet import EmaShadow, NumericalError, SegNet, make_optimizer, train_step

log = logging.getLogger(__name__)

TRAIN_STRATEGIES = ("advchain", "advcomb", "randchain", "none")


@dataclass
class TrainConfig:
    strategy: str = "advchain"
    seed: int = 0
    n_classes: int = 4
    width: int = 8
    lambda_max: float = 1.0
    e_ramp: int = 20
    pretrain_epochs: int = 60
    finetune_epochs: int = 40
    steps_per_epoch: int = 1
    lr_pretrain: float = 1e-3
    lr_finetune: float = 1e-5
    batch_size: int = 20
    ema_decay: float = 0.999
    class_weights: tuple[float, ...] = (0.01, 0.33, 0.33, 0.33)
    k: int = 1
    alpha: float = 1.0
    p: float = 0.5
    families: tuple[str, ...] = tf.FAMILIES
    distance: str = "mse+contour"
    contour_weight: float = 0.5
    default_aug: bool = True
    finetune_default_aug: bool = True
    constraints: dict = field(default_factory=tf.Constraints().to_dict)

    def __post_init__(self):
        if self.strategy not in TRAIN_STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {TRAIN_STRATEGIES}")
        for name in ("pretrain_epochs", "finetune_epochs", "e_ramp", "batch_size", "steps_per_epoch"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.lr_pretrain <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")
        self.class_weights = tuple(self.class_weights)
        self.families = tuple(self.families)

    def adversary(self) -> AdversaryConfig:
        return AdversaryConfig(
            k=self.k,
            alpha=self.alpha,
            strategy=self.strategy,
            p=self.p,
            families=self.families,
            distance=DistanceConfig(self.contour_weight, self.distance),
            constraints=tf.Constraints.from_dict(self.constraints),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        d["families"] = list(self.families)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


@dataclass
class EpochReport:
    epoch: int
    phase: str
    supervised: float
    consistency: float
    lam: float
    val_dice: dict
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def ramp_lambda(e: float, cfg: TrainConfig) -> float:
    """Linear warm-up ``lambda_max * e / e_ramp``, capped at ``lambda_max``."""
    if e < 0:
        raise ValueError("epoch must be nonnegative")
    if cfg.e_ramp == 0:
        return cfg.lambda_max
    return min(cfg.lambda_max, cfg.lambda_max * e / cfg.e_ramp)


@torch.no_grad()
def evaluate(model, test_set: Sequence[Sample], n_classes: int = 4) -> dict:
    """Per-class Dice averaged over images whose ground truth contains the class."""
    if not test_set:
        raise ValueError("empty test set")
    if isinstance(model, EmaShadow):
        model = model.model
    images, labels = stack(test_set)
    pred = model(images).argmax(dim=1)
    per_class = {}
    for c in range(1, n_classes):
        scores = [dice_score(p, y, c) for p, y in zip(pred, labels) if bool((y == c).any())]
        per_class[str(c)] = float(np.mean(scores)) if scores else float("nan")
    valid = [v for v in per_class.values() if not math.isnan(v)]
    return {"per_class": per_class, "foreground_mean": float(np.mean(valid)) if valid else float("nan")}


def _batches(rng: torch.Generator, n: int, size: int):
    """Endless index batches of ``size`` drawn by cycling shuffled epochs of ``range(n)``."""
    buf: list[int] = []
    while True:
        while len(buf) < size:
            buf.extend(torch.randperm(n, generator=rng).tolist())
        yield buf[:size]
        buf = buf[size:]


def _split_counts(batch_size: int, n_lab: int, n_unl: int) -> tuple[int, int]:
    if n_unl == 0:
        return batch_size, 0
    n = max(1, round(batch_size * n_lab / (n_lab + n_unl)))
    return n, batch_size - n


class _Reporter:
    def __init__(self, cfg, val_set, on_report):
        self.cfg, self.val_set, self.on_report = cfg, val_set, on_report
        self.reports: list[EpochReport] = []

    def __call__(self, model, epoch, phase, sup, cons, lam, t0):
        val = evaluate(model, self.val_set, self.cfg.n_classes) if self.val_set else {}
        r = EpochReport(epoch, phase, sup, cons, lam, val, time.perf_counter() - t0)
        self.reports.append(r)
        if self.on_report:
            self.on_report(r)


def _rngs(cfg: TrainConfig, phase: int):
    base = cfg.seed * 10 + phase * 3
    return tuple(torch.Generator().manual_seed(base + i) for i in range(3))


def pretrain(
    cfg: TrainConfig,
    labeled: Sequence[Sample],
    val_set: Sequence[Sample] | None = None,
    on_report: Callable[[EpochReport], None] | None = None,
) -> tuple[SegNet, list[EpochReport]]:
    """Phase 1: supervised training with the default random augmentation.

    Depends only on the seed, the architecture and the phase-1 fields of
    ``cfg``, so one pre-trained model can seed several fine-tuning strategies.
    """
    if not labeled:
        raise ValueError("at least one labeled sample is required")
    torch.manual_seed(cfg.seed)
    model = SegNet(cfg.n_classes, cfg.width)
    sup_cfg = SupervisedLossConfig(cfg.class_weights)
    aug_cfg = AugmentConfig()
    aug_rng, batch_rng, _ = _rngs(cfg, 0)
    lab_x, lab_y = stack(labeled)
    rep = _Reporter(cfg, val_set, on_report)
    opt = make_optimizer(model, cfg.lr_pretrain)
    lab_iter = _batches(batch_rng, len(labeled), cfg.batch_size)
    last_good = copy.deepcopy(model.state_dict())
    try:
        for epoch in range(cfg.pretrain_epochs):
            t0 = time.perf_counter()
            losses = []
            for _ in range(cfg.steps_per_epoch):
                idx = next(lab_iter)
                x, y = lab_x[idx], lab_y[idx]
                if cfg.default_aug:
                    x, y = augment_batch(x, y, aug_rng, aug_cfg)
                losses.append(train_step(model, opt, supervised_loss(model(x), y, sup_cfg)))
            last_good = copy.deepcopy(model.state_dict())
            rep(model, epoch, "pretrain", float(np.mean(losses)), 0.0, 0.0, t0)
    except NumericalError as err:
        model.load_state_dict(last_good)
        err.model = model
        raise
    return model, rep.reports


def finetune(
    cfg: TrainConfig,
    model: SegNet,
    labeled: Sequence[Sample],
    unlabeled: Sequence[Sample] = (),
    val_set: Sequence[Sample] | None = None,
    on_report: Callable[[EpochReport], None] | None = None,
) -> tuple[SegNet, EmaShadow, list[EpochReport]]:
    """Phase 2: supervised loss plus ``lambda(e)`` times the consistency regularizer.

    ``model`` is copied, not modified. The EMA shadow starts from the
    pre-trained weights. With ``strategy="none"`` (or ``lambda_max=0``) this
    is plain supervised training. With no unlabeled data the regularizer is
    computed on labeled images only.
    """
    if not labeled:
        raise ValueError("at least one labeled sample is required")
    model = copy.deepcopy(model)
    torch.manual_seed(cfg.seed + 1)
    sup_cfg = SupervisedLossConfig(cfg.class_weights)
    aug_cfg = AugmentConfig()
    aug_rng, batch_rng, adv_rng = _rngs(cfg, 1)
    lab_x, lab_y = stack(labeled)
    unl_x = stack(unlabeled)[0] if unlabeled else lab_x[:0]
    ema = EmaShadow(model, cfg.ema_decay)
    rep = _Reporter(cfg, val_set, on_report)
    use_aug = cfg.finetune_default_aug and cfg.default_aug
    opt = make_optimizer(model, cfg.lr_finetune)
    adv = cfg.adversary() if cfg.strategy != "none" and cfg.lambda_max > 0 else None
    n_lab, n_unl = _split_counts(cfg.batch_size, len(labeled), len(unlabeled))
    lab_iter = _batches(batch_rng, len(labeled), n_lab)
    unl_iter = _batches(batch_rng, len(unlabeled), n_unl) if n_unl else None
    last_good = copy.deepcopy(model.state_dict())
    try:
        for e in range(cfg.finetune_epochs):
            t0 = time.perf_counter()
            lam = ramp_lambda(e, cfg)
            sups, conss = [], []
            for _ in range(cfg.steps_per_epoch):
                idx = next(lab_iter)
                x, y = lab_x[idx], lab_y[idx]
                xu = unl_x[next(unl_iter)] if unl_iter is not None else unl_x
                if use_aug:
                    x, y = augment_batch(x, y, aug_rng, aug_cfg)
                    if xu.shape[0]:
                        xu = augment_batch(xu, torch.zeros(xu.shape[0], *xu.shape[2:], dtype=torch.long), aug_rng, aug_cfg)[0]
                pred_l = model(x)
                sup = supervised_loss(pred_l, y, sup_cfg)
                loss, cons = sup, torch.zeros(())
                if adv is not None:
                    xr = torch.cat([x, xu])
                    with torch.no_grad():
                        ref = torch.cat([pred_l.detach(), model(xu)]) if xu.shape[0] else pred_l.detach()
                    cons, _ = regularizer(xr, model, adv, adv_rng, ref)
                    loss = sup + lam * cons
                train_step(model, opt, loss)
                ema.update(model)
                sups.append(float(sup.detach()))
                conss.append(float(cons.detach()))
            last_good = copy.deepcopy(model.state_dict())
            rep(ema, cfg.pretrain_epochs + e, "finetune", float(np.mean(sups)), float(np.mean(conss)), lam, t0)
    except NumericalError as err:
        model.load_state_dict(last_good)
        err.model = model
        raise
    return model, ema, rep.reports


def train(
    cfg: TrainConfig,
    labeled: Sequence[Sample],
    unlabeled: Sequence[Sample] = (),
    val_set: Sequence[Sample] | None = None,
    on_report: Callable[[EpochReport], None] | None = None,
    pretrained: SegNet | None = None,
) -> tuple[SegNet, EmaShadow, list[EpochReport]]:
    """Both phases end to end; pass ``pretrained`` to skip phase 1."""
    reports: list[EpochReport] = []
    if pretrained is None:
        pretrained, reports = pretrain(cfg, labeled, val_set, on_report)
    model, ema, more = finetune(cfg, pretrained, labeled, unlabeled, val_set, on_report)
    return model, ema, reports + more
