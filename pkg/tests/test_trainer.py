import json
import math

import numpy as np
import pytest
import torch

from advaug import trainer
from advaug.adversary import regularizer
from advaug.data import PhantomSpec, Sample, generate_phantoms
from advaug.segnet import NumericalError, SegNet
from advaug.trainer import (
    EpochReport,
    TrainConfig,
    evaluate,
    finetune,
    load_config,
    pretrain,
    ramp_lambda,
    train,
)

SPEC = PhantomSpec(size=32)
TINY = dict(pretrain_epochs=3, finetune_epochs=3, steps_per_epoch=2, batch_size=6, e_ramp=2, lr_finetune=1e-4)


class LevelPredictor(torch.nn.Module):
    """Labels each pixel by its quantized intensity: class round(3 x)."""

    def forward(self, x):
        cls = torch.round(3 * x[:, 0]).long().clamp(0, 3)
        return torch.nn.functional.one_hot(cls, 4).permute(0, 3, 1, 2).float()


class BackgroundPredictor(torch.nn.Module):
    def forward(self, x):
        out = torch.zeros(x.shape[0], 4, *x.shape[2:])
        out[:, 0] = 1
        return out


def level_samples(n, seed=0, size=16):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        label = rng.integers(0, 4, (size, size)).astype(np.uint8)
        out.append(Sample((label / 3).astype(np.float32), label, f"lvl{i}"))
    return out


def strip_time(reports):
    return [{k: v for k, v in json.loads(r.to_json()).items() if k != "wall_time"} for r in reports]


@pytest.fixture(scope="module")
def data():
    return generate_phantoms(SPEC, 2, 10), generate_phantoms(SPEC, 4, 11), generate_phantoms(SPEC, 2, 12)


# ------------------------------------------------------------ config and schedule


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(strategy="randchain", seed=4, families=("noise", "affine"))
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(strategy="mixup")
    with pytest.raises(ValueError):
        TrainConfig(pretrain_epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr_finetune=0)
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"epochs": 3})


def test_adversary_config_follows_training_config():
    adv = TrainConfig(k=2, alpha=0.5, strategy="advcomb", distance="kl").adversary()
    assert (adv.k, adv.alpha, adv.strategy, adv.distance.variant) == (2, 0.5, "advcomb", "kl")


def test_ramp_reaches_max_exactly_and_never_decreases():
    cfg = TrainConfig(e_ramp=20, lambda_max=1.0)
    values = [ramp_lambda(e, cfg) for e in range(41)]
    assert values[0] == 0.0
    assert values[20] == 1.0
    assert all(b >= a for a, b in zip(values, values[1:]))
    assert max(values) == 1.0
    assert ramp_lambda(5, TrainConfig(e_ramp=0)) == 1.0
    with pytest.raises(ValueError):
        ramp_lambda(-1, cfg)


def test_split_counts_are_proportional():
    assert trainer._split_counts(20, 2, 20) == (2, 18)
    assert trainer._split_counts(20, 2, 0) == (20, 0)
    assert trainer._split_counts(4, 1, 100) == (1, 3)


# ------------------------------------------------------------ evaluation


def test_perfect_predictor_scores_one():
    result = evaluate(LevelPredictor(), level_samples(4))
    assert result["per_class"] == {"1": 1.0, "2": 1.0, "3": 1.0}
    assert result["foreground_mean"] == 1.0


def test_background_predictor_scores_zero():
    assert evaluate(BackgroundPredictor(), level_samples(3))["foreground_mean"] == 0.0


def test_absent_classes_are_excluded():
    samples = level_samples(2)
    for s in samples:
        s.label[s.label == 3] = 0
        s.image[:] = s.label / 3
    result = evaluate(LevelPredictor(), samples)
    assert math.isnan(result["per_class"]["3"])
    assert result["foreground_mean"] == 1.0


def brute_force_dice(pred, truth, c):
    a = {(i, j) for i in range(pred.shape[0]) for j in range(pred.shape[1]) if pred[i, j] == c}
    b = {(i, j) for i in range(truth.shape[0]) for j in range(truth.shape[1]) if truth[i, j] == c}
    if not a and not b:
        return 1.0
    return 2 * len(a & b) / (len(a) + len(b))


def test_evaluate_agrees_with_set_counting():
    rng = np.random.default_rng(5)
    for case in range(10):
        truth = level_samples(3, seed=100 + case, size=8)
        noisy = [Sample(np.clip(s.image + rng.normal(0, 0.2, s.image.shape), 0, 1).astype(np.float32), s.label, s.subject_id) for s in truth]
        result = evaluate(LevelPredictor(), noisy)
        for c in (1, 2, 3):
            scores = []
            for s in noisy:
                if (s.label == c).any():
                    pred = np.clip(np.round(3 * s.image), 0, 3).astype(int)
                    scores.append(brute_force_dice(pred, s.label, c))
            assert result["per_class"][str(c)] == pytest.approx(np.mean(scores), abs=1e-12)


def test_empty_test_set_rejected():
    with pytest.raises(ValueError):
        evaluate(LevelPredictor(), [])


# ------------------------------------------------------------ training loop


def test_same_seed_same_reports(data):
    lab, unl, val = data
    cfg = TrainConfig(strategy="advchain", **TINY)
    _, ema_a, a = train(cfg, lab, unl, val)
    _, ema_b, b = train(cfg, lab, unl, val)
    assert strip_time(a) == strip_time(b)
    for p, q in zip(ema_a.model.state_dict().values(), ema_b.model.state_dict().values()):
        assert torch.equal(p, q)


def test_reports_cover_both_phases(data):
    lab, unl, val = data
    seen = []
    _, _, reports = train(TrainConfig(strategy="randchain", **TINY), lab, unl, val, on_report=seen.append)
    assert seen == reports
    assert [r.phase for r in reports] == ["pretrain"] * 3 + ["finetune"] * 3
    assert [r.epoch for r in reports] == list(range(6))
    assert [r.lam for r in reports[3:]] == [0.0, 0.5, 1.0]
    assert all(isinstance(r, EpochReport) and set(r.val_dice) == {"per_class", "foreground_mean"} for r in reports)
    assert reports[-1].consistency > 0


def test_finetune_leaves_pretrained_model_untouched(data):
    lab, unl, _ = data
    cfg = TrainConfig(strategy="advchain", **TINY)
    base, _ = pretrain(cfg, lab)
    snapshot = {k: v.clone() for k, v in base.state_dict().items()}
    model, ema, _ = finetune(cfg, base, lab, unl)
    assert all(torch.equal(v, base.state_dict()[k]) for k, v in snapshot.items())
    assert any(not torch.equal(v, model.state_dict()[k]) for k, v in snapshot.items())
    assert ema.updates == TINY["finetune_epochs"] * TINY["steps_per_epoch"]


def test_shared_pretraining_matches_end_to_end(data):
    lab, unl, _ = data
    cfg = TrainConfig(strategy="randchain", **TINY)
    base, _ = pretrain(cfg, lab)
    _, ema_a, _ = finetune(cfg, base, lab, unl)
    _, ema_b, _ = train(cfg, lab, unl)
    for p, q in zip(ema_a.model.state_dict().values(), ema_b.model.state_dict().values()):
        assert torch.equal(p, q)


def test_no_regularizer_for_standard_training(data):
    lab, unl, _ = data
    _, _, reports = train(TrainConfig(strategy="none", **TINY), lab, unl)
    assert all(r.consistency == 0.0 for r in reports)


def test_outer_step_leaves_chain_parameters_frozen(data):
    lab, _, _ = data
    torch.manual_seed(0)
    model = SegNet(width=4)
    from advaug.data import stack

    x, _ = stack(lab)
    loss, chains = regularizer(x, model, TrainConfig(p=1.0).adversary(), torch.Generator().manual_seed(0))
    fingerprint = [t.clone() for c in chains for t in c.tensors()]
    loss.backward()
    after = [t for c in chains for t in c.tensors()]
    assert all(torch.equal(a, b) for a, b in zip(fingerprint, after))
    assert all(t.grad is None for t in after)


def test_numerical_failure_restores_last_good_state(data, monkeypatch):
    lab, unl, _ = data
    cfg = TrainConfig(strategy="none", **TINY)
    base, _ = pretrain(cfg, lab)
    real = trainer.supervised_loss
    calls = {"n": 0}

    def failing(pred, label, cfg_):
        calls["n"] += 1
        loss = real(pred, label, cfg_)
        return loss * float("nan") if calls["n"] > TINY["steps_per_epoch"] else loss

    monkeypatch.setattr(trainer, "supervised_loss", failing)
    with pytest.raises(NumericalError) as exc:
        finetune(cfg, base, lab, unl)
    restored = exc.value.model
    assert restored is not None
    assert all(torch.isfinite(p).all() for p in restored.parameters())
    assert any(not torch.equal(p, q) for p, q in zip(restored.parameters(), base.parameters()))


def test_labeled_data_required():
    with pytest.raises(ValueError):
        pretrain(TrainConfig(**TINY), [])


def test_validation_dice_improves_during_pretraining():
    lab = generate_phantoms(SPEC, 2, 20)
    val = generate_phantoms(SPEC, 3, 21)
    cfg = TrainConfig(pretrain_epochs=12, steps_per_epoch=5, lr_pretrain=3e-3, batch_size=10)
    _, reports = pretrain(cfg, lab, val)
    first = reports[0].val_dice["foreground_mean"]
    best_late = max(r.val_dice["foreground_mean"] for r in reports[-4:])
    assert best_late > first + 0.1
