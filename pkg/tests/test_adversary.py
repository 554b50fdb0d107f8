import pytest
import torch

from advaug import transforms as tf
from advaug.adversary import (
    AdversaryConfig,
    CountingPredictor,
    optimize_chain,
    pgd_step,
    regularizer,
    regularizer_loss,
)
from advaug.chain import Chain, apply_chain, sample_chain
from advaug.losses import consistency_loss

SHAPE = (2, 32, 32)


def gen(seed=0):
    return torch.Generator().manual_seed(seed)


def constant_predictor(x):
    probs = torch.tensor([0.4, 0.3, 0.2, 0.1], dtype=x.dtype).view(1, 4, 1, 1)
    return probs.expand(x.shape[0], 4, *x.shape[2:]) + 0 * x


def full_chain(seed=0, shape=SHAPE):
    return sample_chain(gen(seed), shape, p=1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        AdversaryConfig(k=0)
    with pytest.raises(ValueError):
        AdversaryConfig(alpha=0)
    with pytest.raises(ValueError):
        AdversaryConfig(strategy="fgsm")
    with pytest.raises(ValueError):
        AdversaryConfig(strategy="randsingle")


def test_constant_predictor_leaves_chain_unchanged(toy_images):
    chain = full_chain()
    stepped = pgd_step(chain, toy_images[:2], constant_predictor)
    assert stepped.families == chain.families
    for a, b in zip(stepped.tensors(), chain.tensors()):
        assert torch.allclose(a, b, atol=1e-6)


@pytest.mark.parametrize("strategy", ["advchain", "advcomb", "randchain"])
def test_constant_predictor_gives_zero_regularizer(toy_images, strategy):
    cfg = AdversaryConfig(strategy=strategy, p=1.0)
    loss = regularizer_loss(toy_images[:2], constant_predictor, cfg, gen())
    assert float(loss) < 1e-10


def test_steps_keep_every_member_feasible(toy_model, toy_images):
    x = toy_images[:2]
    for seed in range(5):
        chain = full_chain(seed)
        for _ in range(3):
            chain = pgd_step(chain, x, toy_model, AdversaryConfig(alpha=2.0))
            assert all(tf.satisfies(m) for m in chain.members)


def test_step_size_scales_linearly(toy_model, toy_images):
    x = toy_images[:1]
    chain = sample_chain(gen(3), (1, 32, 32), p=1.0, allowed_families=("noise", "affine"))
    # keep the start strictly inside the feasible set so projection stays inactive
    chain = chain.with_tensors([0.5 * t for t in chain.tensors()])
    moves = []
    for alpha in (1e-3, 2e-3, 4e-3):
        stepped = pgd_step(chain, x, toy_model, AdversaryConfig(alpha=alpha))
        moves.append(sum(float((a - b).norm()) for a, b in zip(stepped.tensors(), chain.tensors())))
    assert moves[1] / moves[0] == pytest.approx(2, rel=1e-3)
    assert moves[2] / moves[0] == pytest.approx(4, rel=1e-3)


def test_each_member_moves_by_its_own_normalized_step(toy_model, toy_images):
    x = toy_images[:1]
    chain = sample_chain(gen(4), (1, 32, 32), p=1.0, allowed_families=("noise", "affine"))
    chain = chain.with_tensors([0.5 * t for t in chain.tensors()])
    stepped = pgd_step(chain, x, toy_model, AdversaryConfig(alpha=1e-3))
    for a, b in zip(stepped.tensors(), chain.tensors()):
        assert float((a - b).norm()) == pytest.approx(1e-3, rel=1e-4)


def test_single_step_increases_consistency_loss(toy_model, toy_images):
    cfg = AdversaryConfig()
    rng = gen(7)
    increased = 0
    for i in range(40):
        x = toy_images[i % 20 : i % 20 + 1]
        with torch.no_grad():
            ref = toy_model(x)
        chain = sample_chain(rng, (1, 32, 32), 0.5)
        stepped = pgd_step(chain, x, toy_model, cfg, ref)
        with torch.no_grad():
            before = consistency_loss(x, toy_model, chain, cfg.distance, ref)
            after = consistency_loss(x, toy_model, stepped, cfg.distance, ref)
        increased += bool(after > before)
    assert increased >= 34


def test_randchain_skips_ascent(toy_model, toy_images):
    x = toy_images[:2]
    counter = CountingPredictor(toy_model)
    chain, x_adv = optimize_chain(x, counter, AdversaryConfig(strategy="randchain"), gen(5))
    expected = sample_chain(gen(5), SHAPE, 0.5)
    assert counter.calls == 0
    assert all(torch.equal(a, b) for a, b in zip(chain.tensors(), expected.tensors()))
    assert torch.equal(x_adv, apply_chain(chain, x))


def test_randsingle_uses_the_named_family(toy_model, toy_images):
    chain, _ = optimize_chain(toy_images[:2], toy_model, AdversaryConfig(strategy="randsingle", family="bias"), gen())
    assert chain.families == ("bias",)


def test_optimize_chain_is_deterministic(toy_model, toy_images):
    x = toy_images[:2]
    a, xa = optimize_chain(x, toy_model, AdversaryConfig(k=2), gen(9))
    b, xb = optimize_chain(x, toy_model, AdversaryConfig(k=2), gen(9))
    assert a.families == b.families
    assert all(torch.equal(s, t) for s, t in zip(a.tensors(), b.tensors()))
    assert torch.equal(xa, xb)


def test_default_run_satisfies_constraints(toy_model, toy_images):
    chain, x_adv = optimize_chain(toy_images[:4], toy_model, AdversaryConfig(), gen(2))
    assert all(tf.satisfies(m) for m in chain.members)
    assert torch.isfinite(x_adv).all()


@pytest.mark.parametrize("k", [1, 3])
@pytest.mark.parametrize("n_families", [1, 2, 3, 4])
def test_forward_pass_counts(toy_model, toy_images, k, n_families):
    x = toy_images[:3]
    families = tf.FAMILIES[:n_families]
    with torch.no_grad():
        ref = toy_model(x)
    for strategy, expected in (("advchain", k + 1), ("advcomb", n_families * (k + 1))):
        counter = CountingPredictor(toy_model)
        cfg = AdversaryConfig(k=k, strategy=strategy, p=1.0, families=families)
        _, chains = regularizer(x, counter, cfg, gen(), ref)
        assert counter.calls == expected
        assert counter.items == expected * x.shape[0]
        assert sum(len(c.members) for c in chains) == n_families
    # without a supplied reference one extra clean pass is made
    counter = CountingPredictor(toy_model)
    regularizer(x, counter, AdversaryConfig(strategy="advchain", families=families, p=1.0), gen())
    assert counter.calls == 3


def test_regularizer_gradient_reaches_only_the_predictor(toy_images):
    model = torch.nn.Sequential(torch.nn.Conv2d(1, 4, 3, padding=1), torch.nn.Softmax(1))
    loss, chains = regularizer(toy_images[:2], model, AdversaryConfig(p=1.0), gen())
    assert all(not t.requires_grad for c in chains for t in c.tensors())
    loss.backward()
    assert all(q.grad is not None and float(q.grad.abs().sum()) > 0 for q in model.parameters())


def test_advchain_beats_random_on_average(toy_model, toy_images):
    x = toy_images[:8]
    adv = regularizer_loss(x, toy_model, AdversaryConfig(strategy="advchain", p=1.0), gen(1))
    rand = regularizer_loss(x, toy_model, AdversaryConfig(strategy="randchain", p=1.0), gen(1))
    assert float(adv) > float(rand)


def test_empty_batch_rejected(toy_model):
    with pytest.raises(ValueError):
        regularizer_loss(torch.zeros(0, 1, 32, 32), toy_model, AdversaryConfig(), gen())
