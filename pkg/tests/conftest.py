import pytest
import torch

from advaug.data import PhantomSpec, generate_phantoms
from advaug.trainer import TrainConfig, pretrain

TOY_SPEC = PhantomSpec(size=32)


def toy_predictor(seed: int = 0):
    """A small net pretrained on three labeled phantoms (a few seconds on CPU)."""
    labeled = generate_phantoms(TOY_SPEC, 3, seed=500 + seed)
    cfg = TrainConfig(seed=seed, pretrain_epochs=20, steps_per_epoch=5, lr_pretrain=3e-3, batch_size=12)
    model, _ = pretrain(cfg, labeled)
    return model.eval()


@pytest.fixture(scope="session")
def toy_model():
    model = toy_predictor()
    for q in model.parameters():
        q.requires_grad_(False)
    return model


@pytest.fixture(scope="session")
def toy_images():
    from advaug.data import stack

    x, _ = stack(generate_phantoms(TOY_SPEC, 20, seed=900))
    return x


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
