# How an adversarial chain differs from a random one for a partly trained network.
# Run: python demos/adversarial_chain.py   (about 15 s on one core)

import torch

from advaug.adversary import AdversaryConfig, optimize_chain
from advaug.chain import enumerate_diversity
from advaug.data import PhantomSpec, generate_phantoms, stack
from advaug.losses import consistency_loss
from advaug.trainer import TrainConfig, pretrain

torch.set_num_threads(1)
spec = PhantomSpec(size=32)

# a short supervised run gives a predictor that is worth attacking
model, _ = pretrain(TrainConfig(pretrain_epochs=20, steps_per_epoch=5, lr_pretrain=3e-3), generate_phantoms(spec, 3, seed=1))
model.eval().requires_grad_(False)
x, _ = stack(generate_phantoms(spec, 4, seed=2))

with torch.no_grad():
    reference = model(x)

for strategy in ("randchain", "advchain"):
    cfg = AdversaryConfig(strategy=strategy, p=1.0)
    chain, _ = optimize_chain(x, model, cfg, torch.Generator().manual_seed(0), reference)
    with torch.no_grad():
        r = consistency_loss(x, model, chain, cfg.distance, reference)
    print(f"{strategy:9s} order {chain.families}  consistency {r.item():.4f}")

# one optimized chain covers every ordered subset of the families it can draw
print("ordered chains / distinct family sets for four families:", enumerate_diversity(4))
