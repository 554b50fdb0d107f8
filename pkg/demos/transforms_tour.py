# A walk through the four augmentation families on one synthetic cardiac slice.
# Run: python demos/transforms_tour.py

import torch

from advaug import transforms as tf
from advaug.chain import Chain, apply_chain, pull_back, warp_forward
from advaug.data import PhantomSpec, generate_phantoms, stack

torch.manual_seed(0)
gen = torch.Generator().manual_seed(0)

# one 64 px phantom: background, blood pool, myocardium ring, second cavity
x, y = stack(generate_phantoms(PhantomSpec(size=64), 1, seed=3))
print("image", tuple(x.shape), "labels present", y.unique().tolist())

# every family draws its parameters already inside its constraint set
shape = (1, 64, 64)
members = {fam: tf.random_init(fam, shape, gen) for fam in tf.FAMILIES}
for fam, m in members.items():
    out = tf.apply(x, m)
    print(f"{fam:7s} mean |change| {(out - x).abs().mean():.4f}  feasible {tf.satisfies(m)}")

# bias fields are multiplicative and stay within 30% of one
phi = tf.bias_field(members["bias"], 64, 64)
print("bias field range", round(phi.min().item(), 3), round(phi.max().item(), 3))

# affine parameters invert in closed form
M = tf.affine_matrix(members["affine"])
print("|M M^-1 - I|", (M @ tf.invert_affine(members["affine"]) - torch.eye(3)).abs().max().item())

# the morph field is a diffeomorphism; warping forward then backward nearly undoes itself
there = tf.apply_morph(x, members["morph"])
back = tf.apply_morph(there, members["morph"], direction="backward")
print("morph round trip mean error", (back - x).abs().mean().item())

# chains apply left to right; predictions are mapped back through the geometric members only
chain = Chain(tuple(members.values()))
x_aug = apply_chain(chain, x)
onehot = torch.nn.functional.one_hot(y.long(), 4).permute(0, 3, 1, 2).float()
restored = pull_back(chain, warp_forward(chain, onehot))
agree = (restored.argmax(1) == y).float().mean().item()
print(f"labels survive forward + pull-back on {agree:.1%} of pixels")
