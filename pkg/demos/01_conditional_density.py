# Conditional densities of a 2D Gaussian mixture
#
# One model answers p(x2 | x1) and p(x1 | x2) for any conditioning value.
# We train briefly on a four-component mixture, then line the learned
# conditional up against the exact one computed from the mixture itself.

import numpy as np

from acflow import ACFlow, SyntheticSpec, TrainConfig, gen_synthetic, synthetic_architecture, train
from acflow.data import conditional_slice
from acflow.masking import make_rng

ds, density = gen_synthetic(SyntheticSpec("gaussian_mixture_grid", 20_000, seed=0))
print(ds)

# drop-one masks: each training row hides one coordinate at random
model = ACFlow(synthetic_architecture(2, hidden=32, components=10), seed=0)
cfg = TrainConfig(epochs=8, batch_size=256, lr_decay=0.9, mask_distribution="drop_one", lam=0.0)
model, history = train(model, ds, cfg, progress=lambda r: print("epoch", r["epoch"], "valid nll", round(r["valid_nll"], 4)))

# log p(x2 | x1 = 1.5) on a grid, next to the truth
centers, exact = conditional_slice(density, 1, 1.5, bounds=(-4, 4), n=17)
x = np.stack([np.full(centers.size, 1.5), centers], axis=1)
learned = np.exp(model.cond_log_prob(x, np.tile([1, 0], (centers.size, 1))))
print("\n   x2    exact  learned")
for c, e, l in zip(centers, exact, learned):
    print(f"{c:6.2f}  {e:6.3f}  {l:6.3f}")

# sampling the same conditional
draws = model.cond_sample([[1.5, 0.0]], [[1, 0]], n=5000, rng=make_rng(1))[:, 0, 1]
print("\nsample mean of x2 | x1=1.5:", draws.mean().round(3))
print("exact mean:", density.conditional_mean([[1.5, 0.0]], [1, 0])[0, 1].round(3))

try:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(draws, bins=64, range=(-4, 4), density=True, alpha=0.5, label="model samples")
    fine, pdf = conditional_slice(density, 1, 1.5, bounds=(-4, 4), n=400)
    ax.plot(fine, pdf, label="exact")
    ax.set_xlabel("x2 given x1 = 1.5")
    ax.legend()
    fig.savefig("conditional_slice.svg", metadata={"Date": None})
    print("wrote conditional_slice.svg")
except ImportError:
    pass
