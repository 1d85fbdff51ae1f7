# Marginal mode
#
# Trained with m = 1 - b, the same network represents every marginal p(x_S).
# We query the 1-dimensional marginals of a correlated 3D Gaussian and compare
# with the closed form.

import math

import numpy as np

from acflow import ACFlow, TrainConfig, synthetic_architecture, train
from acflow.data import GaussianMixture, from_array
from acflow.masking import make_rng

cov = np.array([[1.0, 0.6, 0.2], [0.6, 2.0, -0.5], [0.2, -0.5, 0.5]])
mu = np.array([0.0, 1.0, -1.0])
truth = GaussianMixture([1.0], [mu], [cov])
ds = from_array(truth.sample(20_000, make_rng(0)), seed=1)

model = ACFlow(synthetic_architecture(3, hidden=32, components=5), seed=0)
model, _ = train(model, ds, TrainConfig(epochs=8, batch_size=256, lr_decay=0.9, mode="marginal"))

x, _ = ds.split("test")
for query in ([1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, 1, 1]):
    learned = -model.marginal_log_prob(x, query).mean()
    exact = -truth.marginal_logpdf(x, query).mean()
    print(f"query {query}:  model {learned:.4f}   exact {exact:.4f}")

# cross-check one value against the textbook formula
j = 2
s = math.sqrt(cov[j, j])
print("closed form check:", np.mean(0.5 * ((x[:, j] - mu[j]) / s) ** 2 + math.log(s) + 0.5 * math.log(2 * math.pi)).round(4))
