"""Acceptance suite: ten end-to-end criteria at their stated tolerances.

Each test records a one-line PASS/FAIL verdict which ``conftest.py`` prints in
the terminal summary.  Trained models are cached per module; the whole file
takes roughly half an hour on one CPU core.

    pytest tests/test_acceptance.py -v
"""

import math
import time

import numpy as np
import pytest
from scipy import integrate

from acflow import diffcore as dc
from acflow.context import Batch
from acflow.data import (
    GaussianMixture,
    SyntheticSpec,
    conditional_slice,
    density_grid,
    eval_nrmse,
    from_array,
    gen_synthetic,
    mean_impute,
)
from acflow.masking import MaskDistribution, make_rng, sample_mask
from acflow.model import ACFlow, LossConfig, gibbs_chain, synthetic_architecture, tabular_architecture
from acflow.train import TrainConfig, deserialize, serialize, train

pytestmark = pytest.mark.slow

VERDICTS = {}


def verdict(number, name, ok, detail):
    VERDICTS[number] = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}"
    assert ok, VERDICTS[number]


MIXTURE = {"correlation": 0.5, "weights": [0.4, 0.1, 0.1, 0.4]}
# lambda = 0: the best-guess penalty measurably blurs the low-density valley between components
MIXTURE_TRAIN = dict(epochs=60, batch_size=256, lr_decay=0.95, mask_distribution="drop_one", lam=0.0, seed=0)


@pytest.fixture(scope="module")
def mixture_model():
    """The 2D density-recovery model shared by criteria 4, 5 and 9."""
    ds, density = gen_synthetic(SyntheticSpec("gaussian_mixture_grid", 100_000, seed=5, options=MIXTURE))
    model = ACFlow(synthetic_architecture(2, hidden=128), seed=0)
    start = time.time()
    model, _ = train(model, ds, TrainConfig(**MIXTURE_TRAIN))
    return model, ds, density, time.time() - start


# 1. invertibility


def test_01_invertibility():
    start = time.time()
    worst = 0.0
    for d in (2, 6, 20):
        model = ACFlow(synthetic_architecture(d), seed=d)
        rng = np.random.default_rng(100 + d)
        x = rng.normal(scale=2.0, size=(1000, d))
        b = (rng.random((1000, d)) < 0.5).astype(np.uint8)
        b[b.sum(axis=1) == d, 0] = 0
        ctx = Batch(x, b)
        with dc.no_grad():
            target = ctx.targets(x)
            z, _ = model.stack.forward(dc.Tensor(target), ctx)
            back = model.stack.inverse(z, ctx).data
        worst = max(worst, float(np.max(np.abs(back - target))))
    elapsed = time.time() - start
    verdict(1, "invertibility", worst < 1e-6 and elapsed < 60, f"max error {worst:.2e}, {elapsed:.1f} s")


# 2. log-determinant


def fd_logdet(stack, x, b, h=1e-5):
    ctx = Batch(x, b)
    base = ctx.targets(x)[0]
    k = base.shape[0]
    jac = np.zeros((k, k))
    with dc.no_grad():
        for j in range(k):
            cols = []
            # fourth-order central stencil
            for step in (2, 1, -1, -2):
                shifted = base.copy()
                shifted[j] += step * h
                cols.append(stack.forward(dc.Tensor(shifted[None]), ctx)[0].data[0])
            jac[:, j] = (-cols[0] + 8 * cols[1] - 8 * cols[2] + cols[3]) / (12 * h)
    return np.linalg.slogdet(jac)[1]


def test_02_logdet():
    d = 6
    model = ACFlow(synthetic_architecture(d, hidden=32), seed=2)
    rng = np.random.default_rng(200)
    for p in model.parameters():
        p.data = p.data + rng.normal(scale=0.05, size=p.shape)
    worst = 0.0
    for _ in range(100):
        x = rng.normal(size=(1, d))
        b = np.zeros((1, d), np.uint8)
        b[0, rng.choice(d, size=rng.integers(0, d), replace=False)] = 1
        ctx = Batch(x, b)
        with dc.no_grad():
            ld = model.stack.forward(dc.Tensor(ctx.targets(x)), ctx)[1].data[0]
        worst = max(worst, abs(ld - fd_logdet(model.stack, x, b)) / max(abs(ld), 1e-12))
    verdict(2, "log-det", worst < 1e-4, f"max relative error {worst:.2e} over 100 instances")


# 3. gradients


def test_03_gradients():
    d = 4
    rng = np.random.default_rng(300)
    x = rng.normal(size=(6, d))
    b = (rng.random((6, d)) < 0.5).astype(np.uint8)
    b[0] = 0
    worst, checked = 0.0, 0
    for lam in (0.0, 1.0):
        model = ACFlow(synthetic_architecture(d, hidden=8, components=3), seed=3)
        cfg = LossConfig(lam)
        model.zero_grad()
        dc.backward(model.loss(x, b, cfg=cfg))

        def f():
            with dc.no_grad():
                return model.loss(x, b, cfg=cfg).item()

        params = model.parameters()
        sizes = np.array([p.data.size for p in params])
        picks = rng.choice(sizes.sum(), size=min(300, sizes.sum()), replace=False)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        for i, p in enumerate(params):
            local = picks[(picks >= offsets[i]) & (picks < offsets[i + 1])] - offsets[i]
            if local.size == 0:
                continue
            numeric = dc.finite_difference_grad(f, p.data, indices=local)
            analytic = p.grad.reshape(-1)[local]
            err = np.abs(numeric - analytic) / np.maximum(np.maximum(np.abs(numeric), np.abs(analytic)), 1e-7)
            worst = max(worst, float(err.max()))
            checked += local.size
    verdict(3, "gradients", worst < 1e-3 and checked >= 500, f"max relative error {worst:.2e} over {checked} parameters")


# 4. normalization


def test_04_normalization(mixture_model):
    model = mixture_model[0]
    grid = np.linspace(-10, 10, 20_001)
    masses = []
    for dim in (0, 1):
        for value in (-2.0, -0.9, 0.0, 0.4, 1.3):
            z = np.zeros((grid.size, 2))
            z[:, dim] = grid
            z[:, 1 - dim] = value
            b = np.zeros((grid.size, 2), np.uint8)
            b[:, 1 - dim] = 1
            lp = model.cond_log_prob(z * model.std + model.shift, b, standardized=True)
            masses.append(integrate.simpson(np.exp(lp), x=grid))
    worst = max(abs(m - 1) for m in masses)
    verdict(4, "normalization", worst < 1e-2, f"max |mass - 1| = {worst:.2e} over 10 slices")


# 5. density recovery


def slice_bins(density, dim, value, edges, fine=50):
    centers, pdf = conditional_slice(density, dim, value, bounds=(edges[0], edges[-1]), n=(len(edges) - 1) * fine)
    return pdf.reshape(len(edges) - 1, fine).sum(axis=1) * (centers[1] - centers[0])


def total_variation(draws, exact, edges):
    hist = np.histogram(draws, edges)[0] / len(draws)
    # mass outside the grid counts as one more bin
    return 0.5 * (np.abs(hist - exact).sum() + abs(hist.sum() - exact.sum()))


def test_05_density_recovery(mixture_model):
    model, ds, density, seconds = mixture_model
    x, m = ds.split("test")
    b = sample_mask(MaskDistribution("drop_one_uniform"), m, make_rng(1))
    gap = float(-model.cond_log_prob(x, b).mean() + density.cond_logpdf(x, b).mean())
    edges = np.linspace(-4, 4, 65)
    tvs = []
    for dim in (0, 1):
        for value in (-1.5, -0.75, 0.0, 0.75, 1.5):
            cond = np.zeros((1, 2))
            cond[0, 1 - dim] = value
            mask = np.zeros((1, 2), np.uint8)
            mask[0, 1 - dim] = 1
            draws = model.cond_sample(cond, mask, n=10_000, rng=make_rng(2))[:, 0, dim]
            tvs.append(total_variation(draws, slice_bins(density, dim, value, edges), edges))
    ok = abs(gap) < 0.1 and max(tvs) < 0.1 and seconds < 1800
    detail = f"NLL gap {gap:+.4f} nat, TV per slice {np.round(tvs, 3).tolist()}, training {seconds:.0f} s"
    verdict(5, "density recovery", ok, detail)


# 6. special cases


def test_06_special_cases():
    model = ACFlow(synthetic_architecture(3, hidden=16, components=5), seed=6)
    x = np.random.default_rng(600).normal(size=(50, 3))
    identical = np.array_equal(model.joint_log_prob(x), model.cond_log_prob(x, np.zeros((50, 3), np.uint8), np.ones((50, 3), np.uint8)))

    mu, sd = np.array([1.0, -2.0]), np.array([0.5, 3.0])
    data = make_rng(601).normal(mu, sd, size=(20_000, 2))
    ds = from_array(data, seed=602)
    marginal = ACFlow(synthetic_architecture(2, hidden=32, components=10), seed=6)
    cfg = TrainConfig(epochs=10, batch_size=256, lr_decay=0.9, mode="marginal", seed=6)
    marginal, _ = train(marginal, ds, cfg)
    x_test, _ = ds.split("test")
    gaps = []
    for j in range(2):
        query = np.eye(2, dtype=np.uint8)[j]
        model_nll = -marginal.marginal_log_prob(x_test, query).mean()
        exact_nll = np.mean(0.5 * ((x_test[:, j] - mu[j]) / sd[j]) ** 2 + math.log(sd[j]) + 0.5 * math.log(2 * math.pi))
        gaps.append(float(model_nll - exact_nll))
    ok = identical and max(abs(g) for g in gaps) < 0.05
    verdict(6, "special cases", ok, f"joint == conditional(b=0): {identical}, marginal NLL gaps {np.round(gaps, 4).tolist()}")


# 7. best-guess effect


def test_07_best_guess_effect():
    # on the grid mixture the lambda=0 best guess is already within 2% of the exact
    # conditional mean, leaving no room for a directional effect; the moons are curved
    ds, _ = gen_synthetic(SyntheticSpec("two_moons_like", 20_000, seed=7))
    models = {}
    for lam in (0.0, 1.0):
        model = ACFlow(synthetic_architecture(2, hidden=32, components=10), seed=7)
        cfg = TrainConfig(epochs=10, batch_size=256, lr_decay=0.9, lam=lam, seed=7)
        models[lam], _ = train(model, ds, cfg)
    x, m = ds.split("test")
    rng = make_rng(700)
    scores = {"bg1": [], "bg0": [], "sample1": []}
    for _ in range(5):
        b = sample_mask(MaskDistribution("bernoulli", 0.7), m, rng)
        u = (1 - b).astype(bool)
        scores["bg1"].append(eval_nrmse(models[1.0].best_guess(x, b), x, models[1.0].std, u))
        scores["bg0"].append(eval_nrmse(models[0.0].best_guess(x, b), x, models[0.0].std, u))
        draws = models[1.0].cond_sample(x, b, n=5, rng=rng)
        scores["sample1"].append(eval_nrmse(draws, x, models[1.0].std, u))
    bg1, bg0, s1 = (float(np.mean(scores[k])) for k in ("bg1", "bg0", "sample1"))

    # the sampler never reads lambda: same parameters, same seed, same bytes
    twin = ACFlow(synthetic_architecture(2, hidden=32, components=10), seed=7)
    twin.load_state_dict(models[1.0].state_dict())
    twin.set_standardizer(models[1.0].shift, models[1.0].std)
    twin.training_info = dict(models[0.0].training_info)
    b = sample_mask(MaskDistribution("bernoulli", 0.7), m, make_rng(701))
    same = models[1.0].cond_sample(x, b, n=3, rng=make_rng(702)).tobytes() == twin.cond_sample(x, b, n=3, rng=make_rng(702)).tobytes()

    ok = bg1 < s1 and bg1 < bg0 and same
    detail = f"best guess lambda=1 {bg1:.4f}, single sample lambda=1 {s1:.4f}, best guess lambda=0 {bg0:.4f}, sampler identical: {same}"
    verdict(7, "best-guess effect", ok, detail)


# 8. imputation versus baselines


def test_08_imputation():
    d = 10
    cov = 0.9 ** np.abs(np.subtract.outer(np.arange(d), np.arange(d)))
    density = GaussianMixture([1.0], [np.linspace(-2, 2, d)], [cov])
    ds = from_array(density.sample(20_000, make_rng(11)), seed=12)
    model = ACFlow(tabular_architecture(d, hidden=64, components=10), seed=0)
    model, _ = train(model, ds, TrainConfig(epochs=10, batch_size=256, lr_decay=0.9, seed=0))
    x, m = ds.split("test")
    x_train, _ = ds.split("train")
    b = sample_mask(MaskDistribution("bernoulli", 0.5), m, make_rng(13))
    u = (1 - b).astype(bool)
    flow = eval_nrmse(model.best_guess(x, b), x, model.std, u)
    mean = eval_nrmse(mean_impute(x, b, x_train.mean(axis=0)), x, model.std, u)
    optimal = eval_nrmse(density.conditional_mean(x, b), x, model.std, u)
    ok = flow <= 0.8 * mean and flow <= 1.1 * optimal
    verdict(8, "imputation", ok, f"ACFlow {flow:.4f}, mean imputation {mean:.4f}, optimal linear {optimal:.4f}")


# 9. Gibbs chain


def test_09_gibbs(mixture_model):
    model, _, density, _ = mixture_model
    chains = 20
    init = make_rng(900).normal(size=(chains, 2))
    chain = gibbs_chain(model, init, [[1, 0], [0, 1]], 5000, make_rng(901))
    draws = chain[50:].reshape(-1, 2)
    edges = np.linspace(-4, 4, 17)
    hist = np.histogram2d(draws[:, 0], draws[:, 1], [edges, edges])[0] / len(draws)
    centers, fine = density_grid(density, bounds=(-4, 4), n=16 * 32)
    cell = (centers[1] - centers[0]) ** 2
    exact = fine.reshape(16, 32, 16, 32).sum(axis=(1, 3)) * cell
    tv = 0.5 * (np.abs(hist - exact).sum() + abs(hist.sum() - exact.sum()))
    verdict(9, "Gibbs chain", tv < 0.1, f"TV {tv:.4f} from {chains} chains x 5000 sweeps on a 16x16 grid")


# 10. determinism and persistence


def test_10_determinism():
    ds, _ = gen_synthetic(SyntheticSpec("two_moons_like", 2000, seed=10))
    cfg = TrainConfig(epochs=2, batch_size=128, seed=10)
    first, _ = train(ACFlow(synthetic_architecture(2, hidden=16, components=5), seed=10), ds, cfg)
    second, _ = train(ACFlow(synthetic_architecture(2, hidden=16, components=5), seed=10), ds, cfg)
    same_params = all(v.tobytes() == second.state_dict()[k].tobytes() for k, v in first.state_dict().items())

    loaded = deserialize(serialize(first))
    x, m = ds.split("test")
    b = sample_mask(MaskDistribution("bernoulli", 0.5), m, make_rng(1000))
    outputs = [
        lambda mdl: mdl.cond_log_prob(x, b),
        lambda mdl: mdl.joint_log_prob(x),
        lambda mdl: mdl.best_guess(x, b),
        lambda mdl: mdl.cond_sample(x, b, n=2, rng=make_rng(1001)),
        lambda mdl: gibbs_chain(mdl, x[:5], [[1, 0], [0, 1]], 3, make_rng(1002)),
    ]
    same_outputs = all(f(first).tobytes() == f(loaded).tobytes() for f in outputs)
    ok = same_params and same_outputs
    verdict(10, "determinism", ok, f"bit-identical retraining: {same_params}, identical outputs after round trip: {same_outputs}")
