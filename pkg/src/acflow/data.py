"""Datasets, synthetic generators with exact densities, missingness injection and metrics."""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from .errors import DataError
from .masking import MaskDistribution, make_rng, sample_mask

log = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
MISSING_TOKENS = ("", "NA")


@dataclass
class Dataset:
    """``X`` is ``(n, d)`` with NaN in missing cells; ``M`` marks non-missing cells.

    ``split`` holds one of ``train``/``valid``/``test`` per row.  ``truth`` keeps
    the values that missingness injection removed, for imputation metrics.
    """

    X: np.ndarray
    M: np.ndarray
    names: list
    split_labels: np.ndarray
    truth: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.M = np.asarray(self.M, dtype=np.uint8)
        self.split_labels = np.asarray(self.split_labels)
        if self.X.shape != self.M.shape:
            raise DataError("X and M shapes differ")
        if not np.all(np.isfinite(self.X[self.M == 1])):
            raise DataError("non-finite value in a non-missing cell")

    @property
    def d(self):
        return self.X.shape[1]

    def __len__(self):
        return self.X.shape[0]

    def rows(self, name):
        return np.flatnonzero(self.split_labels == name)

    def split(self, name):
        idx = self.rows(name)
        return self.X[idx], self.M[idx]

    def standardizer(self):
        """Per-feature mean and population std over the observed training entries."""
        x, m = self.split("train")
        shift = np.zeros(self.d)
        std = np.ones(self.d)
        for j in range(self.d):
            col = x[m[:, j] == 1, j]
            if col.size == 0:
                raise DataError("column has no observed training values", column=self.names[j])
            shift[j] = col.mean()
            std[j] = col.std()
            if not std[j] > 0:
                raise DataError("column is constant on the training split (std 0)", column=self.names[j])
        return shift, std


def assign_splits(n, valid_fraction=0.1, test_fraction=0.1, seed=0):
    rng = make_rng(seed)
    labels = np.full(n, "train", dtype=object)
    order = rng.permutation(n)
    n_test = int(round(test_fraction * n))
    n_valid = int(round(valid_fraction * n))
    labels[order[:n_test]] = "test"
    labels[order[n_test : n_test + n_valid]] = "valid"
    return labels.astype(str)


@dataclass
class CsvSchema:
    columns: list | None = None
    missing_tokens: tuple = MISSING_TOKENS
    valid_fraction: float = 0.1
    test_fraction: float = 0.1
    seed: int = 0


def read_csv_matrix(path, schema=None, require_observed=True):
    """Parse a numeric CSV into ``(X, M, columns)`` without building splits.

    With ``require_observed`` an entirely missing column is an error.
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("file is empty") from None
        header = [h.strip() for h in header]
        cols = schema.columns or header
        try:
            take = [header.index(c) for c in cols]
        except ValueError as exc:
            raise DataError(f"column not found: {exc}") from None
        values, mask = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, found {len(row)}", row=lineno)
            vals, ms = [], []
            for j in take:
                cell = row[j].strip()
                if cell in schema.missing_tokens:
                    vals.append(np.nan)
                    ms.append(0)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"non-numeric cell {cell!r}", row=lineno, column=header[j]) from None
                if not math.isfinite(v):
                    raise DataError(f"non-finite cell {cell!r}", row=lineno, column=header[j])
                vals.append(v)
                ms.append(1)
            values.append(vals)
            mask.append(ms)
    X = np.array(values, dtype=np.float64).reshape(-1, len(cols))
    M = np.array(mask, dtype=np.uint8).reshape(-1, len(cols))
    for j, name in enumerate(cols):
        if require_observed and not M[:, j].any():
            raise DataError("column is entirely missing", column=name)
    return np.where(M == 1, X, np.nan), M, list(cols)


def load_csv(path, schema=None):
    """Read a numeric CSV with a header row; empty cells and ``NA`` are missing."""
    schema = schema or CsvSchema()
    X, M, cols = read_csv_matrix(path, schema)
    labels = assign_splits(len(X), schema.valid_fraction, schema.test_fraction, schema.seed)
    ds = Dataset(X, M, cols, labels)
    ds.standardizer()
    return ds


def write_csv(path, X, names, M=None):
    X = np.asarray(X, dtype=np.float64)
    M = np.isfinite(X) if M is None else np.asarray(M, dtype=bool)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row, mrow in zip(X, M):
            writer.writerow([repr(float(v)) if ok else "NA" for v, ok in zip(row, mrow)])


def from_array(X, names=None, valid_fraction=0.1, test_fraction=0.1, seed=0, M=None):
    X = np.asarray(X, dtype=np.float64)
    M = np.isfinite(X).astype(np.uint8) if M is None else np.asarray(M, dtype=np.uint8)
    names = names or [f"x{j + 1}" for j in range(X.shape[1])]
    labels = assign_splits(len(X), valid_fraction, test_fraction, seed)
    return Dataset(np.where(M == 1, X, np.nan), M, list(names), labels)


# exact densities


class GaussianMixture:
    """Gaussian mixture with full covariances and closed-form conditionals."""

    def __init__(self, weights, means, covs):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.weights = self.weights / self.weights.sum()
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        self.covs = np.asarray(covs, dtype=np.float64).reshape(len(self.weights), self.d, self.d)

    @property
    def d(self):
        return self.means.shape[1]

    def mean(self):
        return self.weights @ self.means

    def covariance(self):
        mu = self.mean()
        diff = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covs) + np.einsum("k,ki,kj->ij", self.weights, diff, diff)

    def sample(self, n, rng):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        eps = rng.standard_normal((n, self.d))
        chol = np.linalg.cholesky(self.covs)
        return self.means[comp] + np.einsum("nij,nj->ni", chol[comp], eps)

    @staticmethod
    def _normal_logpdf(x, mu, cov):
        k = x.shape[-1]
        if k == 0:
            return np.zeros(x.shape[0])
        diff = x - mu
        sol = np.linalg.solve(cov, diff.T).T
        _, logdet = np.linalg.slogdet(cov)
        return -0.5 * (np.sum(diff * sol, axis=1) + logdet + k * np.log(2 * np.pi))

    def _split(self, x, obs, target):
        """Per-component conditional parameters for one mask pattern."""
        o = np.flatnonzero(obs)
        t = np.flatnonzero(target)
        log_w = np.log(self.weights)[None, :].repeat(len(x), axis=0)
        locs, covs = [], []
        for k in range(len(self.weights)):
            mu, cov = self.means[k], self.covs[k]
            if len(o):
                log_w[:, k] += self._normal_logpdf(x[:, o], mu[o], cov[np.ix_(o, o)])
                gain = np.linalg.solve(cov[np.ix_(o, o)], cov[np.ix_(o, t)]).T
                locs.append(mu[t] + (x[:, o] - mu[o]) @ gain.T)
                covs.append(cov[np.ix_(t, t)] - gain @ cov[np.ix_(o, t)])
            else:
                locs.append(np.broadcast_to(mu[t], (len(x), len(t))))
                covs.append(cov[np.ix_(t, t)])
        log_w -= logsumexp(log_w, axis=1, keepdims=True)
        return log_w, locs, covs, t

    def _by_pattern(self, x, b, target, fn):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        b = np.broadcast_to(np.asarray(b, dtype=np.uint8), x.shape)
        target = np.broadcast_to(np.asarray(target, dtype=np.uint8), x.shape)
        out = [None] * len(x)
        keys = np.concatenate([b, target], axis=1)
        patterns, inverse = np.unique(keys, axis=0, return_inverse=True)
        for p, pat in enumerate(patterns):
            rows = np.flatnonzero(inverse.reshape(-1) == p)
            res = fn(x[rows], pat[: self.d], pat[self.d :])
            for i, r in enumerate(rows):
                out[r] = res[i]
        return out

    def cond_logpdf(self, x, b, m=None):
        """Exact ``log p(x_u | x_o)`` with ``o = b`` and ``u = m * (1 - b)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        b = np.broadcast_to(np.asarray(b, dtype=np.uint8), x.shape)
        m = np.ones_like(b) if m is None else np.broadcast_to(np.asarray(m, dtype=np.uint8), x.shape)
        target = m * (1 - b)

        def fn(xs, obs, tgt):
            log_w, locs, covs, t = self._split(xs, obs, tgt)
            if len(t) == 0:
                return np.zeros(len(xs))
            comp = np.stack([self._normal_logpdf(xs[:, t], locs[k], covs[k]) for k in range(len(locs))], axis=1)
            return logsumexp(log_w + comp, axis=1)

        return np.array(self._by_pattern(x, b, target, fn), dtype=np.float64)

    def logpdf(self, x):
        x = np.atleast_2d(x)
        return self.cond_logpdf(x, np.zeros(x.shape, dtype=np.uint8))

    def marginal_logpdf(self, x, query):
        x = np.atleast_2d(x)
        return self.cond_logpdf(x, np.zeros(x.shape, dtype=np.uint8), query)

    def conditional_mean(self, x, b):
        """``E[x_u | x_o]`` filled into a copy of ``x`` (observed entries kept)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        b = np.broadcast_to(np.asarray(b, dtype=np.uint8), x.shape)
        out = np.where(b == 1, x, 0.0)
        filled = np.nan_to_num(x)

        def fn(xs, obs, tgt):
            log_w, locs, _, t = self._split(xs, obs, tgt)
            w = np.exp(log_w)
            res = np.zeros((len(xs), self.d))
            if len(t):
                res[:, t] = sum(w[:, k : k + 1] * locs[k] for k in range(len(locs)))
            return res

        means = np.array(self._by_pattern(filled, b, 1 - b, fn))
        return np.where(b == 1, out, means)


class BoxMixture:
    """Mixture of axis-aligned uniform boxes (used for the checkerboard)."""

    def __init__(self, weights, lows, highs):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.weights = self.weights / self.weights.sum()
        self.lows = np.asarray(lows, dtype=np.float64)
        self.highs = np.asarray(highs, dtype=np.float64)

    @property
    def d(self):
        return self.lows.shape[1]

    def mean(self):
        return self.weights @ (0.5 * (self.lows + self.highs))

    def sample(self, n, rng):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.lows[comp] + rng.random((n, self.d)) * (self.highs - self.lows)[comp]

    def cond_logpdf(self, x, b, m=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        b = np.broadcast_to(np.asarray(b, dtype=np.float64), x.shape)
        m = np.ones_like(b) if m is None else np.broadcast_to(np.asarray(m, dtype=np.float64), x.shape)
        t = m * (1 - b)
        inside = (x[:, None, :] >= self.lows[None]) & (x[:, None, :] < self.highs[None])
        log_len = np.log(self.highs - self.lows)[None]
        with np.errstate(divide="ignore"):
            log_ind = np.where(inside, -log_len, -np.inf)
        obs_term = np.where(b[:, None, :] > 0, log_ind, 0.0).sum(axis=2) + np.log(self.weights)[None]
        tgt_term = np.where(t[:, None, :] > 0, log_ind, 0.0).sum(axis=2)
        with np.errstate(invalid="ignore"):
            out = logsumexp(obs_term + tgt_term, axis=1) - logsumexp(obs_term, axis=1)
        return np.where(t.sum(axis=1) > 0, out, 0.0)

    def logpdf(self, x):
        x = np.atleast_2d(x)
        return self.cond_logpdf(x, np.zeros(x.shape))


def density_grid(density, bounds=(-4.0, 4.0), n=512):
    """Midpoint grid of the 2-D joint density; returns ``(centers, P)`` with ``P[i, j] = p(c_i, c_j)``."""
    lo, hi = bounds
    centers = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    g1, g2 = np.meshgrid(centers, centers, indexing="ij")
    pts = np.stack([g1.ravel(), g2.ravel()], axis=1)
    return centers, np.exp(density.logpdf(pts)).reshape(n, n)


def conditional_slice(density, target_dim, value, bounds=(-4.0, 4.0), n=512):
    """Exact 1-D conditional density of ``x[target_dim]`` given the other coordinate = ``value``."""
    lo, hi = bounds
    centers = lo + (np.arange(n) + 0.5) * (hi - lo) / n
    pts = np.zeros((n, 2))
    pts[:, target_dim] = centers
    pts[:, 1 - target_dim] = value
    b = np.zeros(2, dtype=np.uint8)
    b[1 - target_dim] = 1
    return centers, np.exp(density.cond_logpdf(pts, b))


def write_grid_csv(path, centers, values):
    values = np.asarray(values)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if values.ndim == 1:
            writer.writerow(["x", "density"])
            writer.writerows([repr(float(c)), repr(float(v))] for c, v in zip(centers, values))
        else:
            writer.writerow(["x1", "x2", "density"])
            for i, ci in enumerate(centers):
                for j, cj in enumerate(centers):
                    writer.writerow([repr(float(ci)), repr(float(cj)), repr(float(values[i, j]))])


# synthetic generators


@dataclass
class SyntheticSpec:
    kind: str = "gaussian_mixture_grid"
    n_samples: int = 100_000
    seed: int = 0
    options: dict = field(default_factory=dict)


def gaussian_mixture_grid(size=2, spacing=3.0, scale=0.5, correlation=0.0, weights=None):
    """``size x size`` grid of Gaussians; component correlations alternate in sign."""
    offsets = (np.arange(size) - (size - 1) / 2) * spacing
    means = np.array([(a, b) for a in offsets for b in offsets])
    covs = []
    for k in range(len(means)):
        rho = correlation * (1 if k % 2 == 0 else -1)
        covs.append(scale**2 * np.array([[1.0, rho], [rho, 1.0]]))
    w = np.ones(len(means)) if weights is None else np.asarray(weights, dtype=np.float64)
    return GaussianMixture(w, means, np.array(covs))


def eight_gaussians(radius=2.0, scale=0.2):
    angles = np.arange(8) * np.pi / 4
    means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(np.ones(8), means, np.array([scale**2 * np.eye(2)] * 8))


def two_moons_like(per_arc=16, scale=0.12):
    theta = np.linspace(0, np.pi, per_arc)
    upper = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    lower = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    means = np.concatenate([upper, lower]) * 1.5 - np.array([0.75, 0.375])
    return GaussianMixture(np.ones(len(means)), means, np.array([scale**2 * np.eye(2)] * len(means)))


def checkerboard(cells=4, extent=2.0):
    edges = np.linspace(-extent, extent, cells + 1)
    lows, highs = [], []
    for i in range(cells):
        for j in range(cells):
            if (i + j) % 2 == 0:
                lows.append((edges[i], edges[j]))
                highs.append((edges[i + 1], edges[j + 1]))
    return BoxMixture(np.ones(len(lows)), lows, highs)


GENERATORS = {
    "gaussian_mixture_grid": gaussian_mixture_grid,
    "two_moons_like": two_moons_like,
    "checkerboard": checkerboard,
    "eight_gaussians": eight_gaussians,
}


def gen_synthetic(spec, valid_fraction=0.1, test_fraction=0.1):
    """Sample a synthetic dataset; returns ``(dataset, density)``."""
    if spec.kind not in GENERATORS:
        raise DataError(f"unknown synthetic kind {spec.kind!r}")
    density = GENERATORS[spec.kind](**spec.options)
    rng = make_rng(spec.seed)
    X = density.sample(spec.n_samples, rng)
    ds = from_array(X, valid_fraction=valid_fraction, test_fraction=test_fraction, seed=spec.seed + 1)
    return ds, density


# missingness and metrics


def inject_mcar(dataset, p, seed):
    """Remove each non-missing cell independently with probability ``p``."""
    if not 0.0 <= p < 1.0:
        raise DataError("MCAR rate must lie in [0, 1)")
    rng = make_rng(seed)
    keep = rng.random(dataset.M.shape) >= p
    M = (dataset.M & keep).astype(np.uint8)
    truth = dataset.X.copy() if dataset.truth is None else dataset.truth
    return replace(dataset, X=np.where(M == 1, dataset.X, np.nan), M=M, truth=truth)


def eval_nll(model, dataset, n_masks=5, mask_dist=None, seed=0, split="test", standardized=False):
    """Conditional NLL over random masks; returns ``(mean, std, per_repetition)``.

    Repetition ``r`` draws one mask per row and averages ``-log p(x_u | x_o)``
    over rows; mean and (population) std are taken across repetitions.
    """
    mask_dist = mask_dist or MaskDistribution("bernoulli", 0.5)
    x, m = dataset.split(split)
    rng = make_rng(seed)
    reps = []
    for _ in range(n_masks):
        b = sample_mask(mask_dist, m, rng)
        lp = model.cond_log_prob(x, b, m, standardized=standardized)
        reps.append(-float(np.mean(lp)))
    reps = np.array(reps)
    return float(reps.mean()), float(reps.std()) if n_masks > 1 else 0.0, reps


def eval_marginal_nll(model, dataset, n_masks=5, mask_dist=None, seed=0, split="test", standardized=False):
    """Like :func:`eval_nll` but scores ``-log p(x_q)`` for random query masks ``q``."""
    mask_dist = mask_dist or MaskDistribution("bernoulli", 0.5)
    x, m = dataset.split(split)
    rng = make_rng(seed)
    reps = []
    for _ in range(n_masks):
        q = sample_mask(mask_dist, m, rng)
        lp = model.cond_log_prob(x, np.zeros_like(q), q, standardized=standardized)
        reps.append(-float(np.mean(lp)))
    reps = np.array(reps)
    return float(reps.mean()), float(reps.std()) if n_masks > 1 else 0.0, reps


def eval_nrmse(imputations, truth, std, imputed):
    """Per-feature RMSE over imputed cells divided by the feature std, averaged over features.

    ``imputations`` may carry a leading axis of draws; the score is then the mean
    NRMSE across draws.  Features with no imputed cell are skipped and features
    with zero std are excluded with a warning.
    """
    imputations = np.asarray(imputations, dtype=np.float64)
    if imputations.ndim == 3:
        return float(np.mean([eval_nrmse(imp, truth, std, imputed) for imp in imputations]))
    truth = np.asarray(truth, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    imputed = np.asarray(imputed, dtype=bool)
    scores = []
    for j in range(truth.shape[1]):
        rows = imputed[:, j]
        if not rows.any():
            continue
        if not std[j] > 0:
            warnings.warn(f"feature {j} has zero std; excluded from NRMSE", RuntimeWarning, stacklevel=2)
            continue
        err = imputations[rows, j] - truth[rows, j]
        scores.append(np.sqrt(np.mean(err * err)) / std[j])
    if not scores:
        return float("nan")
    return float(np.mean(scores))


def mean_impute(x, b, means):
    """Fill every unobserved cell with the feature mean."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    b = np.broadcast_to(np.asarray(b, dtype=np.uint8), x.shape)
    return np.where(b == 1, x, np.broadcast_to(means, x.shape))
