"""The arbitrary-conditioning flow: a transform stack on top of a latent likelihood.

All public methods take raw (unstandardized) data in full ``(n, d)`` layout.
Only the observed entries (``b = 1``) and target entries (``m * (1 - b) = 1``)
are ever read, so missing cells may hold anything, including NaN.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .context import Batch, ConditioningContext
from .errors import MaskError
from .likelihoods import build_likelihood
from .masking import as_mask
from .nn import Module
from .transforms import TransformStack, build_transform

log = logging.getLogger(__name__)

MODES = ("conditional", "conditional_missing", "marginal")

__all__ = [
    "ACFlow",
    "ConditioningContext",
    "LossConfig",
    "synthetic_architecture",
    "tabular_architecture",
    "gibbs_chain",
]


@dataclass(frozen=True)
class LossConfig:
    """Weight of the best-guess squared-error penalty added to the NLL."""

    lam: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def _layer_stack(n_layers, hidden, rnn_hidden, rnn_layers, alpha, rank):
    layers = []
    for i in range(n_layers):
        if i:
            layers.append({"type": "reverse"})
        layers += [
            {"type": "linear", "hidden": [hidden, hidden], "rank": rank},
            {"type": "leaky_relu", "alpha": alpha},
            {"type": "rnn_coupling", "hidden": rnn_hidden, "layers": rnn_layers},
        ]
    return layers


def synthetic_architecture(d=2, hidden=256, components=40, alpha=0.5, rank=None):
    """Four (linear, leaky-ReLU, RNN coupling) layers with reverses between; 2-layer GRUs."""
    return {
        "d": d,
        "layers": _layer_stack(4, hidden, hidden, 2, alpha, rank),
        "base": {"type": "autoregressive_gmm", "components": components, "hidden": hidden, "layers": 2},
    }


def tabular_architecture(d, hidden=256, components=40, alpha=0.5, rank=None):
    """Six (linear, leaky-ReLU, RNN coupling) layers; 4-layer GRU autoregressive base."""
    return {
        "d": d,
        "layers": _layer_stack(6, hidden, hidden, 2, alpha, rank),
        "base": {"type": "autoregressive_gmm", "components": components, "hidden": hidden, "layers": 4},
    }


class ACFlow(Module):
    def __init__(self, descriptor, seed=0):
        self.descriptor = copy.deepcopy(descriptor)
        d = int(descriptor["d"])
        self.d = d
        rng = np.random.default_rng(seed)
        self.stack = TransformStack([build_transform(s, d, rng) for s in descriptor.get("layers", [])])
        self.base = build_likelihood(descriptor.get("base", {"type": "autoregressive_gmm"}), d, rng)
        self.shift = np.zeros(d)
        self.std = np.ones(d)
        self.mode = "conditional"
        self.names = [f"x{j + 1}" for j in range(d)]
        self.named_parameters()

    # standardization

    def set_standardizer(self, shift, std):
        shift = np.asarray(shift, dtype=np.float64)
        std = np.asarray(std, dtype=np.float64)
        if shift.shape != (self.d,) or std.shape != (self.d,):
            raise ValueError("standardizer statistics must have length d")
        if not (np.all(np.isfinite(shift)) and np.all(np.isfinite(std)) and np.all(std > 0)):
            raise ValueError("standardizer statistics must be finite with positive std")
        self.shift, self.std = shift.copy(), std.copy()

    def _standardize(self, x):
        return (np.atleast_2d(np.asarray(x, dtype=np.float64)) - self.shift) / self.std

    def _batch(self, x, b, m):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.d:
            raise MaskError(f"data has {x.shape[1]} columns, model expects {self.d}")
        x = self._standardize(x)
        if m is None:
            m = np.ones_like(x, dtype=np.uint8)
        return x, Batch(x, b, m)

    # densities

    def _log_prob(self, x_std, ctx):
        """Standardized-space log density, a Tensor of shape ``(n,)``."""
        z, logdet = self.stack.forward(dc.Tensor(ctx.targets(x_std)), ctx)
        return self.base.log_prob(z, ctx) + logdet

    def _raw_correction(self, ctx):
        return -(ctx.u * np.log(self.std)).sum(axis=1)

    def cond_log_prob(self, x, b, m=None, standardized=False):
        """``log p(x_u | x_o, b, m)`` per row; raw-space nats unless ``standardized``."""
        x_std, ctx = self._batch(x, b, m)
        with dc.no_grad():
            lp = self._log_prob(x_std, ctx).data
        return lp if standardized else lp + self._raw_correction(ctx)

    def joint_log_prob(self, x, standardized=False):
        """``log p(x)``, conditioning on nothing (``b = 0``, ``m = 1``)."""
        x = np.atleast_2d(x)
        return self.cond_log_prob(x, np.zeros(x.shape, dtype=np.uint8), None, standardized)

    def marginal_log_prob(self, x, query, standardized=False):
        """``log p(x_query)`` for full-layout ``x``; valid for marginal-mode models."""
        if self.mode != "marginal":
            warnings.warn(
                f"marginal likelihood requested from a model trained in {self.mode!r} mode",
                RuntimeWarning,
                stacklevel=2,
            )
        x = np.atleast_2d(x)
        query = np.broadcast_to(as_mask(query, self.d), x.shape)
        return self.cond_log_prob(x, np.zeros(x.shape, dtype=np.uint8), query, standardized)

    # sampling and imputation

    def _fill(self, x, ctx, values_std):
        out = np.array(np.atleast_2d(x), dtype=np.float64, copy=True)
        full = ctx.scatter(values_std) * self.std + self.shift
        return np.where(ctx.u > 0, full, out)

    def cond_sample(self, x, b, m=None, n=1, rng=None):
        """``n`` draws of ``x_u``; returns ``(n, rows, d)`` copies of ``x`` with targets filled."""
        if rng is None:
            raise ValueError("cond_sample needs an explicit rng")
        _, ctx = self._batch(x, b, m)
        draws = []
        with dc.no_grad():
            for _ in range(n):
                z = self.base.sample(ctx, rng)
                xs = self.stack.inverse(dc.Tensor(z), ctx).data
                draws.append(self._fill(x, ctx, xs))
        return np.stack(draws)

    def _best_guess(self, ctx):
        return self.stack.inverse(self.base.mean(ctx), ctx)

    def best_guess(self, x, b, m=None):
        """Single imputation: invert the transforms at the latent mean."""
        _, ctx = self._batch(x, b, m)
        with dc.no_grad():
            xs = self._best_guess(ctx).data
        return self._fill(x, ctx, xs)

    def loss(self, x, b, m=None, cfg=LossConfig()):
        """Batch mean of ``-log p(x_u | x_o, b) + lam * ||best_guess - x_u||^2`` (standardized)."""
        x_std, ctx = self._batch(x, b, m)
        nll = -self._log_prob(x_std, ctx)
        if cfg.lam > 0 and ctx.width:
            err = self._best_guess(ctx) - ctx.targets(x_std)
            nll = nll + dc.sum(dc.square(err), axis=1) * cfg.lam
        return dc.mean(nll)

    # persistence helpers

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.copy()


def gibbs_chain(model, x_init, blocks, steps, rng, m=None):
    """Block Gibbs sampling; returns the state after every sweep, ``(steps, rows, d)``.

    Each sweep resamples every block ``B`` from ``p(x_B | rest)`` using observed
    mask ``m - B``.
    """
    x = np.array(np.atleast_2d(x_init), dtype=np.float64, copy=True)
    d = x.shape[1]
    m = np.ones(d, dtype=np.uint8) if m is None else as_mask(m, d)
    blocks = [as_mask(blk, d) for blk in blocks]
    cover = np.sum(blocks, axis=0) if blocks else np.zeros(d)
    if np.any(cover > 1):
        raise MaskError("Gibbs blocks overlap")
    if not np.array_equal(cover, m):
        raise MaskError("Gibbs blocks must partition the non-missing dimensions")
    history = []
    for _ in range(steps):
        for blk in blocks:
            b = (m & (1 - blk)).astype(np.uint8)
            x = model.cond_sample(x, b, m, n=1, rng=rng)[0]
        history.append(x.copy())
    return np.stack(history) if history else np.zeros((0, *x.shape))
