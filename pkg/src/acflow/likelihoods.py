"""Latent densities ``p(z_u | x_o, b, m)``: a diagonal Gaussian and an autoregressive GMM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import DomainError
from .nn import GRU, MLP, Dense, Module
from .transforms import clamp_log_scale

HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
MIN_SCALE = 1e-6


def normal_log_prob(z, loc, scale):
    return -0.5 * dc.square((z - loc) / scale) - dc.log(scale) - HALF_LOG_2PI


def gmm_log_prob(z, logits, loc, scale):
    """``log sum_k softmax(logits)_k N(z; loc_k, scale_k)`` over the last axis.

    ``z`` broadcasts against ``(..., K)`` parameters, e.g. shape ``(n, 1)``.
    """
    logits, loc, scale = (dc._as_tensor(a) for a in (logits, loc, scale))
    if np.any(scale.data <= 0):
        raise DomainError("gmm_log_prob", "mixture scales must be positive")
    comp = dc.log_softmax(logits, axis=-1) + normal_log_prob(z, loc, scale)
    return dc.logsumexp(comp, axis=-1)


@dataclass
class GmmParams:
    """Per-row mixture parameters, each ``(n, K)``."""

    logits: dc.Tensor
    loc: dc.Tensor
    scale: dc.Tensor

    def log_prob(self, z):
        return gmm_log_prob(z, self.logits, self.loc, self.scale)

    def mean(self):
        return dc.sum(dc.softmax(self.logits, axis=-1) * self.loc, axis=-1)

    def sample(self, rng):
        logits = self.logits.data
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        cum = np.cumsum(w / w.sum(axis=1, keepdims=True), axis=1)
        pick = rng.random((cum.shape[0], 1))
        k = np.minimum((cum < pick).sum(axis=1), cum.shape[1] - 1)
        rows = np.arange(cum.shape[0])
        eps = rng.standard_normal(cum.shape[0])
        return self.loc.data[rows, k] + self.scale.data[rows, k] * eps


class LatentLikelihood(Module):
    def log_prob(self, z, ctx):
        raise NotImplementedError

    def sample(self, ctx, rng):
        raise NotImplementedError

    def mean(self, ctx):
        raise NotImplementedError


class AutoregressiveGMM(LatentLikelihood):
    """Mixture density for each target entry given a GRU summary of the earlier ones.

    The GRU input at step ``i`` is ``concat(z_{i-1}, phi(x_o; b), b, m)`` with
    ``z_0 = -1``; a shared dense head maps its output to ``K`` logits,
    locations and scales (``softplus(raw) + 1e-6``).
    """

    def __init__(self, d, components=40, hidden=256, layers=2, rng=None):
        self.d = d
        self.components = components
        self.hidden = hidden
        self.layers = layers
        self.rnn = GRU(1 + 3 * d, hidden, layers, rng)
        self.head = Dense(hidden, 3 * components, rng, gain=0.1)
        # spread initial locations so components start distinct
        self.head.b.data[components : 2 * components] = np.linspace(-2.0, 2.0, components)
        self.head.b.data[2 * components :] = np.log(np.expm1(0.5))

    def _params(self, out):
        p = self.head(out)
        k = self.components
        return GmmParams(p[:, :k], p[:, k : 2 * k], dc.softplus(p[:, 2 * k :]) + MIN_SCALE)

    def _steps(self, ctx):
        cond_proj = dc.matmul(dc.Tensor(ctx.cond), self.rnn.w_in[0][1:]) + self.rnn.b_in[0]
        return cond_proj, self.rnn.w_in[0][0:1], self.rnn.initial_state(ctx.n)

    def step_params(self, z, ctx):
        """Teacher-forced mixture parameters for every step, as a list."""
        cond_proj, w_prev, state = self._steps(ctx)
        prev = dc.Tensor(-np.ones((ctx.n, 1)))
        params = []
        for k in range(ctx.width):
            out, state = self.rnn.step(cond_proj + prev * w_prev, state)
            params.append(self._params(out))
            prev = z[:, k : k + 1]
        return params

    def log_prob(self, z, ctx):
        total = dc.Tensor(np.zeros(ctx.n))
        for k, theta in enumerate(self.step_params(z, ctx)):
            total = total + theta.log_prob(z[:, k : k + 1]) * ctx.valid[:, k]
        return total

    def sample(self, ctx, rng):
        with dc.no_grad():
            cond_proj, w_prev, state = self._steps(ctx)
            prev = dc.Tensor(-np.ones((ctx.n, 1)))
            out_z = np.zeros((ctx.n, ctx.width))
            for k in range(ctx.width):
                out, state = self.rnn.step(cond_proj + prev * w_prev, state)
                draw = self._params(out).sample(rng) * ctx.valid[:, k]
                out_z[:, k] = draw
                prev = dc.Tensor(draw[:, None])
        return out_z

    def mean(self, ctx):
        """Greedy mean: each step's mixture mean is fed back as the previous entry."""
        cond_proj, w_prev, state = self._steps(ctx)
        prev = dc.Tensor(-np.ones((ctx.n, 1)))
        cols = []
        for k in range(ctx.width):
            out, state = self.rnn.step(cond_proj + prev * w_prev, state)
            mu = dc.reshape(self._params(out).mean() * ctx.valid[:, k], (ctx.n, 1))
            cols.append(mu)
            prev = mu
        if not cols:
            return dc.Tensor(np.zeros((ctx.n, 0)))
        return dc.concat(cols, axis=1)

    def config(self):
        return {"type": "autoregressive_gmm", "components": self.components, "hidden": self.hidden, "layers": self.layers}


class DiagonalGaussian(LatentLikelihood):
    """Independent Gaussians whose means and log-scales come from a context network."""

    def __init__(self, d, hidden=(256, 256), rng=None):
        self.d = d
        self.hidden = tuple(hidden)
        self.net = MLP(3 * d, self.hidden, 2 * d, rng, out_gain=0.01)

    def _loc_scale(self, ctx):
        out = self.net(dc.Tensor(ctx.cond))
        loc = ctx.gather(out[:, : self.d])
        log_scale = clamp_log_scale(ctx.gather(out[:, self.d :]))
        return loc, log_scale

    def log_prob(self, z, ctx):
        loc, log_scale = self._loc_scale(ctx)
        lp = -0.5 * dc.square((z - loc) * dc.exp(-log_scale)) - log_scale - HALF_LOG_2PI
        return dc.sum(lp * ctx.valid, axis=1)

    def sample(self, ctx, rng):
        with dc.no_grad():
            loc, log_scale = self._loc_scale(ctx)
        eps = rng.standard_normal((ctx.n, ctx.width))
        return (loc.data + np.exp(log_scale.data) * eps) * ctx.valid

    def mean(self, ctx):
        return self._loc_scale(ctx)[0]

    def config(self):
        return {"type": "gaussian", "hidden": list(self.hidden)}


def build_likelihood(spec, d, rng):
    kind = spec["type"]
    if kind == "autoregressive_gmm":
        return AutoregressiveGMM(d, spec.get("components", 40), spec.get("hidden", 256), spec.get("layers", 2), rng)
    if kind == "gaussian":
        return DiagonalGaussian(d, spec.get("hidden", (256, 256)), rng)
    raise ValueError(f"unknown base distribution {kind!r}")
