"""Invertible transformations of the unobserved covariates conditioned on ``(x_o, b, m)``.

Every transform maps a compact ``(n, L)`` batch of target values (see
:class:`acflow.context.Batch`) to a batch of the same shape and returns the
per-row ``log|det J|``.  Padding entries (``valid = 0``) stay zero and never
contribute to the log-determinant.
"""

from __future__ import annotations

import numpy as np

from . import diffcore as dc
from .errors import NumericalError
from .nn import GRU, MLP, Dense, Module

SCALE_CLAMP = 5.0
MIN_ABS_DET = 1e-30
MAX_CONDITION = 1e12


def clamp_log_scale(raw, clamp=SCALE_CLAMP):
    """``c * tanh(raw / c)``: a smooth bound on ``|log s|``."""
    return dc.tanh(raw * (1.0 / clamp)) * clamp


def _zeros(n):
    return dc.Tensor(np.zeros(n))


class Transform(Module):
    index = None

    def forward(self, x, ctx):
        raise NotImplementedError

    def inverse(self, z, ctx):
        raise NotImplementedError

    def config(self):
        raise NotImplementedError


class LeakyReLU(Transform):
    def __init__(self, alpha=0.01):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.alpha = float(alpha)

    def forward(self, x, ctx):
        negative = (x.data < 0) * ctx.valid
        logdet = negative.sum(axis=1) * np.log(self.alpha)
        return dc.leaky_relu(x, self.alpha), dc.Tensor(logdet)

    def inverse(self, z, ctx):
        return dc.leaky_relu(z, 1.0 / self.alpha)

    def config(self):
        return {"type": "leaky_relu", "alpha": self.alpha}


class Reverse(Transform):
    """Reverses the order of each row's target entries."""

    @staticmethod
    def _order(ctx):
        k = np.arange(ctx.width)[None, :]
        lengths = ctx.lengths[:, None]
        return np.where(k < lengths, lengths - 1 - k, k)

    def forward(self, x, ctx):
        if ctx.width == 0:
            return x, _zeros(ctx.n)
        return dc.take_along_axis(x, self._order(ctx), axis=1), _zeros(ctx.n)

    def inverse(self, z, ctx):
        return self.forward(z, ctx)[0]

    def config(self):
        return {"type": "reverse"}


class AffineCoupling(Transform):
    """Even-odd affine coupling over the target entries.

    Entries at even compact positions (1st, 3rd, ...) form group A and are kept;
    group B is scaled and shifted by a network of the zero-imputed context
    ``concat(x_c, b_c, m)``.
    """

    def __init__(self, d, hidden=(256, 256), rng=None, clamp=SCALE_CLAMP):
        self.d = d
        self.hidden = tuple(hidden)
        self.clamp = clamp
        self.net = MLP(3 * d, self.hidden, 2 * d, rng, out_gain=0.01)

    def _groups(self, ctx):
        even = (np.arange(ctx.width) % 2 == 0)[None, :]
        return ctx.valid * even, ctx.valid * ~even

    def _shift_scale(self, kept, group_a, ctx):
        x_c = ctx.scatter(kept) + ctx.x_obs
        b_c = ctx.scatter(group_a) + ctx.b
        out = self.net(dc.concat([x_c, dc.Tensor(np.concatenate([b_c, ctx.m], axis=1))], axis=1))
        log_s = clamp_log_scale(ctx.gather(out[:, : self.d]), self.clamp)
        t = ctx.gather(out[:, self.d :])
        return log_s, t

    def forward(self, x, ctx):
        if ctx.width == 0:
            return x, _zeros(ctx.n)
        group_a, group_b = self._groups(ctx)
        log_s, t = self._shift_scale(x * group_a, group_a, ctx)
        z = x * group_a + (x * dc.exp(log_s) + t) * group_b
        return z, dc.sum(log_s * group_b, axis=1)

    def inverse(self, z, ctx):
        if ctx.width == 0:
            return z
        group_a, group_b = self._groups(ctx)
        kept = z * group_a
        log_s, t = self._shift_scale(kept, group_a, ctx)
        return kept + (z - t) * dc.exp(-log_s) * group_b

    def config(self):
        return {"type": "affine_coupling", "hidden": list(self.hidden), "clamp": self.clamp}


class ConditionalLinear(Transform):
    """``z = W x + t`` with ``W = (W_f + base)[u, u]`` and ``W_f, t_f`` from a context network.

    With ``rank`` set, ``W_f = U V`` for ``U`` of shape ``(d, rank)`` and ``V`` of
    shape ``(rank, d)``.
    """

    def __init__(self, d, hidden=(256, 256), rank=None, rng=None):
        self.d = d
        self.hidden = tuple(hidden)
        self.rank = rank
        n_w = d * d if rank is None else 2 * d * rank
        self.net = MLP(3 * d, self.hidden, n_w + d, rng, out_gain=0.01)
        self.base = dc.Parameter(np.eye(d))

    def _matrix(self, ctx):
        d, n, width = self.d, ctx.n, ctx.width
        out = self.net(dc.Tensor(ctx.cond))
        t = ctx.gather(out[:, :d])
        pos = ctx.positions
        if self.rank is None:
            w_full = dc.reshape(out[:, d:], (n, d, d)) + self.base
            flat = (pos[:, :, None] * d + pos[:, None, :]).reshape(n, width * width)
            w = dc.reshape(dc.take_along_axis(dc.reshape(w_full, (n, d * d)), flat, axis=1), (n, width, width))
        else:
            r = self.rank
            left = dc.reshape(out[:, d : d + d * r], (n, d, r))
            right = dc.reshape(out[:, d + d * r :], (n, r, d))
            rows = dc.take_along_axis(left, np.broadcast_to(pos[:, :, None], (n, width, r)), axis=1)
            cols = dc.take_along_axis(right, np.broadcast_to(pos[:, None, :], (n, r, width)), axis=2)
            w = dc.matmul(rows, cols) + _gather_base(self.base, pos)
        vv = ctx.valid[:, :, None] * ctx.valid[:, None, :]
        pad = np.eye(width)[None] * (1.0 - ctx.valid)[:, :, None]
        w = w * vv + pad
        self._check(w.data)
        return w, t

    def _check(self, w):
        if not np.all(np.isfinite(w)):
            raise NumericalError("linear transform matrix has non-finite entries", self.index)
        sign, logabs = np.linalg.slogdet(w)
        if np.any(sign == 0) or np.any(logabs < np.log(MIN_ABS_DET)):
            raise NumericalError("linear transform matrix is singular", self.index)
        cond = np.linalg.cond(w)
        if np.any(~np.isfinite(cond)) or np.any(cond > MAX_CONDITION):
            raise NumericalError(f"linear transform matrix is ill-conditioned (cond {np.max(cond):.3g})", self.index)

    def forward(self, x, ctx):
        if ctx.width == 0:
            return x, _zeros(ctx.n)
        w, t = self._matrix(ctx)
        z = dc.reshape(dc.matmul(w, dc.reshape(x, (ctx.n, ctx.width, 1))), (ctx.n, ctx.width)) + t
        return z, dc.logdet(w)

    def inverse(self, z, ctx):
        if ctx.width == 0:
            return z
        w, t = self._matrix(ctx)
        return dc.solve(w, z - t)

    def config(self):
        return {"type": "linear", "hidden": list(self.hidden), "rank": self.rank}


def _gather_base(base, pos):
    n, width = pos.shape
    d = base.shape[0]
    flat = (pos[:, :, None] * d + pos[:, None, :]).reshape(n, width * width)
    tiled = dc.reshape(base, (1, d * d)) + np.zeros((n, 1))
    return dc.reshape(dc.take_along_axis(tiled, flat, axis=1), (n, width, width))


class RNNCoupling(Transform):
    """Sequential affine transform of each target entry.

    Step ``i`` runs a GRU on ``concat(x_{i-1}, phi(x_o; b), b, m)`` (with
    ``x_0 = -1``) and maps its output to a shift and a clamped log-scale for
    ``x_i``.  The inverse is sequential: the scale at step ``i`` only depends on
    already-recovered entries.
    """

    def __init__(self, d, hidden=256, layers=2, rng=None, clamp=SCALE_CLAMP):
        self.d = d
        self.hidden = hidden
        self.layers = layers
        self.clamp = clamp
        self.rnn = GRU(1 + 3 * d, hidden, layers, rng)
        self.head = Dense(hidden, 2, rng, gain=0.01)

    def _params(self, out):
        p = self.head(out)
        return p[:, 0:1], clamp_log_scale(p[:, 1:2], self.clamp)

    def _run(self, values, ctx, invert):
        n = ctx.n
        w_first = self.rnn.w_in[0]
        cond_proj = dc.matmul(dc.Tensor(ctx.cond), w_first[1:]) + self.rnn.b_in[0]
        w_prev = w_first[0:1]
        state = self.rnn.initial_state(n)
        prev = dc.Tensor(-np.ones((n, 1)))
        cols = []
        logdet = _zeros(n)
        for k in range(ctx.width):
            out, state = self.rnn.step(cond_proj + prev * w_prev, state)
            shift, log_s = self._params(out)
            v = ctx.valid[:, k : k + 1]
            cur = values[:, k : k + 1]
            if invert:
                res = ((cur - shift) * dc.exp(-log_s)) * v + cur * (1.0 - v)
                prev = res
            else:
                res = (cur * dc.exp(log_s) + shift) * v + cur * (1.0 - v)
                logdet = logdet + dc.reshape(log_s * v, (n,))
                prev = cur
            cols.append(res)
        if not cols:
            return values, logdet
        return dc.concat(cols, axis=1), logdet

    def forward(self, x, ctx):
        return self._run(x, ctx, invert=False)

    def inverse(self, z, ctx):
        return self._run(z, ctx, invert=True)[0]

    def config(self):
        return {"type": "rnn_coupling", "hidden": self.hidden, "layers": self.layers, "clamp": self.clamp}


class TransformStack(Transform):
    """Composition; the log-determinants of the members add up."""

    def __init__(self, transforms=()):
        self.transforms = list(transforms)
        for i, t in enumerate(self.transforms):
            t.index = i

    def __len__(self):
        return len(self.transforms)

    def forward(self, x, ctx):
        total = _zeros(ctx.n)
        for t in self.transforms:
            x, ld = t.forward(x, ctx)
            total = total + ld
        return x, total

    def inverse(self, z, ctx):
        for t in reversed(self.transforms):
            z = t.inverse(z, ctx)
        return z

    def config(self):
        return [t.config() for t in self.transforms]


def build_transform(spec, d, rng):
    kind = spec["type"]
    if kind == "leaky_relu":
        return LeakyReLU(spec.get("alpha", 0.01))
    if kind == "reverse":
        return Reverse()
    if kind == "affine_coupling":
        return AffineCoupling(d, spec.get("hidden", (256, 256)), rng, spec.get("clamp", SCALE_CLAMP))
    if kind == "linear":
        return ConditionalLinear(d, spec.get("hidden", (256, 256)), spec.get("rank"), rng)
    if kind == "rnn_coupling":
        return RNNCoupling(d, spec.get("hidden", 256), spec.get("layers", 2), rng, spec.get("clamp", SCALE_CLAMP))
    raise ValueError(f"unknown transform type {kind!r}")
