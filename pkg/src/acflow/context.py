"""Conditioning information handed to every transform and latent likelihood."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import MaskError
from .masking import MaskedVector, as_mask, compact_layout, zero_impute


@dataclass(frozen=True)
class ConditioningContext:
    """Observed values ``x_o`` with observed mask ``b`` and non-missing mask ``m``."""

    x_o: MaskedVector
    b: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        b = as_mask(self.b)
        m = as_mask(self.m, b.shape[0])
        if np.any(b & (1 - m)):
            raise MaskError("a missing dimension (m=0) is marked observed (b=1)")
        if not np.array_equal(self.x_o.mask, b):
            raise MaskError("x_o mask differs from b")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "m", m)

    @classmethod
    def from_full(cls, x, b, m=None):
        x = np.asarray(x, dtype=np.float64)
        b = as_mask(b, x.shape[-1])
        m = np.ones_like(b) if m is None else as_mask(m, x.shape[-1])
        return cls(MaskedVector(x[b.astype(bool)], b), b, m)

    @property
    def u(self):
        return self.m * (1 - self.b)

    def assemble(self, x_u):
        """Full length-``d`` vector with ``x_o`` and ``x_u`` in place and zeros elsewhere."""
        return self.x_o.impute() + zero_impute(x_u, self.u)


class Batch:
    """Batched conditioning in full-dimension layout plus the compact target layout.

    ``x`` is ``(n, d)``; only entries with ``b = 1`` are read for conditioning.
    The targets ``u = m * (1 - b)`` of each row are packed left-aligned into a
    ``(n, L)`` layout with ``L = max |u|``; ``valid`` marks real entries.
    """

    def __init__(self, x, b, m=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n, d = x.shape
        b = np.broadcast_to(as_mask(b, d), (n, d))
        m = np.ones((n, d), dtype=np.uint8) if m is None else np.broadcast_to(as_mask(m, d), (n, d))
        if np.any(b & (1 - m)):
            raise MaskError("a missing dimension (m=0) is marked observed (b=1)")
        self.n, self.d = n, d
        self.b = b.astype(np.float64)
        self.m = m.astype(np.float64)
        self.u = self.m * (1.0 - self.b)
        self.x_obs = np.where(self.b > 0, x, 0.0)
        self.cond = np.concatenate([self.x_obs, self.b, self.m], axis=1)
        self.place, self.valid, self.positions = compact_layout(self.u)
        self.width = self.valid.shape[1]
        self.lengths = self.valid.sum(axis=1).astype(int)
        rank = np.cumsum(self.u, axis=1).astype(np.intp) - 1
        self._rank = np.clip(rank, 0, max(self.width - 1, 0))

    def gather(self, full):
        """Compact ``(n, L)`` view of the target entries of an ``(n, d)`` array/Tensor."""
        if isinstance(full, dc.Tensor):
            return dc.take_along_axis(full, self.positions, axis=1) * self.valid
        return np.take_along_axis(np.asarray(full, dtype=np.float64), self.positions, axis=1) * self.valid

    def scatter(self, compact):
        """Inverse of :meth:`gather`: zeros outside the target dimensions."""
        if self.width == 0:
            return dc.Tensor(np.zeros((self.n, self.d))) if isinstance(compact, dc.Tensor) else np.zeros((self.n, self.d))
        if isinstance(compact, dc.Tensor):
            return dc.take_along_axis(compact, self._rank, axis=1) * self.u
        return np.take_along_axis(np.asarray(compact, dtype=np.float64), self._rank, axis=1) * self.u

    def targets(self, x):
        """Compact target values of the full-layout array ``x`` (missing cells may be NaN)."""
        x = np.where(self.u > 0, np.asarray(x, dtype=np.float64), 0.0)
        return self.gather(x)
