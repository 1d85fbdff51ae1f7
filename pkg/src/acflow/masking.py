"""Bitmask semantics: indexing, zero-imputation, mask generators and missing-data splits.

Masks are stored as ``uint8`` arrays of 0/1.  ``b`` marks observed dimensions,
``m`` marks non-missing dimensions; the modelled (unobserved) dimensions are
``u = m * (1 - b)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MaskError


def make_rng(seed):
    """Counter-based generator (Philox) so every stochastic API is seed-reproducible."""
    return np.random.Generator(np.random.Philox(seed))


def as_mask(bits, d=None):
    arr = np.asarray(bits)
    if arr.size and not np.all((arr == 0) | (arr == 1)):
        raise MaskError("mask entries must be 0 or 1")
    arr = arr.astype(np.uint8)
    if d is not None and arr.shape[-1] != d:
        raise MaskError(f"mask length {arr.shape[-1]} does not match dimension {d}")
    return arr


@dataclass(frozen=True)
class MaskedVector:
    """The entries of a length-``full_dim`` vector selected by ``mask``."""

    values: np.ndarray
    mask: np.ndarray
    full_dim: int = field(init=False)

    def __post_init__(self):
        mask = as_mask(self.mask)
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape[0] != int(mask.sum()):
            raise MaskError(f"{values.shape[0]} values for a mask with {int(mask.sum())} ones")
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "full_dim", mask.shape[0])

    def impute(self):
        return zero_impute(self.values, self.mask)


def index(v, rows, cols=None):
    """``v[rows]`` for vectors, ``v[rows, cols]`` (rows then columns) for matrices."""
    v = np.asarray(v)
    rows = as_mask(rows)
    if v.shape[0] != rows.shape[0]:
        raise MaskError(f"row mask length {rows.shape[0]} does not match {v.shape[0]}")
    out = v[rows.astype(bool)]
    if cols is not None:
        cols = as_mask(cols)
        if v.ndim < 2 or v.shape[1] != cols.shape[0]:
            raise MaskError("column mask does not match matrix width")
        out = out[:, cols.astype(bool)]
    return out


def zero_impute(values, b):
    """Scatter ``values`` into a length-``d`` vector at the ones of ``b``; zeros elsewhere."""
    b = as_mask(b)
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.shape[0] != int(b.sum()):
        raise MaskError(f"{values.shape[0]} values for a mask with {int(b.sum())} ones")
    out = np.zeros(b.shape[0])
    out[b.astype(bool)] = values
    return out


def compose_coupling_context(x_ua, b_u, x_o, b):
    """Conditioning input of the arbitrary-conditional affine coupling.

    Returns ``x_c = phi(phi(x_ua; b_u); 1 - b) + phi(x_o; b)`` and
    ``b_c = phi(b_u; 1 - b) + b``.
    """
    b = as_mask(b)
    b_u = as_mask(b_u)
    if b_u.shape[0] != int((1 - b).sum()):
        raise MaskError(f"coupling mask has length {b_u.shape[0]}, expected {int((1 - b).sum())}")
    inner = zero_impute(x_ua, b_u)
    x_c = zero_impute(inner, 1 - b) + zero_impute(x_o, b)
    b_c = zero_impute(b_u, 1 - b) + b
    return x_c, b_c.astype(np.uint8)


def split_missing(x, b, m):
    """Return ``(x[b], x[m * (1 - b)])``; missing dimensions appear in neither."""
    x = np.asarray(x, dtype=np.float64)
    b = as_mask(b, x.shape[-1])
    m = as_mask(m, x.shape[-1])
    if np.any(b > m):
        raise MaskError("a missing dimension (m=0) is marked observed (b=1)")
    return x[b.astype(bool)], x[(m * (1 - b)).astype(bool)]


@dataclass(frozen=True)
class MaskDistribution:
    """Distribution over observed masks ``b``.

    kind is one of ``bernoulli`` (each dimension observed with probability ``p``),
    ``drop_one_uniform`` (all observed except one uniformly chosen dimension),
    ``fixed`` (always ``mask``) and ``block`` (dimensions ``start:stop`` unobserved).
    """

    kind: str = "bernoulli"
    p: float = 0.5
    mask: tuple = ()
    start: int = 0
    stop: int = 0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "drop_one_uniform", "fixed", "block"):
            raise MaskError(f"unknown mask distribution {self.kind!r}")
        if not 0.0 <= self.p <= 1.0:
            raise MaskError("bernoulli p must lie in [0, 1]")

    @classmethod
    def parse(cls, text):
        """Parse ``bernoulli:0.5``, ``drop_one``, ``fixed:1010`` or ``block:2:5``."""
        kind, _, rest = text.strip().partition(":")
        if kind == "bernoulli":
            return cls("bernoulli", p=float(rest) if rest else 0.5)
        if kind in ("drop_one", "drop_one_uniform"):
            return cls("drop_one_uniform")
        if kind == "fixed":
            return cls("fixed", mask=tuple(int(c) for c in rest.replace(",", "")))
        if kind == "block":
            start, _, stop = rest.partition(":")
            return cls("block", start=int(start), stop=int(stop))
        raise MaskError(f"unknown mask distribution {text!r}")

    def __str__(self):
        if self.kind == "bernoulli":
            return f"bernoulli:{self.p}"
        if self.kind == "drop_one_uniform":
            return "drop_one"
        if self.kind == "fixed":
            return "fixed:" + "".join(map(str, self.mask))
        return f"block:{self.start}:{self.stop}"


def sample_mask(dist, m, rng):
    """Draw observed masks for non-missing masks ``m`` of shape ``(d,)`` or ``(n, d)``.

    Missing dimensions are never observed.
    """
    m = as_mask(m)
    shape = m.shape
    d = shape[-1]
    if dist.kind == "bernoulli":
        b = (rng.random(shape) < dist.p).astype(np.uint8)
    elif dist.kind == "drop_one_uniform":
        mm = m.reshape(-1, d).astype(np.float64)
        b = np.ones_like(mm, dtype=np.uint8)
        # choose among non-missing dimensions; rows with none fall back to all dims
        weights = np.where(mm.sum(axis=1, keepdims=True) > 0, mm, 1.0)
        cum = np.cumsum(weights, axis=1)
        r = rng.random((mm.shape[0], 1)) * cum[:, -1:]
        drop = np.minimum((cum <= r).sum(axis=1), d - 1)
        b[np.arange(mm.shape[0]), drop] = 0
        b = b.reshape(shape)
    elif dist.kind == "fixed":
        b = np.broadcast_to(as_mask(dist.mask, d), shape).copy()
    else:
        b = np.ones(shape, dtype=np.uint8)
        b[..., dist.start : dist.stop] = 0
    return (b & m).astype(np.uint8)


def compact_layout(u):
    """Left-aligned layout of the ones of each row of ``u`` (shape ``(n, d)``).

    Returns ``(place, valid, positions)`` where ``place[n, k, j] = 1`` iff the
    ``k``-th unobserved dimension of row ``n`` is ``j``; ``valid[n, k] = 1`` iff
    ``k < |u_n|``; ``positions[n, k]`` is that dimension (0 on padding).
    The width is ``max |u_n|`` (0 if every row is empty).
    """
    u = np.asarray(u, dtype=bool)
    n, d = u.shape
    counts = u.sum(axis=1)
    width = int(counts.max()) if n else 0
    rank = np.cumsum(u, axis=1) - 1
    rows, cols = np.nonzero(u)
    place = np.zeros((n, width, d))
    place[rows, rank[rows, cols], cols] = 1.0
    valid = (np.arange(width)[None, :] < counts[:, None]).astype(np.float64)
    positions = np.zeros((n, width), dtype=np.intp)
    positions[rows, rank[rows, cols]] = cols
    return place, valid, positions
