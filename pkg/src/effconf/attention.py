"""Multi-head self-attention with relative sinusoidal position scores.

Five variants share one parameter set (:class:`AttentionParams`):

* regular  -- full relative MHSA
* strided  -- queries subsampled every ``s`` frames, keys/values full length
* grouped  -- ``g`` neighbouring frames folded into the feature axis
* local    -- independent attention inside non-overlapping windows
* linear   -- row/column softmax factorisation without position scores

Tensors are unbatched: a sequence is ``[n, d]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class AttentionVariant:
    """Which attention kernel a layer runs, plus its size parameter."""

    kind: str = "regular"
    size: int = 1

    KINDS = ("regular", "strided", "grouped", "local", "linear")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigError(f"unknown attention variant {self.kind!r}")
        if self.size < 1:
            raise ConfigError(f"{self.kind} attention size must be >= 1, got {self.size}")

    @classmethod
    def regular(cls) -> "AttentionVariant":
        return cls("regular", 1)

    @classmethod
    def strided(cls, s: int) -> "AttentionVariant":
        return cls("strided", s)

    @classmethod
    def grouped(cls, g: int) -> "AttentionVariant":
        return cls("grouped", g)

    @classmethod
    def local(cls, w_att: int) -> "AttentionVariant":
        return cls("local", w_att)

    @classmethod
    def linear(cls) -> "AttentionVariant":
        return cls("linear", 1)

    def __str__(self) -> str:
        if self.kind in ("regular", "linear"):
            return self.kind
        return f"{self.kind}({self.size})"


@dataclass
class AttentionParams:
    """Projection weights for one attention layer.

    Weights are stored input-major (``x @ w``); the per-head split takes
    contiguous ``d_h`` column blocks.
    """

    d: int
    heads: int
    wq: DTensor
    wk: DTensor
    wv: DTensor
    wo: DTensor
    we: DTensor
    bq: DTensor
    bk: DTensor
    bv: DTensor
    bo: DTensor
    be: DTensor

    def __post_init__(self):
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError(f"model dim {self.d} is not divisible by {self.heads} heads")
        for name in ("wq", "wk", "wv", "wo", "we"):
            w = getattr(self, name)
            if w.shape != (self.d, self.d):
                raise DimensionError(f"{name} must be ({self.d}, {self.d}), got {w.shape}")
            if not np.all(np.isfinite(w.data)):
                raise ConfigError(f"{name} contains non-finite values")

    @property
    def d_head(self) -> int:
        return self.d // self.heads

    @classmethod
    def init(cls, d: int, heads: int, rng: np.random.Generator, scale: float | None = None) -> "AttentionParams":
        """Uniform fan-in initialisation, zero biases."""
        if heads < 1 or d % heads:
            raise ConfigError(f"model dim {d} is not divisible by {heads} heads")
        bound = scale if scale is not None else 1.0 / math.sqrt(d)

        def w():
            return DTensor(rng.uniform(-bound, bound, (d, d)), requires_grad=True)

        def b():
            return DTensor(np.zeros(d), requires_grad=True)

        return cls(d, heads, w(), w(), w(), w(), w(), b(), b(), b(), b(), b())

    def tensors(self) -> Iterator[tuple[str, DTensor]]:
        for name in ("wq", "wk", "wv", "wo", "we", "bq", "bk", "bv", "bo", "be"):
            yield name, getattr(self, name)


# ---------------------------------------------------------------------------
# Relative position table
# ---------------------------------------------------------------------------


def sinusoid(positions: np.ndarray, d: int) -> np.ndarray:
    """Sinusoid rows for arbitrary (possibly negative) integer positions."""
    if d % 2:
        raise ConfigError(f"sinusoidal encodings need an even dimension, got {d}")
    pos = np.asarray(positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = pos * freq[None, :]
    out = np.empty((len(pos), d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


@dataclass(frozen=True)
class RelPosTable:
    """Sinusoids for relative offsets ``-(n_max-1) .. n_max-1`` (row ``p + n_max - 1``)."""

    n_max: int
    d: int
    matrix: np.ndarray

    def rows(self, lo: int, hi: int) -> np.ndarray:
        """Rows for offsets ``lo..hi`` inclusive, ascending."""
        if lo < -(self.n_max - 1) or hi > self.n_max - 1:
            raise ConfigError(
                f"offsets [{lo}, {hi}] exceed the table range +-{self.n_max - 1}; "
                f"rebuild the table with a larger n_max"
            )
        return self.matrix[lo + self.n_max - 1: hi + self.n_max]

    def window(self, n: int) -> np.ndarray:
        return self.rows(-(n - 1), n - 1)


def sinusoidal_table(n_max: int, d: int) -> RelPosTable:
    if n_max < 1:
        raise ConfigError(f"n_max must be >= 1, got {n_max}")
    if d % 2:
        raise ConfigError(f"sinusoidal encodings need an even dimension, got {d}")
    positions = np.arange(-(n_max - 1), n_max)
    return RelPosTable(n_max, d, sinusoid(positions, d))


# ---------------------------------------------------------------------------
# Relative-to-absolute skew
# ---------------------------------------------------------------------------


def rel_to_abs(scores_rel: DTensor, stride: int = 1) -> DTensor:
    """Map relative logits ``[..., n_q, 2n-1]`` to absolute ``[..., n_q, n]``.

    ``out[..., i, j] = scores_rel[..., i, j - i*stride + n - 1]``. Done with a
    pad / flatten / slice / reshape skew; no gather and no extra n^2 buffers.
    """
    *lead, n_q, width = scores_rel.shape
    if width % 2 == 0:
        raise DimensionError(f"relative axis must have odd length 2n-1, got {width}")
    n = (width + 1) // 2
    if (n_q - 1) * stride > n - 1:
        raise DimensionError(f"{n_q} queries at stride {stride} do not fit in {n} keys")
    lead = tuple(lead)
    x = ad.pad(scores_rel, -1, 0, stride)
    x = ad.reshape(x, lead + (n_q * (width + stride),))
    x = ad.slice_axis(x, -1, n - 1, n - 1 + n_q * width)
    x = ad.reshape(x, lead + (n_q, width))
    return ad.slice_axis(x, -1, 0, n)


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def _split_heads(x: DTensor, heads: int) -> DTensor:
    """[..., n, H*dh] -> [..., H, n, dh]"""
    *lead, n, dm = x.shape
    x = ad.reshape(x, tuple(lead) + (n, heads, dm // heads))
    k = len(lead)
    axes = tuple(range(k)) + (k + 1, k, k + 2)
    return ad.transpose(x, axes)


def _merge_heads(x: DTensor) -> DTensor:
    """[..., H, n, dh] -> [..., n, H*dh]"""
    *lead, h, n, dh = x.shape
    k = len(lead)
    axes = tuple(range(k)) + (k + 1, k, k + 2)
    x = ad.transpose(x, axes)
    return ad.reshape(x, tuple(lead) + (n, h * dh))


def _position_embedding(params: AttentionParams, rows: np.ndarray) -> DTensor:
    return ad.linear(DTensor(rows), params.we, params.be)


def _relative_attention(q: DTensor, k: DTensor, v: DTensor, e: DTensor, stride: int,
                        mask: np.ndarray | None = None) -> DTensor:
    """softmax((Q K^T + skew(Q E^T)) / sqrt(dh)) V with heads on axis -3."""
    dh = q.shape[-1]
    content = ad.matmul(q, ad.swap_last(k))
    position = rel_to_abs(ad.matmul(q, ad.swap_last(e)), stride)
    scores = ad.scale(ad.add(content, position), 1.0 / math.sqrt(dh))
    if mask is not None:
        scores = ad.masked_fill(scores, mask, -np.inf)
    return ad.matmul(ad.softmax(scores, -1), v)


def _check_input(x: DTensor, params: AttentionParams) -> None:
    if x.ndim != 2 or x.shape[1] != params.d:
        raise DimensionError(f"attention input must be [n, {params.d}], got {x.shape}")
    if x.shape[0] < 1:
        raise DimensionError("attention over an empty sequence")


def mhsa_regular(x: DTensor, params: AttentionParams, table: RelPosTable) -> DTensor:
    return mhsa_strided(x, params, table, 1)


def mhsa_strided(x: DTensor, params: AttentionParams, table: RelPosTable, s: int) -> DTensor:
    """Queries at rows ``0, s, 2s, ...``; output is ``[ceil(n/s), d]``.

    Relative offsets are measured in input frames (``j - i*s``).
    """
    _check_input(x, params)
    if s < 1:
        raise ConfigError(f"stride must be >= 1, got {s}")
    n, H = x.shape[0], params.heads
    if n > table.n_max:
        raise ConfigError(f"sequence length {n} exceeds table n_max {table.n_max}")
    xq = ad.slice_axis(x, 0, None, None, s) if s > 1 else x
    q = _split_heads(ad.linear(xq, params.wq, params.bq), H)
    k = _split_heads(ad.linear(x, params.wk, params.bk), H)
    v = _split_heads(ad.linear(x, params.wv, params.bv), H)
    e = _split_heads(_position_embedding(params, table.window(n)), H)
    o = _relative_attention(q, k, v, e, s)
    return ad.linear(_merge_heads(o), params.wo, params.bo)


def grouped_offsets(n_pad: int, g: int) -> tuple[int, int]:
    """Frame offsets spanned by the grouped position table: ``2*n_pad - g`` values.

    Group offset ``m`` covers frame offsets ``m*g .. m*g + g - 1``.
    """
    n_grp = n_pad // g
    return -(n_grp - 1) * g, (n_grp - 1) * g + g - 1


def mhsa_grouped(x: DTensor, params: AttentionParams, table: RelPosTable, g: int) -> DTensor:
    """Attention at group resolution: ``n' = ceil(n/g)`` rows of width ``d*g``."""
    _check_input(x, params)
    if g < 1:
        raise ConfigError(f"group size must be >= 1, got {g}")
    n, d, H = x.shape[0], params.d, params.heads
    n_pad = -(-n // g) * g
    n_grp = n_pad // g
    if n_pad > table.n_max:
        raise ConfigError(f"padded length {n_pad} exceeds table n_max {table.n_max}")

    def grouped(t: DTensor) -> DTensor:
        t = ad.pad(t, 0, 0, n_pad - n)
        return _split_heads(ad.reshape(t, (n_grp, d * g)), H)

    q = grouped(ad.linear(x, params.wq, params.bq))
    k = grouped(ad.linear(x, params.wk, params.bk))
    v = grouped(ad.linear(x, params.wv, params.bv))
    lo, hi = grouped_offsets(n_pad, g)
    e = _position_embedding(params, table.rows(lo, hi))
    e = _split_heads(ad.reshape(e, (2 * n_grp - 1, d * g)), H)
    # padding never fills a whole group, so no key group is masked
    o = _relative_attention(q, k, v, e, 1)
    o = ad.reshape(_merge_heads(o), (n_pad, d))
    if n_pad > n:
        o = ad.slice_axis(o, 0, 0, n)
    return ad.linear(o, params.wo, params.bo)


def mhsa_local(x: DTensor, params: AttentionParams, table: RelPosTable, w_att: int) -> DTensor:
    """Relative MHSA inside non-overlapping blocks of ``w_att`` frames.

    Only offsets within a block are needed, so ``table`` must cover ``w_att``.
    """
    _check_input(x, params)
    if w_att < 1:
        raise ConfigError(f"attention window must be >= 1, got {w_att}")
    n, d, H = x.shape[0], params.d, params.heads
    w = w_att
    n_pad = -(-n // w) * w
    nb = n_pad // w
    dh = params.d_head

    def blocked(t: DTensor) -> DTensor:
        t = ad.pad(t, 0, 0, n_pad - n)
        return _split_heads(ad.reshape(t, (nb, w, d)), H)  # [nb, H, w, dh]

    q_flat = ad.pad(ad.linear(x, params.wq, params.bq), 0, 0, n_pad - n)
    q = _split_heads(ad.reshape(q_flat, (nb, w, d)), H)
    k = blocked(ad.linear(x, params.wk, params.bk))
    v = blocked(ad.linear(x, params.wv, params.bv))
    e = _split_heads(_position_embedding(params, table.window(w)), H)  # [H, 2w-1, dh]

    content = ad.matmul(q, ad.swap_last(k))  # [nb, H, w, w]
    q_heads = _split_heads(q_flat, H)  # [H, n_pad, dh]
    rel = ad.matmul(q_heads, ad.swap_last(e))  # [H, n_pad, 2w-1]
    rel = ad.transpose(ad.reshape(rel, (H, nb, w, 2 * w - 1)), (1, 0, 2, 3))
    position = rel_to_abs(rel)
    scores = ad.scale(ad.add(content, position), 1.0 / math.sqrt(dh))
    if n_pad > n:
        key_pad = (np.arange(n_pad) >= n).reshape(nb, 1, 1, w)
        scores = ad.masked_fill(scores, key_pad, -np.inf)
    o = ad.matmul(ad.softmax(scores, -1), v)  # [nb, H, w, dh]
    o = ad.reshape(_merge_heads(o), (n_pad, d))
    if n_pad > n:
        o = ad.slice_axis(o, 0, 0, n)
    return ad.linear(o, params.wo, params.bo)


def mhsa_linear(x: DTensor, params: AttentionParams) -> DTensor:
    """Row-softmax queries times column-softmax key context; O(n d^2 / H)."""
    _check_input(x, params)
    H, dh = params.heads, params.d_head
    temp = dh ** -0.25
    q = _split_heads(ad.linear(x, params.wq, params.bq), H)
    k = _split_heads(ad.linear(x, params.wk, params.bk), H)
    v = _split_heads(ad.linear(x, params.wv, params.bv), H)
    q = ad.softmax(ad.scale(q, temp), -1)
    k = ad.softmax(ad.scale(k, temp), -2)
    context = ad.matmul(ad.swap_last(k), v)  # [H, dh, dh]
    o = ad.matmul(q, context)
    return ad.linear(_merge_heads(o), params.wo, params.bo)


def mhsa(x: DTensor, params: AttentionParams, table: RelPosTable | None,
         variant: AttentionVariant) -> DTensor:
    """Dispatch on ``variant``."""
    if variant.kind == "linear":
        return mhsa_linear(x, params)
    if table is None:
        raise ConfigError(f"{variant} attention needs a relative position table")
    if variant.kind == "regular":
        return mhsa_regular(x, params, table)
    if variant.kind == "strided":
        return mhsa_strided(x, params, table, variant.size)
    if variant.kind == "grouped":
        return mhsa_grouped(x, params, table, variant.size)
    return mhsa_local(x, params, table, variant.size)


def table_length_needed(n: int, variant: AttentionVariant) -> int:
    """Smallest ``n_max`` a table must have for a length-``n`` input."""
    if variant.kind == "grouped":
        return -(-n // variant.size) * variant.size
    if variant.kind == "local":
        return variant.size
    return n
