"""Connectionist temporal classification: loss, gradient, greedy decoding,
and a brute-force path enumerator used as a test oracle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .errors import DimensionError, RefusalError

BLANK = 0
NEG_INF = -np.inf


@dataclass
class CtcInstance:
    log_probs: np.ndarray  # [T, V], blank at column 0
    labels: tuple[int, ...]

    def __post_init__(self):
        lp = self.log_probs.data if isinstance(self.log_probs, DTensor) else self.log_probs
        self.log_probs = np.asarray(lp, dtype=np.float64)
        self.labels = tuple(int(c) for c in self.labels)
        if self.log_probs.ndim != 2:
            raise DimensionError(f"log_probs must be [T, V], got {self.log_probs.shape}")
        V = self.log_probs.shape[1]
        if any(c <= BLANK or c >= V for c in self.labels):
            raise DimensionError(f"labels must lie in 1..{V - 1}, got {self.labels}")

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def L(self) -> int:
        return len(self.labels)

    @property
    def feasible(self) -> bool:
        return self.T >= min_frames(self.labels)


@dataclass
class CtcResult:
    neg_log_likelihood: float
    grad: np.ndarray  # d loss / d log_probs, [T, V]
    feasible: bool


def min_frames(labels: Sequence[int]) -> int:
    """Shortest input that can emit ``labels``: one frame per label plus a blank per repeat."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _extended(labels: Sequence[int]) -> np.ndarray:
    ext = np.full(2 * len(labels) + 1, BLANK, dtype=np.int64)
    ext[1::2] = labels
    return ext


def _skip_allowed(ext: np.ndarray) -> np.ndarray:
    """``s`` may be reached from ``s-2`` when ext[s] is a label differing from ext[s-2]."""
    allow = np.zeros(len(ext), dtype=bool)
    allow[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    return allow


def _shift(v: np.ndarray, k: int) -> np.ndarray:
    """Shift right by ``k`` (left if negative), filling with -inf."""
    out = np.full_like(v, NEG_INF)
    if abs(k) >= len(v):
        return out
    if k > 0:
        out[k:] = v[:-k]
    else:
        out[:k] = v[-k:]
    return out


def ctc_loss(instance: CtcInstance) -> CtcResult:
    """Negative log-likelihood of the labels and its gradient w.r.t. ``log_probs``.

    Alpha/beta recursions run in log space over the blank-extended label
    sequence. Infeasible instances return ``inf`` with a zero gradient.
    """
    lp = instance.log_probs
    T, V = lp.shape
    if not instance.feasible or T == 0:
        return CtcResult(float("inf"), np.zeros_like(lp), False)
    if np.isnan(lp).any():
        return CtcResult(float("nan"), np.full_like(lp, np.nan), True)
    ext = _extended(instance.labels)
    S = len(ext)
    skip = _skip_allowed(ext)
    emit = lp[:, ext]  # [T, S]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        jump = np.where(skip, _shift(prev, 2), NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(prev, _shift(prev, 1)), jump) + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_from = np.zeros(S, dtype=bool)  # s -> s+2 allowed
    skip_from[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        jump = np.where(skip_from, _shift(nxt, -2), NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(nxt, _shift(nxt, -1)), jump) + emit[t]

    tail = alpha[T - 1, S - 1] if S == 1 else np.logaddexp(alpha[T - 1, S - 1], alpha[T - 1, S - 2])
    log_p = float(tail)
    if not np.isfinite(log_p):
        return CtcResult(float("inf"), np.zeros_like(lp), False)

    # occupancy gamma_t(s) = alpha*beta / y, since both recursions include the emission at t
    log_occ = alpha + beta - emit - log_p
    grad = np.zeros((T, V))
    occ = np.exp(log_occ)
    for s in range(S):
        grad[:, ext[s]] -= occ[:, s]
    return CtcResult(-log_p, grad, True)


def ctc_loss_tensor(log_probs: DTensor, labels: Sequence[int]) -> DTensor:
    """Differentiable wrapper: a scalar loss node whose adjoint is the CTC gradient."""
    res = ctc_loss(CtcInstance(log_probs.data, tuple(labels)))
    grad = res.grad
    return ad._make(np.asarray(res.neg_log_likelihood), (log_probs,), lambda g: (g * grad,))


def ctc_brute_force(instance: CtcInstance, max_paths: int = 10 ** 7, chunk: int = 1 << 18) -> float:
    """P(labels | log_probs) summed over all V^T frame paths that collapse to the labels."""
    lp = instance.log_probs
    T, V = lp.shape
    total = V ** T
    if total > max_paths:
        raise RefusalError(f"{V}^{T} = {total} paths exceeds the enumeration limit {max_paths}")
    labels = np.asarray(instance.labels, dtype=np.int64)
    L = len(labels)
    probs = np.exp(lp)
    place = V ** np.arange(T - 1, -1, -1, dtype=np.int64)
    acc = 0.0
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        paths = (idx[:, None] // place[None, :]) % V  # [P, T]
        keep = paths != BLANK
        keep[:, 1:] &= paths[:, 1:] != paths[:, :-1]
        match = keep.sum(axis=1) == L
        if not match.any():
            continue
        cand = paths[match]
        kept = cand[keep[match]].reshape(-1, L) if L else np.zeros((len(cand), 0), dtype=np.int64)
        ok = np.all(kept == labels[None, :], axis=1)
        if not ok.any():
            continue
        good = cand[ok]
        acc += float(np.prod(probs[np.arange(T)[None, :], good], axis=1).sum())
    return acc


def greedy_decode(log_probs) -> list[int]:
    """Per-frame argmax, merge repeats, drop blanks."""
    lp = log_probs.data if isinstance(log_probs, DTensor) else np.asarray(log_probs)
    return collapse(np.argmax(lp, axis=-1).tolist())


def collapse(path: Sequence[int]) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for c in path:
        if c != prev and c != BLANK:
            out.append(int(c))
        prev = c
    return out


def batch_ctc_loss(log_probs_list: Sequence[DTensor], labels_list: Sequence[Sequence[int]]) -> DTensor:
    """Mean of per-utterance losses."""
    losses = [ctc_loss_tensor(lp, lab) for lp, lab in zip(log_probs_list, labels_list)]
    total = losses[0]
    for l in losses[1:]:
        total = ad.add(total, l)
    return ad.scale(total, 1.0 / len(losses))
