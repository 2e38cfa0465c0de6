"""Slow, loop-based reference implementations of the attention kernels.

Nothing here touches the autodiff engine or the skew trick: scores are
built entry by entry from a directly evaluated sinusoid so that the fast
kernels can be checked against an independent code path.
"""

from __future__ import annotations

import math

import numpy as np

from .attention import AttentionParams


def _sin_row(p: int, d: int) -> np.ndarray:
    row = np.zeros(d)
    for i in range(d // 2):
        a = p / (10000.0 ** (2 * i / d))
        row[2 * i] = math.sin(a)
        row[2 * i + 1] = math.cos(a)
    return row


def _np(params: AttentionParams) -> dict[str, np.ndarray]:
    return {name: t.data for name, t in params.tensors()}


def _softmax_rows(s: np.ndarray) -> np.ndarray:
    out = np.zeros_like(s)
    for i in range(s.shape[0]):
        row = s[i]
        finite = np.isfinite(row)
        m = row[finite].max()
        e = np.where(finite, np.exp(np.where(finite, row, 0.0) - m), 0.0)
        out[i] = e / e.sum()
    return out


def _dense_scores(q: np.ndarray, k: np.ndarray, emb, q_pos, k_pos) -> np.ndarray:
    """scores[i, j] = q_i.k_j + q_i.emb(k_pos[j] - q_pos[i]), computed entry by entry."""
    nq, nk = q.shape[0], k.shape[0]
    s = np.zeros((nq, nk))
    for i in range(nq):
        for j in range(nk):
            s[i, j] = float(q[i] @ k[j]) + float(q[i] @ emb(k_pos[j] - q_pos[i]))
    return s


def naive_regular(x: np.ndarray, params: AttentionParams) -> np.ndarray:
    return naive_sliced(x, params, 1)


def naive_sliced(x: np.ndarray, params: AttentionParams, s: int) -> np.ndarray:
    """Build every head's full n x n score matrix, then keep query rows 0, s, 2s, ..."""
    p = _np(params)
    n, d = x.shape
    H, dh = params.heads, params.d_head
    q = x @ p["wq"] + p["bq"]
    k = x @ p["wk"] + p["bk"]
    v = x @ p["wv"] + p["bv"]
    emb_full = {off: _sin_row(off, d) @ p["we"] + p["be"] for off in range(-(n - 1), n)}
    rows = list(range(0, n, s))
    heads = []
    for h in range(H):
        cols = slice(h * dh, (h + 1) * dh)
        scores = _dense_scores(q[:, cols], k[:, cols], lambda o: emb_full[o][cols],
                               list(range(n)), list(range(n)))
        scores = scores[rows] / math.sqrt(dh)
        heads.append(_softmax_rows(scores) @ v[:, cols])
    return np.concatenate(heads, axis=1) @ p["wo"] + p["bo"]


def naive_grouped(x: np.ndarray, params: AttentionParams, g: int) -> np.ndarray:
    """Explicitly regroup Q/K/V and the frame-level embeddings, then run dense attention."""
    p = _np(params)
    n, d = x.shape
    H = params.heads
    n_pad = -(-n // g) * g
    n_grp = n_pad // g
    dg = d * g
    dhg = dg // H

    def regroup(m: np.ndarray) -> np.ndarray:
        padded = np.zeros((n_pad, d))
        padded[:n] = m
        out = np.zeros((n_grp, dg))
        for r in range(n_grp):
            for slot in range(g):
                out[r, slot * d:(slot + 1) * d] = padded[r * g + slot]
        return out

    q = regroup(x @ p["wq"] + p["bq"])
    k = regroup(x @ p["wk"] + p["bk"])
    v = regroup(x @ p["wv"] + p["bv"])

    def group_emb(m: int) -> np.ndarray:
        return np.concatenate([_sin_row(m * g + slot, d) @ p["we"] + p["be"] for slot in range(g)])

    emb = {m: group_emb(m) for m in range(-(n_grp - 1), n_grp)}
    heads = []
    for h in range(H):
        cols = slice(h * dhg, (h + 1) * dhg)
        scores = _dense_scores(q[:, cols], k[:, cols], lambda o: emb[o][cols],
                               list(range(n_grp)), list(range(n_grp)))
        heads.append(_softmax_rows(scores / math.sqrt(dhg)) @ v[:, cols])
    o = np.concatenate(heads, axis=1)
    frames = np.zeros((n_pad, d))
    for r in range(n_grp):
        for slot in range(g):
            frames[r * g + slot] = o[r, slot * d:(slot + 1) * d]
    return frames[:n] @ p["wo"] + p["bo"]


def naive_local(x: np.ndarray, params: AttentionParams, w_att: int) -> np.ndarray:
    """Run naive regular attention on each window separately (the tail window is just shorter)."""
    p = _np(params)
    n, d = x.shape
    H, dh = params.heads, params.d_head
    q_all = x @ p["wq"] + p["bq"]
    k_all = x @ p["wk"] + p["bk"]
    v_all = x @ p["wv"] + p["bv"]
    emb = {off: _sin_row(off, d) @ p["we"] + p["be"] for off in range(-(w_att - 1), w_att)}
    out = np.zeros((n, d))
    for start in range(0, n, w_att):
        stop = min(start + w_att, n)
        blk = list(range(stop - start))
        heads = []
        for h in range(H):
            cols = slice(h * dh, (h + 1) * dh)
            scores = _dense_scores(q_all[start:stop, cols], k_all[start:stop, cols],
                                   lambda o: emb[o][cols], blk, blk)
            heads.append(_softmax_rows(scores / math.sqrt(dh)) @ v_all[start:stop, cols])
        out[start:stop] = np.concatenate(heads, axis=1)
    return out @ p["wo"] + p["bo"]


def naive_linear(x: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Per-head softmax over query features and over key positions, two explicit matmuls."""
    p = _np(params)
    H, dh = params.heads, params.d_head
    q_all = x @ p["wq"] + p["bq"]
    k_all = x @ p["wk"] + p["bk"]
    v_all = x @ p["wv"] + p["bv"]
    t = dh ** 0.25
    heads = []
    for h in range(H):
        cols = slice(h * dh, (h + 1) * dh)
        q = q_all[:, cols] / t
        k = k_all[:, cols] / t
        sq = np.exp(q - q.max(axis=1, keepdims=True))
        sq /= sq.sum(axis=1, keepdims=True)
        sk = np.exp(k - k.max(axis=0, keepdims=True))
        sk /= sk.sum(axis=0, keepdims=True)
        context = np.zeros((dh, dh))
        for a in range(dh):
            for b in range(dh):
                context[a, b] = float(sk[:, a] @ v_all[:, cols][:, b])
        heads.append(sq @ context)
    return np.concatenate(heads, axis=1) @ p["wo"] + p["bo"]


def gather_rel_to_abs(scores_rel: np.ndarray, stride: int = 1) -> np.ndarray:
    """Index-gather reference for the skew: ``out[..., i, j] = rel[..., i, j - i*stride + n - 1]``."""
    *lead, n_q, width = scores_rel.shape
    n = (width + 1) // 2
    out = np.zeros(tuple(lead) + (n_q, n))
    for i in range(n_q):
        for j in range(n):
            out[..., i, j] = scores_rel[..., i, j - i * stride + n - 1]
    return out
