"""Finite-difference gradient checking and the equivalence / gradient suites
shared by the command line and the test-suite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import oracles
from .attention import (AttentionParams, mhsa_grouped, mhsa_linear, mhsa_local, mhsa_regular, mhsa_strided,
                        rel_to_abs, sinusoidal_table)
from .autodiff import DTensor
from .blocks import BlockConfig, BlockParams, conformer_block_forward, named_tensors
from .ctc import CtcInstance, ctc_loss, ctc_loss_tensor
from .encoder import build, miniature_config

FD_STEP = 1e-5
ABS_FLOOR = 1e-8
GRAD_TOL = 1e-4
CTC_GRAD_TOL = 1e-5
COLLAPSE_TOL = 1e-12
ORACLE_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    worst: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.worst) and self.worst <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} worst={self.worst:.3e}  tol={self.tol:.0e}"


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Worst entry difference scaled by the tensor's gradient magnitude.

    ``max|a - n| / max(max|a|, max|n|, floor)``: entries whose true gradient is
    tiny are judged against the scale of the whole tensor rather than their own
    magnitude, where finite-difference round-off would dominate.
    """
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / scale)


def _entries(shape, max_entries: int | None, rng: np.random.Generator) -> list[tuple[int, ...]]:
    idx = list(np.ndindex(*shape))
    if max_entries is not None and len(idx) > max_entries:
        pick = rng.choice(len(idx), size=max_entries, replace=False)
        idx = [idx[i] for i in sorted(pick)]
    return idx


def check_gradients(loss_fn: Callable[[], DTensor], tensors: Sequence[DTensor], eps: float = FD_STEP,
                    max_entries: int | None = 40, seed: int = 0) -> float:
    """Compare backprop against central differences of ``loss_fn`` over (a sample of) each tensor's entries.

    ``loss_fn`` must rebuild the graph from the current tensor values and return a scalar.
    Returns :func:`relative_error` over all sampled entries together, so a
    tensor whose true gradient is zero (a key bias under softmax shift
    invariance, say) is measured against the scale of the whole check.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss_fn().backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    got, want = [], []
    with ad.no_grad():
        for t, a in zip(tensors, analytic):
            idx = _entries(t.shape, max_entries, rng)
            num = np.empty(len(idx))
            for j, i in enumerate(idx):
                orig = t.data[i]
                t.data[i] = orig + eps
                up = loss_fn().item()
                t.data[i] = orig - eps
                down = loss_fn().item()
                t.data[i] = orig
                num[j] = (up - down) / (2 * eps)
            got.extend(a[i] for i in idx)
            want.extend(num)
    return relative_error(np.array(got), np.array(want))


def projected(out_fn: Callable[[], DTensor], seed: int = 0) -> Callable[[], DTensor]:
    """Turn a tensor-valued function into a scalar via a fixed random projection."""
    cache = {}

    def loss():
        out = out_fn()
        if "w" not in cache:
            cache["w"] = DTensor(np.random.default_rng(seed).normal(size=out.shape))
        return ad.sum(ad.mul(out, cache["w"]))

    return loss


def _leaf(rng, shape, scale=1.0) -> DTensor:
    return DTensor(rng.normal(size=shape) * scale, requires_grad=True)


# ---------------------------------------------------------------------------
# Gradient suite
# ---------------------------------------------------------------------------


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], DTensor], list[DTensor]]]:
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    x = _leaf(rng, (5, 6))
    y = _leaf(rng, (5, 6))
    pos = DTensor(rng.uniform(0.5, 2.0, (5, 6)), requires_grad=True)
    bias = _leaf(rng, (6,))
    gamma, beta = _leaf(rng, (6,)), _leaf(rng, (6,))
    batched = _leaf(rng, (2, 3, 4)), _leaf(rng, (2, 4, 5))
    seq = _leaf(rng, (9, 4))
    dw, dw_b = _leaf(rng, (5, 4)), _leaf(rng, (4,))
    pw = _leaf(rng, (4, 3))
    dense = _leaf(rng, (3, 4, 2))
    img = _leaf(rng, (7, 6, 2))
    k2 = _leaf(rng, (3, 3, 2, 3))
    k2_b = _leaf(rng, (3,))
    rel = _leaf(rng, (2, 4, 7))
    rel_s = _leaf(rng, (2, 2, 7))
    mask = rng.random((5, 6)) < 0.3
    return {
        "op/matmul": (lambda: ad.matmul(a, b), [a, b]),
        "op/matmul_batched": (lambda: ad.matmul(*batched), list(batched)),
        "op/add_bias": (lambda: ad.add(x, bias), [x, bias]),
        "op/sub_mul": (lambda: ad.mul(ad.sub(x, y), y), [x, y]),
        "op/sigmoid": (lambda: ad.sigmoid(x), [x]),
        "op/swish": (lambda: ad.swish(x), [x]),
        "op/relu": (lambda: ad.relu(ad.add(x, 0.05)), [x]),
        "op/glu": (lambda: ad.glu(x), [x]),
        "op/exp_log": (lambda: ad.log(ad.mul(ad.exp(x), pos)), [x, pos]),
        "op/sum_mean": (lambda: ad.add(ad.sum(x, 0), ad.mean(y, 0)), [x, y]),
        "op/softmax": (lambda: ad.softmax(x, -1), [x]),
        "op/softmax_axis0": (lambda: ad.softmax(x, 0), [x]),
        "op/log_softmax": (lambda: ad.log_softmax(x, -1), [x]),
        "op/layer_norm": (lambda: ad.layer_norm(x, gamma, beta), [x, gamma, beta]),
        "op/masked_fill": (lambda: ad.softmax(ad.masked_fill(x, mask, -np.inf), -1), [x]),
        "op/reshape_transpose": (lambda: ad.transpose(ad.reshape(x, (3, 10)), (1, 0)), [x]),
        "op/pad_slice": (lambda: ad.slice_axis(ad.pad(x, 0, 1, 2), 0, 1, None, 2), [x]),
        "op/concat": (lambda: ad.concat([x, y], 1), [x, y]),
        "op/conv1d_depthwise": (lambda: ad.conv1d(seq, dw, dw_b, 1, "depthwise"), [seq, dw, dw_b]),
        "op/conv1d_depthwise_s2": (lambda: ad.conv1d(seq, dw, dw_b, 2, "depthwise"), [seq, dw, dw_b]),
        "op/conv1d_pointwise": (lambda: ad.conv1d(seq, pw, None, 1, "pointwise"), [seq, pw]),
        "op/conv1d_dense": (lambda: ad.conv1d(seq, dense, None, 2, "dense"), [seq, dense]),
        "op/conv2d": (lambda: ad.conv2d(img, k2, k2_b, 2), [img, k2, k2_b]),
        "op/avg_pool": (lambda: ad.avg_pool(seq, 2), [seq]),
        "op/rel_to_abs": (lambda: rel_to_abs(rel), [rel]),
        "op/rel_to_abs_stride2": (lambda: rel_to_abs(rel_s, 2), [rel_s]),
    }


def _attention_cases(rng: np.random.Generator):
    n, d, H = 7, 8, 2
    x = _leaf(rng, (n, d))
    p = AttentionParams.init(d, H, rng, scale=0.5)
    for _, t in p.tensors():
        if t.data.ndim == 1:
            t.data[:] = rng.normal(size=t.shape) * 0.1
    table = sinusoidal_table(16, d)
    leaves = [x] + [t for _, t in p.tensors()]
    return {
        "attention/regular": (lambda: mhsa_regular(x, p, table), leaves),
        "attention/strided(2)": (lambda: mhsa_strided(x, p, table, 2), leaves),
        "attention/grouped(3)": (lambda: mhsa_grouped(x, p, table, 3), leaves),
        "attention/local(3)": (lambda: mhsa_local(x, p, table, 3), leaves),
        "attention/linear": (lambda: mhsa_linear(x, p), leaves),
    }


def _block_cases(rng: np.random.Generator):
    cases = {}
    table = sinusoidal_table(16, 8)
    for label, cfg in (
        ("block/plain", BlockConfig(8, 8, 2, 3)),
        ("block/conv_downsample", BlockConfig(8, 12, 2, 3, downsample="conv")),
        ("block/attention_downsample", BlockConfig(8, 12, 2, 3, downsample="attention")),
    ):
        x = _leaf(rng, (8, 8))
        bp = BlockParams.init(cfg, rng)
        leaves = [x] + [t for _, t in named_tensors(bp)]
        cases[label] = ((lambda x=x, bp=bp, cfg=cfg: conformer_block_forward(x, bp, cfg, table)), leaves)
    return cases


def gradcheck_suite(seed: int = 0, max_entries: int = 12) -> list[CheckResult]:
    """Finite-difference checks over the ops, attention kernels, blocks, a miniature encoder and CTC."""
    rng = np.random.default_rng(seed)
    results = []
    groups = [_op_cases(rng), _attention_cases(rng), _block_cases(rng)]
    for group in groups:
        for name, (fn, leaves) in group.items():
            err = check_gradients(projected(fn, seed), leaves, max_entries=max_entries, seed=seed)
            results.append(CheckResult(name, err, GRAD_TOL))

    model = build(miniature_config(groups=(3, 1, 1)), seed)
    feats = _leaf(rng, (16, model.config.input_features))
    leaves = [feats] + model.parameters()
    labels = (1, 2)
    err = check_gradients(lambda: ctc_loss_tensor(model(feats).log_probs, labels), leaves, max_entries=4, seed=seed)
    results.append(CheckResult("encoder/miniature+ctc", err, GRAD_TOL))

    worst = 0.0
    for _ in range(20):
        inst = random_ctc_instance(rng)
        res = ctc_loss(inst)
        if not res.feasible:
            continue
        num = _ctc_fd(inst)
        worst = max(worst, relative_error(res.grad, num))
    results.append(CheckResult("ctc/grad", worst, CTC_GRAD_TOL))
    return results


def _ctc_fd(inst: CtcInstance, eps: float = FD_STEP) -> np.ndarray:
    lp = inst.log_probs
    num = np.zeros_like(lp)
    for i in np.ndindex(*lp.shape):
        up, down = lp.copy(), lp.copy()
        up[i] += eps
        down[i] -= eps
        num[i] = (ctc_loss(CtcInstance(up, inst.labels)).neg_log_likelihood
                  - ctc_loss(CtcInstance(down, inst.labels)).neg_log_likelihood) / (2 * eps)
    return num


def random_ctc_instance(rng: np.random.Generator, max_t: int = 8, max_l: int = 3, max_v: int = 4,
                        sharpness: float = 2.0) -> CtcInstance:
    T = int(rng.integers(1, max_t + 1))
    V = int(rng.integers(2, max_v + 1))
    L = int(rng.integers(0, max_l + 1))
    z = rng.normal(size=(T, V)) * sharpness
    lp = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
    return CtcInstance(lp, tuple(int(c) for c in rng.integers(1, V, size=L)))


# ---------------------------------------------------------------------------
# Equivalence suite
# ---------------------------------------------------------------------------


def random_attention_case(rng: np.random.Generator, max_n: int = 16, max_d_head: int = 4, max_heads: int = 3):
    H = int(rng.integers(1, max_heads + 1))
    d = H * 2 * int(rng.integers(1, max_d_head // 2 + 1))
    n = int(rng.integers(1, max_n + 1))
    x = DTensor(rng.normal(size=(n, d)))
    p = AttentionParams.init(d, H, rng)
    for _, t in p.tensors():
        if t.data.ndim == 1:
            t.data[:] = rng.normal(size=t.shape) * 0.1
    return x, p


def equivalence_suite(seed: int = 0, cases: int = 50, max_n: int = 16) -> list[CheckResult]:
    """Identity collapses, fast-vs-oracle agreement, and the skew against direct gather."""
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in ("collapse/grouped(g=1)", "collapse/strided(s=1)", "collapse/local(w=n)",
                              "oracle/regular", "oracle/strided", "oracle/grouped", "oracle/local",
                              "oracle/linear")}
    with ad.no_grad():
        for _ in range(cases):
            x, p = random_attention_case(rng, max_n)
            n = x.shape[0]
            table = sinusoidal_table(max(n, 1), p.d)
            ref = mhsa_regular(x, p, table).data

            def upd(key, a, b):
                worst[key] = max(worst[key], float(np.max(np.abs(a - b))))

            upd("collapse/grouped(g=1)", mhsa_grouped(x, p, table, 1).data, ref)
            upd("collapse/strided(s=1)", mhsa_strided(x, p, table, 1).data, ref)
            upd("collapse/local(w=n)", mhsa_local(x, p, table, n).data, ref)

            s = int(rng.integers(1, 4))
            g = int(rng.integers(1, 5))
            w = int(rng.integers(1, n + 1))
            big = sinusoidal_table(-(-n // g) * g, p.d)
            upd("oracle/regular", ref, oracles.naive_regular(x.data, p))
            upd("oracle/strided", mhsa_strided(x, p, table, s).data, oracles.naive_sliced(x.data, p, s))
            upd("oracle/grouped", mhsa_grouped(x, p, big, g).data, oracles.naive_grouped(x.data, p, g))
            upd("oracle/local", mhsa_local(x, p, table, w).data, oracles.naive_local(x.data, p, w))
            upd("oracle/linear", mhsa_linear(x, p).data, oracles.naive_linear(x.data, p))
    results = [CheckResult(k, v, COLLAPSE_TOL if k.startswith("collapse") else ORACLE_TOL)
               for k, v in worst.items()]
    results.append(CheckResult("skew/rel_to_abs n=1..32", skew_worst(rng), 0.0))
    return results


def skew_worst(rng: np.random.Generator, n_values: Sequence[int] = range(1, 33)) -> float:
    worst = 0.0
    with ad.no_grad():
        for n in n_values:
            for stride in (1, 2, 3):
                n_q = -(-n // stride)
                rel = rng.normal(size=(2, n_q, 2 * n - 1))
                fast = rel_to_abs(DTensor(rel), stride).data
                worst = max(worst, float(np.max(np.abs(fast - oracles.gather_rel_to_abs(rel, stride)))))
    return worst


__all__ = [
    "CheckResult", "check_gradients", "projected", "relative_error", "gradcheck_suite",
    "equivalence_suite", "skew_worst", "random_ctc_instance", "random_attention_case",
]
