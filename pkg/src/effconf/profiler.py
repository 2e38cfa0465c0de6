"""Analytic multiply-add, parameter, and activation-memory accounting.

Counting convention: one MAdd per multiply-accumulate in a matmul or
convolution. Norms, activations, softmax, pooling and the relative-logit
skew cost nothing. Every formula mirrors what ``encoder.forward`` executes,
so the analytic totals can be cross-checked against the instrumented ops.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .attention import AttentionVariant
from .blocks import BlockConfig
from .encoder import EncoderConfig

TEN_SECONDS = 1000  # 10 ms hop, 80 mel bins

CATEGORIES = ("ffn", "attention_scores", "attention_projections", "conv", "stem", "head")
CSV_FIELDS = ("config", "frames", "total_madds", "ffn", "att_scores", "att_proj", "conv", "stem", "head", "params")
_CSV_TO_CATEGORY = {
    "ffn": "ffn", "att_scores": "attention_scores", "att_proj": "attention_projections",
    "conv": "conv", "stem": "stem", "head": "head",
}


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass
class MAddsReport:
    config: str
    input_frames: int
    total: int
    per_stage: dict[str, int] = field(default_factory=dict)
    per_category: dict[str, int] = field(default_factory=dict)
    params_total: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MAddsReport":
        return cls(
            config=str(d["config"]), input_frames=int(d["input_frames"]), total=int(d["total"]),
            per_stage={k: int(v) for k, v in d["per_stage"].items()},
            per_category={k: int(v) for k, v in d["per_category"].items()},
            params_total=int(d["params_total"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def to_row(self) -> dict[str, str | int]:
        row: dict[str, str | int] = {"config": self.config, "frames": self.input_frames, "total_madds": self.total}
        for col, cat in _CSV_TO_CATEGORY.items():
            row[col] = self.per_category.get(cat, 0)
        row["params"] = self.params_total
        return row

    @classmethod
    def from_row(cls, row: dict) -> "MAddsReport":
        """Inverse of :meth:`to_row`; the per-stage split is not part of the CSV schema."""
        return cls(
            config=str(row["config"]), input_frames=int(row["frames"]), total=int(row["total_madds"]),
            per_category={cat: int(row[col]) for col, cat in _CSV_TO_CATEGORY.items()},
            params_total=int(row["params"]),
        )


class _Tally:
    def __init__(self):
        self.stage: dict[str, int] = {}
        self.category: dict[str, int] = {c: 0 for c in CATEGORIES}

    def add(self, stage: str, category: str, n: int) -> None:
        self.stage[stage] = self.stage.get(stage, 0) + int(n)
        self.category[category] += int(n)


def attention_score_terms(n: int, d: int, heads: int, variant: AttentionVariant) -> dict[str, int]:
    """Score-side MAdds split into ``content`` (Q K^T), ``position`` (Q E^T) and ``context`` (A V)."""
    dh = d // heads
    kind, size = variant.kind, variant.size
    if kind in ("regular", "strided"):
        nq = _ceil_div(n, size if kind == "strided" else 1)
        return {"content": heads * nq * n * dh, "position": heads * nq * (2 * n - 1) * dh,
                "context": heads * nq * n * dh}
    if kind == "grouped":
        ng = _ceil_div(n, size)
        dgh = d * size // heads
        return {"content": heads * ng * ng * dgh, "position": heads * ng * (2 * ng - 1) * dgh,
                "context": heads * ng * ng * dgh}
    if kind == "local":
        w = size
        nb = _ceil_div(n, w)
        return {"content": nb * heads * w * w * dh, "position": heads * nb * w * (2 * w - 1) * dh,
                "context": nb * heads * w * w * dh}
    # linear: K^T V context, then Q times context; no positional term
    return {"content": 0, "position": 0, "context": 2 * heads * n * dh * dh}


def attention_madds(n: int, d: int, heads: int, variant: AttentionVariant) -> tuple[int, int, int]:
    """Return ``(projection_madds, score_madds, n_out)`` for one attention layer on ``[n, d]``.

    Scores include Q K^T, the relative term Q E^T and the context product A V.
    """
    kind, size = variant.kind, variant.size
    scores = sum(attention_score_terms(n, d, heads, variant).values())
    if kind in ("regular", "strided"):
        nq = _ceil_div(n, size if kind == "strided" else 1)
        return 2 * nq * d * d + 2 * n * d * d + (2 * n - 1) * d * d, scores, nq
    if kind == "grouped":
        n_pad = _ceil_div(n, size) * size
        return 4 * n * d * d + (2 * n_pad - size) * d * d, scores, n
    if kind == "local":
        return 4 * n * d * d + (2 * size - 1) * d * d, scores, n
    return 4 * n * d * d, scores, n


def score_map_elements(n: int, heads: int, variant: AttentionVariant) -> int:
    """Entries of one layer's attention probability map."""
    kind, size = variant.kind, variant.size
    if kind == "strided":
        return heads * _ceil_div(n, size) * n
    if kind == "grouped":
        ng = _ceil_div(n, size)
        return heads * ng * ng
    if kind == "local":
        return _ceil_div(n, size) * heads * size * size
    if kind == "linear":
        return 0
    return heads * n * n


def _stem_shape(config: EncoderConfig, frames: int) -> list[tuple[int, int, int, int]]:
    """(t_out, f_out, c_in, c_out) for each stem conv layer."""
    t, f, c_in = frames, config.input_features, 1
    c = config.stem_out_channels
    out = []
    for _ in range(config.stem_layers):
        t, f = _ceil_div(t, 2), _ceil_div(f, 2)
        out.append((t, f, c_in, c))
        c_in = c
    return out


def _block_madds(tally: _Tally, stage: str, n: int, bc: BlockConfig) -> int:
    d_in, d_out, e = bc.d_in, bc.d_out, bc.ffn_expansion
    tally.add(stage, "ffn", 2 * n * d_in * e * d_in)
    proj, scores, n = attention_madds(n, d_in, bc.heads, bc.attention_variant)
    tally.add(stage, "attention_projections", proj)
    tally.add(stage, "attention_scores", scores)
    k = bc.conv_kernel
    conv = n * d_in * 2 * d_out
    if bc.downsample == "conv":
        n = _ceil_div(n, 2)
    conv += n * k * d_out + n * d_out * d_out
    if d_in != d_out:
        conv += n * d_in * d_out
    tally.add(stage, "conv", conv)
    tally.add(stage, "ffn", 2 * n * d_out * e * d_out)
    return n


def count_madds(config: EncoderConfig, input_frames: int = TEN_SECONDS) -> MAddsReport:
    """Analytic MAdds for one utterance of ``input_frames`` frames."""
    tally = _Tally()
    layers = _stem_shape(config, input_frames)
    for t, f, c_in, c_out in layers:
        tally.add("stem", "stem", t * f * c_out * 9 * c_in)
    t, f, _, c = layers[-1]
    tally.add("stem", "stem", t * f * c * config.stages[0].dim)
    n = t
    for si, bc in config.block_configs():
        n = _block_madds(tally, f"stage{si + 1}", n, bc)
    if config.output_vocab:
        tally.add("head", "head", n * config.d_model_out * config.output_vocab)
    total = sum(tally.category.values())
    return MAddsReport(config.name, input_frames, total, dict(tally.stage), dict(tally.category),
                       count_params(config))


def count_params(config: EncoderConfig) -> int:
    """Exact number of weights and biases in ``build(config)``."""
    total = 0
    c = config.stem_out_channels
    c_in = 1
    f = config.input_features
    for _ in range(config.stem_layers):
        total += 9 * c_in * c + c
        c_in = c
        f = _ceil_div(f, 2)
    d1 = config.stages[0].dim
    total += f * c * d1 + d1
    for _, bc in config.block_configs():
        d_in, d_out, e, k = bc.d_in, bc.d_out, bc.ffn_expansion, bc.conv_kernel
        for d in (d_in, d_out):
            total += 2 * d + d * e * d + e * d + e * d * d + d
        total += 2 * d_in + 5 * (d_in * d_in + d_in)
        total += 2 * d_in + d_in * 2 * d_out + 2 * d_out + k * d_out + d_out + 2 * d_out + d_out * d_out + d_out
        if d_in != d_out:
            total += d_in * d_out + d_out
        total += 2 * d_out
    if config.output_vocab:
        total += config.d_model_out * config.output_vocab + config.output_vocab
    return total


# ---------------------------------------------------------------------------
# Activation memory
# ---------------------------------------------------------------------------

# n x d tensors a block keeps alive for the backward pass: 11 per FFN
# (norm, expand, swish, project, residual), 7 for attention, 9 for the
# convolution module, 1 for the post-norm.
HIDDEN_TENSORS_PER_BLOCK = 39
# content scores, skewed position scores, softmax probabilities
SCORE_MAPS_PER_BLOCK = 3


@dataclass
class MemoryEstimate:
    n: int
    attention_elements: int
    hidden_elements: int

    @property
    def peak_elements(self) -> int:
        return self.attention_elements + self.hidden_elements

    @property
    def dominated_by(self) -> str:
        return "attention" if self.attention_elements > self.hidden_elements else "hidden"


def memory_estimate(config: EncoderConfig, n: int) -> MemoryEstimate:
    """Live activation elements for an ``n``-frame input when every activation is kept."""
    if n < config.subsampling:
        raise ValueError(f"n must be >= {config.subsampling}")
    hidden = 0
    for t, f, _, c in _stem_shape(config, n):
        hidden += 2 * t * f * c
    length = _stem_shape(config, n)[-1][0]
    hidden += length * config.stages[0].dim
    attention = 0
    for _, bc in config.block_configs():
        variant = bc.attention_variant
        attention += SCORE_MAPS_PER_BLOCK * score_map_elements(length, bc.heads, variant)
        hidden += HIDDEN_TENSORS_PER_BLOCK * length * bc.d_in
        if bc.downsample != "none":
            length = _ceil_div(length, 2)
    return MemoryEstimate(n, attention, hidden)


def memory_sweep(config: EncoderConfig, lengths: Iterable[int]) -> list[MemoryEstimate]:
    return [memory_estimate(config, n) for n in lengths]


def memory_crossover(a: EncoderConfig, b: EncoderConfig, lengths: Sequence[int]) -> int | None:
    """First length at which ``a`` needs more activation memory than ``b`` (None if never)."""
    for n in lengths:
        if memory_estimate(a, n).peak_elements > memory_estimate(b, n).peak_elements:
            return n
    return None
