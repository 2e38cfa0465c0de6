"""Conformer building blocks: macaron feed-forward, convolution module,
convolution / attention downsampling, and the full block with post-norm."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, AttentionVariant, RelPosTable, mhsa
from .autodiff import DTensor
from .errors import ConfigError, DimensionError


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> DTensor:
    bound = 1.0 / math.sqrt(fan_in)
    return DTensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _zeros(shape) -> DTensor:
    return DTensor(np.zeros(shape), requires_grad=True)


@dataclass
class Linear:
    weight: DTensor  # [d_in, d_out]
    bias: DTensor

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator) -> "Linear":
        return cls(_uniform(rng, d_in, (d_in, d_out)), _zeros(d_out))

    def __call__(self, x: DTensor) -> DTensor:
        return ad.linear(x, self.weight, self.bias)


@dataclass
class LayerNorm:
    gamma: DTensor
    beta: DTensor

    @classmethod
    def init(cls, d: int) -> "LayerNorm":
        return cls(DTensor(np.ones(d), requires_grad=True), _zeros(d))

    def __call__(self, x: DTensor) -> DTensor:
        return ad.layer_norm(x, self.gamma, self.beta)


@dataclass
class FFNParams:
    norm: LayerNorm
    lin1: Linear
    lin2: Linear

    @classmethod
    def init(cls, d: int, expansion: int, rng: np.random.Generator) -> "FFNParams":
        return cls(LayerNorm.init(d), Linear.init(d, expansion * d, rng), Linear.init(expansion * d, d, rng))


@dataclass
class ConvModuleParams:
    """Pointwise -> GLU -> depthwise -> LN -> swish -> pointwise, with optional
    residual projection when the module changes width."""

    norm: LayerNorm
    pw1: Linear  # d_in -> 2 * d_out
    dw_weight: DTensor  # [k, d_out]
    dw_bias: DTensor
    norm2: LayerNorm
    pw2: Linear  # d_out -> d_out
    res_proj: Linear | None = None  # d_in -> d_out

    @classmethod
    def init(cls, d_in: int, d_out: int, kernel: int, rng: np.random.Generator) -> "ConvModuleParams":
        if kernel % 2 == 0:
            raise ConfigError(f"depthwise kernel size must be odd, got {kernel}")
        return cls(
            norm=LayerNorm.init(d_in),
            pw1=Linear.init(d_in, 2 * d_out, rng),
            dw_weight=_uniform(rng, kernel, (kernel, d_out)),
            dw_bias=_zeros(d_out),
            norm2=LayerNorm.init(d_out),
            pw2=Linear.init(d_out, d_out, rng),
            res_proj=Linear.init(d_in, d_out, rng) if d_in != d_out else None,
        )

    @property
    def kernel(self) -> int:
        return self.dw_weight.shape[0]


@dataclass(frozen=True)
class BlockConfig:
    d_in: int
    d_out: int
    heads: int
    conv_kernel: int
    variant: AttentionVariant = field(default_factory=AttentionVariant.regular)
    downsample: str = "none"  # none | conv | attention
    ffn_expansion: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.downsample not in ("none", "conv", "attention"):
            raise ConfigError(f"downsample must be none|conv|attention, got {self.downsample!r}")
        if self.downsample == "none" and self.d_in != self.d_out:
            raise ConfigError(f"a non-downsampling block must keep its width ({self.d_in} != {self.d_out})")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.d_in % self.heads:
            raise ConfigError(f"block dim {self.d_in} not divisible by {self.heads} heads")
        if self.downsample == "conv" and 2 * self.d_out < self.d_in:
            raise ConfigError("conv downsampling needs 2 * d_out >= d_in")

    @property
    def attention_variant(self) -> AttentionVariant:
        """The kernel actually run: attention downsampling forces stride 2."""
        if self.downsample == "attention":
            return AttentionVariant.strided(2)
        return self.variant


@dataclass
class BlockParams:
    ffn1: FFNParams
    attn_norm: LayerNorm
    attn: AttentionParams
    conv: ConvModuleParams
    ffn2: FFNParams
    post_norm: LayerNorm

    @classmethod
    def init(cls, cfg: BlockConfig, rng: np.random.Generator) -> "BlockParams":
        d_in, d_out = cfg.d_in, cfg.d_out
        return cls(
            ffn1=FFNParams.init(d_in, cfg.ffn_expansion, rng),
            attn_norm=LayerNorm.init(d_in),
            attn=AttentionParams.init(d_in, cfg.heads, rng),
            conv=ConvModuleParams.init(d_in, d_out, cfg.conv_kernel, rng),
            ffn2=FFNParams.init(d_out, cfg.ffn_expansion, rng),
            post_norm=LayerNorm.init(d_out),
        )


def named_tensors(obj, prefix: str = "") -> Iterator[tuple[str, DTensor]]:
    """Walk dataclasses / lists / AttentionParams and yield every tensor with a dotted name."""
    if obj is None:
        return
    if isinstance(obj, DTensor):
        yield prefix, obj
    elif isinstance(obj, AttentionParams):
        for name, t in obj.tensors():
            yield f"{prefix}.{name}" if prefix else name, t
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from named_tensors(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from named_tensors(item, f"{prefix}.{i}" if prefix else str(i))


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def ffn_forward(x: DTensor, p: FFNParams, dropout: float = 0.0, rng=None) -> DTensor:
    """Half-step residual feed-forward: ``x + 0.5 * W2 swish(W1 LN(x))``."""
    h = p.lin2(ad.dropout(ad.swish(p.lin1(p.norm(x))), dropout, rng))
    return ad.add(x, ad.scale(ad.dropout(h, dropout, rng), 0.5))


def _conv_main(x: DTensor, p: ConvModuleParams, stride: int) -> DTensor:
    h = ad.glu(p.pw1(p.norm(x)))
    h = ad.conv1d(h, p.dw_weight, p.dw_bias, stride=stride, mode="depthwise")
    return p.pw2(ad.swish(p.norm2(h)))


def conv_module_forward(x: DTensor, p: ConvModuleParams, dropout: float = 0.0, rng=None) -> DTensor:
    """Conformer convolution module (layer norm in place of batch norm).

    When the module widens the features, the residual goes through ``res_proj``.
    """
    res = p.res_proj(x) if p.res_proj is not None else x
    return ad.add(res, ad.dropout(_conv_main(x, p, 1), dropout, rng))


def conv_downsample_forward(x: DTensor, p: ConvModuleParams, dropout: float = 0.0, rng=None) -> DTensor:
    """Strided depthwise convolution module plus an average-pooled, projected residual."""
    res = ad.avg_pool(x, 2)
    if p.res_proj is not None:
        res = p.res_proj(res)
    return ad.add(res, ad.dropout(_conv_main(x, p, 2), dropout, rng))


def attention_module_forward(x: DTensor, norm: LayerNorm, params: AttentionParams, table: RelPosTable | None,
                             variant: AttentionVariant, dropout: float = 0.0, rng=None) -> DTensor:
    h = ad.dropout(mhsa(norm(x), params, table, variant), dropout, rng)
    res = x
    if variant.kind == "strided" and variant.size > 1:
        res = ad.avg_pool(x, variant.size)
    return ad.add(res, h)


def attention_downsample_forward(x: DTensor, norm: LayerNorm, params: AttentionParams,
                                 table: RelPosTable, dropout: float = 0.0, rng=None) -> DTensor:
    """Stride-2 relative attention with an average-pooling residual; keeps the width."""
    return attention_module_forward(x, norm, params, table, AttentionVariant.strided(2), dropout, rng)


def conformer_block_forward(x: DTensor, p: BlockParams, cfg: BlockConfig, table: RelPosTable | None,
                            rng: np.random.Generator | None = None) -> DTensor:
    """FFN -> MHSA -> conv module -> FFN -> post layer norm.

    Length halves (ceil) iff ``cfg.downsample`` is set; width becomes ``d_out``.
    """
    if x.ndim != 2 or x.shape[1] != cfg.d_in:
        raise DimensionError(f"block expects [n, {cfg.d_in}] input, got {x.shape}")
    drop = cfg.dropout
    x = ffn_forward(x, p.ffn1, drop, rng)
    x = attention_module_forward(x, p.attn_norm, p.attn, table, cfg.attention_variant, drop, rng)
    if cfg.downsample == "conv":
        x = conv_downsample_forward(x, p.conv, drop, rng)
    else:
        x = conv_module_forward(x, p.conv, drop, rng)
    x = ffn_forward(x, p.ffn2, drop, rng)
    return p.post_norm(x)
