"""Progressively downsampled and baseline Conformer encoders, presets, and SpecAugment."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .attention import AttentionVariant, RelPosTable, sinusoidal_table, table_length_needed
from .autodiff import DTensor
from .blocks import BlockConfig, BlockParams, Linear, conformer_block_forward, named_tensors, _uniform, _zeros
from .errors import ConfigError, DimensionError, InputTooShortError


@dataclass(frozen=True)
class StageConfig:
    blocks: int
    dim: int
    heads: int
    conv_kernel: int = 15
    att_group_size: int = 1
    att_window: int | None = None
    downsample_at_end: bool = False
    downsample_method: str = "conv"  # conv | attention
    att_type: str = "relative"  # relative | linear

    def __post_init__(self):
        if self.blocks < 1:
            raise ConfigError(f"a stage needs at least one block, got {self.blocks}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"stage dim {self.dim} is not divisible by {self.heads} heads")
        if self.dim % 2:
            raise ConfigError(f"stage dim must be even for sinusoidal encodings, got {self.dim}")
        if self.att_group_size < 1:
            raise ConfigError(f"att_group_size must be >= 1, got {self.att_group_size}")
        if self.att_window is not None and self.att_window < 1:
            raise ConfigError(f"att_window must be >= 1, got {self.att_window}")
        if self.downsample_method not in ("conv", "attention"):
            raise ConfigError(f"downsample_method must be conv|attention, got {self.downsample_method!r}")
        if self.att_type not in ("relative", "linear"):
            raise ConfigError(f"att_type must be relative|linear, got {self.att_type!r}")
        if self.conv_kernel % 2 == 0:
            raise ConfigError(f"conv_kernel must be odd, got {self.conv_kernel}")

    @property
    def variant(self) -> AttentionVariant:
        if self.att_type == "linear":
            return AttentionVariant.linear()
        if self.att_window is not None:
            return AttentionVariant.local(self.att_window)
        if self.att_group_size > 1:
            return AttentionVariant.grouped(self.att_group_size)
        return AttentionVariant.regular()


@dataclass(frozen=True)
class EncoderConfig:
    arch: str  # conformer | efficient
    stages: tuple[StageConfig, ...]
    input_features: int = 80
    stem_channels: int | None = None
    output_vocab: int = 256
    ffn_expansion: int = 4
    dropout: float = 0.0
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.arch not in ("conformer", "efficient"):
            raise ConfigError(f"arch must be conformer|efficient, got {self.arch!r}")
        if not self.stages:
            raise ConfigError("config needs at least one stage")
        if self.arch == "efficient":
            if len(self.stages) != 3:
                raise ConfigError(f"efficient arch needs exactly 3 stages, got {len(self.stages)}")
            flags = [s.downsample_at_end for s in self.stages]
            if flags != [True, True, False]:
                raise ConfigError(f"efficient arch downsamples at the end of stages 1 and 2 only, got {flags}")
        else:
            if any(s.downsample_at_end for s in self.stages):
                raise ConfigError("conformer arch does not downsample inside the encoder")
            dims = {s.dim for s in self.stages}
            if len(dims) != 1:
                raise ConfigError(f"conformer arch uses one constant dim, got {sorted(dims)}")
        if self.input_features < 1:
            raise ConfigError("input_features must be positive")
        if self.output_vocab < 0:
            raise ConfigError("output_vocab must be >= 0 (0 disables the CTC head)")

    @property
    def stem_layers(self) -> int:
        return 2 if self.arch == "conformer" else 1

    @property
    def subsampling(self) -> int:
        return 2 ** (self.stem_layers + sum(s.downsample_at_end for s in self.stages))

    @property
    def stem_out_channels(self) -> int:
        return self.stem_channels or self.stages[0].dim

    @property
    def d_model_out(self) -> int:
        return self.stages[-1].dim

    def block_configs(self) -> list[tuple[int, BlockConfig]]:
        """(stage index, BlockConfig) for every block in order."""
        out = []
        for si, st in enumerate(self.stages):
            for bi in range(st.blocks):
                last = bi == st.blocks - 1
                down = last and st.downsample_at_end
                d_out = self.stages[si + 1].dim if down else st.dim
                out.append((si, BlockConfig(
                    d_in=st.dim, d_out=d_out, heads=st.heads, conv_kernel=st.conv_kernel,
                    variant=st.variant, downsample=st.downsample_method if down else "none",
                    ffn_expansion=self.ffn_expansion, dropout=self.dropout,
                )))
        return out

    def output_length(self, t: int) -> int:
        n = t
        for _ in range(self.stem_layers + sum(s.downsample_at_end for s in self.stages)):
            n = -(-n // 2)
        return n

    # -- variant helpers ---------------------------------------------------
    def replace_stages(self, **per_stage) -> "EncoderConfig":
        """Return a copy with per-stage fields replaced; each kwarg is a sequence over stages."""
        stages = []
        for i, st in enumerate(self.stages):
            changes = {k: v[i] for k, v in per_stage.items()}
            stages.append(dataclasses.replace(st, **changes))
        return dataclasses.replace(self, stages=tuple(stages))

    def with_group_sizes(self, sizes: Sequence[int]) -> "EncoderConfig":
        self._check_len(sizes, "group sizes")
        cfg = self.replace_stages(att_group_size=list(sizes))
        return dataclasses.replace(cfg, name=f"{self.name}[g={','.join(map(str, sizes))}]")

    def with_windows(self, windows: Sequence[int | None]) -> "EncoderConfig":
        self._check_len(windows, "attention windows")
        cfg = self.replace_stages(att_window=list(windows), att_group_size=[1] * len(self.stages))
        label = ",".join("-" if w is None else str(w) for w in windows)
        return dataclasses.replace(cfg, name=f"{self.name}[w={label}]")

    def with_attention(self, att_type: str) -> "EncoderConfig":
        cfg = self.replace_stages(att_type=[att_type] * len(self.stages),
                                  att_group_size=[1] * len(self.stages),
                                  att_window=[None] * len(self.stages))
        return dataclasses.replace(cfg, name=f"{self.name}[{att_type}]")

    def with_downsampling(self, method: str) -> "EncoderConfig":
        cfg = self.replace_stages(downsample_method=[method] * len(self.stages))
        return dataclasses.replace(cfg, name=f"{self.name}[down={method}]")

    def _check_len(self, values, what):
        if len(values) != len(self.stages):
            raise ConfigError(f"expected {len(self.stages)} {what}, got {len(values)}")


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def _efficient(name, blocks, dims, heads, groups, vocab=256, kernel=15) -> EncoderConfig:
    stages = tuple(
        StageConfig(blocks=b, dim=d, heads=h, conv_kernel=kernel, att_group_size=g,
                    downsample_at_end=i < 2)
        for i, (b, d, h, g) in enumerate(zip(blocks, dims, heads, groups))
    )
    return EncoderConfig(arch="efficient", stages=stages, output_vocab=vocab, name=name)


def _conformer(name, blocks, dim, heads, vocab=256, kernel=31) -> EncoderConfig:
    return EncoderConfig(arch="conformer", stages=(StageConfig(blocks, dim, heads, kernel),),
                         output_vocab=vocab, name=name)


PRESETS: dict[str, EncoderConfig] = {
    "conformer-ctc-s": _conformer("conformer-ctc-s", 16, 176, 4),
    "conformer-ctc-m": _conformer("conformer-ctc-m", 18, 256, 4),
    "conformer-ctc-l": _conformer("conformer-ctc-l", 18, 512, 8),
    "conformer-rnnt-s": _conformer("conformer-rnnt-s", 16, 144, 4, vocab=0),
    "effconf-ctc-s": _efficient("effconf-ctc-s", (5, 5, 5), (120, 168, 240), (4, 4, 4), (3, 1, 1)),
    "effconf-ctc-m": _efficient("effconf-ctc-m", (5, 6, 5), (180, 256, 360), (4, 4, 4), (3, 1, 1)),
    "effconf-ctc-l": _efficient("effconf-ctc-l", (5, 6, 5), (360, 512, 720), (8, 8, 8), (3, 1, 1)),
    "effconf-rnnt-s": _efficient("effconf-rnnt-s", (5, 5, 5), (100, 140, 200), (4, 4, 4), (3, 1, 1), vocab=0),
}


def get_preset(name: str) -> EncoderConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}") from None


def miniature_config(dims=(8, 12, 16), blocks=(1, 1, 1), heads=(2, 2, 2), groups=(1, 1, 1),
                     kernel: int = 3, vocab: int = 5, input_features: int = 8) -> EncoderConfig:
    """Tiny efficient encoder used by gradient checks and the toy task."""
    stages = tuple(
        StageConfig(blocks=b, dim=d, heads=h, conv_kernel=kernel, att_group_size=g, downsample_at_end=i < 2)
        for i, (b, d, h, g) in enumerate(zip(blocks, dims, heads, groups))
    )
    return EncoderConfig(arch="efficient", stages=stages, input_features=input_features,
                         output_vocab=vocab, name="miniature")


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class StemParams:
    convs: list  # list of (weight [3, 3, c_in, c_out], bias [c_out])
    proj: Linear


@dataclass
class EncodedBatch:
    sequence: DTensor
    out_length: int
    log_probs: DTensor | None


@dataclass
class EncoderModel:
    config: EncoderConfig
    stem: StemParams
    blocks: list  # list of (stage index, BlockConfig, BlockParams)
    head: Linear | None
    _tables: dict = field(default_factory=dict, repr=False)

    def named_parameters(self) -> Iterator[tuple[str, DTensor]]:
        yield from named_tensors(self.stem, "stem")
        for i, (_, _, bp) in enumerate(self.blocks):
            yield from named_tensors(bp, f"block{i}")
        if self.head is not None:
            yield from named_tensors(self.head, "head")

    def parameters(self) -> list[DTensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return int(np.sum([t.size for t in self.parameters()]))

    def table(self, stage: int, n_needed: int) -> RelPosTable:
        """Relative position table for a stage, grown lazily to the longest length seen."""
        tab = self._tables.get(stage)
        if tab is None or tab.n_max < n_needed:
            size = max(n_needed, tab.n_max * 2 if tab is not None else 64)
            tab = sinusoidal_table(size, self.config.stages[stage].dim)
            self._tables[stage] = tab
        return tab

    def forward(self, features: DTensor, in_length: int | None = None,
                rng: np.random.Generator | None = None) -> EncodedBatch:
        return forward(self, features, in_length, rng)

    __call__ = forward


def build(config: EncoderConfig, seed: int = 0) -> EncoderModel:
    """Deterministically initialise an encoder from ``seed``."""
    if not isinstance(config, EncoderConfig):
        raise ConfigError(f"expected an EncoderConfig, got {type(config).__name__}")
    rng = np.random.default_rng(seed)
    c = config.stem_out_channels
    convs = []
    c_in = 1
    for _ in range(config.stem_layers):
        convs.append((_uniform(rng, 9 * c_in, (3, 3, c_in, c)), _zeros(c)))
        c_in = c
    f_out = config.input_features
    for _ in range(config.stem_layers):
        f_out = -(-f_out // 2)
    stem = StemParams(convs, Linear.init(f_out * c, config.stages[0].dim, rng))
    blocks = [(si, bc, BlockParams.init(bc, rng)) for si, bc in config.block_configs()]
    head = Linear.init(config.d_model_out, config.output_vocab, rng) if config.output_vocab else None
    return EncoderModel(config, stem, blocks, head)


def stem_forward(x: DTensor, stem: StemParams) -> DTensor:
    h = ad.reshape(x, x.shape + (1,))
    for w, b in stem.convs:
        h = ad.swish(ad.conv2d(h, w, b, stride=2))
    t, f, c = h.shape
    return stem.proj(ad.reshape(h, (t, f * c)))


def forward(model: EncoderModel, features: DTensor, in_length: int | None = None,
            rng: np.random.Generator | None = None) -> EncodedBatch:
    """Encode one utterance ``[t, input_features]`` and apply the CTC head."""
    cfg = model.config
    if not isinstance(features, DTensor):
        features = DTensor(features)
    if features.ndim != 2 or features.shape[1] != cfg.input_features:
        raise DimensionError(f"features must be [t, {cfg.input_features}], got {features.shape}")
    t = features.shape[0] if in_length is None else int(in_length)
    if t > features.shape[0]:
        raise DimensionError(f"in_length {t} exceeds the {features.shape[0]} frames provided")
    if t < cfg.subsampling:
        raise InputTooShortError(f"need at least {cfg.subsampling} frames, got {t}")
    if t < features.shape[0]:
        features = ad.slice_axis(features, 0, 0, t)

    x = stem_forward(features, model.stem)
    for si, bc, bp in model.blocks:
        variant = bc.attention_variant
        table = None
        if variant.kind != "linear":
            table = model.table(si, table_length_needed(x.shape[0], variant))
        x = conformer_block_forward(x, bp, bc, table, rng)

    log_probs = ad.log_softmax(model.head(x), -1) if model.head is not None else None
    return EncodedBatch(x, x.shape[0], log_probs)


# ---------------------------------------------------------------------------
# SpecAugment
# ---------------------------------------------------------------------------


def spec_augment(features: DTensor, rng: np.random.Generator, F: int = 27, n_freq_masks: int = 2,
                 n_time_masks: int = 5, p_S: float = 0.05) -> DTensor:
    """Zero random frequency bands (width ~ U{0..F}) and time spans (width ~ U{0..floor(p_S*t)})."""
    x = np.array(features.data if isinstance(features, DTensor) else features, dtype=np.float64)
    t, f = x.shape
    for _ in range(n_freq_masks):
        width = int(rng.integers(0, min(F, f) + 1))
        start = int(rng.integers(0, f - width + 1))
        x[:, start:start + width] = 0.0
    t_max = int(np.floor(p_S * t))
    for _ in range(n_time_masks):
        width = int(rng.integers(0, t_max + 1))
        start = int(rng.integers(0, t - width + 1))
        x[start:start + width, :] = 0.0
    return DTensor(x)
