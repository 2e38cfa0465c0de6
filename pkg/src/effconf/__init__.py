"""Progressively downsampled Conformer encoders on a small numpy autodiff engine.

Modules:
    autodiff   reverse-mode differentiation over fp64 arrays
    attention  relative, strided, grouped, local and linear multi-head attention
    blocks     conformer blocks with convolution / attention downsampling
    encoder    stage-wise encoders, presets, SpecAugment
    profiler   analytic MAdds, parameter and activation-memory counts
    ctc        CTC loss, greedy decoding, brute-force oracle
"""

from .attention import AttentionParams, AttentionVariant, mhsa, sinusoidal_table
from .autodiff import DTensor, no_grad
from .ctc import CtcInstance, CtcResult, ctc_brute_force, ctc_loss, greedy_decode
from .encoder import EncoderConfig, StageConfig, build, forward, get_preset, PRESETS
from .errors import (ConfigError, ContractError, DimensionError, DivergenceError, EffConfError,
                     InputTooShortError, RefusalError)
from .profiler import MAddsReport, count_madds, count_params, memory_estimate

__version__ = "0.1.0"
