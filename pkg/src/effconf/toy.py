"""Synthetic CTC task and a small gradient-descent trainer.

Each token owns a fixed 80-bin sinusoid template; an utterance is a run of
noisy template frames per token, followed by noise-only "silence" frames.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DTensor
from .ctc import batch_ctc_loss, greedy_decode, min_frames
from .encoder import EncoderConfig, EncoderModel, StageConfig, build
from .errors import ConfigError, DivergenceError


@dataclass(frozen=True)
class ToyTask:
    vocab: int = 8  # real tokens; blank is extra
    min_tokens: int = 3
    max_tokens: int = 8
    min_frames_per_token: int = 8
    max_frames_per_token: int = 16
    n_features: int = 80
    noise: float = 0.3
    subsampling: int = 8
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("need 1 <= min_tokens <= max_tokens")
        if not 1 <= self.min_frames_per_token <= self.max_frames_per_token:
            raise ConfigError("need 1 <= min_frames_per_token <= max_frames_per_token")
        if self.vocab < 1 or self.noise < 0:
            raise ConfigError("vocab must be positive and noise non-negative")

    @property
    def n_classes(self) -> int:
        return self.vocab + 1

    def templates(self) -> np.ndarray:
        """[vocab, n_features]; row k-1 belongs to token k."""
        rng = np.random.default_rng([self.seed, 7])
        bins = np.arange(self.n_features)
        freq = rng.uniform(1.0, 8.0, self.vocab)
        phase = rng.uniform(0.0, 2 * np.pi, self.vocab)
        return np.sin(2 * np.pi * freq[:, None] * bins[None, :] / self.n_features + phase[:, None])

    def frames_needed(self, labels: Sequence[int]) -> int:
        """Input frames so that the encoder output has at least ``2L + 1`` frames."""
        return self.subsampling * max(2 * len(labels) + 1, min_frames(labels))

    def sample(self, rng: np.random.Generator, templates: np.ndarray | None = None):
        """Return ``(features [T, n_features], labels)``."""
        tpl = self.templates() if templates is None else templates
        L = int(rng.integers(self.min_tokens, self.max_tokens + 1))
        labels = [int(c) for c in rng.integers(1, self.vocab + 1, size=L)]
        durations = rng.integers(self.min_frames_per_token, self.max_frames_per_token + 1, size=L)
        clean = np.repeat(tpl[np.array(labels) - 1], durations, axis=0)
        T = max(len(clean), self.frames_needed(labels))
        feats = np.zeros((T, self.n_features))
        feats[:len(clean)] = clean
        feats += self.noise * rng.normal(size=feats.shape)
        return feats, labels

    def batch(self, rng: np.random.Generator, size: int):
        tpl = self.templates()
        return [self.sample(rng, tpl) for _ in range(size)]


def edit_distance(a: Sequence[int], b: Sequence[int]) -> int:
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def token_accuracy(hyps: Sequence[Sequence[int]], refs: Sequence[Sequence[int]]) -> float:
    """``1 - total edit distance / total reference length`` (can go negative)."""
    errors = sum(edit_distance(h, r) for h, r in zip(hyps, refs))
    return 1.0 - errors / max(1, sum(len(r) for r in refs))


def toy_model_config(task: ToyTask, dims=(32, 48, 64), blocks=(2, 2, 2), heads=4,
                     groups=(3, 1, 1), kernel: int = 15) -> EncoderConfig:
    stages = tuple(
        StageConfig(blocks=b, dim=d, heads=heads, conv_kernel=kernel, att_group_size=g,
                    downsample_at_end=i < 2)
        for i, (b, d, g) in enumerate(zip(blocks, dims, groups))
    )
    return EncoderConfig(arch="efficient", stages=stages, input_features=task.n_features,
                         output_vocab=task.n_classes, name="toy")


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 8
    lr: float = 0.1
    clip_norm: float = 1.0
    momentum: float = 0.0
    log_every: int = 50
    eval_size: int = 32
    seed: int = 0
    target_accuracy: float | None = None  # stop at the first evaluation reaching this


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    final_accuracy: float = 0.0
    seconds: float = 0.0
    steps_run: int = 0
    model: EncoderModel | None = field(default=None, repr=False)


def clip_gradients(params: Sequence[DTensor], max_norm: float) -> float:
    """Scale all gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(np.sum([np.sum(p.grad ** 2) for p in params if p.grad is not None])))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return norm


def decode_batch(model: EncoderModel, feats: Sequence[np.ndarray]) -> list[list[int]]:
    with ad.no_grad():
        return [greedy_decode(model(DTensor(f)).log_probs) for f in feats]


def evaluate(model: EncoderModel, data) -> float:
    feats, refs = zip(*data)
    return token_accuracy(decode_batch(model, feats), refs)


def train_step(model: EncoderModel, params: Sequence[DTensor], batch, cfg: TrainConfig,
               velocity: list[np.ndarray] | None = None) -> float:
    ad.zero_grad(params)
    log_probs = [model(DTensor(f)).log_probs for f, _ in batch]
    loss = batch_ctc_loss(log_probs, [lab for _, lab in batch])
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite training loss {value}")
    loss.backward()
    clip_gradients(params, cfg.clip_norm)
    for i, p in enumerate(params):
        if p.grad is None:
            continue
        step = p.grad
        if velocity is not None:
            velocity[i] = cfg.momentum * velocity[i] + p.grad
            step = velocity[i]
        p.data -= cfg.lr * step
    return value


def train_toy(task: ToyTask | None = None, cfg: TrainConfig | None = None,
              model_config: EncoderConfig | None = None,
              log: Callable[[dict], None] | None = None) -> TrainResult:
    """Train on freshly sampled batches; evaluate on a fixed held-out set every ``log_every`` steps."""
    task = task or ToyTask(seed=cfg.seed if cfg else 0)
    cfg = cfg or TrainConfig()
    model = build(model_config or toy_model_config(task), cfg.seed)
    params = model.parameters()
    velocity = [np.zeros_like(p.data) for p in params] if cfg.momentum > 0 else None
    train_rng = np.random.default_rng([cfg.seed, 1])
    held_out = task.batch(np.random.default_rng([cfg.seed, 2]), cfg.eval_size)
    result = TrainResult(model=model)
    start = time.perf_counter()
    losses = []

    def record(step):
        entry = {"step": step, "loss": float(np.mean(losses)) if losses else None,
                 "accuracy": evaluate(model, held_out)}
        result.history.append(entry)
        losses.clear()
        if log is not None:
            log(entry)

    record(0)
    for step in range(1, cfg.steps + 1):
        losses.append(train_step(model, params, task.batch(train_rng, cfg.batch_size), cfg, velocity))
        result.steps_run = step
        if step % cfg.log_every == 0 or step == cfg.steps:
            record(step)
            if cfg.target_accuracy is not None and result.history[-1]["accuracy"] >= cfg.target_accuracy:
                break
    result.final_accuracy = result.history[-1]["accuracy"]
    result.seconds = time.perf_counter() - start
    return result
