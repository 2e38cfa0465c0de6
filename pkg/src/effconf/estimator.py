"""scikit-learn style wrapper: fit a CTC encoder on variable-length feature sequences."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .autodiff import DTensor
from .ctc import greedy_decode
from .encoder import EncoderConfig, StageConfig, build
from .errors import DimensionError
from .toy import TrainConfig, token_accuracy, train_step


def check_sequences(X, n_features: int | None = None, min_length: int = 1) -> list[np.ndarray]:
    """Validate a batch of ``[T_i, F]`` feature matrices and return float64 copies."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise DimensionError("X must be a sequence of 2-D feature arrays")
    if len(X) == 0:
        raise DimensionError("X is empty")
    out = []
    for i, x in enumerate(X):
        arr = np.asarray(x, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionError(f"X[{i}] must be 2-D [frames, features], got shape {arr.shape}")
        if n_features is not None and arr.shape[1] != n_features:
            raise DimensionError(f"X[{i}] has {arr.shape[1]} features, expected {n_features}")
        if arr.shape[0] < min_length:
            raise DimensionError(f"X[{i}] has {arr.shape[0]} frames, need at least {min_length}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"X[{i}] contains NaN or infinity")
        out.append(arr)
    widths = {a.shape[1] for a in out}
    if len(widths) > 1:
        raise DimensionError(f"all sequences need the same feature width, got {sorted(widths)}")
    return out


def check_label_sequences(y, n_samples: int) -> list[list[int]]:
    """Label sequences of positive integers (0 is reserved for blank)."""
    if len(y) != n_samples:
        raise DimensionError(f"got {n_samples} inputs but {len(y)} label sequences")
    out = []
    for i, lab in enumerate(y):
        seq = [int(c) for c in lab]
        if any(c < 1 for c in seq):
            raise ValueError(f"y[{i}] has labels < 1; index 0 is the blank")
        out.append(seq)
    return out


class EfficientConformerCTC(BaseEstimator):
    """Three-stage downsampling encoder with a CTC head, trained by clipped gradient descent.

    ``X`` is a list of ``[frames, features]`` arrays, ``y`` a list of label
    sequences over ``1..n_classes-1``.
    """

    def __init__(self, dims=(32, 48, 64), blocks=(2, 2, 2), heads=4, group_sizes=(3, 1, 1),
                 conv_kernel=15, n_classes=None, steps=500, batch_size=8, lr=0.1, clip_norm=1.0,
                 momentum=0.0, random_state=0):
        self.dims = dims
        self.blocks = blocks
        self.heads = heads
        self.group_sizes = group_sizes
        self.conv_kernel = conv_kernel
        self.n_classes = n_classes
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.clip_norm = clip_norm
        self.momentum = momentum
        self.random_state = random_state

    def _encoder_config(self, n_features: int, n_classes: int) -> EncoderConfig:
        stages = tuple(
            StageConfig(blocks=b, dim=d, heads=self.heads, conv_kernel=self.conv_kernel,
                        att_group_size=g, downsample_at_end=i < 2)
            for i, (b, d, g) in enumerate(zip(self.blocks, self.dims, self.group_sizes))
        )
        return EncoderConfig(arch="efficient", stages=stages, input_features=n_features,
                             output_vocab=n_classes, name="estimator")

    def fit(self, X, y):
        seqs = check_sequences(X, min_length=8)
        labels = check_label_sequences(y, len(seqs))
        n_classes = self.n_classes or max((max(l, default=0) for l in labels), default=0) + 1
        if any(c >= n_classes for l in labels for c in l):
            raise ValueError(f"labels must be < n_classes={n_classes}")
        self.n_features_in_ = seqs[0].shape[1]
        self.n_classes_ = n_classes
        self.config_ = self._encoder_config(self.n_features_in_, n_classes)
        self.model_ = build(self.config_, self.random_state)
        cfg = TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                          clip_norm=self.clip_norm, momentum=self.momentum, seed=self.random_state)
        params = self.model_.parameters()
        velocity = [np.zeros_like(p.data) for p in params] if self.momentum > 0 else None
        rng = np.random.default_rng(self.random_state)
        self.loss_curve_ = []
        for _ in range(self.steps):
            pick = rng.choice(len(seqs), size=min(self.batch_size, len(seqs)), replace=False)
            batch = [(seqs[i], labels[i]) for i in pick]
            self.loss_curve_.append(train_step(self.model_, params, batch, cfg, velocity))
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before using this estimator")

    def predict_log_proba(self, X) -> list[np.ndarray]:
        self._check_fitted()
        seqs = check_sequences(X, self.n_features_in_, min_length=8)
        with ad.no_grad():
            return [self.model_(DTensor(x)).log_probs.data for x in seqs]

    def transform(self, X) -> list[np.ndarray]:
        """Encoder outputs ``[ceil(T/8), d_last]`` per sequence."""
        self._check_fitted()
        seqs = check_sequences(X, self.n_features_in_, min_length=8)
        with ad.no_grad():
            return [self.model_(DTensor(x)).sequence.data for x in seqs]

    def predict(self, X) -> list[list[int]]:
        return [greedy_decode(lp) for lp in self.predict_log_proba(X)]

    def score(self, X, y) -> float:
        """Greedy token accuracy: 1 - edit distance / reference length."""
        hyps = self.predict(X)
        return token_accuracy(hyps, check_label_sequences(y, len(hyps)))
