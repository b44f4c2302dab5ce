"""scikit-learn style wrappers over the quantizer and the toy trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import ModelConfig, PrecisionMap, forward, lm_logits
from .numerics import F8Kind, dequantize, fmax, quantize_with_absmax
from .train import TrainConfig, Trainer

__all__ = ["FP8Quantizer", "ToyLMTrainer", "ArrayCorpus"]


class FP8Quantizer(BaseEstimator, TransformerMixin):
    """Fake-quantize to FP8 with a tensor-level absmax scale learned in ``fit``.

    ``transform`` returns decoded values (what a consumer of the FP8 tensor
    sees). Inputs whose absmax exceeds the fitted one saturate at the
    format's largest finite value; refit to avoid clipping.
    """

    def __init__(self, kind: str = "e4m3"):
        self.kind = kind

    def _kind(self) -> F8Kind:
        return F8Kind.parse(self.kind)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32, ensure_2d=False, allow_nd=True)
        self.absmax_ = float(np.max(np.abs(X))) if X.size else 0.0
        self.scale_ = fmax(self._kind()) / self.absmax_ if self.absmax_ > 0 else 1.0
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else None
        return self

    def quantize(self, X):
        check_is_fitted(self, "scale_")
        X = check_array(X, dtype=np.float32, ensure_2d=False, allow_nd=True)
        return quantize_with_absmax(X, self._kind(), self.absmax_)

    def transform(self, X):
        return dequantize(self.quantize(X))

    def inverse_transform(self, X):
        # decoded values are already in input units
        return check_array(X, dtype=np.float32, ensure_2d=False, allow_nd=True)


class ArrayCorpus:
    """Serve fixed token sequences in order, cycling; validation uses the same rows."""

    def __init__(self, tokens: np.ndarray):
        self.tokens = tokens

    def batch(self, index: int, size: int, split: str = "train") -> np.ndarray:
        n = len(self.tokens)
        rows = [(index * size + i) % n for i in range(size)]
        return self.tokens[rows]


class ToyLMTrainer(BaseEstimator):
    """Train the toy decoder on integer token sequences.

    ``X`` has shape (n_sequences, seq_len + 1); ``predict`` returns greedy
    next-token predictions for every position of (n, seq_len) inputs.
    """

    def __init__(self, n_layers=2, d_model=64, d_ff=256, n_heads=4, n_kv_heads=4, vocab=512,
                 steps=200, micro_batch=2, lr=3e-3, warmup=20, precision="bf16", recompute="",
                 moments="f32", seed=1):
        self.n_layers = n_layers
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.n_kv_heads = n_kv_heads
        self.vocab = vocab
        self.steps = steps
        self.micro_batch = micro_batch
        self.lr = lr
        self.warmup = warmup
        self.precision = precision
        self.recompute = recompute
        self.moments = moments
        self.seed = seed

    def _check_tokens(self, X, extra: int):
        X = check_array(X, dtype=np.int64, ensure_min_features=1 + extra)
        if X.min() < 0 or X.max() >= self.vocab:
            raise ValueError(f"token ids must lie in [0, {self.vocab})")
        return X

    def fit(self, X, y=None):
        X = self._check_tokens(X, 1)
        cfg = ModelConfig(self.n_layers, self.d_model, self.d_ff, self.n_heads, self.n_kv_heads, self.vocab,
                          X.shape[1] - 1)
        tc = TrainConfig(steps=self.steps, micro_batch=self.micro_batch, lr=self.lr, warmup=self.warmup,
                         precision=self.precision, recompute=self.recompute, moments=self.moments,
                         seed=self.seed, eval_every=0)
        trainer = Trainer(cfg, tc, ArrayCorpus(X))
        trainer.run()
        self.config_ = cfg
        self.params_ = trainer.params
        self.history_ = [r["train_loss"] for r in trainer.rows]
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        X = self._check_tokens(X, 0)
        return np.argmax(lm_logits(self.config_, self.params_, X, PrecisionMap.parse(self.precision)), axis=-1)

    def score(self, X, y=None) -> float:
        """Negative mean next-token cross-entropy on (n, seq_len + 1) sequences."""
        check_is_fitted(self, "params_")
        X = self._check_tokens(X, 1)
        cfg = self.config_
        if X.shape[1] - 1 != cfg.seq_len:
            raise ValueError(f"expected sequences of length {cfg.seq_len + 1}, got {X.shape[1]}")
        loss, _ = forward(cfg, self.params_, X, frozenset(), PrecisionMap.parse(self.precision))
        return -float(loss)
