"""scikit-learn style wrappers for notebook use.

``PhaseMemLM`` trains and scores a byte-level model; ``PowerLawRegressor``
fits log-log scaling lines.  Both follow the ``fit``/``score``/``get_params``
conventions so ``sklearn.base.clone`` and parameter grids work.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import analysis
from .exceptions import InputError
from .model import ModelConfig, PhaseLM
from .train import Corpus, SamplerConfig, TrainConfig, Trainer, decode, encode, generate, lm_loss


def _tokens(X):
    if isinstance(X, str):
        return np.asarray(encode(X), dtype=np.int64)
    if isinstance(X, (bytes, bytearray)):
        return np.frombuffer(bytes(X), dtype=np.uint8).astype(np.int64)
    return np.asarray(X, dtype=np.int64).ravel()


class PhaseMemLM(BaseEstimator):
    """Byte-level language model estimator (``arch='pam'`` complex, ``'sam'`` real)."""

    def __init__(self, arch="pam", dim=64, n_layers=4, n_heads=2, head_dim=16, expansion=3,
                 lr=3e-5, warmup_steps=500, batch_size=8, seq_len=128, max_steps=2000,
                 val_fraction=0.1, seed=0):
        self.arch = arch
        self.dim = dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.expansion = expansion
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.max_steps = max_steps
        self.val_fraction = val_fraction
        self.seed = seed

    def _model_config(self):
        return ModelConfig(dim=self.dim, n_layers=self.n_layers, n_heads=self.n_heads, head_dim=self.head_dim,
                           expansion=self.expansion, arithmetic="complex" if self.arch == "pam" else "real",
                           seed=self.seed)

    def fit(self, X, y=None):
        """Train on a text, bytes or token-id stream ``X``."""
        corpus = Corpus.from_tokens(_tokens(X), self.val_fraction)
        tcfg = TrainConfig(lr=self.lr, warmup_steps=self.warmup_steps, batch_size=self.batch_size,
                           seq_len=self.seq_len, max_steps=self.max_steps, seed=self.seed,
                           val_fraction=self.val_fraction)
        self.model_ = PhaseLM(self._model_config())
        self.trainer_ = Trainer(self.model_, corpus, tcfg)
        self.history_ = self.trainer_.run()
        return self

    def loss(self, X):
        """Token-averaged next-token loss in nats over a held-out stream."""
        check_is_fitted(self, "model_")
        tokens = torch.as_tensor(_tokens(X))
        if len(tokens) < 2:
            raise InputError("scoring needs at least 2 tokens")
        self.model_.eval()
        total, count = 0.0, 0
        with torch.no_grad():
            for lo in range(0, len(tokens) - 1, self.seq_len):
                chunk = tokens[lo:lo + self.seq_len + 1]
                total += float(lm_loss(self.model_, chunk[None])) * (len(chunk) - 1)
                count += len(chunk) - 1
        return total / count

    def score(self, X, y=None):
        """Negative loss, so that larger is better."""
        return -self.loss(X)

    def perplexity(self, X):
        return math.exp(self.loss(X))

    def generate(self, prompt, max_new_tokens=64, seed=0, **sampler):
        check_is_fitted(self, "model_")
        new = generate(self.model_, encode(prompt), SamplerConfig(max_new_tokens=max_new_tokens, **sampler), seed)
        return decode(new)


class PowerLawRegressor(RegressorMixin, BaseEstimator):
    """y = 10^b N^a fitted by OLS in log10-log10 space."""

    def __init__(self, space="loss"):
        self.space = space

    def fit(self, X, y, sample_sigma=None):
        n = np.asarray(X, dtype=np.float64).ravel()
        y = np.asarray(y, dtype=np.float64).ravel()
        s = np.zeros_like(y) if sample_sigma is None else np.asarray(sample_sigma, dtype=np.float64).ravel()
        self.fit_ = analysis.fit_power_law(list(zip(n, y, s)), self.space)
        self.coef_ = self.fit_.slope
        self.intercept_ = self.fit_.intercept
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_.predict(np.asarray(X, dtype=np.float64).ravel())

    def crossover(self, other):
        return analysis.fit_crossover(self.fit_, other.fit_)
