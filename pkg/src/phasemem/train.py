"""Byte-level data pipeline, AdamW training loop, evaluation and sampling."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .ccore import Tape, backward
from .exceptions import InputError, MetricUndefinedError, TrainingDivergedError

log = logging.getLogger(__name__)

TOKEN_MAGIC = b"PAMTOK1\0"
METRIC_FIELDS = ("step", "split", "loss_nats", "ppl", "lr", "grad_norm", "tokens_seen", "wallclock_s")


@dataclass
class TrainConfig:
    lr: float = 3e-5
    weight_decay: float = 0.01
    warmup_steps: int = 500
    schedule: str = "warmup_cosine"
    batch_size: int = 8
    seq_len: int = 512
    epochs: int = 10
    max_steps: int | None = None
    grad_clip: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    val_fraction: float = 0.1
    eval_batches: int | None = None
    eval_every: int | None = None
    log_every: int = 10
    checkpoint_every: int | None = None
    sample_every: int | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.seq_len < 1 or self.epochs < 1:
            raise ValueError("lr, batch_size, seq_len and epochs must be positive")
        if self.warmup_steps < 0 or self.grad_clip <= 0 or not 0 < self.val_fraction < 1:
            raise ValueError("warmup_steps >= 0, grad_clip > 0 and 0 < val_fraction < 1 required")
        if self.schedule != "warmup_cosine":
            raise ValueError(f"unknown schedule {self.schedule!r}")
        self.betas = tuple(self.betas)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class SamplerConfig:
    temperature: float = 1.0
    top_k: int = 50
    top_p: float = 0.9
    repetition_penalty: float = 1.2
    max_new_tokens: int = 64
    greedy: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0 (use greedy=True for argmax decoding)")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must lie in (0, 1]")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.repetition_penalty < 1:
            raise ValueError("repetition_penalty must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def encode(text):
    """Byte-level tokenizer: UTF-8 bytes are the token ids."""
    return list(text.encode("utf-8"))


def decode(tokens):
    return bytes(int(t) & 0xFF for t in tokens).decode("utf-8", errors="replace")


def write_tokens(path, tokens):
    """Write token ids in the pre-tokenized format (magic + little-endian int32)."""
    ids = np.asarray(tokens, dtype="<i4")
    with open(path, "wb") as fh:
        fh.write(TOKEN_MAGIC)
        fh.write(ids.tobytes())


def read_tokens(path):
    """Token ids from a raw byte file or a pre-tokenized file."""
    raw = Path(path).read_bytes()
    if raw.startswith(TOKEN_MAGIC):
        body = raw[len(TOKEN_MAGIC):]
        if len(body) % 4:
            raise InputError(f"{path}: pre-tokenized body is not a whole number of int32 ids")
        return np.frombuffer(body, dtype="<i4").astype(np.int64)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


@dataclass
class Corpus:
    """A token stream cut into a training prefix and a validation suffix."""

    tokens: np.ndarray
    boundary: int
    vocab_size: int = 256

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not 0 < self.boundary < len(self.tokens):
            raise InputError("corpus split must leave both train and validation nonempty")
        if self.tokens.min() < 0 or self.tokens.max() >= self.vocab_size:
            raise InputError(f"corpus holds token ids outside [0, {self.vocab_size})")

    @classmethod
    def from_tokens(cls, tokens, val_fraction=0.1, vocab_size=256):
        tokens = np.asarray(tokens, dtype=np.int64)
        boundary = len(tokens) - max(1, int(round(len(tokens) * val_fraction)))
        return cls(tokens, boundary, vocab_size)

    @classmethod
    def from_bytes(cls, data, val_fraction=0.1):
        return cls.from_tokens(np.frombuffer(bytes(data), dtype=np.uint8), val_fraction)

    @classmethod
    def from_file(cls, path, val_fraction=0.1, vocab_size=256):
        return cls.from_tokens(read_tokens(path), val_fraction, vocab_size)

    @property
    def train(self):
        return self.tokens[: self.boundary]

    @property
    def validation(self):
        return self.tokens[self.boundary:]

    def split(self, name):
        if name in ("train", "training"):
            return self.train
        if name in ("val", "validation"):
            return self.validation
        raise ValueError(f"unknown split {name!r}")

    def windows(self, split, seq_len):
        """Contiguous non-overlapping windows of ``seq_len + 1`` tokens."""
        data = self.split(split)
        n = len(data) // (seq_len + 1)
        if n == 0:
            raise InputError(f"{split} split ({len(data)} tokens) shorter than one window of {seq_len + 1}")
        return torch.from_numpy(data[: n * (seq_len + 1)].reshape(n, seq_len + 1).copy())


def epoch_order(seed, epoch, n):
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------


def lr_at(step, cfg, total_steps):
    """Linear warmup from 0 to ``cfg.lr``, then cosine decay to 0 at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(1, total_steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model, cfg):
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps,
                             weight_decay=cfg.weight_decay)


def lm_loss(model, batch):
    """Mean next-token cross-entropy (nats) over ``batch[..., T+1]``."""
    logits, _ = model(batch[..., :-1])
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), batch[..., 1:].reshape(-1))


def _first_bad_parameter(model, grads=None):
    for name, p in model.named_parameters():
        g = None if grads is None else grads.get(name)
        if not torch.isfinite(p).all() or (g is not None and not torch.isfinite(g).all()):
            return name
    return None


def train_step(model, batch, optimizer, cfg, step, total_steps):
    """One AdamW update.  Returns ``(loss_nats, grad_norm_before_clip)``."""
    model.train()
    tape = Tape().watch_module(model)
    loss = lm_loss(model, batch)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss at step {step}", step, _first_bad_parameter(model))
    grads = backward(tape, loss)
    for name, p in model.named_parameters():
        p.grad = grads[name]
    grad_norm = float(torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip))
    if not math.isfinite(grad_norm):
        raise TrainingDivergedError(f"non-finite gradient at step {step}", step,
                                    _first_bad_parameter(model, grads))
    lr = lr_at(step, cfg, total_steps)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return float(loss.detach()), grad_norm


@torch.no_grad()
def evaluate(model, corpus, split="validation", seq_len=128, batch_size=8, max_batches=None):
    """Token-averaged loss (nats) and perplexity over a split; parameters untouched."""
    was_training = model.training
    model.eval()
    windows = corpus.windows(split, seq_len)
    if max_batches is not None:
        windows = windows[: max_batches * batch_size]
    total, count = 0.0, 0
    for i in range(0, len(windows), batch_size):
        batch = windows[i:i + batch_size]
        n = batch[..., 1:].numel()
        total += float(lm_loss(model, batch)) * n
        count += n
    model.train(was_training)
    loss = total / count
    return loss, math.exp(loss)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def apply_repetition_penalty(logits, history, penalty):
    """Divide positive logits of seen tokens by ``penalty``, multiply negative ones."""
    if penalty == 1.0 or len(history) == 0:
        return logits
    logits = logits.clone()
    seen = torch.as_tensor(sorted(set(int(t) for t in history)), dtype=torch.long)
    vals = logits[seen]
    logits[seen] = torch.where(vals > 0, vals / penalty, vals * penalty)
    return logits


def filter_distribution(logits, history, scfg):
    """Sampling distribution after penalty, temperature, top-k and top-p.

    Tokens outside the surviving support get probability exactly 0.
    """
    logits = apply_repetition_penalty(logits.double(), history, scfg.repetition_penalty)
    logits = logits / scfg.temperature
    k = min(scfg.top_k, logits.shape[-1])
    top_vals, top_idx = torch.topk(logits, k)
    probs = torch.softmax(top_vals, dim=-1)
    cum = torch.cumsum(probs, dim=-1)
    # smallest prefix whose mass reaches top_p
    keep = int(torch.searchsorted(cum, torch.tensor([scfg.top_p], dtype=cum.dtype)).item()) + 1
    keep = min(keep, k)
    out = torch.zeros_like(logits)
    out[top_idx[:keep]] = probs[:keep] / probs[:keep].sum()
    return out


@torch.no_grad()
def generate(model, prompt, scfg=None, seed=0, on_step=None):
    """Autoregressive sampling on the recurrent path.  Returns the new token ids."""
    scfg = scfg or SamplerConfig()
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise InputError("generate needs a nonempty prompt")
    model.eval()
    gen = torch.Generator().manual_seed(int(seed))
    logits, states = model.forward_recurrent(torch.tensor(prompt))
    logits = logits[-1]
    history = list(prompt)
    out = []
    for _ in range(scfg.max_new_tokens):
        if scfg.greedy:
            nxt = int(torch.argmax(apply_repetition_penalty(logits, history, scfg.repetition_penalty)))
        else:
            probs = filter_distribution(logits, history, scfg)
            nxt = int(torch.multinomial(probs, 1, generator=gen))
        if on_step is not None:
            on_step(logits, history, nxt)
        out.append(nxt)
        history.append(nxt)
        logits, states = model.step(torch.tensor(nxt), states)
    return out


@dataclass(frozen=True)
class RepetitionMetrics:
    rep3: float
    rep4: float
    unique_ratio: float


def _rep(tokens, n):
    grams = [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]
    return 1.0 - len(set(grams)) / len(grams)


def repetition_metrics(tokens):
    """n-gram repetition rates (1 - distinct/total) and distinct-token ratio."""
    tokens = [int(t) for t in tokens]
    if len(tokens) < 4:
        raise MetricUndefinedError(f"repetition metrics need at least 4 tokens, got {len(tokens)}")
    return RepetitionMetrics(_rep(tokens, 3), _rep(tokens, 4), len(set(tokens)) / len(tokens))


# ---------------------------------------------------------------------------
# logs
# ---------------------------------------------------------------------------


class MetricsLog:
    """Append-only CSV of step metrics; '#' lines before the header echo the run config."""

    def __init__(self, path, run_config=None):
        self.path = Path(path)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_FIELDS)
        if fresh:
            if run_config is not None:
                self._fh.write("# config: " + json.dumps(run_config, sort_keys=True) + "\n")
            self._writer.writeheader()
            self._fh.flush()

    def write(self, **row):
        self._writer.writerow({k: row.get(k, "") for k in METRIC_FIELDS})
        self._fh.flush()

    def close(self):
        self._fh.close()


def read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


class GenerationLog:
    def __init__(self, path, scfg, seed):
        self.path = Path(path)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"# sampler {json.dumps(scfg.to_dict(), sort_keys=True)} seed={seed}\n")

    def write(self, step, prompt, text, metrics):
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"== step {step} rep3={metrics.rep3:.3f} rep4={metrics.rep4:.3f} "
                     f"unique={metrics.unique_ratio:.3f}\n{prompt}{text}\n")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class Trainer:
    """Owns the optimizer and the deterministic data order for one run.

    The data order is a function of (seed, epoch), so the step counter alone
    determines where training resumes.
    """

    model: torch.nn.Module
    corpus: Corpus
    cfg: TrainConfig = field(default_factory=TrainConfig)
    step: int = 0
    optimizer: torch.optim.Optimizer | None = None

    def __post_init__(self):
        self.optimizer = self.optimizer or make_optimizer(self.model, self.cfg)
        self._windows = self.corpus.windows("train", self.cfg.seq_len)
        self.steps_per_epoch = len(self._windows) // self.cfg.batch_size
        if self.steps_per_epoch == 0:
            raise InputError("training split smaller than one batch of windows")
        self.total_steps = self.cfg.max_steps or self.cfg.epochs * self.steps_per_epoch
        self._order_epoch, self._order = None, None

    def batch_at(self, step):
        epoch, k = divmod(step, self.steps_per_epoch)
        if self._order_epoch != epoch:
            self._order = epoch_order(self.cfg.seed, epoch, len(self._windows))
            self._order_epoch = epoch
        idx = self._order[k * self.cfg.batch_size:(k + 1) * self.cfg.batch_size]
        return self._windows[torch.from_numpy(idx)]

    def train_step(self):
        loss, grad_norm = train_step(self.model, self.batch_at(self.step), self.optimizer, self.cfg,
                                     self.step, self.total_steps)
        lr = lr_at(self.step, self.cfg, self.total_steps)
        self.step += 1
        return loss, grad_norm, lr

    def evaluate(self, split="validation"):
        return evaluate(self.model, self.corpus, split, self.cfg.seq_len, self.cfg.batch_size,
                        self.cfg.eval_batches)

    def is_eval_step(self, step):
        """End of each epoch, the middle of each epoch, and every ``eval_every`` steps."""
        k = step % self.steps_per_epoch
        if k == 0 or k == self.steps_per_epoch // 2 or step == self.total_steps:
            return True
        return bool(self.cfg.eval_every) and step % self.cfg.eval_every == 0

    def run(self, until=None, metrics=None, on_eval=None, on_step=None):
        """Train until step ``until`` (default: the configured total).  Returns eval history."""
        until = self.total_steps if until is None else min(until, self.total_steps)
        history = []
        t0 = time.perf_counter()
        tokens_per_step = self.cfg.batch_size * self.cfg.seq_len
        while self.step < until:
            loss, grad_norm, lr = self.train_step()
            elapsed = time.perf_counter() - t0
            if metrics is not None and (self.step % self.cfg.log_every == 0 or self.step == until):
                metrics.write(step=self.step, split="train", loss_nats=f"{loss:.6f}", ppl=f"{math.exp(loss):.4f}",
                              lr=f"{lr:.6e}", grad_norm=f"{grad_norm:.6f}",
                              tokens_seen=self.step * tokens_per_step, wallclock_s=f"{elapsed:.2f}")
            if on_step is not None:
                on_step(self, loss, grad_norm, lr)
            if self.is_eval_step(self.step):
                vloss, vppl = self.evaluate()
                history.append((self.step, vloss, vppl))
                log.debug("step %d val loss %.4f ppl %.2f", self.step, vloss, vppl)
                if metrics is not None:
                    metrics.write(step=self.step, split="validation", loss_nats=f"{vloss:.6f}",
                                  ppl=f"{vppl:.4f}", lr=f"{lr:.6e}", tokens_seen=self.step * tokens_per_step,
                                  wallclock_s=f"{time.perf_counter() - t0:.2f}")
                if on_eval is not None:
                    on_eval(self, vloss, vppl)
        return history


def set_threads(n):
    torch.set_num_threads(max(1, int(n)))
    os.environ.setdefault("OMP_NUM_THREADS", str(n))
