"""Full language model: complex embedding, interleaved CGU/PAM blocks with
learned residual scales, and a tied complex output head.

The same class builds the real-valued ablation when ``arithmetic="real"``.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .ccore import _orthogonal, orthogonal_init, param_rng
from .exceptions import InputError, ParameterMatchError
from .layers import ComplexGatedUnit, ComplexNorm, RealGatedUnit, RMSNorm
from .pam import PamLayer, SamLayer

ALPHA_CGU_INIT = 1.0
ALPHA_PAM_INIT = 0.1
GPT2_VOCAB = 50257


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    n_layers: int = 4
    n_heads: int = 2
    head_dim: int = 16
    vocab_size: int = 256
    expansion: int = 3
    arithmetic: str = "complex"
    seed: int = 0
    rope_base: float = 10000.0
    final_norm: bool = True

    def __post_init__(self):
        for name in ("dim", "n_layers", "n_heads", "head_dim", "expansion"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.arithmetic not in ("complex", "real"):
            raise ValueError(f"arithmetic must be 'complex' or 'real', got {self.arithmetic!r}")

    @property
    def is_complex(self):
        return self.arithmetic == "complex"

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        fields = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in fields})

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# Reference 5M-100M sweep configurations (GPT-2 BPE vocabulary).
SWEEP_CONFIGS = {
    "5M": ModelConfig(dim=44, n_layers=12, n_heads=2, head_dim=16, vocab_size=GPT2_VOCAB),
    "10M": ModelConfig(dim=80, n_layers=12, n_heads=4, head_dim=16, vocab_size=GPT2_VOCAB),
    "25M": ModelConfig(dim=200, n_layers=6, n_heads=4, head_dim=16, vocab_size=GPT2_VOCAB),
    "50M": ModelConfig(dim=292, n_layers=12, n_heads=4, head_dim=16, vocab_size=GPT2_VOCAB),
    "100M": ModelConfig(dim=384, n_layers=16, n_heads=6, head_dim=64, vocab_size=GPT2_VOCAB),
}
NOMINAL_SCALE = {"5M": 5e6, "10M": 10e6, "25M": 25e6, "50M": 50e6, "100M": 100e6}


class Block(nn.Module):
    """z~ = z + a_cgu CGU(Norm z);  z' = z~ + a_pam PAM(Norm z~)."""

    def __init__(self, cfg, index):
        super().__init__()
        path = f"blocks.{index}"
        D, H, d = cfg.dim, cfg.n_heads, cfg.head_dim
        if cfg.is_complex:
            self.norm1, self.norm2 = ComplexNorm(D), ComplexNorm(D)
            self.cgu = ComplexGatedUnit(D, cfg.expansion, cfg.seed, f"{path}.cgu")
            self.pam = PamLayer(D, H, d, cfg.seed, f"{path}.pam", cfg.rope_base)
        else:
            self.norm1, self.norm2 = RMSNorm(D), RMSNorm(D)
            self.cgu = RealGatedUnit(D, cfg.expansion, cfg.seed, f"{path}.cgu")
            self.pam = SamLayer(D, H, d, cfg.seed, f"{path}.pam", cfg.rope_base)
        self.pam.index = index
        self.alpha_cgu = nn.Parameter(torch.tensor(ALPHA_CGU_INIT))
        self.alpha_pam = nn.Parameter(torch.tensor(ALPHA_PAM_INIT))

    def forward(self, z, state=None, return_state=False):
        z = z + self.alpha_cgu * self.cgu(self.norm1(z))
        y, state = self.pam.parallel(self.norm2(z), state, return_state)
        return z + self.alpha_pam * y, state

    def step(self, z_t, state):
        z_t = z_t + self.alpha_cgu * self.cgu(self.norm1(z_t))
        state, y = self.pam.step(state, self.norm2(z_t))
        return z_t + self.alpha_pam * y, state


def _embedding_init(cfg):
    V, D = cfg.vocab_size, cfg.dim
    if cfg.is_complex:
        p = orthogonal_init(V, D, cfg.seed, "embed")
        E = np.stack([p.W_r, p.W_i], axis=-1)
        norms = np.sqrt((E ** 2).sum(axis=(1, 2), keepdims=True))
    else:
        E = _orthogonal(param_rng(cfg.seed, "embed"), V, D)
        norms = np.linalg.norm(E, axis=1, keepdims=True)
    return np.ascontiguousarray(E / norms)


class PhaseLM(nn.Module):
    """Token ids -> next-token logits through a stack of memory blocks."""

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        self.embed = nn.Parameter(torch.as_tensor(_embedding_init(cfg), dtype=torch.get_default_dtype()))
        self.blocks = nn.ModuleList(Block(cfg, i) for i in range(cfg.n_layers))
        if cfg.final_norm:
            self.norm_out = ComplexNorm(cfg.dim) if cfg.is_complex else RMSNorm(cfg.dim)
        else:
            self.norm_out = nn.Identity()

    @property
    def memory_layers(self):
        return [b.pam for b in self.blocks]

    def init_states(self, batch_shape=()):
        dtype = self.embed.dtype
        return [b.pam.init_state(batch_shape, dtype) for b in self.blocks]

    def _lookup(self, tokens):
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        V = self.cfg.vocab_size
        bad = (tokens < 0) | (tokens >= V)
        if bad.any():
            pos = tuple(int(i) for i in torch.nonzero(bad)[0])
            raise InputError(f"token {int(tokens[pos])} at position {pos} outside vocabulary of size {V}")
        return self.embed[tokens]

    def head(self, z):
        """Tied readout: Re<E_v, z> = z_r . E_r[v] + z_i . E_i[v]."""
        if self.cfg.is_complex:
            return z[..., 0] @ self.embed[..., 0].T + z[..., 1] @ self.embed[..., 1].T
        return z @ self.embed.T

    def forward(self, tokens, states=None, return_states=False):
        """Parallel evaluation of ``tokens[..., T]``; returns ``(logits, states)``."""
        z = self._lookup(tokens)
        want_states = return_states or states is not None
        new_states = []
        for i, block in enumerate(self.blocks):
            z, st = block(z, None if states is None else states[i], want_states)
            new_states.append(st)
        logits = self.head(self.norm_out(z))
        return logits, (new_states if want_states else None)

    def forward_recurrent(self, tokens, states=None):
        """Token-by-token evaluation with fixed-size states."""
        tokens = torch.as_tensor(tokens, dtype=torch.long)
        z = self._lookup(tokens)
        if states is None:
            states = self.init_states(tokens.shape[:-1])
        states = list(states)
        outs = []
        time_axis = -3 if self.cfg.is_complex else -2
        for t in range(tokens.shape[-1]):
            z_t = z.select(time_axis, t)
            for i, block in enumerate(self.blocks):
                z_t, states[i] = block.step(z_t, states[i])
            outs.append(self.head(self.norm_out(z_t)))
        return torch.stack(outs, dim=-2), states

    def step(self, token, states):
        """Logits for one token id (or a batch of them) and the advanced states."""
        logits, states = self.forward_recurrent(torch.as_tensor(token).unsqueeze(-1), states)
        return logits.squeeze(-2), states

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())


# ---------------------------------------------------------------------------
# parameter accounting
# ---------------------------------------------------------------------------


def count_params(cfg):
    """Exact trainable-scalar count, from the layer inventory."""
    D, H, d, V, e = cfg.dim, cfg.n_heads, cfg.head_dim, cfg.vocab_size, cfg.expansion
    f = 2 if cfg.is_complex else 1  # two weight factors per complex map
    hd = H * d
    gate_in = 2 * D if cfg.is_complex else D
    per_block = (
        2 * D  # norm scales
        + f * (D * e * D) * 3 + e * D  # up, gate, down + activation bias
        + f * D * 3 * hd + f * hd * D  # qkv, out
        + gate_in * H + H  # dt_proj
        + D * H + H  # protect_proj
        + 2  # residual scales
    )
    return f * V * D + cfg.n_layers * per_block + (D if cfg.final_norm else 0)


def match_sam_config(pam_cfg, tolerance=0.02):
    """Smallest real-valued config (dim first, then heads) within ``tolerance``.

    Searches dim in [D, 2D] and heads in [H, 2H] with head_dim fixed.  Raises
    ``ParameterMatchError`` carrying the nearest config when nothing fits.
    """
    if not pam_cfg.is_complex:
        raise ValueError("match_sam_config expects a complex-arithmetic config")
    target = count_params(pam_cfg)
    base = pam_cfg.replace(arithmetic="real")
    best, best_gap = None, float("inf")
    for D, H in itertools.product(range(pam_cfg.dim, 2 * pam_cfg.dim + 1),
                                  range(pam_cfg.n_heads, 2 * pam_cfg.n_heads + 1)):
        cand = base.replace(dim=D, n_heads=H)
        gap = abs(count_params(cand) - target) / target
        if gap <= tolerance:
            return cand
        if gap < best_gap:
            best, best_gap = cand, gap
    raise ParameterMatchError(
        f"no real config within {tolerance:.1%} of {target} parameters; nearest is "
        f"dim={best.dim} heads={best.n_heads} at {best_gap:.2%}",
        nearest=best, relative_gap=best_gap,
    )


@torch.no_grad()
def state_rank_trace(model, tokens):
    """Rows ``(position, layer, head, effective_rank)`` along a single token stream."""
    from .pam import effective_rank

    states = model.init_states()
    rows = []
    for pos, tok in enumerate(tokens):
        _, states = model.step(torch.tensor(int(tok)), states)
        for layer, st in enumerate(states):
            for head in range(st.S.shape[0]):
                rows.append((pos, layer, head, effective_rank(st.S[head])))
    return rows
