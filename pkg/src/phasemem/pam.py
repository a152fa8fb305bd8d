"""Phase-Associative Memory: a complex matrix-state sequence mixer.

Each head keeps a d x d complex state that accumulates value (x) conj(key)
outer products under a data-dependent decay and is read out by multiplying
with the scaled query.  The layer evaluates either one token at a time
(``pam_step``) or over a whole window at once (``pam_parallel``); both give the
same outputs.  The SAM functions are the same algebra over the reals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ccore import ComplexLinear, cabs, cmatmul, cmul, conj, param_rng
from .exceptions import NonFiniteStateError
from .layers import RealLinear, RealRopeTable, RopeTable, real_rope_apply, rope_apply

DT_BIAS_INIT = -4.0
PROTECT_BIAS_INIT = -3.0
LOG_GAMMA_FLOOR = -60.0
GATE_WEIGHT_STD = 0.02


@dataclass
class GateValues:
    """Per-head decay ``gamma`` in (0, 1] and protect gate ``p`` in (0, 1)."""

    gamma: torch.Tensor
    p: torch.Tensor
    log_gamma: torch.Tensor


@dataclass
class PamState:
    """Recurrent memory of one layer: ``S[..., H, d, d, 2]`` (``[..., H, d, d]`` for SAM)."""

    S: torch.Tensor
    pos: int = 0

    @classmethod
    def zeros(cls, n_heads, head_dim, batch_shape=(), complex_=True, dtype=None):
        shape = (*batch_shape, n_heads, head_dim, head_dim) + ((2,) if complex_ else ())
        return cls(torch.zeros(shape, dtype=dtype or torch.get_default_dtype()), 0)

    def detach(self):
        return PamState(self.S.detach(), self.pos)


def _gate_linear(in_features, out_features, bias, seed, path):
    lin = nn.Linear(in_features, out_features)
    w = param_rng(seed, path).standard_normal((out_features, in_features)) * GATE_WEIGHT_STD
    with torch.no_grad():
        lin.weight.copy_(torch.as_tensor(w))
        lin.bias.fill_(bias)
    return lin


def _mix_gates(dt_logits, protect_logits, forced=None):
    if forced is not None:
        gamma, p = forced
        shape = dt_logits.shape
        gamma = torch.as_tensor(gamma, dtype=dt_logits.dtype).expand(shape)
        p = torch.as_tensor(p, dtype=dt_logits.dtype).expand(shape)
    else:
        dt = F.softplus(dt_logits)
        p = torch.sigmoid(protect_logits)
        gamma = torch.exp(-dt) * (1 - p) + p
    log_gamma = torch.log(gamma).clamp(min=LOG_GAMMA_FLOOR)
    return GateValues(torch.exp(log_gamma), p, log_gamma)


class _MemoryLayer(nn.Module):
    complex_ = True

    def __init__(self, n_heads, head_dim):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.index = None  # layer position, filled in by the model for error messages
        self.forced_gates = None  # (gamma, p) override for controlled experiments
        self.decay_fault = 0.0  # relative perturbation of the parallel decay matrix (self-test hook)

    def init_state(self, batch_shape=(), dtype=None):
        return PamState.zeros(self.n_heads, self.head_dim, batch_shape, self.complex_, dtype)


class PamLayer(_MemoryLayer):
    """Complex memory layer: QKV map, complex RoPE, gates, state, output map."""

    def __init__(self, dim, n_heads, head_dim, seed=0, path="pam", rope_base=10000.0, use_rope=True):
        super().__init__(n_heads, head_dim)
        hd = n_heads * head_dim
        self.dim = dim
        self.qkv = ComplexLinear(dim, 3 * hd, seed, f"{path}.qkv")
        self.out = ComplexLinear(hd, dim, seed, f"{path}.out")
        self.dt_proj = _gate_linear(2 * dim, n_heads, DT_BIAS_INIT, seed, f"{path}.dt_proj")
        self.protect_proj = _gate_linear(dim, n_heads, PROTECT_BIAS_INIT, seed, f"{path}.protect_proj")
        self.use_rope = use_rope
        self.rope = RopeTable(head_dim, rope_base)

    def gates(self, x):
        return compute_gates(x, self)

    def step(self, state, x_t):
        return pam_step(state, x_t, self)

    def parallel(self, X, state=None, return_state=True):
        return pam_parallel(X, self, state, return_state)


def compute_gates(x, layer):
    """Decay and protect gates for ``x[..., D, 2]``, one scalar per head."""
    if not layer.complex_:
        return _mix_gates(layer.dt_proj(x), layer.protect_proj(x.abs()), layer.forced_gates)
    flat = torch.cat([x[..., 0], x[..., 1]], dim=-1)
    return _mix_gates(layer.dt_proj(flat), layer.protect_proj(cabs(x)), layer.forced_gates)


def _project(X, layer, start_pos):
    """Scaled queries, keys, suppressed values and gates for ``X[..., T, D, 2]``."""
    H, d = layer.n_heads, layer.head_dim
    qkv = layer.qkv(X)
    qkv = qkv.reshape(*qkv.shape[:-2], 3, H, d, 2)
    Q, K, V = qkv[..., 0, :, :, :], qkv[..., 1, :, :, :], qkv[..., 2, :, :, :]
    if layer.use_rope:
        Q = rope_apply(Q, layer.rope, start_pos)
        K = rope_apply(K, layer.rope, start_pos)
    g = compute_gates(X, layer)
    Qs = Q / math.sqrt(d)
    Vp = V * (1 - g.p)[..., None, None]
    return Qs, K, Vp, g


def _check_state(S, layer, complex_):
    if torch.isfinite(S).all():
        return
    bad = ~torch.isfinite(S)
    per_head = bad.flatten(-3 if complex_ else -2).any(-1)
    head = int(torch.nonzero(per_head.reshape(-1, per_head.shape[-1]).any(0))[0])
    raise NonFiniteStateError(
        f"non-finite memory state in layer {layer.index} head {head}", layer=layer.index, head=head
    )


def memory_write(S, v, k, gamma=1.0):
    """S <- gamma S + v (x) conj(k) for complex ``S[..., d, d, 2]``, ``v, k[..., d, 2]``."""
    gamma = torch.as_tensor(gamma, dtype=S.dtype)
    if gamma.ndim:
        gamma = gamma[..., None, None, None]
    return gamma * S + cmul(v.unsqueeze(-2), conj(k).unsqueeze(-3))


def memory_read(S, q):
    """S q: the conjugate-inner-product retrieval of every stored value against ``q``."""
    return cmul(S, q.unsqueeze(-3)).sum(-2)


def pam_step(state, x_t, layer):
    """One recurrent update.  Returns ``(new_state, output[..., D, 2])``.

    S <- gamma S + V' (x) conj(K);  Y = S Q/sqrt(d);  output = out(concat heads).
    """
    Qs, K, Vp, g = _project(x_t.unsqueeze(-3), layer, state.pos)
    Qs, K, Vp = Qs.squeeze(-4), K.squeeze(-4), Vp.squeeze(-4)
    S = memory_write(state.S, Vp, K, g.gamma.squeeze(-2))
    _check_state(S, layer, True)
    Y = memory_read(S, Qs)
    Y = Y.reshape(*Y.shape[:-3], layer.n_heads * layer.head_dim, 2)
    return PamState(S, state.pos + 1), layer.out(Y)


def decay_matrix(log_gamma):
    """D[t, i] = prod_{j=i+1..t} gamma_j for t >= i, else 0.  ``log_gamma[..., T]``."""
    cum = torch.cumsum(log_gamma, dim=-1)
    T = log_gamma.shape[-1]
    logD = cum.unsqueeze(-1) - cum.unsqueeze(-2)
    causal = torch.ones(T, T, dtype=torch.bool, device=log_gamma.device).tril()
    logD = logD.masked_fill(~causal, float("-inf"))
    return torch.exp(logD), cum


def pam_parallel(X, layer, state=None, return_state=True):
    """Dual (masked matrix) form over ``X[..., T, D, 2]``.

    Returns ``(Y[..., T, D, 2], final_state)``; the final state is ``None``
    when ``return_state`` is false.  ``state`` carries memory in from an
    earlier chunk and fixes the starting position.
    """
    start = 0 if state is None else state.pos
    T = X.shape[-3]
    Qs, K, Vp, g = _project(X, layer, start)
    # heads first: [..., H, T, d, 2]
    Qs, K, Vp = (t.movedim(-4, -3) for t in (Qs, K, Vp))
    log_gamma = g.log_gamma.movedim(-1, -2)  # [..., H, T]
    D, cum = decay_matrix(log_gamma)
    if layer.decay_fault:
        D = D * (1 + layer.decay_fault)
    Qr, Qi, Kr, Ki = Qs[..., 0], Qs[..., 1], K[..., 0], K[..., 1]
    Kr_t, Ki_t = Kr.transpose(-1, -2), Ki.transpose(-1, -2)
    # scores W[t, i] = Q~_t . conj(K_i)
    Wr = (Qr @ Kr_t + Qi @ Ki_t) * D
    Wi = (Qi @ Kr_t - Qr @ Ki_t) * D
    Vr, Vi = Vp[..., 0], Vp[..., 1]
    Y = torch.stack([Wr @ Vr - Wi @ Vi, Wr @ Vi + Wi @ Vr], dim=-1)
    if state is not None:
        carry = cmatmul(Qs, state.S.transpose(-2, -3))
        Y = Y + torch.exp(cum)[..., None, None] * carry
    out = layer.out(Y.movedim(-3, -4).reshape(*X.shape[:-2], layer.n_heads * layer.head_dim, 2))
    if not return_state:
        return out, None
    w = torch.exp(cum[..., -1:] - cum)  # [..., H, T]
    Vw = Vp * w[..., None, None]
    S = cmatmul(Vw.transpose(-2, -3), conj(K))
    if state is not None:
        S = S + torch.exp(cum[..., -1])[..., None, None, None] * state.S
    return out, PamState(S, start + T)


# ---------------------------------------------------------------------------
# real-valued ablation
# ---------------------------------------------------------------------------


class SamLayer(_MemoryLayer):
    """Real memory layer with dot-product retrieval and real outer products."""

    complex_ = False

    def __init__(self, dim, n_heads, head_dim, seed=0, path="pam", rope_base=10000.0, use_rope=True):
        super().__init__(n_heads, head_dim)
        hd = n_heads * head_dim
        self.dim = dim
        self.qkv = RealLinear(dim, 3 * hd, seed, f"{path}.qkv")
        self.out = RealLinear(hd, dim, seed, f"{path}.out")
        self.dt_proj = _gate_linear(dim, n_heads, DT_BIAS_INIT, seed, f"{path}.dt_proj")
        self.protect_proj = _gate_linear(dim, n_heads, PROTECT_BIAS_INIT, seed, f"{path}.protect_proj")
        self.use_rope = use_rope
        self.rope = RealRopeTable(head_dim, rope_base)

    def gates(self, x):
        return compute_gates(x, self)

    def step(self, state, x_t):
        return sam_step(state, x_t, self)

    def parallel(self, X, state=None, return_state=True):
        return sam_parallel(X, self, state, return_state)


def _project_real(X, layer, start_pos):
    H, d = layer.n_heads, layer.head_dim
    qkv = layer.qkv(X)
    qkv = qkv.reshape(*qkv.shape[:-1], 3, H, d)
    Q, K, V = qkv[..., 0, :, :], qkv[..., 1, :, :], qkv[..., 2, :, :]
    if layer.use_rope:
        Q = real_rope_apply(Q, layer.rope, start_pos)
        K = real_rope_apply(K, layer.rope, start_pos)
    g = compute_gates(X, layer)
    return Q / math.sqrt(d), K, V * (1 - g.p)[..., None], g


def sam_step(state, x_t, layer):
    Qs, K, Vp, g = _project_real(x_t.unsqueeze(-2), layer, state.pos)
    Qs, K, Vp = Qs.squeeze(-3), K.squeeze(-3), Vp.squeeze(-3)
    gamma = g.gamma.squeeze(-2)
    S = gamma[..., None, None] * state.S + Vp.unsqueeze(-1) * K.unsqueeze(-2)
    _check_state(S, layer, False)
    Y = (S @ Qs.unsqueeze(-1)).squeeze(-1)
    return PamState(S, state.pos + 1), layer.out(Y.reshape(*Y.shape[:-2], -1))


def sam_parallel(X, layer, state=None, return_state=True):
    start = 0 if state is None else state.pos
    T = X.shape[-2]
    Qs, K, Vp, g = _project_real(X, layer, start)
    Qs, K, Vp = (t.movedim(-3, -2) for t in (Qs, K, Vp))  # [..., H, T, d]
    D, cum = decay_matrix(g.log_gamma.movedim(-1, -2))
    if layer.decay_fault:
        D = D * (1 + layer.decay_fault)
    Y = ((Qs @ K.transpose(-1, -2)) * D) @ Vp
    if state is not None:
        Y = Y + torch.exp(cum)[..., None] * (Qs @ state.S.transpose(-1, -2))
    out = layer.out(Y.movedim(-3, -2).reshape(*X.shape[:-1], -1))
    if not return_state:
        return out, None
    w = torch.exp(cum[..., -1:] - cum)
    S = (Vp * w[..., None]).transpose(-1, -2) @ K
    if state is not None:
        S = S + torch.exp(cum[..., -1])[..., None, None] * state.S
    return out, PamState(S, start + T)


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def effective_rank(S):
    """exp of the Shannon entropy of the normalized singular values of ``S``.

    Accepts a split-real ``[d, d, 2]`` tensor, a real ``[d, d]`` tensor or a
    numpy array (complex or real).  The zero matrix has effective rank 0.
    """
    if torch.is_tensor(S):
        S = S.detach().cpu().double()
        if S.dim() == 3 and S.shape[-1] == 2:
            S = torch.complex(S[..., 0], S[..., 1])
        S = S.numpy()
    sv = np.linalg.svd(np.asarray(S), compute_uv=False)
    total = sv.sum()
    if total <= 0:
        return 0.0
    p = sv[sv > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))
