"""Phase-preserving primitives: modReLU, ComplexNorm, the complex gated unit
and complex rotary position embedding, plus the real-valued analogues used by
the SAM ablation."""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .ccore import EPS, ComplexLinear, _inv_abs, _orthogonal, cmul, param_rng
from .exceptions import DimensionError


def _check_channels(z, n, what, complex_=True):
    axis = -2 if complex_ else -1
    if z.shape[axis] != n:
        raise DimensionError(f"{what}: parameter extent {n} does not match input shape {tuple(z.shape)}")


# ---------------------------------------------------------------------------
# complex activations / norms
# ---------------------------------------------------------------------------


def modrelu(z, b):
    """ReLU(|z| + b) * z/|z|, per channel; exact zeros where |z| + b <= 0."""
    _check_channels(z, b.shape[-1], "modrelu")
    inv, mag = _inv_abs(z)
    return z * (torch.relu(mag + b) * inv).unsqueeze(-1)


def complex_norm(z, s):
    """RMS normalization of channel magnitudes with phases left alone.

    ``s * (|z| / RMS(|z|)) * z/|z|`` with the RMS taken over the channel axis
    of each token.  An all-zero token maps to zeros.
    """
    _check_channels(z, s.shape[-1], "complex_norm")
    sq = z[..., 0] ** 2 + z[..., 1] ** 2
    keep = (sq >= EPS * EPS).to(sq.dtype)
    inv_rms = torch.rsqrt(sq.mean(-1, keepdim=True).clamp_min(EPS * EPS))
    return z * (s * keep * inv_rms).unsqueeze(-1)


class ModReLU(nn.Module):
    def __init__(self, channels, init=0.0):
        super().__init__()
        self.bias = nn.Parameter(torch.full((channels,), float(init)))

    def forward(self, z):
        return modrelu(z, self.bias)


class ComplexNorm(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(channels))

    def forward(self, z):
        return complex_norm(z, self.scale)


class ComplexGatedUnit(nn.Module):
    """SwiGLU-style channel mixer in complex space.

    The gate's phase rotates the activated up-projection and the logistic of
    the gate's magnitude scales it.
    """

    def __init__(self, dim, expansion=3, seed=0, path="cgu"):
        super().__init__()
        if expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {expansion}")
        hidden = dim * expansion
        self.expansion = expansion
        self.up = ComplexLinear(dim, hidden, seed, f"{path}.up")
        self.gate = ComplexLinear(dim, hidden, seed, f"{path}.gate")
        self.down = ComplexLinear(hidden, dim, seed, f"{path}.down")
        self.act = ModReLU(hidden)

    def forward(self, z):
        return cgu_forward(z, self)


def cgu_forward(z, p):
    g = p.gate(z)
    h = p.act(p.up(z))
    inv, mag = _inv_abs(g)
    # unit-phase(g) * sigmoid(|g|) folded into one real coefficient on g
    return p.down(cmul(g, h) * (inv * torch.sigmoid(mag)).unsqueeze(-1))


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------


class RopeTable:
    """Per-position unit complex factors e^{i m theta_j}, theta_j = base^(-j/d).

    One rotation per complex channel, shared across heads.  The table grows on
    demand; growing mutates it, so extend ahead of time if shared by threads.
    """

    def __init__(self, head_dim, base=10000.0, length=256):
        self.head_dim = head_dim
        self.base = float(base)
        self.theta = self.base ** (-np.arange(head_dim, dtype=np.float64) / head_dim)
        self._factors = torch.empty(0, head_dim, 2, dtype=torch.float64)
        self.extend(length)

    def __len__(self):
        return self._factors.shape[0]

    def extend(self, length):
        if length <= len(self):
            return
        angles = np.outer(np.arange(length, dtype=np.float64), self.theta)
        self._factors = torch.from_numpy(np.stack([np.cos(angles), np.sin(angles)], axis=-1))

    def factors(self, start, count, dtype=None):
        self.extend(start + count)
        f = self._factors[start:start + count]
        return f if dtype is None else f.to(dtype)


def rope_apply(x, table, start_pos=0):
    """Rotate ``x[..., T, H, d, 2]`` by e^{i m theta_j} for m = start_pos + t."""
    if x.shape[-2] != table.head_dim:
        raise DimensionError(f"rope table head_dim {table.head_dim} does not match input shape {tuple(x.shape)}")
    T = x.shape[-4]
    f = table.factors(start_pos, T, x.dtype)[:, None]
    return cmul(x, f)


class RealRopeTable:
    """Standard rotary table for real vectors: pairs (j, j + d/2) rotate by m*base^(-2j/d)."""

    def __init__(self, head_dim, base=10000.0, length=256):
        if head_dim % 2:
            raise ValueError("real rotary embedding needs an even head_dim")
        self.head_dim = head_dim
        self.base = float(base)
        half = head_dim // 2
        self.theta = self.base ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
        self._cos = torch.empty(0, half, dtype=torch.float64)
        self._sin = torch.empty(0, half, dtype=torch.float64)
        self.extend(length)

    def __len__(self):
        return self._cos.shape[0]

    def extend(self, length):
        if length <= len(self):
            return
        angles = np.outer(np.arange(length, dtype=np.float64), self.theta)
        self._cos = torch.from_numpy(np.cos(angles))
        self._sin = torch.from_numpy(np.sin(angles))

    def factors(self, start, count, dtype=None):
        self.extend(start + count)
        c, s = self._cos[start:start + count], self._sin[start:start + count]
        if dtype is not None:
            c, s = c.to(dtype), s.to(dtype)
        return c, s


def real_rope_apply(x, table, start_pos=0):
    """Rotate real ``x[..., T, H, d]`` pairwise by position."""
    if x.shape[-1] != table.head_dim:
        raise DimensionError(f"rope table head_dim {table.head_dim} does not match input shape {tuple(x.shape)}")
    T = x.shape[-3]
    c, s = table.factors(start_pos, T, x.dtype)
    c, s = c[:, None], s[:, None]
    half = table.head_dim // 2
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * c - x2 * s, x1 * s + x2 * c], dim=-1)


# ---------------------------------------------------------------------------
# real-valued analogues (SAM)
# ---------------------------------------------------------------------------


class RealLinear(nn.Module):
    """Bias-free real linear map with orthogonal init from the keyed generator."""

    def __init__(self, in_features, out_features, seed=0, path=""):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        w = _orthogonal(param_rng(seed, path), out_features, in_features)
        self.weight = nn.Parameter(torch.as_tensor(w, dtype=torch.get_default_dtype()))

    def forward(self, x):
        if x.shape[-1] != self.in_features:
            raise DimensionError(
                f"real linear: weight shape {tuple(self.weight.shape)} incompatible with input shape {tuple(x.shape)}"
            )
        return x @ self.weight.T


def rms_norm(x, s):
    _check_channels(x, s.shape[-1], "rms_norm", complex_=False)
    ms = (x * x).mean(-1, keepdim=True)
    tiny = ms < EPS * EPS
    rms = torch.sqrt(torch.where(tiny, torch.ones_like(ms), ms))
    return torch.where(tiny, torch.zeros_like(x), s * x / rms)


class RMSNorm(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(channels))

    def forward(self, x):
        return rms_norm(x, self.scale)


class BiasReLU(nn.Module):
    """ReLU(x + b): the real counterpart of modReLU."""

    def __init__(self, channels, init=0.0):
        super().__init__()
        self.bias = nn.Parameter(torch.full((channels,), float(init)))

    def forward(self, x):
        return torch.relu(x + self.bias)


class RealGatedUnit(nn.Module):
    """down( ReLU(up x + b) * sigmoid(gate x) )."""

    def __init__(self, dim, expansion=3, seed=0, path="cgu"):
        super().__init__()
        if expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {expansion}")
        hidden = dim * expansion
        self.expansion = expansion
        self.up = RealLinear(dim, hidden, seed, f"{path}.up")
        self.gate = RealLinear(dim, hidden, seed, f"{path}.gate")
        self.down = RealLinear(hidden, dim, seed, f"{path}.down")
        self.act = BiasReLU(hidden)

    def forward(self, x):
        return self.down(self.act(self.up(x)) * torch.sigmoid(self.gate(x)))


def phase(z):
    return torch.atan2(z[..., 1], z[..., 0])


def wrap_angle(a):
    """Map angles into (-pi, pi]."""
    return torch.remainder(a + math.pi, 2 * math.pi) - math.pi
