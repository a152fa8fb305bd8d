"""Split-real complex arithmetic, complex linear maps and the gradient tape.

A complex tensor is an ordinary real ``torch.Tensor`` whose trailing axis has
extent 2 and holds ``(real, imag)``.  Every primitive in the package is written
over such real buffers so autograd only ever sees real arithmetic.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .exceptions import ContractError, DimensionError

EPS = 1e-8

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "32": torch.float32, "64": torch.float64}


@contextlib.contextmanager
def precision(dtype=torch.float64):
    """Temporarily switch the default float dtype (64-bit for checks)."""
    if isinstance(dtype, (str, int)):
        dtype = _DTYPES[str(dtype)]
    previous = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield dtype
    finally:
        torch.set_default_dtype(previous)


# ---------------------------------------------------------------------------
# elementwise helpers
# ---------------------------------------------------------------------------


def _check_complex(z, name="z"):
    if z.shape[-1] != 2:
        raise DimensionError(f"{name} must have a trailing (re, im) axis of extent 2, got shape {tuple(z.shape)}")


def as_complex(z):
    """Split-real tensor -> native complex tensor (diagnostics only)."""
    _check_complex(z)
    return torch.complex(z[..., 0].contiguous(), z[..., 1].contiguous())


def from_complex(c):
    """Native complex tensor or ndarray -> split-real tensor."""
    if isinstance(c, np.ndarray):
        c = torch.from_numpy(np.ascontiguousarray(c))
    return torch.stack([c.real, c.imag], dim=-1)


def cmul(a, b):
    """Elementwise complex product of split-real tensors (broadcasting)."""
    if not torch.is_tensor(a):
        a = torch.as_tensor(a, dtype=torch.get_default_dtype())
    if not torch.is_tensor(b):
        b = torch.as_tensor(b, dtype=torch.get_default_dtype())
    ar, ai = a[..., 0], a[..., 1]
    br, bi = b[..., 0], b[..., 1]
    return torch.stack([ar * br - ai * bi, ar * bi + ai * br], dim=-1)


def conj(z):
    return z * z.new_tensor([1.0, -1.0])


def _inv_abs(z):
    """(1/|z|, |z|), both set to 0 wherever |z| < EPS."""
    sq = z[..., 0] ** 2 + z[..., 1] ** 2
    keep = (sq >= EPS * EPS).to(sq.dtype)
    inv = torch.rsqrt(sq.clamp_min(EPS * EPS)) * keep
    return inv, sq * inv


def cabs(z):
    """|z| with a gradient that stays finite at the origin."""
    return _inv_abs(z)[1]


def unit_phase(z):
    """z/|z|, defined as 0 wherever |z| < EPS."""
    return z * _inv_abs(z)[0].unsqueeze(-1)


def conj_inner(a, b):
    """Sum_j conj(a_j) b_j over the channel axis (second-to-last).

    Leading axes broadcast; returns a split-real tensor of shape ``[..., 2]``.
    """
    _check_complex(a, "a")
    _check_complex(b, "b")
    if a.shape[-2] != b.shape[-2]:
        raise DimensionError(f"conj_inner extent mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    ar, ai = a[..., 0], a[..., 1]
    br, bi = b[..., 0], b[..., 1]
    return torch.stack([(ar * br + ai * bi).sum(-1), (ar * bi - ai * br).sum(-1)], dim=-1)


def cmatmul(a, b):
    """Complex matrix product ``[..., m, k, 2] @ [..., k, n, 2]``."""
    ar, ai = a[..., 0], a[..., 1]
    br, bi = b[..., 0], b[..., 1]
    return torch.stack([ar @ br - ai @ bi, ar @ bi + ai @ br], dim=-1)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def param_rng(seed, path=""):
    """Counter-based generator keyed by (global seed, parameter path).

    Creation order of parameters never affects their values.
    """
    digest = hashlib.blake2b(f"{int(seed)}::{path}".encode(), digest_size=16).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest, "little")))


def _orthogonal(rng, rows, cols):
    big, small = max(rows, cols), min(rows, cols)
    q, r = np.linalg.qr(rng.standard_normal((big, small)))
    q = q * np.sign(np.diag(r))
    return np.ascontiguousarray(q if rows >= cols else q.T)


@dataclass(frozen=True)
class ComplexLinearParams:
    """Real and imaginary weight factors of a complex linear map (m x n)."""

    W_r: np.ndarray
    W_i: np.ndarray

    def __post_init__(self):
        if self.W_r.shape != self.W_i.shape:
            raise DimensionError(f"W_r {self.W_r.shape} and W_i {self.W_i.shape} differ")

    @property
    def shape(self):
        return self.W_r.shape


def orthogonal_init(rows, cols, seed, path=""):
    """Two independent real orthogonal factors, each scaled by 1/sqrt(2).

    Non-square shapes get orthonormal rows when ``rows <= cols`` and
    orthonormal columns otherwise.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"orthogonal_init needs positive extents, got {rows}x{cols}")
    rng = param_rng(seed, path)
    scale = 1.0 / math.sqrt(2.0)
    return ComplexLinearParams(_orthogonal(rng, rows, cols) * scale, _orthogonal(rng, rows, cols) * scale)


# ---------------------------------------------------------------------------
# complex linear map
# ---------------------------------------------------------------------------


def complex_linear(p, x):
    """y_r = W_r x_r - W_i x_i ;  y_i = W_i x_r + W_r x_i  over the channel axis."""
    if isinstance(p, ComplexLinear):
        W_r, W_i = p.weight_r, p.weight_i
    else:
        W_r = torch.as_tensor(p.W_r, dtype=x.dtype)
        W_i = torch.as_tensor(p.W_i, dtype=x.dtype)
    _check_complex(x, "x")
    m, n = W_r.shape
    if x.shape[-2] != n:
        raise DimensionError(
            f"complex_linear: weight shape {tuple(W_r.shape)} incompatible with input shape {tuple(x.shape)}"
        )
    # one real matmul on the interleaved buffer against [[W_r^T, W_i^T], [-W_i^T, W_r^T]]
    block = torch.stack([torch.stack([W_r.T, W_i.T], -1), torch.stack([-W_i.T, W_r.T], -1)], 1)
    y = x.reshape(*x.shape[:-2], 2 * n) @ block.reshape(2 * n, 2 * m)
    return y.reshape(*x.shape[:-2], m, 2)


class ComplexLinear(nn.Module):
    """Bias-free complex linear map holding ``weight_r`` and ``weight_i`` (out x in)."""

    def __init__(self, in_features, out_features, seed=0, path=""):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        init = orthogonal_init(out_features, in_features, seed, path)
        dtype = torch.get_default_dtype()
        self.weight_r = nn.Parameter(torch.as_tensor(init.W_r, dtype=dtype))
        self.weight_i = nn.Parameter(torch.as_tensor(init.W_i, dtype=dtype))

    def params(self):
        return ComplexLinearParams(self.weight_r.detach().cpu().numpy(), self.weight_i.detach().cpu().numpy())

    def forward(self, x):
        return complex_linear(self, x)

    def extra_repr(self):
        return f"in_features={self.in_features}, out_features={self.out_features}"


# ---------------------------------------------------------------------------
# gradient tape
# ---------------------------------------------------------------------------


class Tape:
    """Records which tensors are parameters for one forward/backward pass.

    Operation recording and the reverse sweep are delegated to torch autograd,
    which visits each recorded node once in reverse topological order.  A tape
    is single-writer: use one per pass.
    """

    def __init__(self):
        self.params = {}

    def watch(self, name, tensor):
        if not tensor.requires_grad:
            tensor.requires_grad_(True)
        self.params[name] = tensor
        return tensor

    def watch_module(self, module, prefix=""):
        for name, p in module.named_parameters():
            if p.requires_grad:
                self.watch(prefix + name, p)
        return self

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)


def backward(tape, loss):
    """Gradients of a scalar ``loss`` for every parameter on ``tape``.

    Parameters the loss does not depend on get an all-zero gradient; tensors
    never registered on the tape are absent from the result.
    """
    if not torch.is_tensor(loss) or loss.numel() != 1:
        shape = tuple(loss.shape) if torch.is_tensor(loss) else type(loss).__name__
        raise ContractError(f"backward needs a scalar loss, got {shape}")
    names = list(tape.params)
    tensors = [tape.params[n] for n in names]
    if not loss.requires_grad:
        return {n: torch.zeros_like(t) for n, t in zip(names, tensors)}
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    return {n: torch.zeros_like(t) if g is None else g for n, t, g in zip(names, tensors, grads)}
