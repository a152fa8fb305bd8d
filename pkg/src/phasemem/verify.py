"""Self-check property suite behind ``phasemem verify``.

Each property returns a :class:`PropertyResult` with the measured error and
the tolerance it was held to; tolerances depend on the working precision.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import analysis
from .ccore import Tape, backward, cabs, from_complex, precision
from .layers import RopeTable, complex_norm, modrelu, phase, rope_apply, wrap_angle
from .model import ModelConfig, PhaseLM
from .pam import PamLayer, SamLayer, memory_read, memory_write

DESK = ModelConfig()

TOLERANCES = {
    torch.float64: {"layer": 1e-10, "logits": 1e-8, "grad": 1e-4, "phase": 1e-5, "retrieval": 1e-6},
    torch.float32: {"layer": 1e-4, "logits": 1e-3, "grad": 1e-3, "phase": 1e-4, "retrieval": 1e-4},
}


@dataclass
class PropertyResult:
    name: str
    measured: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""
    at_least: bool = False  # pass when measured exceeds the threshold instead

    @property
    def passed(self):
        if not math.isfinite(self.measured):
            return False
        return self.measured > self.tolerance if self.at_least else self.measured < self.tolerance

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        rel = ">" if self.at_least else "<"
        extra = f"  ({self.detail})" if self.detail else ""
        return (f"{tag}  {self.name:<30} measured={self.measured:.3e}  need {rel} {self.tolerance:.0e}"
                f"  {self.seconds:6.2f}s{extra}")


def _timed(name, tol, fn):
    t0 = time.perf_counter()
    measured, detail = fn()
    return PropertyResult(name, float(measured), tol, time.perf_counter() - t0, detail)


# ---------------------------------------------------------------------------
# dual form
# ---------------------------------------------------------------------------


def fold_steps(layer, X):
    """Run ``layer.step`` over the time axis of ``X`` and stack the outputs."""
    complex_ = layer.complex_
    axis = -3 if complex_ else -2
    state = layer.init_state(X.shape[:axis - 1], X.dtype)
    outs = []
    for t in range(X.shape[axis]):
        state, y = layer.step(state, X.select(axis, t))
        outs.append(y)
    return torch.stack(outs, dim=axis), state


def layer_dual_gap(arithmetic, seed, T, cfg=DESK, fault=0.0, batch=2):
    """max |parallel - folded recurrence| over outputs and final state."""
    gen = torch.Generator().manual_seed(seed)
    D, H, d = cfg.dim, cfg.n_heads, cfg.head_dim
    if arithmetic == "complex":
        layer = PamLayer(D, H, d, seed=seed)
        X = torch.randn(batch, T, D, 2, generator=gen, dtype=torch.get_default_dtype())
    else:
        layer = SamLayer(D, H, d, seed=seed)
        X = torch.randn(batch, T, D, generator=gen, dtype=torch.get_default_dtype())
    layer.decay_fault = fault
    with torch.no_grad():
        y_par, s_par = layer.parallel(X)
        y_rec, s_rec = fold_steps(layer, X)
    return max(float((y_par - y_rec).abs().max()), float((s_par.S - s_rec.S).abs().max()))


def model_dual_gaps(arithmetic, seed, lengths, cfg=DESK, fault=0.0):
    """max |logits(parallel) - logits(recurrent)| for the full model, per length.

    One model per seed.  The recurrence is causal, so a single pass over the
    longest stream supplies the recurrent logits for every shorter prefix.
    """
    m = PhaseLM(cfg.replace(arithmetic=arithmetic, seed=seed))
    for layer in m.memory_layers:
        layer.decay_fault = fault
    gen = torch.Generator().manual_seed(seed)
    tokens = torch.randint(0, cfg.vocab_size, (max(lengths),), generator=gen)
    with torch.no_grad():
        rec, _ = m.forward_recurrent(tokens)
        gaps = {}
        for T in lengths:
            par, _ = m(tokens[:T])
            gaps[T] = float((par - rec[:T]).abs().max())
    return gaps


def model_dual_gap(arithmetic, seed, T, cfg=DESK, fault=0.0):
    return model_dual_gaps(arithmetic, seed, (T,), cfg, fault)[T]


def check_dual_form(seeds=range(10), lengths=(1, 7, 32, 64), fault=0.0, tol=None):
    tol = tol or TOLERANCES[torch.get_default_dtype()]
    results = []
    for arith, name in (("complex", "dual form (PAM layer)"), ("real", "dual form (SAM layer)")):
        results.append(_timed(name, tol["layer"], lambda arith=arith: (
            max(layer_dual_gap(arith, s, T, fault=fault) for s in seeds for T in lengths),
            f"{len(list(seeds))} seeds, T in {list(lengths)}")))
    results.append(_timed("dual form (full model)", tol["logits"], lambda: (
        max(max(model_dual_gaps(a, s, lengths, fault=fault).values()) for a in ("complex", "real") for s in seeds),
        "PAM and SAM logits")))
    return results


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def fd_gradients(loss_fn, params, eps):
    """Central differences of ``loss_fn()`` w.r.t. every element of ``params``."""
    out = {}
    with torch.no_grad():
        for name, p in params.items():
            fd = torch.zeros_like(p)
            flat, fd_flat = p.view(-1), fd.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + eps
                up = float(loss_fn())
                flat[i] = orig - eps
                down = float(loss_fn())
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * eps)
            out[name] = fd
    return out


def relative_error(reference, candidate):
    """Largest per-tensor ||ref - cand|| / max(||ref||, ||cand||); returns ``(error, name)``."""
    worst, worst_name = 0.0, ""
    for name, ref in reference.items():
        cand = candidate[name].to(ref.dtype)
        scale = max(float(ref.norm()), float(cand.norm()), 1e-12)
        err = float((ref - cand).norm()) / scale
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name


def autograd_gradients(loss_fn, params):
    tape = Tape()
    for name, p in params.items():
        tape.watch(name, p)
    return backward(tape, loss_fn())


def tiny_config(arithmetic="complex", seed=0):
    return ModelConfig(dim=8, n_layers=2, n_heads=2, head_dim=4, vocab_size=16, expansion=2,
                       arithmetic=arithmetic, seed=seed)


def _gradient_problem(arithmetic, seed, T):
    m = PhaseLM(tiny_config(arithmetic, seed))
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in m.named_parameters():
            # keep ReLU-style kinks away from the sampled activations
            if name.endswith("act.bias"):
                p.copy_(0.1 * torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype))
            if name.endswith("alpha_pam"):
                p.fill_(0.7)
    tokens = torch.randint(0, 16, (2, T + 1), generator=gen)

    def loss_fn():
        logits, _ = m(tokens[:, :-1])
        return torch.nn.functional.cross_entropy(logits.reshape(-1, 16), tokens[:, 1:].reshape(-1))

    return m, loss_fn


def model_gradient_error(arithmetic="complex", seed=0, T=6, eps=1e-5):
    """Autograd at the working precision against 64-bit central differences.

    Covers every parameter of a small model (all extents <= 16) under LM loss.
    """
    with precision(torch.float64):
        ref_model, ref_loss = _gradient_problem(arithmetic, seed, T)
        reference = fd_gradients(ref_loss, dict(ref_model.named_parameters()), eps)
    m, loss_fn = _gradient_problem(arithmetic, seed, T)
    with torch.no_grad():
        for (_, p), (_, q) in zip(m.named_parameters(), ref_model.named_parameters()):
            p.copy_(q.to(p.dtype))
    return relative_error(reference, autograd_gradients(loss_fn, dict(m.named_parameters())))


def check_gradients(seeds=(0,), tol=None):
    tol = tol or TOLERANCES[torch.get_default_dtype()]
    out = []
    for arith in ("complex", "real"):
        def run(arith=arith):
            worst, where = 0.0, ""
            for s in seeds:
                err, name = model_gradient_error(arith, s)
                if err >= worst:
                    worst, where = err, name
            return worst, f"worst tensor {where}"
        out.append(_timed(f"gradients ({'PAM' if arith == 'complex' else 'SAM'} model)", tol["grad"], run))
    return out


# ---------------------------------------------------------------------------
# phase preservation
# ---------------------------------------------------------------------------


def _phase_shift(before, after, mask):
    diff = wrap_angle(phase(after) - phase(before))
    return float(diff[mask].abs().max()) if mask.any() else 0.0


def phase_errors(n=10_000, seed=0, head_dim=16):
    """Per-channel phase error of modReLU, ComplexNorm and RoPE on ``n`` channels."""
    gen = torch.Generator().manual_seed(seed)
    dtype = torch.get_default_dtype()
    z = torch.randn(n // 16, 16, 2, generator=gen, dtype=dtype)
    b = 0.3 * torch.randn(16, generator=gen, dtype=dtype)
    y = modrelu(z, b)
    e_mod = _phase_shift(z, y, cabs(y) > 0)
    s = torch.rand(16, generator=gen, dtype=dtype) + 0.5
    y = complex_norm(z, s)
    e_norm = _phase_shift(z, y, cabs(y) > 0)
    T = n // head_dim
    x = torch.randn(T, 1, head_dim, 2, generator=gen, dtype=dtype)
    table = RopeTable(head_dim)
    y = rope_apply(x, table)
    expected = torch.as_tensor(np.outer(np.arange(T), table.theta), dtype=dtype)[:, None]
    x, y = x.double(), y.double()  # compare in 64-bit: angles reach ~10^3 rad
    rot = wrap_angle(phase(y) - phase(x) - expected.double())
    e_rope = float(rot.abs().max())
    e_rope_mag = float((cabs(y) - cabs(x)).abs().max())
    return {"modrelu": e_mod, "complex_norm": e_norm, "rope": max(e_rope, e_rope_mag)}


def check_phase(tol=None):
    tol = tol or TOLERANCES[torch.get_default_dtype()]
    errs = {}

    def run(key):
        if not errs:
            errs.update(phase_errors())
        return errs[key], "10^4 channels"

    return [_timed(f"phase preserved ({k})", tol["phase"], lambda k=k: run(k))
            for k in ("modrelu", "complex_norm", "rope")]


# ---------------------------------------------------------------------------
# lossless retrieval
# ---------------------------------------------------------------------------


def orthonormal_keys(d, seed=0):
    """d orthonormal complex vectors (rows), split-real ``[d, d, 2]``."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)) + 1j * rng.standard_normal((d, d)))
    return from_complex(q.T.copy()).to(torch.get_default_dtype())


def retrieval_errors(d=16, extra=0, seed=0):
    """Write ``d`` orthonormal key bindings (plus ``extra`` random ones) with gamma=1, p=0.

    Returns the inf-norm retrieval error for each of the first ``d`` values.
    """
    dtype = torch.get_default_dtype()
    gen = torch.Generator().manual_seed(seed)
    keys = orthonormal_keys(d, seed)
    if extra:
        more = torch.randn(extra, d, 2, generator=gen, dtype=dtype)
        more = more / more.square().sum((-1, -2), keepdim=True).sqrt()
        keys = torch.cat([keys, more])
    values = torch.randn(len(keys), d, 2, generator=gen, dtype=dtype)
    S = torch.zeros(d, d, 2, dtype=dtype)
    for k, v in zip(keys, values):
        S = memory_write(S, v, k, gamma=1.0)  # p = 0 leaves v unsuppressed
    return [float((memory_read(S, keys[j]) - values[j]).abs().max()) for j in range(d)]


def check_retrieval(tol=None):
    tol = tol or TOLERANCES[torch.get_default_dtype()]
    exact = _timed("lossless retrieval (d=16)", tol["retrieval"],
                   lambda: (max(retrieval_errors(16)), "16 orthonormal keys"))
    over = retrieval_errors(16, extra=1)
    edge = PropertyResult("capacity edge (17th key)", max(over), tol["retrieval"],
                          detail="worst of the 16 retrievals", at_least=True)
    return [exact, edge]


# ---------------------------------------------------------------------------
# entropy identities
# ---------------------------------------------------------------------------


def random_density(n, rng):
    A = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    rho = A @ A.conj().T
    return rho / np.trace(rho).real


def random_unitary(n, rng):
    q, r = np.linalg.qr(rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
    return q * (np.diag(r) / np.abs(np.diag(r)))


def check_entropy(seed=0):
    rng = np.random.default_rng(seed)
    ln3 = math.log(3)

    def worked_example():
        r = analysis.example_state(0.0)
        return max(abs(analysis.shannon_diag(r) - ln3), abs(analysis.von_neumann(r)),
                   abs(analysis.decoherence_gap(r) - ln3)), "H = S_VN + ln 3 at p = 0"

    def eigenvalues():
        grid = np.linspace(0, 1, 11)
        return max(np.abs(analysis.example_state(p).eigenvalues - np.sort(analysis.example_eigenvalues(p))).max()
                   for p in grid), "p in {0, 0.1, ..., 1}"

    def gap_nonneg():
        worst = 0.0
        for n in (2, 3, 5, 8):
            for _ in range(20):
                worst = max(worst, -analysis.decoherence_gap(random_density(n, rng)))
        return max(worst, 0.0), "H(diag) >= S_VN on random states"

    def unitary():
        worst = 0.0
        for n in (3, 6, 10):
            rho = random_density(n, rng)
            U = random_unitary(n, rng)
            rot = U @ rho @ U.conj().T
            rot = (rot + rot.conj().T) / 2
            worst = max(worst, abs(analysis.von_neumann(rho) - analysis.von_neumann(rot)))
        return worst, "S_VN basis invariant"

    return [
        _timed("entropy worked example", 1e-9, worked_example),
        _timed("mixed-state eigenvalues", 1e-10, eigenvalues),
        _timed("decoherence gap >= 0", 1e-9, gap_nonneg),
        _timed("von Neumann invariance", 1e-8, unitary),
    ]


# ---------------------------------------------------------------------------
# suite
# ---------------------------------------------------------------------------


def run_suite(dtype=torch.float64, seeds=10, inject_fault=0.0, report=print):
    """Run every property at ``dtype``; returns the list of results."""
    results = []
    with precision(dtype):
        sections = (
            lambda: check_dual_form(range(seeds), fault=inject_fault),
            lambda: check_gradients(),
            lambda: check_phase(),
            lambda: check_retrieval(),
            lambda: check_entropy(),
        )
        for section in sections:
            for r in section():
                results.append(r)
                if report is not None:
                    report(r.line())
    return results
