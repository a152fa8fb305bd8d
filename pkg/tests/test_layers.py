import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from phasemem.ccore import Tape, as_complex, backward, cabs, conj_inner, from_complex, precision
from phasemem.exceptions import DimensionError
from phasemem.layers import (
    ComplexGatedUnit,
    ComplexNorm,
    RealGatedUnit,
    RealRopeTable,
    RopeTable,
    complex_norm,
    modrelu,
    phase,
    real_rope_apply,
    rms_norm,
    rope_apply,
    wrap_angle,
)
from phasemem.verify import fd_gradients, relative_error


def c(*pairs):
    return torch.tensor(pairs, dtype=torch.float64)


# ---------------------------------------------------------------------------
# modReLU
# ---------------------------------------------------------------------------


def test_modrelu_examples(f64):
    out = modrelu(c((3, 4)), torch.tensor([-1.0]))
    torch.testing.assert_close(out, c((2.4, 3.2)))
    assert modrelu(c((1, 0)), torch.tensor([-2.0])).tolist() == [[0.0, 0.0]]
    z = torch.randn(7, 2)
    torch.testing.assert_close(modrelu(z, torch.zeros(7)), z)


def test_modrelu_zero_input_is_zero(f64):
    assert modrelu(torch.zeros(3, 2), torch.ones(3)).abs().max() == 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_modrelu_magnitude_and_phase(seed):
    with precision(torch.float64):
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(32, 2, generator=g)
        b = torch.randn(32, generator=g)
        out = modrelu(z, b)
        torch.testing.assert_close(cabs(out), torch.relu(cabs(z) + b))
        live = cabs(out) > 0
        drift = wrap_angle(phase(out) - phase(z))[live]
        assert drift.numel() == 0 or drift.abs().max() < 1e-5


def test_modrelu_channel_mismatch():
    with pytest.raises(DimensionError):
        modrelu(torch.zeros(4, 2), torch.zeros(3))


# ---------------------------------------------------------------------------
# ComplexNorm
# ---------------------------------------------------------------------------


def test_complex_norm_uniform_magnitudes(f64):
    angles = torch.linspace(0, 3, 6)
    z = 2.5 * torch.stack([torch.cos(angles), torch.sin(angles)], -1)
    out = complex_norm(z, torch.ones(6))
    torch.testing.assert_close(cabs(out), torch.ones(6))
    torch.testing.assert_close(phase(out), phase(z))


def test_complex_norm_single_channel(f64):
    d = 9
    z = torch.zeros(d, 2)
    z[4] = torch.tensor([0.3, -0.4])
    out = complex_norm(z, torch.ones(d))
    assert cabs(out)[4].item() == pytest.approx(math.sqrt(d))
    assert cabs(out)[torch.arange(d) != 4].abs().max() == 0


def test_complex_norm_scale_invariance_and_zero(f64):
    z = torch.randn(3, 8, 2)
    s = torch.rand(8) + 0.5
    torch.testing.assert_close(complex_norm(10 * z, s), complex_norm(z, s))
    assert complex_norm(torch.zeros(8, 2), s).abs().max() == 0


def test_complex_norm_rms_equals_scale(f64):
    out = ComplexNorm(16)(torch.randn(4, 16, 2))
    rms = cabs(out).square().mean(-1).sqrt()
    torch.testing.assert_close(rms, torch.ones(4))


# ---------------------------------------------------------------------------
# CGU
# ---------------------------------------------------------------------------


def _cgu_oracle(mod, z):
    """Straight numpy transcription: W_down( (g/|g|) * modReLU(W_up z) * sigmoid(|g|) )."""
    W = {k: getattr(mod, k).weight_r.detach().numpy() + 1j * getattr(mod, k).weight_i.detach().numpy()
         for k in ("up", "gate", "down")}
    b = mod.act.bias.detach().numpy()
    x = z[..., 0].numpy() + 1j * z[..., 1].numpy()
    u = W["up"] @ x
    h = np.maximum(np.abs(u) + b, 0) * u / np.abs(u)
    g = W["gate"] @ x
    return W["down"] @ ((g / np.abs(g)) * h * (1 / (1 + np.exp(-np.abs(g)))))


def test_cgu_matches_transcription(f64):
    mod = ComplexGatedUnit(4, expansion=2, seed=5)
    with torch.no_grad():
        mod.act.bias.copy_(torch.linspace(-0.3, 0.3, 8))
    z = torch.randn(4, 2)
    got = as_complex(mod(z)).detach().numpy()
    np.testing.assert_allclose(got, _cgu_oracle(mod, z), rtol=1e-12, atol=1e-12)


def test_cgu_zero_up_projection(f64):
    mod = ComplexGatedUnit(4, expansion=2)
    with torch.no_grad():
        for name in ("up", "gate"):
            getattr(mod, name).weight_r.zero_()
            getattr(mod, name).weight_i.zero_()
    assert mod(torch.randn(4, 2)).abs().max() == 0


def test_cgu_reduces_without_gate(f64):
    # gate of magnitude 1 and phase 0 everywhere: forward = down . modReLU . up scaled by sigmoid(1)
    mod = ComplexGatedUnit(4, expansion=1)
    z = torch.randn(4, 2)
    with torch.no_grad():
        mod.gate.weight_r.zero_()
        mod.gate.weight_i.zero_()
    g = torch.zeros(4, 2)
    g[:, 0] = 1.0
    mod.gate.forward = lambda x: g
    expected = mod.down(mod.act(mod.up(z))) * torch.sigmoid(torch.tensor(1.0))
    torch.testing.assert_close(mod(z), expected)


def test_cgu_rejects_bad_expansion():
    with pytest.raises(ValueError):
        ComplexGatedUnit(4, expansion=0)


@pytest.mark.parametrize("cls", [ComplexGatedUnit, RealGatedUnit])
def test_gated_unit_gradients(f64, cls):
    mod = cls(4, expansion=2, seed=1)
    with torch.no_grad():
        mod.act.bias.copy_(0.2 * torch.randn(8))
    x = torch.randn(3, 4, 2) if cls is ComplexGatedUnit else torch.randn(3, 4)
    w = torch.randn_like(x)
    params = dict(mod.named_parameters(), x=x)

    def loss():
        return (mod(x) * w).sum()

    tape = Tape().watch_module(mod)
    tape.watch("x", x)
    err, name = relative_error(fd_gradients(loss, params, 1e-5), backward(tape, loss()))
    assert err < 1e-4, name


# ---------------------------------------------------------------------------
# RoPE
# ---------------------------------------------------------------------------


def test_rope_table_unit_magnitude():
    table = RopeTable(16, length=300)
    f = table.factors(0, 300)
    assert (cabs(f) - 1).abs().max() < 1e-6
    assert len(table) == 300
    table.factors(500, 4)
    assert len(table) == 504


def test_rope_position_zero_is_identity(f64):
    x = torch.randn(1, 2, 8, 2)
    torch.testing.assert_close(rope_apply(x, RopeTable(8)), x)


def test_rope_phase_shift_and_magnitude(f64):
    table = RopeTable(8)
    x = torch.randn(5, 3, 8, 2)
    y = rope_apply(x, table, start_pos=11)
    torch.testing.assert_close(cabs(y), cabs(x))
    m = torch.arange(11, 16, dtype=torch.float64)[:, None, None]
    expected = m * torch.from_numpy(table.theta)
    assert wrap_angle(phase(y) - phase(x) - expected).abs().max() < 1e-9


def test_rope_relative_position_identity(f64):
    table = RopeTable(8)
    k, q = torch.randn(8, 2), torch.randn(8, 2)
    theta = torch.from_numpy(table.theta)

    def at(v, m):
        return rope_apply(v[None, None], table, m)[0, 0]

    for m in range(9):
        for n in range(9):
            got = conj_inner(at(k, m), at(q, n))
            rot = torch.stack([torch.cos((n - m) * theta), torch.sin((n - m) * theta)], -1)
            per_channel = from_complex(np.conj(as_complex(k).numpy()) * as_complex(q).numpy())
            want = (per_channel[..., 0] * rot[..., 0] - per_channel[..., 1] * rot[..., 1]).sum(), \
                   (per_channel[..., 0] * rot[..., 1] + per_channel[..., 1] * rot[..., 0]).sum()
            torch.testing.assert_close(got, torch.stack(want), rtol=0, atol=1e-12)


def test_rope_head_dim_mismatch():
    with pytest.raises(DimensionError):
        rope_apply(torch.zeros(2, 1, 4, 2), RopeTable(8))


def test_real_rope_preserves_norm_and_relative_dot(f64):
    table = RealRopeTable(8)
    x = torch.randn(6, 2, 8)
    y = real_rope_apply(x, table, 3)
    torch.testing.assert_close(y.norm(dim=-1), x.norm(dim=-1))
    k, q = torch.randn(8), torch.randn(8)

    def at(v, m):
        return real_rope_apply(v[None, None], table, m)[0, 0]

    torch.testing.assert_close(at(k, 2) @ at(q, 5), at(k, 7) @ at(q, 10))
    with pytest.raises(ValueError):
        RealRopeTable(7)


def test_rms_norm(f64):
    x = torch.randn(3, 10)
    y = rms_norm(x, torch.ones(10))
    torch.testing.assert_close(y.square().mean(-1), torch.ones(3))
    assert rms_norm(torch.zeros(10), torch.ones(10)).abs().max() == 0
