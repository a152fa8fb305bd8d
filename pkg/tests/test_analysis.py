import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phasemem import analysis as A
from phasemem.exceptions import ContractError, DensityMatrixError, InputError
from phasemem.verify import random_density, random_unitary

LN3 = math.log(3)
P_GRID = [round(0.1 * i, 1) for i in range(11)]


# ---------------------------------------------------------------------------
# eigensolver
# ---------------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 24), st.integers(0, 2**31 - 1))
def test_jacobi_matches_lapack(n, seed):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    H = (M + M.conj().T) / 2
    got = np.sort(A.jacobi_eigvalsh(H))
    np.testing.assert_allclose(got, np.linalg.eigvalsh(H), atol=1e-10 * max(1, np.abs(H).max() * n))


def test_jacobi_diagonal_and_degenerate():
    np.testing.assert_allclose(np.sort(A.jacobi_eigvalsh(np.diag([3.0, -1.0, 2.0]))), [-1, 2, 3])
    np.testing.assert_allclose(A.jacobi_eigvalsh(np.eye(4) / 4), [0.25] * 4)


# ---------------------------------------------------------------------------
# entropies
# ---------------------------------------------------------------------------


def test_shannon_examples():
    assert A.shannon_diag(np.eye(3) / 3) == pytest.approx(LN3, abs=1e-12)
    assert A.shannon_diag(np.diag([1.0, 0, 0])) == 0.0
    assert A.shannon_diag(np.diag([0.5, 0.5])) == pytest.approx(math.log(2), abs=1e-12)


def test_von_neumann_examples():
    assert A.von_neumann(A.example_state(0.0)) == pytest.approx(0.0, abs=1e-9)
    assert A.von_neumann(np.eye(3) / 3) == pytest.approx(LN3, abs=1e-12)
    lam = np.array([0.8, 0.1, 0.1])
    assert A.von_neumann(A.example_state(0.3)) == pytest.approx(-(lam * np.log(lam)).sum(), abs=1e-10)
    assert A.von_neumann(A.example_state(0.3)) == pytest.approx(0.639, abs=5e-4)


def test_decoherence_gap_examples():
    assert A.decoherence_gap(A.example_state(0.0)) == pytest.approx(LN3, abs=1e-9)
    assert A.decoherence_gap(np.diag([0.2, 0.3, 0.5])) == pytest.approx(0.0, abs=1e-12)
    gaps = [A.decoherence_gap(A.example_state(p)) for p in P_GRID]
    assert all(a >= b - 1e-12 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] == pytest.approx(0.0, abs=1e-12)


def test_example_state_matrix():
    rho = A.example_state(0.0).rho
    np.testing.assert_allclose(np.diag(rho).real, [1 / 3] * 3, atol=1e-15)
    assert rho[0, 1] == pytest.approx(np.exp(-1j * np.pi / 3) / 3)
    assert rho[1, 0] == pytest.approx(np.exp(1j * np.pi / 3) / 3)
    assert rho[2, 0] == pytest.approx(np.exp(2j * np.pi / 3) / 3)
    assert np.linalg.matrix_rank(rho, tol=1e-10) == 1
    np.testing.assert_allclose(A.example_state(1.0).rho, np.eye(3) / 3, atol=1e-15)


@pytest.mark.parametrize("p", P_GRID)
def test_example_state_eigenvalues(p):
    got = np.sort(A.example_state(p).eigenvalues)
    np.testing.assert_allclose(got, np.sort(A.example_eigenvalues(p)), atol=1e-10)


def test_example_state_half():
    np.testing.assert_allclose(np.sort(A.example_state(0.5).eigenvalues), [1 / 6, 1 / 6, 2 / 3], atol=1e-10)
    with pytest.raises(InputError):
        A.example_state(1.5)


@pytest.mark.parametrize("rho,match", [
    (np.array([[0.5, 0.1], [0.2, 0.5]]), "Hermitian"),
    (np.eye(2), "trace"),
    (np.diag([1.5, -0.5]), "negative"),
    (np.ones(3) / 3, "square"),
])
def test_density_matrix_validation(rho, match):
    with pytest.raises(DensityMatrixError, match=match):
        A.DensityMatrix(rho)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_entropy_properties(n, seed):
    rng = np.random.default_rng(seed)
    rho = random_density(n, rng)
    assert A.shannon_diag(rho) >= A.von_neumann(rho) - 1e-9
    U = random_unitary(n, rng)
    rotated = U @ rho @ U.conj().T
    rotated = (rotated + rotated.conj().T) / 2
    assert abs(A.von_neumann(rotated) - A.von_neumann(rho)) < 1e-8


def test_floor_bound_examples():
    assert A.floor_bound(1.69, 2) == pytest.approx(1.00, abs=0.005)
    assert A.floor_bound(1.69, 4) == pytest.approx(0.30, abs=0.005)
    assert A.floor_bound(1.69, 1) == 1.69
    assert A.floor_bound(0.5, 100) == 0.0
    with pytest.raises(InputError):
        A.floor_bound(1.69, 0.5)


def test_to_bits():
    assert A.to_bits(math.log(2)) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# scaling fits
# ---------------------------------------------------------------------------


def test_planted_power_law():
    ns = [5e6, 1e7, 2.5e7, 5e7, 1e8]
    fit = A.fit_power_law([(n, 7.3 * n ** -0.15, 0.0) for n in ns])
    assert abs(fit.slope + 0.15) < 1e-9
    assert fit.intercept == pytest.approx(math.log10(7.3), abs=1e-9)
    assert fit.residual_stderr < 1e-12
    np.testing.assert_allclose(fit.predict(ns), [7.3 * n ** -0.15 for n in ns], rtol=1e-9)


def test_sigma_propagation():
    assert A.sigma_log10(4.0, 0.1) == pytest.approx(0.01086, abs=5e-6)
    y, s = np.array([2.0, 5.0]), np.array([0.3, 0.2])
    fit = A.fit_power_law([(1e6, 2.0, 0.3), (1e7, 5.0, 0.2)])
    assert list(fit.sigma_log) == list(s / (y * math.log(10)))


def test_two_point_published_endpoints():
    fit = A.fit_power_law([(5e6, 5.56, 0.0), (1e8, 3.56, 0.0)])
    assert fit.slope == pytest.approx(math.log10(3.56 / 5.56) / math.log10(20), abs=1e-12)
    assert abs(fit.slope + 0.148) <= 0.002


def test_fit_permutation_invariant():
    rng = np.random.default_rng(3)
    pts = [(10 ** rng.uniform(6, 8), rng.uniform(2, 6), 0.1) for _ in range(7)]
    a = A.fit_power_law(pts)
    b = A.fit_power_law(list(reversed(pts)))
    assert (a.slope, a.intercept, a.residual_stderr) == (b.slope, b.intercept, b.residual_stderr)


def test_fit_matches_lstsq():
    rng = np.random.default_rng(1)
    n = 10 ** rng.uniform(6, 8, 9)
    y = 3 * n ** -0.1 * np.exp(rng.normal(0, 0.05, 9))
    fit = A.fit_power_law(list(zip(n, y)))
    X = np.stack([np.log10(n), np.ones(9)], 1)
    (slope, icpt), *_ = np.linalg.lstsq(X, np.log10(y), rcond=None)
    assert fit.slope == pytest.approx(slope, abs=1e-12)
    assert fit.intercept == pytest.approx(icpt, abs=1e-12)
    assert fit.slope_stderr > 0


@pytest.mark.parametrize("pts", [[(1e6, 2.0)], [(1e6, 2.0), (1e7, -1.0)], [(1e6, 2.0), (1e6, 3.0)]])
def test_fit_rejects(pts):
    with pytest.raises(InputError):
        A.fit_power_law(pts)


def test_crossover_hand_algebra():
    a = A.FitResult(slope=-1.0, intercept=0.0)
    b = A.FitResult(slope=-2.0, intercept=1.0)
    c = A.fit_crossover(a, b)
    assert (c.log10_n, c.log10_y) == (1.0, -1.0)
    assert A.fit_crossover(a, a) == "parallel"
    with pytest.raises(ContractError):
        A.fit_crossover(a, A.FitResult(-2.0, 1.0, space="ppl"))


def test_crossover_from_reported_anchors():
    pam = A.anchored_fit(-0.15, 1e8, 3.56)
    sam = A.anchored_fit(-0.12, 1e8, 3.26)
    c = A.fit_crossover(pam, sam)
    assert 1e9 <= c.n <= 1e10
    # oracle: solve 3.56 (N/1e8)^-0.15 = 3.26 (N/1e8)^-0.12 directly
    log_ratio = math.log10(3.56 / 3.26) / 0.03
    assert c.log10_n == pytest.approx(8 + log_ratio, abs=1e-9)


def test_scaling_csv_and_report(tmp_path):
    path = tmp_path / "s.csv"
    rows = ["params,metric,std,label"]
    for n in (5e6, 1e7, 1e8):
        rows.append(f"{n},{4 * (n / 1e6) ** -0.15},0.01,pam")
        rows.append(f"{n},{3.5 * (n / 1e6) ** -0.1},0.02,sam")
    path.write_text("\n".join(rows) + "\n")
    groups = A.read_scaling_csv(path)
    assert list(groups) == ["pam", "sam"] and len(groups["pam"]) == 3
    rep = A.scaling_report(groups)
    assert rep["fits"]["pam"]["slope"] == pytest.approx(-0.15, abs=1e-9)
    want = math.log10(4 / 3.5) / 0.05 + 6
    assert rep["crossover"]["log10_params"] == pytest.approx(want, abs=1e-9)
    (tmp_path / "bad.csv").write_text("params,metric\n1,2\n")
    with pytest.raises(InputError):
        A.read_scaling_csv(tmp_path / "bad.csv")


# ---------------------------------------------------------------------------
# phase coherence
# ---------------------------------------------------------------------------


def _table(rows):
    return np.array(rows, dtype=np.complex128)


def test_self_and_rotated_pairs():
    z = np.array([1 + 1j, 0.5 - 2j, 3j])
    E = _table([z, 1j * z, np.zeros(3)])
    pairs = [A.PairRecord((0,), (0,), "self"), A.PairRecord((0,), (1,), "rot"), A.PairRecord((0,), (2,), "zero")]
    rep = A.phase_coherence(E, pairs)
    assert rep.skipped == 1 and len(rep.records) == 2
    self_, rot = rep.records
    assert self_.phase_diff == pytest.approx(0.0, abs=1e-12) and self_.coherence == pytest.approx(1.0)
    assert rot.phase_diff == pytest.approx(math.pi / 2, abs=1e-12) and rot.coherence == pytest.approx(1.0)
    assert rep.by_label["rot"]["n"] == 1


def test_phase_coherence_invariances():
    rng = np.random.default_rng(0)
    E = rng.standard_normal((4, 16)) + 1j * rng.standard_normal((4, 16))
    pair = [A.PairRecord((0,), (1,), "x")]
    base = A.phase_coherence(E, pair).records[0]
    glob = E * np.exp(0.9j)
    assert A.phase_coherence(glob, pair).records[0].coherence == pytest.approx(base.coherence, abs=1e-12)
    rel = E.copy()
    rel[1] *= np.exp(0.4j)
    shifted = A.phase_coherence(rel, pair).records[0]
    assert shifted.coherence == pytest.approx(base.coherence, abs=1e-12)
    drift = (shifted.phase_diff - base.phase_diff - 0.4 + math.pi) % (2 * math.pi) - math.pi
    assert drift == pytest.approx(0.0, abs=1e-12)


def test_random_coherence_concentration():
    d, n = 64, 1000
    rng = np.random.default_rng(5)
    E = rng.standard_normal((2 * n, d)) + 1j * rng.standard_normal((2 * n, d))
    pairs = [A.PairRecord((2 * i,), (2 * i + 1,), "random") for i in range(n)]
    mean = A.phase_coherence(E, pairs).by_label["random"]["mean_coherence"]
    # |<u|v>|^2 ~ Beta(1, d-1) for uniform complex unit vectors, so E|<u|v>| = G(d) G(3/2) / G(d + 1/2)
    exact = math.exp(math.lgamma(d) + math.lgamma(1.5) - math.lgamma(d + 0.5))
    assert exact == pytest.approx(math.sqrt(math.pi / 4) / math.sqrt(d), rel=0.01)
    assert mean == pytest.approx(exact, abs=0.01)
    assert mean == pytest.approx(0.111, abs=0.01)


def test_multi_token_words_use_mean():
    E = _table([[1, 0], [0, 1], [1, 1]])
    rec = A.phase_coherence(E, [A.PairRecord((0, 1), (2,), "syn")]).records[0]
    assert rec.coherence == pytest.approx(1.0)


def test_split_real_table_and_bad_ids():
    E = np.zeros((2, 3, 2))
    E[:, :, 0] = 1
    assert A.phase_coherence(E, [A.PairRecord((0,), (1,), "s")]).records[0].coherence == pytest.approx(1.0)
    with pytest.raises(InputError):
        A.phase_coherence(E, [A.PairRecord((0,), (5,), "s")])
    with pytest.raises(InputError):
        A.phase_coherence(np.zeros((2, 3)), [])


def test_pair_file_round_trip(tmp_path):
    (tmp_path / "p.tsv").write_text("# comment\nhappy\tglad\tsynonym\n\nhot\tcold\tantonym\n", encoding="utf-8")
    recs = A.read_pairs(tmp_path / "p.tsv", lambda w: list(w.encode()))
    assert [r.label for r in recs] == ["synonym", "antonym"]
    assert recs[0].word_a == tuple(b"happy") and recs[0].text_b == "glad"
    done = A.phase_coherence(np.ones((256, 4), dtype=complex), recs).records
    A.write_pairs_csv(tmp_path / "out.csv", done)
    lines = (tmp_path / "out.csv").read_text().splitlines()
    assert lines[0] == "word_a,word_b,label,phase_diff_rad,coherence"
    assert lines[1].startswith("happy,glad,synonym,")
    (tmp_path / "bad.tsv").write_text("a\tb\n")
    with pytest.raises(InputError, match=":1:"):
        A.read_pairs(tmp_path / "bad.tsv", list)
