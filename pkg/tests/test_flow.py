import math

import numpy as np
import pytest

from kamqe.diophantine import DiophantineParams
from kamqe.errors import CertificationFailure, DomainError
from kamqe.flow import (QuasiConfig, SpeedBounds, SurfaceAverageTable, certify_B, count_in_windows,
                        covering_intervals, gram_pipeline, gram_test, haar_frame, merge_intervals, mu_fn_from,
                        mu_speeds, non_concentration_scan, qe_speed_fraction, qe_statistic, qe_statistic_at,
                        speed_bounds, surface_speed_range, weyl_counts, windows)
from kamqe.kam import KamOptions, leading_K0
from kamqe.model import Annulus, Box, FourierHamiltonian, ref2
from kamqe.quantum import QuasiEigenFamily, band_window, lattice_modes, quantize, quasi_eigenvalues, spectrum

BAND = (0.45, 0.55)
FULL = Box((-1.5, -1.5), (1.5, 1.5))
REGION = Box((-1.1, -1.1), (-0.5, 1.1))
PARAMS = DiophantineParams(1e-3, 1.5, 30)


def free(extra=()):
    terms = [{"k": (0, 0), "i_deg": (2, 0), "coeff": 0.5}, {"k": (0, 0), "i_deg": (0, 2), "coeff": 0.5}]
    return FourierHamiltonian.from_terms(2, terms + list(extra), FULL)


def symbol(terms):
    return FourierHamiltonian.from_terms(2, terms, FULL)


ONE = symbol([{"k": (0, 0), "coeff": 1.0}])
I1 = symbol([{"k": (0, 0), "i_deg": (1, 0), "coeff": 1.0}])


def family(mu, h=0.1, t=0.0):
    mu = np.asarray(mu, float)
    m = np.stack([np.arange(len(mu)), np.zeros(len(mu), int)], axis=1)
    return QuasiEigenFamily(m, h * m.astype(float), mu, h, (0, 0), 2.0, t)


def shell():
    return Annulus((0.0, 0.0), math.sqrt(2 * BAND[0]), math.sqrt(2 * BAND[1]))


def lattice_I1_sum(h):
    """h^2 sum over lattice points in the energy band of (h m_1)^2, by direct enumeration."""
    R = int(math.ceil(math.sqrt(2 * BAND[1]) / h)) + 1
    total = 0.0
    for m1 in range(-R, R + 1):
        for m2 in range(-R, R + 1):
            e = 0.5 * ((h * m1) ** 2 + (h * m2) ** 2)
            if BAND[0] <= e <= BAND[1]:
                total += (h * m1) ** 2
    return h * h * total


# ---- qe statistic ----------------------------------------------------------

def test_qe_identity_is_zero(H_ref):
    for t in (0.0, 0.01):
        avg = SurfaceAverageTable(H_ref, ONE, BAND, t, bins=4, n_samples=100)
        assert np.all(avg.values == 1.0)
    assert qe_statistic_at(H_ref, ONE, 0.1, BAND, t=0.0, averages=avg) == 0.0
    v = qe_statistic_at(H_ref, ONE, 0.1, BAND, t=0.01, averages=avg)
    assert 0.0 <= v < 1e-25


def test_qe_integrable_matches_lattice_sum(H_ref):
    zero = lambda E: np.zeros_like(E)
    for h in (0.1, 0.05):
        v = qe_statistic_at(H_ref, I1, h, BAND, t=0.0, averages=zero)
        assert v == pytest.approx(lattice_I1_sum(h), rel=1e-12)


def test_qe_integrable_near_circle_integral(H_ref):
    # pi (b^2 - a^2): integral of I_1^2 over the action annulus
    target = math.pi * (BAND[1] ** 2 - BAND[0] ** 2)
    avg = SurfaceAverageTable(H_ref, I1, BAND, 0.0, bins=8, n_samples=400)
    assert np.all(np.abs(avg.values) < 5 * avg.stderr + 1e-12)
    v1 = qe_statistic_at(H_ref, I1, 0.1, BAND, averages=avg)
    v2 = qe_statistic_at(H_ref, I1, 0.05, BAND, averages=avg)
    assert v2 == pytest.approx(target, rel=0.1)
    assert v2 >= 0.5 * v1


def test_qe_haar_mock_is_small(H_ref):
    zero = lambda E: np.zeros_like(E)
    exact = qe_statistic_at(H_ref, I1, 0.1, BAND, averages=zero)
    mock = qe_statistic_at(H_ref, I1, 0.1, BAND, averages=zero, frame=haar_frame(3))
    assert 0.0 <= mock < 0.1 * exact


def test_qe_empty_band_raises():
    with pytest.raises(DomainError):
        qe_statistic(np.array([1.0, 2.0]), np.eye(2), np.eye(2), (5.0, 6.0), 0.0, 0.1, 2)


def test_qe_nonnegative(rng):
    A = rng.standard_normal((6, 6))
    A = A + A.T
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    v = qe_statistic(np.linspace(0, 1, 6), Q, A, (0.0, 1.0), lambda E: rng.standard_normal(len(E)), 0.1, 2)
    assert v >= 0.0


# ---- speed bounds ----------------------------------------------------------

@pytest.fixture(scope="module")
def bounds():
    return speed_bounds(ref2(), BAND, (0.0, 0.01), PARAMS, 0.1, REGION, n_E=3, n_t=2, n_samples=400)


def test_slow_torus_ref2(bounds):
    b = bounds
    assert b.Q_minus <= b.Q_plus
    assert abs(b.Q_minus) < 0.15 and abs(b.Q_plus) < 0.15
    # torus average of dtH is I_1, and I = omega for |I|^2/2
    assert b.torus_speed == pytest.approx(b.omega0[0], abs=1e-9)
    assert np.allclose(b.I0, b.omega0, atol=1e-9)
    assert b.omega0[0] <= -0.5
    assert b.torus_speed < b.Q_minus - 2 * b.c
    assert BAND[0] <= 0.5 * float(b.I0 @ b.I0) <= BAND[1]


def test_constant_speed_has_no_slow_torus():
    H = free([{"k": (0, 0), "t_deg": 1, "coeff": 1.0}])
    with pytest.raises(CertificationFailure):
        speed_bounds(H, BAND, (0.0, 0.01), PARAMS, 0.1, REGION, n_E=2, n_t=2, n_samples=200)


def test_speed_range_monotone_in_band(H_ref):
    small = surface_speed_range(H_ref, (0.45, 0.55), (0.0, 0.01), n_E=3, n_t=2, n_samples=300)
    big = surface_speed_range(H_ref, (0.40, 0.60), (0.0, 0.01), n_E=5, n_t=2, n_samples=300)
    assert big[0] <= small[0]
    assert big[1] >= small[1]


def test_certify_B():
    b = SpeedBounds(0.0, 0.05, 0.1, 0.05, 0.01, np.zeros(2), np.zeros(2), -0.8)
    certify_B(b, -0.5)
    assert b.certified and -0.5 < b.B < b.Q_minus - b.c
    assert b.gap > b.c
    b2 = certify_B(SpeedBounds(0.0, 0.05, 0.1, 0.05, 0.01, np.zeros(2), np.zeros(2), -0.8), -0.05)
    assert not b2.certified and math.isnan(b2.B) and "speed" in b2.reason


# ---- windows and counts ----------------------------------------------------

def test_window_halfwidth():
    ws = windows(family([0.5]))
    assert np.allclose(ws.intervals, [[0.499, 0.501]], atol=1e-15)
    assert ws.halfwidth == pytest.approx(1e-3, rel=1e-14)


def test_close_windows_merge():
    ws = windows(family([0.5, 0.5015, 0.6]))
    assert len(ws.merged) == 2
    assert np.allclose(ws.merged[0], [0.499, 0.5025])


def test_window_measure(rng):
    mu = rng.uniform(0.45, 0.55, 40)
    ws = windows(family(mu))
    assert ws.measure() <= 2e-3 * len(mu) + 1e-15
    spread = windows(family(np.arange(10) * 0.01))
    assert spread.measure() == pytest.approx(2e-3 * 10, rel=1e-12)
    assert windows(family([0.5, 0.5])).measure() < 2 * 2e-3


def test_merge_preserves_union(rng):
    iv = np.sort(rng.uniform(0, 1, (30, 2)), axis=1)
    merged = merge_intervals(iv)
    assert np.all(merged[1:, 0] > merged[:-1, 1])
    x = rng.uniform(0, 1, 2000)
    raw = np.any((x[:, None] >= iv[:, 0]) & (x[:, None] <= iv[:, 1]), axis=1)
    mer = np.any((x[:, None] >= merged[:, 0]) & (x[:, None] <= merged[:, 1]), axis=1)
    assert np.array_equal(raw, mer)


def test_count_empty():
    assert count_in_windows(np.linspace(0, 1, 50), windows(family([]))) == 0


def test_count_brute_force(rng):
    mu = rng.uniform(0.45, 0.55, 25)
    E = np.concatenate([rng.uniform(0.44, 0.56, 300), mu + 0.999e-3, mu - 1.001e-3])
    ws = windows(family(mu))
    brute = sum(1 for e in E if any(abs(e - m) <= 1e-3 for m in mu))
    assert count_in_windows(E, ws) == brute
    assert count_in_windows(E, ws) <= len(E)


def test_count_integrable_coincidence():
    H0, h = free(), 0.1
    fam = quasi_eigenvalues(H0, h, None, shell(), 2.0, 0.0, volume=False)
    ws = windows(fam)
    P = quantize(H0, h, None, modes=lattice_modes(band_window(H0, BAND, h), h))
    E = spectrum(P, BAND).E
    band_E = E[(E >= BAND[0]) & (E <= BAND[1])]
    expected = int(np.sum((fam.mu >= BAND[0]) & (fam.mu <= BAND[1])))
    assert count_in_windows(band_E, ws) == len(band_E) == expected
    # every eigenvalue of the full operator: ratio N / #M = 1
    E_all = spectrum(quantize(H0, h, None, modes=lattice_modes(FULL, h))).E
    assert count_in_windows(E_all, ws) == fam.count


# ---- covering --------------------------------------------------------------

def _static(ts, mus):
    return [family(mus, t=t) for t in ts]


def test_covering_never_in_window():
    ts = np.linspace(0, 1, 11)
    rep = covering_intervals(ts, np.full(11, 5.0), _static(ts, [0.0]), lambda m, t: np.zeros(len(np.atleast_1d(t))))
    assert rep.intervals == [] and rep.m_C == 0.0


def test_covering_linear_crossing():
    ts = np.linspace(0, 1, 201)
    v, w = 0.01, 1e-3
    E = v * (ts - 0.5)
    rep = covering_intervals(ts, E, _static(ts, [0.0]), lambda m, t: np.zeros(len(np.atleast_1d(t))))
    assert len(rep.intervals) == 1
    assert abs(rep.m_C - 2 * w / v) <= ts[1] - ts[0]
    assert rep.covers_hits() and rep.distinct()


def test_covering_tie_break_nearest():
    ts = np.linspace(0, 1, 5)
    mus = [0.0, 5e-4]
    mu_fn = lambda m, t: np.full(len(np.atleast_1d(t)), mus[int(np.atleast_2d(m)[0, 0])])
    rep = covering_intervals(ts, np.full(5, 4e-4), _static(ts, mus), mu_fn)
    assert [tuple(m) for m in rep.m] == [(1, 0)]
    assert rep.intervals == [(0, 4)]


# ---- scan, covering and Gram on REF2 ----------------------------------------

TS = np.linspace(0.0, 0.01, 6)


@pytest.fixture(scope="module")
def scan(bounds):
    return non_concentration_scan(ref2(), [0.1], BAND, TS, bounds, PARAMS, QuasiConfig(n_S=50), KamOptions(), 0)


def test_scan_rows(scan):
    rows = [r for r in scan.rows if r["h"] == 0.1]
    assert len(rows) == len(TS)
    for r in rows:
        assert r["M_count"] > 0
        assert r["ratio"] == r["N"] / r["M_count"]
        assert r["flagged"] == (r["ratio"] < 0.5)
    assert scan.flagged_fraction[0.1] == sum(r["flagged"] for r in rows) / len(rows)


def test_mu_fn_matches_family(scan):
    mu = mu_fn_from(scan.K0, 0.1, (0, 0))
    f = scan.families[0.1][3]
    assert np.allclose([mu(m, f.t)[0] for m in f.m], f.mu, atol=1e-14)


def test_mu_speeds_below_bound(scan, bounds):
    sp = np.concatenate([mu_speeds(scan.K0, f) for f in scan.families[0.1]])
    assert sp.max() == pytest.approx(scan.B_by_h[0.1])
    assert sp.max() < bounds.Q_minus - bounds.c


def test_scan_ratio_translation_invariant(scan):
    c = 0.375
    tr = scan.trajectories[0.1]
    for i, f in enumerate(scan.families[0.1]):
        shifted = QuasiEigenFamily(f.m, f.actions, f.mu + c, f.h, f.theta, f.L, f.t)
        assert count_in_windows(tr.E[i] + c, windows(shifted)) == count_in_windows(tr.E[i], windows(f))


def test_covering_invariants_ref2(scan):
    h, w = 0.1, 1e-3
    tr = scan.trajectories[h]
    E, _ = tr.series_matrix()
    mu = mu_fn_from(scan.K0, h, (0, 0))
    seen = 0
    for j in range(E.shape[1]):
        rep = covering_intervals(tr.ts, E[:, j], scan.families[h], mu, BAND, j)
        assert rep.covers_hits() and rep.distinct() and rep.almost_disjoint()
        for (i0, i1), m in zip(rep.intervals, rep.m):
            seen += 1
            if i1 == i0:
                continue
            mus = mu(np.array([m]), tr.ts[[i0, i1]])
            B_hat = abs(mus[1] - mus[0]) / (tr.ts[i1] - tr.ts[i0])
            assert abs(E[i1, j] - E[i0, j]) <= 2 * w + B_hat * (tr.ts[i1] - tr.ts[i0]) + 1e-12
    assert seen > 0


def test_qe_speed_fraction_range(scan, bounds):
    f = qe_speed_fraction(scan.trajectories[0.1], bounds.Q_minus, bounds.Q_plus, bounds.eps)
    assert 0.0 <= f <= 1.0


def test_gram_integrable_identity():
    H0, h = free(), 0.1
    fam = quasi_eigenvalues(H0, h, None, shell(), 2.0, 0.0, volume=False)
    op = quantize(H0, h, None, modes=lattice_modes(FULL, h))
    sp = spectrum(op)
    rep = gram_test(fam, op, sp.E, sp.U)
    assert rep.hs_norm < 1e-14
    assert rep.invertible and rep.dim_U >= rep.n_M
    assert np.all(rep.proj_perp < 1e-7)


def test_gram_perturbed_bound(scan):
    h, t = 0.1, float(TS[3])
    K, st = leading_K0(ref2(), t, scan.K0.domain, KamOptions())
    from kamqe.flow import action_set
    S = action_set(scan.K0, scan.omegas, t)
    fam, op, rep = gram_pipeline(K, st.H1_new, h, None, S, 2.0, t, scan.K0.domain)
    assert rep.n_M == fam.count > 0
    assert rep.bound_holds(h, 2)
    r = rep.residuals.max()
    assert rep.hs_norm <= 1.1 * rep.n_M * (r / h ** 3) ** 2 + 1e-12
    assert rep.invertible == (rep.hs_norm < 1.0)
    if rep.invertible:
        assert rep.dim_U >= rep.n_M


def test_gram_empty_window_is_contradiction():
    H0, h = free(), 0.1
    fam = quasi_eigenvalues(H0, h, None, shell(), 2.0, 0.0, volume=False)
    op = quantize(H0, h, None, modes=lattice_modes(FULL, h))
    sp = spectrum(op)
    rep = gram_test(fam, op, sp.E + 10.0, sp.U)
    assert rep.dim_U == 0 and rep.contradiction and not rep.invertible


# ---- Weyl counts -----------------------------------------------------------

def lattice_count(h):
    R = int(math.ceil(math.sqrt(2 * BAND[1]) / h)) + 1
    m = np.arange(-R, R + 1)
    e = 0.5 * h * h * (m[:, None] ** 2 + m[None, :] ** 2)
    return int(np.sum((e >= BAND[0]) & (e <= BAND[1])))


def test_weyl_h005():
    out = weyl_counts(free(), 0.05, BAND, n_samples=400_000)
    assert out["volume_prediction"] == pytest.approx(0.2 * math.pi / 0.05 ** 2, rel=0.01)
    assert out["band_count"] == lattice_count(0.05)
    assert out["band_count"] == pytest.approx(out["volume_prediction"], rel=0.1)
    assert out["G_count"] == out["band_count"]


def test_weyl_quadrupling():
    c1 = weyl_counts(free(), 0.1, BAND, n_samples=10_000)["band_count"]
    c2 = weyl_counts(free(), 0.05, BAND, n_samples=10_000)["band_count"]
    assert c2 / c1 == pytest.approx(4.0, rel=0.15)


def test_weyl_fattened_band():
    out = weyl_counts(free(), 0.1, BAND, delta=0.01, Mhat=2.0, n_samples=100_000)
    assert out["G_count"] >= out["band_count"]
    assert out["G_prediction"] > out["volume_prediction"]
