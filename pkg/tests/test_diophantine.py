import itertools

import numpy as np
import pytest

from kamqe.diophantine import (Ball, DiophantineParams, complement_measure_estimate, is_in_omega_kappa,
                               min_small_divisor, sample_nonresonant, wave_vectors)
from kamqe.errors import SamplingError
from kamqe.model import Box

PHI = (1 + 5 ** 0.5) / 2
GOLDEN = (1.0, PHI)


def brute_min_divisor(omega, tau, K):
    best, arg = np.inf, None
    for k in itertools.product(range(-K, K + 1), repeat=len(omega)):
        nk = sum(abs(x) for x in k)
        if nk == 0 or nk > K:
            continue
        v = abs(sum(a * b for a, b in zip(omega, k))) * nk ** tau
        if v < best - 1e-15:
            best, arg = v, k
    return best, arg


def test_exact_resonance():
    val, k = min_small_divisor((1.0, 2.0), 1.5, 5)
    assert val == 0.0 and k == (-2, 1)


def test_golden_fixture_matches_brute_force():
    val, k = min_small_divisor(GOLDEN, 1.2, 50)
    bval, bk = brute_min_divisor(GOLDEN, 1.2, 50)
    assert val == pytest.approx(bval, rel=1e-12)
    assert abs(np.dot(k, GOLDEN)) * sum(map(abs, k)) ** 1.2 == pytest.approx(bval, rel=1e-12)
    # regression fixture recorded from the scan
    assert val == pytest.approx(1.0, abs=1e-12) and k == (-1, 0)


def test_scaling_and_permutation(rng):
    w = rng.uniform(0.2, 2.0, 2)
    v1, k1 = min_small_divisor(w, 1.5, 20)
    v2, k2 = min_small_divisor(2 * w, 1.5, 20)
    assert v2 == pytest.approx(2 * v1, rel=1e-12) and k1 == k2
    v3, k3 = min_small_divisor(w[::-1], 1.5, 20)
    assert v3 == pytest.approx(v1, rel=1e-12)
    assert abs(np.dot(k3[::-1], w)) == pytest.approx(abs(np.dot(k1, w)), rel=1e-9, abs=1e-15)


def test_wave_vectors_ordering():
    ks = wave_vectors(2, 3)
    norms = np.abs(ks).sum(1)
    assert np.all(np.diff(norms) >= 0)
    assert len(ks) == sum(4 * j for j in range(1, 4))


def test_membership_resonant_witness():
    region = Box((0.5, 0.5), (1.5, 1.5))
    m = is_in_omega_kappa((1.0, 1.0), DiophantineParams(1e-3, 1.5, 10), region)
    assert not m and m.kappa_star == 0.0
    # the witness is determined up to sign; the lexicographic tie-break picks (-1, 1)
    assert m.k_star in {(1, -1), (-1, 1)}
    assert m.K_max == 10


def test_membership_boundary():
    region = Box((0.5, 0.5), (1.5, 1.5))
    m = is_in_omega_kappa((1.5, 1.0 + 1e-3 * PHI), DiophantineParams(1e-9, 1.5, 10), region)
    assert not m and "boundary" in m.reason


def test_membership_golden():
    region = Ball((0.0, 0.0), 5.0)
    w = np.array(GOLDEN) / np.linalg.norm(GOLDEN)
    fixture, _ = min_small_divisor(w, 1.2, 50)
    assert is_in_omega_kappa(w, DiophantineParams(0.99 * fixture, 1.2, 50), region)
    assert not is_in_omega_kappa(w, DiophantineParams(1.01 * fixture, 1.2, 50), region)


def test_membership_monotone_in_kappa(rng):
    region = Box((0.5, 0.5), (1.5, 1.5))
    for w in rng.uniform(0.6, 1.4, (20, 2)):
        verdicts = [bool(is_in_omega_kappa(w, DiophantineParams(k, 2.5, 20), region)) for k in (0.1, 0.03, 0.01)]
        assert verdicts == sorted(verdicts)


def test_params_validation():
    with pytest.raises(ValueError):
        DiophantineParams(0.1, 0.5).validate(2)
    with pytest.raises(ValueError):
        DiophantineParams(0.1, 2.0, K_max=0).validate(2)


def test_complement_measure_zero_kappa():
    region = Box((0.5, 0.5), (1.5, 1.5))
    m, se = complement_measure_estimate(region, DiophantineParams(0.0, 2.5, 20), 10000, seed=0)
    assert m == 0.0 and se == 0.0


def test_complement_measure_monotone():
    region = Box((0.5, 0.5), (1.5, 1.5))
    ests = [complement_measure_estimate(region, DiophantineParams(k, 2.5, 30), 10000, seed=4) for k in (0.0125, 0.05)]
    (m1, s1), (m2, s2) = ests
    assert m2 >= m1 - 2 * np.hypot(s1, s2)


def test_sample_nonresonant_reverifies():
    region = Box((0.5, 0.5), (1.5, 1.5))
    p = DiophantineParams(1e-4, 2.5, 30)
    for seed in range(5):
        w = sample_nonresonant(region, p, near=(1.0, 1.2), radius=0.1, seed=seed)
        assert np.linalg.norm(w - np.array([1.0, 1.2])) < 0.1
        assert is_in_omega_kappa(w, p, region)


def test_sample_nonresonant_failure():
    region = Box((0.5, 0.5), (1.5, 1.5))
    with pytest.raises(SamplingError):
        sample_nonresonant(region, DiophantineParams(1e-3, 2.5, 10), near=(1.0, 1.0), radius=0.0, max_rejections=50)
