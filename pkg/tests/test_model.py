import json

import numpy as np
import pytest
from conftest import build, naive_eval, random_terms

from kamqe.errors import DegeneracyError, DiagnosticUnavailable, DomainError, NoSolutionError
from kamqe.model import (Annulus, Box, EnergyBand, FourierHamiltonian, energy_surface_average, evaluate,
                         flatness_fit, frequency, gevrey_decay_check, hessian, legendre_inverse, load_model,
                         nondegeneracy, pendulum, ref2, torus_average)


# ---- eval -----------------------------------------------------------------

def test_eval_ref2_examples(H_ref):
    assert evaluate(H_ref, (0, 0), (1, 0), 0.1) == pytest.approx(0.63, abs=1e-15)
    for th in [(0, 0), (1.3, -2.0), (3.0, 0.5)]:
        assert evaluate(H_ref, th, (1, 0), 0.0) == pytest.approx(0.5, abs=1e-15)


def test_eval_matches_naive_summation(rng):
    terms = random_terms(rng)
    H = build(terms)
    for _ in range(50):
        th = rng.uniform(-np.pi, np.pi, 2)
        I = rng.uniform(-1, 1, 2)
        t = rng.uniform(-1, 1)
        ref = naive_eval(terms, th, I, t)
        assert evaluate(H, th, I, t) == pytest.approx(ref, rel=1e-14, abs=1e-14)


def test_eval_real_and_domain_error(rng):
    H = build(random_terms(rng))
    th = rng.uniform(-np.pi, np.pi, (20, 2))
    I = rng.uniform(-1, 1, (20, 2))
    v = H(th, I, 0.3)
    assert np.isrealobj(v)
    with pytest.raises(DomainError):
        evaluate(H, (0, 0), (1.5, 0), 0.0)


def test_reality_condition_enforced():
    modes = {(1, 0): np.array([[1.0]]), (-1, 0): np.array([[2.0]])}
    with pytest.raises(ValueError):
        FourierHamiltonian.from_modes(modes, Box((-1, -1), (1, 1)))


def test_json_round_trip(rng):
    H = build(random_terms(rng))
    H2 = FourierHamiltonian.from_json(H.to_json())
    th, I = rng.uniform(-3, 3, (10, 2)), rng.uniform(-1, 1, (10, 2))
    assert np.array_equal(H(th, I, 0.2), H2(th, I, 0.2))
    doc = json.loads(H.to_json())
    assert doc["n"] == 2 and "modes" in doc


def test_load_model_builtin_and_inline(H_ref):
    assert load_model("REF2").n_modes == H_ref.n_modes
    assert load_model(H_ref.to_dict()).n_modes == H_ref.n_modes


# ---- frequency / hessian / legendre ---------------------------------------

def test_frequency_examples(H_ref):
    assert np.allclose(frequency(H_ref, (0.6, 0.8), 0.0), (0.6, 0.8), atol=1e-15)
    assert np.allclose(frequency(H_ref, (0.6, 0.8), 0.1), (0.7, 0.8), atol=1e-15)
    assert nondegeneracy(H_ref, (0.3, -0.2)) == pytest.approx(1.0, abs=1e-14)


def test_frequency_is_gradient_of_torus_average(rng):
    H = build(random_terms(rng))
    step = 1e-5
    for _ in range(5):
        I = rng.uniform(-0.8, 0.8, 2)
        fd = [(torus_average(H, I + step * e, 0.4) - torus_average(H, I - step * e, 0.4)) / (2 * step)
              for e in np.eye(2)]
        assert np.allclose(frequency(H, I, 0.4), fd, atol=1e-8)


def _quad(a, b, c, box=Box((-2, -2), (2, 2))):
    return FourierHamiltonian.from_terms(2, [
        {"k": (0, 0), "i_deg": (2, 0), "coeff": a / 2}, {"k": (0, 0), "i_deg": (0, 2), "coeff": c / 2},
        {"k": (0, 0), "i_deg": (1, 1), "coeff": b}], box)


def test_legendre_inverse_examples(H_ref):
    I = legendre_inverse(H_ref.at(0.0).average(), (-0.7, 0.7141), 0.0)
    assert np.allclose(I, (-0.7, 0.7141), atol=1e-13)
    H = _quad(1.0, 0.25, 1.0)
    W = np.array([[0.3, -0.4], [0.1, 0.9]])
    expect = np.linalg.solve(np.array([[1, 0.25], [0.25, 1]]), W.T).T
    assert np.allclose(legendre_inverse(H, W, 0.0), expect, atol=1e-12)


def test_legendre_inverse_cubic_residual(rng):
    H = FourierHamiltonian.from_terms(2, [
        {"k": (0, 0), "i_deg": (2, 0), "coeff": 0.5}, {"k": (0, 0), "i_deg": (0, 2), "coeff": 0.5},
        {"k": (0, 0), "i_deg": (3, 0), "coeff": 0.1}], Box((-1, -1), (1, 1)))
    I_true = rng.uniform(-0.8, 0.8, (100, 2))
    W = frequency(H, I_true, 0.0)
    I = legendre_inverse(H, W, 0.0)
    assert np.abs(frequency(H, I, 0.0) - W).max() < 1e-12
    assert np.allclose(I, I_true, atol=1e-10)


def test_legendre_inverse_unreachable_frequency():
    # grad(I^3) = 3 I^2 >= 0 never equals -1; Newton either stalls or hits I = 0
    H = FourierHamiltonian.from_terms(1, [{"k": (0,), "i_deg": (3,), "coeff": 1.0}], Box((-1,), (1,)))
    with pytest.raises((NoSolutionError, DegeneracyError)):
        legendre_inverse(H, (-1.0,), 0.0)


def test_legendre_inverse_singular_start():
    H = FourierHamiltonian.from_terms(1, [{"k": (0,), "i_deg": (3,), "coeff": 1.0}], Box((-1,), (1,)))
    with pytest.raises(DegeneracyError):
        legendre_inverse(H, (0.5,), 0.0)


def test_hessian_symbolic(rng):
    H = _quad(2.0, 0.5, 3.0)
    assert np.allclose(hessian(H, (0.1, 0.2), 0.0), [[2.0, 0.5], [0.5, 3.0]], atol=1e-14)


# ---- averages --------------------------------------------------------------

def test_torus_average_examples(H_ref, rng):
    I = rng.uniform(-1, 1, (7, 2))
    assert np.allclose(torus_average(H_ref, I, 0.0, "dtH"), I[:, 0], atol=1e-15)
    assert np.allclose(torus_average(H_ref, I, 0.0), 0.5 * (I ** 2).sum(1), atol=1e-15)


def test_torus_average_quadrature_oracle(rng):
    H = build(random_terms(rng))
    I, t = np.array([0.3, -0.6]), 0.7
    g = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    T1, T2 = np.meshgrid(g, g, indexing="ij")
    th = np.stack([T1.ravel(), T2.ravel()], 1)
    quad = H(th, np.tile(I, (len(th), 1)), t).mean()
    assert torus_average(H, I, t) == pytest.approx(quad, abs=1e-13)


def test_torus_average_linear(rng):
    A, B = build(random_terms(rng)), build(random_terms(rng))
    I = rng.uniform(-1, 1, (5, 2))
    assert np.allclose(torus_average(A + B * 2.0, I, 0.2), torus_average(A, I, 0.2) + 2 * torus_average(B, I, 0.2))


def test_surface_average_normalisation(H_ref):
    one = FourierHamiltonian.from_terms(2, [{"k": (0, 0), "coeff": 1.0}], H_ref.domain)
    r = energy_surface_average(H_ref, one, 0.5, 0.0, 500, seed=3)
    assert r.value == 1.0 and r.stderr == 0.0


def test_surface_average_symmetry(H_ref):
    r = energy_surface_average(H_ref, H_ref.d_t(), 0.5, 0.0, 2000, seed=1)
    assert abs(r.value) < 3 * r.stderr + 1e-12


def test_surface_average_I1_squared(H_ref):
    E = 0.5
    obs = FourierHamiltonian.from_terms(2, [{"k": (0, 0), "i_deg": (2, 0), "coeff": 1.0}], H_ref.domain)
    r = energy_surface_average(H_ref.at(0.0), obs, E, 0.0, 4000, seed=2)
    # circle of radius sqrt(2E): <I1^2> = r^2 / 2 = E
    assert abs(r.value - E) < 3 * r.stderr


def test_surface_average_outside_range(H_ref):
    with pytest.raises(DomainError):
        energy_surface_average(H_ref, H_ref, 50.0, 0.0, 100)


def test_energy_band_regular(H_ref):
    band = EnergyBand(0.45, 0.55, 0.5, 0.1)
    band.check_regular(H_ref)
    with pytest.raises(ValueError):
        EnergyBand(0.55, 0.45, 0.5, 0.1)


def test_annulus_domain():
    A = Annulus((0.0, 0.0), 0.5, 1.0)
    assert A.contains(np.array([[0.75, 0.0]]))[0]
    assert not A.contains(np.array([[0.1, 0.0]]))[0]
    assert A.volume() == pytest.approx(np.pi * 0.75)


# ---- decay diagnostics -----------------------------------------------------

def test_gevrey_zero_is_flat():
    Z = FourierHamiltonian.from_terms(1, [], Box((0.8,), (1.2,)))
    assert gevrey_decay_check(Z).flat


def test_gevrey_synthetic_rate():
    fit = gevrey_decay_check({j: np.exp(-j) for j in range(1, 15)}, rho=1.0)
    assert fit.rate == pytest.approx(1.0, abs=0.05)


def test_gevrey_insufficient():
    with pytest.raises(DiagnosticUnavailable):
        gevrey_decay_check(pendulum())


def test_flatness_fit_recovers_rate():
    d = np.linspace(0.1, 1.0, 20)
    rho = 2.0
    v = np.exp(1.0 - 0.7 * d ** (-1 / (rho - 1)))
    fit = flatness_fit(d, v, rho)
    assert fit.rate == pytest.approx(0.7, rel=1e-8)
