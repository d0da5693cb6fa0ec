import numpy as np
import pytest

from kamqe.diophantine import min_small_divisor
from kamqe.errors import PreconditionError, SmallDivisorError
from kamqe.homological import (TorusFunction, apply_Lomega, check_growth_bound, random_mean_free, remove_mean,
                               solve_homological)

PHI = (1 + 5 ** 0.5) / 2
OMEGA = np.array([1.0, PHI])


def cos1():
    return TorusFunction(np.array([[1, 0], [-1, 0]]), np.array([0.5, 0.5]))


def coef_map(f):
    return {tuple(k): c for k, c in zip(f.ks.tolist(), f.coef)}


def test_cos_to_sin(rng):
    u = solve_homological(cos1(), OMEGA)
    th = rng.uniform(-np.pi, np.pi, (20, 2))
    assert np.allclose(u(th).real, np.sin(th[:, 0]), atol=1e-15)
    assert abs(u(np.zeros(2))[0]) < 1e-15


def test_zero_in_zero_out():
    f = TorusFunction(np.array([[1, 0], [-1, 0]]), np.zeros(2))
    assert np.all(solve_homological(f, OMEGA).coef == 0)


def test_apply_examples(rng):
    sin1 = TorusFunction(np.array([[1, 0], [-1, 0]]), np.array([-0.5j, 0.5j]))
    th = rng.uniform(-np.pi, np.pi, (10, 2))
    assert np.allclose(apply_Lomega(sin1, OMEGA)(th).real, np.cos(th[:, 0]), atol=1e-15)
    const = TorusFunction(np.array([[0, 0]]), np.array([2.0]))
    assert np.all(apply_Lomega(const, OMEGA).coef == 0)


@pytest.mark.parametrize("seed", range(5))
def test_round_trip_random(seed):
    f = random_mean_free(2, 15, np.random.default_rng(seed))
    u = solve_homological(f, OMEGA)
    back = coef_map(apply_Lomega(u, OMEGA))
    err = sum(abs(back.get(k, 0) - c) for k, c in coef_map(f).items())
    assert err < 1e-12
    assert abs(u(np.zeros(2))[0]) < 1e-13
    assert u.is_real()


def test_linearity(rng):
    f, g = random_mean_free(2, 5, rng), random_mean_free(2, 5, rng)
    th = rng.uniform(-np.pi, np.pi, (10, 2))
    lhs = solve_homological(f * 2.0 + g, OMEGA)(th)
    rhs = 2 * solve_homological(f, OMEGA)(th) + solve_homological(g, OMEGA)(th)
    assert np.allclose(lhs, rhs, atol=1e-13)


def test_growth_bound_certified(rng):
    tau, K = 1.2, 6
    kappa, _ = min_small_divisor(OMEGA, tau, 2 * K)
    for _ in range(10):
        f = random_mean_free(2, 10, rng, K=K)
        assert check_growth_bound(f, solve_homological(f, OMEGA), kappa, tau)


def test_nonzero_mean_refused():
    f = TorusFunction(np.array([[0, 0], [1, 0], [-1, 0]]), np.array([0.3, 0.5, 0.5]))
    with pytest.raises(PreconditionError):
        solve_homological(f, OMEGA)
    mean, rest = remove_mean(f)
    assert mean == pytest.approx(0.3)
    assert solve_homological(rest, OMEGA).coef.shape[0] == 3


def test_small_divisor_names_mode():
    f = TorusFunction(np.array([[2, -1], [-2, 1]]), np.array([1.0, 1.0]))
    with pytest.raises(SmallDivisorError) as exc:
        solve_homological(f, (1.0, 2.0))
    assert tuple(abs(x) for x in exc.value.k) == (2, 1)
