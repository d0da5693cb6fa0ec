"""The torus homological equation <omega, d/dtheta> u = f."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError, SmallDivisorError


@dataclass(frozen=True, eq=False)
class TorusFunction:
    """Finite Fourier series sum_k f_k exp(i<k, theta>) on T^n.

    ``coef`` may carry trailing axes (e.g. one column per action sample).
    """

    ks: np.ndarray
    coef: np.ndarray

    def __post_init__(self):
        ks = np.atleast_2d(np.asarray(self.ks, dtype=np.int64))
        coef = np.asarray(self.coef, dtype=complex)
        if coef.shape[0] != ks.shape[0]:
            raise ValueError("ks and coef disagree on the number of modes")
        object.__setattr__(self, "ks", ks)
        object.__setattr__(self, "coef", coef)

    @property
    def dim(self):
        return self.ks.shape[1]

    def mean(self):
        z = np.all(self.ks == 0, axis=1)
        return self.coef[z].sum(axis=0)

    def __call__(self, theta):
        th = np.atleast_2d(np.asarray(theta, float))
        ph = np.exp(1j * th @ self.ks.T)
        return np.tensordot(ph, self.coef, axes=(1, 0))

    def norm(self):
        """l1 norm of the coefficients (per trailing column)."""
        return np.abs(self.coef).sum(axis=0)

    def is_real(self, tol=1e-14):
        index = {tuple(k): i for i, k in enumerate(self.ks.tolist())}
        scale = max(1.0, float(np.abs(self.coef).max(initial=0.0)))
        for k, i in index.items():
            j = index.get(tuple(-x for x in k))
            other = self.coef[j] if j is not None else 0.0
            if np.abs(np.conj(self.coef[i]) - other).max() > tol * scale:
                return False
        return True

    def __add__(self, other):
        index = {tuple(k): i for i, k in enumerate(self.ks.tolist())}
        ks = list(index)
        coef = list(self.coef)
        for k, c in zip(other.ks.tolist(), other.coef):
            k = tuple(k)
            if k in index:
                coef[index[k]] = coef[index[k]] + c
            else:
                index[k] = len(ks)
                ks.append(k)
                coef.append(c)
        return TorusFunction(np.array(ks), np.array(coef))

    def __mul__(self, s):
        return TorusFunction(self.ks, self.coef * s)

    __rmul__ = __mul__

    @classmethod
    def from_hamiltonian(cls, H, I, t):
        """Angle coefficients of H at fixed actions I (trailing axis = sample)."""
        I = np.atleast_2d(np.asarray(I, float))
        v = H.mode_values(I, t)
        return cls(H.ks, v[:, 0] if len(I) == 1 else v)


def remove_mean(f):
    """Split f into (mean, mean-free part)."""
    z = np.all(f.ks == 0, axis=1)
    mean = f.coef[z].sum(axis=0)
    coef = f.coef.copy()
    coef[z] = 0
    return mean, TorusFunction(f.ks, coef)


def divisors(ks, omega):
    return np.asarray(ks) @ np.asarray(omega, float)


def apply_Lomega(u, omega):
    d = 1j * divisors(u.ks, omega)
    return TorusFunction(u.ks, u.coef * d.reshape((-1,) + (1,) * (u.coef.ndim - 1)))


def solve_homological(f, omega, min_divisor_tol=1e-10, mean_tol=1e-14):
    """u with L_omega u = f and u(0) = 0.

    Raises
    ------
    PreconditionError
        if the mean of f exceeds ``mean_tol``.
    SmallDivisorError
        if |<omega, k>| < ``min_divisor_tol`` for a mode carried by f.
    """
    z = np.all(f.ks == 0, axis=1)
    if np.abs(f.coef[z]).max(initial=0.0) >= mean_tol:
        raise PreconditionError(f"f has nonzero mean {f.mean()!r}")
    d = divisors(f.ks, omega)
    nz = ~z
    carried = np.abs(f.coef.reshape(len(d), -1)).max(axis=1, initial=0.0) > 0
    bad = nz & carried & (np.abs(d) < min_divisor_tol)
    if bad.any():
        i = int(np.argmax(bad))
        raise SmallDivisorError(f.ks[i], abs(d[i]), min_divisor_tol)
    shape = (-1,) + (1,) * (f.coef.ndim - 1)
    coef = np.zeros_like(f.coef)
    dd = np.where(nz, d, 1.0).reshape(shape)
    coef[nz] = (f.coef / (1j * dd))[nz]
    ks = f.ks
    if not z.any():
        ks = np.vstack([ks, np.zeros((1, f.dim), dtype=np.int64)])
        coef = np.concatenate([coef, np.zeros((1,) + coef.shape[1:], complex)])
        z = np.append(np.zeros(len(z), bool), True)
    coef[z] = -coef[~z].sum(axis=0)
    return TorusFunction(ks, coef)


def check_growth_bound(f, u, kappa, tau):
    """Coefficientwise |u_k| <= |f_k| |k|_1^tau / kappa over k != 0."""
    nz = ~np.all(f.ks == 0, axis=1)
    index = {tuple(k): i for i, k in enumerate(u.ks.tolist())}
    uk = np.array([u.coef[index[tuple(k)]] for k in f.ks[nz].tolist()])
    bound = np.abs(f.coef[nz]) * np.abs(f.ks[nz]).sum(axis=1) ** tau / kappa
    return bool(np.all(np.abs(uk) <= bound * (1 + 1e-12)))


def random_mean_free(n, n_modes, rng, K=6, decay=0.3):
    """Real, mean-free torus function with ``n_modes`` conjugate pairs."""
    seen = set()
    ks, coef = [], []
    while len(seen) < n_modes:
        k = tuple(int(x) for x in rng.integers(-K, K + 1, size=n))
        if not any(k) or k in seen or tuple(-x for x in k) in seen:
            continue
        seen.add(k)
        c = (rng.standard_normal() + 1j * rng.standard_normal()) * np.exp(-decay * sum(map(abs, k)))
        ks += [k, tuple(-x for x in k)]
        coef += [c, np.conj(c)]
    return TorusFunction(np.array(ks), np.array(coef))
