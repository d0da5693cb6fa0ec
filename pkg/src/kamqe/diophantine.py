"""Nonresonant frequency sets Omega_kappa, truncated to |k|_1 <= K_max."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import SamplingError
from .model import Box


@dataclass(frozen=True)
class DiophantineParams:
    kappa: float
    tau: float
    K_max: int = 50
    boundary_margin: float = 0.0

    def validate(self, n):
        if not self.kappa >= 0:
            raise ValueError("kappa must be nonnegative")
        if not self.tau > n - 1:
            raise ValueError(f"tau must exceed n - 1 = {n - 1}")
        if self.K_max < 1:
            raise ValueError("K_max must be >= 1")
        return self


@dataclass(frozen=True)
class Ball:
    center: tuple
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))

    @property
    def dim(self):
        return len(self.center)

    def boundary_distance(self, w):
        return self.radius - np.linalg.norm(np.asarray(w, float) - np.array(self.center), axis=-1)

    def contains(self, w):
        return self.boundary_distance(w) >= 0

    def volume(self):
        from math import gamma, pi
        n = self.dim
        return pi ** (n / 2) / gamma(n / 2 + 1) * self.radius ** n

    def sample(self, rng, size):
        return _ball_sample(rng, np.array(self.center), self.radius, size)


def _ball_sample(rng, center, r, size):
    n = len(center)
    g = rng.standard_normal((size, n))
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return center + g * (r * rng.uniform(size=(size, 1)) ** (1 / n))


@lru_cache(maxsize=32)
def wave_vectors(n, K_max, half=False):
    """All 0 < |k|_1 <= K_max ordered by (|k|_1, lexicographic).

    With ``half`` only one of each pair +-k is kept (first nonzero entry > 0).
    """
    rng = np.arange(-K_max, K_max + 1)
    ks = np.stack(np.meshgrid(*[rng] * n, indexing="ij"), -1).reshape(-1, n)
    norm = np.abs(ks).sum(axis=1)
    ks = ks[(norm > 0) & (norm <= K_max)]
    if half:
        first = ks[np.arange(len(ks)), (ks != 0).argmax(axis=1)]
        ks = ks[first > 0]
    order = np.lexsort(tuple(ks[:, j] for j in range(n - 1, -1, -1)) + (np.abs(ks).sum(axis=1),))
    out = ks[order]
    out.setflags(write=False)
    return out


def min_small_divisor(omega, tau, K_max):
    """min over 0 < |k|_1 <= K_max of |<omega, k>| |k|_1^tau and a minimiser.

    Ties go to the smallest |k|_1, then to the lexicographically smallest k.
    """
    w = np.asarray(omega, dtype=float)
    ks = wave_vectors(len(w), int(K_max))
    vals = np.abs(ks @ w) * np.abs(ks).sum(axis=1) ** tau
    i = int(np.argmin(vals))
    return float(vals[i]), tuple(int(x) for x in ks[i])


def _kappa_star_batch(W, tau, K_max, chunk=2048):
    ks = wave_vectors(W.shape[1], int(K_max), half=True)
    weight = np.abs(ks).sum(axis=1).astype(float) ** tau
    out = np.empty(len(W))
    for s in range(0, len(W), chunk):
        out[s:s + chunk] = (np.abs(W[s:s + chunk] @ ks.T) * weight).min(axis=1)
    return out


@dataclass(frozen=True)
class Membership:
    member: bool
    kappa_star: float
    k_star: tuple
    boundary_distance: float
    K_max: int
    reason: str = ""

    def __bool__(self):
        return self.member


def is_in_omega_kappa(omega, params, region):
    """Membership in Omega_kappa, certified for |k|_1 <= params.K_max only."""
    w = np.asarray(omega, dtype=float)
    ks, k = min_small_divisor(w, params.tau, params.K_max)
    dist = float(region.boundary_distance(w))
    reason = ""
    if ks < params.kappa:
        reason = f"divisor {ks:.3e} < kappa at k={k}"
    elif dist <= 0 or dist < params.boundary_margin:
        reason = f"boundary distance {dist:.3e} below margin {params.boundary_margin}"
    return Membership(not reason, ks, k, dist, int(params.K_max), reason)


def _members(W, params, region):
    ok = _kappa_star_batch(W, params.tau, params.K_max) >= params.kappa
    d = region.boundary_distance(W)
    return ok & (d > 0) & (d >= params.boundary_margin)


def complement_measure_estimate(region, params, n_samples=20000, seed=0):
    """Monte-Carlo measure of region minus Omega_kappa, with standard error."""
    rng = np.random.default_rng(seed)
    W = region.sample(rng, n_samples)
    fail = ~_members(W, params, region)
    p = fail.mean()
    vol = region.volume()
    return float(p * vol), float(vol * np.sqrt(p * (1 - p) / n_samples))


def sample_nonresonant(region, params, near=None, radius=None, seed=0, max_rejections=20000, batch=256):
    """Draw omega in Omega_kappa (intersected with the open ball B(near, radius))."""
    rng = np.random.default_rng(seed)
    tried = 0
    while tried < max_rejections:
        m = min(batch, max_rejections - tried)
        if near is None:
            W = region.sample(rng, m)
        else:
            c = np.asarray(near, float)
            if not radius or radius <= 0:
                W = np.tile(c, (m, 1))
            else:
                W = _ball_sample(rng, c, radius, m)
        ok = _members(W, params, region)
        if near is not None:
            ok &= np.linalg.norm(W - np.asarray(near, float), axis=1) < (radius or 0.0)
        tried += m
        if ok.any():
            return W[int(np.argmax(ok))]
    raise SamplingError(f"no nonresonant frequency after {max_rejections} draws; kappa too large or radius too small")


__all__ = ["DiophantineParams", "Ball", "Box", "Membership", "wave_vectors", "min_small_divisor",
           "is_in_omega_kappa", "complement_measure_estimate", "sample_nonresonant"]
