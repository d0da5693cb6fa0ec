"""Perturbed integrable Hamiltonians on T^n x D as finite angle-Fourier series.

A family ``H(theta, I; t)`` is stored in exponential form

    H = sum_k c_k(I; t) exp(i <k, theta>),

where each ``c_k`` is a polynomial in the actions ``I`` (multidegree <= d) and
the parameter ``t`` (degree <= d_t) with complex coefficients obeying the
reality condition ``c_{-k} = conj(c_k)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import comb, factorial
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .errors import DegeneracyError, DiagnosticUnavailable, DomainError, NoSolutionError

_DOMAIN_TOL = 1e-12


# ---------------------------------------------------------------------------
# action domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = tuple(float(x) for x in self.lo)
        hi = tuple(float(x) for x in self.hi)
        if len(lo) != len(hi) or any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"invalid box {lo} x {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return len(self.lo)

    @property
    def center(self):
        return (np.array(self.lo) + np.array(self.hi)) / 2

    @property
    def halfwidth(self):
        return (np.array(self.hi) - np.array(self.lo)) / 2

    def contains(self, I, tol=_DOMAIN_TOL):
        I = np.asarray(I, dtype=float)
        return np.all((I >= np.array(self.lo) - tol) & (I <= np.array(self.hi) + tol), axis=-1)

    def bounding_box(self):
        return self

    def volume(self):
        return float(np.prod(np.array(self.hi) - np.array(self.lo)))

    def sample(self, rng, size):
        return rng.uniform(self.lo, self.hi, size=(size, self.dim))

    def boundary_distance(self, I):
        I = np.asarray(I, dtype=float)
        d = np.minimum(I - np.array(self.lo), np.array(self.hi) - I)
        return np.min(d, axis=-1)

    def to_dict(self):
        return {"box": [list(self.lo), list(self.hi)]}


@dataclass(frozen=True)
class Annulus:
    """Spherical shell r_in <= |I - center| <= r_out."""

    center: tuple
    r_in: float
    r_out: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))
        if not 0 <= self.r_in < self.r_out:
            raise ValueError("annulus needs 0 <= r_in < r_out")

    @property
    def dim(self):
        return len(self.center)

    def contains(self, I, tol=_DOMAIN_TOL):
        r = np.linalg.norm(np.asarray(I, dtype=float) - np.array(self.center), axis=-1)
        return (r >= self.r_in - tol) & (r <= self.r_out + tol)

    def bounding_box(self):
        c = np.array(self.center)
        return Box(tuple(c - self.r_out), tuple(c + self.r_out))

    def volume(self):
        from math import gamma, pi
        n = self.dim
        unit = pi ** (n / 2) / gamma(n / 2 + 1)
        return unit * (self.r_out ** n - self.r_in ** n)

    def sample(self, rng, size):
        box = self.bounding_box()
        out = np.empty((0, self.dim))
        while len(out) < size:
            x = box.sample(rng, 2 * size)
            out = np.concatenate([out, x[self.contains(x)]])
        return out[:size]

    def boundary_distance(self, I):
        r = np.linalg.norm(np.asarray(I, dtype=float) - np.array(self.center), axis=-1)
        return np.minimum(r - self.r_in, self.r_out - r)

    def to_dict(self):
        return {"annulus": {"center": list(self.center), "r_in": self.r_in, "r_out": self.r_out}}


def domain_from_dict(d):
    if "box" in d:
        lo, hi = d["box"]
        return Box(tuple(lo), tuple(hi))
    if "annulus" in d:
        a = d["annulus"]
        return Annulus(tuple(a["center"]), a["r_in"], a["r_out"])
    raise ValueError(f"unknown action domain {d!r}")


@dataclass(frozen=True)
class EnergyBand:
    a: float
    b: float
    E: float | None = None
    scale: float = 1.0

    def __post_init__(self):
        if not self.a < self.b:
            raise ValueError(f"band needs a < b, got [{self.a}, {self.b}]")
        if self.E is None:
            object.__setattr__(self, "E", 0.5 * (self.a + self.b))
        if not self.a < self.E < self.b:
            raise ValueError("reference energy must lie strictly inside the band")

    @property
    def width(self):
        return self.b - self.a

    def contains(self, x):
        x = np.asarray(x)
        return (x >= self.a) & (x <= self.b)

    def check_regular(self, H, n_samples=4000, seed=0, min_grad=1e-6):
        """Return min |grad H0| over sampled actions with H0 in the band; raise if critical."""
        rng = np.random.default_rng(seed)
        I = H.domain.sample(rng, n_samples)
        e = H.average_values(I, 0.0)
        sel = I[(e >= self.a) & (e <= self.b)]
        if len(sel) == 0:
            raise DomainError("no actions of the domain reach the band")
        g = np.linalg.norm(frequency(H, sel, 0.0), axis=-1).min()
        if g < min_grad:
            raise DegeneracyError(f"band [{self.a}, {self.b}] contains a near-critical value (|grad H0| = {g:.2e})")
        return float(g)


# ---------------------------------------------------------------------------
# polynomial helpers
# ---------------------------------------------------------------------------

def _affine_matrix(alpha, beta, deg):
    """S with coefficients of p(alpha v + beta) in v = S @ coefficients of p."""
    S = np.zeros((deg + 1, deg + 1))
    for j in range(deg + 1):
        for i in range(j + 1):
            S[i, j] = comb(j, i) * alpha ** i * beta ** (j - i)
    return S


def _apply_axis(A, M, axis):
    """Contract matrix M (new, old) against ``axis`` of A."""
    A = np.moveaxis(A, axis, -1)
    A = A @ M.T
    return np.moveaxis(A, -1, axis)


def _poly_eval(coef, I, t, chunk_elems=1 << 22):
    """coef (M, dt+1, D, ..., D); local actions I (P, n) -> (M, P) complex."""
    M = coef.shape[0]
    n = coef.ndim - 2
    tp = np.asarray(t, dtype=float) ** np.arange(coef.shape[1])
    A = np.tensordot(coef, tp, axes=([1], [0]))
    P = I.shape[0]
    if n == 0:
        return np.broadcast_to(A[:, None], (M, P)).copy()
    D = A.shape[1:]
    out = np.empty((M, P), dtype=complex)
    lead = M * int(np.prod(D[:-1]))
    step = max(1, chunk_elems // max(lead, 1))
    for s in range(0, P, step):
        X = I[s:s + step]
        # contract the last action axis with one BLAS call, then the rest
        B = A.reshape(lead, D[-1]) @ (X[:, -1][None, :] ** np.arange(D[-1])[:, None])
        B = B.reshape((M,) + D[:-1] + (len(X),))
        for j in range(n - 2, -1, -1):
            pw = X[:, j][None, :] ** np.arange(D[j])[:, None]
            B = np.einsum("...ap,ap->...p", B, pw)
        out[:, s:s + step] = B
    return out


# ---------------------------------------------------------------------------
# the Hamiltonian family
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class FourierHamiltonian:
    """Finite Fourier series in theta with polynomial (I, t) coefficients.

    Parameters
    ----------
    ks : (M, n) int array of wave vectors.
    coef : (M, d_t + 1, d + 1, ..., d + 1) complex array, monomial coefficients
        of ``c_k`` indexed ``[mode, t power, I_1 power, ..., I_n power]``.
    domain : action domain D (``Box`` or ``Annulus``).
    center, scale : optional local frame; the polynomials are then in
        ``u = (I - center) / scale`` rather than in ``I``.
    """

    ks: np.ndarray
    coef: np.ndarray
    domain: Box | Annulus
    name: str = ""
    center: tuple | None = None
    scale: tuple | None = None
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ks = np.atleast_2d(np.asarray(self.ks, dtype=np.int64))
        coef = np.asarray(self.coef, dtype=complex)
        if ks.shape[0] != coef.shape[0]:
            raise ValueError("ks and coef disagree on the number of modes")
        n = ks.shape[1]
        if coef.ndim != n + 2:
            raise ValueError(f"coef must have {n + 2} axes, got {coef.ndim}")
        if self.domain.dim != n:
            raise ValueError("domain dimension does not match wave vectors")
        ks.setflags(write=False)
        coef.setflags(write=False)
        object.__setattr__(self, "ks", ks)
        object.__setattr__(self, "coef", coef)
        index = {tuple(k): i for i, k in enumerate(ks.tolist())}
        if len(index) != len(ks):
            raise ValueError("duplicate wave vectors")
        object.__setattr__(self, "_index", index)
        c = np.zeros(n) if self.center is None else np.asarray(self.center, float)
        sc = np.ones(n) if self.scale is None else np.asarray(self.scale, float)
        object.__setattr__(self, "center", tuple(c.tolist()))
        object.__setattr__(self, "scale", tuple(sc.tolist()))
        self._check_reality()

    # -- construction -------------------------------------------------------

    @classmethod
    def from_modes(cls, modes, domain, name="", center=None, scale=None):
        """Build from ``{k: coef_array}``; arrays may have different shapes."""
        if not modes:
            n = domain.dim
            return cls(np.zeros((0, n), dtype=np.int64), np.zeros((0, 1) + (1,) * n, complex), domain, name,
                       center, scale)
        arrays = {tuple(int(x) for x in k): np.asarray(v, dtype=complex) for k, v in modes.items()}
        n = len(next(iter(arrays)))
        dt = max(a.shape[0] for a in arrays.values())
        d = max(max(a.shape[1:]) if a.ndim > 1 else 1 for a in arrays.values())
        keys = sorted(arrays)
        coef = np.zeros((len(keys), dt) + (d,) * n, dtype=complex)
        for i, k in enumerate(keys):
            a = arrays[k]
            coef[(i,) + tuple(slice(0, s) for s in a.shape)] = a
        return cls(np.array(keys, dtype=np.int64).reshape(len(keys), n), coef, domain, name, center, scale)

    @classmethod
    def from_terms(cls, n, terms, domain, name=""):
        """Build from real trigonometric terms.

        Each term is a mapping with keys ``k`` (wave vector), ``i_deg`` (action
        multidegree), ``t_deg`` and ``coeff``; for ``k != 0`` the term is
        ``coeff * I^i_deg * t^t_deg * cos<k, theta>`` plus an optional
        ``sin_coeff`` multiplying ``sin<k, theta>``.
        """
        acc = {}

        def slot(k, i_deg, t_deg):
            a = acc.setdefault(k, {})
            key = (t_deg,) + tuple(i_deg)
            a[key] = a.get(key, 0) + 0j
            return a, key

        for term in terms:
            k = tuple(int(x) for x in term["k"])
            i_deg = tuple(int(x) for x in term.get("i_deg", (0,) * n))
            t_deg = int(term.get("t_deg", 0))
            if len(k) != n or len(i_deg) != n:
                raise ValueError(f"term {term!r} does not match dimension {n}")
            cos_c = float(term.get("coeff", 0.0))
            sin_c = float(term.get("sin_coeff", 0.0))
            if not any(k):
                if sin_c:
                    raise ValueError("the k = 0 mode has no sine part")
                a, key = slot(k, i_deg, t_deg)
                a[key] += cos_c
                continue
            mk = tuple(-x for x in k)
            a, key = slot(k, i_deg, t_deg)
            a[key] += cos_c / 2 - 0.5j * sin_c
            a, key = slot(mk, i_deg, t_deg)
            a[key] += cos_c / 2 + 0.5j * sin_c
        modes = {}
        for k, entries in acc.items():
            shape = tuple(max(e[j] for e in entries) + 1 for j in range(n + 1))
            arr = np.zeros(shape, dtype=complex)
            for key, v in entries.items():
                arr[key] = v
            modes[k] = arr
        return cls.from_modes(modes, domain, name)

    # -- basic properties ---------------------------------------------------

    @property
    def dim(self):
        return self.ks.shape[1]

    @property
    def n_modes(self):
        return self.ks.shape[0]

    @property
    def t_deg(self):
        return self.coef.shape[1] - 1

    @property
    def deg(self):
        return self.coef.shape[2] - 1 if self.dim else 0

    @property
    def K_max(self):
        return int(np.abs(self.ks).sum(axis=1).max()) if self.n_modes else 0

    def mode(self, k):
        """Coefficient array of mode ``k`` (zeros when absent)."""
        i = self._index.get(tuple(int(x) for x in k))
        if i is None:
            return np.zeros(self.coef.shape[1:], dtype=complex)
        return self.coef[i]

    def has_mode(self, k):
        return tuple(int(x) for x in k) in self._index

    def _check_reality(self, tol=1e-14):
        if not self.n_modes:
            return
        scale = max(1.0, float(np.abs(self.coef).max()))
        for k, i in self._index.items():
            j = self._index.get(tuple(-x for x in k))
            if j is None:
                if np.abs(self.coef[i]).max() > tol * scale:
                    raise ValueError(f"mode {k} has no conjugate partner")
                continue
            if np.abs(self.coef[j] - np.conj(self.coef[i])).max() > tol * scale:
                raise ValueError(f"reality condition violated at k={k}")

    # -- evaluation ---------------------------------------------------------

    def local(self, I):
        return (I - np.array(self.center)) / np.array(self.scale)

    @property
    def frame(self):
        return self.center, self.scale

    def _check_domain(self, I, check):
        if check and not np.all(self.domain.contains(I)):
            raise DomainError("action outside the domain D")

    def mode_values(self, I, t, check=False):
        """c_k(I; t) for every stored mode: (M, P) complex."""
        I = np.atleast_2d(np.asarray(I, dtype=float))
        self._check_domain(I, check)
        return _poly_eval(self.coef, self.local(I), t)

    def average_values(self, I, t, check=False):
        """k = 0 coefficient (the torus average) at actions I."""
        I = np.atleast_2d(np.asarray(I, dtype=float))
        self._check_domain(I, check)
        i = self._index.get((0,) * self.dim)
        if i is None:
            return np.zeros(len(I))
        return _poly_eval(self.coef[i:i + 1], self.local(I), t)[0].real

    def __call__(self, theta, I, t, check=True):
        """H(theta, I; t), broadcasting over leading axes."""
        theta = np.asarray(theta, dtype=float)
        I = np.asarray(I, dtype=float)
        shape = np.broadcast_shapes(theta.shape, I.shape)[:-1]
        th = np.broadcast_to(theta, shape + (self.dim,)).reshape(-1, self.dim)
        Ia = np.broadcast_to(I, shape + (self.dim,)).reshape(-1, self.dim)
        self._check_domain(Ia, check)
        if not self.n_modes:
            return np.zeros(shape)
        vals = _poly_eval(self.coef, self.local(Ia), t)
        phase = np.exp(1j * th @ self.ks.T)
        out = np.einsum("mp,pm->p", vals, phase)
        return out.real.reshape(shape)

    # -- algebra ------------------------------------------------------------

    def _as_modes(self):
        return {k: self.coef[i] for k, i in self._index.items()}

    def _combine(self, other, sign):
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        if other.frame != self.frame:
            other = other.reframe(self.center, self.scale)
        modes = {k: v.copy() for k, v in self._as_modes().items()}
        for k, v in other._as_modes().items():
            if k in modes:
                a = modes[k]
                shape = tuple(max(x, y) for x, y in zip(a.shape, v.shape))
                out = np.zeros(shape, dtype=complex)
                out[tuple(slice(0, s) for s in a.shape)] += a
                out[tuple(slice(0, s) for s in v.shape)] += sign * v
                modes[k] = out
            else:
                modes[k] = sign * v
        return FourierHamiltonian.from_modes(modes, self.domain, self.name, self.center, self.scale)

    def __add__(self, other):
        return self._combine(other, 1.0)

    def __sub__(self, other):
        return self._combine(other, -1.0)

    def __mul__(self, s):
        return replace_coef(self, self.coef * float(s))

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    # -- derived families ---------------------------------------------------

    def at(self, t):
        """Freeze the parameter: a t-independent family equal to H(.;t)."""
        tp = float(t) ** np.arange(self.coef.shape[1])
        c = np.tensordot(self.coef, tp, axes=([1], [0]))[:, None]
        return replace_coef(self, c)

    def unperturbed(self):
        return self.at(0.0)

    def average(self):
        """Angle-independent part (k = 0 mode only)."""
        z = (0,) * self.dim
        return FourierHamiltonian.from_modes({z: self.mode(z)}, self.domain, self.name, self.center, self.scale)

    def oscillating(self):
        z = (0,) * self.dim
        return FourierHamiltonian.from_modes(
            {k: v for k, v in self._as_modes().items() if k != z}, self.domain, self.name, self.center, self.scale)

    def d_t(self):
        c = self.coef
        if c.shape[1] == 1:
            return replace_coef(self, np.zeros_like(c))
        w = np.arange(1, c.shape[1]).reshape((1, -1) + (1,) * self.dim)
        return replace_coef(self, c[:, 1:] * w)

    def d_I(self, j):
        c = self.coef
        ax = 2 + j
        D = c.shape[ax]
        out = np.zeros_like(c)
        idx_src = [slice(None)] * c.ndim
        idx_dst = [slice(None)] * c.ndim
        idx_src[ax] = slice(1, D)
        idx_dst[ax] = slice(0, D - 1)
        w = np.arange(1, D).reshape([-1 if a == ax else 1 for a in range(c.ndim)])
        out[tuple(idx_dst)] = c[tuple(idx_src)] * (w / self.scale[j])
        return replace_coef(self, out)

    def d_theta(self, j):
        c = self.coef * (1j * self.ks[:, j]).reshape((-1,) + (1,) * (self.coef.ndim - 1))
        return replace_coef(self, c)

    def with_domain(self, domain):
        return FourierHamiltonian(self.ks, self.coef, domain, self.name, self.center, self.scale)

    def drop_small(self, tol):
        """Remove modes whose coefficient arrays are all below ``tol`` in modulus."""
        keep = np.abs(self.coef.reshape(self.n_modes, -1)).max(axis=1) > tol if self.n_modes else []
        return FourierHamiltonian(self.ks[keep], self.coef[keep], self.domain, self.name, self.center, self.scale)

    def reframe(self, center=None, scale=None):
        """Same function with polynomials re-expanded in (I - center) / scale."""
        n = self.dim
        c_new = np.zeros(n) if center is None else np.asarray(center, float)
        s_new = np.ones(n) if scale is None else np.asarray(scale, float)
        c_old, s_old = np.array(self.center), np.array(self.scale)
        c = self.coef
        for j in range(n):
            S = _affine_matrix(s_new[j] / s_old[j], (c_new[j] - c_old[j]) / s_old[j], c.shape[2 + j] - 1)
            c = _apply_axis(c, S, 2 + j)
        return FourierHamiltonian(self.ks, c, self.domain, self.name, tuple(c_new), tuple(s_new))

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        terms = {}
        n = self.dim
        for k, i in self._index.items():
            if any(k):
                first = next(x for x in k if x != 0)
                if first < 0:
                    continue
            a = self.coef[i]
            entries = []
            for idx in zip(*np.nonzero(np.abs(a) > 0)):
                v = a[idx]
                e = {"i_deg": [int(x) for x in idx[1:]], "t_deg": int(idx[0])}
                if any(k):
                    e["coeff"] = float(2 * v.real)
                    if v.imag:
                        e["sin_coeff"] = float(-2 * v.imag)
                else:
                    e["coeff"] = float(v.real)
                entries.append(e)
            if entries:
                terms[k] = entries
        return {
            "n": n,
            "K_max": self.K_max,
            "name": self.name,
            "domain": self.domain.to_dict(),
            "modes": [{"k": list(k), "poly": v} for k, v in sorted(terms.items())],
            **({"frame": [list(self.center), list(self.scale)]} if self.frame != ((0.0,) * n, (1.0,) * n) else {}),
        }

    @classmethod
    def from_dict(cls, d):
        n = int(d["n"])
        terms = []
        for m in d["modes"]:
            for p in m["poly"]:
                terms.append({"k": m["k"], "i_deg": p["i_deg"], "t_deg": p.get("t_deg", 0),
                              "coeff": p.get("coeff", 0.0), "sin_coeff": p.get("sin_coeff", 0.0)})
        H = cls.from_terms(n, terms, domain_from_dict(d["domain"]), d.get("name", ""))
        kmax = d.get("K_max")
        if kmax is not None and H.K_max > int(kmax):
            raise ValueError(f"mode beyond K_max={kmax}")
        if "frame" in d:
            H = FourierHamiltonian(H.ks, H.coef, H.domain, H.name, *d["frame"])
        return H

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def replace_coef(H, coef):
    return FourierHamiltonian(H.ks, coef, H.domain, H.name, H.center, H.scale)


# ---------------------------------------------------------------------------
# built-in models
# ---------------------------------------------------------------------------

def ref2(domain=None):
    """H = |I|^2/2 + t [I_1 + 0.2 cos th_1 + 0.1 cos(th_1 + th_2)]."""
    domain = domain or Box((-1.5, -1.5), (1.5, 1.5))
    terms = [
        {"k": (0, 0), "i_deg": (2, 0), "coeff": 0.5},
        {"k": (0, 0), "i_deg": (0, 2), "coeff": 0.5},
        {"k": (0, 0), "i_deg": (1, 0), "t_deg": 1, "coeff": 1.0},
        {"k": (1, 0), "t_deg": 1, "coeff": 0.2},
        {"k": (1, 1), "t_deg": 1, "coeff": 0.1},
    ]
    return FourierHamiltonian.from_terms(2, terms, domain, "REF2")


def pendulum(domain=None):
    """H = I^2/2 + t cos(theta); the parameter t plays the role of epsilon."""
    domain = domain or Box((0.8,), (1.2,))
    terms = [
        {"k": (0,), "i_deg": (2,), "coeff": 0.5},
        {"k": (1,), "t_deg": 1, "coeff": 1.0},
    ]
    return FourierHamiltonian.from_terms(1, terms, domain, "PENDULUM")


BUILTIN_MODELS: dict[str, Callable[[], FourierHamiltonian]] = {
    "REF2": ref2,
    "PENDULUM": pendulum,
}


def load_model(ref):
    """Resolve a built-in name, a path to a JSON definition, or an inline dict."""
    if isinstance(ref, FourierHamiltonian):
        return ref
    if isinstance(ref, dict):
        return FourierHamiltonian.from_dict(ref)
    if ref in BUILTIN_MODELS:
        return BUILTIN_MODELS[ref]()
    with open(ref) as fh:
        return FourierHamiltonian.from_json(fh.read())


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def evaluate(H, theta, I, t):
    """H(theta, I; t) with a domain check on I."""
    return H(theta, I, t, check=True)


def frequency(H, I, t):
    """Gradient in I of the torus-averaged part of H at (I, t)."""
    I = np.asarray(I, dtype=float)
    single = I.ndim == 1
    Ia = np.atleast_2d(I)
    avg = H.average()
    w = np.stack([avg.d_I(j).average_values(Ia, t) for j in range(H.dim)], axis=-1)
    return w[0] if single else w


def hessian(H, I, t):
    I = np.asarray(I, dtype=float)
    single = I.ndim == 1
    Ia = np.atleast_2d(I)
    avg = H.average()
    n = H.dim
    out = np.empty((len(Ia), n, n))
    for i in range(n):
        di = avg.d_I(i)
        for j in range(i, n):
            v = di.d_I(j).average_values(Ia, t)
            out[:, i, j] = v
            out[:, j, i] = v
    return out[0] if single else out


def nondegeneracy(H, I, t=0.0):
    """det of the Hessian of the averaged Hamiltonian (Kolmogorov condition)."""
    return np.linalg.det(hessian(H, I, t))


def legendre_inverse(H, omega, t, guess=None, max_iter=50, tol=1e-12, det_tol=1e-14):
    """Actions I(omega; t) solving frequency(H, I, t) = omega by damped Newton.

    Vectorised over a leading batch axis of ``omega``. Newton starts at the
    centre of the action domain unless ``guess`` is given; each step is halved
    until the residual decreases.
    """
    omega = np.asarray(omega, dtype=float)
    single = omega.ndim == 1
    W = np.atleast_2d(omega)
    if guess is None:
        I = np.tile(H.domain.bounding_box().center, (len(W), 1))
    else:
        I = np.array(np.broadcast_to(np.asarray(guess, float), W.shape))
    F = frequency(H, I, t) - W
    res = np.linalg.norm(F, axis=-1)
    for _ in range(max_iter):
        active = res > tol
        if not active.any():
            break
        J = hessian(H, I[active], t)
        det = np.linalg.det(J)
        if np.any(np.abs(det) < det_tol):
            raise DegeneracyError("singular Hessian along the Newton path")
        step = np.linalg.solve(J, F[active][..., None])[..., 0]
        lam = np.ones(active.sum())
        Ia, Fa, ra = I[active], F[active], res[active]
        for _ in range(30):
            trial = Ia - lam[:, None] * step
            Ft = frequency(H, trial, t) - W[active]
            rt = np.linalg.norm(Ft, axis=-1)
            ok = rt < ra
            if ok.all():
                break
            lam = np.where(ok, lam, lam / 2)
        I[active], F[active], res[active] = trial, Ft, rt
    if np.any(res > tol):
        raise NoSolutionError(f"Legendre inversion did not converge (max residual {res.max():.2e})")
    return I[0] if single else I


def torus_average(H, I, t, operand="H"):
    """(2 pi)^-n integral over T^n of H or of its t-derivative at (I, t)."""
    if operand in ("H", "h"):
        F = H
    elif operand in ("dtH", "dt", "d_t"):
        F = H.d_t()
    else:
        raise ValueError(f"operand must be 'H' or 'dtH', got {operand!r}")
    I = np.asarray(I, dtype=float)
    v = F.average_values(np.atleast_2d(I), t)
    return float(v[0]) if I.ndim == 1 else v


class SurfaceAverage(NamedTuple):
    value: float
    stderr: float
    n: int


def _taylor_terms(F):
    """(alpha, alpha!, d^alpha F) for every multi-index up to the coefficient degree."""
    out = []
    for alpha in np.ndindex(*(F.deg + 1,) * F.dim):
        G = F
        for j, a in enumerate(alpha):
            for _ in range(a):
                G = G.d_I(j)
        fact = float(np.prod([factorial(a) for a in alpha]))
        out.append((np.array(alpha), fact, G))
    return out


def _cell_bounds(F0, terms, centers, half):
    """c_0 at cell centres and a bound on |H - c_0(centre)| over each cell."""
    c0 = np.zeros(len(centers))
    dev = np.zeros(len(centers))
    zero = (0,) * F0.dim
    for alpha, fact, G in terms:
        vals = G.mode_values(centers, 0.0)
        rad = float(np.prod(half ** alpha)) / fact
        for i, k in enumerate(G.ks.tolist()):
            if tuple(k) == zero:
                if alpha.sum() == 0:
                    c0 = vals[i].real
                else:
                    dev += np.abs(vals[i]) * rad
            else:
                dev += np.abs(vals[i]) * rad
    return c0, dev


def _shell_samples(H, E, t, shell, n_samples, rng, box=None, max_cells=1 << 16, max_levels=24,
                   max_draws=20_000_000):
    """Uniform samples of the phase-space shell |H - E| < shell.

    Action space is refined hierarchically; a cell is kept only if a Taylor
    majorant shows it can meet the shell. Kept cells share one size, so
    uniform draws over their union followed by rejection are uniform on the
    shell.
    """
    F = H.at(t)
    n = F.dim
    terms = _taylor_terms(F)
    bb = (box or H.domain).bounding_box()
    lo, hi = np.array(bb.lo), np.array(bb.hi)
    g = 4
    half = (hi - lo) / (2 * g)
    grid = np.stack(np.meshgrid(*[np.arange(g)] * n, indexing="ij"), -1).reshape(-1, n)
    centers = lo + (2 * grid + 1) * half
    offsets = np.stack(np.meshgrid(*[[-0.5, 0.5]] * n, indexing="ij"), -1).reshape(-1, n)
    for _ in range(max_levels):
        c0, dev = _cell_bounds(F, terms, centers, half)
        centers = centers[np.abs(c0 - E) <= shell + dev]
        if not len(centers):
            raise DomainError(f"energy surface E={E} not reached on the sampled domain")
        if len(centers) * 2 ** n > max_cells:
            break
        half = half / 2
        centers = (centers[:, None, :] + offsets[None] * 2 * half).reshape(-1, n)
    thetas, actions = [], []
    got = draws = 0
    chunk = max(4 * n_samples, 1 << 14)
    while got < n_samples and draws < max_draws:
        idx = rng.integers(len(centers), size=chunk)
        I = centers[idx] + rng.uniform(-1, 1, size=(chunk, n)) * half
        th = rng.uniform(0, 2 * np.pi, size=(chunk, n))
        draws += chunk
        inside = H.domain.contains(I, tol=0.0)
        if box is not None:
            inside &= box.contains(I, tol=0.0)
        I, th = I[inside], th[inside]
        keep = np.abs(F(th, I, 0.0, check=False) - E) < shell
        thetas.append(th[keep])
        actions.append(I[keep])
        got += int(keep.sum())
    if not got:
        raise DomainError(f"energy surface E={E} not reached on the sampled domain")
    return np.concatenate(thetas)[:n_samples], np.concatenate(actions)[:n_samples]


def energy_surface_average(H, observable, E, t, n_samples=2000, seed=0, shell=1e-4, box=None,
                           max_draws=20_000_000):
    """Microcanonical average of ``observable`` over Sigma_E of H(.;t).

    Uniform samples of the thin shell |H - E| < shell carry the Liouville
    measure d mu_E (the coarea factor 1/|grad H| is built into the shell
    volume). ``observable`` is a FourierHamiltonian evaluated at the same t,
    or a callable ``f(theta, I)``.
    """
    rng = np.random.default_rng(seed)
    th, I = _shell_samples(H, E, t, shell, n_samples, rng, box=box, max_draws=max_draws)
    if isinstance(observable, FourierHamiltonian):
        v = observable(th, I, t, check=False)
    else:
        v = np.asarray(observable(th, I), dtype=float)
        v = np.broadcast_to(v, (len(I),))
    m = float(v.mean())
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else float("inf")
    return SurfaceAverage(m, se, len(v))


# ---------------------------------------------------------------------------
# decay diagnostics
# ---------------------------------------------------------------------------

@dataclass
class GevreyFit:
    flat: bool
    rate: float = float("nan")
    intercept: float = float("nan")
    residual: float = float("nan")
    exponent: float = float("nan")
    buckets: dict = field(default_factory=dict)


def bucket_magnitudes(F, t=0.0, n_points=64, seed=0):
    """max over modes with |k|_1 = j of sup_I |c_k(I; t)|, keyed by j.

    Suprema are taken over random actions in the domain plus its corners.
    """
    if isinstance(F, dict):
        return {int(j): float(v) for j, v in F.items()}
    if not F.n_modes:
        return {}
    rng = np.random.default_rng(seed)
    I = F.domain.sample(rng, n_points)
    bb = F.domain.bounding_box()
    corners = np.array(np.meshgrid(*zip(bb.lo, bb.hi), indexing="ij")).reshape(F.dim, -1).T
    corners = corners[F.domain.contains(corners)]
    I = np.concatenate([I, corners, bb.center[None]])
    mag = np.abs(F.mode_values(I, t)).max(axis=1)
    order = np.abs(F.ks).sum(axis=1)
    out = {}
    for j, m in zip(order.tolist(), mag.tolist()):
        out[j] = max(out.get(j, 0.0), m)
    return dict(sorted(out.items()))


def gevrey_decay_check(F, rho=1.0, t=0.0, min_points=8):
    """Fit log max|c_k| ~ a - c |k|^(1/rho) over |k|_1 buckets (diagnostic only)."""
    b = bucket_magnitudes(F, t)
    nz = {j: v for j, v in b.items() if v > 0 and j > 0}
    if not b or all(v == 0 for v in b.values()):
        return GevreyFit(flat=True, rate=float("inf"), buckets=b)
    if len(nz) < min_points:
        raise DiagnosticUnavailable(f"need {min_points} nonzero Fourier magnitudes, have {len(nz)}")
    p = 1.0 / rho
    j = np.array(sorted(nz), dtype=float)
    y = np.log([nz[int(x)] for x in j])
    A = np.stack([np.ones_like(j), -(j ** p)], axis=1)
    sol, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ sol - y) ** 2)))
    return GevreyFit(flat=False, rate=float(sol[1]), intercept=float(sol[0]), residual=resid,
                     exponent=p, buckets=b)


def flatness_fit(distances, values, rho):
    """Fit log|R| ~ a - c dist^(-1/(rho-1)) for remainders near nonresonant actions."""
    d = np.asarray(distances, float)
    v = np.abs(np.asarray(values, float))
    if np.all(v == 0):
        return GevreyFit(flat=True, rate=float("inf"))
    keep = (v > 0) & (d > 0)
    if keep.sum() < 3 or rho <= 1:
        raise DiagnosticUnavailable("not enough remainder samples for a flatness fit")
    p = -1.0 / (rho - 1)
    x = d[keep] ** p
    A = np.stack([np.ones_like(x), -x], axis=1)
    sol, *_ = np.linalg.lstsq(A, np.log(v[keep]), rcond=None)
    resid = float(np.sqrt(np.mean((A @ sol - np.log(v[keep])) ** 2)))
    return GevreyFit(flat=False, rate=float(sol[1]), intercept=float(sol[0]), residual=resid, exponent=p)
