"""One KAM step through a small-divisor generating function, and the leading
Birkhoff normal form obtained from two steps.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import ceil, log

import numpy as np
from numpy.polynomial import chebyshev as C

from .errors import AccuracyError, DomainError, PreconditionError, StepFailure
from .homological import remove_mean
from .model import Box, FourierHamiltonian, _apply_axis, frequency, hessian


@dataclass(frozen=True)
class KamOptions:
    """Tunables of a single step.

    ``C_div`` sets the divisor cutoff C/|k|^2, ``s`` and ``r`` the strip and
    action margin of the norm, ``M`` the Fourier truncation (default
    ceil(|log eps| / s)).
    """

    C_div: float = 0.05
    s: float = 1.0
    r: float = 0.0
    s_shrink: float = 0.5
    r_shrink: float = 0.5
    M: int | None = None
    margin: float = 0.0
    eps0: float = 0.1
    drop_tol: float = 1e-14
    refit_tol: float = 1e-9
    degree: int | None = None
    max_degree: int = 18
    n_theta: int | None = None
    max_n_theta: int = 64
    fp_tol: float = 1e-15
    fp_max_iter: int = 200
    grid: int = 41
    n_validate: int = 100
    seed: int = 0


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def mode_sups(F, box=None, r=0.0, t_max=None):
    """Majorant of sup |c_k| over the r-fattened box, one value per mode."""
    if not F.n_modes:
        return np.zeros(0)
    bb = (box or F.domain).bounding_box()
    G = F.reframe(bb.center, bb.halfwidth + r)
    T = t_max if t_max is not None else (0.0 if F.t_deg == 0 else 1.0)
    tw = np.abs(T) ** np.arange(F.coef.shape[1])
    # Chebyshev coefficients bound the sup on [-1, 1]^n without amplifying roundoff
    c = G.coef
    for j in range(F.dim):
        c = _apply_axis(c, _mono_to_cheb(c.shape[2 + j]), 2 + j)
    a = np.tensordot(np.abs(c), tw, axes=([1], [0]))
    return a.reshape(F.n_modes, -1).sum(axis=1)


def _mono_to_cheb(m):
    out = np.zeros((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1
        p = C.poly2cheb(e)
        out[:len(p), j] = p
    return out


def strip_norm(F, s=0.0, r=0.0, box=None, t_max=None):
    """sum_k sup |c_k| e^{|k| s} with action polynomials majorised on the r-fattened box."""
    if s < 0 or r < 0:
        raise ValueError("s and r must be nonnegative")
    if not F.n_modes:
        return 0.0
    sup = mode_sups(F, box, r, t_max)
    return float(np.sum(sup * np.exp(s * np.abs(F.ks).sum(axis=1))))


def homological_check_inputs(f):
    """Remove the k = 0 mode before the homological solve; return (mean, mean-free)."""
    return remove_mean(f)


# ---------------------------------------------------------------------------
# the step
# ---------------------------------------------------------------------------

def _box_grid(box, m):
    axes = [np.linspace(a, b, m) for a, b in zip(box.lo, box.hi)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, box.dim)


def _cheb_nodes(m):
    return np.cos(np.pi * (np.arange(m) + 0.5) / m)[::-1]


def _cheb_to_mono(m):
    out = np.zeros((m, m))
    for j in range(m):
        e = np.zeros(m)
        e[j] = 1
        p = C.cheb2poly(e)
        out[:len(p), j] = p
    return out


def _shrink(box, margin):
    if margin <= 0:
        return box
    lo = np.array(box.lo) + margin
    hi = np.array(box.hi) - margin
    if np.any(lo >= hi):
        raise DomainError("boundary margin empties the action box")
    return Box(tuple(lo), tuple(hi))


@dataclass
class D1Indicator:
    """Sampled indicator of the retained action set."""

    points: np.ndarray
    mask: np.ndarray

    @property
    def fraction(self):
        return float(self.mask.mean()) if len(self.mask) else 0.0

    def retained(self):
        return self.points[self.mask]


@dataclass
class GeneratingFunction:
    """Phi(I', theta) = i sum_k H1_k(I') e^{i<k,theta>} / <omega(I'), k>."""

    H0: FourierHamiltonian
    H1: FourierHamiltonian
    ks: np.ndarray
    t: float = 0.0
    _dH1: list = field(default=None, repr=False)

    def __post_init__(self):
        idx = [self.H1._index[tuple(k)] for k in self.ks.tolist()]
        sub = FourierHamiltonian(self.ks, self.H1.coef[idx], self.H1.domain, "", self.H1.center, self.H1.scale) \
            if len(idx) else None
        self._sub = sub
        self._dH1 = [sub.d_I(j) for j in range(self.ks.shape[1])] if sub is not None else []

    def coefficients(self, I):
        """(Phi_k, d_I Phi_k) at actions I: shapes (m, P) and (m, P, n)."""
        I = np.atleast_2d(I)
        if self._sub is None:
            return np.zeros((0, len(I)), complex), np.zeros((0, len(I), I.shape[1]), complex)
        w = frequency(self.H0, I, self.t)
        Hs = hessian(self.H0, I, self.t)
        d = self.ks @ w.T
        h = self._sub.mode_values(I, self.t)
        dh = np.stack([g.mode_values(I, self.t) for g in self._dH1], axis=-1)
        dd = np.einsum("pjl,ml->mpj", Hs, self.ks)
        phi = 1j * h / d
        dphi = 1j * (dh / d[..., None] - h[..., None] * dd / (d ** 2)[..., None])
        return phi, dphi

    def __call__(self, theta, I):
        phi, _ = self.coefficients(I)
        ph = np.exp(1j * np.atleast_2d(theta) @ self.ks.T)
        return np.einsum("mp,pm->p", phi, ph).real


@dataclass
class KamStepResult:
    phi: GeneratingFunction
    H0_new: FourierHamiltonian
    H1_new: FourierHamiltonian
    box: Box
    D1: D1Indicator
    diagnostics: dict
    H_in: FourierHamiltonian = None
    t: float = 0.0

    @property
    def transformed(self):
        return self.H0_new + self.H1_new

    def change(self, theta_p, I_p):
        """(theta, I) = chi(theta', I') for the canonical change of the step."""
        return _solve_change(self.phi, np.atleast_2d(theta_p), np.atleast_2d(I_p), 1e-15, 200)[:2]

    def energy_defect(self, n=100, seed=1):
        """max |H(chi) - (H0~ + H1~)| at random points of the box."""
        rng = np.random.default_rng(seed)
        Ip = self.box.sample(rng, n)
        tp = rng.uniform(0, 2 * np.pi, size=Ip.shape)
        th, I, _ = _solve_change(self.phi, tp, Ip, 1e-15, 200)
        direct = self.H_in(th, I, self.t, check=False)
        fit = self.H0_new(tp, Ip, self.t, check=False) + self.H1_new(tp, Ip, self.t, check=False)
        return float(np.abs(direct - fit).max())

    def to_dict(self):
        return {
            "box": self.box.to_dict(),
            "generating_modes": self.phi.ks.tolist(),
            "H0_new": self.H0_new.to_dict(),
            "H1_new": self.H1_new.to_dict(),
            "D1_fraction": self.D1.fraction,
            "diagnostics": self.diagnostics,
        }


def _solve_change(phi, theta_p, I_p, tol, max_iter):
    n = I_p.shape[1]
    if not len(phi.ks):
        return theta_p.copy(), I_p.copy(), 0
    Phi, dPhi = phi.coefficients(I_p)
    th = theta_p.copy()
    for it in range(1, max_iter + 1):
        e = np.exp(1j * th @ phi.ks.T)
        shift = np.einsum("mpj,pm->pj", dPhi, e).real
        new = theta_p - shift
        err = np.abs(new - th).max()
        th = new
        if not np.isfinite(err) or err > 10:
            raise StepFailure("fixed-point iteration for the implicit change diverged")
        if err <= tol * max(1.0, np.abs(th).max()):
            break
    else:
        if err > 1e-12:
            raise StepFailure(f"fixed-point iteration stalled at {err:.2e}")
    e = np.exp(1j * th @ phi.ks.T)
    dtheta = np.einsum("mp,pm,mj->pj", Phi, e, 1j * phi.ks).real
    return th, I_p + dtheta, it


def _divisor_ok(H0, ks, I, C_div, t):
    if not len(ks):
        return np.ones(len(I), bool)
    w = frequency(H0, I, t)
    d = np.abs(w @ ks.T)
    return np.all(d >= C_div / np.abs(ks).sum(axis=1) ** 2, axis=1)


def active_modes(H1, box, M, drop_tol, t=0.0):
    """Wave vectors 0 < |k|_1 <= M whose coefficient is not negligible on the box."""
    if not H1.n_modes:
        return np.zeros((0, H1.dim), dtype=np.int64)
    sup = mode_sups(H1.at(t), box)
    order = np.abs(H1.ks).sum(axis=1)
    keep = (order > 0) & (order <= M) & (sup > drop_tol)
    return H1.ks[keep]


def _refit(values_fn, box, degree, n_theta, n, H0_new):
    """Fourier x Chebyshev interpolation of values_fn on the box, as a FourierHamiltonian."""
    m = degree + 1
    nodes = _cheb_nodes(m)
    c, hw = box.center, box.halfwidth
    Igrid = np.stack(np.meshgrid(*[c[j] + hw[j] * nodes for j in range(n)], indexing="ij"), -1).reshape(-1, n)
    tg = 2 * np.pi * np.arange(n_theta) / n_theta
    Tgrid = np.stack(np.meshgrid(*[tg] * n, indexing="ij"), -1).reshape(-1, n)
    P, Q = len(Igrid), len(Tgrid)
    Ip = np.repeat(Igrid, Q, axis=0)
    Tp = np.tile(Tgrid, (P, 1))
    V = values_fn(Tp, Ip) - H0_new.average_values(Ip, 0.0)
    V = V.reshape((P,) + (n_theta,) * n)
    F = np.fft.fftn(V, axes=tuple(range(1, n + 1))) / n_theta ** n
    freqs = np.fft.fftfreq(n_theta, 1.0 / n_theta).astype(int)
    kk = np.stack(np.meshgrid(*[freqs] * n, indexing="ij"), -1).reshape(-1, n)
    F = F.reshape(P, -1).T  # (modes, P)
    keep = np.all(np.abs(kk) < n_theta // 2, axis=1)
    kk, F = kk[keep], F[keep]
    # tensor Chebyshev interpolation, then conversion to monomials in v = (I - c) / hw
    Vinv = np.linalg.inv(C.chebvander(nodes, degree))
    T2M = _cheb_to_mono(m)
    A = F.reshape((len(kk),) + (m,) * n)
    for j in range(n):
        A = np.moveaxis(np.tensordot(A, (T2M @ Vinv).T, axes=([1 + j], [0])), -1, 1 + j)
    # enforce the reality condition exactly
    index = {tuple(k): i for i, k in enumerate(kk.tolist())}
    partner = np.array([index[tuple(-x for x in k)] for k in kk.tolist()])
    A = 0.5 * (A + np.conj(A[partner]))
    tail_theta = float(np.abs(A).reshape(len(kk), -1)[np.abs(kk).max(axis=1) >= n_theta // 2 - 1].max(initial=0.0))
    tail_deg = float(np.abs(A[(slice(None),) + (slice(m - 2, m),) + (slice(None),) * (n - 1)]).max()) if m > 2 else 0.0
    coef = A[:, None]
    H1_new = FourierHamiltonian(kk, coef, box, "", tuple(c), tuple(hw))
    return H1_new, tail_theta, tail_deg


def _drop_noise(F, box, tol):
    """Remove modes whose action majorant is at the roundoff floor."""
    if not F.n_modes:
        return F
    keep = mode_sups(F, box) > tol
    return FourierHamiltonian(F.ks[keep], F.coef[keep], F.domain, F.name, F.center, F.scale)


def kam_step(H0, H1, box=None, opts=None, t=0.0):
    """One KAM step on the split H = H0 + H1 frozen at parameter value ``t``.

    Returns the generating function, the transformed pair and the retained
    action set. The refit lives on ``box`` (default: the action domain minus
    the margin), which must lie in the retained set.
    """
    opts = opts or KamOptions()
    n = H0.dim
    D = H0.domain
    box = _shrink(box or D.bounding_box(), opts.margin if box is None else 0.0)
    H0t, H1t = H0.at(t), H1.at(t)
    Hin = H0t + H1t
    eps = strip_norm(H1t, opts.s, opts.r, box)
    if eps > opts.eps0:
        raise PreconditionError(f"perturbation norm {eps:.3e} above threshold {opts.eps0}")
    chk = _box_grid(box, 9)
    if np.any(np.abs(np.linalg.det(hessian(H0t, chk, 0.0))) < 1e-12):
        raise PreconditionError("frequency map degenerate on the box")
    M = opts.M or (max(1, ceil(abs(log(eps)) / opts.s)) if eps > 0 else 1)
    ks = active_modes(H1t, box, M, opts.drop_tol)
    # retained set D1 on a grid over the domain
    pts = _box_grid(D.bounding_box(), opts.grid)
    inside = D.contains(pts) & (D.boundary_distance(pts) >= opts.margin)
    mask = inside & _divisor_ok(H0t, ks, pts, opts.C_div, 0.0)
    D1 = D1Indicator(pts, mask)
    if not mask.any():
        raise DomainError("divisor cutoff empties the retained action set")
    if not np.all(_divisor_ok(H0t, ks, _box_grid(box, 21), opts.C_div, 0.0)):
        raise DomainError("refit box leaves the retained action set")
    H0_new = (H1t.average() + H0t).with_domain(box)
    phi = GeneratingFunction(H0t, H1t, ks)
    diag = {"eps": eps, "M": int(M), "C_div": opts.C_div, "s": opts.s, "r": opts.r, "n_active": int(len(ks))}
    s2, r2 = opts.s * opts.s_shrink, opts.r * opts.r_shrink
    if eps == 0:
        zero = FourierHamiltonian.from_modes({}, box)
        diag.update(norm_before=0.0, norm_after=0.0, norm_after_same=0.0, refit_residual=0.0,
                    degree=0, n_theta=0, s_new=s2, r_new=r2)
        return KamStepResult(phi, H0_new, zero, box, D1, diag, Hin, t)

    def composed(Tp, Ip):
        th, I, _ = _solve_change(phi, Tp, Ip, opts.fp_tol, opts.fp_max_iter)
        return Hin(th, I, 0.0, check=False)

    rng = np.random.default_rng(opts.seed)
    Iv = box.sample(rng, opts.n_validate)
    Tv = rng.uniform(0, 2 * np.pi, size=Iv.shape)
    direct = composed(Tv, Iv)
    deg = opts.degree or max(H0.deg, H1.deg) + 2
    nth = opts.n_theta or max(2 * M, 8)
    nth += nth % 2
    while True:
        H1_new, tail_t, tail_d = _refit(composed, box, deg, nth, n, H0_new)
        fit = H0_new.average_values(Iv, 0.0) + H1_new(Tv, Iv, 0.0, check=False)
        resid = float(np.abs(fit - direct).max())
        if resid <= opts.refit_tol * 1e-3 or (resid <= opts.refit_tol and deg >= opts.max_degree):
            break
        grow_t = tail_t > tail_d and nth < opts.max_n_theta
        if grow_t:
            nth = min(2 * nth, opts.max_n_theta)
        elif deg < opts.max_degree:
            deg = min(deg + 2, opts.max_degree)
        elif nth < opts.max_n_theta:
            nth = min(2 * nth, opts.max_n_theta)
        else:
            if resid <= opts.refit_tol:
                break
            raise AccuracyError(f"refit residual {resid:.2e} above {opts.refit_tol:.1e}")
    H1_new = _drop_noise(H1_new, box, opts.drop_tol)
    diag.update(
        norm_before=strip_norm(H1t, opts.s, opts.r, box),
        norm_after=strip_norm(H1_new, s2, r2, box),
        norm_after_same=strip_norm(H1_new, opts.s, opts.r, box),
        refit_residual=resid, degree=int(deg), n_theta=int(nth), s_new=s2, r_new=r2,
    )
    return KamStepResult(phi, H0_new, H1_new, box, D1, diag, Hin, t)


def kam_step_family(H, t, box=None, opts=None):
    """Step on H(.;t) split as H0 = H(.;0) plus H1 = H(.;t) - H(.;0)."""
    H0 = H.at(0.0)
    if H0.oscillating().n_modes and np.abs(H0.oscillating().coef).max() > 0:
        raise PreconditionError("H(.;0) must be integrable (angle independent)")
    H0 = H0.average()
    return kam_step(H0, H.at(t) - H0, box, opts)


def symplectic_defect(result, n_points=20, step=1e-6, seed=0):
    """max ||J^T Omega J - Omega|| over random points, J the finite-difference Jacobian of chi."""
    rng = np.random.default_rng(seed)
    n = result.box.dim
    Om = np.block([[np.zeros((n, n)), np.eye(n)], [-np.eye(n), np.zeros((n, n))]])
    hw = result.box.halfwidth
    Ip = result.box.center + (2 * rng.uniform(size=(n_points, n)) - 1) * (hw - 2 * step)
    Tp = rng.uniform(0, 2 * np.pi, size=(n_points, n))
    worst = 0.0
    for p in range(n_points):
        z = np.concatenate([Tp[p], Ip[p]])
        J = np.empty((2 * n, 2 * n))
        for j in range(2 * n):
            e = np.zeros(2 * n)
            e[j] = step
            a = np.concatenate(result.change((z + e)[:n], (z + e)[n:]), axis=1)[0]
            b = np.concatenate(result.change((z - e)[:n], (z - e)[n:]), axis=1)[0]
            J[:, j] = (a - b) / (2 * step)
        worst = max(worst, float(np.abs(J.T @ Om @ J - Om).max()))
    return worst


# ---------------------------------------------------------------------------
# leading normal form
# ---------------------------------------------------------------------------

def adaptive_box(H0, H1, center, halfwidth, opts, t=0.0, shrink=0.7, max_tries=30):
    """Largest box about ``center`` (halfwidth shrunk geometrically) satisfying the divisor predicate."""
    hw = np.broadcast_to(np.asarray(halfwidth, float), (H0.dim,)).copy()
    c = np.asarray(center, float)
    for _ in range(max_tries):
        box = Box(tuple(c - hw), tuple(c + hw))
        eps = strip_norm(H1.at(t), opts.s, opts.r, box)
        M = opts.M or (max(1, ceil(abs(log(eps)) / opts.s)) if eps > 0 else 1)
        ks = active_modes(H1.at(t), box, M, opts.drop_tol)
        if np.all(_divisor_ok(H0.at(t), ks, _box_grid(box, 21), opts.C_div, 0.0)):
            return box
        hw *= shrink
    raise DomainError("no nonresonant box found about the requested centre")


@dataclass
class BnfResult:
    ts: np.ndarray
    K0: list
    steps: list
    remainder_norms: np.ndarray
    box: Box
    H0: FourierHamiltonian
    dK0_pair: tuple

    def dK0_dt(self, I):
        """Central difference (K0(I; t1) - K0(I; -t1)) / (2 t1) at the smallest t1."""
        t1, Kp, Km = self.dK0_pair
        I = np.atleast_2d(I)
        return (Kp.average_values(I, 0.0) - Km.average_values(I, 0.0)) / (2 * t1)

    def K0_defect(self, I, dK):
        """|K0(I;t) - H0(I) - t dK(I)| per t, dK the known torus average of dtH."""
        I = np.atleast_2d(I)
        base = self.H0.average_values(I, 0.0)
        return np.array([np.abs(K.average_values(I, 0.0) - base - t * dK(I)).max()
                         for t, K in zip(self.ts, self.K0)])

    def remainder_slope(self):
        ok = self.remainder_norms > 0
        if ok.sum() < 2:
            return float("inf")
        return float(np.polyfit(np.log(self.ts[ok]), np.log(self.remainder_norms[ok]), 1)[0])


def leading_K0(H, t, box, opts=None):
    """K0(I; t) = H0~ + <H1~> after one step, on ``box``; also returns the step."""
    st = kam_step_family(H, t, box, opts)
    return st.H0_new + st.H1_new.average(), st


def bnf_leading(H, ts, box, opts=None, steps=2, sub_halfwidth=None):
    """Run the two-step scheme at each t of ``ts`` (frozen values).

    The integrable part after two steps, H0~ + <H1~>, only needs the first
    refit; the second step runs on a small nonresonant sub-box and supplies
    the remainder norm.
    """
    opts = opts or KamOptions()
    ts = np.asarray(ts, dtype=float)
    H0 = H.at(0.0).average()
    Ks, res, norms = [], [], []
    for t in ts:
        K, st = leading_K0(H, t, box, opts)
        entry = [st]
        rem = st.H1_new
        if steps >= 2:
            hw = sub_halfwidth if sub_halfwidth is not None else 0.25 * box.halfwidth
            sub = adaptive_box(st.H0_new, st.H1_new, box.center, hw, opts)
            st2 = kam_step(st.H0_new, st.H1_new, sub, opts)
            entry.append(st2)
            rem = st2.H1_new
            norms.append(strip_norm(rem, st2.diagnostics["s_new"], st2.diagnostics["r_new"], sub))
        else:
            norms.append(strip_norm(rem, st.diagnostics["s_new"], st.diagnostics["r_new"], box))
        Ks.append(K)
        res.append(entry)
    t1 = float(np.min(np.abs(ts)))
    Kp = Ks[int(np.argmin(np.abs(ts)))]
    Km, _ = leading_K0(H, -t1, box, opts)
    return BnfResult(ts, Ks, res, np.array(norms), box, H0, (t1, Kp, Km))


def fit_K0_family(H, box, t_interval, degree=6, opts=None):
    """K0(I; t) on ``box`` as a polynomial in t over ``t_interval`` (Chebyshev nodes in t)."""
    opts = opts or KamOptions()
    a, b = t_interval
    T = max(abs(a), abs(b))
    m = degree + 1
    nodes = T * _cheb_nodes(m)
    Ks = [leading_K0(H, t, box, opts)[0] for t in nodes]
    # common frame and shape
    frame = Ks[0].frame
    Ks = [K.reframe(*frame) for K in Ks]
    D = max(K.coef.shape[2] for K in Ks)
    n = H.dim
    stack = np.zeros((m,) + (D,) * n, complex)
    for i, K in enumerate(Ks):
        c = K.mode((0,) * n)[0]
        stack[(i,) + tuple(slice(0, s) for s in c.shape)] = c
    # interpolate in t, convert to monomials in t / T, then to raw t
    Vinv = np.linalg.inv(C.chebvander(nodes / T, degree))
    A = np.tensordot(_cheb_to_mono(m) @ Vinv, stack, axes=([1], [0]))
    A = A / (T ** np.arange(m)).reshape((-1,) + (1,) * n)
    return FourierHamiltonian(np.zeros((1, n), dtype=np.int64), A[None], box, "K0", *frame)


def with_options(opts, **kw):
    return replace(opts or KamOptions(), **kw)
