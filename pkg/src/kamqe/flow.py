"""Finite-h experiments on eigenvalue flow: quantum-ergodicity variance, speed
bounds and slow tori, quasi-eigenvalue windows, window counts, the covering
procedure, non-concentration scans and the Gram-matrix test.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diophantine import Ball, DiophantineParams, _members, sample_nonresonant
from .errors import CertificationFailure, DomainError
from .kam import KamOptions, fit_K0_family
from .model import Box, energy_surface_average, legendre_inverse, torus_average
from .quantum import (band_window, lattice_modes, quantize, quasi_eigenvalues, quasimode_residual,
                      spectrum, track_flow)


# ---------------------------------------------------------------------------
# quantum-ergodicity statistic
# ---------------------------------------------------------------------------

def _point_seed(seed, *values):
    """Seed tied to the sample point itself, so nested grids reuse identical draws."""
    words = np.frombuffer(np.round(np.asarray(values, dtype=np.float64), 12).tobytes(), dtype=np.uint32)
    return int(np.random.SeedSequence([int(seed), *words.tolist()]).generate_state(1)[0])


class SurfaceAverageTable:
    """Energy-surface averages of a symbol on a grid of energy bins, linearly interpolated."""

    def __init__(self, H, A, band, t=0.0, bins=32, n_samples=1000, seed=0, shell=None):
        a, b = band
        self.E = np.linspace(a, b, bins)
        shell = shell or 1e-3 * (b - a)
        vals, errs = [], []
        for e in self.E:
            r = energy_surface_average(H, A, e, t, n_samples, seed=_point_seed(seed, e, t), shell=shell)
            vals.append(r.value)
            errs.append(r.stderr)
        self.values = np.array(vals)
        self.stderr = np.array(errs)

    def __call__(self, E):
        return np.interp(E, self.E, self.values)


def qe_statistic(E, U, A_op, band, averages, h, n):
    """h^n sum over E_j in [a, b] of |<A u_j, u_j> - avg_{E_j}(sigma(A))|^2."""
    a, b = band
    sel = (E >= a) & (E <= b)
    if not sel.any():
        raise DomainError("no eigenvalues in the band")
    Am = A_op.matrix if hasattr(A_op, "matrix") else A_op
    Us = U[:, sel]
    diag = np.einsum("ij,ij->j", Us.conj(), Am @ Us).real
    avg = averages(E[sel]) if callable(averages) else np.broadcast_to(averages, diag.shape)
    return float(h ** n * np.sum((diag - avg) ** 2))


def qe_statistic_at(H, A, h, band, t=0.0, theta=None, averages=None, L=2.0, frame=None):
    """Quantize H and A on the band window at t and evaluate the statistic."""
    win = band_window(H, band, h, L)
    modes = lattice_modes(win, h, theta)
    P = quantize(H, h, theta, modes=modes, t=t)
    Aop = quantize(A, h, theta, modes=modes, t=t)
    sp = spectrum(P, band)
    U = sp.U if frame is None else frame(len(modes), sp.U.shape[1])
    if averages is None:
        averages = SurfaceAverageTable(H, A, band, t)
    return qe_statistic(sp.E, U, Aop, band, averages, h, H.dim)


def haar_frame(seed=0):
    """Factory for Haar-random orthonormal frames (the ergodic mock)."""
    rng = np.random.default_rng(seed)

    def make(N, k):
        Z = rng.standard_normal((N, k)) + 1j * rng.standard_normal((N, k))
        Q, R = np.linalg.qr(Z)
        return Q * (np.diag(R) / np.abs(np.diag(R)))

    return make


# ---------------------------------------------------------------------------
# speed bounds and slow tori
# ---------------------------------------------------------------------------

@dataclass
class SpeedBounds:
    Q_minus: float
    Q_plus: float
    c: float
    eps: float
    delta: float
    omega0: np.ndarray
    I0: np.ndarray
    torus_speed: float
    q_stderr: float = 0.0
    B: float = float("nan")
    max_mu_speed: float = float("nan")
    certified: bool = True
    reason: str = ""

    @property
    def gap(self):
        return self.Q_minus - self.B

    def to_dict(self):
        return {
            "Q_minus": self.Q_minus, "Q_plus": self.Q_plus, "c": self.c, "eps": self.eps,
            "delta": self.delta, "omega0": list(map(float, self.omega0)), "I0": list(map(float, self.I0)),
            "torus_speed": self.torus_speed, "q_stderr": self.q_stderr, "B": self.B,
            "max_mu_speed": self.max_mu_speed, "certified": self.certified, "reason": self.reason,
        }


def surface_speed_range(H, band, t_interval, n_E=5, n_t=3, n_samples=2000, seed=0, shell=None):
    """(Q_-, Q_+, max stderr): inf/sup over an (E, t) grid of surface averages of dtP0."""
    a, b = band
    shell = shell or 1e-3 * (b - a)
    dH = H.d_t()
    vals, errs = [], []
    for t in np.linspace(t_interval[0], t_interval[1], n_t):
        for e in np.linspace(a, b, n_E):
            r = energy_surface_average(H, dH, e, t, n_samples, seed=_point_seed(seed, e, t), shell=shell)
            vals.append(r.value)
            errs.append(r.stderr)
    return float(min(vals)), float(max(vals)), float(max(errs))


def find_slow_torus(H, band, params, region, Q_minus, c, n_candidates=400, seed=0):
    """Slowest nonresonant torus with H0 in the inner half of the band.

    Returns (omega0, I0, speed); raises CertificationFailure unless
    speed < Q_minus - 3c.
    """
    a, b = band
    w = b - a
    rng = np.random.default_rng(seed)
    W = region.sample(rng, n_candidates * 4)
    W = W[_members(W, params, region)]
    if not len(W):
        raise CertificationFailure("no nonresonant frequency in the search region")
    H0 = H.at(0.0).average()
    I = legendre_inverse(H0, W, 0.0)
    inside = H0.domain.contains(I)
    e = H0.average_values(I, 0.0)
    inside &= (e >= a + w / 4) & (e <= b - w / 4)
    if not inside.any():
        raise CertificationFailure("search region does not meet the band's energy shell")
    W, I = W[inside], I[inside]
    speed = torus_average(H, I, 0.0, "dtH")
    k = int(np.argmin(speed))
    if not speed[k] < Q_minus - 3 * c:
        raise CertificationFailure(
            f"slowest torus speed {speed[k]:.4f} is not below Q_- - 3c = {Q_minus - 3 * c:.4f}")
    return W[k], I[k], float(speed[k])


def speed_bounds(H, band, t_interval, params, c_target, region, n_E=5, n_t=3, n_samples=2000, seed=0,
                 delta=None):
    """Q_-, Q_+ and a certified slow torus; B is filled in by ``certify_B``."""
    qm, qp, se = surface_speed_range(H, band, t_interval, n_E, n_t, n_samples, seed)
    w0, I0, sp = find_slow_torus(H, band, params, region, qm, c_target, seed=seed)
    eps = qp - qm
    delta = delta if delta is not None else float(t_interval[1] - t_interval[0])
    return SpeedBounds(qm, qp, c_target, eps, delta, w0, I0, sp, se)


def certify_B(bounds, max_mu_speed):
    """Place B midway between the fastest quasi-eigenvalue and Q_- - c."""
    top = bounds.Q_minus - bounds.c
    bounds.max_mu_speed = float(max_mu_speed)
    if max_mu_speed < top:
        bounds.B = 0.5 * (max_mu_speed + top)
        bounds.certified = True
    else:
        bounds.B = float("nan")
        bounds.certified = False
        bounds.reason = f"quasi-eigenvalue speed {max_mu_speed:.4f} reaches Q_- - c = {top:.4f}"
    return bounds


def mu_speeds(K0, family, dt=1e-6):
    """Central-difference d/dt of K0(h (m + theta/4); t) at the family's t."""
    I = family.actions
    return (K0.average_values(I, family.t + dt) - K0.average_values(I, family.t - dt)) / (2 * dt)


# ---------------------------------------------------------------------------
# windows and counting
# ---------------------------------------------------------------------------

@dataclass
class WindowSet:
    t: float
    m: np.ndarray
    mu: np.ndarray
    halfwidth: float
    merged: np.ndarray  # (k, 2) disjoint sorted intervals

    @property
    def intervals(self):
        return np.stack([self.mu - self.halfwidth, self.mu + self.halfwidth], axis=1)

    def measure(self):
        return float(np.sum(self.merged[:, 1] - self.merged[:, 0])) if len(self.merged) else 0.0

    def contains(self, x):
        x = np.atleast_1d(np.asarray(x, float))
        if not len(self.merged):
            return np.zeros(len(x), bool)
        i = np.searchsorted(self.merged[:, 0], x, side="right") - 1
        ok = i >= 0
        out = np.zeros(len(x), bool)
        out[ok] = x[ok] <= self.merged[i[ok], 1]
        return out

    def which(self, x):
        """Indices into ``m`` of windows containing x."""
        return np.nonzero(np.abs(self.mu - x) <= self.halfwidth)[0]


def merge_intervals(iv):
    if not len(iv):
        return np.zeros((0, 2))
    iv = iv[np.argsort(iv[:, 0])]
    out = [list(iv[0])]
    for lo, hi in iv[1:]:
        if lo <= out[-1][1]:
            out[-1][1] = max(out[-1][1], hi)
        else:
            out.append([lo, hi])
    return np.array(out)


def windows(family):
    w = family.halfwidth
    iv = np.stack([family.mu - w, family.mu + w], axis=1) if family.count else np.zeros((0, 2))
    return WindowSet(family.t, family.m, family.mu, w, merge_intervals(iv))


def count_in_windows(E, ws):
    """N(t; h): number of eigenvalues inside the window union."""
    return int(ws.contains(np.asarray(E, float)).sum())


# ---------------------------------------------------------------------------
# covering procedure
# ---------------------------------------------------------------------------

@dataclass
class CoveringReport:
    label: int
    intervals: list  # (i_start, i_end) grid indices
    times: list      # (s_j, s_j')
    m: list
    m_C: float
    m_A: float
    hit: np.ndarray  # grid indices with E in W

    def covers_hits(self):
        cov = np.zeros(len(self.hit), bool) if False else set()
        for i, j in self.intervals:
            cov.update(range(i, j + 1))
        return set(np.nonzero(self.hit)[0].tolist()) <= cov

    def distinct(self):
        return len(set(map(tuple, self.m))) == len(self.m)

    def almost_disjoint(self):
        iv = sorted(self.intervals)
        return all(b[0] >= a[1] for a, b in zip(iv, iv[1:]))


def covering_intervals(ts, E, families, mu_fn, band=None, label=-1):
    """The inductive covering of {t : E(t) in W(t)} by window tubes [s_j, s_j'].

    Parameters
    ----------
    ts : grid; E : E(t_i) along the grid (NaN where absent)
    families : QuasiEigenFamily per grid point (index sets and windows)
    mu_fn : callable (m array, t) -> mu_m(t), defined for every m
    """
    ts = np.asarray(ts, float)
    E = np.asarray(E, float)
    K = len(ts)
    wsets = [windows(f) for f in families]
    hit = np.array([np.isfinite(E[i]) and bool(wsets[i].contains(E[i])[0]) for i in range(K)])
    if band is not None:
        inb = np.isfinite(E) & (E >= band[0]) & (E <= band[1])
        dt = np.diff(ts)
        m_A = float(np.sum(dt[inb[:-1]]))
    else:
        m_A = float("nan")
    members = [set(map(tuple, f.m.tolist())) for f in families]
    w = families[0].halfwidth if families else 0.0
    intervals, times, ms = [], [], []
    start = 0
    while True:
        cand = [i for i in range(start, K) if hit[i]]
        if not cand:
            break
        s = cand[0]
        idx = wsets[s].which(E[s])
        choices = [tuple(wsets[s].m[k]) for k in idx]
        dist = [abs(E[s] - wsets[s].mu[k]) for k in idx]
        order = np.argsort(dist, kind="stable")
        persist = [choices[k] for k in order if s + 1 >= K or choices[k] in members[s + 1]]
        mj = persist[0] if persist else choices[order[0]]
        inside = np.abs(E - mu_fn(np.array([mj]), ts)) <= w
        inside &= np.isfinite(E)
        last = int(np.nonzero(inside)[0].max())
        last = max(last, s)
        intervals.append((s, last))
        times.append((float(ts[s]), float(ts[last])))
        ms.append(mj)
        start = last + 1
    m_C = float(sum(b - a for a, b in times))
    return CoveringReport(label, intervals, times, ms, m_C, m_A, hit)


def mu_fn_from(K0, h, theta):
    th = np.asarray(theta, float)

    def mu(m, ts):
        I = h * (np.atleast_2d(m) + th / 4)
        ts = np.atleast_1d(ts)
        return np.array([K0.average_values(I, t)[0] for t in ts])

    return mu


# ---------------------------------------------------------------------------
# the scan pipeline
# ---------------------------------------------------------------------------

@dataclass
class QuasiConfig:
    omega_center: tuple | None = None
    omega_radius: float = 0.03
    L: float = 2.0
    theta: tuple | None = None
    gamma: int | None = None
    n_S: int = 200
    patch_margin: float = 0.05
    K0_degree: int = 6


@dataclass
class ScanResult:
    bounds: SpeedBounds
    rows: list
    flagged_fraction: dict
    K0: object
    omegas: np.ndarray
    trajectories: dict = field(default_factory=dict)
    families: dict = field(default_factory=dict)
    B_by_h: dict = field(default_factory=dict)

    def t_star(self, h):
        return [r["t"] for r in self.rows if r["h"] == h and r["flagged"]]


def frequency_ball_sample(center, radius, params, n, seed=0):
    """n frequencies of Omega_kappa inside B(center, radius)."""
    ball = Ball(tuple(center), radius)
    rng = np.random.default_rng(seed)
    out = []
    tries = 0
    while sum(len(x) for x in out) < n and tries < 200:
        W = ball.sample(rng, 4 * n)
        out.append(W[_members(W, params, ball)])
        tries += 1
    W = np.concatenate(out)[:n]
    if not len(W):
        sample_nonresonant(ball, params, center, radius, seed)  # raises SamplingError
    return W


def prepare_quasi(H, bounds, params, t_interval, h_max, quasi, kam_opts=None, seed=0):
    """Frequency set Omega-bar, patch box and the fitted K0(I; t) family."""
    center = quasi.omega_center if quasi.omega_center is not None else bounds.omega0
    W = frequency_ball_sample(center, quasi.omega_radius, params, quasi.n_S, seed)
    H0 = H.at(0.0).average()
    I = legendre_inverse(H0, W, 0.0)
    spread = np.abs(I - bounds.I0).max(axis=0)
    hw = spread + quasi.L * h_max + quasi.patch_margin + 2 * max(abs(t) for t in t_interval)
    box = Box(tuple(bounds.I0 - hw), tuple(bounds.I0 + hw))
    K0 = fit_K0_family(H, box, t_interval, quasi.K0_degree, kam_opts or KamOptions())
    return W, box, K0


def action_set(K0, W, t, guess=None):
    """S(t) = {I(omega; t) : omega in Omega-bar} via the Legendre inverse of K0(.; t)."""
    return legendre_inverse(K0, W, t, guess=guess)


def non_concentration_scan(H, h_list, band, t_grid, bounds, params, quasi=None, kam_opts=None, seed=0,
                           track=True):
    """N(t; h) / #M_h(t) over the t-grid for each h; t with ratio < 1/2 are flagged."""
    quasi = quasi or QuasiConfig()
    ts = np.asarray(t_grid, float)
    W, box, K0 = prepare_quasi(H, bounds, params, (ts[0], ts[-1]), max(h_list), quasi, kam_opts, seed)
    S = [action_set(K0, W, t) for t in ts]
    rows, frac, trajs, fams, Bs = [], {}, {}, {}, {}
    theta = quasi.theta
    for h in h_list:
        fam_h = [quasi_eigenvalues(K0, h, theta, S[i], quasi.L, t, volume=False) for i, t in enumerate(ts)]
        speeds = np.concatenate([mu_speeds(K0, f) for f in fam_h if f.count])
        Bs[h] = float(speeds.max()) if len(speeds) else float("nan")
        fams[h] = fam_h
        if track:
            # N(t; h) counts every eigenvalue in W(t; h), so track the hull of band and windows
            mus = np.concatenate([f.mu for f in fam_h if f.count] + [np.array(band, float)])
            w = h ** H.dim * h
            pad = 0.05 * (band[1] - band[0])
            tb = (min(band[0], mus.min() - w) - pad, max(band[1], mus.max() + w) + pad)
            trajs[h] = track_flow(H, h, theta, ts, band, L=quasi.L, tracking_band=tb)
        flagged = 0
        for i, t in enumerate(ts):
            ws = windows(fam_h[i])
            N = count_in_windows(trajs[h].E[i], ws) if track else 0
            Mc = fam_h[i].count
            ratio = N / Mc if Mc else float("nan")
            flag = bool(Mc and ratio < 0.5)
            flagged += flag
            rows.append({"h": h, "t": float(t), "N": N, "M_count": Mc, "ratio": ratio, "flagged": flag})
        frac[h] = flagged / len(ts)
    return ScanResult(bounds, rows, frac, K0, W, trajs, fams, Bs)


# ---------------------------------------------------------------------------
# Gram matrix test
# ---------------------------------------------------------------------------

@dataclass
class GramReport:
    hs_norm: float
    invertible: bool
    dim_U: int
    n_M: int
    proj_perp: np.ndarray
    residuals: np.ndarray | None
    min_eig: float
    contradiction: bool

    def bound_holds(self, h, n, tol=1e-12):
        if self.residuals is None:
            return True
        return bool(np.all(self.proj_perp <= self.residuals / h ** (n + 1) + tol))


def gram_test(family, op, E, U, ws=None, residuals=None):
    """Gram matrix of the quasimodes projected onto span{u_j : E_j in W}.

    ``op`` supplies the mode basis; ``E, U`` are eigenpairs of the same
    operator (full or windowed).
    """
    ws = ws or windows(family)
    sel = ws.contains(E)
    UW = U[:, sel]
    idx = op.index(family.m)
    if np.any(idx < 0):
        raise DomainError("quasimode outside the operator's mode set")
    B = UW.conj().T[:, idx]  # coordinates of w_m in the window basis
    M = B.conj().T @ B
    D = M - np.eye(len(idx))
    hs = float(np.linalg.norm(D))
    perp = np.sqrt(np.clip(1.0 - np.real(np.diag(M)), 0.0, None))
    ev = np.linalg.eigvalsh(0.5 * (M + M.conj().T)) if len(idx) else np.zeros(0)
    contradiction = bool(UW.shape[1] == 0 and len(idx) > 0)
    return GramReport(hs, hs < 1.0, int(UW.shape[1]), int(len(idx)), perp, residuals,
                      float(ev.min(initial=np.inf)), contradiction)


def normal_form_operator(K0, R, h, theta, box, t=0.0):
    """Patch operator of K0 + R on lattice points inside ``box``."""
    sym = K0 + R if R is not None and R.n_modes else K0
    modes = lattice_modes(box, h, theta)
    return quantize(sym, h, theta, modes=modes, t=t)


def gram_pipeline(K0, R, h, theta, S, L, t, box):
    """Family, patch operator, residuals and Gram report at one (h, t)."""
    fam = quasi_eigenvalues(K0, h, theta, S, L, t, volume=False)
    op = normal_form_operator(K0, R, h, theta, box, t)
    res = quasimode_residual(op, fam)
    sp = spectrum(op)
    return fam, op, gram_test(fam, op, sp.E, sp.U, residuals=res)


# ---------------------------------------------------------------------------
# Weyl counts
# ---------------------------------------------------------------------------

def phase_volume(H0, band, n_samples=2_000_000, seed=0):
    """Lebesgue measure of {I in D : a <= H0(I) <= b} (Monte Carlo)."""
    a, b = band
    rng = np.random.default_rng(seed)
    bb = H0.domain.bounding_box()
    X = bb.sample(rng, n_samples)
    X = X[H0.domain.contains(X)]
    e = H0.average_values(X, 0.0)
    frac = np.mean((e >= a) & (e <= b)) * len(X) / n_samples
    return float(frac * bb.volume())


def weyl_counts(H, h, band, delta=0.0, Mhat=0.0, theta=None, t=0.0, L=2.0, trajectory=None, n_samples=2_000_000):
    """Lattice eigenvalue counts against (2 pi h)^-n times the phase-space volume."""
    a, b = band
    fat = (a - Mhat * delta, b + Mhat * delta)
    win = band_window(H, fat, h, L)
    modes = lattice_modes(win, h, theta)
    P = quantize(H, h, theta, modes=modes, t=t)
    E = spectrum(P).E
    n_band = int(np.sum((E >= a) & (E <= b)))
    n_G = int(np.sum((E >= fat[0]) & (E <= fat[1])))
    H0 = H.at(0.0).average()
    vol = phase_volume(H0, band, n_samples)
    vol_fat = phase_volume(H0, fat, n_samples) if fat != (a, b) else vol
    n = H.dim
    out = {"h": h, "band_count": n_band, "G_count": n_G, "volume_prediction": vol / h ** n,
           "G_prediction": vol_fat / h ** n, "ratio": n_band / (vol / h ** n)}
    if trajectory is not None:
        E_all, _ = trajectory.series_matrix()
        stay = np.all(np.isfinite(E_all) & (E_all >= a) & (E_all <= b), axis=0)
        out["G_tilde_count"] = int(stay.sum())
        out["G_tilde_ratio"] = int(stay.sum()) / max(n_G, 1)
    return out


def qe_speed_fraction(trajectory, Q_minus, Q_plus, eps):
    """Fraction of band eigenvalues whose Hadamard speed lies in [Q_- - eps, Q_+ + eps]."""
    tot = hit = 0
    for i in range(len(trajectory.ts)):
        sel = trajectory.in_band(i)
        hv = trajectory.hadamard[i][sel]
        tot += len(hv)
        hit += int(np.sum((hv >= Q_minus - eps) & (hv <= Q_plus + eps)))
    return hit / tot if tot else float("nan")
