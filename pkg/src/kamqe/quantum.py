"""Lattice quantization on T^n, spectra, eigenvalue tracking and quasimodes.

The operator acts on l^2 of a finite set of lattice points m, basis vector
e_m ~ exp(i <m + theta/4, x>). A symbol sum_k c_k(I; t) e^{i<k,x>} becomes
the matrix with entries

    P[m + k, m] = c_k(h (m + k/2 + theta/4); t)     (midpoint rule),

which is Hermitian exactly because c_{-k} = conj(c_k).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy import sparse
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from .errors import DomainError, KamqeError
from .model import Annulus, Box, _poly_eval, frequency


# ---------------------------------------------------------------------------
# action windows and lattices
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BandWindow:
    """Actions within ``pad`` (first-order distance) of {a <= H0(I) <= b}, inside ``box``."""

    H0: object
    a: float
    b: float
    pad: float
    box: Box

    def contains(self, I):
        I = np.atleast_2d(I)
        e = self.H0.average_values(I, 0.0)
        g = np.linalg.norm(frequency(self.H0, I, 0.0), axis=-1)
        excess = np.maximum(np.maximum(self.a - e, e - self.b), 0.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(excess > 0, excess / np.maximum(g, 1e-300), 0.0)
        return (d <= self.pad) & self.box.contains(I)

    def bounding_box(self):
        return self.box


def band_window(H, band, h, L=2.0, extra=0.0):
    """Mode window: the band's action shell fattened by (K_max + L) h + extra."""
    a, b = (band.a, band.b) if hasattr(band, "a") else band
    return BandWindow(H.at(0.0).average(), a, b, (H.K_max + L) * h + extra, H.domain.bounding_box())


def lattice_modes(window, h, theta=None):
    """All m in Z^n with h (m + theta/4) inside ``window``."""
    bb = window.bounding_box()
    n = bb.dim
    th = np.zeros(n) if theta is None else np.asarray(theta, float)
    lo = np.ceil(np.array(bb.lo) / h - th / 4 - 1e-9).astype(int)
    hi = np.floor(np.array(bb.hi) / h - th / 4 + 1e-9).astype(int)
    axes = [np.arange(l, u + 1) for l, u in zip(lo, hi)]
    m = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)
    keep = window.contains(h * (m + th / 4))
    return m[keep]


class _Lookup:
    """Dense table mapping lattice points to row indices."""

    def __init__(self, modes):
        self.lo = modes.min(axis=0)
        self.shape = modes.max(axis=0) - self.lo + 1
        self.table = -np.ones(int(np.prod(self.shape)), dtype=np.int64)
        self.table[self._flat(modes)] = np.arange(len(modes))

    def _flat(self, m):
        return np.ravel_multi_index((m - self.lo).T, self.shape)

    def __call__(self, m):
        m = np.atleast_2d(m)
        out = -np.ones(len(m), dtype=np.int64)
        ok = np.all((m >= self.lo) & (m < self.lo + self.shape), axis=1)
        out[ok] = self.table[self._flat(m[ok])]
        return out


@dataclass(eq=False)
class LatticeOperator:
    h: float
    theta: tuple
    modes: np.ndarray
    matrix: np.ndarray
    t: float
    _lookup: _Lookup = field(default=None, repr=False)

    def __post_init__(self):
        if self._lookup is None:
            self._lookup = _Lookup(self.modes)

    @property
    def dim(self):
        return len(self.modes)

    @property
    def n(self):
        return self.modes.shape[1]

    def index(self, m):
        return self._lookup(m)

    def actions(self, m=None):
        m = self.modes if m is None else np.atleast_2d(m)
        return self.h * (m + np.asarray(self.theta) / 4)

    def is_diagonal(self):
        A = self.matrix
        return not np.any(A - np.diag(np.diag(A)))

    def is_hermitian(self):
        return bool(np.array_equal(self.matrix, self.matrix.conj().T))

    def bandwidth(self):
        i, j = np.nonzero(self.matrix)
        if not len(i):
            return 0
        return int(np.abs(self.modes[i] - self.modes[j]).sum(axis=1).max())


def quantize(H, h, theta=None, window=None, t=0.0, modes=None):
    """LatticeOperator of the symbol H(.; t) at semiclassical parameter h."""
    n = H.dim
    th = np.zeros(n, dtype=int) if theta is None else np.asarray(theta, dtype=int)
    if modes is None:
        modes = lattice_modes(window if window is not None else H.domain, h, th)
    modes = np.asarray(modes, dtype=np.int64)
    if not len(modes):
        raise DomainError("empty lattice mode set")
    lookup = _Lookup(modes)
    N = len(modes)
    A = np.zeros((N, N), dtype=complex)
    src = np.arange(N)
    shift = th / 4.0
    for i, k in enumerate(H.ks):
        first = k[np.nonzero(k)[0][0]] if np.any(k) else 0
        if first < 0:
            continue
        dst = lookup(modes + k)
        ok = dst >= 0
        pts = h * (modes[ok] + k / 2.0 + shift)
        v = _poly_eval(H.coef[i:i + 1], H.local(pts), t)[0]
        if first == 0:
            A[src[ok], src[ok]] += v.real
        else:
            A[dst[ok], src[ok]] += v
            A[src[ok], dst[ok]] += np.conj(v)
    return LatticeOperator(float(h), tuple(int(x) for x in th), modes, A, float(t), lookup)


# ---------------------------------------------------------------------------
# spectra
# ---------------------------------------------------------------------------

@dataclass
class Spectrum:
    E: np.ndarray
    U: np.ndarray
    clusters_resolved: int = 0

    def __len__(self):
        return len(self.E)


def _clusters(E, tol):
    """Index groups of consecutive eigenvalues closer than tol."""
    if not len(E):
        return []
    cuts = np.nonzero(np.diff(E) > tol)[0] + 1
    return [g for g in np.split(np.arange(len(E)), cuts) if len(g) > 1]


def resolve_clusters(E, U, dP=None, ref=None, tol=1e-12):
    """Fix the basis inside degenerate clusters.

    The cluster basis diagonalises the compressed derivative ``dP`` (the
    analytic continuation of the eigenvectors); where that is degenerate too,
    an orthogonal Procrustes rotation towards ``ref`` is used.
    """
    U = U.copy()
    count = 0
    scale = max(1.0, float(np.abs(E).max(initial=0.0)))
    for g in _clusters(E, tol * scale):
        Ug = U[:, g]
        if dP is not None:
            W = Ug.conj().T @ (dP @ Ug)
            w, R = np.linalg.eigh(0.5 * (W + W.conj().T))
            Ug = Ug @ R
            inner = _clusters(w, tol * max(1.0, float(np.abs(w).max())))
        else:
            inner = [np.arange(len(g))]
        if ref is not None:
            for sub in inner:
                if len(sub) < 2:
                    continue
                X = Ug[:, sub]
                B = X.conj().T @ ref
                top = np.argsort(-np.linalg.norm(B, axis=0))[:len(sub)]
                if len(top) < len(sub):
                    continue
                u, _, vh = np.linalg.svd(B[:, top])
                Ug[:, sub] = X @ (u @ vh)
        if np.iscomplexobj(Ug) and not np.iscomplexobj(U):
            U = U.astype(complex)
        U[:, g] = Ug
        count += 1
    return U, count


def spectrum(op, band=None, dP=None, ref=None, degenerate_tol=1e-12):
    """Eigenpairs of a LatticeOperator, ascending, optionally restricted to [a, b]."""
    A = op.matrix if isinstance(op, LatticeOperator) else np.asarray(op)
    dPm = dP.matrix if isinstance(dP, LatticeOperator) else dP
    if not np.any(A - np.diag(np.diag(A))):
        d = np.diag(A).real
        order = np.argsort(d, kind="stable")
        E = d[order]
        U = np.eye(len(d), dtype=complex)[:, order]
        if band is not None:
            sel = (E >= band[0]) & (E <= band[1])
            E, U = E[sel], U[:, sel]
    else:
        if np.iscomplexobj(A) and not A.imag.any():
            A = A.real  # exactly real symmetric: the real solver is several times faster
        try:
            if band is not None:
                E, U = sla.eigh(A, subset_by_value=(band[0], band[1]), driver="evr")
                sel = E >= band[0]
                E, U = E[sel], U[:, sel]
            else:
                E, U = np.linalg.eigh(A)
        except (np.linalg.LinAlgError, sla.LinAlgError) as exc:
            raise KamqeError(f"eigensolver failure: {exc}") from exc
    count = 0
    if dPm is not None or ref is not None:
        U, count = resolve_clusters(E, U, dPm, ref, degenerate_tol)
    return Spectrum(E, U, count)


def eigen_residual(op, sp):
    A = op.matrix if isinstance(op, LatticeOperator) else op
    if not len(sp.E):
        return 0.0
    R = A @ sp.U - sp.U * sp.E
    return float(np.linalg.norm(R, axis=0).max())


def hadamard(dP, U):
    """<P' u_j, u_j> for each column of U."""
    M = dP.matrix if isinstance(dP, LatticeOperator) else dP
    if np.iscomplexobj(M) and not M.imag.any():
        M = M.real
    M = sparse.csr_matrix(M)  # lattice operators carry a handful of diagonals
    return np.einsum("ij,ij->j", U.conj(), M @ U).real


# ---------------------------------------------------------------------------
# flow tracking
# ---------------------------------------------------------------------------

@dataclass
class SpectrumTrajectory:
    """Eigenvalues E_j(t) on a t-grid, with labels matched across grid points.

    ``E[i]``, ``labels[i]`` and ``hadamard[i]`` are arrays over the eigenpairs
    kept at ``ts[i]``; ``vectors`` holds eigenvector frames for the grid
    indices listed in ``stored``.
    """

    ts: np.ndarray
    E: list
    labels: list
    hadamard: list
    crossings: list
    min_overlap: list
    band: tuple
    tracking_band: tuple
    h: float
    theta: tuple
    modes: np.ndarray
    speed_bound: float
    vectors: dict = field(default_factory=dict)
    bisections: int = 0

    @property
    def n_labels(self):
        return int(max((l.max(initial=-1) for l in self.labels), default=-1) + 1)

    def series(self, j):
        """E_j(t) with NaN where label j is absent."""
        out = np.full(len(self.ts), np.nan)
        for i, (E, lab) in enumerate(zip(self.E, self.labels)):
            hit = np.nonzero(lab == j)[0]
            if len(hit):
                out[i] = E[hit[0]]
        return out

    def hadamard_series(self, j):
        out = np.full(len(self.ts), np.nan)
        for i, (hv, lab) in enumerate(zip(self.hadamard, self.labels)):
            hit = np.nonzero(lab == j)[0]
            if len(hit):
                out[i] = hv[hit[0]]
        return out

    def series_matrix(self):
        J = self.n_labels
        E = np.full((len(self.ts), J), np.nan)
        HV = np.full((len(self.ts), J), np.nan)
        for i, (e, lab, hv) in enumerate(zip(self.E, self.labels, self.hadamard)):
            E[i, lab] = e
            HV[i, lab] = hv
        return E, HV

    def crossing_matrix(self):
        """Boolean (steps, labels): label crossed a flagged step."""
        J = self.n_labels
        X = np.zeros((len(self.ts) - 1, J), dtype=bool)
        for i, c in enumerate(self.crossings):
            X[i, list(c)] = True
        return X

    def speeds(self):
        """Finite-difference speeds (steps, labels) and trapezoid Hadamard values."""
        E, HV = self.series_matrix()
        dt = np.diff(self.ts)[:, None]
        return np.diff(E, axis=0) / dt, 0.5 * (HV[1:] + HV[:-1])

    def in_band(self, i):
        a, b = self.band
        return (self.E[i] >= a) & (self.E[i] <= b)


def _match(U0, U1):
    """Maximal-overlap assignment between consecutive frames."""
    O = np.abs(U1.conj().T @ U0)
    rows, cols = linear_sum_assignment(-O)
    return rows, cols, O[rows, cols]


def track_flow(H, h, theta=None, t_grid=None, band=(0.45, 0.55), window=None, L=2.0,
               overlap_min=0.5, max_bisect=6, pad=None, store=None, degenerate_tol=1e-12,
               tracking_band=None):
    """Eigenpairs of the quantized family along ``t_grid`` with overlap matching.

    Eigenvalues are kept inside ``tracking_band`` (default: ``band`` padded so
    that nothing leaves between grid points unnoticed); ``band`` itself is
    only used for band-membership queries on the result.

    Steps whose best matching has an overlap below ``overlap_min`` are bisected
    up to ``max_bisect`` times; what still fails is flagged as a crossing.
    """
    ts = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(ts) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    a, b = band
    dH = H.d_t()
    # a priori speed bound: sup of |dtH| on lattice points near the band
    span = ts[-1] - ts[0]
    win0 = window or band_window(H, (a, b), h, L)
    modes = lattice_modes(win0, h, theta)
    probe = quantize(dH, h, theta, modes=modes, t=ts[0])
    Mhat = float(np.abs(probe.matrix).sum(axis=0).max())
    for t in (ts[len(ts) // 2], ts[-1]):
        Mhat = max(Mhat, float(np.abs(quantize(dH, h, theta, modes=modes, t=t).matrix).sum(axis=0).max()))
    if pad is None:
        pad = 0.05 * (b - a) + Mhat * (np.diff(ts).max() if len(ts) > 1 else 0.0)
    tb = (a - pad, b + pad) if tracking_band is None else tuple(map(float, tracking_band))
    lo, hi = min(a, tb[0]), max(b, tb[1])
    if window is None and (Mhat * span > 0 or (lo, hi) != (a, b)):
        modes = lattice_modes(band_window(H, (lo - Mhat * span, hi + Mhat * span), h, L), h, theta)
    store = set(range(len(ts))) if store == "all" else set(store or ())

    def frame(t, ref=None):
        # ref only breaks ties inside clusters that dP leaves degenerate
        P = quantize(H, h, theta, modes=modes, t=t)
        dP = quantize(dH, h, theta, modes=modes, t=t)
        sp = spectrum(P, tb, dP=dP, ref=ref, degenerate_tol=degenerate_tol)
        return sp.E, sp.U, hadamard(dP, sp.U)

    E0, U0, hv0 = frame(ts[0])
    labels0 = np.arange(len(E0))
    next_label = len(E0)
    out_E, out_L, out_H, out_X, out_O = [E0], [labels0], [hv0], [], []
    vectors = {0: U0} if 0 in store else {}
    n_bis = 0

    def advance(tl, Ul, labl, tr, depth):
        """Carry labels from the frame at tl to tr, bisecting weak matches."""
        nonlocal next_label, n_bis
        Er, Ur, hvr = frame(tr, Ul)
        rows, cols, ov = _match(Ul, Ur)
        weak = ov < overlap_min
        if weak.any() and depth < max_bisect:
            n_bis += 1
            tm = 0.5 * (tl + tr)
            _, Um, _, labm, flm, ovm = advance(tl, Ul, labl, tm, depth + 1)
            Er, Ur, hvr, labr, flr, ovr = advance(tm, Um, labm, tr, depth + 1)
            return Er, Ur, hvr, labr, flm | flr, min(ovm, ovr)
        labr = -np.ones(len(Er), dtype=np.int64)
        labr[rows] = labl[cols]
        for k in np.nonzero(labr < 0)[0]:
            labr[k] = next_label
            next_label += 1
        flagged = set(int(x) for x in labl[cols[weak]])
        return Er, Ur, hvr, labr, flagged, float(ov.min(initial=1.0))

    Ul, labl = U0, labels0
    for i in range(1, len(ts)):
        Er, Ur, hvr, labr, flagged, ov = advance(ts[i - 1], Ul, labl, ts[i], 0)
        out_E.append(Er)
        out_L.append(labr)
        out_H.append(hvr)
        out_X.append(flagged)
        out_O.append(ov)
        if i in store:
            vectors[i] = Ur
        Ul, labl = Ur, labr
    return SpectrumTrajectory(ts, out_E, out_L, out_H, out_X, out_O, (a, b), tb, float(h),
                              tuple(np.zeros(H.dim, int) if theta is None else theta), modes, Mhat,
                              vectors, n_bis)


# ---------------------------------------------------------------------------
# quasi-eigenvalues and quasimodes
# ---------------------------------------------------------------------------

def set_distance(S, I):
    """Distance from actions I to the set S (point cloud, Box or Annulus)."""
    I = np.atleast_2d(np.asarray(I, float))
    if isinstance(S, Annulus):
        r = np.linalg.norm(I - np.array(S.center), axis=1)
        return np.maximum(np.maximum(S.r_in - r, r - S.r_out), 0.0)
    if isinstance(S, Box):
        ex = np.maximum(np.maximum(np.array(S.lo) - I, I - np.array(S.hi)), 0.0)
        return np.linalg.norm(ex, axis=1)
    pts = np.atleast_2d(np.asarray(S, float))
    return cKDTree(pts).query(I)[0]


def _set_bbox(S):
    if isinstance(S, (Annulus, Box)):
        bb = S.bounding_box()
        return np.array(bb.lo), np.array(bb.hi)
    pts = np.atleast_2d(np.asarray(S, float))
    return pts.min(axis=0), pts.max(axis=0)


def fattened_volume(S, radius, n_samples=200_000, seed=0):
    """Monte-Carlo volume of {I : dist(I, S) < radius}."""
    lo, hi = _set_bbox(S)
    lo, hi = lo - radius, hi + radius
    rng = np.random.default_rng(seed)
    X = rng.uniform(lo, hi, size=(n_samples, len(lo)))
    return float(np.prod(hi - lo) * np.mean(set_distance(S, X) < radius))


@dataclass
class QuasiEigenFamily:
    m: np.ndarray
    actions: np.ndarray
    mu: np.ndarray
    h: float
    theta: tuple
    L: float
    t: float
    volume_prediction: float = float("nan")

    @property
    def n(self):
        return self.m.shape[1]

    @property
    def halfwidth(self):
        return self.h ** (self.n + 1)

    @property
    def count(self):
        return len(self.m)


def index_set(S, h, L, theta=None, n=None):
    """M_h = {m : dist(S, h (m + theta/4)) < L h} by a lattice scan."""
    lo, hi = _set_bbox(S)
    n = len(lo)
    th = np.zeros(n) if theta is None else np.asarray(theta, float)
    r = L * h
    mlo = np.floor((lo - r) / h - th / 4).astype(int) - 1
    mhi = np.ceil((hi + r) / h - th / 4).astype(int) + 1
    axes = [np.arange(l, u + 1) for l, u in zip(mlo, mhi)]
    m = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, n)
    keep = set_distance(S, h * (m + th / 4)) < r
    return m[keep]


def quasi_eigenvalues(K0, h, theta, S, L=2.0, t=0.0, volume=True, seed=0):
    """Index set, quasi-eigenvalues mu_m = K0(h (m + theta/4); t) and the Weyl prediction."""
    n = K0.dim
    th = tuple(np.zeros(n, int)) if theta is None else tuple(int(x) for x in theta)
    m = index_set(S, h, L, th)
    I = h * (m + np.asarray(th) / 4)
    mu = K0.average_values(I, t) if len(m) else np.zeros(0)
    vol = fattened_volume(S, L * h, seed=seed) / h ** n if volume else float("nan")
    return QuasiEigenFamily(m, I, mu, float(h), th, float(L), float(t), vol)


def quasimode_residual(op, family):
    """||(P - mu_m) e_m|| for each m of the family (basis-vector quasimodes)."""
    idx = op.index(family.m)
    if np.any(idx < 0):
        raise DomainError("quasimode index outside the operator's mode set")
    cols = op.matrix[:, idx].copy()
    cols[idx, np.arange(len(idx))] -= family.mu
    return np.linalg.norm(cols, axis=0)
