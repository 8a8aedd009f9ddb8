"""Two-mode homodyne tomography with Fock-basis pattern functions.

Homodyne samples are stored in the package units (vacuum variance 1/4).
Pattern functions are defined for the textbook convention with vacuum
variance 1/2, so samples are rescaled by ``sqrt(2)`` right before the
pattern functions are evaluated.

A density matrix ``rho[n, k, l, m] = <n k| rho |l m>`` carries mode A in
the first index of each pair.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import eval_genlaguerre, roots_hermite
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import NumericalFailure
from .gaussian import VACUUM_VARIANCE, GaussianEnsemble, GaussianState

UNIT_TO_STD = math.sqrt(2.0)
DEFAULT_DIM = 5


# ----------------------------------------------------------------------------
# density matrices


@dataclass(eq=False)
class FockDM:
    """Truncated two-mode density matrix, ``elements[n, k, l, m]``.

    ``stderr`` optionally holds the standard error of the real and imaginary
    parts (as a complex array); ``blocks`` optionally holds independent
    partial estimates whose mean is ``elements``, used for resampling.
    """

    elements: np.ndarray
    stderr: np.ndarray = field(default=None, repr=False)
    blocks: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        el = np.asarray(self.elements, dtype=complex)
        d = el.shape[0]
        if el.shape != (d, d, d, d):
            raise ValueError(f"expected (d, d, d, d) elements, got {el.shape}")
        self.elements = el

    @property
    def dim(self):
        return self.elements.shape[0]

    def matrix(self):
        d = self.dim
        return self.elements.reshape(d * d, d * d)

    @classmethod
    def from_matrix(cls, mat, dim=None):
        mat = np.asarray(mat, dtype=complex)
        d = dim or int(round(math.sqrt(mat.shape[0])))
        return cls(mat.reshape(d, d, d, d))

    @classmethod
    def from_ket(cls, ket):
        """``ket`` is a (d, d) array of amplitudes <n k|psi>."""
        ket = np.asarray(ket, dtype=complex)
        return cls(np.einsum("nk,lm->nklm", ket, ket.conj()))

    @property
    def trace(self):
        return float(np.trace(self.matrix()).real)

    def hermiticity_error(self):
        m = self.matrix()
        return float(np.max(np.abs(m - m.conj().T)))

    def hermitian(self):
        m = self.matrix()
        return FockDM.from_matrix(0.5 * (m + m.conj().T))

    def partial_transpose(self):
        """Transpose on mode B: ``rho^T_B[n, k, l, m] = rho[n, m, l, k]``."""
        return FockDM(self.elements.transpose(0, 3, 2, 1))

    def reduced(self, mode):
        el = self.elements
        if mode == 0:
            return np.einsum("nklk->nl", el)
        return np.einsum("nknm->km", el)

    def to_json(self):
        flat = self.matrix().reshape(-1)
        return {
            "dim": self.dim,
            "layout": "row-major (n k) x (l m); mode A first; [re, im] pairs",
            "elements": [[float(z.real), float(z.imag)] for z in flat],
        }

    @classmethod
    def from_json(cls, obj):
        d = int(obj["dim"])
        arr = np.array(obj["elements"], dtype=float)
        return cls((arr[:, 0] + 1j * arr[:, 1]).reshape(d, d, d, d))

    def save(self, path, metadata=None):
        payload = {"metadata": metadata or {}, **self.to_json()}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)


def fock_projector(n, k, dim=DEFAULT_DIM):
    ket = np.zeros((dim, dim))
    ket[n, k] = 1.0
    return FockDM.from_ket(ket)


# ----------------------------------------------------------------------------
# pattern functions


def _hermite_functions(dim, x):
    """Normalised oscillator eigenfunctions psi_0..psi_{dim-1} (vacuum var 1/2)."""
    x = np.asarray(x, dtype=float)
    psi = np.zeros((dim,) + x.shape)
    psi[0] = math.pi**-0.25 * np.exp(-0.5 * x * x)
    if dim > 1:
        psi[1] = math.sqrt(2.0) * x * psi[0]
    for n in range(2, dim):
        psi[n] = math.sqrt(2.0 / n) * x * psi[n - 1] - math.sqrt((n - 1) / n) * psi[n - 2]
    return psi


@lru_cache(maxsize=8)
def _k_rule(dim, n_k=400, k_max=16.0):
    t, w = np.polynomial.legendre.leggauss(n_k)
    k = 0.5 * k_max * (t + 1.0)
    w = 0.5 * k_max * w
    weights = np.zeros((dim, dim, n_k))
    for n in range(dim):
        for m in range(n + 1):
            d = n - m
            g = (
                math.sqrt(math.factorial(m) / math.factorial(n))
                * 2.0 ** (-d / 2)
                * k ** (d + 1)
                * np.exp(-0.25 * k * k)
                * eval_genlaguerre(m, d, 0.5 * k * k)
            )
            weights[n, m] = g * w * (-1.0) ** (d // 2)
    return k, weights


def pattern_function_direct(n, m, x, dim=None):
    """Pattern function f_nm evaluated directly (no tabulation).

    ``f_nm(x) = sqrt(m!/n!) 2^{-d/2} int_0^inf k^{d+1} e^{-k^2/4}
    L_m^{(d)}(k^2/2) trig(k x) dk`` for ``n >= m``, ``d = n - m``, with
    ``trig`` = ``(-1)^{d/2} cos`` for even d and ``(-1)^{(d-1)/2} sin`` for
    odd d. The k integral is done with 400-point Gauss-Legendre on [0, 16],
    where the integrand has decayed below 1e-16.
    """
    if m > n:
        n, m = m, n
    dim = max(dim or 0, n + 1)
    k, weights = _k_rule(dim)
    x = np.asarray(x, dtype=float)
    kx = np.multiply.outer(x, k)
    trig = np.cos(kx) if (n - m) % 2 == 0 else np.sin(kx)
    return trig @ weights[n, m]


class PatternTable:
    """Pattern functions f_nm tabulated on a uniform grid in standard units.

    Evaluation interpolates linearly; points outside ``[-x_max, x_max]``
    evaluate to zero.
    """

    def __init__(self, dim=DEFAULT_DIM, x_max=8.0, step=2.5e-4):
        if step > 1e-3:
            raise ValueError("table step must be <= 1e-3")
        self.dim = dim
        self.x_max = float(x_max)
        n_pts = int(round(2 * x_max / step)) + 1
        self.grid = np.linspace(-x_max, x_max, n_pts)
        self.step = self.grid[1] - self.grid[0]
        k, weights = _k_rule(dim)
        table = np.zeros((dim, dim, n_pts))
        even = [(n, m) for n in range(dim) for m in range(n + 1) if (n - m) % 2 == 0]
        odd = [(n, m) for n in range(dim) for m in range(n + 1) if (n - m) % 2 == 1]
        w_even = np.stack([weights[n, m] for n, m in even], axis=1)
        w_odd = np.stack([weights[n, m] for n, m in odd], axis=1) if odd else None
        for start in range(0, n_pts, 8192):
            sl = slice(start, start + 8192)
            kx = np.multiply.outer(self.grid[sl], k)
            vals = np.cos(kx) @ w_even
            for col, (n, m) in enumerate(even):
                table[n, m, sl] = table[m, n, sl] = vals[:, col]
            if odd:
                vals = np.sin(kx) @ w_odd
                for col, (n, m) in enumerate(odd):
                    table[n, m, sl] = table[m, n, sl] = vals[:, col]
        # trailing zero column so that clamped indices read f = 0
        self._flat = np.concatenate([table.reshape(dim * dim, n_pts), np.zeros((dim * dim, 2))], axis=1)

    def __call__(self, x):
        """All f_nm at points ``x`` (standard units), shape (dim*dim, len(x))."""
        x = np.asarray(x, dtype=float).reshape(-1)
        pos = (x + self.x_max) / self.step
        inside = (pos >= 0.0) & (pos <= len(self.grid) - 1)
        idx = np.where(inside, np.minimum(pos.astype(np.int64), len(self.grid) - 2), len(self.grid))
        frac = np.where(inside, pos - idx, 0.0)
        lo = self._flat[:, idx]
        hi = self._flat[:, np.where(inside, idx + 1, len(self.grid))]
        return lo + (hi - lo) * frac

    def value(self, n, m, x):
        return self(x)[n * self.dim + m].reshape(np.shape(x))


@lru_cache(maxsize=4)
def pattern_table(dim=DEFAULT_DIM, x_max=8.0, step=2.5e-4):
    return PatternTable(dim, x_max, step)


def pattern_value(n, m, x, dim=DEFAULT_DIM):
    """Single-mode pattern function f_nm(x), ``x`` in standard units."""
    if not (0 <= n < dim and 0 <= m < dim):
        raise ValueError(f"pattern indices ({n}, {m}) outside truncation {dim}")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("pattern functions need finite arguments")
    return pattern_table(dim).value(n, m, x)


# ----------------------------------------------------------------------------
# acquisition


@dataclass(frozen=True)
class TomographyPlan:
    n_slices: int = 100
    samples_per_slice: int = 300_000
    phase_schedule: tuple = None

    def __post_init__(self):
        if self.phase_schedule is None:
            side = int(round(math.sqrt(self.n_slices)))
            if side * side != self.n_slices:
                raise ValueError("default schedule needs a square number of slices")
            object.__setattr__(self, "phase_schedule", product_schedule(side))
        sched = tuple((float(a), float(b)) for a, b in self.phase_schedule)
        if len(sched) != self.n_slices:
            raise ValueError("phase_schedule length must equal n_slices")
        if self.samples_per_slice < 1:
            raise ValueError("samples_per_slice must be positive")
        object.__setattr__(self, "phase_schedule", sched)

    @property
    def angles(self):
        return np.array(self.phase_schedule)

    @property
    def total_samples(self):
        return self.n_slices * self.samples_per_slice


def product_schedule(side):
    """``side x side`` grid of LO phases, each stepped uniformly over [0, pi)."""
    th = np.arange(side) * math.pi / side
    return tuple((a, b) for a in th for b in th)


@dataclass(eq=False)
class HomodyneSamples:
    """Joint homodyne records ``(theta_A, theta_B, x_A, x_B)`` by slice.

    ``x_a`` and ``x_b`` have shape (n_slices, samples_per_slice); values are
    in package units (vacuum variance 1/4).
    """

    angles: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray

    def __len__(self):
        return self.x_a.size

    def records(self):
        n = self.x_a.shape[1]
        th = np.repeat(self.angles, n, axis=0)
        return np.column_stack([th, self.x_a.reshape(-1), self.x_b.reshape(-1)])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("# columns: theta_A, theta_B, x_A, x_B (rad, rad, vacuum variance 1/4 units)\n")
            w = csv.writer(fh)
            w.writerow(["theta_A", "theta_B", "x_A", "x_B"])
            w.writerows(self.records().tolist())

    @classmethod
    def from_records(cls, rec):
        rec = np.asarray(rec, dtype=float)
        angles, inverse = np.unique(rec[:, :2], axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        counts = np.bincount(inverse)
        if np.any(counts != counts[0]):
            raise ValueError("every slice must hold the same number of samples")
        order = np.argsort(inverse, kind="stable")
        x_a = rec[order, 2].reshape(len(angles), -1)
        x_b = rec[order, 3].reshape(len(angles), -1)
        return cls(angles, x_a, x_b)

    @classmethod
    def from_csv(cls, path):
        rec = np.loadtxt(path, delimiter=",", comments="#", skiprows=2)
        return cls.from_records(np.atleast_2d(rec))


def _as_ensemble(components):
    if isinstance(components, GaussianEnsemble):
        return components
    if isinstance(components, GaussianState):
        return GaussianEnsemble(components.mean[None], components.cov[None])
    if hasattr(components, "components"):
        return components.components
    return GaussianEnsemble.from_states(components)


def _slice_marginals(ens, idx, theta_a, theta_b):
    ca, sa, cb, sb = math.cos(theta_a), math.sin(theta_a), math.cos(theta_b), math.sin(theta_b)
    u = np.array([[ca, sa, 0.0, 0.0], [0.0, 0.0, cb, sb]])
    means = ens.means[idx] @ u.T
    covs = u @ ens.covs[idx] @ u.T
    return means, covs


def acquire_slice(components, theta_a, theta_b, n, rng):
    """Draw ``n`` joint quadrature samples at one LO setting.

    Components are picked with probability equal to their weight.
    """
    ens = _as_ensemble(components)
    if len(ens) == 0:
        raise ValueError("cannot acquire from an empty distillate")
    if len(ens) == 1:
        idx = np.zeros(n, dtype=np.int64)
    elif np.all(ens.weights == ens.weights[0]):
        idx = rng.integers(len(ens), size=n)
    else:
        idx = rng.choice(len(ens), size=n, p=ens.weights)
    means, covs = _slice_marginals(ens, idx, theta_a, theta_b)
    z = rng.standard_normal((n, 2))
    l11 = np.sqrt(covs[:, 0, 0])
    l21 = covs[:, 1, 0] / l11
    l22 = np.sqrt(np.maximum(covs[:, 1, 1] - l21 * l21, 0.0))
    x_a = means[:, 0] + l11 * z[:, 0]
    x_b = means[:, 1] + l21 * z[:, 0] + l22 * z[:, 1]
    return x_a, x_b


def acquire(components, plan, rng):
    """Simulated joint homodyne tomography of a two-mode distillate."""
    ens = _as_ensemble(components)
    if len(ens) == 0:
        raise ValueError("cannot acquire from an empty distillate")
    if ens.n_modes != 2:
        raise ValueError("tomography needs two-mode states")
    x_a = np.empty((plan.n_slices, plan.samples_per_slice))
    x_b = np.empty_like(x_a)
    for s, (ta, tb) in enumerate(plan.phase_schedule):
        x_a[s], x_b[s] = acquire_slice(ens, ta, tb, plan.samples_per_slice, rng)
    return HomodyneSamples(plan.angles, x_a, x_b)


# ----------------------------------------------------------------------------
# reconstruction


def _phase_factors(dim, theta_a, theta_b):
    d = np.arange(dim)
    fa = np.exp(1j * np.subtract.outer(d, d) * theta_a)  # [n, l]
    fb = np.exp(1j * np.subtract.outer(d, d) * theta_b)  # [k, m]
    return np.einsum("nl,km->nlkm", fa, fb)


class _Accumulator:
    """Running sums of the pattern-function estimator, per slice and block."""

    def __init__(self, dim, n_slices, n_blocks, table):
        self.dim = dim
        self.table = table
        self.n_slices = n_slices
        self.n_blocks = n_blocks
        d2 = dim * dim
        self.block_sums = np.zeros((n_blocks, d2, d2), dtype=complex)
        self.block_counts = np.zeros(n_blocks)
        self.var_re = np.zeros((d2, d2))
        self.var_im = np.zeros((d2, d2))

    def add_slice(self, theta_a, theta_b, x_a, x_b):
        n = len(x_a)
        fa = self.table(UNIT_TO_STD * np.asarray(x_a))  # (nl, n)
        fb = self.table(UNIT_TO_STD * np.asarray(x_b))  # (km, n)
        ph = _phase_factors(self.dim, theta_a, theta_b).reshape(self.dim**2, self.dim**2)
        edges = np.linspace(0, n, self.n_blocks + 1).astype(int)
        total = np.zeros((self.dim**2, self.dim**2))
        for b in range(self.n_blocks):
            sl = slice(edges[b], edges[b + 1])
            part = fa[:, sl] @ fb[:, sl].T
            total += part
            self.block_sums[b] += part * ph * (self.n_blocks / n)
        self.block_counts += 1
        mean = total / n
        second = (fa * fa) @ (fb * fb).T / n
        var = np.maximum(second - mean * mean, 0.0) / n
        self.var_re += var * ph.real**2
        self.var_im += var * ph.imag**2

    def result(self):
        s = self.n_slices
        blocks = self.block_sums / s  # (B, nl, km), each an unbiased estimate
        rho_nlkm = blocks.mean(axis=0)
        d = self.dim

        def to_nklm(a):
            return a.reshape(a.shape[:-2] + (d, d, d, d)).swapaxes(-3, -2)

        rho = FockDM(to_nklm(rho_nlkm)).hermitian()
        rho.stderr = to_nklm(np.sqrt(self.var_re) / s + 1j * np.sqrt(self.var_im) / s)
        rho.blocks = to_nklm(blocks)
        return rho


def reconstruct(samples, dim=DEFAULT_DIM, table=None, n_blocks=20):
    """Average the pattern-function estimator over homodyne samples.

    ``rho[n,k,l,m] = < f_nl(x_A) f_km(x_B) e^{i(n-l) th_A} e^{i(k-m) th_B} >``
    with the slice average standing in for the uniform phase average.
    Per-element standard errors are attached as ``stderr``; ``blocks`` holds
    ``n_blocks`` independent sub-estimates for resampling.
    """
    table = table or pattern_table(dim)
    n_blocks = max(1, min(n_blocks, samples.x_a.shape[1]))
    acc = _Accumulator(dim, len(samples.angles), n_blocks, table)
    for (ta, tb), xa, xb in zip(samples.angles, samples.x_a, samples.x_b):
        acc.add_slice(ta, tb, xa, xb)
    return acc.result()


def sampled_rho(components, plan, rng, dim=DEFAULT_DIM, n_blocks=20, table=None):
    """acquire + reconstruct, streaming slice by slice to bound memory."""
    ens = _as_ensemble(components)
    if len(ens) == 0:
        raise ValueError("cannot acquire from an empty distillate")
    table = table or pattern_table(dim)
    acc = _Accumulator(dim, plan.n_slices, n_blocks, table)
    for ta, tb in plan.phase_schedule:
        xa, xb = acquire_slice(ens, ta, tb, plan.samples_per_slice, rng)
        acc.add_slice(ta, tb, xa, xb)
    return acc.result()


class PatternTomography(BaseEstimator):
    """Estimator wrapper around :func:`reconstruct`.

    ``fit`` takes an (n, 4) array of records ``(theta_A, theta_B, x_A, x_B)``
    with every slice holding the same number of samples.
    """

    def __init__(self, dim=DEFAULT_DIM, n_blocks=20):
        self.dim = dim
        self.n_blocks = n_blocks

    def fit(self, X, y=None):
        X = check_array(X, dtype=float)
        if X.shape[1] != 4:
            raise ValueError(f"expected 4 columns (theta_A, theta_B, x_A, x_B), got {X.shape[1]}")
        self.density_matrix_ = reconstruct(
            HomodyneSamples.from_records(X), dim=self.dim, n_blocks=self.n_blocks
        )
        self.n_samples_ = X.shape[0]
        return self

    def transform(self, X):
        """Per-record estimator contributions, shape (n, dim**4), complex."""
        check_is_fitted(self, "density_matrix_")
        X = check_array(X, dtype=float)
        table = pattern_table(self.dim)
        fa = table(UNIT_TO_STD * X[:, 2])
        fb = table(UNIT_TO_STD * X[:, 3])
        d = np.arange(self.dim)
        dd = np.subtract.outer(d, d).reshape(-1)
        pa = np.exp(1j * np.outer(X[:, 0], dd))
        pb = np.exp(1j * np.outer(X[:, 1], dd))
        out = np.einsum("pn,np,qn,nq->npq", fa, pa, fb, pb)
        dim = self.dim
        return out.reshape(-1, dim, dim, dim, dim).swapaxes(2, 3).reshape(len(X), -1)

    def score(self, X, y=None):
        check_is_fitted(self, "density_matrix_")
        return self.density_matrix_.trace


# ----------------------------------------------------------------------------
# deterministic references


def exact_rho(components, dim=DEFAULT_DIM, schedule=None, n_gh=64, table=None):
    """N -> infinity limit of :func:`reconstruct` by numeric quadrature.

    For every slice and component the estimator is integrated against the
    analytic bivariate Gaussian marginal with an ``n_gh``-point
    Gauss-Hermite product rule. Cost grows linearly with the number of
    components; use :func:`fock_rho` for large ensembles.
    """
    ens = _as_ensemble(components)
    if len(ens) == 0:
        raise ValueError("empty distillate")
    schedule = np.array(schedule if schedule is not None else product_schedule(10))
    table = table or pattern_table(dim)
    t, w = roots_hermite(n_gh)
    xi = math.sqrt(2.0) * t
    w = w / math.sqrt(math.pi)
    d2 = dim * dim
    acc = np.zeros((d2, d2), dtype=complex)
    idx = np.arange(len(ens))
    for ta, tb in schedule:
        means, covs = _slice_marginals(ens, idx, ta, tb)
        means = means * UNIT_TO_STD
        covs = covs * 2.0
        l11 = np.sqrt(covs[:, 0, 0])
        l21 = covs[:, 1, 0] / l11
        l22 = np.sqrt(np.maximum(covs[:, 1, 1] - l21 * l21, 0.0))
        S = np.zeros((d2, d2))
        for c in range(len(ens)):
            xa = means[c, 0] + l11[c] * xi
            xb = means[c, 1] + l21[c] * xi[:, None] + l22[c] * xi[None, :]
            fa = table(xa)  # (nl, i)
            fb = table(xb.reshape(-1)).reshape(d2, n_gh, n_gh) @ w  # (km, i)
            S += ens.weights[c] * ((fa * w) @ fb.T)
        acc += S * _phase_factors(dim, ta, tb).reshape(d2, d2)
    acc /= len(schedule)
    rho = acc.reshape(dim, dim, dim, dim).swapaxes(1, 2)
    out = FockDM(rho).hermitian()
    if not np.all(np.isfinite(out.elements)):
        raise NumericalFailure("exact_rho produced non-finite elements", {"n_gh": n_gh})
    return out


def _fock_coefficients(n_modes):
    """Matrices L and J mapping (alpha*, beta) onto phase-space quadratures."""
    L = np.zeros((2 * n_modes, 2 * n_modes), dtype=complex)
    for i in range(n_modes):
        L[2 * i, i] = L[2 * i, n_modes + i] = 0.5
        L[2 * i + 1, i] = 0.5j
        L[2 * i + 1, n_modes + i] = -0.5j
    J = np.zeros((2 * n_modes, 2 * n_modes))
    J[:n_modes, n_modes:] = np.eye(n_modes)
    J[n_modes:, :n_modes] = np.eye(n_modes)
    return L, J


@lru_cache(maxsize=8)
def _recursion_plan(n_vars, dim):
    shape = (dim,) * n_vars
    plan = []
    for flat, k in enumerate(itertools.product(range(dim), repeat=n_vars)):
        if flat == 0:
            continue
        i = next(p for p, v in enumerate(k) if v)
        prev = list(k)
        prev[i] -= 1
        terms = []
        for j in range(n_vars):
            if prev[j]:
                lower = list(prev)
                lower[j] -= 1
                terms.append((j, math.sqrt(prev[j]), np.ravel_multi_index(lower, shape)))
        plan.append((flat, i, np.ravel_multi_index(prev, shape), math.sqrt(k[i]), tuple(terms)))
    return plan


def gaussian_fock_elements(means, covs, dim=DEFAULT_DIM):
    """Fock matrix elements of Gaussian states, shape (K,) + (dim,) * 2N.

    Uses the coherent-state generating function
    ``e^{(|a|^2+|b|^2)/2} <a|rho|b> = T exp(z.A.z/2 + y.z)`` with
    ``z = (a*, b)``, fixed by analytic continuation of the Husimi function
    (covariance ``cov + 1/4``), and expands it with the multivariate
    Hermite recursion. Element ``[n..., m...]`` is ``<n|rho|m>``.
    """
    means = np.atleast_2d(np.asarray(means, dtype=float))
    covs = np.asarray(covs, dtype=float).reshape(len(means), means.shape[1], means.shape[1])
    K, dd = means.shape
    n = dd // 2
    L, J = _fock_coefficients(n)
    sq = covs + VACUUM_VARIANCE * np.eye(dd)
    inv = np.linalg.inv(sq)
    A = -np.einsum("ai,kab,bj->kij", L, inv, L) + J
    y = np.einsum("ai,kab,kb->ki", L, inv, means)
    T = np.exp(-0.5 * np.einsum("ka,kab,kb->k", means, inv, means)) / (
        2.0**n * np.sqrt(np.linalg.det(sq))
    )
    plan = _recursion_plan(2 * n, dim)
    out = np.zeros((K, dim ** (2 * n)), dtype=complex)
    out[:, 0] = T
    for flat, i, prev, norm, terms in plan:
        v = y[:, i] * out[:, prev]
        for j, s, lower in terms:
            v = v + A[:, i, j] * (s * out[:, lower])
        out[:, flat] = v / norm
    return out.reshape((K,) + (dim,) * (2 * n))


def fock_rho(components, dim=DEFAULT_DIM, chunk=4096, phase_sigma=None):
    """Exact truncated density matrix of a Gaussian mixture.

    ``phase_sigma=(s_A, s_B)`` additionally averages over independent
    Gaussian phase diffusion of each mode, which multiplies element
    ``[n,k,l,m]`` by ``exp(-(s_A^2 (n-l)^2 + s_B^2 (k-m)^2) / 2)``.
    """
    ens = _as_ensemble(components)
    if ens.n_modes != 2:
        raise ValueError("fock_rho handles two-mode states")
    acc = np.zeros((dim,) * 4, dtype=complex)
    for start in range(0, len(ens), chunk):
        sl = slice(start, start + chunk)
        el = gaussian_fock_elements(ens.means[sl], ens.covs[sl], dim)
        acc += np.tensordot(ens.weights[sl], el, axes=1)
    if phase_sigma is not None:
        acc = acc * phase_damping(dim, *phase_sigma)
    return FockDM(acc).hermitian()


def phase_damping(dim, sigma_a, sigma_b):
    d = np.arange(dim)
    diff2 = np.subtract.outer(d, d) ** 2
    fa = np.exp(-0.5 * sigma_a**2 * diff2)  # [n, l]
    fb = np.exp(-0.5 * sigma_b**2 * diff2)  # [k, m]
    return np.einsum("nl,km->nklm", fa, fb)


def block_fock_rho(components, trial_index, n_blocks, dim=DEFAULT_DIM, chunk=4096):
    """Exact Fock matrices of contiguous trial blocks (for bootstrap errors).

    Returns a :class:`FockDM` whose ``blocks`` are per-block averages and
    whose elements are the mixture average.
    """
    ens = _as_ensemble(components)
    trial_index = np.asarray(trial_index)
    labels = np.searchsorted(
        np.linspace(trial_index.min(), trial_index.max() + 1, n_blocks + 1)[1:-1],
        trial_index,
        side="right",
    )
    sums = np.zeros((n_blocks,) + (dim,) * 4, dtype=complex)
    for start in range(0, len(ens), chunk):
        sl = slice(start, start + chunk)
        el = gaussian_fock_elements(ens.means[sl], ens.covs[sl], dim)
        np.add.at(sums, labels[sl], el)
    counts = np.bincount(labels, minlength=n_blocks).astype(float)
    keep = counts > 0
    rho = FockDM(sums.sum(axis=0) / counts.sum()).hermitian()
    rho.blocks = sums[keep] / counts[keep, None, None, None, None]
    rho.block_weights = counts[keep] / counts.sum()
    return rho
