"""Gaussian-state algebra in phase space.

Conventions used throughout the package:

* quadratures are interleaved, ``(x1, p1, x2, p2, ...)``;
* the vacuum variance of every quadrature is 1/4, i.e. ``a = x + i p``;
* states are immutable; every operation returns a new state.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import PhysicalityError

VACUUM_VARIANCE = 0.25

#: Run the uncertainty-relation check after every operation. Off by default;
#: set ``CVDISTILL_CHECK_PHYSICAL=1`` (the test-suite does) to enable.
CHECK_PHYSICAL = os.environ.get("CVDISTILL_CHECK_PHYSICAL", "") not in ("", "0")

_PHYS_TOL = 1e-10


def symplectic_form(n_modes):
    """Block-diagonal symplectic form with ``[[0, 1], [-1, 0]]`` blocks."""
    return np.kron(np.eye(n_modes), np.array([[0.0, 1.0], [-1.0, 0.0]]))


def _symmetrize(cov):
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True, eq=False)
class GaussianState:
    """Mean vector and covariance matrix of ``n_modes`` bosonic modes."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float).reshape(-1)
        cov = np.array(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size) or mean.size % 2:
            raise ValueError(
                f"inconsistent shapes: mean {mean.shape}, cov {cov.shape}"
            )
        mean.flags.writeable = False
        cov.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def n_modes(self):
        return self.mean.size // 2

    def __repr__(self):
        return f"GaussianState(n_modes={self.n_modes})"

    def quadrature_indices(self, mode):
        _check_mode(self, mode)
        return [2 * mode, 2 * mode + 1]

    def allclose(self, other, atol=1e-12):
        return (
            self.n_modes == other.n_modes
            and np.allclose(self.mean, other.mean, rtol=0.0, atol=atol)
            and np.allclose(self.cov, other.cov, rtol=0.0, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class SymplecticOp:
    """Linear phase-space map ``r -> S r + d``."""

    matrix: np.ndarray
    displacement: np.ndarray = field(default=None)

    def __post_init__(self):
        S = np.array(self.matrix, dtype=float)
        if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] % 2:
            raise ValueError(f"symplectic matrix must be 2N x 2N, got {S.shape}")
        d = (
            np.zeros(S.shape[0])
            if self.displacement is None
            else np.array(self.displacement, dtype=float).reshape(-1)
        )
        object.__setattr__(self, "matrix", S)
        object.__setattr__(self, "displacement", d)

    @property
    def n_modes(self):
        return self.matrix.shape[0] // 2

    def is_symplectic(self, atol=1e-10):
        omega = symplectic_form(self.n_modes)
        return np.allclose(self.matrix @ omega @ self.matrix.T, omega, atol=atol, rtol=0)

    def __matmul__(self, other):
        if isinstance(other, SymplecticOp):
            return SymplecticOp(
                self.matrix @ other.matrix,
                self.matrix @ other.displacement + self.displacement,
            )
        if isinstance(other, GaussianState):
            return self.apply(other)
        return NotImplemented

    def apply(self, state):
        if state.n_modes != self.n_modes:
            raise ValueError(
                f"operator acts on {self.n_modes} modes, state has {state.n_modes}"
            )
        S = self.matrix
        return _checked(
            GaussianState(S @ state.mean + self.displacement, _symmetrize(S @ state.cov @ S.T))
        )


# ----------------------------------------------------------------------------
# physicality


def symplectic_eigenvalues(cov):
    """Symplectic spectrum of a covariance matrix, ascending (vacuum -> 1/4)."""
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0] // 2
    ev = np.linalg.eigvals(1j * symplectic_form(n) @ cov)
    return np.sort(np.abs(ev.real))[::2]


def is_physical(state_or_cov, tol=_PHYS_TOL):
    cov = getattr(state_or_cov, "cov", state_or_cov)
    cov = np.asarray(cov, dtype=float)
    if cov.size == 0:
        return True
    if not np.allclose(cov, cov.T, rtol=1e-12, atol=1e-14):
        return False
    return bool(symplectic_eigenvalues(cov).min() >= VACUUM_VARIANCE - tol)


def check_physical(state, tol=_PHYS_TOL):
    """Raise :class:`PhysicalityError` unless ``cov + (i/4) Omega >= 0``."""
    if not is_physical(state, tol):
        nu = symplectic_eigenvalues(state.cov).min()
        raise PhysicalityError(
            f"uncertainty relation violated: smallest symplectic eigenvalue {nu:.3e} < 1/4"
        )
    return state


def _checked(state):
    if CHECK_PHYSICAL:
        check_physical(state)
    return state


def _check_mode(state, mode):
    if not 0 <= int(mode) < state.n_modes or int(mode) != mode:
        raise ValueError(f"mode {mode} out of range for {state.n_modes}-mode state")


# ----------------------------------------------------------------------------
# construction and passive optics


def vacuum_state(n_modes):
    if int(n_modes) != n_modes or n_modes < 1:
        raise ValueError(f"n_modes must be a positive integer, got {n_modes}")
    return GaussianState(np.zeros(2 * n_modes), VACUUM_VARIANCE * np.eye(2 * n_modes))


def rotation_matrix(theta):
    """Phase-space rotation; broadcasts over an array of angles."""
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    R = np.empty(theta.shape + (2, 2))
    R[..., 0, 0] = c
    R[..., 0, 1] = s
    R[..., 1, 0] = -s
    R[..., 1, 1] = c
    return R


def phase_shift_op(n_modes, mode, theta):
    S = np.eye(2 * n_modes)
    S[2 * mode:2 * mode + 2, 2 * mode:2 * mode + 2] = rotation_matrix(theta)
    return SymplecticOp(S)


def beamsplitter_op(n_modes, i, j, transmittance):
    """Symplectic matrix of ``out_i = sqrt(T) in_i + sqrt(1-T) in_j``,
    ``out_j = sqrt(1-T) in_i - sqrt(T) in_j``."""
    t, r = np.sqrt(transmittance), np.sqrt(1.0 - transmittance)
    S = np.eye(2 * n_modes)
    I2 = np.eye(2)
    si, sj = slice(2 * i, 2 * i + 2), slice(2 * j, 2 * j + 2)
    S[si, si] = t * I2
    S[si, sj] = r * I2
    S[sj, si] = r * I2
    S[sj, sj] = -t * I2
    return SymplecticOp(S)


def phase_shift(state, mode, theta):
    _check_mode(state, mode)
    return phase_shift_op(state.n_modes, mode, theta).apply(state)


def beamsplitter(state, i, j, transmittance):
    _check_mode(state, i)
    _check_mode(state, j)
    if i == j:
        raise ValueError("beam splitter needs two distinct modes")
    if not 0.0 <= transmittance <= 1.0:
        raise ValueError(f"transmittance must lie in [0, 1], got {transmittance}")
    return beamsplitter_op(state.n_modes, i, j, transmittance).apply(state)


def tensor(a, b):
    n = a.mean.size
    m = b.mean.size
    cov = np.zeros((n + m, n + m))
    cov[:n, :n] = a.cov
    cov[n:, n:] = b.cov
    return GaussianState(np.concatenate([a.mean, b.mean]), cov)


def keep_modes(state, modes):
    modes = [int(k) for k in modes]
    if not modes:
        raise ValueError("keep_modes needs at least one mode")
    if len(set(modes)) != len(modes):
        raise ValueError(f"duplicate modes in {modes}")
    for k in modes:
        _check_mode(state, k)
    idx = np.array([[2 * k, 2 * k + 1] for k in modes]).reshape(-1)
    return GaussianState(state.mean[idx], state.cov[np.ix_(idx, idx)])


def gaussian_purity(state_or_cov):
    """Tr(rho^2) of a Gaussian state: (1/4)^N / sqrt(det cov)."""
    cov = np.asarray(getattr(state_or_cov, "cov", state_or_cov), dtype=float)
    n = cov.shape[-1] // 2
    return VACUUM_VARIANCE**n / np.sqrt(np.linalg.det(cov))


# ----------------------------------------------------------------------------
# homodyne measurement


def _measured_split(state, mode, lo_angle):
    _check_mode(state, mode)
    c = np.zeros(state.mean.size)
    c[2 * mode] = np.cos(lo_angle)
    c[2 * mode + 1] = np.sin(lo_angle)
    rest = np.array([q for q in range(state.mean.size) if q // 2 != mode], dtype=int)
    m_theta = c @ state.mean
    var_theta = c @ state.cov @ c
    cross = state.cov[rest] @ c
    if not var_theta > 0.0:
        raise PhysicalityError(f"measured quadrature has non-positive variance {var_theta}")
    return rest, m_theta, var_theta, cross


def condition_on_value(state, mode, lo_angle, value):
    """Condition on the homodyne outcome ``value`` of quadrature
    ``cos(lo_angle) x + sin(lo_angle) p`` of ``mode``.

    The measured mode is removed. Returns ``(remaining, density)`` where
    ``density`` is the marginal probability density of ``value``.
    """
    rest, m_theta, var_theta, cross = _measured_split(state, mode, lo_angle)
    resid = value - m_theta
    density = np.exp(-0.5 * resid * resid / var_theta) / np.sqrt(2.0 * np.pi * var_theta)
    mean = state.mean[rest] + cross * (resid / var_theta)
    cov = state.cov[np.ix_(rest, rest)] - np.outer(cross, cross) / var_theta
    return _checked(GaussianState(mean, _symmetrize(cov))), float(density)


def homodyne_sample(state, mode, lo_angle, rng):
    """Draw a homodyne outcome from the exact marginal and condition on it.

    Consumes exactly one standard normal from ``rng``.
    Returns ``(value, remaining, density)``.
    """
    _, m_theta, var_theta, _ = _measured_split(state, mode, lo_angle)
    value = m_theta + np.sqrt(var_theta) * rng.standard_normal()
    remaining, density = condition_on_value(state, mode, lo_angle, value)
    return float(value), remaining, density


# ----------------------------------------------------------------------------
# ensembles


@dataclass(frozen=True, eq=False)
class GaussianEnsemble:
    """Weighted mixture of Gaussian components sharing a mode count.

    Stored as stacked arrays: ``means`` is (K, 2N), ``covs`` is (K, 2N, 2N).
    Weights are normalised to sum to one.
    """

    means: np.ndarray
    covs: np.ndarray
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covs, dtype=float)
        if means.ndim != 2 or covs.shape != means.shape + means.shape[-1:]:
            raise ValueError(f"bad ensemble shapes: means {means.shape}, covs {covs.shape}")
        if self.weights is None:
            w = np.full(len(means), 1.0 / max(len(means), 1))
        else:
            w = np.asarray(self.weights, dtype=float).reshape(-1)
            if w.shape != (len(means),) or np.any(w < 0):
                raise ValueError("weights must be non-negative, one per component")
            w = w / w.sum()
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)
        object.__setattr__(self, "weights", w)

    @classmethod
    def from_states(cls, states, weights=None):
        states = list(states)
        if not states:
            raise ValueError("ensemble needs at least one component")
        return cls(
            np.stack([s.mean for s in states]), np.stack([s.cov for s in states]), weights
        )

    @property
    def n_modes(self):
        return self.means.shape[1] // 2

    def __len__(self):
        return len(self.means)

    def __getitem__(self, k):
        return GaussianState(self.means[k], self.covs[k])

    def subset(self, idx):
        return GaussianEnsemble(self.means[idx], self.covs[idx], self.weights[idx])

    def __repr__(self):
        return f"GaussianEnsemble(n_modes={self.n_modes}, components={len(self)})"


def quadrature_stats(state, coefficients):
    """Mean and variance of the linear combination ``c . r``.

    For an ensemble the law of total variance is applied.
    """
    c = np.asarray(coefficients, dtype=float).reshape(-1)
    if isinstance(state, GaussianEnsemble):
        if c.size != state.means.shape[1]:
            raise ValueError(f"need {state.means.shape[1]} coefficients, got {c.size}")
        mus = state.means @ c
        variances = np.einsum("i,kij,j->k", c, state.covs, c)
        mean = state.weights @ mus
        return float(mean), float(state.weights @ variances + state.weights @ (mus - mean) ** 2)
    if c.size != state.mean.size:
        raise ValueError(f"need {state.mean.size} coefficients, got {c.size}")
    return float(c @ state.mean), float(c @ state.cov @ c)
