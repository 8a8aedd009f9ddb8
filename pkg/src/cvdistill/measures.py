"""Figures of merit: logarithmic negativity, purity and total variance."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .gaussian import GaussianEnsemble, is_physical, quadrature_stats

#: Coefficient vectors of x_A - x_B and p_A + p_B.
X_MINUS = np.array([1.0, 0.0, -1.0, 0.0])
P_PLUS = np.array([0.0, 1.0, 0.0, 1.0])

_HERMITIAN_TOL = 1e-8


def _pt_eigenvalues(rho):
    if rho.hermiticity_error() > _HERMITIAN_TOL * max(1.0, np.abs(rho.elements).max()):
        raise ValueError("density matrix is not Hermitian")
    pt = rho.partial_transpose().matrix()
    return np.linalg.eigvalsh(0.5 * (pt + pt.conj().T))


def trace_norm_pt(rho):
    return float(np.abs(_pt_eigenvalues(rho)).sum())


def log_negativity(rho, normalize=False):
    """log2 of the trace norm of the partial transpose on mode B.

    The raw value is returned: it is not clamped at zero and, unless
    ``normalize`` is set, not corrected for ``Tr rho != 1``.
    """
    norm = trace_norm_pt(rho)
    if normalize:
        norm /= rho.trace
    return math.log2(norm)


def log_negativity_clamped(rho, normalize=False):
    return max(0.0, log_negativity(rho, normalize))


def purity(rho):
    return float(np.sum(np.abs(rho.elements) ** 2))


def _moment_source(obj):
    if hasattr(obj, "components") and not isinstance(obj, GaussianEnsemble):
        obj = obj.components
    n_modes = obj.n_modes
    if n_modes != 2:
        raise ValueError(f"total variance needs a two-mode state, got {n_modes} modes")
    return obj


def total_variance(state):
    """Var(x_A - x_B) + Var(p_A + p_B) from first and second moments."""
    state = _moment_source(state)
    return quadrature_stats(state, X_MINUS)[1] + quadrature_stats(state, P_PLUS)[1]


def total_variance_from_rho(rho, normalize=True):
    """Diagnostic: total variance from a truncated density matrix.

    Quadrature operators are built in the truncated space. With
    ``normalize`` the moments are divided by ``Tr rho``.
    """
    d = rho.dim
    a = np.diag(np.sqrt(np.arange(1, d)), 1)
    x = 0.5 * (a + a.T)
    p = -0.5j * (a - a.T)
    eye = np.eye(d)
    o1 = np.kron(x, eye) - np.kron(eye, x)
    o2 = np.kron(p, eye) + np.kron(eye, p)
    m = rho.matrix()
    tr = rho.trace if normalize else 1.0
    total = 0.0
    for o in (o1, o2):
        mean = np.trace(m @ o).real / tr
        total += np.trace(m @ o @ o).real / tr - mean**2
    return float(total)


def gaussian_log_negativity(cov):
    """E_n = max(0, -log2(4 nu_minus)) of a two-mode Gaussian state.

    ``nu_minus`` is the smaller symplectic eigenvalue of the partially
    transposed covariance (package units, vacuum 1/4).
    """
    cov = np.asarray(getattr(cov, "cov", cov), dtype=float)
    if cov.shape != (4, 4):
        raise ValueError("gaussian_log_negativity needs a 4x4 covariance")
    if not is_physical(cov):
        raise ValueError("covariance violates the uncertainty relation")
    return max(0.0, -math.log2(4.0 * pt_symplectic_min(cov)))


def pt_symplectic_min(cov):
    a, b, c = cov[:2, :2], cov[2:, 2:], cov[:2, 2:]
    delta = np.linalg.det(a) + np.linalg.det(b) - 2.0 * np.linalg.det(c)
    det = np.linalg.det(cov)
    disc = max(delta * delta - 4.0 * det, 0.0)
    return math.sqrt(max(0.5 * (delta - math.sqrt(disc)), 0.0))


# ----------------------------------------------------------------------------
# error bars


def bootstrap(blocks, statistic, n_resamples=50, rng=None, weights=None):
    """Block bootstrap: resample block estimates with replacement.

    ``blocks`` has shape (B, ...); each resample averages B drawn blocks
    (weighted by ``weights`` if given) and applies ``statistic``.
    Returns the standard deviation over resamples.
    """
    rng = np.random.default_rng(rng)
    blocks = np.asarray(blocks)
    nb = len(blocks)
    if nb < 2:
        return float("nan")
    w = np.ones(nb) if weights is None else np.asarray(weights, dtype=float)
    vals = []
    for _ in range(n_resamples):
        pick = rng.integers(nb, size=nb)
        ww = w[pick]
        avg = np.tensordot(ww / ww.sum(), blocks[pick], axes=1)
        vals.append(statistic(avg))
    return float(np.std(vals, ddof=1))


def _fock_stat(fn):
    from .tomography import FockDM

    return lambda el: fn(FockDM(el).hermitian())


def total_variance_blocks(ens, labels, n_blocks):
    """Per-block first and second moments of the two correlated combinations.

    Returns an array (B, 4): [E var_-, E mu_-, E mu_-^2, ...] per block,
    averaged within the block, and the block weights.
    """
    stats = []
    for c in (X_MINUS, P_PLUS):
        mu = ens.means @ c
        var = np.einsum("i,kij,j->k", c, ens.covs, c)
        stats.extend([var, mu, mu * mu])
    stats = np.stack(stats, axis=1)
    counts = np.bincount(labels, minlength=n_blocks).astype(float)
    sums = np.zeros((n_blocks, stats.shape[1]))
    np.add.at(sums, labels, stats)
    keep = counts > 0
    return sums[keep] / counts[keep, None], counts[keep] / counts.sum()


def _tv_from_stats(s):
    return float(s[0] + s[2] - s[1] ** 2 + s[3] + s[5] - s[4] ** 2)


def block_labels(trial_index, n_trials, n_blocks):
    """Contiguous trial blocks: label of each trial index."""
    return np.minimum((np.asarray(trial_index) * n_blocks) // max(n_trials, 1), n_blocks - 1)


@dataclass
class MeasureReport:
    log_negativity: float
    purity: float
    total_variance: float
    log_negativity_err: float = float("nan")
    purity_err: float = float("nan")
    total_variance_err: float = float("nan")
    trace: float = float("nan")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def empty(cls):
        nan = float("nan")
        return cls(nan, nan, nan)


def measure_report(rho, ensemble=None, tv_blocks=None, n_resamples=50, rng=None):
    """Collect E_n, purity and total variance with bootstrap errors.

    ``rho`` may carry ``blocks`` (and ``block_weights``) for the Fock-based
    errors; ``tv_blocks`` is the output of :func:`total_variance_blocks`.
    """
    rng = np.random.default_rng(rng)
    en = log_negativity(rho)
    pu = purity(rho)
    tv = total_variance(ensemble) if ensemble is not None else total_variance_from_rho(rho)
    report = MeasureReport(en, pu, tv, trace=rho.trace)
    if rho.blocks is not None and len(rho.blocks) > 1:
        w = getattr(rho, "block_weights", None)
        report.log_negativity_err = bootstrap(rho.blocks, _fock_stat(log_negativity), n_resamples, rng, w)
        report.purity_err = bootstrap(rho.blocks, _fock_stat(purity), n_resamples, rng, w)
    if tv_blocks is not None:
        stats, w = tv_blocks
        report.total_variance_err = bootstrap(stats, _tv_from_stats, n_resamples, rng, w)
    return report
