"""Squeezed-light sources, entangled pairs and phase diffusion."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .gaussian import (
    VACUUM_VARIANCE,
    GaussianEnsemble,
    GaussianState,
    beamsplitter,
    phase_shift,
    rotation_matrix,
    tensor,
    vacuum_state,
)

BEAM_LABELS = ("A1", "B1", "A2", "B2", "A3", "B3")


@dataclass(frozen=True)
class SqueezerSpec:
    """Output of one OPA in dB relative to shot noise."""

    squeezing_db: float = 5.0
    antisqueezing_db: float = 9.0

    @property
    def variances(self):
        vx = VACUUM_VARIANCE * 10.0 ** (-self.squeezing_db / 10.0)
        vp = VACUUM_VARIANCE * 10.0 ** (self.antisqueezing_db / 10.0)
        return vx, vp

    def validate(self):
        vx, vp = self.variances
        # 1e-12 slack so that s = a (pure) is accepted despite rounding
        if vx * vp < VACUUM_VARIANCE**2 * (1.0 - 1e-12):
            raise ValueError(
                f"unphysical squeezer: {self.squeezing_db} dB squeezing with only "
                f"{self.antisqueezing_db} dB anti-squeezing"
            )
        return self


@dataclass(frozen=True)
class NoiseSpec:
    """Standard deviations (rad) of the Gaussian phase noise on each beam,
    ordered A1, B1, A2, B2, A3, B3."""

    sigma_per_beam: tuple = field(default=(0.0,) * 6)

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigma_per_beam)
        if len(sig) != 6:
            raise ValueError(f"need 6 phase-noise widths, got {len(sig)}")
        if any(s < 0 for s in sig):
            raise ValueError("phase-noise widths must be non-negative")
        if any(s >= np.pi for s in sig):
            warnings.warn("phase-noise width >= pi: phase wraps, state is nearly phase-randomised")
        object.__setattr__(self, "sigma_per_beam", sig)

    @classmethod
    def uniform(cls, sigma):
        return cls((float(sigma),) * 6)

    @property
    def sigmas(self):
        return np.array(self.sigma_per_beam)


def make_squeezed(spec):
    spec.validate()
    vx, vp = spec.variances
    return GaussianState(np.zeros(2), np.diag([vx, vp]))


def make_pair(squeezed, visibility=1.0):
    """Split a single squeezed mode on a balanced beam splitter.

    Mode B gets a pi phase shift so that the correlated combinations are
    ``x_A - x_B`` (squeezed) and ``p_A + p_B``. ``visibility < 1`` mixes
    vacuum into the squeezed beam first (loss ``1 - visibility**2``).
    """
    if squeezed.n_modes != 1:
        raise ValueError(f"make_pair needs a single-mode input, got {squeezed.n_modes} modes")
    if visibility < 1.0:
        squeezed = apply_loss(squeezed, 0, visibility**2)
    state = beamsplitter(tensor(squeezed, vacuum_state(1)), 0, 1, 0.5)
    return phase_shift(state, 1, np.pi)


def apply_loss(state, mode, efficiency):
    """Pure-loss channel on one mode: mix with vacuum at transmittance ``efficiency``."""
    idx = [2 * mode, 2 * mode + 1]
    mean = state.mean.copy()
    cov = state.cov.copy()
    g = np.sqrt(efficiency)
    mean[idx] *= g
    cov[idx, :] *= g
    cov[:, idx] *= g
    cov[np.ix_(idx, idx)] += (1.0 - efficiency) * VACUUM_VARIANCE * np.eye(2)
    return GaussianState(mean, cov)


def sample_phases(noise, rng):
    """Independent phases theta_k ~ N(0, sigma_k^2); consumes 6 normals."""
    return noise.sigmas * rng.standard_normal(6)


def decohere(pair, theta_a, theta_b):
    if pair.n_modes != 2:
        raise ValueError("decohere acts on a two-mode pair")
    return phase_shift(phase_shift(pair, 0, theta_a), 1, theta_b)


def rotate_pairs(pair, theta_a, theta_b):
    """Covariances of ``pair`` rotated by arrays of phases, shape (K, 4, 4)."""
    theta_a = np.asarray(theta_a, dtype=float)
    R = np.zeros(theta_a.shape + (4, 4))
    R[..., :2, :2] = rotation_matrix(theta_a)
    R[..., 2:, 2:] = rotation_matrix(theta_b)
    covs = R @ pair.cov @ np.swapaxes(R, -1, -2)
    means = np.einsum("...ij,j->...i", R, pair.mean)
    return means, covs


def decohered_ensemble(pair, sigma_a, sigma_b, n_samples, rng):
    """Monte Carlo sample of the phase-diffused pair as a Gaussian mixture."""
    th = rng.standard_normal((n_samples, 2)) * np.array([sigma_a, sigma_b])
    means, covs = rotate_pairs(pair, th[:, 0], th[:, 1])
    return GaussianEnsemble(means, covs)


def decohered_moments(pair, sigma_a, sigma_b):
    """Exact covariance of the phase-diffused zero-mean pair.

    With R(theta) = cos(theta) 1 + sin(theta) J and Gaussian theta:
    E[cos^2] = (1 + e^{-2 s^2}) / 2, E[cos] = e^{-s^2 / 2}, odd moments vanish.
    """
    if pair.n_modes != 2:
        raise ValueError("decohered_moments acts on a two-mode pair")
    if np.any(pair.mean != 0.0):
        raise ValueError("decohered_moments expects a zero-mean pair")
    J = np.array([[0.0, 1.0], [-1.0, 0.0]])
    sig = (sigma_a, sigma_b)
    cov = np.zeros((4, 4))
    for i in range(2):
        for j in range(2):
            blk = pair.cov[2 * i:2 * i + 2, 2 * j:2 * j + 2]
            if i == j:
                c2 = 0.5 * (1.0 + np.exp(-2.0 * sig[i] ** 2))
                cov[2 * i:2 * i + 2, 2 * j:2 * j + 2] = c2 * blk + (1.0 - c2) * J @ blk @ J.T
            else:
                damp = np.exp(-0.5 * (sig[i] ** 2 + sig[j] ** 2))
                cov[2 * i:2 * i + 2, 2 * j:2 * j + 2] = damp * blk
    return GaussianState(np.zeros(4), cov)
