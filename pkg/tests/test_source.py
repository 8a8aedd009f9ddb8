import numpy as np
import pytest
from numpy.testing import assert_allclose

from cvdistill.gaussian import GaussianEnsemble, keep_modes, vacuum_state
from cvdistill.measures import gaussian_log_negativity, total_variance
from cvdistill.source import (
    NoiseSpec,
    SqueezerSpec,
    apply_loss,
    decohere,
    decohered_ensemble,
    decohered_moments,
    make_pair,
    make_squeezed,
    rotate_pairs,
    sample_phases,
)
from cvdistill.tomography import fock_rho

PAIR = make_pair(make_squeezed(SqueezerSpec()))


def test_squeezer_zero_db_is_vacuum():
    assert make_squeezed(SqueezerSpec(0, 0)).allclose(vacuum_state(1))


def test_squeezer_quoted_values():
    s = make_squeezed(SqueezerSpec(5, 9))
    assert_allclose(np.diag(s.cov), [0.25 * 10**-0.5, 0.25 * 10**0.9], rtol=1e-14)
    assert_allclose(np.diag(s.cov), [0.07906, 1.98610], rtol=2e-4)


def test_squeezer_pure_boundary():
    vx, vp = SqueezerSpec(3, 3).variances
    assert_allclose(vx * vp, 1 / 16, rtol=1e-14)


def test_squeezer_unphysical():
    with pytest.raises(ValueError):
        make_squeezed(SqueezerSpec(6, 3))


def test_pair_from_vacuum():
    pair = make_pair(vacuum_state(1))
    assert pair.allclose(vacuum_state(2))
    assert total_variance(pair) == pytest.approx(1.0, abs=1e-15)


def test_pair_total_variance():
    vx = SqueezerSpec().variances[0]
    assert_allclose(total_variance(PAIR), 2 * vx + 0.5)
    assert_allclose(total_variance(PAIR), 0.6581, atol=1e-4)


@pytest.mark.parametrize("r", [0.01, 0.1, 0.5, 1.0, 2.0])
def test_pure_pair_entangled(r):
    db = 10 * np.log10(np.exp(2 * r))
    pair = make_pair(make_squeezed(SqueezerSpec(db, db)))
    assert gaussian_log_negativity(pair.cov) > 0


def test_pair_rejects_two_modes():
    with pytest.raises(ValueError):
        make_pair(vacuum_state(2))


def test_pair_swap_symmetry():
    assert_allclose(keep_modes(PAIR, [1, 0]).cov, PAIR.cov, atol=1e-12)


def test_phases_zero_noise():
    assert np.all(sample_phases(NoiseSpec(), np.random.default_rng(0)) == 0)


def test_phase_statistics():
    rng = np.random.default_rng(1)
    th = np.array([sample_phases(NoiseSpec.uniform(0.3), rng) for _ in range(100_000 // 6 + 1)])
    th = th.reshape(-1)[:100_000]
    assert abs(th.mean()) < 3 * 0.3 / np.sqrt(th.size)
    assert abs(th.var() / 0.09 - 1) < 0.05


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec((0.1,) * 5)
    with pytest.raises(ValueError):
        NoiseSpec((-0.1,) + (0.1,) * 5)
    with pytest.warns(UserWarning):
        NoiseSpec.uniform(np.pi)


def test_decohere_identity():
    assert decohere(PAIR, 0.0, 0.0).allclose(PAIR)


def test_decohere_preserves_determinant():
    out = decohere(PAIR, 0.3, -1.1)
    assert_allclose(np.linalg.det(out.cov), np.linalg.det(PAIR.cov), rtol=1e-12)


def test_decoherence_raises_total_variance():
    ens = decohered_ensemble(PAIR, 0.2, 0.2, 20_000, np.random.default_rng(2))
    assert total_variance(ens) > total_variance(PAIR)


def test_total_variance_monotone_in_sigma():
    z = np.random.default_rng(3).standard_normal((50_000, 2))
    vals = []
    for s in np.arange(0, 0.51, 0.1):
        m, c = rotate_pairs(PAIR, s * z[:, 0], s * z[:, 1])
        vals.append(total_variance(GaussianEnsemble(m, c)))
    assert np.all(np.diff(vals) >= 0)


def test_zero_noise_ensemble_is_clean_pair():
    ens = decohered_ensemble(PAIR, 0.0, 0.0, 10, np.random.default_rng(0))
    assert_allclose(ens.covs, np.broadcast_to(PAIR.cov, ens.covs.shape))
    assert_allclose(total_variance(ens), total_variance(PAIR))


def test_decohered_moments_match_monte_carlo():
    ens = decohered_ensemble(PAIR, 0.44, 0.44, 100_000, np.random.default_rng(4))
    exact = decohered_moments(PAIR, 0.44, 0.44)
    mc = ens.covs.mean(0)
    assert_allclose(mc, exact.cov, atol=0.01)
    assert abs(total_variance(ens) / total_variance(exact) - 1) < 0.005


def test_phase_damping_matches_monte_carlo():
    sig = 0.6
    ens = decohered_ensemble(PAIR, sig, sig, 40_000, np.random.default_rng(5))
    mc = fock_rho(ens).elements
    exact = fock_rho(GaussianEnsemble.from_states([PAIR]), phase_sigma=(sig, sig)).elements
    assert np.abs(mc - exact).max() < 5e-3


def test_uniform_phase_limit_kills_coherences():
    rho = fock_rho(GaussianEnsemble.from_states([PAIR]), phase_sigma=(6.0, 6.0)).elements
    d = np.arange(5)
    n, k, l, m = np.meshgrid(d, d, d, d, indexing="ij")
    assert np.abs(rho[n + k != l + m]).max() < 1e-6
    ens = decohered_ensemble(PAIR, np.pi, np.pi, 40_000, np.random.default_rng(6))
    mc = fock_rho(ens).elements
    # MC residual of the pi-wide phase average: damping e^{-pi^2/2} plus 1/sqrt(N)
    assert np.abs(mc[n + k != l + m]).max() < 0.02


def test_visibility_loss_mixes_vacuum():
    lossy = make_pair(make_squeezed(SqueezerSpec()), visibility=0.98)
    assert total_variance(lossy) > total_variance(PAIR)
    assert apply_loss(PAIR, 0, 1.0).allclose(PAIR)
