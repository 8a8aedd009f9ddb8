import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cvdistill.gaussian import GaussianEnsemble, beamsplitter, keep_modes, tensor
from cvdistill.measures import gaussian_log_negativity, log_negativity
from cvdistill.protocol import (
    ITERATIVE,
    NORMALS_PER_TRIAL,
    SINGLE_STAGE,
    Distillate,
    ProtocolConfig,
    distill_stage,
    run_batch,
    run_trial,
    simulate_normals,
    simulate_trials,
)
from cvdistill.source import NoiseSpec, SqueezerSpec, decohered_moments, make_pair, make_squeezed
from cvdistill.tomography import fock_rho

SRC = SqueezerSpec()
PAIR = make_pair(make_squeezed(SRC))
FOUR = tensor(PAIR, PAIR)


def test_stage_open_threshold_always_accepts(rng):
    assert all(distill_stage(FOUR, 0.5, math.inf, rng)[0] for _ in range(50))


def test_stage_zero_threshold_never_accepts(rng):
    assert not any(distill_stage(FOUR, 0.5, 0.0, rng)[0] for _ in range(200))


def test_stage_output_has_two_modes(rng):
    ok, diff, out = distill_stage(FOUR, 0.5, 0.1, rng)
    assert out.n_modes == 2


def test_stage_diff_variance_matches_propagation(rng):
    s = beamsplitter(beamsplitter(FOUR, 0, 2, 0.5), 1, 3, 0.5)
    c = np.zeros(8)
    c[4], c[6] = 1.0, -1.0
    var = c @ s.cov @ c
    diffs = np.array([distill_stage(FOUR, 0.5, math.inf, rng)[1] for _ in range(20_000)])
    z = np.random.default_rng(1).standard_normal((100_000, NORMALS_PER_TRIAL))
    z[:, :6] = 0.0  # phases enter simulate_normals unscaled
    batch = simulate_normals(ProtocolConfig(mode=SINGLE_STAGE), SRC, z).diff1
    assert abs(diffs.mean()) < 3 * math.sqrt(var / diffs.size)
    for d in (diffs, batch):
        n = d.size
        assert abs(d.var() / var - 1) < 3 * math.sqrt(2 / n)


def test_stage_rejects_wrong_mode_count(rng):
    with pytest.raises(ValueError):
        distill_stage(PAIR, 0.5, 1.0, rng)


def test_open_threshold_clean_input_cannot_distill(rng):
    cfg = ProtocolConfig(mode=ITERATIVE)
    en_in = gaussian_log_negativity(PAIR.cov)
    for _ in range(20):
        out = run_trial(cfg, SRC, NoiseSpec(), rng)
        assert out.accepted and out.copies_consumed == 3
        assert gaussian_log_negativity(out.output.cov) <= en_in + 1e-12


def test_open_threshold_degrades_noisy_input():
    noise = NoiseSpec.uniform(0.44)
    cfg = ProtocolConfig(mode=SINGLE_STAGE)
    dist = run_batch(cfg, SRC, noise, 20_000, seed=3)
    en_out = log_negativity(fock_rho(dist.components))
    en_in = log_negativity(fock_rho(GaussianEnsemble.from_states([PAIR]), phase_sigma=(0.44, 0.44)))
    assert en_out < en_in


def test_iterative_acceptance_factorises():
    rec = simulate_trials(ProtocolConfig(mode=ITERATIVE), SRC, NoiseSpec.uniform(0.3), 20_000, seed=4)
    q = 0.3
    ok1 = np.abs(rec.diff1) <= q
    ok2 = np.abs(rec.diff2) <= q
    p = rec.accepted(q).mean()
    p1 = ok1.mean()
    p21 = ok2[ok1].mean()
    n = len(rec)
    assert abs(p - p1 * p21) <= 3 * math.sqrt(p * (1 - p) / n)


def test_batch_open_threshold_accepts_everything():
    dist = run_batch(ProtocolConfig(), SRC, NoiseSpec.uniform(0.2), 1000, seed=1)
    assert dist.accepts == dist.attempts == 1000
    assert len(dist.components) == 1000


def test_yields_at_open_threshold():
    single = run_batch(ProtocolConfig(mode=SINGLE_STAGE), SRC, NoiseSpec(), 200, seed=0)
    it = run_batch(ProtocolConfig(mode=ITERATIVE), SRC, NoiseSpec(), 200, seed=0)
    assert single.yield_ == 0.5
    assert it.yield_ == pytest.approx(1 / 3)


def test_copy_bookkeeping():
    d = Distillate(GaussianEnsemble.from_states([PAIR] * 300), 1000, 300, 3)
    assert d.copies_consumed == 3000
    assert d.yield_ == pytest.approx(0.10)
    d2 = Distillate(GaussianEnsemble.from_states([PAIR] * 300), 1500, 300, 2)
    assert d2.copies_consumed == 3000 and d2.yield_ == pytest.approx(0.10)


@pytest.mark.parametrize("mode", [SINGLE_STAGE, ITERATIVE])
@pytest.mark.parametrize("port", ["transmitted", "reflected"])
def test_scalar_and_batch_paths_agree(mode, port):
    cfg = ProtocolConfig(threshold_stage1=0.4, mode=mode, survivor_port=port)
    noise = NoiseSpec((0.1, 0.2, 0.3, 0.4, 0.5, 0.6))
    rng = np.random.default_rng(11)
    outs = [run_trial(cfg, SRC, noise, rng) for _ in range(300)]
    rec = simulate_trials(cfg, SRC, noise, 300, rng=np.random.default_rng(11))
    ok = rec.accepted(0.4)
    assert [o.accepted for o in outs] == list(ok)
    assert_allclose([o.stage1_diff for o in outs], rec.diff1, atol=1e-12)
    for o, m, c in zip(np.array(outs)[ok], rec.means[ok], rec.covs[ok]):
        assert_allclose(o.output.mean, m, atol=1e-10)
        assert_allclose(o.output.cov, c, atol=1e-10)
        if mode == ITERATIVE:
            assert o.stage2_diff is not None
    # both paths consume exactly the same number of deviates
    assert rng.standard_normal() == np.random.default_rng(11).standard_normal(
        300 * NORMALS_PER_TRIAL + 1)[-1]


def test_scalar_and_batch_agree_with_visibility():
    cfg = ProtocolConfig(visibility=0.97, mode=ITERATIVE)
    rng = np.random.default_rng(2)
    outs = [run_trial(cfg, SRC, NoiseSpec.uniform(0.3), rng) for _ in range(50)]
    rec = simulate_trials(cfg, SRC, NoiseSpec.uniform(0.3), 50, rng=np.random.default_rng(2))
    assert_allclose([o.stage2_diff for o in outs], rec.diff2, atol=1e-12)
    assert_allclose(outs[-1].output.cov, rec.covs[-1], atol=1e-10)


def test_worker_partition_deterministic():
    cfg = ProtocolConfig(mode=ITERATIVE)
    a = simulate_trials(cfg, SRC, NoiseSpec.uniform(0.4), 1001, seed=9, workers=3)
    b = simulate_trials(cfg, SRC, NoiseSpec.uniform(0.4), 1001, seed=9, workers=3)
    assert len(a) == 1001
    assert np.array_equal(a.diff1, b.diff1) and np.array_equal(a.covs, b.covs)
    c = simulate_trials(cfg, SRC, NoiseSpec.uniform(0.4), 1001, seed=9, workers=1)
    assert not np.array_equal(a.diff1, c.diff1)


def test_acceptance_monotone_in_threshold():
    rec = simulate_trials(ProtocolConfig(), SRC, NoiseSpec.uniform(0.4), 5000, seed=5)
    qs = [0.0, 0.05, 0.1, 0.2, 0.5, 1.0, math.inf]
    acc = [rec.accepted(q) for q in qs]
    for lo, hi in zip(acc, acc[1:]):
        assert np.all(hi[lo])
        assert lo.sum() <= hi.sum()


def test_open_threshold_output_matches_unconditioned_moments():
    sig = 0.4
    cfg = ProtocolConfig(mode=SINGLE_STAGE)
    dist = run_batch(cfg, SRC, NoiseSpec.uniform(sig), 100_000, seed=6)
    ens = dist.components
    total = np.einsum("k,kij->ij", ens.weights, ens.covs) + np.cov(ens.means.T, aweights=ens.weights)
    dec = decohered_moments(PAIR, sig, sig)
    four = tensor(dec, dec)
    out = keep_modes(beamsplitter(beamsplitter(four, 0, 2, 0.5), 1, 3, 0.5), [0, 1])
    se = np.sqrt((np.outer(np.diag(out.cov), np.diag(out.cov)) + out.cov**2) / len(ens))
    assert np.all(np.abs(total - out.cov) < 4 * se + 1e-3)


def test_config_validation():
    with pytest.raises(ValueError):
        ProtocolConfig(threshold_stage1=-1)
    with pytest.raises(ValueError):
        ProtocolConfig(stage2_transmittance=1.0)
    with pytest.raises(ValueError):
        ProtocolConfig(mode="triple")
    with pytest.raises(ValueError):
        ProtocolConfig(survivor_port="side")
    assert ProtocolConfig(threshold_stage1=0.3).threshold_stage2 == 0.3
    assert ProtocolConfig(mode=SINGLE_STAGE).copies_per_attempt == 2
