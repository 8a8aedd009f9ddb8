"""Two-copy and iterative three-copy distillation by homodyne post-selection.

Every trial consumes exactly ten standard normals from its random stream, in
this order: the six beam phases (A1, B1, A2, B2, A3, B3), then the homodyne
outcomes at A and B of stage 1, then those of stage 2. Deviates that a trial
does not need are still drawn, which keeps :func:`run_trial` and the
vectorised :func:`simulate_trials` on identical streams.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .gaussian import GaussianEnsemble, GaussianState, beamsplitter, homodyne_sample, tensor
from .source import SqueezerSpec, apply_loss, decohere, make_pair, make_squeezed, rotate_pairs

SINGLE_STAGE = "single_stage"
ITERATIVE = "iterative"
MODES = (SINGLE_STAGE, ITERATIVE)

NORMALS_PER_TRIAL = 10
_CHUNK = 50_000


@dataclass(frozen=True)
class ProtocolConfig:
    """Trigger thresholds (quadrature units, vacuum variance 1/4) and optics.

    ``survivor_port`` chooses which stage-2 input port the stage-1 output
    enters: ``"transmitted"`` (weight sqrt(T2)) or ``"reflected"``.
    """

    threshold_stage1: float = math.inf
    threshold_stage2: float = None
    stage1_transmittance: float = 0.5
    stage2_transmittance: float = 2.0 / 3.0
    mode: str = ITERATIVE
    survivor_port: str = "transmitted"
    visibility: float = 1.0

    def __post_init__(self):
        if self.threshold_stage2 is None:
            object.__setattr__(self, "threshold_stage2", self.threshold_stage1)
        self.validate()

    def validate(self):
        if self.threshold_stage1 < 0 or self.threshold_stage2 < 0:
            raise ValueError("thresholds must be non-negative")
        for t in (self.stage1_transmittance, self.stage2_transmittance):
            if not 0.0 < t < 1.0:
                raise ValueError(f"transmittance must lie in (0, 1), got {t}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.survivor_port not in ("transmitted", "reflected"):
            raise ValueError(f"unknown survivor_port {self.survivor_port!r}")
        if not 0.0 < self.visibility <= 1.0:
            raise ValueError(f"visibility must lie in (0, 1], got {self.visibility}")
        return self

    @property
    def copies_per_attempt(self):
        return 2 if self.mode == SINGLE_STAGE else 3

    def with_threshold(self, q):
        return replace(self, threshold_stage1=q, threshold_stage2=q)


@dataclass
class TrialOutcome:
    accepted: bool
    stage1_diff: float
    stage2_diff: float = None
    output: GaussianState = None
    copies_consumed: int = 2


@dataclass
class Distillate:
    """Accepted output states of a batch plus the bookkeeping for yield."""

    components: GaussianEnsemble
    attempts: int
    accepts: int
    copies_per_attempt: int = 3
    trial_index: np.ndarray = field(default=None, repr=False)

    @property
    def acceptance_probability(self):
        return self.accepts / self.attempts if self.attempts else 0.0

    @property
    def copies_consumed(self):
        return self.attempts * self.copies_per_attempt

    @property
    def yield_(self):
        return self.accepts / self.copies_consumed if self.attempts else 0.0


def _as_sources(sources):
    if isinstance(sources, SqueezerSpec):
        return (sources,) * 3
    sources = tuple(sources)
    if len(sources) != 3:
        raise ValueError(f"need three squeezer specs, got {len(sources)}")
    return sources


def _ports(config):
    if config.survivor_port == "transmitted":
        return 0, 2
    return 2, 0


# ----------------------------------------------------------------------------
# scalar reference path


def distill_stage(state, transmittance, threshold, rng, visibility=1.0):
    """One distillation stage on modes (A_keep, B_keep, A_new, B_new).

    Both sites interfere their two beams and measure ``x`` of the second
    output port. Returns ``(accepted, diff, output)``; ``output`` is the
    conditioned state of the kept ports even when the trigger fails.
    """
    if state.n_modes != 4:
        raise ValueError(f"distill_stage needs 4 modes, got {state.n_modes}")
    if visibility < 1.0:
        for k in range(4):
            state = apply_loss(state, k, visibility**2)
    state = beamsplitter(state, 0, 2, transmittance)
    state = beamsplitter(state, 1, 3, transmittance)
    # after removing mode 2 (A), B's measured port moves to index 2
    x_a, state, _ = homodyne_sample(state, 2, 0.0, rng)
    x_b, state, _ = homodyne_sample(state, 2, 0.0, rng)
    diff = x_a - x_b
    return bool(abs(diff) <= threshold), diff, state


def _decohered_pair(pair, phases, k):
    return decohere(pair, phases[2 * k], phases[2 * k + 1])


def _stage_input(keep, new, survivor_port):
    if survivor_port == "transmitted":
        return tensor(keep, new)
    return tensor(new, keep)


def run_trial(config, sources, noise, rng):
    """Run one Monte Carlo trial of the configured protocol."""
    sources = _as_sources(sources)
    pairs = [make_pair(make_squeezed(s), config.visibility) for s in sources]
    phases = noise.sigmas * rng.standard_normal(6)
    first = tensor(_decohered_pair(pairs[0], phases, 0), _decohered_pair(pairs[1], phases, 1))
    ok1, d1, out = distill_stage(
        first, config.stage1_transmittance, config.threshold_stage1, rng, config.visibility
    )
    if config.mode == SINGLE_STAGE:
        rng.standard_normal(2)
        return TrialOutcome(ok1, d1, None, out if ok1 else None, 2)
    if not ok1:
        rng.standard_normal(2)
        return TrialOutcome(False, d1, None, None, 3)
    second = _stage_input(out, _decohered_pair(pairs[2], phases, 2), config.survivor_port)
    ok2, d2, out2 = distill_stage(
        second, config.stage2_transmittance, config.threshold_stage2, rng, config.visibility
    )
    return TrialOutcome(ok2, d1, d2, out2 if ok2 else None, 3)


# ----------------------------------------------------------------------------
# vectorised engine


@dataclass
class TrialRecord:
    """Per-trial trigger values and conditioned output states.

    Outputs are stored for every trial (the thresholds are applied later), so
    one record serves a whole threshold sweep with exactly coupled samples.
    ``diff2`` is NaN in single-stage mode.
    """

    mode: str
    diff1: np.ndarray
    diff2: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __len__(self):
        return len(self.diff1)

    @property
    def copies_per_attempt(self):
        return 2 if self.mode == SINGLE_STAGE else 3

    @property
    def trigger(self):
        """Smallest common threshold that accepts each trial."""
        if self.mode == SINGLE_STAGE:
            return np.abs(self.diff1)
        return np.maximum(np.abs(self.diff1), np.abs(self.diff2))

    def accepted(self, q1, q2=None):
        q2 = q1 if q2 is None else q2
        ok = np.abs(self.diff1) <= q1
        if self.mode == ITERATIVE:
            ok &= np.abs(self.diff2) <= q2
        return ok

    def distillate(self, q1, q2=None):
        ok = self.accepted(q1, q2)
        idx = np.flatnonzero(ok)
        return Distillate(
            GaussianEnsemble(self.means[idx], self.covs[idx]),
            attempts=len(self),
            accepts=int(idx.size),
            copies_per_attempt=self.copies_per_attempt,
            trial_index=idx,
        )

    @classmethod
    def concatenate(cls, records):
        records = list(records)
        return cls(
            records[0].mode,
            np.concatenate([r.diff1 for r in records]),
            np.concatenate([r.diff2 for r in records]),
            np.concatenate([r.means for r in records]),
            np.concatenate([r.covs for r in records]),
        )


def _stage_matrix(transmittance):
    t, r = math.sqrt(transmittance), math.sqrt(1.0 - transmittance)
    M = np.zeros((8, 8))
    I2 = np.eye(2)
    for i, j in ((0, 2), (1, 3)):
        si, sj = slice(2 * i, 2 * i + 2), slice(2 * j, 2 * j + 2)
        M[si, si] = t * I2
        M[si, sj] = r * I2
        M[sj, si] = r * I2
        M[sj, sj] = -t * I2
    return M


_MEASURED = [4, 6]  # x quadratures of modes 2 (A) and 3 (B)
_KEPT = [0, 1, 2, 3]


def _loss_batch(means, covs, efficiency):
    g = math.sqrt(efficiency)
    covs = covs * efficiency + (1.0 - efficiency) * 0.25 * np.eye(covs.shape[-1])
    return means * g, covs


def _stage_batch(means, covs, transmittance, z, visibility=1.0):
    if visibility < 1.0:
        means, covs = _loss_batch(means, covs, visibility**2)
    M = _stage_matrix(transmittance)
    covs = M @ covs @ M.T
    means = means @ M.T
    cmm = covs[:, _MEASURED][:, :, _MEASURED]
    ckm = covs[:, _KEPT][:, :, _MEASURED]
    mm = means[:, _MEASURED]
    # sequential conditioning at A then B == Cholesky of the joint marginal
    l11 = np.sqrt(cmm[:, 0, 0])
    l21 = cmm[:, 1, 0] / l11
    l22 = np.sqrt(cmm[:, 1, 1] - l21 * l21)
    xa = mm[:, 0] + l11 * z[:, 0]
    xb = mm[:, 1] + l21 * z[:, 0] + l22 * z[:, 1]
    resid = np.stack([xa, xb], axis=1) - mm
    gain = ckm @ np.linalg.inv(cmm)
    out_means = means[:, _KEPT] + np.einsum("nij,nj->ni", gain, resid)
    out_covs = covs[:, _KEPT][:, :, _KEPT] - gain @ np.swapaxes(ckm, 1, 2)
    out_covs = 0.5 * (out_covs + np.swapaxes(out_covs, 1, 2))
    return xa - xb, out_means, out_covs


def _block(a_means, a_covs, b_means, b_covs):
    n = len(a_means)
    covs = np.zeros((n, 8, 8))
    covs[:, :4, :4] = a_covs
    covs[:, 4:, 4:] = b_covs
    return np.concatenate([a_means, b_means], axis=1), covs


def simulate_normals(config, sources, z):
    """Deterministic core: run trials for given standard normals ``z`` (n, 10)."""
    sources = _as_sources(sources)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    pairs = [make_pair(make_squeezed(s), config.visibility) for s in sources]
    return _simulate(config, pairs, z[:, :6], z)


def _simulate(config, pairs, phases, z):
    m1, c1 = rotate_pairs(pairs[0], phases[:, 0], phases[:, 1])
    m2, c2 = rotate_pairs(pairs[1], phases[:, 2], phases[:, 3])
    means, covs = _block(m1, c1, m2, c2)
    d1, means, covs = _stage_batch(
        means, covs, config.stage1_transmittance, z[:, 6:8], config.visibility
    )
    if config.mode == SINGLE_STAGE:
        return TrialRecord(SINGLE_STAGE, d1, np.full_like(d1, np.nan), means, covs)
    m3, c3 = rotate_pairs(pairs[2], phases[:, 4], phases[:, 5])
    if config.survivor_port == "transmitted":
        means, covs = _block(means, covs, m3, c3)
    else:
        means, covs = _block(m3, c3, means, covs)
    d2, means, covs = _stage_batch(
        means, covs, config.stage2_transmittance, z[:, 8:10], config.visibility
    )
    return TrialRecord(ITERATIVE, d1, d2, means, covs)


def _worker(args):
    config, sources, noise, n_trials, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    pairs = [make_pair(make_squeezed(s), config.visibility) for s in _as_sources(sources)]
    parts = []
    for start in range(0, n_trials, _CHUNK):
        z = rng.standard_normal((min(_CHUNK, n_trials - start), NORMALS_PER_TRIAL))
        parts.append(_simulate(config, pairs, z[:, :6] * noise.sigmas, z))
    if not parts:
        return _simulate(config, pairs, np.zeros((0, 6)), np.zeros((0, NORMALS_PER_TRIAL)))
    return TrialRecord.concatenate(parts)


def worker_streams(seed, workers):
    """Independent seed sequences, one per worker, derived from ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        return seed.spawn(workers)
    return np.random.SeedSequence(seed).spawn(workers)


def split_trials(n_trials, workers):
    base, extra = divmod(n_trials, workers)
    return [base + (w < extra) for w in range(workers)]


def simulate_trials(config, sources, noise, n_trials, seed=None, workers=1, rng=None):
    """Simulate ``n_trials`` trials and keep every outcome.

    With ``rng`` the trials run in-process on that stream (same draws as
    repeated :func:`run_trial`). Otherwise worker ``w`` of ``workers`` owns
    a substream spawned from ``seed`` and a contiguous share of the trials;
    the merged record depends only on ``(seed, n_trials, workers)``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if rng is not None:
        return _worker((config, sources, noise, n_trials, rng))
    jobs = [
        (config, sources, noise, n, ss)
        for n, ss in zip(split_trials(n_trials, workers), worker_streams(seed, workers))
    ]
    if workers == 1:
        return _worker(jobs[0])
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return TrialRecord.concatenate(pool.map(_worker, jobs))


def run_batch(config, sources, noise, n_trials, rng=None, seed=None, workers=1):
    """Repeat trials and collect the accepted outputs into a :class:`Distillate`."""
    record = simulate_trials(config, sources, noise, n_trials, seed=seed, workers=workers, rng=rng)
    return record.distillate(config.threshold_stage1, config.threshold_stage2)
