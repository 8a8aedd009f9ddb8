"""Experiment orchestration: threshold sweeps, calibration, equal-yield runs.

All randomness derives from ``config.seed``. Both protocol modes are driven
by the same seed, so their phase draws coincide (common random numbers),
and every threshold of a sweep reuses one set of trials.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .exceptions import ConfigError, NumericalFailure, UnreachableYieldError
from .gaussian import GaussianEnsemble, GaussianState
from .measures import (
    MeasureReport,
    block_labels,
    gaussian_log_negativity,
    log_negativity,
    measure_report,
    purity,
    total_variance,
    total_variance_blocks,
)
from .protocol import ITERATIVE, SINGLE_STAGE, simulate_trials
from .source import decohered_ensemble, decohered_moments, make_pair, make_squeezed
from .tomography import block_fock_rho, fock_rho, sampled_rho

SWEEP_COLUMNS = (
    "mode",
    "Q",
    "yield",
    "acceptance_probability",
    "accepts",
    "attempts",
    "copies_consumed",
    "E_n",
    "E_n_err",
    "purity",
    "purity_err",
    "I",
    "I_err",
    "trace",
)

_TOMO_STREAM = 1  # entropy tag separating tomography draws from trial draws


# ----------------------------------------------------------------------------
# streams and simulation


def tomography_rng(config, mode, q_index):
    mode_id = 0 if mode == SINGLE_STAGE else 1
    return np.random.default_rng(
        np.random.SeedSequence([config.seed, _TOMO_STREAM, mode_id, q_index])
    )


def simulate_mode(config, mode, n_trials=None):
    """All trials of one protocol mode (thresholds applied later)."""
    return simulate_trials(
        config.protocol_for(mode),
        config.sources,
        config.noise,
        n_trials or config.trials_per_point,
        seed=config.seed,
        workers=config.workers,
    )


def input_pair(config, index=0):
    return make_pair(make_squeezed(config.sources[index]), config.protocol.visibility)


# ----------------------------------------------------------------------------
# measures of one distillate


def _capped(dist, max_components):
    """Evenly strided subset of at most ``max_components`` accepted states."""
    ens, idx = dist.components, dist.trial_index
    if len(ens) <= max_components:
        return ens, idx
    pick = np.linspace(0, len(ens) - 1, max_components).round().astype(int)
    return ens.subset(pick), idx[pick]


def tomograph(dist, config, rng=None):
    """Density matrix of the accepted outputs with block structure attached."""
    settings = config.tomography
    n_blocks = config.bootstrap_blocks
    ens, idx = _capped(dist, settings.max_components)
    if settings.method == "exact":
        rho = block_fock_rho(ens, idx, n_blocks, settings.dim)
    else:
        rho = sampled_rho(ens, settings.plan, rng, settings.dim, n_blocks)
    if not np.all(np.isfinite(rho.elements)):
        raise NumericalFailure("tomography produced non-finite elements", {"accepts": dist.accepts})
    return rho


def measure_distillate(dist, config, rng=None):
    """MeasureReport (with bootstrap errors) and density matrix of a distillate."""
    if dist.accepts == 0:
        return MeasureReport.empty(), None
    rng = np.random.default_rng(rng)
    rho = tomograph(dist, config, rng)
    labels = block_labels(dist.trial_index, dist.attempts, config.bootstrap_blocks)
    tv_blocks = total_variance_blocks(dist.components, labels, config.bootstrap_blocks)
    report = measure_report(rho, dist.components, tv_blocks, config.bootstrap_resamples, rng)
    return report, rho


def input_reference(config):
    """Exact measures of one decohered input pair and of the clean pair."""
    pair = input_pair(config)
    sig = config.noise.sigmas
    dim = config.tomography.dim
    rho = fock_rho(GaussianEnsemble.from_states([pair]), dim, phase_sigma=(sig[0], sig[1]))
    return {
        "E_n": log_negativity(rho),
        "purity": purity(rho),
        "I": total_variance(decohered_moments(pair, sig[0], sig[1])),
        "trace": rho.trace,
        "clean_E_n_gaussian": gaussian_log_negativity(pair.cov),
        "clean_I": total_variance(pair),
    }


# ----------------------------------------------------------------------------
# sweeps


@dataclass
class SweepRow:
    mode: str
    q: float
    yield_: float
    acceptance_probability: float
    accepts: int
    attempts: int
    copies_consumed: int
    measures: MeasureReport

    def as_csv(self):
        m = self.measures
        vals = [
            self.mode,
            _fmt(self.q),
            _fmt(self.yield_),
            _fmt(self.acceptance_probability),
            str(self.accepts),
            str(self.attempts),
            str(self.copies_consumed),
        ]
        for v in (m.log_negativity, m.log_negativity_err, m.purity, m.purity_err,
                  m.total_variance, m.total_variance_err, m.trace):
            vals.append(_fmt(v))
        return vals

    def to_dict(self):
        d = dict(zip(SWEEP_COLUMNS, self.as_csv()))
        for k, v in d.items():
            if k != "mode":
                d[k] = None if v == "" else json.loads(v) if v != "inf" else "inf"
        return d


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(float(v))


@dataclass
class SweepResult:
    rows: list
    metadata: dict
    input: dict = field(default_factory=dict)
    break_even: dict = field(default_factory=dict)
    rhos: dict = field(default_factory=dict, repr=False)

    def by_mode(self, mode):
        return [r for r in self.rows if r.mode == mode]

    def column(self, mode, name):
        """Numeric column for one mode, NaN where measures are null."""
        out = []
        for r in self.by_mode(mode):
            v = r.to_dict()[name]
            out.append(math.inf if v == "inf" else math.nan if v is None else float(v))
        return np.array(out)

    def to_csv(self):
        buf = io.StringIO()
        for k, v in self.metadata.items():
            buf.write(f"# {k}: {v}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in self.rows:
            w.writerow(r.as_csv())
        return buf.getvalue()

    def report(self):
        return {
            "metadata": self.metadata,
            "input": self.input,
            "break_even_acceptance": self.break_even,
            "rows": [r.to_dict() for r in self.rows],
        }


def metadata(config, kind):
    return {
        "artifact": f"cvdistill {kind}",
        "version": __version__,
        "config_hash": config.config_hash(),
        "seed": config.seed,
        "workers": config.workers,
        "trials_per_point": config.trials_per_point,
        "tomography": config.tomography.method,
        "units": "Q and quadratures in units with vacuum variance 1/4",
    }


def sweep_mode(config, mode, record=None):
    """Rows (and density matrices) of one mode over ``config.thresholds``."""
    record = record if record is not None else simulate_mode(config, mode)
    rows, rhos = [], {}
    for qi, q in enumerate(config.thresholds):
        dist = record.distillate(q)
        if dist.accepts == 0:
            warnings.warn(f"{mode}: no accepted trials at Q={q:g}; measures left empty")
        report, rho = measure_distillate(dist, config, tomography_rng(config, mode, qi))
        rows.append(SweepRow(mode, q, dist.yield_, dist.acceptance_probability, dist.accepts,
                             dist.attempts, dist.copies_consumed, report))
        if rho is not None:
            rhos[q] = rho
    return rows, rhos


def run_sweep(config, break_even=True):
    """Threshold sweep for every configured mode.

    Returns a :class:`SweepResult`; with ``break_even`` the acceptance
    probability at which the distillate E_n equals the input E_n is
    estimated per mode (NaN if there is no crossing).
    """
    result = SweepResult([], metadata(config, "sweep"), input_reference(config))
    for mode in config.modes:
        record = simulate_mode(config, mode)
        rows, rhos = sweep_mode(config, mode, record)
        result.rows.extend(rows)
        result.rhos[mode] = rhos
        if break_even:
            result.break_even[mode] = break_even_acceptance(
                config, mode, record, result.input["E_n"]
            )
    return result


# ----------------------------------------------------------------------------
# break-even


def _en_at_acceptance(record, p, config):
    trig = np.sort(record.trigger)
    k = max(1, int(round(p * len(trig))))
    dist = record.distillate(trig[k - 1])
    ens, _ = _capped(dist, config.tomography.max_components)
    return log_negativity(fock_rho(ens, config.tomography.dim))


def break_even_acceptance(config, mode, record=None, input_en=None, tol=2e-3, p_min=0.01):
    """Acceptance probability where the distillate E_n drops to the input E_n.

    E_n falls as the threshold opens up; the crossing is located by
    bisection over the acceptance probability on one fixed set of trials.
    Returns NaN if the distillate never beats the input (or always does,
    in which case 1.0 is returned).
    """
    record = record if record is not None else simulate_mode(config, mode)
    if input_en is None:
        input_en = input_reference(config)["E_n"]
    f = lambda p: _en_at_acceptance(record, p, config) - input_en  # noqa: E731
    if f(1.0) >= 0:
        return 1.0
    if f(p_min) <= 0:
        return math.nan
    lo, hi = p_min, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ----------------------------------------------------------------------------
# calibration


def input_total_variance(config, sigma, n_samples=None, rng=None):
    """I of the phase-diffused input pair at uniform width ``sigma``.

    Exact by default; with ``n_samples`` a Monte Carlo phase ensemble is used.
    """
    pair = input_pair(config)
    if n_samples is None:
        return total_variance(decohered_moments(pair, sigma, sigma))
    rng = np.random.default_rng(rng)
    return total_variance(decohered_ensemble(pair, sigma, sigma, n_samples, rng))


def calibrate_sigma(target_input_I, config, rel_tol=1e-9, sigma_max=math.pi):
    """Uniform phase-noise width giving the input pair total variance ``target_input_I``."""
    clean = input_total_variance(config, 0.0)
    if not math.isfinite(target_input_I) or target_input_I >= 1.5:
        raise ValueError(f"target I must lie in ({clean:.6g}, 1.5), got {target_input_I}")
    if target_input_I < clean * (1.0 - 1e-12):
        raise ValueError(
            f"target I {target_input_I:.6g} is below the clean-pair value {clean:.6g}"
        )
    if target_input_I <= clean * (1.0 + 1e-12):
        return 0.0
    lo, hi = 0.0, sigma_max
    if input_total_variance(config, hi) < target_input_I:
        raise ValueError(f"target I {target_input_I:.6g} is not reachable with sigma < {hi:g}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if input_total_variance(config, mid) < target_input_I:
            lo = mid
        else:
            hi = mid
        if hi - lo <= rel_tol * hi:
            break
    return 0.5 * (lo + hi)


def _yield_threshold(trigger, copies, target_yield):
    """Threshold giving yield ``target_yield`` on sorted triggers (exact count)."""
    k = int(round(target_yield * copies * len(trigger)))
    k = min(max(k, 1), len(trigger))
    return np.partition(trigger, k - 1)[k - 1]


def single_stage_I_at_yield(config, sigma, target_yield=0.10, n_trials=None):
    cfg = config.with_sigma(sigma)
    record = simulate_mode(cfg, SINGLE_STAGE, n_trials)
    q = _yield_threshold(record.trigger, 2, target_yield)
    return total_variance(record.distillate(q).components)


def calibrate_anchor(config, target_I, target_yield=0.10, n_trials=None, bracket=(0.2, 0.8),
                     tol=1e-4):
    """Width sigma at which single-stage I at ``target_yield`` equals ``target_I``.

    The same seed is used for every sigma, so the objective is a smooth
    function of sigma (common random numbers) and plain bisection works.
    """
    lo, hi = bracket
    f = lambda s: single_stage_I_at_yield(config, s, target_yield, n_trials) - target_I  # noqa: E731
    flo, fhi = f(lo), f(hi)
    if flo > 0 or fhi < 0:
        raise NumericalFailure("anchor target not bracketed", {"bracket": bracket, "f": (flo, fhi)})
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ----------------------------------------------------------------------------
# equal yield


def yield_threshold(record, target_yield, rel_tol=1e-3, max_iter=40):
    """Bisection over Q for the yield ``target_yield`` (Q1 = Q2).

    Returns ``(q, achieved_yield, iterations)``. Yield is monotone in Q
    because every Q is applied to the same trials.
    """
    copies = record.copies_per_attempt
    n = len(record)
    trig = np.sort(record.trigger)
    hi_yield = 1.0 / copies
    lo_yield = 1.0 / (n * copies)
    if not lo_yield <= target_yield <= hi_yield * (1 + 1e-12):
        raise UnreachableYieldError(target_yield, (0.0, hi_yield))

    def y(q):
        return np.searchsorted(trig, q, side="right") / (n * copies)

    if target_yield >= hi_yield * (1 - rel_tol):
        return math.inf, hi_yield, 0
    lo, hi = 0.0, float(trig[-1])
    for it in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        ym = y(mid)
        if abs(ym / target_yield - 1.0) <= rel_tol:
            return mid, ym, it
        if ym < target_yield:
            lo = mid
        else:
            hi = mid
    raise NumericalFailure(
        f"yield bisection did not converge in {max_iter} iterations",
        {"target": target_yield, "bracket": (lo, hi)},
    )


def equal_yield_compare(config, target_yield, rel_tol=1e-3, records=None):
    """Compare both protocols at the same total yield.

    Returns a dict with one entry per mode and ``difference`` (iterative
    minus single-stage) for I, E_n and purity.
    """
    if not 0.0 < target_yield <= 1.0 / 3.0:
        # the iterative protocol cannot exceed one output per three copies
        raise UnreachableYieldError(target_yield, (0.0, 1.0 / 3.0))
    out = {"target_yield": target_yield, "metadata": metadata(config, "compare-yield")}
    records = records or {}
    for qi, mode in enumerate((SINGLE_STAGE, ITERATIVE)):
        record = records.get(mode)
        if record is None:
            record = simulate_mode(config, mode)
        q, achieved, iters = yield_threshold(record, target_yield, rel_tol)
        dist = record.distillate(q)
        report, _ = measure_distillate(dist, config, tomography_rng(config, mode, 1000 + qi))
        copies = record.copies_per_attempt
        out[mode] = {
            "Q": "inf" if math.isinf(q) else q,
            "yield": achieved,
            "iterations": iters,
            "accepts": dist.accepts,
            "attempts": dist.attempts,
            "acceptance_probability": dist.acceptance_probability,
            "per_3000_copies": {
                "attempts": 3000 // copies,
                "accepts": int(round(3000 * achieved)),
            },
            **report.to_dict(),
        }
    diff = {}
    for key, err in (("total_variance", "total_variance_err"),
                     ("log_negativity", "log_negativity_err"),
                     ("purity", "purity_err")):
        a, b = out[ITERATIVE], out[SINGLE_STAGE]
        diff[key] = a[key] - b[key]
        diff[err] = math.hypot(a[err], b[err])
    out["difference"] = diff
    return out


# ----------------------------------------------------------------------------
# persistence


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, GaussianState):
        return {"mean": o.mean.tolist(), "cov": o.cov.tolist()}
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _clean(obj):
    """Replace non-finite floats by JSON-safe values ("inf" or null)."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return None
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


def dumps(obj):
    return json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default) + "\n"


class OutputDir:
    """Output directory guarded by the config hash.

    Files written by a run with a different configuration are never replaced
    unless ``force`` is set.
    """

    STAMP = ".cvdistill-config"

    def __init__(self, path, config, force=False):
        self.path = os.fspath(path)
        self.config = config
        os.makedirs(self.path, exist_ok=True)
        stamp = os.path.join(self.path, self.STAMP)
        digest = config.config_hash()
        if os.path.exists(stamp) and not force:
            with open(stamp) as fh:
                old = fh.read().strip()
            if old != digest:
                raise ConfigError(
                    f"{self.path} holds results of config {old}; refusing to overwrite "
                    f"with config {digest} (choose another --out or pass --force)"
                )
        with open(stamp, "w") as fh:
            fh.write(digest + "\n")
        with open(os.path.join(self.path, "config.json"), "w") as fh:
            fh.write(dumps(config.to_dict()))

    def file(self, *parts):
        p = os.path.join(self.path, *parts)
        os.makedirs(os.path.dirname(p), exist_ok=True)
        return p

    def write_text(self, name, text):
        with open(self.file(name), "w", newline="") as fh:
            fh.write(text)

    def write_json(self, name, obj):
        self.write_text(name, dumps(obj))

    def write_rho(self, mode, q, rho, extra=None):
        meta = {**metadata(self.config, "density matrix"), "mode": mode,
                "Q": "inf" if math.isinf(q) else q, **(extra or {})}
        name = os.path.join(mode, f"rho_Q{_qname(q)}.json")
        rho.save(self.file(name), meta)
        return name


def _qname(q):
    return "inf" if math.isinf(q) else f"{q:.6g}"


def write_sweep(result, out):
    out.write_text("sweep.csv", result.to_csv())
    for mode, rhos in result.rhos.items():
        for q, rho in rhos.items():
            out.write_rho(mode, q, rho)
    out.write_json("report.json", result.report())
