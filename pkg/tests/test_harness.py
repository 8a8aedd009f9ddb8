import json
import math
import warnings

import numpy as np
import pytest

from cvdistill.cli import main
from cvdistill.config import ExperimentConfig, TomographySettings, config_from_dict, load_config
from cvdistill.exceptions import ConfigError, UnreachableYieldError
from cvdistill.harness import (
    OutputDir,
    calibrate_sigma,
    equal_yield_compare,
    input_reference,
    input_total_variance,
    run_sweep,
    simulate_mode,
    write_sweep,
    yield_threshold,
)
from cvdistill.protocol import ITERATIVE, SINGLE_STAGE
from cvdistill.source import NoiseSpec

SIGMA_AT_090 = 0.36831483015677124


def small(**kw):
    base = dict(seed=11, trials_per_point=4000, tomography=TomographySettings(max_components=4000),
                bootstrap_blocks=8, bootstrap_resamples=20)
    base.update(kw)
    return ExperimentConfig(**base)


# ------------------------------------------------------------------ config

def test_seed_required():
    with pytest.raises(ConfigError):
        config_from_dict({})


def test_config_invariants():
    with pytest.raises(ConfigError):
        ExperimentConfig(seed=1, thresholds=(0.5, 0.1))
    with pytest.raises(ConfigError):
        ExperimentConfig(seed=1, trials_per_point=99)
    with pytest.raises(ConfigError):
        config_from_dict({"seed": 1, "protocol": {"stage1_transmittance": 2.0}})
    with pytest.raises(ConfigError):
        config_from_dict({"seed": 1, "bogus": 3})
    with pytest.raises(ConfigError):
        config_from_dict({"seed": -4})


def test_config_roundtrip_and_hash(tmp_path):
    cfg = config_from_dict({"seed": 5, "thresholds": [0.1, "inf"], "noise": {"sigma": 0.3},
                            "sources": [{"squeezing_db": 5, "antisqueezing_db": 9}] * 3})
    assert cfg.thresholds == (0.1, math.inf)
    assert cfg.noise == NoiseSpec.uniform(0.3)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = load_config(path)
    assert back == cfg and back.config_hash() == cfg.config_hash()
    assert cfg.override(seed=6).config_hash() != cfg.config_hash()
    # the output location does not change the results
    assert cfg.override(output_dir="elsewhere").config_hash() == cfg.config_hash()


# ------------------------------------------------------------------- sweep

def test_open_threshold_yields():
    res = run_sweep(small(thresholds=(math.inf,)), break_even=False)
    assert res.column(SINGLE_STAGE, "yield")[0] == 0.5
    assert res.column(ITERATIVE, "yield")[0] == pytest.approx(1 / 3)


def test_sweep_rows_consistent():
    cfg = small(noise=NoiseSpec.uniform(0.44), thresholds=(0.05, 0.1, 0.3, math.inf))
    res = run_sweep(cfg, break_even=False)
    for mode in cfg.modes:
        y = res.column(mode, "yield")
        assert np.all(np.diff(y) >= 0)  # Q ascending -> yield non-decreasing
        assert np.all(res.column(mode, "accepts") <= res.column(mode, "attempts"))
        assert np.all(np.isfinite(res.column(mode, "E_n_err")))


def test_zero_accept_row_is_null():
    cfg = small(thresholds=(0.0, math.inf), modes=(SINGLE_STAGE,))
    with pytest.warns(UserWarning, match="no accepted"):
        res = run_sweep(cfg, break_even=False)
    row = res.rows[0].to_dict()
    assert row["accepts"] == 0 and row["E_n"] is None and row["I"] is None
    assert res.to_csv().splitlines()[-2].endswith(",,,,,,,")


def test_clean_sweep_never_beats_input():
    cfg = small(thresholds=(0.05, 0.1, 0.2, 0.5, math.inf))
    res = run_sweep(cfg, break_even=False)
    ref = input_reference(cfg)["E_n"]
    for mode in cfg.modes:
        en = res.column(mode, "E_n")
        err = res.column(mode, "E_n_err")
        assert np.all(en <= ref + 3 * err)


def test_input_reference_values():
    ref = input_reference(small())
    assert ref["clean_I"] == pytest.approx(0.6581139, abs=1e-7)
    assert ref["I"] == ref["clean_I"]
    assert ref["E_n"] == pytest.approx(0.65528, abs=5e-5)


# ------------------------------------------------------------- calibration

def test_calibrate_clean_target_gives_zero():
    cfg = small()
    assert calibrate_sigma(input_total_variance(cfg, 0.0), cfg) == 0.0


def test_calibrate_monotone_and_regression():
    cfg = small()
    sig = [calibrate_sigma(t, cfg) for t in (0.7, 0.8, 0.9, 1.0, 1.2)]
    assert np.all(np.diff(sig) > 0)
    assert sig[2] == pytest.approx(SIGMA_AT_090, rel=1e-6)
    assert abs(input_total_variance(cfg, sig[2]) / 0.9 - 1) < 0.005


def test_calibration_agrees_with_phase_sampling():
    cfg = small()
    mc = input_total_variance(cfg, SIGMA_AT_090, n_samples=100_000, rng=3)
    assert abs(mc / 0.9 - 1) < 0.005


@pytest.mark.parametrize("target", [0.5, 1.6, math.nan])
def test_calibrate_rejects_bad_targets(target):
    with pytest.raises(ValueError):
        calibrate_sigma(target, small())


# ------------------------------------------------------------- equal yield

def test_yield_threshold_boundary_and_errors():
    cfg = small(noise=NoiseSpec.uniform(0.4))
    rec = simulate_mode(cfg, SINGLE_STAGE)
    assert yield_threshold(rec, 0.5)[0] == math.inf
    with pytest.raises(UnreachableYieldError, match="feasible range"):
        yield_threshold(rec, 0.6)
    q, y, it = yield_threshold(rec, 0.1)
    assert abs(y / 0.1 - 1) <= 0.02 and it <= 40


def test_equal_yield_bookkeeping():
    cfg = small(noise=NoiseSpec.uniform(0.44), trials_per_point=20_000)
    res = equal_yield_compare(cfg, 0.10)
    assert res[SINGLE_STAGE]["per_3000_copies"] == {"attempts": 1500, "accepts": 300}
    assert res[ITERATIVE]["per_3000_copies"] == {"attempts": 1000, "accepts": 300}
    for mode in (SINGLE_STAGE, ITERATIVE):
        assert abs(res[mode]["yield"] / 0.1 - 1) <= 0.02
    d = res["difference"]
    assert d["total_variance"] == pytest.approx(
        res[ITERATIVE]["total_variance"] - res[SINGLE_STAGE]["total_variance"])


def test_equal_yield_unreachable():
    with pytest.raises(UnreachableYieldError):
        equal_yield_compare(small(), 0.4)


# ------------------------------------------------------- outputs and CLI

def test_sweep_files_deterministic(tmp_path):
    cfg = small(noise=NoiseSpec.uniform(0.4), thresholds=(0.1, math.inf))
    texts = []
    for k in range(2):
        out = OutputDir(tmp_path / f"run{k}", cfg)
        write_sweep(run_sweep(cfg, break_even=False), out)
        texts.append((tmp_path / f"run{k}" / "sweep.csv").read_bytes())
    assert texts[0] == texts[1]
    assert (tmp_path / "run0" / ITERATIVE / "rho_Qinf.json").exists()
    report = json.loads((tmp_path / "run0" / "report.json").read_text())
    assert report["metadata"]["config_hash"] == cfg.config_hash()


def test_output_dir_refuses_other_config(tmp_path):
    OutputDir(tmp_path, small())
    OutputDir(tmp_path, small())  # same config is fine
    with pytest.raises(ConfigError):
        OutputDir(tmp_path, small(seed=12))
    OutputDir(tmp_path, small(seed=12), force=True)


def test_cli_sweep(tmp_path, capsys):
    cfgfile = tmp_path / "cfg.json"
    cfgfile.write_text(json.dumps({"seed": 3, "noise": {"sigma": 0.44}, "trials_per_point": 2000,
                                   "tomography": {"max_components": 2000}}))
    out = tmp_path / "out"
    rc = main(["sweep", "--config", str(cfgfile), "--out", str(out), "--mode", "single",
               "--threshold-list", "0.2,inf", "--no-break-even"])
    assert rc == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    header = [l for l in lines if not l.startswith("#")][0]
    assert header.startswith("mode,Q,yield,acceptance_probability,accepts,attempts")
    assert any(l.startswith("# config_hash:") for l in lines)
    assert (out / SINGLE_STAGE / "rho_Q0.2.json").exists()
    # rerun with a different seed into the same directory is refused
    rc = main(["sweep", "--config", str(cfgfile), "--out", str(out), "--seed", "4",
               "--mode", "single", "--threshold-list", "inf", "--no-break-even"])
    assert rc == 2


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["sweep", "--out", str(tmp_path / "a")]) == 2  # no seed
    assert main(["compare-yield", "--seed", "1", "--trials", "500",
                 "--target-yield", "0.5", "--out", str(tmp_path / "b")]) == 3
    assert main(["calibrate", "--seed", "1", "--target-I", "0.3"]) == 2
    assert main(["calibrate", "--seed", "1", "--target-I", "0.9"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["input_target"]["sigma"] == pytest.approx(SIGMA_AT_090, rel=1e-6)


def test_cli_tomo_dump(tmp_path, capsys):
    out = tmp_path / "t"
    rc = main(["tomo-dump", "--seed", "2", "--trials", "500", "--sigma", "0.3", "--out", str(out),
               "--mode", "iterative", "--threshold-list", "inf", "--records", "5"])
    assert rc == 0
    assert (out / ITERATIVE / "rho_Qinf.json").exists()
    assert (out / ITERATIVE / "homodyne_Qinf.csv").read_text().count("\n") == 2 + 100 * 5


def test_warnings_not_raised_by_default_sweep():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        run_sweep(small(thresholds=(math.inf,)), break_even=False)
