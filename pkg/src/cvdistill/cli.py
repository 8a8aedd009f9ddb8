"""Command line interface: ``cvdistill {sweep,compare-yield,calibrate,tomo-dump}``.

Exit codes: 0 success, 2 configuration error, 3 unreachable yield,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys

from .config import config_from_dict, load_config
from .exceptions import ConfigError, NumericalFailure, UnreachableYieldError
from .harness import (
    OutputDir,
    calibrate_anchor,
    calibrate_sigma,
    dumps,
    equal_yield_compare,
    input_reference,
    metadata,
    run_sweep,
    simulate_mode,
    tomograph,
    tomography_rng,
    write_sweep,
)
from .protocol import ITERATIVE, SINGLE_STAGE
from .tomography import TomographyPlan, acquire

log = logging.getLogger("cvdistill")

MODE_CHOICES = {"single": (SINGLE_STAGE,), "iterative": (ITERATIVE,),
                "both": (SINGLE_STAGE, ITERATIVE)}


def _thresholds(values):
    out = []
    for v in values:
        for part in v.replace(",", " ").split():
            try:
                out.append(math.inf if part.lower() in ("inf", "+inf") else float(part))
            except ValueError as exc:
                raise ConfigError(f"bad threshold {part!r}") from exc
    return sorted(out)


def build_config(args):
    overrides = {"seed": args.seed, "workers": args.workers, "output_dir": args.out}
    if args.config:
        cfg = load_config(args.config, **overrides)
    else:
        if args.seed is None:
            raise ConfigError("no --config given, so --seed is required")
        cfg = config_from_dict({k: v for k, v in overrides.items() if v is not None})
    extra = {}
    if getattr(args, "mode", None):
        extra["modes"] = MODE_CHOICES[args.mode]
    if getattr(args, "threshold_list", None):
        extra["thresholds"] = tuple(_thresholds(args.threshold_list))
    if getattr(args, "trials", None):
        extra["trials_per_point"] = args.trials
    if getattr(args, "sigma", None) is not None:
        cfg = cfg.with_sigma(args.sigma)
    try:
        return cfg.override(**extra)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def cmd_sweep(args):
    cfg = build_config(args)
    out = OutputDir(cfg.output_dir, cfg, args.force)
    result = run_sweep(cfg, break_even=not args.no_break_even)
    write_sweep(result, out)
    print(result.to_csv(), end="")
    log.info("wrote %s", out.path)


def cmd_compare(args):
    cfg = build_config(args)
    out = OutputDir(cfg.output_dir, cfg, args.force)
    res = equal_yield_compare(cfg, args.target_yield)
    out.write_json("compare_yield.json", res)
    print(dumps(res), end="")


def cmd_calibrate(args):
    cfg = build_config(args)
    res = {"metadata": metadata(cfg, "calibration")}
    if args.target_I is not None:
        sigma = calibrate_sigma(args.target_I, cfg)
        res["input_target"] = {"target_I": args.target_I, "sigma": sigma}
    if args.anchor_I is not None:
        sigma = calibrate_anchor(cfg, args.anchor_I, args.target_yield)
        res["anchor"] = {"target_I": args.anchor_I, "target_yield": args.target_yield,
                         "sigma": sigma}
    if len(res) == 1:
        raise ConfigError("calibrate needs --target-I and/or --anchor-I")
    res["input"] = input_reference(cfg.with_sigma(sigma))
    print(dumps(res), end="")
    if args.out:
        OutputDir(cfg.output_dir, cfg, args.force).write_json("calibration.json", res)


def cmd_tomo_dump(args):
    cfg = build_config(args)
    out = OutputDir(cfg.output_dir, cfg, args.force)
    written = []
    for mode in cfg.modes:
        record = simulate_mode(cfg, mode)
        for qi, q in enumerate(cfg.thresholds):
            dist = record.distillate(q)
            if dist.accepts == 0:
                log.warning("%s: no accepted trials at Q=%g", mode, q)
                continue
            rng = tomography_rng(cfg, mode, qi)
            rho = tomograph(dist, cfg, rng)
            written.append(out.write_rho(mode, q, rho, {"accepts": dist.accepts}))
            if args.records:
                plan = TomographyPlan(cfg.tomography.n_slices, args.records)
                name = out.file(mode, f"homodyne_Q{'inf' if math.isinf(q) else f'{q:.6g}'}.csv")
                acquire(dist.components, plan, rng).to_csv(name)
                written.append(name)
    print(json.dumps(written, indent=1))


def parser():
    p = argparse.ArgumentParser(prog="cvdistill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, sweep_flags=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--sigma", type=float, help="uniform phase-noise width (rad)")
        sp.add_argument("--trials", type=int, help="trials per mode")
        sp.add_argument("--force", action="store_true",
                        help="overwrite results of a different config")
        if sweep_flags:
            sp.add_argument("--mode", choices=sorted(MODE_CHOICES))
            sp.add_argument("--threshold-list", nargs="+", metavar="Q")

    sp = sub.add_parser("sweep", help="threshold sweep")
    common(sp)
    sp.add_argument("--no-break-even", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("compare-yield", help="compare protocols at equal yield")
    common(sp, sweep_flags=False)
    sp.add_argument("--target-yield", type=float, default=0.10)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("calibrate", help="calibrate the phase-noise width")
    common(sp, sweep_flags=False)
    sp.add_argument("--target-I", type=float, help="total variance of the decohered input pair")
    sp.add_argument("--anchor-I", type=float, help="single-stage distillate I at --target-yield")
    sp.add_argument("--target-yield", type=float, default=0.10)
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("tomo-dump", help="write density matrices (and homodyne records)")
    common(sp)
    sp.add_argument("--records", type=int, default=0, help="homodyne samples per slice to save")
    sp.set_defaults(func=cmd_tomo_dump)
    return p


def main(argv=None):
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UnreachableYieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalFailure as exc:
        print(f"error: {exc} {exc.diagnostics}", file=sys.stderr)
        return 4
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
