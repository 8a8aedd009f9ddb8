"""Experiment configuration: JSON schema, defaults and validation.

Example (every key except ``seed`` is optional)::

    {
      "seed": 20100101,
      "sources": {"squeezing_db": 5.0, "antisqueezing_db": 9.0},
      "noise": {"sigma": 0.44},
      "protocol": {"stage1_transmittance": 0.5, "stage2_transmittance": 0.6667,
                   "survivor_port": "transmitted", "visibility": 1.0},
      "modes": ["single_stage", "iterative"],
      "thresholds": [0.1, 0.2, 0.4, 0.8, "inf"],
      "trials_per_point": 200000,
      "tomography": {"method": "exact", "n_slices": 100,
                     "samples_per_slice": 300000, "dim": 5,
                     "max_components": 50000},
      "bootstrap": {"blocks": 20, "resamples": 50},
      "workers": 1,
      "output_dir": "results"
    }

``sources`` may also be a list of three such objects; ``noise`` may give
``sigma_per_beam`` (six widths, order A1 B1 A2 B2 A3 B3) instead of one
common ``sigma``. Thresholds use quadrature units with vacuum variance 1/4.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

from .exceptions import ConfigError
from .protocol import MODES, ProtocolConfig
from .source import NoiseSpec, SqueezerSpec
from .tomography import TomographyPlan

TOMOGRAPHY_METHODS = ("sampled", "exact")


@dataclass(frozen=True)
class TomographySettings:
    method: str = "exact"
    n_slices: int = 100
    samples_per_slice: int = 300_000
    dim: int = 5
    max_components: int = 50_000

    @property
    def plan(self):
        return TomographyPlan(self.n_slices, self.samples_per_slice)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    sources: tuple = (SqueezerSpec(),) * 3
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    modes: tuple = MODES
    thresholds: tuple = (math.inf,)
    trials_per_point: int = 100_000
    tomography: TomographySettings = field(default_factory=TomographySettings)
    bootstrap_blocks: int = 20
    bootstrap_resamples: int = 50
    workers: int = 1
    output_dir: str = "results"

    def __post_init__(self):
        try:
            self.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self):
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be a 64-bit non-negative integer, got {self.seed!r}")
        if len(self.sources) != 3:
            raise ConfigError("need exactly three sources")
        for s in self.sources:
            s.validate()
        self.protocol.validate()
        if not self.modes or any(m not in MODES for m in self.modes):
            raise ConfigError(f"modes must be drawn from {MODES}, got {self.modes}")
        if not self.thresholds:
            raise ConfigError("need at least one threshold")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ConfigError("thresholds must be sorted ascending")
        if any(q < 0 for q in self.thresholds):
            raise ConfigError("thresholds must be non-negative")
        if self.trials_per_point < 100:
            raise ConfigError("trials_per_point must be >= 100")
        if self.tomography.method not in TOMOGRAPHY_METHODS:
            raise ConfigError(f"tomography.method must be one of {TOMOGRAPHY_METHODS}")
        self.tomography.plan  # validates the slice schedule
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.bootstrap_blocks < 2 or self.bootstrap_resamples < 2:
            raise ConfigError("bootstrap needs at least 2 blocks and 2 resamples")

    # ------------------------------------------------------------------
    def to_dict(self):
        proto = asdict(self.protocol)
        for key in ("threshold_stage1", "threshold_stage2", "mode"):
            proto.pop(key)
        return {
            "seed": self.seed,
            "sources": [asdict(s) for s in self.sources],
            "noise": {"sigma_per_beam": list(self.noise.sigma_per_beam)},
            "protocol": proto,
            "modes": list(self.modes),
            "thresholds": [_encode_float(q) for q in self.thresholds],
            "trials_per_point": self.trials_per_point,
            "tomography": asdict(self.tomography),
            "bootstrap": {"blocks": self.bootstrap_blocks, "resamples": self.bootstrap_resamples},
            "workers": self.workers,
            "output_dir": self.output_dir,
        }

    def config_hash(self):
        """SHA-256 of every setting that can change results."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def protocol_for(self, mode, q=math.inf):
        return replace(self.protocol, mode=mode, threshold_stage1=q, threshold_stage2=q)

    def with_sigma(self, sigma):
        return replace(self, noise=NoiseSpec.uniform(sigma))

    def override(self, **kwargs):
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


def _encode_float(q):
    return "inf" if math.isinf(q) else q


def _decode_float(q):
    if isinstance(q, str):
        if q.strip().lower() in ("inf", "+inf", "infinity"):
            return math.inf
        return float(q)
    return float(q)


def _sources(obj):
    if obj is None:
        return (SqueezerSpec(),) * 3
    if isinstance(obj, dict):
        return (SqueezerSpec(**obj),) * 3
    if len(obj) != 3:
        raise ConfigError("sources must be one object or a list of three")
    return tuple(SqueezerSpec(**o) for o in obj)


def _noise(obj):
    if obj is None:
        return NoiseSpec()
    if "sigma" in obj:
        return NoiseSpec.uniform(obj["sigma"])
    return NoiseSpec(tuple(obj["sigma_per_beam"]))


_TOP_KEYS = {
    "seed", "sources", "noise", "protocol", "modes", "thresholds", "trials_per_point",
    "tomography", "bootstrap", "workers", "output_dir",
}


def config_from_dict(d):
    unknown = set(d) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "seed" not in d:
        raise ConfigError("config must define 'seed'")
    try:
        proto = ProtocolConfig(**d.get("protocol", {}))
        boot = d.get("bootstrap", {})
        kwargs = dict(
            seed=d["seed"],
            sources=_sources(d.get("sources")),
            noise=_noise(d.get("noise")),
            protocol=proto,
            modes=tuple(d.get("modes", MODES)),
            thresholds=tuple(_decode_float(q) for q in d.get("thresholds", ["inf"])),
            trials_per_point=int(d.get("trials_per_point", 100_000)),
            tomography=TomographySettings(**d.get("tomography", {})),
            bootstrap_blocks=int(boot.get("blocks", 20)),
            bootstrap_resamples=int(boot.get("resamples", 50)),
            workers=int(d.get("workers", 1)),
            output_dir=str(d.get("output_dir", "results")),
        )
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(**kwargs)


def load_config(path, **overrides):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    d.update({k: v for k, v in overrides.items() if v is not None})
    return config_from_dict(d)
