"""Pipeline configuration: one JSON document with a section per module.

Unknown keys are rejected at every level so a typo cannot silently fall back
to a default.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .reconstruction import ReconConfig
from .regressor import NetConfig
from .sampling import SamplingConfig
from .volume import PhantomSpec

__all__ = ["ConfigError", "PipelineConfig", "load_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSection:
    kind: str = "nested-ellipsoids"
    count: int = 3
    contrast: tuple = (0.25, 1.0)
    L: int = 64
    spacing: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "contrast", tuple(self.contrast))
        if self.L < 16:
            raise ValueError("phantom L must be >= 16")
        if self.spacing <= 0:
            raise ValueError("phantom spacing must be positive")

    def spec(self, seed: int) -> PhantomSpec:
        s = PhantomSpec(self.kind, seed, self.count, self.contrast)
        s.validate()
        return s


@dataclass(frozen=True)
class SamplingSection:
    n_normals: int = 20
    plane_count: int = 8
    plane_spacing: float = 4.0
    slice_size: int | None = None
    prune_K: float = 0.2
    hemisphere_only: bool = True
    corrupt_max_rot_deg: float = 0.0
    corrupt_max_trans_mm: float = 0.0
    corrupt_antithetic: bool = False

    def __post_init__(self):
        self.sampling(0)
        if self.corrupt_max_rot_deg < 0 or self.corrupt_max_trans_mm < 0:
            raise ValueError("corruption bounds must be non-negative")

    def sampling(self, seed: int) -> SamplingConfig:
        return SamplingConfig(
            self.n_normals, self.plane_count, self.plane_spacing, self.slice_size, self.prune_K,
            self.hemisphere_only, seed,
        )


@dataclass(frozen=True)
class TrainingSection:
    input_size: int = 64
    layers: list | None = None  # None -> desk default
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 30
    target_scale: float = 32.0
    holdout_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must lie in [0, 1)")
        self.net(0)

    def net(self, seed: int) -> NetConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(NetConfig) if f.name not in ("layers", "seed")}
        if self.layers is not None:
            kw["layers"] = copy.deepcopy(list(self.layers))
        return NetConfig(seed=seed, **kw)


@dataclass(frozen=True)
class DrrSection:
    distances_mm: tuple = (800.0, 600.0, 400.0)
    detector_size: int = 128
    pitch_mm: float | None = None  # None -> fitted at 400 mm
    bound_deg: float = 90.0
    step_deg: float | None = 90.0
    count: int | None = None
    mode: str = "raw"
    mu: float = 0.02
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "distances_mm", tuple(float(d) for d in self.distances_mm))
        if not self.distances_mm:
            raise ValueError("drr.distances_mm must not be empty")
        if (self.step_deg is None) == (self.count is None):
            raise ValueError("drr needs exactly one of step_deg or count")
        if self.mode not in ("raw", "exp"):
            raise ValueError("drr.mode must be 'raw' or 'exp'")
        if self.pitch_mm is not None and self.pitch_mm <= 0:
            raise ValueError("drr.pitch_mm must be positive")
        if self.detector_size < 1:
            raise ValueError("drr.detector_size must be >= 1")


@dataclass(frozen=True)
class EvaluationSection:
    histogram_bin_mm: float = 1.0

    def __post_init__(self):
        if self.histogram_bin_mm <= 0:
            raise ValueError("histogram_bin_mm must be positive")


SECTIONS = {
    "phantom": PhantomSection,
    "sampling": SamplingSection,
    "training": TrainingSection,
    "reconstruction": ReconConfig,
    "drr": DrrSection,
    "evaluation": EvaluationSection,
}


@dataclass(frozen=True)
class PipelineConfig:
    phantom: PhantomSection = field(default_factory=PhantomSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    reconstruction: ReconConfig = field(default_factory=ReconConfig)
    drr: DrrSection = field(default_factory=DrrSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    seed: int = 0
    output_dir: str = "out"

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        allowed = set(SECTIONS) | {"seed", "output_dir"}
        unknown = sorted(set(doc) - allowed)
        if unknown:
            raise ConfigError(f"unknown top-level keys: {', '.join(unknown)}")
        kw = {}
        for name, typ in SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in fields(typ)}
            bad = sorted(set(section) - known)
            if bad:
                raise ConfigError(f"unknown keys in {name!r}: {', '.join(bad)}")
            try:
                kw[name] = typ(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        out = doc.get("output_dir", "out")
        if not isinstance(out, str) or not out:
            raise ConfigError("output_dir must be a non-empty string")
        return cls(seed=seed, output_dir=out, **kw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_overrides(self, seed: int | None = None, output_dir: str | None = None) -> "PipelineConfig":
        doc = self.to_dict()
        if seed is not None:
            doc["seed"] = seed
        if output_dir is not None:
            doc["output_dir"] = output_dir
        return PipelineConfig.from_dict(doc)


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return PipelineConfig.from_dict(doc)
