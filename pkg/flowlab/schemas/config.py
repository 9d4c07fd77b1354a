"""
Experiment configuration schemas
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, ValidationInfo, field_validator, model_validator

from flowlab.core.config import settings
from flowlab.core.exceptions import ConfigurationError

StudyKind = Literal["flow", "regularity", "kernel", "transport", "zeronoise", "holder"]


class StrictModel(BaseModel):
    """Base for config blocks: unknown keys are rejected"""

    model_config = ConfigDict(extra="forbid")


class DriftSpec(StrictModel):
    """Catalog drift reference"""
    key: str = Field(default="zero", description="Drift catalog key")
    params: Dict[str, Any] = Field(default_factory=dict, description="Catalog parameters")


class LatticeSpec(StrictModel):
    """Regular lattice lo..hi with count points per axis"""
    lo: float = Field(default=-2.0, description="Lower corner (every axis)")
    hi: float = Field(default=2.0, description="Upper corner (every axis)")
    count: int = Field(default=41, ge=1, description="Points per axis")

    @model_validator(mode="after")
    def nonempty(self):
        if not self.hi > self.lo:
            raise ValueError("lattice hi must exceed lo")
        return self


class WeightSpec(StrictModel):
    """Weight for Sobolev norms and the A_p diagnostic"""
    family: Literal["constant", "power", "gaussian"] = Field(default="gaussian", description="Weight family")
    p: float = Field(default=2.0, gt=1.0, description="Integrability exponent")
    gamma: float = Field(default=0.0, description="Power-weight exponent")
    scale: float = Field(default=1.0, gt=0.0, description="Gaussian weight scale")


class ExperimentConfig(StrictModel):
    """One study run"""
    name: str = Field(..., min_length=1, description="Run name, used for output folders and stream ids")
    kind: StudyKind = Field(..., description="Study to run")
    drift: DriftSpec = Field(default_factory=DriftSpec, description="Drift under study")
    d: int = Field(default=1, ge=1, description="Dimension")
    T: float = Field(default=1.0, gt=0.0, description="Horizon")
    dt: float = Field(default=1e-3, gt=0.0, description="Time step")
    lattice: LatticeSpec = Field(default_factory=LatticeSpec, description="Initial-point lattice")
    M: int = Field(default=1000, ge=2, description="Ensemble size")
    levels: List[int] = Field(default_factory=lambda: [4, 16, 64], description="Mollification or noise levels n")
    weight: WeightSpec = Field(default_factory=WeightSpec, description="Weight function")
    seed: int = Field(default=settings.DEFAULT_SEED, ge=0, description="Root seed")
    output_dir: str = Field(default=settings.OUTPUT_DIR, description="Artifact directory")
    checks: List[str] = Field(default_factory=list, description="Checks to run; empty means the study defaults")
    tolerances: Dict[str, float] = Field(default_factory=dict, description="Per-check tolerance overrides")

    # study-specific knobs
    t: Optional[float] = Field(default=None, gt=0.0, description="Evaluation time (defaults to T)")
    q: int = Field(default=2, description="Moment order for Holder fits")
    p: float = Field(default=2.0, gt=0.0, description="Derivative moment exponent")
    time_gaps: List[float] = Field(default_factory=lambda: [0.005, 0.02, 0.05, 0.2], description="Holder time probes")
    space_gaps: List[float] = Field(default_factory=lambda: [0.005, 0.02, 0.05, 0.2], description="Holder space probes")
    probes: List[float] = Field(default_factory=lambda: [0.0], description="Initial points for moment probes (d = 1)")
    x0: float = Field(default=-1.0, description="Starting point for local-time derivatives")
    radii: List[float] = Field(default_factory=lambda: [1e-3, 1e-2, 1e-1, 1.0, 10.0], description="A_p ball radii")
    interval: Optional[List[float]] = Field(default=None, description="Interval U for W^{1,2} norms")
    budget: int = Field(default=200_000, ge=2, description="Monte-Carlo samples for iterated integrals")
    datum: Literal["tanh", "gaussian", "constant"] = Field(default="tanh", description="Initial datum u0")
    probe_width: float = Field(default=0.5, gt=0.0, description="Width of the Gaussian test function")
    sigma: Optional[float] = Field(default=None, gt=0.0, description="Constant diffusion for the Lamperti comparison (d = 1)")

    @field_validator("dt")
    @classmethod
    def dt_divides_horizon(cls, v: float, info: ValidationInfo) -> float:
        horizon = info.data.get("T")
        if horizon is not None:
            ratio = horizon / v
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise ValueError(f"dt={v} does not divide T={horizon}")
        return v

    @field_validator("t")
    @classmethod
    def t_on_time_grid(cls, v: Optional[float], info: ValidationInfo) -> Optional[float]:
        step = info.data.get("dt")
        if v is not None and step is not None:
            ratio = v / step
            if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
                raise ValueError(f"t={v} is not a multiple of dt={step}")
        return v

    @field_validator("levels")
    @classmethod
    def positive_levels(cls, v: List[int]) -> List[int]:
        if not v or any(n < 1 for n in v) or v != sorted(set(v)):
            raise ValueError("levels must be distinct positive integers in increasing order")
        return v

    @field_validator("q")
    @classmethod
    def moment_order(cls, v: int) -> int:
        if v not in (2, 4):
            raise ValueError("q must be 2 or 4")
        return v

    @field_validator("interval")
    @classmethod
    def interval_pair(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None and (len(v) != 2 or not v[1] > v[0]):
            raise ValueError("interval must be [a, b] with b > a")
        return v

    @property
    def eval_time(self) -> float:
        return self.T if self.t is None else self.t

    def tolerance(self, check: str, default: float) -> float:
        return float(self.tolerances.get(check, default))


class Manifest(StrictModel):
    """Ordered list of configs: file paths relative to the manifest, or inline configs"""
    configs: List[Union[str, ExperimentConfig]] = Field(default_factory=list, description="Suite members")


def _describe(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "config"
        parts.append(f"{where}: {item['msg']}")
    return "; ".join(parts)


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    """Validate a config mapping, naming the offending fields on failure."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid experiment config: {_describe(e)}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        return parse_config(json.load(f))


def load_manifest(path: Union[str, Path]) -> List[ExperimentConfig]:
    """Read a manifest and resolve every member; an empty manifest is an error."""
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Manifest file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        raw = json.load(f)
    try:
        manifest = Manifest.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid manifest: {_describe(e)}") from e
    if not manifest.configs:
        raise ConfigurationError("Manifest lists no configs", {"manifest": str(path)})
    return [
        load_config(path.parent / member) if isinstance(member, str) else member
        for member in manifest.configs
    ]
