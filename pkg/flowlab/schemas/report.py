"""
Run and suite report schemas
"""

from typing import List, Optional

from pydantic import BaseModel, Field, computed_field

from flowlab.core.config import settings
from flowlab.schemas.config import ExperimentConfig


class CheckRecord(BaseModel):
    """Outcome of one named check"""
    name: str = Field(..., description="Check name")
    value: Optional[float] = Field(None, description="Measured value")
    tolerance: Optional[float] = Field(None, description="Tolerance or band edge the value is held to")
    passed: bool = Field(..., description="Whether the check passed")
    se: Optional[float] = Field(None, description="Standard error for stochastic checks")
    message: Optional[str] = Field(None, description="Detail or failure reason")


class RunReport(BaseModel):
    """Report of one config run"""
    schema_version: str = Field(default=settings.REPORT_SCHEMA_VERSION, description="Report schema version")
    config: ExperimentConfig = Field(..., description="Config echo")
    checks: List[CheckRecord] = Field(default_factory=list, description="Check records in execution order")
    artifacts: List[str] = Field(default_factory=list, description="Artifact paths relative to the output directory")
    wall_clock: float = Field(default=0.0, exclude=True, description="Seconds spent; kept out of the JSON report")

    @computed_field
    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def check(self, name: str) -> CheckRecord:
        for record in self.checks:
            if record.name == name:
                return record
        raise KeyError(name)


class SuiteReport(BaseModel):
    """Aggregate of several runs in manifest order"""
    schema_version: str = Field(default=settings.REPORT_SCHEMA_VERSION, description="Report schema version")
    runs: List[RunReport] = Field(default_factory=list, description="Run reports")
    passed: bool = Field(..., description="True when every run passed")
