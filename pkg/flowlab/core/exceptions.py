"""
Exception hierarchy for flowlab
"""

from typing import Any, Dict, Optional


class FlowlabError(Exception):
    """Base error carrying a message and optional structured details"""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def __str__(self) -> str:
        if not self.details:
            return self.message
        extras = ", ".join(f"{key}={value}" for key, value in self.details.items())
        return f"{self.message} ({extras})"


class ConfigurationError(FlowlabError):
    """Invalid experiment config or settings; details name the field"""


class CatalogError(FlowlabError):
    """Unknown drift catalog key or params violating a field's constraints"""


class GridError(FlowlabError):
    """Invalid time step, horizon, off-grid time or degenerate lattice"""


class HorizonError(GridError):
    """Stored path does not cover the requested time window"""


class HullExitError(FlowlabError):
    """Points left an interpolation hull or a local-time window"""


class HypothesisError(FlowlabError):
    """Drift lacks a structural flag a study requires"""


class QuadratureError(FlowlabError):
    """Quadrature order too low, non-convergence or non-invertible transform"""


class EstimationError(FlowlabError):
    """Degenerate fit, too few probes or ensemble too small"""
