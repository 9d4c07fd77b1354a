"""
Configuration settings for flowlab
"""

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process-wide numerical and runtime defaults"""

    model_config = SettingsConfigDict(env_file=".env", env_prefix="FLOWLAB_", case_sensitive=False)

    # Application
    ENVIRONMENT: str = Field(default="development", description="Environment (development/testing/production)")

    # Logging
    LOG_LEVEL: str = Field(default="INFO", description="Log level")
    LOG_FILE: str = Field(default="logs/flowlab.log", description="Log file path")

    # Runs
    OUTPUT_DIR: str = Field(default="results", description="Directory for CSV/JSON artifacts")
    THREADS: int = Field(default=4, description="Worker threads for ensembles and suites")
    DEFAULT_SEED: int = Field(default=20240601, description="Root seed when a config does not set one")

    # Quadrature
    MOLLIFIER_QUADRATURE_ORDER: int = Field(default=64, description="Gauss-Legendre nodes across the bump support")
    MIN_QUADRATURE_ORDER: int = Field(default=8, description="Smallest accepted mollifier quadrature order")
    BISECTION_TOL: float = Field(default=1e-12, description="Tolerance of the inverse Lamperti bisection")
    GAUSS_HERMITE_NODES: int = Field(default=32, description="Gauss-Hermite nodes per axis")
    SIMPLEX_NODES: int = Field(default=16, description="Gauss-Legendre nodes per simplex axis")

    # Checks
    KERNEL_CONSTANT: float = Field(default=10.0, description="Constant C in the iterated-integral bound")
    SE_MULTIPLE: float = Field(default=3.0, description="Standard-error multiple for stochastic checks")
    UNIFORMITY_BAND: float = Field(default=1.5, description="Max/min ratio band for uniformity studies")
    REPORT_SCHEMA_VERSION: str = Field(default="v1", description="Schema version written into every report")

    @field_validator("ENVIRONMENT")
    @classmethod
    def validate_environment(cls, v):
        if v not in ["development", "testing", "production"]:
            raise ValueError("ENVIRONMENT must be development, testing, or production")
        return v

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v):
        valid_levels = ["TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"LOG_LEVEL must be one of {valid_levels}")
        return v.upper()

    @field_validator(
        "THREADS",
        "MOLLIFIER_QUADRATURE_ORDER",
        "MIN_QUADRATURE_ORDER",
        "GAUSS_HERMITE_NODES",
        "SIMPLEX_NODES",
    )
    @classmethod
    def validate_positive_int(cls, v):
        if v < 1:
            raise ValueError("must be a positive integer")
        return v

    @field_validator("BISECTION_TOL", "KERNEL_CONSTANT", "SE_MULTIPLE", "UNIFORMITY_BAND")
    @classmethod
    def validate_positive_float(cls, v):
        if not v > 0:
            raise ValueError("must be positive")
        return v

    def __init__(self, **kwargs):
        super().__init__(**kwargs)

        if self.MOLLIFIER_QUADRATURE_ORDER < self.MIN_QUADRATURE_ORDER:
            raise ValueError("MOLLIFIER_QUADRATURE_ORDER must be at least MIN_QUADRATURE_ORDER")


# Create settings instance
settings = Settings()
