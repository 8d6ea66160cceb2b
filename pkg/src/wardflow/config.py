"""Run-wide defaults and the JSON config file that overrides them.

One flat document controls every tunable named elsewhere in the package:
estimation prior mass, the elbow threshold, the merge test level, horizon
resolution, pmf truncation and the solver budget.  The CLI and the HTTP
service both read the same file, so a forecast produced on the command
line and one produced through the service agree bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigurationError, DataError

__all__ = ["PipelineConfig", "DEFAULT_CONFIG", "load_config"]


@dataclass(frozen=True)
class PipelineConfig:
    """Every default a config file may override.

    * ``em_epsilon``        total Dirichlet pseudo-mass spread over each
                            parameter family during estimation
    * ``elbow_threshold``   relative objective improvement below which the
                            cluster-count scan stops
    * ``merge_alpha``       per-pair type-I level of the redundancy test
                            (Bonferroni-corrected over pairs)
    * ``horizon_tail_tol``  residual transient mass tolerated when resolving
                            the day horizon of the stay analytics
    * ``horizon_cap``       hard day cap for that resolution; ``None`` keeps
                            the four-times-99th-percentile rule
    * ``eps_tail``          truncation tail for demand pmfs; each count
                            distribution keeps its ``1 - eps_tail`` quantile
    * ``solver_time_limit`` seconds before the schedule search returns its
                            incumbent with a gap instead of a certificate
    """

    em_epsilon: float = 1e-5
    elbow_threshold: float = 0.01
    merge_alpha: float = 0.05
    horizon_tail_tol: float = 1e-6
    horizon_cap: int | None = None
    eps_tail: float = 1e-9
    solver_time_limit: float = 60.0

    def __post_init__(self):
        if self.em_epsilon < 0:
            raise ConfigurationError("em_epsilon must be >= 0")
        if not 0 < self.elbow_threshold < 1:
            raise ConfigurationError("elbow_threshold must be in (0, 1)")
        if not 0 <= self.merge_alpha <= 1:
            raise ConfigurationError("merge_alpha must be in [0, 1]")
        if not 0 < self.horizon_tail_tol < 1:
            raise ConfigurationError("horizon_tail_tol must be in (0, 1)")
        if self.horizon_cap is not None and self.horizon_cap < 1:
            raise ConfigurationError("horizon_cap must be >= 1 when given")
        if not 0 < self.eps_tail < 1:
            raise ConfigurationError("eps_tail must be in (0, 1)")
        if self.solver_time_limit <= 0:
            raise ConfigurationError("solver_time_limit must be > 0")


DEFAULT_CONFIG = PipelineConfig()

_FIELDS = {f.name for f in fields(PipelineConfig)}


def load_config(path: str | Path | None) -> PipelineConfig:
    """Defaults overlaid with the JSON document at ``path`` (None = defaults).

    Unknown keys fail loudly rather than being ignored: a typo in a config
    file must not silently fall back to a default.
    """
    if path is None:
        return DEFAULT_CONFIG
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(doc) - _FIELDS)
    if unknown:
        raise ConfigurationError(
            f"unknown config keys {unknown}; valid keys are {sorted(_FIELDS)}"
        )
    return replace(DEFAULT_CONFIG, **doc)
