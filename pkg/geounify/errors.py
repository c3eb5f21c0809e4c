"""Exception hierarchy. The CLI maps UserError to exit 1, everything else to 2."""

from __future__ import annotations


class GeoUnifyError(Exception):
    pass


# -------- user-facing (exit 1) --------
class UserError(GeoUnifyError):
    pass


class ConfigError(UserError):
    pass


class DatasetError(UserError):
    pass


class QueryError(UserError):
    pass


class LockError(UserError):
    pass


# -------- internal (exit 2) --------
class DimensionError(GeoUnifyError):
    pass


class NumericalError(GeoUnifyError):
    pass


class FormatError(GeoUnifyError):
    pass


class DivergenceError(GeoUnifyError):
    def __init__(self, component: str, step: int, checkpoint: str | None = None):
        self.component = component
        self.step = step
        self.checkpoint = checkpoint
        where = f"; restored {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite {component} at step {step}{where}")


class MetricInvariantError(GeoUnifyError):
    pass
