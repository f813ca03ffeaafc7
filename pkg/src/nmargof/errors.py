"""Exception hierarchy. Every error carries a machine-readable ``code``."""


class NmarGofError(Exception):
    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        out = {"error": self.code, "message": str(self)}
        if self.details:
            out["details"] = {k: _jsonable(v) for k, v in self.details.items()}
        return out


def _jsonable(v):
    if isinstance(v, (str, int, float, bool)) or v is None:
        return v
    try:
        return float(v)
    except (TypeError, ValueError):
        return str(v)


class InvalidInputError(NmarGofError, ValueError):
    code = "invalid_input"


class DataFormatError(InvalidInputError):
    code = "data_format"


class TiltDivergenceError(NmarGofError, ArithmeticError):
    """The outcome law has no moment generating function at the requested gamma."""

    code = "tilt_divergence"


class DegenerateDesignError(NmarGofError, ValueError):
    code = "degenerate_design"


class InitializationError(NmarGofError, RuntimeError):
    code = "initialization"


class IllConditionedVarianceError(NmarGofError, ArithmeticError):
    code = "ill_conditioned_variance"


class UnstableBootstrapError(NmarGofError, RuntimeError):
    code = "unstable_bootstrap"


class ScenarioInfeasibleError(NmarGofError, ValueError):
    code = "scenario_infeasible"


class StudyFailureError(NmarGofError, RuntimeError):
    code = "study_failure"


class ConvergenceError(NmarGofError, RuntimeError):
    code = "nonconvergence"
