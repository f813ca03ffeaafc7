"""Goodness-of-fit testing for logistic propensity models under nonignorable nonresponse."""

from .bootstrap import BootstrapResult, bootstrap_sample, bootstrap_test
from .data import Dataset, Observation
from .errors import NmarGofError
from .estimation import FitOptions, FitResult, fit_mle, log_likelihood, score
from .gof import GofReport, compute_Tn, plugin_test, plugin_variance
from .model import Theta, log_density, make_family, propensity, tilt_c, tilt_c_grad
from .simulation import RejectionSummary, draw_joint, get_scenario, run_study

__all__ = [
    "BootstrapResult", "Dataset", "FitOptions", "FitResult", "GofReport", "NmarGofError",
    "Observation", "RejectionSummary", "Theta", "bootstrap_sample", "bootstrap_test",
    "compute_Tn", "draw_joint", "fit_mle", "get_scenario", "log_density", "log_likelihood",
    "make_family", "plugin_test", "plugin_variance", "propensity", "run_study", "score",
    "tilt_c", "tilt_c_grad",
]
__version__ = "0.1.0"
