"""Squared-residual goodness-of-fit statistic and its plug-in normal test."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import IllConditionedVarianceError, InvalidInputError
from .estimation import FitOptions, FitResult, _eta_jacobian, fit_design, psi_matrix
from .model import Design, OutcomeFamily, Theta, logistic_from_eta, residual_H


@dataclass
class PluginVariance:
    sigma2_hat: float
    h_hat: np.ndarray
    J_hat: np.ndarray
    Sigma_hat: np.ndarray

    @property
    def weights(self):
        """``(1, h' J^{-1})``, the linear combination of ``Z`` giving the influence."""
        return np.concatenate([[1.0], np.linalg.solve(self.J_hat, self.h_hat)])


@dataclass
class GofReport:
    t_n: float
    delta_hat: float
    sigma_hat: Optional[float]
    plugin_p: Optional[float]
    plugin_reject: Optional[bool]
    fit: FitResult
    n: int
    level: float
    variance: Optional[PluginVariance] = None
    warnings: tuple = ()


def _pi(design: Design, theta):
    return logistic_from_eta(design.terms(np.asarray(theta, dtype=float), grad=False).eta)


def tn_design(design: Design, theta) -> float:
    H = residual_H(_pi(design, theta), design.r)
    return float(H.sum() / np.sqrt(design.n))


def compute_Tn(data, theta: Theta, fam: OutcomeFamily) -> float:
    """``n^{-1/2} sum_i {(r_i - pi_i)^2 - pi_i (1 - pi_i)}`` at ``theta``."""
    return tn_design(Design(data, fam), theta.to_vector())


def dH_dtheta_matrix(design: Design, theta):
    """Per-row gradient of the residual ``H`` with respect to theta, shape (n, dim)."""
    *_, eta, u = _eta_jacobian(design, theta)
    pi = logistic_from_eta(eta)
    r = design.r
    dH_dpi = 2 * (pi - r) - (1 - 2 * pi)
    dpi = -(pi * (1 - pi))[:, None] * u
    return dH_dpi[:, None] * dpi


def variance_from_z(Z, h_hat, J_hat, rcond_min=1e-12):
    """Assemble ``(1, h'J^{-1}) Sigma (1, h'J^{-1})'`` from the rows ``Z_i = (H_i, psi_i)``."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape[0] < 2:
        raise InvalidInputError("need at least two rows to estimate a covariance")
    # shift by the first row so constant columns centre to exact zeros
    Zc = Z - Z[0]
    Zc = Zc - Zc.mean(axis=0)
    Sigma = Zc.T @ Zc / (Z.shape[0] - 1)
    Sigma = 0.5 * (Sigma + Sigma.T)
    w = np.linalg.eigvalsh(J_hat)
    if not np.all(np.isfinite(w)) or w.min() <= rcond_min * max(np.abs(w).max(), 1e-300):
        raise IllConditionedVarianceError("information matrix is singular or indefinite",
                                          min_eigenvalue=float(w.min()))
    a = np.concatenate([[1.0], np.linalg.solve(J_hat, h_hat)])
    sigma2 = float(max(a @ Sigma @ a, 0.0))
    return PluginVariance(sigma2, np.asarray(h_hat), np.asarray(J_hat), Sigma)


INFORMATION = ("hessian", "opg")


def plugin_variance_design(design: Design, fit: FitResult,
                           information: str = "hessian") -> PluginVariance:
    if information not in INFORMATION:
        raise InvalidInputError(f"information must be one of {INFORMATION}")
    theta = fit.theta_vector
    free = fit.free if fit.free is not None else np.ones(theta.size, dtype=bool)
    dH = dH_dtheta_matrix(design, theta)[:, free]
    H = residual_H(_pi(design, theta), design.r)
    psi = psi_matrix(design, theta)[:, free]
    Z = np.column_stack([H, psi])
    if information == "opg":
        J = psi.T @ psi / design.n
    elif fit.info_matrix is None:
        raise InvalidInputError("fit was run without the information matrix")
    else:
        J = fit.info_matrix[np.ix_(free, free)]
    return variance_from_z(Z, dH.mean(axis=0), J)


def plugin_variance(data, fit: FitResult, fam: OutcomeFamily,
                    information: str = "hessian") -> PluginVariance:
    """Sample-analogue estimate of the asymptotic variance of ``T_n`` at ``fit``.

    Parameters
    ----------
    information : {"hessian", "opg"}
        ``J`` is the average negative Hessian (default) or, with ``"opg"``,
        the average outer product of the per-row scores. The two agree
        asymptotically under the null; in small samples the outer-product
        form gives a larger, more conservative variance.
    """
    if not fit.converged:
        raise InvalidInputError("plug-in variance requires a converged fit")
    return plugin_variance_design(Design(data, fam), fit, information)


def plugin_p_value(t_n, sigma_hat):
    if sigma_hat is None or not np.isfinite(sigma_hat):
        return None
    if sigma_hat == 0:
        return 1.0 if t_n == 0 else 0.0
    return float(2 * norm.sf(abs(t_n) / sigma_hat))


def gof_design(design: Design, level=0.05, opts: FitOptions = FitOptions(),
               fit: Optional[FitResult] = None, information: str = "hessian") -> GofReport:
    if not 0 < level < 1:
        raise InvalidInputError("level must lie in (0, 1)")
    if fit is None:
        fit = fit_design(design, opts)
    t_n = tn_design(design, fit.theta_vector)
    warnings = []
    var = sigma = p = reject = None
    if not fit.converged:
        warnings.append(f"MLE did not converge: {fit.message}")
    else:
        try:
            var = plugin_variance_design(design, fit, information)
            sigma = float(np.sqrt(var.sigma2_hat))
            p = plugin_p_value(t_n, sigma)
            reject = bool(abs(t_n) > sigma * norm.ppf(1 - level / 2))
        except IllConditionedVarianceError as exc:
            warnings.append(f"plug-in variance unavailable: {exc}")
    return GofReport(t_n, t_n / np.sqrt(design.n), sigma, p, reject, fit, design.n, level,
                     var, tuple(warnings))


def plugin_test(data, fam: OutcomeFamily, a: float = 0.05,
                opts: FitOptions = FitOptions(), information: str = "hessian") -> GofReport:
    """Fit under the null and test with the normal approximation.

    Rejects when ``|T_n| > sigma_hat * z_{1 - a/2}``; the p-value is two-sided.
    ``information`` is passed to :func:`plugin_variance`.
    """
    return gof_design(Design(data, fam), a, opts, information=information)
