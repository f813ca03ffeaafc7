"""Outcome families, the exponential-tilt term and the marginal propensity.

All family methods are vectorised: ``lin`` is the outcome linear index
``xi_coef @ (1, x_out)`` with any leading batch shape, ``extra`` is the
family's scale parameter on the log scale (broadcastable against ``lin``),
and ``gamma`` broadcasts the same way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import digamma, expit, gammaln, polygamma

from .errors import InvalidInputError, TiltDivergenceError

ETA_CLAMP = 35.0
LOG_2PI = np.log(2 * np.pi)


def _softplus(z):
    # log(1 + e^z); faster than np.logaddexp and equally accurate
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


class OutcomeFamily:
    """Parametric law ``f(y | x; xi)`` of the outcome among respondents.

    ``xi`` is laid out as the regression coefficients on ``(1, x_out)``
    followed by ``n_extra`` log-scale parameters.
    """

    kind = "abstract"
    n_extra = 0
    extra_name: Optional[str] = None

    def __init__(self, n_coef: int):
        if n_coef < 1:
            raise InvalidInputError("outcome model needs at least an intercept")
        self.n_coef = int(n_coef)

    def __repr__(self):
        return f"{type(self).__name__}(n_coef={self.n_coef})"

    def __eq__(self, other):
        return type(self) is type(other) and self.n_coef == other.n_coef

    def __hash__(self):
        return hash((self.kind, self.n_coef))

    @property
    def n_params(self):
        return self.n_coef + self.n_extra

    def split(self, xi):
        """Return ``(coef, extra)``; ``extra`` is None for one-parameter families."""
        xi = np.asarray(xi, dtype=float)
        if xi.shape[-1] != self.n_params:
            raise InvalidInputError(
                f"{self.kind} expects {self.n_params} outcome parameters, got {xi.shape[-1]}")
        coef = xi[..., : self.n_coef]
        extra = xi[..., self.n_coef] if self.n_extra else None
        return coef, extra

    def param_names(self, covariate_names: Sequence[str]):
        names = ["xi_intercept"] + [f"xi_{c}" for c in covariate_names]
        if self.n_extra:
            names.append(self.extra_name)
        return names

    def gamma_upper(self, lin, extra):
        """Supremum of feasible gamma over the rows in ``lin``."""
        return np.inf

    def check_tilt(self, gamma, lin, extra):
        """Raise :class:`TiltDivergenceError` if the tilt is infinite anywhere."""

    def validate_y(self, y):
        pass

    def tilt_grad(self, gamma, lin, extra=None):
        """``(dc/dgamma, dc/dlin, dc/dextra)``; the last is None without an extra parameter."""
        return self.tilt_and_grad(gamma, lin, extra)[1:]

    # subclasses implement: logpdf, dlogpdf, tilt, tilt_and_grad, mean, sample, tilted_sample


class Bernoulli(OutcomeFamily):
    kind = "bernoulli"

    def validate_y(self, y):
        y = np.asarray(y)
        if not np.isin(y, (0.0, 1.0)).all():
            raise InvalidInputError("Bernoulli outcome must be 0 or 1")

    def logpdf(self, y, lin, extra=None):
        return y * lin - _softplus(lin)

    def dlogpdf(self, y, lin, extra=None):
        return y - expit(lin), None

    def tilt(self, gamma, lin, extra=None):
        # log(1 - p + p e^gamma) written so that gamma == 0 gives exactly 0
        return _softplus(lin + gamma) - _softplus(lin)

    def tilt_and_grad(self, gamma, lin, extra=None):
        p_tilted = expit(lin + gamma)
        return self.tilt(gamma, lin), p_tilted, p_tilted - expit(lin), None

    def second_derivatives(self, y, gamma, lin, extra=None):
        """Second partials of the tilt and log-density.

        Returns ``(c_gg, c_gl, c_ge, c_ll, c_le, c_ee)`` and
        ``(f_ll, f_le, f_ee)`` over (gamma, lin, extra); entries involving an
        absent extra parameter are None.
        """
        pt = expit(lin + gamma)
        p = expit(lin)
        vt = pt * (1 - pt)
        return (vt, vt, None, vt - p * (1 - p), None, None), (-p * (1 - p), None, None)

    def mean(self, lin, extra=None):
        return expit(lin)

    def sample(self, rng, lin, extra=None):
        lin = np.asarray(lin, dtype=float)
        return (rng.random(lin.shape) < expit(lin)).astype(float)

    def tilted_sample(self, rng, t, lin, extra=None):
        return self.sample(rng, np.asarray(lin) + t)


class Normal(OutcomeFamily):
    kind = "normal"
    n_extra = 1
    extra_name = "log_sigma2"

    def logpdf(self, y, lin, extra):
        s2 = np.exp(extra)
        return -0.5 * (LOG_2PI + extra) - (y - lin) ** 2 / (2 * s2)

    def dlogpdf(self, y, lin, extra):
        s2 = np.exp(extra)
        resid = y - lin
        return resid / s2, -0.5 + resid ** 2 / (2 * s2)

    def tilt(self, gamma, lin, extra):
        return gamma * lin + 0.5 * gamma ** 2 * np.exp(extra)

    def tilt_and_grad(self, gamma, lin, extra):
        s2 = np.exp(extra)
        gamma = np.asarray(gamma, dtype=float)
        c = gamma * lin + 0.5 * gamma ** 2 * s2
        return (c, lin + gamma * s2,
                np.broadcast_to(gamma, np.shape(c)),
                0.5 * gamma ** 2 * s2 + np.zeros_like(c))

    def second_derivatives(self, y, gamma, lin, extra):
        s2 = np.exp(extra)
        resid = y - lin
        zero = np.zeros_like(resid)
        half = 0.5 * gamma ** 2 * s2 + zero
        return ((s2 + zero, 1.0 + zero, gamma * s2 + zero, zero, zero, half),
                (-1.0 / s2 + zero, -resid / s2, -resid ** 2 / (2 * s2)))

    def mean(self, lin, extra):
        return np.asarray(lin, dtype=float)

    def sample(self, rng, lin, extra):
        lin = np.asarray(lin, dtype=float)
        return lin + np.sqrt(np.exp(extra)) * rng.standard_normal(lin.shape)

    def tilted_sample(self, rng, t, lin, extra):
        return self.sample(rng, np.asarray(lin) + t * np.exp(extra), extra)


class Gamma(OutcomeFamily):
    """Shape ``kappa = exp(extra)``, scale ``lambda(x) = exp(lin)``."""

    kind = "gamma"
    n_extra = 1
    extra_name = "log_kappa"

    def validate_y(self, y):
        if np.any(np.asarray(y) <= 0):
            raise InvalidInputError("Gamma outcome must be strictly positive")

    def logpdf(self, y, lin, extra):
        kappa = np.exp(extra)
        return -gammaln(kappa) - kappa * lin + (kappa - 1) * np.log(y) - y * np.exp(-lin)

    def dlogpdf(self, y, lin, extra):
        kappa = np.exp(extra)
        return (-kappa + y * np.exp(-lin),
                kappa * (np.log(y) - lin - digamma(kappa)))

    def gamma_upper(self, lin, extra=None):
        return float(np.exp(-np.max(lin)))

    def check_tilt(self, gamma, lin, extra=None):
        prod = np.atleast_1d(gamma * np.exp(lin))
        bad = np.argwhere(~(prod < 1))
        if bad.size:
            idx = tuple(int(i) for i in bad[0])
            row = idx[-1]
            raise TiltDivergenceError(
                f"Gamma tilt diverges at row {row}: gamma*scale = {prod[idx]:.6g} >= 1",
                row=row)

    def tilt(self, gamma, lin, extra):
        self.check_tilt(gamma, lin)
        return -np.exp(extra) * np.log1p(-gamma * np.exp(lin))

    def tilt_and_grad(self, gamma, lin, extra):
        self.check_tilt(gamma, lin)
        kappa = np.exp(extra)
        lam = np.exp(lin)
        denom = 1.0 - gamma * lam
        c = -kappa * np.log1p(-gamma * lam)
        # d c / d log(kappa) = c
        return c, kappa * lam / denom, kappa * gamma * lam / denom, c

    def second_derivatives(self, y, gamma, lin, extra):
        kappa = np.exp(extra)
        lam = np.exp(lin)
        denom = 1.0 - gamma * lam
        c = -kappa * np.log1p(-gamma * lam)
        c_g = kappa * lam / denom
        c_l = kappa * gamma * lam / denom
        tilt = (kappa * lam ** 2 / denom ** 2, kappa * lam / denom ** 2, c_g,
                kappa * gamma * lam / denom ** 2, c_l, c)
        d_e = kappa * (np.log(y) - lin - digamma(kappa))
        dens = (-y / lam, -kappa + np.zeros_like(lam),
                d_e - kappa ** 2 * polygamma(1, kappa))
        return tilt, dens

    def mean(self, lin, extra):
        return np.exp(extra) * np.exp(lin)

    def sample(self, rng, lin, extra):
        lin = np.asarray(lin, dtype=float)
        return rng.gamma(np.exp(extra), np.exp(lin), size=lin.shape)

    def tilted_sample(self, rng, t, lin, extra):
        lam = np.exp(np.asarray(lin, dtype=float))
        self.check_tilt(t, np.asarray(lin, dtype=float))
        return rng.gamma(np.exp(extra), lam / (1.0 - t * lam), size=lam.shape)


FAMILIES = {"bernoulli": Bernoulli, "normal": Normal, "gamma": Gamma}


def make_family(kind: str, n_out_covariates: int) -> OutcomeFamily:
    """Family for an outcome model with an intercept plus ``n_out_covariates`` slopes."""
    try:
        cls = FAMILIES[kind.lower()]
    except KeyError:
        raise InvalidInputError(f"unknown family {kind!r}; choose from {sorted(FAMILIES)}")
    return cls(n_out_covariates + 1)


@dataclass(frozen=True)
class Theta:
    """Full parameter ``(alpha, beta, gamma, xi)``; flat layout in that order."""

    alpha: float
    beta: tuple
    gamma: float
    xi: tuple

    def __post_init__(self):
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "beta", tuple(float(b) for b in np.atleast_1d(self.beta)))
        object.__setattr__(self, "xi", tuple(float(v) for v in np.atleast_1d(self.xi)))
        if not np.all(np.isfinite(self.to_vector())):
            raise InvalidInputError("theta must be finite")

    @property
    def m(self):
        return len(self.beta)

    def to_vector(self):
        return np.concatenate([[self.alpha], self.beta, [self.gamma], self.xi])

    @classmethod
    def from_vector(cls, vec, m: int) -> "Theta":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0], vec[1:1 + m], vec[1 + m], vec[2 + m:])


def param_names(prop_names, out_names, fam: OutcomeFamily):
    return (["alpha"] + [f"beta_{c}" for c in prop_names] + ["gamma"]
            + fam.param_names(out_names))


def _out_design(x_out):
    x_out = np.atleast_1d(np.asarray(x_out, dtype=float))
    if x_out.ndim == 1:
        return np.concatenate([[1.0], x_out])
    return np.column_stack([np.ones(x_out.shape[0]), x_out])


def _lin(fam, x_out, xi):
    coef, extra = fam.split(xi)
    return _out_design(x_out) @ coef, extra


def log_density(fam: OutcomeFamily, y, x_out, xi):
    """``log f(y | x; xi)`` for outcome covariates ``x_out`` (no intercept column)."""
    fam.validate_y(y)
    lin, extra = _lin(fam, x_out, xi)
    out = fam.logpdf(np.asarray(y, dtype=float), lin, extra)
    return float(out) if np.ndim(out) == 0 else out


def tilt_c(fam: OutcomeFamily, x_out, gamma, xi):
    """Log moment generating function of ``f(. | x; xi)`` evaluated at ``gamma``."""
    lin, extra = _lin(fam, x_out, xi)
    out = fam.tilt(gamma, lin, extra)
    return float(out) if np.ndim(out) == 0 else out


def tilt_c_grad(fam: OutcomeFamily, x_out, gamma, xi):
    """Exact partials ``(dc/dgamma, dc/dxi)`` of :func:`tilt_c`.

    ``dc/dxi`` has the layout of ``xi``; for a single row it is 1-D.
    """
    lin, extra = _lin(fam, x_out, xi)
    dg, dlin, dextra = fam.tilt_grad(gamma, lin, extra)
    W = _out_design(x_out)
    dxi = np.asarray(dlin)[..., None] * W
    if fam.n_extra:
        dxi = np.concatenate([dxi, np.asarray(dextra)[..., None]], axis=-1)
    if np.ndim(dg) == 0:
        return float(dg), dxi
    return dg, dxi


def logistic_from_eta(eta):
    """``1 / (1 + exp(eta))`` with ``eta`` clamped to +-ETA_CLAMP."""
    return expit(-np.clip(eta, -ETA_CLAMP, ETA_CLAMP))


def propensity(x, theta: Theta, fam: OutcomeFamily, prop_cols, out_cols):
    """Marginal response probability ``pi(x; theta)`` for full covariate row(s) ``x``."""
    x = np.asarray(x, dtype=float)
    xr = x[..., list(prop_cols)]
    xo = x[..., list(out_cols)]
    eta = theta.alpha + xr @ np.asarray(theta.beta) + tilt_c(fam, xo, theta.gamma, theta.xi)
    out = logistic_from_eta(eta)
    return float(out) if np.ndim(out) == 0 else out


def residual_H(pi, r):
    """Squared-residual discrepancy ``(r - pi)^2 - pi (1 - pi)``."""
    return (r - pi) ** 2 - pi * (1 - pi)


def gamma_feasible_range(fam: OutcomeFamily, data, xi):
    """Open interval of gamma for which the tilt is finite at every row of ``data``."""
    coef, extra = fam.split(xi)
    lin = data.outcome_design @ coef
    return -np.inf, fam.gamma_upper(lin, extra)


class RowTerms(NamedTuple):
    eta: np.ndarray
    pi: np.ndarray
    logf: Optional[np.ndarray]
    dlogf_lin: Optional[np.ndarray]
    dlogf_extra: Optional[np.ndarray]
    dc_gamma: Optional[np.ndarray]
    dc_lin: Optional[np.ndarray]
    dc_extra: Optional[np.ndarray]


class Design:
    """Dataset arrays prepared for repeated likelihood evaluation.

    Rows are stored in canonical content order so that every sum is
    independent of the order in which the rows were supplied.
    """

    def __init__(self, data, fam: OutcomeFamily, canonical=True):
        order = data.canonical_order() if canonical else np.arange(data.n)
        y = data.y[order]
        obs = data.r[order] == 1
        if obs.any():
            fam.validate_y(y[obs])
        self._set(data.prop_design[order], data.outcome_design[order], obs, y, fam)
        self.order = order

    @classmethod
    def from_arrays(cls, Xr, W, r, y, fam: OutcomeFamily) -> "Design":
        """Build without validation or reordering (internal fast path)."""
        self = cls.__new__(cls)
        self._set(Xr, W, np.asarray(r) == 1, y, fam)
        self.order = np.arange(len(r))
        return self

    def _set(self, Xr, W, obs, y, fam):
        self.fam = fam
        self.Xr = Xr
        self.W = W
        self.n, self.m = Xr.shape
        if W.shape[1] != fam.n_coef:
            raise InvalidInputError(
                f"family expects {fam.n_coef - 1} outcome covariates, dataset has "
                f"{W.shape[1] - 1}")
        self.obs = obs
        self.r = obs.astype(float)
        # placeholder outcome where missing; contributions there are multiplied by r = 0
        self.y = np.where(obs, y, 1.0)
        self.dim = self.m + 2 + fam.n_params

    def unpack(self, thetas):
        thetas = np.asarray(thetas, dtype=float)
        m, q = self.m, self.fam.n_coef
        alpha = thetas[..., 0:1]
        beta = thetas[..., 1:1 + m]
        gamma = thetas[..., 1 + m:2 + m]
        coef = thetas[..., 2 + m:2 + m + q]
        extra = thetas[..., 2 + m + q:2 + m + q + 1] if self.fam.n_extra else None
        return alpha, beta, gamma, coef, extra

    def gamma_upper(self, thetas):
        """Per-theta supremum of feasible gamma (shape of the batch)."""
        _, _, _, coef, _ = self.unpack(thetas)
        if self.fam.kind != "gamma":
            return np.full(np.shape(thetas)[:-1], np.inf)
        lin_max = np.max(coef @ self.W.T, axis=-1)
        return np.exp(-lin_max)

    def feasible(self, theta):
        theta = np.asarray(theta, dtype=float)
        if not np.all(np.isfinite(theta)):
            return False
        return bool(theta[1 + self.m] < self.gamma_upper(theta))

    def terms(self, thetas, grad=True, loglik=False) -> RowTerms:
        """Per-row quantities for a batch of parameter vectors (shape (..., dim))."""
        fam = self.fam
        alpha, beta, gamma, coef, extra = self.unpack(thetas)
        lin = coef @ self.W.T
        if grad:
            c, dc_gamma, dc_lin, dc_extra = fam.tilt_and_grad(gamma, lin, extra)
        else:
            c = fam.tilt(gamma, lin, extra)
            dc_gamma = dc_lin = dc_extra = None
        eta = alpha + beta @ self.Xr.T + c
        pi = logistic_from_eta(eta)
        logf = dlin = dextra = None
        if loglik:
            logf = fam.logpdf(self.y, lin, extra)
        if grad:
            dlin, dextra = fam.dlogpdf(self.y, lin, extra)
        return RowTerms(eta, pi, logf, dlin, dextra, dc_gamma, dc_lin, dc_extra)
