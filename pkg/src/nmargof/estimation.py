"""Full-likelihood estimation of the propensity and outcome parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .errors import DegenerateDesignError, InitializationError, InvalidInputError
from .model import ETA_CLAMP, Design, OutcomeFamily, Theta, _softplus, logistic_from_eta


@dataclass(frozen=True)
class FitOptions:
    tol_grad: float = 1e-6
    tol_loglik: float = 1e-10
    max_iter: int = 200
    max_halvings: int = 60
    rcond_min: float = 1e-12
    # Newton-step curvature: "analytic", or "fd" (central differences of the score).
    # The reported information matrix always uses "fd".
    hessian: str = "analytic"


@dataclass
class FitResult:
    theta_hat: Theta
    loglik: float
    score_inf_norm: float
    info_matrix: Optional[np.ndarray]
    cov: Optional[np.ndarray]
    se: Optional[np.ndarray]
    converged: bool
    iterations: int
    n: int
    loglik_init: float = np.nan
    ill_conditioned: bool = False
    hessian_evals: int = 0
    message: str = ""
    free: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def theta_vector(self):
        return self.theta_hat.to_vector()


def _as_batch(thetas):
    thetas = np.asarray(thetas, dtype=float)
    return thetas[None, :] if thetas.ndim == 1 else thetas, thetas.ndim == 1


def loglik_terms(design: Design, thetas):
    """Per-row log-likelihood contributions, shape (..., n)."""
    t = design.terms(thetas, grad=False, loglik=True)
    eta = np.clip(t.eta, -ETA_CLAMP, ETA_CLAMP)
    sp = _softplus(eta)
    r = design.r
    return r * t.logf - r * sp + (1 - r) * (eta - sp)


def loglik_design(design: Design, thetas):
    return loglik_terms(design, thetas).sum(axis=-1)


def score_design(design: Design, thetas):
    """Summed score for one parameter vector or a batch of shape (K, dim)."""
    batch, single = _as_batch(thetas)
    t = design.terms(batch)
    r = design.r
    res = t.pi - r
    parts = [res.sum(-1, keepdims=True), res @ design.Xr,
             (res * t.dc_gamma).sum(-1, keepdims=True),
             (r * t.dlogf_lin + res * t.dc_lin) @ design.W]
    if design.fam.n_extra:
        parts.append((r * t.dlogf_extra + res * t.dc_extra).sum(-1, keepdims=True))
    out = np.concatenate(parts, axis=-1)
    return out[0] if single else out


def _eta_jacobian(design: Design, theta):
    """Row terms at one theta plus ``u = d eta / d theta`` (n, dim)."""
    theta = np.asarray(theta, dtype=float)
    fam = design.fam
    m, q = design.m, fam.n_coef
    _, _, gamma, coef, extra = design.unpack(theta)
    lin = design.W @ coef
    ext = None if extra is None else extra[0]
    c, c_g, c_l, c_e = fam.tilt_and_grad(gamma[0], lin, ext)
    eta = theta[0] + design.Xr @ theta[1:1 + m] + c
    u = np.empty((design.n, design.dim))
    u[:, 0] = 1.0
    u[:, 1:1 + m] = design.Xr
    u[:, 1 + m] = c_g
    u[:, 2 + m:2 + m + q] = c_l[:, None] * design.W
    if fam.n_extra:
        u[:, -1] = c_e
    return gamma[0], lin, ext, eta, u


def psi_matrix(design: Design, theta):
    """Per-row score vectors, shape (n, dim)."""
    fam = design.fam
    m, q = design.m, fam.n_coef
    _, lin, ext, eta, u = _eta_jacobian(design, theta)
    r = design.r
    res = logistic_from_eta(eta) - r
    psi = res[:, None] * u
    f_l, f_e = fam.dlogpdf(design.y, lin, ext)
    psi[:, 2 + m:2 + m + q] += (r * f_l)[:, None] * design.W
    if fam.n_extra:
        psi[:, -1] += r * f_e
    return psi


def score_hessian_design(design: Design, theta):
    """Summed score and analytic Hessian at a single parameter vector."""
    fam = design.fam
    m, q = design.m, fam.n_coef
    gamma, lin, ext, eta, u = _eta_jacobian(design, theta)
    r = design.r
    pi = logistic_from_eta(eta)
    res = pi - r
    v = pi * (1 - pi)
    f_l, f_e = fam.dlogpdf(design.y, lin, ext)
    (c_gg, c_gl, c_ge, c_ll, c_le, c_ee), (f_ll, f_le, f_ee) = fam.second_derivatives(
        design.y, gamma, lin, ext)
    W = design.W
    gi = 1 + m
    cs = slice(2 + m, 2 + m + q)

    g = u.T @ res
    g[cs] += W.T @ (r * f_l)
    H = -(u * v[:, None]).T @ u
    H[gi, gi] += np.sum(res * c_gg)
    k_gl = W.T @ (res * c_gl)
    H[gi, cs] += k_gl
    H[cs, gi] += k_gl
    H[cs, cs] += W.T @ ((res * c_ll + r * f_ll)[:, None] * W)
    if fam.n_extra:
        g[-1] += np.sum(r * f_e)
        k_ge = np.sum(res * c_ge)
        H[gi, -1] += k_ge
        H[-1, gi] += k_ge
        k_le = W.T @ (res * c_le + r * f_le)
        H[cs, -1] += k_le
        H[-1, cs] += k_le
        H[-1, -1] += np.sum(res * c_ee + r * f_ee)
    return g, 0.5 * (H + H.T)


def fd_steps(theta):
    return 1e-5 * (1.0 + np.abs(theta))


def fd_hessian(design: Design, theta, free=None):
    """Central differences of the analytic score, symmetrised, over the free coordinates."""
    theta = np.asarray(theta, dtype=float)
    dim = theta.size
    idx = np.arange(dim) if free is None else np.flatnonzero(free)
    h = fd_steps(theta)[idx]
    k = idx.size
    pert = np.tile(theta, (2 * k, 1))
    pert[np.arange(k), idx] += h
    pert[k + np.arange(k), idx] -= h
    g_idx = 1 + design.m
    # keep perturbed gamma inside the feasible region
    upper = design.gamma_upper(pert)
    for j in np.flatnonzero(pert[:, g_idx] >= upper):
        col = j % k
        while pert[j, g_idx] >= design.gamma_upper(pert[j]):
            h[col] *= 0.5
            pert[col, idx[col]] = theta[idx[col]] + h[col]
            pert[k + col, idx[col]] = theta[idx[col]] - h[col]
    S = score_design(design, pert)[:, idx]
    H = (S[:k] - S[k:]).T / (2 * h)
    return 0.5 * (H + H.T)


def log_likelihood(data, theta: Theta, fam: OutcomeFamily):
    """Full observed-data log-likelihood."""
    design = Design(data, fam)
    return float(loglik_design(design, theta.to_vector()))


def score(data, theta: Theta, fam: OutcomeFamily):
    """Analytic gradient of :func:`log_likelihood`, layout of ``Theta.to_vector``."""
    design = Design(data, fam)
    return score_design(design, theta.to_vector())


def _check_design(design: Design):
    n_obs = design.r.sum()
    if n_obs == 0 or n_obs == design.n:
        raise DegenerateDesignError(
            "both respondents and nonrespondents are required", n_observed=int(n_obs))
    if design.n < design.dim:
        raise DegenerateDesignError(f"n={design.n} is below the parameter count {design.dim}")


def _newton_generic(fun, grad, x0, tol=1e-9, max_iter=100):
    """Small damped Newton maximiser with a finite-difference Hessian of ``grad``."""
    x = np.asarray(x0, dtype=float).copy()
    f = fun(x)
    for _ in range(max_iter):
        g = grad(x)
        if np.max(np.abs(g)) <= tol:
            break
        h = fd_steps(x)
        H = np.empty((x.size, x.size))
        for j in range(x.size):
            e = np.zeros_like(x)
            e[j] = h[j]
            H[:, j] = (grad(x + e) - grad(x - e)) / (2 * h[j])
        H = 0.5 * (H + H.T)
        try:
            d = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError:
            d = g
        if not g @ d > 0:
            d = g / max(1.0, np.abs(np.diag(H)).max())
        step = 1.0
        for _ in range(60):
            x_new = x + step * d
            f_new = fun(x_new)
            if np.isfinite(f_new) and f_new >= f - 1e-12 * (1 + abs(f)):
                break
            step *= 0.5
        else:
            break
        if abs(f_new - f) <= 1e-13 * (1 + abs(f)) and step < 1:
            x, f = x_new, f_new
            break
        x, f = x_new, f_new
    return x


def logistic_fit(Z, z, tol=1e-10):
    """Maximum-likelihood logistic regression of binary ``z`` on design ``Z``."""
    def fun(b):
        lin = Z @ b
        return float(np.sum(z * lin - _softplus(lin)))

    def grad(b):
        return Z.T @ (z - expit(Z @ b))

    return _newton_generic(fun, grad, np.zeros(Z.shape[1]), tol=tol)


def complete_case_outcome_fit(design: Design, tol=1e-9):
    """Maximise ``sum_{r=1} log f(y | x; xi)`` over ``xi``."""
    fam = design.fam
    W = design.W[design.obs]
    y = design.y[design.obs]
    coef0, *_ = np.linalg.lstsq(W, y if fam.kind != "gamma" else np.log(y), rcond=None)
    if fam.kind == "normal":
        resid = y - W @ coef0
        return np.concatenate([coef0, [np.log(max(np.mean(resid ** 2), 1e-300))]])
    if fam.kind == "bernoulli":
        return logistic_fit(W, y, tol=tol)
    x0 = np.concatenate([coef0, [0.0]])

    def fun(xi):
        lin = W @ xi[:-1]
        return float(np.sum(fam.logpdf(y, lin, xi[-1])))

    def grad(xi):
        lin = W @ xi[:-1]
        dl, de = fam.dlogpdf(y, lin, xi[-1])
        return np.concatenate([W.T @ dl, [de.sum()]])

    return _newton_generic(fun, grad, x0, tol=tol)


def initial_theta(design: Design):
    """Three-stage start: outcome MLE, MAR propensity logistic fit, gamma = 0."""
    xi0 = complete_case_outcome_fit(design)
    Z = np.column_stack([np.ones(design.n), design.Xr])
    ab = logistic_fit(Z, 1.0 - design.r)
    return np.concatenate([ab[:1], ab[1:], [0.0], xi0])


def _ascent_direction(A, g, rcond_min):
    """Newton direction for negative-Hessian ``A``; falls back to the gradient."""
    if not np.all(np.isfinite(A)):
        return g / max(1.0, np.abs(g).max()), True
    w, V = np.linalg.eigh(A)
    wmax = np.max(np.abs(w))
    if wmax == 0 or np.min(np.abs(w)) < rcond_min * wmax:
        return g / max(wmax, 1.0), True
    if w.min() <= 0:
        # indefinite: reflect negative curvature so the step ascends
        w = np.maximum(np.abs(w), 1e-8 * wmax)
    return V @ ((V.T @ g) / w), False


def fit_design(design: Design, opts: FitOptions = FitOptions(), start=None,
               fix_gamma: Optional[float] = None, compute_info: bool = True) -> FitResult:
    _check_design(design)
    dim = design.dim
    g_idx = 1 + design.m
    free = np.ones(dim, dtype=bool)
    theta = initial_theta(design) if start is None else np.array(start, dtype=float)
    if theta.shape != (dim,):
        raise InvalidInputError(f"start must have length {dim}")
    if fix_gamma is not None:
        free[g_idx] = False
        theta[g_idx] = fix_gamma
    upper = design.gamma_upper(theta)
    if theta[g_idx] >= upper and free[g_idx]:
        theta[g_idx] = min(0.0, 0.9 * upper) if upper > 0 else 0.0
    if not design.feasible(theta):
        raise InitializationError("starting gamma is outside the feasible range")
    ll = float(loglik_design(design, theta))
    if not np.isfinite(ll):
        raise InitializationError("log-likelihood is not finite at the starting value")
    ll_init = ll

    use_fd = opts.hessian == "fd"
    n_hess = 0
    ill = False
    small = 0
    it = 0
    message = ""
    while True:
        if use_fd:
            g = score_design(design, theta)
            H = fd_hessian(design, theta, free)
        else:
            g, H = score_hessian_design(design, theta)
            H = H[np.ix_(free, free)]
        g[~free] = 0.0
        gnorm = np.max(np.abs(g))
        if gnorm <= opts.tol_grad or it >= opts.max_iter:
            break
        n_hess += 1
        it += 1
        d_free, used_grad = _ascent_direction(-H, g[free], opts.rcond_min)
        ill = ill or used_grad
        d = np.zeros(dim)
        d[free] = d_free
        step = 1.0
        accepted = False
        slope = g @ d
        for _ in range(opts.max_halvings):
            trial = theta + step * d
            # long trial steps may overflow; they are rejected below as non-finite
            with np.errstate(over="ignore", invalid="ignore"):
                feasible = design.feasible(trial)
                ll_t = float(loglik_design(design, trial)) if feasible else np.nan
            if feasible:
                if used_grad:
                    ok = ll_t >= ll + 1e-4 * step * slope
                else:
                    ok = ll_t >= ll - 1e-12 * (1.0 + abs(ll))
                if np.isfinite(ll_t) and ok:
                    accepted = True
                    break
            step *= 0.5
        if not accepted:
            message = "line search failed"
            break
        dll = ll_t - ll
        theta, ll = trial, ll_t
        if abs(dll) <= opts.tol_loglik:
            small += 1
            if small >= 3:
                g = score_design(design, theta)
                g[~free] = 0.0
                message = "log-likelihood change below tolerance"
                break
        else:
            small = 0
    gnorm = float(np.max(np.abs(g)))
    converged = gnorm <= opts.tol_grad
    if not converged and not message:
        message = "iteration limit reached"

    info = cov = se = None
    if compute_info:
        Hf = fd_hessian(design, theta, free)
        n_hess += 1
        info = np.zeros((dim, dim))
        info[np.ix_(free, free)] = -Hf / design.n
        cov = np.full((dim, dim), np.nan)
        se = np.full(dim, np.nan)
        w = np.linalg.eigvalsh(info[np.ix_(free, free)])
        if w.min() > opts.rcond_min * max(abs(w).max(), 1e-300):
            cf = np.linalg.inv(info[np.ix_(free, free)]) / design.n
            cf = 0.5 * (cf + cf.T)
            cov[np.ix_(free, free)] = cf
            se[free] = np.sqrt(np.maximum(np.diag(cf), 0.0))
        else:
            ill = True
    return FitResult(Theta.from_vector(theta, design.m), ll, gnorm, info, cov, se,
                     converged, it, design.n, ll_init, ill, n_hess, message, free)


def fit_mle(data, fam: OutcomeFamily, opts: FitOptions = FitOptions(), start=None,
            fix_gamma: Optional[float] = None, compute_info: bool = True) -> FitResult:
    """Maximise the full log-likelihood by damped Newton.

    Parameters
    ----------
    data : Dataset
    fam : OutcomeFamily
    opts : FitOptions
    start : array_like or Theta, optional
        Starting value; defaults to the staged initialisation.
    fix_gamma : float, optional
        Hold gamma at this value and maximise over the remaining parameters.
    compute_info : bool
        Evaluate the observed information and standard errors at the optimum.

    Returns
    -------
    FitResult
    """
    if isinstance(start, Theta):
        start = start.to_vector()
    design = Design(data, fam)
    return fit_design(design, opts, start, fix_gamma, compute_info)
