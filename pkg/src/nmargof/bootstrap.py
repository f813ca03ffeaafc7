"""Parametric bootstrap calibration of the goodness-of-fit statistic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .errors import ConvergenceError, InvalidInputError, UnstableBootstrapError
from .estimation import FitOptions, FitResult, fit_design
from .gof import GofReport, _pi, gof_design, tn_design
from .model import Design, OutcomeFamily
from .rng import generator

DEFAULT_B = 500


@dataclass
class BootstrapResult:
    t_star: np.ndarray
    n_failed: int
    q_star: float
    boot_p: float
    sigma2_boot_diag: Optional[float]
    reject: bool
    B: int
    level: float
    t_n: float


class _Resampler:
    """Draws bootstrap designs from the fitted null model."""

    def __init__(self, design: Design, theta):
        self.design = design
        self.theta = np.asarray(theta, dtype=float)
        _, _, _, coef, extra = design.unpack(self.theta)
        self.lin = design.W @ coef
        self.extra = None if extra is None else extra[0]
        self.pi = _pi(design, self.theta)

    def draw(self, rng):
        d = self.design
        n = d.n
        idx = rng.integers(0, n, size=n)
        r = (rng.random(n) < self.pi[idx]).astype(np.int8)
        # outcomes drawn for every row keep the stream layout independent of r
        y = d.fam.sample(rng, self.lin[idx], self.extra)
        return idx, r, np.where(r == 1, y, np.nan)

    def draw_design(self, rng) -> Design:
        idx, r, y = self.draw(rng)
        d = self.design
        return Design.from_arrays(d.Xr[idx], d.W[idx], r, y, d.fam)


def bootstrap_sample(data: Dataset, fit: FitResult, fam: OutcomeFamily, rng) -> Dataset:
    """One dataset from the fitted null: resampled covariates, then ``R*`` and ``Y*``."""
    if not fit.converged:
        raise ConvergenceError("bootstrap sampling requires a converged fit")
    design = Design(data, fam, canonical=False)
    idx, r, y = _Resampler(design, fit.theta_vector).draw(rng)
    return Dataset(data.X[idx], y, r, data.prop_cols, data.out_cols, data.names)


def _replicate(resampler: _Resampler, opts: FitOptions, seed, b):
    boot = resampler.draw_design(generator(seed, "bootstrap", b))
    try:
        fit = fit_design(boot, opts, start=resampler.theta, compute_info=False)
    except (ArithmeticError, ValueError, RuntimeError):
        return np.nan
    if not fit.converged:
        return np.nan
    return tn_design(boot, fit.theta_vector)


def _replicate_range(resampler, opts, seed, bs):
    return [_replicate(resampler, opts, seed, b) for b in bs]


def bootstrap_statistics(design: Design, theta, B: int, seed, opts: FitOptions = FitOptions(),
                         n_jobs: int = 1):
    """``T*_b`` for ``b = 0..B-1`` (nan where the refit failed), in index order."""
    resampler = _Resampler(design, theta)
    if n_jobs == 1:
        return np.array(_replicate_range(resampler, opts, seed, range(B)), dtype=float)
    from joblib import Parallel, delayed

    chunks = np.array_split(np.arange(B), max(1, min(B, 4 * abs(n_jobs))))
    parts = Parallel(n_jobs=n_jobs)(
        delayed(_replicate_range)(resampler, opts, seed, c.tolist()) for c in chunks if c.size)
    return np.array([t for part in parts for t in part], dtype=float)


def quantile_index(level: float, B: int) -> int:
    """1-based order statistic used as the bootstrap critical value."""
    return math.ceil((1 - level) * (B + 1) - 1e-9)


def summarize(t_n: float, t_star_all, level: float, B: Optional[int] = None,
              max_failed_fraction: float = 0.1) -> BootstrapResult:
    """Critical value, p-value and decision from raw bootstrap statistics."""
    t_star_all = np.asarray(t_star_all, dtype=float)
    B = t_star_all.size if B is None else B
    t_star = t_star_all[np.isfinite(t_star_all)]
    n_failed = int(t_star_all.size - t_star.size)
    if n_failed > max_failed_fraction * B:
        raise UnstableBootstrapError(
            f"{n_failed} of {B} bootstrap refits failed", n_failed=n_failed, B=B)
    if t_star.size == 0:
        raise UnstableBootstrapError("no usable bootstrap replicates", n_failed=n_failed, B=B)
    abs_star = np.sort(np.abs(t_star))
    b_eff = abs_star.size
    k = quantile_index(level, b_eff)
    q = abs_star[k - 1] if k <= b_eff else abs_star[-1]
    p = (1 + np.count_nonzero(abs_star >= abs(t_n))) / (b_eff + 1)
    var = float(np.var(t_star, ddof=1)) if b_eff >= 2 else None
    return BootstrapResult(t_star, n_failed, float(q), float(p), var, bool(abs(t_n) > q),
                           B, level, float(t_n))


def bootstrap_design(design: Design, level=0.05, B=DEFAULT_B, seed=0,
                     opts: FitOptions = FitOptions(), n_jobs=1,
                     report: Optional[GofReport] = None):
    if B < 1:
        raise InvalidInputError("B must be at least 1")
    if not 0 < level < 1:
        raise InvalidInputError("level must lie in (0, 1)")
    if report is None:
        report = gof_design(design, level, opts)
    if not report.fit.converged:
        raise ConvergenceError(f"MLE did not converge: {report.fit.message}")
    t_star = bootstrap_statistics(design, report.fit.theta_vector, B, seed, opts, n_jobs)
    return report, summarize(report.t_n, t_star, level, B)


def bootstrap_test(data: Dataset, fam: OutcomeFamily, a: float = 0.05, B: int = DEFAULT_B,
                   seed=0, opts: FitOptions = FitOptions(), n_jobs: int = 1):
    """Parametric-bootstrap goodness-of-fit test.

    Parameters
    ----------
    data : Dataset
    fam : OutcomeFamily
    a : float
        Significance level.
    B : int
        Number of bootstrap replicates.
    seed : int or numpy.random.SeedSequence
        Replicate ``b`` draws from the child stream ``(seed, "bootstrap", b)``,
        so results do not depend on ``n_jobs`` and enlarging ``B`` keeps the
        earlier replicates.
    n_jobs : int
        Worker processes for the replicate loop.

    Returns
    -------
    (GofReport, BootstrapResult)
        The report also carries the plug-in test at level ``a``.
    """
    return bootstrap_design(Design(data, fam), a, B, seed, opts, n_jobs)


def boot_null_variance_diag(result: BootstrapResult) -> float:
    """Sample variance of the finite bootstrap statistics."""
    if result.t_star.size < 2:
        raise InvalidInputError("need at least two bootstrap statistics")
    return float(np.var(result.t_star, ddof=1))
