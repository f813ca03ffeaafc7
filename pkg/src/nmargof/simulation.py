"""Monte-Carlo scenarios with nonignorable missingness and the rejection-rate harness."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .data import Dataset
from .errors import InvalidInputError, ScenarioInfeasibleError, StudyFailureError
from .model import Bernoulli, Gamma, Normal, OutcomeFamily, Theta

PROP_COLS = (0, 1)
OUT_COLS = (0, 1, 2)
COVARIATE_NAMES = ("x1", "x2", "x3")
SCENARIO_IDS = ("I", "II", "III", "IV", "V")


def _zero(X):
    return np.zeros(X.shape[0])


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation design: true propensity plus the respondents' outcome law.

    The true propensity is ``1 / (1 + exp(alpha + beta1 x1 + beta2 x2 + gamma y
    + e(x) + g(x) y))``; the outcome among respondents follows ``outcome`` with
    parameters ``xi``.
    """

    example: int
    scenario: str
    alpha: float
    beta1: float
    beta2: float
    gamma: float
    outcome: OutcomeFamily
    xi: tuple
    e_fn: Callable = _zero
    g_fn: Callable = _zero
    e_label: str = "0"
    g_label: str = "0"
    kappa: Optional[float] = None

    @property
    def name(self):
        return f"example{self.example}-{self.scenario}"

    @property
    def is_null(self):
        return self.e_label == "0" and self.g_label == "0"

    @property
    def theta_true(self) -> Theta:
        return Theta(self.alpha, (self.beta1, self.beta2), self.gamma, self.xi)

    def to_dict(self):
        return {"example": self.example, "scenario": self.scenario,
                "alpha": self.alpha, "beta1": self.beta1, "beta2": self.beta2,
                "gamma": self.gamma, "e": self.e_label, "g": self.g_label,
                "family": self.outcome.kind, "xi": list(self.xi), "kappa": self.kappa}


_E = {
    "0": _zero,
    "0.5x1^2": lambda X: 0.5 * X[:, 0] ** 2,
    "0.5x1^2 + 0.5x1^2 x2": lambda X: 0.5 * X[:, 0] ** 2 + 0.5 * X[:, 0] ** 2 * X[:, 1],
    "0.5x1^2 + x1^2 x2": lambda X: 0.5 * X[:, 0] ** 2 + X[:, 0] ** 2 * X[:, 1],
    "0.5 - 0.1exp(-0.5x1^2)": lambda X: 0.5 - 0.1 * np.exp(-0.5 * X[:, 0] ** 2),
    "0.5 - 0.1exp(-x1^2 + x2)": lambda X: 0.5 - 0.1 * np.exp(-X[:, 0] ** 2 + X[:, 1]),
}

# (alpha, beta1, beta2, gamma), e(x), g(x) per example and scenario
_TABLE = {
    1: {
        "I": ((-1.1, -1.5, -1.5, -0.5), "0", "0"),
        "II": ((-1.6, -2.0, -2.0, -0.5), "0.5x1^2", "0"),
        "III": ((-1.6, -1.5, -2.0, -0.5), "0.5x1^2 + 0.5x1^2 x2", "0"),
        "IV": ((-1.0, 1.0, -2.5, -0.5), "0", "0.5x1^2"),
        "V": ((-1.0, -1.0, -2.5, -0.5), "0", "0.5x1^2 + x1^2 x2"),
    },
    2: {
        "I": ((-1.0, 2.0, -1.0, -0.5), "0", "0"),
        "II": ((-1.0, 1.2, -1.0, -0.5), "0.5x1^2", "0"),
        "III": ((-1.0, 1.3, -1.5, -0.5), "0.5x1^2 + 0.5x1^2 x2", "0"),
        "IV": ((-5.0, 1.0, 1.0, -0.5), "0", "0.5x1^2"),
        "V": ((-3.5, 3.0, -2.0, -0.5), "0", "0.5x1^2 + x1^2 x2"),
    },
    3: {
        "I": ((1.0, -1.5, -1.5, -0.5), "0", "0"),
        "II": ((1.0, -1.5, -2.8, -0.5), "0.5x1^2", "0"),
        "III": ((1.0, -1.1, -3.5, -0.5), "0.5x1^2 + 0.5x1^2 x2", "0"),
        "IV": ((1.0, -1.0, -2.0, -0.5), "0", "0.5 - 0.1exp(-0.5x1^2)"),
        "V": ((1.0, -1.0, -2.0, -0.5), "0", "0.5 - 0.1exp(-x1^2 + x2)"),
    },
}


def get_scenario(example: int, scenario: str) -> ScenarioSpec:
    """Registry lookup for the built-in designs (examples 1-3, scenarios I-V)."""
    scenario = str(scenario).upper()
    try:
        (alpha, b1, b2, gamma), e_label, g_label = _TABLE[int(example)][scenario]
    except (KeyError, ValueError):
        raise InvalidInputError(f"unknown scenario example={example!r} scenario={scenario!r}")
    example = int(example)
    kappa = None
    if example == 1:
        fam, xi = Bernoulli(4), (1.0, -1.0, -1.0, 2.0)
    elif example == 2:
        fam, xi = Normal(4), (1.0, -1.5, -1.5, 3.0, 0.0)
    else:
        kappa = 1.0 if scenario in ("I", "II", "III") else math.e
        fam, xi = Gamma(4), (1.0, -1.5, -1.5, 2.0, math.log(kappa))
    return ScenarioSpec(example, scenario, alpha, b1, b2, gamma, fam, xi,
                        _E[e_label], _E[g_label], e_label, g_label, kappa)


def all_scenarios():
    return [get_scenario(ex, sc) for ex in (1, 2, 3) for sc in SCENARIO_IDS]


def draw_covariates(n: int, rng) -> np.ndarray:
    """Independent ``x1 ~ N(0,1)``, ``x2 ~ Bernoulli(0.5)``, ``x3 ~ N(1,1)``."""
    if n < 1:
        raise InvalidInputError("n must be positive")
    x1 = rng.standard_normal(n)
    x2 = (rng.random(n) < 0.5).astype(float)
    x3 = 1.0 + rng.standard_normal(n)
    return np.column_stack([x1, x2, x3])


def _index_and_tilt(spec: ScenarioSpec, X):
    a = spec.alpha + spec.beta1 * X[:, 0] + spec.beta2 * X[:, 1] + spec.e_fn(X)
    t = spec.gamma + spec.g_fn(X)
    return a, t


def response_probability(spec: ScenarioSpec, X):
    """``Pr(R = 1 | x) = 1 / Z(x)`` under the true mechanism."""
    a, t = _index_and_tilt(spec, X)
    fam = spec.outcome
    coef, extra = fam.split(spec.xi)
    lin = np.column_stack([np.ones(len(X)), X[:, list(OUT_COLS)]]) @ coef
    _check_feasible(fam, t, lin)
    return expit(-(a + fam.tilt(t, lin, extra)))


def _check_feasible(fam, t, lin):
    if fam.kind == "gamma":
        prod = t * np.exp(lin)
        bad = np.flatnonzero(~(prod < 1))
        if bad.size:
            raise ScenarioInfeasibleError(
                f"outcome tilt diverges at row {bad[0]}", row=int(bad[0]))


def draw_joint_given_x(spec: ScenarioSpec, X, rng):
    """Draw ``(y, r)`` given covariates under the true mechanism of ``spec``.

    ``Y | x`` is the two-component mixture of the respondent law and its
    ``t(x)``-tilted version, with weights ``1/Z`` and ``exp(a) M(t)/Z``;
    then ``R | Y = y`` is Bernoulli with the true propensity.
    """
    fam = spec.outcome
    coef, extra = fam.split(spec.xi)
    n = X.shape[0]
    lin = np.column_stack([np.ones(n), X[:, list(OUT_COLS)]]) @ coef
    a, t = _index_and_tilt(spec, X)
    _check_feasible(fam, t, lin)
    log_m = fam.tilt(t, lin, extra)
    p_plain = expit(-(a + log_m))
    plain = rng.random(n) < p_plain
    y_plain = fam.sample(rng, lin, extra)
    y_tilt = fam.tilted_sample(rng, t, lin, extra)
    y = np.where(plain, y_plain, y_tilt)
    pi_t = expit(-(a + t * y))
    r = (rng.random(n) < pi_t).astype(np.int8)
    return y, r


def draw_joint(spec: ScenarioSpec, n: int, rng) -> Dataset:
    """Simulated dataset of size ``n``; outcomes of nonrespondents are discarded."""
    X = draw_covariates(n, rng)
    y, r = draw_joint_given_x(spec, X, rng)
    y = np.where(r == 1, y, np.nan)
    return Dataset(X, y, r, PROP_COLS, OUT_COLS, COVARIATE_NAMES)


@dataclass
class RejectionSummary:
    scenario: ScenarioSpec
    n: int
    reps: int
    B: int
    level: float
    seed: int
    boot_rate: float
    plugin_rate: float
    n_failed_reps: int
    records: list = field(default_factory=list, repr=False)
    runtime: float = float("nan")

    @property
    def n_ok(self):
        return self.reps - self.n_failed_reps

    @property
    def mc_se(self):
        return math.sqrt(self.boot_rate * (1 - self.boot_rate) / max(self.n_ok, 1))

    @property
    def plugin_mc_se(self):
        return math.sqrt(self.plugin_rate * (1 - self.plugin_rate) / max(self.n_ok, 1))

    def column(self, key):
        return np.array([rec[key] for rec in self.records if rec["ok"]], dtype=float)

    def to_dict(self):
        """JSON-ready summary; wall-clock runtime is left out so output is reproducible."""
        return {"schema": "nmar-gof-sim/1", "scenario": self.scenario.to_dict(), "n": self.n,
                "reps": self.reps, "B": self.B, "level": self.level, "seed": self.seed,
                "boot_rate": self.boot_rate, "plugin_rate": self.plugin_rate,
                "mc_se": self.mc_se, "plugin_mc_se": self.plugin_mc_se,
                "n_failed_reps": self.n_failed_reps, "replications": self.records}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def format_table(summaries):
    """Plain-text rejection-rate table: rows (example, n, method), columns scenarios."""
    groups = {}
    for s in summaries:
        groups.setdefault((s.scenario.example, s.n), {})[s.scenario.scenario] = s
    lines = [f"{'Example':>7} {'n':>6} {'Method':>9} " + " ".join(f"{sc:>6}" for sc in SCENARIO_IDS)]
    for (ex, n) in sorted(groups):
        row = groups[(ex, n)]
        for method, attr in (("Bootstrap", "boot_rate"), ("Plug-in", "plugin_rate")):
            cells = [f"{getattr(row[sc], attr):6.3f}" if sc in row else f"{'-':>6}"
                     for sc in SCENARIO_IDS]
            lines.append(f"{ex:>7} {n:>6} {method:>9} " + " ".join(cells))
    return "\n".join(lines) + "\n"


def run_replication(spec: ScenarioSpec, n: int, B: int, level: float, seed, i: int,
                    opts=None):
    """One simulated dataset, both tests; returns a flat record."""
    from .bootstrap import bootstrap_design
    from .errors import NmarGofError
    from .estimation import FitOptions
    from .model import Design
    from .rng import generator, seed_sequence

    opts = opts or FitOptions()
    rec = {"rep": i, "ok": False, "t_n": None, "sigma_hat": None, "plugin_p": None,
           "plugin_reject": None, "boot_p": None, "boot_reject": None, "q_star": None,
           "boot_var": None, "boot_failed": None, "error": None}
    try:
        data = draw_joint(spec, n, generator(seed, "simulation", i))
        report, boot = bootstrap_design(Design(data, spec.outcome), level, B,
                                        seed_sequence(seed, "simulation", i), opts)
        if report.sigma_hat is None:
            raise NmarGofError("plug-in variance unavailable")
    except NmarGofError as exc:
        rec["error"] = exc.code
        return rec
    rec.update(ok=True, t_n=report.t_n, sigma_hat=report.sigma_hat,
               plugin_p=report.plugin_p, plugin_reject=report.plugin_reject,
               boot_p=boot.boot_p, boot_reject=boot.reject, q_star=boot.q_star,
               boot_var=boot.sigma2_boot_diag, boot_failed=boot.n_failed)
    return rec


def _replication_range(spec, n, B, level, seed, idx, opts):
    return [run_replication(spec, n, B, level, seed, i, opts) for i in idx]


def run_study(spec: ScenarioSpec, n: int, reps: int, B: int = 200, a: float = 0.05,
              seed: int = 0, n_jobs: int = 1, opts=None,
              max_failed_fraction: float = 0.1) -> RejectionSummary:
    """Rejection rates of the bootstrap and plug-in tests over ``reps`` simulated datasets.

    Replication ``i`` uses the stream ``(seed, "simulation", i)``, so the summary is
    identical for any ``n_jobs``.
    """
    if reps < 1:
        raise InvalidInputError("reps must be at least 1")
    if B < 1:
        raise InvalidInputError("B must be at least 1")
    start = time.perf_counter()
    if n_jobs == 1:
        records = _replication_range(spec, n, B, a, seed, range(reps), opts)
    else:
        from joblib import Parallel, delayed

        chunks = [c for c in np.array_split(np.arange(reps), min(reps, 4 * abs(n_jobs)))
                  if c.size]
        parts = Parallel(n_jobs=n_jobs)(
            delayed(_replication_range)(spec, n, B, a, seed, c.tolist(), opts) for c in chunks)
        records = [rec for part in parts for rec in part]
    ok = [rec for rec in records if rec["ok"]]
    n_failed = reps - len(ok)
    if n_failed > max_failed_fraction * reps:
        raise StudyFailureError(f"{n_failed} of {reps} replications failed",
                                n_failed=n_failed, reps=reps)
    boot_rate = float(np.mean([rec["boot_reject"] for rec in ok]))
    plugin_rate = float(np.mean([rec["plugin_reject"] for rec in ok]))
    return RejectionSummary(spec, n, reps, B, a, int(seed), boot_rate, plugin_rate, n_failed,
                            records, time.perf_counter() - start)
