"""Monte Carlo experiments: strong/weak convergence rates, the overdamped
limit rate, moment uniformity, and scalar inequality checks.

Every estimator couples the compared objects through common random numbers:

* strong/weak errors: per sample, one fine path drives the exponential
  reference at step dt/refine_ratio and (after exact aggregation) the
  tested scheme at step dt; the estimator sees only the coupled difference.
* overdamped-limit errors: the eps-scheme and the limiting Euler-Maruyama
  scheme share the Brownian increments dbeta.

Records are reproducible: a row's (seed, samples) regenerates it exactly,
for any thread count, because sample s always reads noise stream
(seed, s) and partial sums are combined in sample-index order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import _engine
from .errors import UsageError
from .models import InitialCondition, ModelSpec
from .noise import stream_seed
from .observables import get_test_function
from .schemes import SCHEME_IDS

ESTIMATORS = ("strong-L2", "weak", "sk-limit", "moment")

CSV_COLUMNS = ("model", "scheme", "estimator", "test_function", "eps", "dt",
               "value", "mc_std_error", "samples", "seed")


@dataclass(frozen=True)
class ErrorRecord:
    """One estimated error value with its Monte Carlo standard error."""

    model: str
    scheme: str
    estimator: str
    eps: float
    dt: float
    value: float
    mc_std_error: float
    samples: int
    seed: int
    test_function: str = ""

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise UsageError(f"unknown estimator '{self.estimator}'")
        if self.mc_std_error < 0.0:
            raise UsageError("mc_std_error must be nonnegative")
        if self.mc_std_error > 0.0 and self.samples < 2:
            raise UsageError("a positive mc_std_error needs at least 2 samples")

    def resolved(self, fraction: float = 0.2) -> bool:
        """Whether MC noise is below ``fraction`` of the estimate."""
        return self.mc_std_error <= fraction * self.value + 1e-15


@dataclass(frozen=True)
class RateFit:
    """Least-squares power-law fit on log-log data."""

    slope: float
    intercept: float
    r_squared: float
    points: tuple = ()


def fit_rate(records: Sequence[ErrorRecord], against: str = "dt") -> RateFit:
    """Fit log(value) against log(dt) (or log(eps) for limit-rate sweeps)."""
    if against not in ("dt", "eps"):
        raise UsageError(f"fit variable must be 'dt' or 'eps', got '{against}'")
    xs, ys = [], []
    for r in records:
        if not (r.value > 0.0):
            raise UsageError(
                "rate fitting needs strictly positive error values; "
                f"got {r.value} (exact cases must be excluded upstream)"
            )
        xs.append(math.log(r.eps if against == "eps" else r.dt))
        ys.append(math.log(r.value))
    if len(xs) < 3:
        raise UsageError(f"rate fitting needs >= 3 records, got {len(xs)}")
    x = np.asarray(xs)
    y = np.asarray(ys)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    total = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 if total == 0.0 else 1.0 - float((resid**2).sum()) / float(total)
    return RateFit(float(slope), float(intercept), r2, tuple(zip(x.tolist(), y.tolist())))


def _mean_and_se(total: float, total_sq: float, m: int) -> tuple[float, float]:
    mean = total / m
    if m < 2:
        return mean, 0.0
    var = max(0.0, (total_sq - m * mean * mean) / (m - 1))
    return mean, math.sqrt(var / m)


def _rms_record(stats: dict, m: int, sup_over_n: bool) -> tuple[float, float]:
    """Value sqrt(E e) and its delta-method standard error from moment partials."""
    if sup_over_n:
        means = stats["per_n"] / m
        idx = int(np.argmax(means))
        mean, se_mean = _mean_and_se(float(stats["per_n"][idx]),
                                     float(stats["per_n_sq"][idx]), m)
    else:
        mean, se_mean = _mean_and_se(stats["sq_sum"], stats["sq_sq_sum"], m)
    value = math.sqrt(max(mean, 0.0))
    se = se_mean / (2.0 * value) if value > 0.0 else 0.0
    return value, se


def strong_error(model: ModelSpec, scheme: str, ic: InitialCondition, eps: float,
                 t_end: float, n_steps: int, refine_ratio: int, samples: int,
                 seed: int, sup_over_n: bool = False, threads: int = 1) -> ErrorRecord:
    """Root-mean-square gap between the scheme and its fine-grid reference.

    Terminal-time by default; ``sup_over_n`` instead reports the worst grid
    node, which exposes the eps-sensitive transient of the semi-implicit
    scheme when p0 != 0.
    """
    _check_mc_args(scheme, samples, n_steps, refine_ratio)
    stats = _engine.coupled_stats(model, (scheme,), (), eps, t_end / n_steps,
                                  n_steps, refine_ratio, samples, seed, ic,
                                  sup_over_n=sup_over_n, threads=threads)[scheme]
    value, se = _rms_record(stats, samples, sup_over_n)
    return ErrorRecord(model.name, scheme, "strong-L2", eps, t_end / n_steps,
                       value, se, samples, seed)


def weak_error(model: ModelSpec, scheme: str, phi: str, ic: InitialCondition,
               eps: float, t_end: float, n_steps: int, refine_ratio: int,
               samples: int, seed: int, threads: int = 1) -> ErrorRecord:
    """Coupled-difference estimate of |E phi(scheme) - E phi(reference)|.

    Common random numbers make the estimator's variance scale with the
    strong coupling error rather than with Var(phi), which is what makes
    order-1 regimes measurable at desk scale.  Use ``record.resolved()``
    to check that MC noise is small relative to the estimate.
    """
    _check_mc_args(scheme, samples, n_steps, refine_ratio)
    get_test_function(phi)  # validate the name before simulating
    stats = _engine.coupled_stats(model, (scheme,), (phi,), eps, t_end / n_steps,
                                  n_steps, refine_ratio, samples, seed, ic,
                                  threads=threads)[scheme]
    mean, se = _mean_and_se(stats[f"phi_sum:{phi}"], stats[f"phi_sq_sum:{phi}"], samples)
    return ErrorRecord(model.name, scheme, "weak", eps, t_end / n_steps,
                       abs(mean), se, samples, seed, test_function=phi)


def sk_limit_error(model: ModelSpec, scheme: str, ic: InitialCondition,
                   eps_grid: Sequence[float], t_end: float, n_steps: int,
                   samples: int, seed: int, threads: int = 1) -> list[ErrorRecord]:
    """Terminal RMS gap between the eps-scheme and the coupled limiting scheme.

    One record per eps; a fit of log value against log eps measures the
    rate of the diffusion-approximation limit (expected slope 1).
    """
    _check_mc_args(scheme, samples, n_steps, 1)
    records = []
    for i, eps in enumerate(eps_grid):
        cell_seed = stream_seed(seed, i)
        stats = _engine.limit_stats(model, scheme, eps, t_end / n_steps, n_steps,
                                    samples, cell_seed, ic, threads=threads)
        mean, se_mean = _mean_and_se(stats["sq_sum"], stats["sq_sq_sum"], samples)
        value = math.sqrt(max(mean, 0.0))
        se = se_mean / (2.0 * value) if value > 0.0 else 0.0
        records.append(ErrorRecord(model.name, scheme, "sk-limit", eps,
                                   t_end / n_steps, value, se, samples, cell_seed))
    return records


def ap_deviation(model: ModelSpec, scheme: str, ic: InitialCondition, eps: float,
                 t_end: float, n_steps: int, samples: int, seed: int) -> float:
    """Sup-norm gap (over steps, samples, components) to the coupled limiting scheme."""
    stats = _engine.limit_stats(model, scheme, eps, t_end / n_steps, n_steps,
                                samples, seed, ic, track_sup=True)
    return stats["sup_dev"]


def moment_sweep(model: ModelSpec, scheme: str, ic: InitialCondition,
                 eps_grid: Sequence[float], n_grid: Sequence[int], t_end: float,
                 samples: int, seed: int, threads: int = 1) -> list[ErrorRecord]:
    """Worst-over-n second moments of q and p per (eps, dt).

    Emits two records per cell (test_function "max-q2" and "max-p2").
    A diverged cell is recorded with value inf rather than raised, so a
    sweep documents exactly which parameter pairs failed.
    """
    records = []
    cell = 0
    for eps in eps_grid:
        for n_steps in n_grid:
            cell_seed = stream_seed(seed, cell)
            cell += 1
            stats = _engine.moment_stats(model, scheme, eps, t_end / n_steps,
                                         n_steps, samples, cell_seed, ic,
                                         threads=threads)
            dt = t_end / n_steps
            for label, key in (("max-q2", "q2"), ("max-p2", "p2")):
                if stats["blew_up"]:
                    records.append(ErrorRecord(model.name, scheme, "moment", eps, dt,
                                               math.inf, 0.0, samples, cell_seed,
                                               test_function=label))
                    continue
                means = stats[key] / samples
                idx = int(np.argmax(means))
                _, se = _mean_and_se(float(stats[key][idx]),
                                     float(stats[key + "_sq"][idx]), samples)
                records.append(ErrorRecord(model.name, scheme, "moment", eps, dt,
                                           float(means[idx]), se, samples, cell_seed,
                                           test_function=label))
    return records


def _check_mc_args(scheme: str, samples: int, n_steps: int, refine_ratio: int) -> None:
    if scheme not in SCHEME_IDS:
        raise UsageError(f"unknown scheme '{scheme}'; valid: {', '.join(SCHEME_IDS)}")
    if samples < 2:
        raise UsageError(f"Monte Carlo estimators need samples >= 2, got {samples}")
    if n_steps < 1:
        raise UsageError(f"n_steps must be >= 1, got {n_steps}")
    if refine_ratio < 1:
        raise UsageError(f"refine_ratio must be >= 1, got {refine_ratio}")


# -- residual of the weak error bound -----------------------------------------


def residual_R(eps: float, dt: float) -> float:
    """The eps-dependent residual of the weak error bound.

    Averaging 1 - exp(-t/eps^2) over a step and scaling by eps gives the
    closed form

        R(eps, dt) = eps * (1 - (1 - exp(-dt/eps^2)) / (dt/eps^2)),

    which is nonnegative and, with x = dt/eps^2 -> 0, behaves like
    eps*x/2 = dt/(2 eps); that regime is evaluated by series to avoid the
    cancellation in 1 - u/x.
    """
    if not (eps > 0.0 and dt > 0.0):
        raise UsageError(f"eps and dt must be positive, got eps={eps}, dt={dt}")
    x = dt / eps**2
    if x < 1e-2:
        h = x * (0.5 + x * (-1.0 / 6.0 + x * (1.0 / 24.0 + x * (-1.0 / 120.0 + x / 720.0))))
    else:
        h = 1.0 - (-np.expm1(-x)) / x
    return float(eps * h)


def residual_bound(eps: float, dt: float) -> float:
    """sqrt(2) * min(eps, sqrt(dt), dt/eps): the proven envelope for residual_R."""
    return math.sqrt(2.0) * min(eps, math.sqrt(dt), dt / eps)


# -- scalar inequalities -------------------------------------------------------


@dataclass(frozen=True)
class InequalityReport:
    """Grid-evaluated suprema of the two scalar bounds used by the error analysis."""

    sup_exp_ratio: float       # sup over tau of (1 - e^-tau) / sqrt(tau)
    sup_exp_ratio_at: float
    sup_resolvent_gap: float   # sup over n, tau of (n+1) ((1+tau)^-n - e^{-n tau})
    sup_resolvent_gap_at: tuple
    tolerance: float

    @property
    def passed(self) -> bool:
        limit = 1.0 + self.tolerance
        return self.sup_exp_ratio <= limit and self.sup_resolvent_gap <= limit


def check_scalar_inequalities(n_max: int = 200, grid_points: int = 2001,
                              tolerance: float = 1e-12) -> InequalityReport:
    """Verify both scalar suprema stay below 1 on a wide logarithmic grid.

    (1 - e^-tau)/sqrt(tau) peaks around 0.638; the resolvent-vs-exponential
    gap satisfies sup_tau ((1+tau)^-n - e^{-n tau}) <= 1/(n+1), so the
    scaled product stays below 1 for every n.
    """
    tau = np.logspace(-12.0, 6.0, grid_points)
    ratio = (-np.expm1(-tau)) / np.sqrt(tau)
    i1 = int(np.argmax(ratio))

    best = 0.0
    best_at = (0, 0.0)
    log1p_tau = np.log1p(tau)
    for n in range(n_max + 1):
        gap = (n + 1) * (np.exp(-n * log1p_tau) - np.exp(-n * tau))
        j = int(np.argmax(gap))
        if gap[j] > best:
            best = float(gap[j])
            best_at = (n, float(tau[j]))
    return InequalityReport(float(ratio[i1]), float(tau[i1]), best, best_at, tolerance)


# -- sweep drivers -------------------------------------------------------------


@dataclass
class StrongStudy:
    records: list
    fits: dict            # (scheme, eps) -> RateFit
    bias_estimates: dict  # eps -> reference self-convergence estimate
    warnings: list = field(default_factory=list)


@dataclass
class WeakStudy:
    records: list
    fits: dict            # scheme -> RateFit
    signed_means: dict    # (scheme, eps, dt) -> signed difference estimate
    warnings: list = field(default_factory=list)


_BIAS_SAMPLES = 2000
_BIAS_BUDGET_FRACTION = 1.0 / 3.0


def _reference_bias(model, ic, eps, dt, n_steps, refine_ratio, samples, seed, threads):
    """Self-convergence gap of the reference: exponential at dt_f vs 2*dt_f.

    Both run on the same fine path (aggregation by 2), so the gap estimates
    the reference's own distance to the exact solution up to a constant.
    """
    if refine_ratio % 2 or refine_ratio < 2:
        return None
    n_half = n_steps * refine_ratio // 2
    stats = _engine.coupled_stats(model, ("exponential",), (), eps,
                                  2.0 * dt / refine_ratio, n_half, 2,
                                  samples, seed, ic, threads=threads)["exponential"]
    mean, _ = _mean_and_se(stats["sq_sum"], stats["sq_sq_sum"], samples)
    return math.sqrt(max(mean, 0.0))


def strong_rate_study(model: ModelSpec, schemes: Sequence[str], ic: InitialCondition,
                      eps_grid: Sequence[float], n_grid: Sequence[int], t_end: float,
                      refine_ratio: int, samples: int, seed: int,
                      sup_over_n: bool = False, threads: int = 1,
                      bias_check: bool = True) -> StrongStudy:
    """Strong-error sweep over (eps, dt) for one or more schemes.

    All schemes of a cell share the fine reference (and its cost).  Each
    cell gets a derived seed, recorded on its rows, so any row can be
    regenerated in isolation with :func:`strong_error`.
    """
    records = []
    fits = {}
    bias = {}
    warnings = []
    for ei, eps in enumerate(eps_grid):
        eps_records = {s: [] for s in schemes}
        for ni, n_steps in enumerate(n_grid):
            cell_seed = stream_seed(seed, ei * len(n_grid) + ni)
            dt = t_end / n_steps
            stats = _engine.coupled_stats(model, tuple(schemes), (), eps, dt,
                                          n_steps, refine_ratio, samples, cell_seed,
                                          ic, sup_over_n=sup_over_n, threads=threads)
            for scheme in schemes:
                value, se = _rms_record(stats[scheme], samples, sup_over_n)
                rec = ErrorRecord(model.name, scheme, "strong-L2", eps, dt,
                                  value, se, samples, cell_seed)
                records.append(rec)
                eps_records[scheme].append(rec)
        for scheme in schemes:
            fittable = [r for r in eps_records[scheme] if r.value > 0.0]
            if len(fittable) >= 3:
                fits[(scheme, eps)] = fit_rate(fittable)
        if bias_check:
            n_small = max(n_grid)
            b = _reference_bias(model, ic, eps, t_end / n_small, n_small,
                                refine_ratio, min(samples, _BIAS_SAMPLES),
                                stream_seed(seed, 10_000 + ei), threads)
            if b is not None:
                bias[eps] = b
                floor = min((r.value for r in records
                             if r.eps == eps and r.value > 0.0), default=None)
                if floor is not None and b > _BIAS_BUDGET_FRACTION * floor:
                    warnings.append(
                        f"eps={eps:g}: reference self-convergence {b:.3e} exceeds "
                        f"1/3 of the smallest measured error {floor:.3e}; "
                        f"increase refine_ratio"
                    )
    return StrongStudy(records, fits, bias, warnings)


def weak_rate_study(model: ModelSpec, schemes: Sequence[str], phis: Sequence[str],
                    ic: InitialCondition, eps_mode, n_grid: Sequence[int],
                    t_end: float, refine_ratio: int, samples: int, seed: int,
                    resolve_fraction: float = 0.2, threads: int = 1) -> WeakStudy:
    """Weak-error sweep over dt at fixed eps, or along the diagonal eps = sqrt(dt).

    ``eps_mode`` is either a positive float or the string "sqrt-dt" (the
    worst case of the uniform weak bound).  All test functions are
    evaluated on the same coupled runs.  Unresolved records (MC standard
    error above ``resolve_fraction`` of the estimate) are flagged in the
    warnings, never dropped.
    """
    if isinstance(phis, str):
        phis = (phis,)
    for phi in phis:
        get_test_function(phi)
    records = []
    signed = {}
    warnings = []
    per_key = {(s, phi): [] for s in schemes for phi in phis}
    for ni, n_steps in enumerate(n_grid):
        dt = t_end / n_steps
        if eps_mode == "sqrt-dt":
            eps = math.sqrt(dt)
        else:
            eps = float(eps_mode)
            if not eps > 0.0:
                raise UsageError(f"eps must be positive, got {eps}")
        cell_seed = stream_seed(seed, ni)
        stats = _engine.coupled_stats(model, tuple(schemes), tuple(phis), eps, dt,
                                      n_steps, refine_ratio, samples, cell_seed,
                                      ic, threads=threads)
        for scheme in schemes:
            for phi in phis:
                mean, se = _mean_and_se(stats[scheme][f"phi_sum:{phi}"],
                                        stats[scheme][f"phi_sq_sum:{phi}"], samples)
                rec = ErrorRecord(model.name, scheme, "weak", eps, dt, abs(mean), se,
                                  samples, cell_seed, test_function=phi)
                records.append(rec)
                signed[(scheme, phi, eps, dt)] = mean
                per_key[(scheme, phi)].append(rec)
                if not rec.resolved(resolve_fraction):
                    warnings.append(
                        f"unresolved weak record: scheme={scheme} phi={phi} eps={eps:g} "
                        f"dt={dt:g} value={rec.value:.3e} mc_se={se:.3e}"
                    )
    fits = {}
    for key, recs in per_key.items():
        fittable = [r for r in recs if r.value > 0.0]
        if len(fittable) >= 3:
            fits[key] = fit_rate(fittable)
    return WeakStudy(records, fits, signed, warnings)


# -- CSV emission --------------------------------------------------------------


def _fmt(x) -> str:
    # repr of floats is shortest-roundtrip and platform-stable
    return repr(float(x)) if isinstance(x, float) else str(x)


def write_error_csv(records: Iterable[ErrorRecord], file) -> None:
    """Emit records with the canonical column set (byte-deterministic)."""
    close = False
    if isinstance(file, (str, bytes)):
        file = open(file, "w", newline="")
        close = True
    try:
        w = csv.writer(file, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([r.model, r.scheme, r.estimator, r.test_function,
                        _fmt(r.eps), _fmt(r.dt), _fmt(r.value),
                        _fmt(r.mc_std_error), r.samples, r.seed])
    finally:
        if close:
            file.close()


RATE_CSV_COLUMNS = ("model", "scheme", "estimator", "test_function", "group",
                    "slope", "intercept", "r_squared", "points")


def write_rates_csv(rows: Iterable[tuple], file) -> None:
    """Emit fitted rates; each row is (model, scheme, estimator, phi, group, RateFit)."""
    close = False
    if isinstance(file, (str, bytes)):
        file = open(file, "w", newline="")
        close = True
    try:
        w = csv.writer(file, lineterminator="\n")
        w.writerow(RATE_CSV_COLUMNS)
        for model, scheme, estimator, phi, group, fit in rows:
            w.writerow([model, scheme, estimator, phi, group, _fmt(fit.slope),
                        _fmt(fit.intercept), _fmt(fit.r_squared), len(fit.points)])
    finally:
        if close:
            file.close()
