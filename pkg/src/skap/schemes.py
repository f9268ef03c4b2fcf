"""Time integrators for the stiff system and its overdamped limit.

Five schemes, addressable by string id:

``semi-implicit``
    Implicit in p, explicit in q, implemented in the equivalent explicit
    form (solve the scalar linear relation for p first):

        p' = (p + dt f(q)/eps + sigma(q) dbeta / eps) / (1 + dt/eps^2)
        q' = q + dt p' / eps.

    Unconditionally stable in eps; the workhorse for strong approximation.

``exponential``
    Freeze f and sigma at q_n, solve the resulting linear SDE exactly over
    the step.  With E = exp(-dt/eps^2) and the correlated pair
    (dbeta, I) from :mod:`skap.noise`:

        q' = q + eps (1-E) p + (dt - eps^2 (1-E)) f(q) + sigma(q) (dbeta - I)
        p' = E p + eps (1-E) f(q) + sigma(q) I / eps.

    Exact (pathwise, given the sampled increments) for constant f, sigma.

``euler-maruyama``
    The limiting scheme, q' = q + dt f(q) + sigma(q) dbeta.  No momentum.

``semi-implicit-qp`` / ``exponential-qp``
    The same two schemes in the transformed variables Q = q + eps p,
    P = eps p, where the 1/eps factors cancel:

        Q' = Q + dt f(Q-P) + sigma(Q-P) dbeta                    (both)
        P' = (P + dt f(Q-P) + sigma(Q-P) dbeta) / (1 + dt/eps^2) (semi-implicit)
        P' = E P + eps^2 (1-E) f(Q-P) + sigma(Q-P) I             (exponential)

    Q - P reproduces q of the untransformed scheme exactly (in exact
    arithmetic; to rounding in float64).

All steppers are pure and accept batched states with shape (..., d).
As eps -> 0 at fixed dt, every scheme's q-update degenerates to the
Euler-Maruyama update driven by the same dbeta (the asymptotic-preserving
property); the harness checks this numerically.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import IntegrationError, UsageError
from .models import InitialCondition, ModelSpec
from .noise import IncrementPair, NoisePath

Array = np.ndarray

SCHEME_IDS = (
    "semi-implicit",
    "exponential",
    "euler-maruyama",
    "semi-implicit-qp",
    "exponential-qp",
)

# schemes that consume the exponential-integral increments
EXPONENTIAL_SCHEMES = frozenset({"exponential", "exponential-qp"})


@dataclass(frozen=True)
class PhaseState:
    """A point (q, p) of the stiff system, entries shape (..., d)."""

    q: Array
    p: Array


@dataclass(frozen=True)
class QPState:
    """The transformed point (Q, P) = (q + eps p, eps p); q = Q - P."""

    Q: Array
    P: Array


@dataclass(frozen=True)
class SimConfig:
    """One simulation setup: eps, horizon T = n_steps * dt, initial data, seeding."""

    eps: float
    t_end: float
    n_steps: int
    init: InitialCondition
    master_seed: int = 0
    samples: int = 1

    def __post_init__(self):
        if not (self.eps > 0.0):
            raise UsageError(f"eps must be positive, got {self.eps}")
        if not (self.t_end > 0.0):
            raise UsageError(f"t_end must be positive, got {self.t_end}")
        if self.n_steps < 0:
            raise UsageError(f"n_steps must be >= 0, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.t_end / self.n_steps


@dataclass(frozen=True)
class Trajectory:
    """States on the uniform grid t_n = n dt.

    For representation "phase", qs/ps hold (q_n, p_n); for "qp" they hold
    (Q_n, P_n).  ps is None for the momentum-free limiting scheme.
    ``positions()`` returns q_n in either representation.
    """

    times: Array
    qs: Array
    ps: Optional[Array]
    representation: str = "phase"

    def positions(self) -> Array:
        if self.representation == "qp":
            return self.qs - self.ps
        return self.qs

    @property
    def n_steps(self) -> int:
        return self.qs.shape[0] - 1


def _require_finite(arrays, step: int) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise IntegrationError(f"non-finite state at step {step}", step=step)


def step_semi_implicit(state: PhaseState, model: ModelSpec, eps: float, dt: float,
                       dbeta: Array) -> PhaseState:
    q, p = state.q, state.p
    fq = model.drift(q)
    noise = model.apply_diffusion(q, dbeta)
    p_new = (p + (dt / eps) * fq + noise / eps) / (1.0 + dt / eps**2)
    q_new = q + (dt / eps) * p_new
    return PhaseState(q_new, p_new)


def step_exponential(state: PhaseState, model: ModelSpec, eps: float, dt: float,
                     pair: IncrementPair) -> PhaseState:
    q, p = state.q, state.p
    x = dt / eps**2
    u = -np.expm1(-x)  # 1 - E, stable for x << 1
    decay = np.exp(-x)
    fq = model.drift(q)
    q_new = (q + (eps * u) * p + (dt - eps**2 * u) * fq
             + model.apply_diffusion(q, pair.dbeta - pair.integral))
    p_new = decay * p + (eps * u) * fq + model.apply_diffusion(q, pair.integral) / eps
    return PhaseState(q_new, p_new)


def step_euler_maruyama(q: Array, model: ModelSpec, dt: float, dbeta: Array) -> Array:
    return q + dt * model.drift(q) + model.apply_diffusion(q, dbeta)


def step_semi_implicit_qp(state: QPState, model: ModelSpec, eps: float, dt: float,
                          dbeta: Array) -> QPState:
    q = state.Q - state.P
    incr = dt * model.drift(q) + model.apply_diffusion(q, dbeta)
    return QPState(state.Q + incr, (state.P + incr) / (1.0 + dt / eps**2))


def step_exponential_qp(state: QPState, model: ModelSpec, eps: float, dt: float,
                        pair: IncrementPair) -> QPState:
    q = state.Q - state.P
    x = dt / eps**2
    u = -np.expm1(-x)
    fq = model.drift(q)
    q_new = state.Q + dt * fq + model.apply_diffusion(q, pair.dbeta)
    p_new = (np.exp(-x) * state.P + (eps**2 * u) * fq
             + model.apply_diffusion(q, pair.integral))
    return QPState(q_new, p_new)


def _check_noise(scheme: str, config: SimConfig, noise: NoisePath) -> None:
    if noise.n_steps != config.n_steps:
        raise UsageError(
            f"noise has {noise.n_steps} steps, config expects {config.n_steps}"
        )
    if config.n_steps > 0 and abs(noise.dt - config.dt) > 1e-12 * config.dt:
        raise UsageError(f"noise dt {noise.dt} does not match config dt {config.dt}")
    if scheme in EXPONENTIAL_SCHEMES and noise.eps != config.eps:
        raise UsageError(
            f"scheme '{scheme}' needs increments sampled at eps={config.eps}, "
            f"path was sampled at eps={noise.eps}"
        )


def integrate(scheme: str, model: ModelSpec, config: SimConfig, noise: NoisePath) -> Trajectory:
    """Apply the selected scheme n_steps times.  Pure in (model, config, noise)."""
    if scheme not in SCHEME_IDS:
        raise UsageError(f"unknown scheme '{scheme}'; valid: {', '.join(SCHEME_IDS)}")
    if config.n_steps > 0:
        _check_noise(scheme, config, noise)
    ic = config.init
    if ic.dimension != model.dimension:
        raise UsageError(
            f"initial condition dimension {ic.dimension} != model dimension {model.dimension}"
        )
    n, d = config.n_steps, model.dimension
    dt, eps = (config.t_end / n if n else 0.0), config.eps
    times = np.linspace(0.0, config.t_end, n + 1)

    if scheme == "euler-maruyama":
        qs = np.empty((n + 1, d))
        qs[0] = ic.q0_limit
        for k in range(n):
            qs[k + 1] = step_euler_maruyama(qs[k], model, dt, noise.dbeta[k])
            _require_finite([qs[k + 1]], k)
        return Trajectory(times, qs, None, "phase")

    qs = np.empty((n + 1, d))
    ps = np.empty((n + 1, d))
    if scheme.endswith("-qp"):
        qs[0] = ic.q0 + eps * ic.p0
        ps[0] = eps * ic.p0
        rep = "qp"
    else:
        qs[0] = ic.q0
        ps[0] = ic.p0
        rep = "phase"

    for k in range(n):
        if scheme == "semi-implicit":
            st = step_semi_implicit(PhaseState(qs[k], ps[k]), model, eps, dt, noise.dbeta[k])
            qs[k + 1], ps[k + 1] = st.q, st.p
        elif scheme == "exponential":
            st = step_exponential(PhaseState(qs[k], ps[k]), model, eps, dt, noise[k])
            qs[k + 1], ps[k + 1] = st.q, st.p
        elif scheme == "semi-implicit-qp":
            st = step_semi_implicit_qp(QPState(qs[k], ps[k]), model, eps, dt, noise.dbeta[k])
            qs[k + 1], ps[k + 1] = st.Q, st.P
        else:
            st = step_exponential_qp(QPState(qs[k], ps[k]), model, eps, dt, noise[k])
            qs[k + 1], ps[k + 1] = st.Q, st.P
        _require_finite([qs[k + 1], ps[k + 1]], k)
    return Trajectory(times, qs, ps, rep)


def reference_solution(model: ModelSpec, ic: InitialCondition, eps: float, t_end: float,
                       coarse_n: int, refine_ratio: int, fine_noise: NoisePath) -> Trajectory:
    """Fine-grid proxy for the exact solution, reported on the coarse grid.

    Runs the exponential scheme at step dt/refine_ratio on the given fine
    path and subsamples at the coarse nodes.  The exponential scheme is the
    natural discretization of the between-steps dynamics (it is exact for
    frozen coefficients), and its strong error is O(sqrt(dt_fine))
    uniformly in eps, so refine_ratio in the tens keeps the proxy bias well
    below coarse-grid errors; the harness budget-checks this per sweep.
    """
    if refine_ratio < 1:
        raise UsageError(f"refine_ratio must be >= 1, got {refine_ratio}")
    if fine_noise.n_steps != coarse_n * refine_ratio:
        raise UsageError(
            f"fine noise has {fine_noise.n_steps} steps, expected "
            f"coarse_n * refine_ratio = {coarse_n * refine_ratio}"
        )
    cfg = SimConfig(eps=eps, t_end=t_end, n_steps=coarse_n * refine_ratio, init=ic)
    fine = integrate("exponential", model, cfg, fine_noise)
    sl = slice(None, None, refine_ratio)
    return Trajectory(fine.times[sl], fine.qs[sl], fine.ps[sl], "phase")


def exact_constant_solution(model: ModelSpec, ic: InitialCondition, eps: float,
                            noise: NoisePath) -> Trajectory:
    """Exact grid solution for constant-coefficient models, given the increments.

    With f0 = f, sigma0 = sigma constant and E = exp(-dt/eps^2), the true
    solution restricted to the grid satisfies the recursion

        p_{n+1} = E p_n + eps (1-E) f0 + sigma0 I_n / eps
        q_{n+1} = q_n + eps (1-E) p_n + (dt - eps^2 (1-E)) f0
                  + sigma0 (dbeta_n - I_n),

    which is the exponential scheme with frozen coefficients; for constant
    models the two coincide identically, and this routine is the
    independent recursion used to certify that.
    """
    if not (model.is_constant_drift and model.is_constant_diffusion):
        raise UsageError(
            f"model '{model.name}' does not have constant coefficients"
        )
    d = model.dimension
    origin = np.zeros(d)
    f0 = model.drift(origin)
    sigma0 = model.diffusion(origin)
    n, dt = noise.n_steps, noise.dt
    x = dt / eps**2
    u = -np.expm1(-x)
    decay = np.exp(-x)
    qs = np.empty((n + 1, d))
    ps = np.empty((n + 1, d))
    qs[0], ps[0] = ic.q0, ic.p0
    for k in range(n):
        db, ii = noise.dbeta[k], noise.integral[k]
        qs[k + 1] = qs[k] + (eps * u) * ps[k] + (dt - eps**2 * u) * f0 + sigma0 @ (db - ii)
        ps[k + 1] = decay * ps[k] + (eps * u) * f0 + (sigma0 @ ii) / eps
    times = np.arange(n + 1) * dt
    return Trajectory(times, qs, ps, "phase")
