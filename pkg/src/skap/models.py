"""Problem definitions for the stiff underdamped system

    dq = p/eps dt
    dp = -p/eps^2 dt + f(q)/eps dt + sigma(q)/eps dbeta(t)

and its overdamped limit dq = f(q) dt + sigma(q) dbeta(t).

A model is a pair of vectorized maps: a drift f: R^d -> R^d and a
diffusion sigma: R^d -> R^{d x d}.  Built-in models all have globally
Lipschitz drift and bounded diffusion with bounded derivatives, so every
convergence experiment in the harness runs inside its supported regime.
Both maps accept batched input with shape (..., d) and are evaluated on
the last axis; this is what lets the Monte Carlo engine advance thousands
of trajectories per numpy call.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import UsageError

Array = np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """An SDE problem: drift, diffusion and documented regularity metadata.

    ``drift`` maps (..., d) -> (..., d).  ``diffusion`` maps
    (..., d) -> (..., d, d).  When the diffusion matrix is diagonal,
    ``diffusion_diag`` returns only the diagonal entries, shape (..., d);
    the integrators use it to avoid d x d matvecs.  ``lipschitz_bound``
    and ``diffusion_bound`` are documentation of the model's constants,
    verified by probe tests, not enforced at evaluation time.

    Instances are immutable and safe to share across workers; evaluation
    is pure.
    """

    name: str
    dimension: int
    drift: Callable[[Array], Array]
    diffusion: Callable[[Array], Array]
    is_constant_drift: bool = False
    is_constant_diffusion: bool = False
    lipschitz_bound: float = 1.0
    diffusion_bound: float = 1.0
    diffusion_diag: Optional[Callable[[Array], Array]] = None
    params: dict = field(default_factory=dict)

    def apply_diffusion(self, q: Array, v: Array) -> Array:
        """Return sigma(q) @ v, using the diagonal fast path when available."""
        if self.diffusion_diag is not None:
            return self.diffusion_diag(q) * v
        return np.einsum("...ij,...j->...i", self.diffusion(q), v)


@dataclass(frozen=True)
class InitialCondition:
    """Deterministic initial data (q0, p0) plus the eps -> 0 position q0_limit.

    By default q0_limit equals q0 (eps-independent initial data).
    """

    q0: Array
    p0: Array
    q0_limit: Array = None

    def __post_init__(self):
        q0 = np.atleast_1d(np.asarray(self.q0, dtype=float))
        p0 = np.atleast_1d(np.asarray(self.p0, dtype=float))
        q0_limit = self.q0_limit
        q0_limit = q0 if q0_limit is None else np.atleast_1d(np.asarray(q0_limit, dtype=float))
        if q0.shape != p0.shape or q0.shape != q0_limit.shape:
            raise UsageError(
                f"initial condition shapes differ: q0 {q0.shape}, p0 {p0.shape}, "
                f"q0_limit {q0_limit.shape}"
            )
        for label, v in (("q0", q0), ("p0", p0), ("q0_limit", q0_limit)):
            if not np.all(np.isfinite(v)):
                raise UsageError(f"{label} has non-finite entries")
        object.__setattr__(self, "q0", q0)
        object.__setattr__(self, "p0", p0)
        object.__setattr__(self, "q0_limit", q0_limit)

    @property
    def dimension(self) -> int:
        return self.q0.shape[-1]


def _check_point(model: ModelSpec, q: Array) -> Array:
    q = np.asarray(q, dtype=float)
    if q.shape[-1:] != (model.dimension,):
        raise UsageError(
            f"point has dimension {q.shape[-1] if q.ndim else 0}, "
            f"model '{model.name}' expects {model.dimension}"
        )
    if not np.all(np.isfinite(q)):
        raise UsageError("evaluation point has non-finite entries")
    return q


def eval_drift(model: ModelSpec, q: Array) -> Array:
    """Evaluate the drift f(q)."""
    return model.drift(_check_point(model, q))


def eval_diffusion(model: ModelSpec, q: Array) -> Array:
    """Evaluate the diffusion matrix sigma(q), shape (..., d, d)."""
    return model.diffusion(_check_point(model, q))


def eval_a(model: ModelSpec, q: Array) -> Array:
    """Evaluate a(q) = sigma(q) sigma(q)^T, the (symmetric PSD) diffusion tensor."""
    sig = eval_diffusion(model, q)
    return np.einsum("...ik,...jk->...ij", sig, sig)


def _constant_matrix_diffusion(mat: Array):
    def diffusion(q):
        shape = q.shape[:-1] + mat.shape
        return np.broadcast_to(mat, shape)

    return diffusion


def _scaled_identity_model(name, d, scale, drift, drift_diag_const, lip, params):
    mat = scale * np.eye(d)
    return ModelSpec(
        name=name,
        dimension=d,
        drift=drift,
        diffusion=_constant_matrix_diffusion(mat),
        is_constant_drift=drift_diag_const,
        is_constant_diffusion=True,
        lipschitz_bound=lip,
        diffusion_bound=abs(scale),
        diffusion_diag=lambda q, s=scale: np.full_like(q, s),
        params=params,
    )


def _make_linear(dimension=1, scale=1.0):
    # f(q) = -q, sigma = scale * I
    return _scaled_identity_model(
        "linear", dimension, float(scale),
        drift=lambda q: -q,
        drift_diag_const=False,
        lip=1.0,
        params={"dimension": dimension, "scale": float(scale)},
    )


def _make_sin_drift(dimension=1, scale=1.0):
    # f(q) = -q + sin(q) componentwise; |f'| = |cos(q) - 1| <= 2
    return _scaled_identity_model(
        "sin-drift", dimension, float(scale),
        drift=lambda q: np.sin(q) - q,
        drift_diag_const=False,
        lip=2.0,
        params={"dimension": dimension, "scale": float(scale)},
    )


def _make_tanh_diffusion(dimension=1):
    # f(q) = -q + sin(q); sigma(q) = diag(1 + tanh(q_i)/2), entries in [1/2, 3/2]
    d = dimension

    def diag(q):
        return 1.0 + 0.5 * np.tanh(q)

    def diffusion(q):
        out = np.zeros(q.shape + (d,))
        idx = np.arange(d)
        out[..., idx, idx] = diag(q)
        return out

    return ModelSpec(
        name="tanh-diffusion",
        dimension=d,
        drift=lambda q: np.sin(q) - q,
        diffusion=diffusion,
        is_constant_drift=False,
        is_constant_diffusion=False,
        lipschitz_bound=2.0,
        diffusion_bound=1.5,
        diffusion_diag=diag,
        params={"dimension": d},
    )


def _make_constant(dimension=1, const=1.0, scale=1.0):
    # f = const (vector), sigma = scale * I; the exponential scheme is exact here
    c = np.broadcast_to(np.atleast_1d(np.asarray(const, dtype=float)), (dimension,)).copy()
    if c.shape != (dimension,):
        raise UsageError(f"'constant' drift value has shape {c.shape}, expected ({dimension},)")

    def drift(q):
        return np.broadcast_to(c, q.shape)

    model = _scaled_identity_model(
        "constant", dimension, float(scale),
        drift=drift,
        drift_diag_const=True,
        lip=0.0,
        params={"dimension": dimension, "const": c.tolist(), "scale": float(scale)},
    )
    return model


BUILTIN_MODELS = {
    "linear": _make_linear,
    "sin-drift": _make_sin_drift,
    "tanh-diffusion": _make_tanh_diffusion,
    "constant": _make_constant,
}


def make_model(name: str, **params) -> ModelSpec:
    """Build a built-in model by name.

    Unknown names raise UsageError listing the valid ones; this is also the
    hook the CLI uses to resolve the ``model`` section of a config file.
    """
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise UsageError(
            f"unknown model '{name}'; built-ins: {', '.join(sorted(BUILTIN_MODELS))}"
        ) from None
    try:
        return factory(**params)
    except TypeError as exc:
        raise UsageError(f"bad parameters for model '{name}': {exc}") from None
