"""Correlated Wiener increments for the exponential integrator.

Each time step of the exponential scheme consumes, per component j, the
jointly Gaussian pair

    dbeta_j    = beta_j(t_{n+1}) - beta_j(t_n)
    integral_j = int_{t_n}^{t_{n+1}} exp(-(t_{n+1}-s)/eps^2) dbeta_j(s)

whose covariance matrix has entries

    c11 = dt
    c12 = eps^2 * (1 - exp(-dt/eps^2))
    c22 = eps^2/2 * (1 - exp(-2 dt/eps^2)).

Pairs are sampled by applying the (lower) Cholesky factor of this matrix
to independent standard normals.  Both the covariance and its factor are
evaluated in a cancellation-free form (expm1 plus a series branch for the
determinant), because experiments sweep dt/eps^2 across twenty orders of
magnitude in both directions.

Reproducibility contract
------------------------
A path is identified by (master_seed, stream_id).  The stream seed is
derived with a splitmix64 finalizer applied to
master_seed XOR (stream_id * 0x9E3779B97F4A7C15); the resulting 64-bit key
feeds a counter-based Philox generator, so any number of streams can be
consumed independently and concurrently with no jump-ahead bookkeeping.
Standard normals come from numpy's Generator.standard_normal (the
ziggurat method), which is fixed per numpy version; paths are therefore
bit-reproducible per build.  The canonical draw order for a path of N
steps in dimension d is a single standard-normal block of shape (N, 2, d):
step-major, dbeta normals before integral normals.  numpy Generators
produce identical streams regardless of how draws are split across calls,
so incremental consumers (one pair at a time, or blocks of steps) see
bit-identical values.

Coarsening
----------
A fine path can be aggregated to any divisor resolution *exactly*: coarse
dbeta increments are block sums, and the exponential kernel satisfies the
semigroup splitting

    I_coarse = sum_k exp(-(t_end_of_block - tau_{k+1})/eps^2) * i_k,

with (delta_beta_k, i_k) the fine pairs and tau_k the fine grid, so the
coarse pair has the correct joint law and is driven by the same Brownian
path.  This is what couples a coarse scheme run to its fine-grid reference
in the strong/weak error estimators (common random numbers).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import IntegrationError, UsageError

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GOLDEN = 0x9E3779B97F4A7C15

# dt/eps^2 below this uses the series branch of the determinant factor
_SERIES_SWITCH = 1e-3


def mix64(z: int) -> int:
    """splitmix64 finalizer: a bijective 64-bit scrambler."""
    z &= _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def stream_seed(master_seed: int, stream_id: int) -> int:
    """Derive the 64-bit Philox key for one stream."""
    return mix64((master_seed ^ ((stream_id * _GOLDEN) & _MASK64)) & _MASK64)


def stream_generator(master_seed: int, stream_id: int) -> np.random.Generator:
    """Return the generator owning stream (master_seed, stream_id)."""
    return np.random.Generator(np.random.Philox(key=stream_seed(master_seed, stream_id)))


def _validate_eps_dt(eps: float, dt: float) -> None:
    if not (eps > 0.0) or not np.isfinite(eps):
        raise UsageError(f"eps must be positive and finite, got {eps}")
    if not (dt > 0.0) or not np.isfinite(dt):
        raise UsageError(f"dt must be positive and finite, got {dt}")


def increment_covariance(eps: float, dt: float) -> tuple[float, float, float]:
    """Covariance entries (c11, c12, c22) of the (dbeta, integral) pair.

    Evaluated via u = 1 - exp(-dt/eps^2) = -expm1(-dt/eps^2), with
    c22 = eps^2 * u * (1 - u/2), which is exact and stable in both the
    dt << eps^2 and dt >> eps^2 regimes.
    """
    _validate_eps_dt(eps, dt)
    u = -np.expm1(-dt / eps**2)
    c11 = dt
    c12 = eps**2 * u
    c22 = eps**2 * u * (1.0 - 0.5 * u)
    return c11, c12, c22


def _det_factor(x: float) -> float:
    """g(x) = x - u - x*u/2 with u = 1 - e^{-x}; det = eps^4 * u * g.

    g ~ x^3/12 for small x, which a direct evaluation cannot resolve, hence
    the series branch.
    """
    if x < _SERIES_SWITCH:
        return x**3 / 12.0 - x**4 / 24.0 + x**5 / 80.0 - x**6 / 360.0
    u = -np.expm1(-x)
    return (x - u) - 0.5 * x * u


def cholesky_factors(eps: float, dt: float) -> tuple[float, float, float]:
    """Lower Cholesky factor (l11, l21, l22) of the increment covariance.

    dbeta = l11 * z1 and integral = l21 * z1 + l22 * z2 for independent
    standard normals (z1, z2).  The determinant is nonnegative by
    construction; a negative value indicates a formula bug, not bad input.
    """
    _validate_eps_dt(eps, dt)
    x = dt / eps**2
    u = -np.expm1(-x)
    l11 = np.sqrt(dt)
    l21 = eps**2 * u / l11
    g = _det_factor(x)
    if g < 0.0:
        raise IntegrationError(f"negative increment covariance determinant at dt/eps^2={x}")
    l22 = eps * np.sqrt(u * g / x)
    return float(l11), float(l21), float(l22)


def transform_normals(z: np.ndarray, eps: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Map standard normals of shape (..., 2, d) to (dbeta, integral) arrays."""
    l11, l21, l22 = cholesky_factors(eps, dt)
    z1 = z[..., 0, :]
    z2 = z[..., 1, :]
    return l11 * z1, l21 * z1 + l22 * z2


@dataclass(frozen=True)
class IncrementPair:
    """One step's correlated increments (dbeta, integral), each shape (d,)."""

    dbeta: np.ndarray
    integral: np.ndarray


@dataclass(frozen=True)
class NoisePath:
    """Correlated increments for a whole path at one (eps, dt) resolution.

    dbeta and integral have shape (n_steps, d).  Arrays are frozen after
    construction; a path is safe to share across concurrent consumers.
    """

    eps: float
    dt: float
    dbeta: np.ndarray
    integral: np.ndarray
    master_seed: int = 0
    stream_id: int = 0

    def __post_init__(self):
        db = np.ascontiguousarray(np.asarray(self.dbeta, dtype=float))
        ii = np.ascontiguousarray(np.asarray(self.integral, dtype=float))
        if db.ndim != 2 or db.shape != ii.shape:
            raise UsageError(
                f"increment arrays must share shape (n_steps, d); got {db.shape} and {ii.shape}"
            )
        db.setflags(write=False)
        ii.setflags(write=False)
        object.__setattr__(self, "dbeta", db)
        object.__setattr__(self, "integral", ii)

    @property
    def n_steps(self) -> int:
        return self.dbeta.shape[0]

    @property
    def dimension(self) -> int:
        return self.dbeta.shape[1]

    @property
    def duration(self) -> float:
        return self.n_steps * self.dt

    def __len__(self) -> int:
        return self.n_steps

    def __getitem__(self, n: int) -> IncrementPair:
        return IncrementPair(self.dbeta[n], self.integral[n])


def sample_pair(rng: np.random.Generator, eps: float, dt: float, dimension: int) -> IncrementPair:
    """Draw one correlated pair, advancing the stream by one (2, d) block."""
    z = rng.standard_normal((2, dimension))
    db, ii = transform_normals(z, eps, dt)
    return IncrementPair(db, ii)


def generate_path(
    master_seed: int,
    stream_id: int,
    eps: float,
    dt: float,
    n_steps: int,
    dimension: int,
) -> NoisePath:
    """Generate the path owned by (master_seed, stream_id).

    Deterministic: the same arguments always yield bit-identical arrays,
    independent of platform and of any other stream.
    """
    if n_steps < 1:
        raise UsageError(f"n_steps must be >= 1, got {n_steps}")
    gen = stream_generator(master_seed, stream_id)
    z = gen.standard_normal((n_steps, 2, dimension))
    db, ii = transform_normals(z, eps, dt)
    return NoisePath(eps=eps, dt=dt, dbeta=db, integral=ii,
                     master_seed=master_seed, stream_id=stream_id)


def coarsening_weights(ratio: int, eps: float, dt_fine: float) -> np.ndarray:
    """Exponential-kernel weights for aggregating integral increments.

    Fine step j of a block (j = 0..ratio-1) contributes with weight
    exp(-(ratio-1-j) * dt_fine / eps^2): the kernel from the end of fine
    step j to the end of the coarse step.
    """
    j = np.arange(ratio, dtype=float)
    return np.exp(-(ratio - 1 - j) * dt_fine / eps**2)


def coarsen_path(fine: NoisePath, ratio: int, eps: float | None = None) -> NoisePath:
    """Aggregate a fine path to step size ratio * fine.dt.  Exact, not approximate.

    Coarse dbeta entries are block sums; coarse integral entries apply the
    semigroup splitting of the exponential kernel, so the coarse pairs have
    exactly the joint law of pairs sampled directly at the coarse step.
    """
    if eps is not None and eps != fine.eps:
        raise UsageError(f"eps mismatch: path has {fine.eps}, caller expects {eps}")
    if ratio < 1:
        raise UsageError(f"ratio must be >= 1, got {ratio}")
    if fine.n_steps % ratio != 0:
        raise UsageError(f"ratio {ratio} does not divide path length {fine.n_steps}")
    if ratio == 1:
        return fine
    n_coarse = fine.n_steps // ratio
    d = fine.dimension
    db = fine.dbeta.reshape(n_coarse, ratio, d).sum(axis=1)
    w = coarsening_weights(ratio, fine.eps, fine.dt)
    ii = np.tensordot(fine.integral.reshape(n_coarse, ratio, d), w, axes=([1], [0]))
    return NoisePath(eps=fine.eps, dt=fine.dt * ratio, dbeta=db, integral=ii,
                     master_seed=fine.master_seed, stream_id=fine.stream_id)


# Binary dump: 6 little-endian 64-bit header fields
# (master_seed u64, stream_id u64, eps f64, dt f64, n_steps u64, dimension u64)
# followed by the increments as little-endian float64 in (n_steps, 2, d) order,
# dbeta before integral within each step.
_HEADER = struct.Struct("<QQddQQ")


def save_path(path: NoisePath, file) -> None:
    """Write a path in the cross-implementation replay format."""
    close = False
    if isinstance(file, (str, bytes)):
        file = open(file, "wb")
        close = True
    try:
        file.write(_HEADER.pack(path.master_seed, path.stream_id, path.eps,
                                path.dt, path.n_steps, path.dimension))
        payload = np.stack([path.dbeta, path.integral], axis=1)
        file.write(payload.astype("<f8").tobytes())
    finally:
        if close:
            file.close()


def load_path(file) -> NoisePath:
    """Read a path written by save_path."""
    close = False
    if isinstance(file, (str, bytes)):
        file = open(file, "rb")
        close = True
    try:
        seed, sid, eps, dt, n, d = _HEADER.unpack(file.read(_HEADER.size))
        raw = np.frombuffer(file.read(n * 2 * d * 8), dtype="<f8").reshape(n, 2, d)
        return NoisePath(eps=eps, dt=dt, dbeta=raw[:, 0, :].copy(),
                         integral=raw[:, 1, :].copy(), master_seed=seed, stream_id=sid)
    finally:
        if close:
            file.close()
