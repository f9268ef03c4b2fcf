"""Chunk-vectorized Monte Carlo kernels behind the experiment harness.

Samples are independent work units: sample s of an experiment seeded with
master_seed consumes exactly the noise stream (master_seed, s) defined in
:mod:`skap.noise`, at the experiment's finest grid.  Kernels advance a
chunk of samples per numpy call and reduce each chunk to a handful of
scalar/vector accumulator partials.  Chunk boundaries are a pure function
of the problem size (never of the worker count), and partials are combined
in chunk order, so every statistic is bit-reproducible for any ``threads``
setting.  With ``threads > 1`` chunks are farmed to a process pool; the
payloads carry (model name, params) and observable names so workers can
rebuild them, which restricts parallel runs to registry-backed models
(custom models fall back to sequential execution).
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .errors import IntegrationError
from .models import BUILTIN_MODELS, ModelSpec, make_model
from .noise import cholesky_factors, coarsening_weights, stream_generator
from .observables import get_test_function

_CHUNK_ELEMENT_BUDGET = 1 << 24  # per increment array, in float64 elements


def _chunk_size(n_fine: int, dim: int, n_samples: int) -> int:
    c = _CHUNK_ELEMENT_BUDGET // max(n_fine * dim, 1)
    return max(1, min(4096, c, n_samples))


def _chunk_ranges(n_samples: int, chunk: int):
    return [(s, min(s + chunk, n_samples)) for s in range(0, n_samples, chunk)]


def _draw_increments(master_seed, s0, s1, n_steps, dim, eps, dt):
    """Per-sample streams, transformed to (dbeta, integral) chunk arrays."""
    c = s1 - s0
    db = np.empty((c, n_steps, dim))
    ii = np.empty((c, n_steps, dim))
    l11, l21, l22 = cholesky_factors(eps, dt)
    for i, s in enumerate(range(s0, s1)):
        z = stream_generator(master_seed, s).standard_normal((n_steps, 2, dim))
        db[i] = l11 * z[:, 0, :]
        ii[i] = l21 * z[:, 0, :] + l22 * z[:, 1, :]
    return db, ii


def _batch_stepper(scheme: str, model: ModelSpec, eps: float, dt: float):
    """Return (step, init, position) callables for batch states of shape (c, d).

    ``step(q, p, db, ii) -> (q, p)`` advances one time step; ``init(ic, c)``
    builds the start state; ``position(q, p)`` extracts the physical
    position (identity except in QP coordinates).
    """
    x = dt / eps**2
    u = -np.expm1(-x)
    decay = np.exp(-x)
    diag = model.diffusion_diag
    if diag is None:
        full = model.diffusion

        def sigma_dot(q, v):
            return np.einsum("...ij,...j->...i", full(q), v)
    else:

        def sigma_dot(q, v):
            return diag(q) * v

    drift = model.drift

    def broadcast(v, c):
        return np.broadcast_to(v, (c, v.shape[-1])).copy()

    if scheme == "semi-implicit":
        c1 = dt / eps
        c2 = 1.0 / (1.0 + x)
        inv_eps = 1.0 / eps

        def step(q, p, db, ii):
            p1 = (p + c1 * drift(q) + inv_eps * sigma_dot(q, db)) * c2
            return q + c1 * p1, p1

        def init(ic, c):
            return broadcast(ic.q0, c), broadcast(ic.p0, c)

        position = lambda q, p: q

    elif scheme == "exponential":
        a1 = eps * u
        a2 = dt - eps**2 * u
        inv_eps = 1.0 / eps

        def step(q, p, db, ii):
            fq = drift(q)
            if diag is not None:
                sg = diag(q)
                nq, npp = sg * (db - ii), sg * ii
            else:
                nq, npp = sigma_dot(q, db - ii), sigma_dot(q, ii)
            return (q + a1 * p + a2 * fq + nq,
                    decay * p + a1 * fq + inv_eps * npp)

        def init(ic, c):
            return broadcast(ic.q0, c), broadcast(ic.p0, c)

        position = lambda q, p: q

    elif scheme == "euler-maruyama":

        def step(q, p, db, ii):
            return q + dt * drift(q) + sigma_dot(q, db), p

        def init(ic, c):
            return broadcast(ic.q0_limit, c), np.zeros((c, ic.q0.shape[-1]))

        position = lambda q, p: q

    elif scheme == "semi-implicit-qp":
        c2 = 1.0 / (1.0 + x)

        def step(Q, P, db, ii):
            q = Q - P
            incr = dt * drift(q) + sigma_dot(q, db)
            return Q + incr, (P + incr) * c2

        def init(ic, c):
            return broadcast(ic.q0 + eps * ic.p0, c), broadcast(eps * ic.p0, c)

        position = lambda q, p: q - p

    elif scheme == "exponential-qp":
        a3 = eps**2 * u

        def step(Q, P, db, ii):
            q = Q - P
            fq = drift(q)
            if diag is not None:
                sg = diag(q)
                nq, npp = sg * db, sg * ii
            else:
                nq, npp = sigma_dot(q, db), sigma_dot(q, ii)
            return Q + dt * fq + nq, decay * P + a3 * fq + npp

        def init(ic, c):
            return broadcast(ic.q0 + eps * ic.p0, c), broadcast(eps * ic.p0, c)

        position = lambda q, p: q - p

    else:
        raise IntegrationError(f"engine has no stepper for scheme '{scheme}'")

    return step, init, position


def _require_finite(q, label):
    if not np.all(np.isfinite(q)):
        raise IntegrationError(f"non-finite state in {label}")


_BLOCK_FINE_STEPS = 4096


def _coupled_chunk(model, scheme_ids, phi_names, eps, dt, n_coarse, refine_ratio,
                   s0, s1, master_seed, ic, sup_over_n):
    """One chunk of the coupled fine-reference experiment.

    Builds each sample's fine path, aggregates it exactly to the coarse
    grid, runs the exponential reference on the fine increments and every
    requested scheme on the coarse increments of the *same* path, and
    reduces to moment partials of the coupled differences.

    The fine path is drawn in time blocks (aligned to coarse steps) so long
    paths never force small sample chunks; each sample's generator persists
    across blocks, and numpy streams are invariant under draw splitting, so
    the values equal a single whole-path draw.
    """
    d = model.dimension
    n_fine = n_coarse * refine_ratio
    dt_fine = dt / refine_ratio
    c = s1 - s0
    gens = [stream_generator(master_seed, s) for s in range(s0, s1)]
    l11, l21, l22 = cholesky_factors(eps, dt_fine)
    weights = coarsening_weights(refine_ratio, eps, dt_fine)

    block = refine_ratio * max(1, _BLOCK_FINE_STEPS // refine_ratio)
    block = min(block, n_fine)
    db = np.empty((c, block, d))
    ii = np.empty((c, block, d))
    dbc = np.empty((c, n_coarse, d))
    iic = np.empty((c, n_coarse, d))
    tot_f = np.zeros((c, d))

    ref_step, ref_init, _ = _batch_stepper("exponential", model, eps, dt_fine)
    q, p = ref_init(ic, c)
    ref_nodes = None
    if sup_over_n:
        ref_nodes = np.empty((n_coarse + 1, c, d))
        ref_nodes[0] = q
    for k0 in range(0, n_fine, block):
        nb = min(block, n_fine - k0)
        for i, gen in enumerate(gens):
            z = gen.standard_normal((nb, 2, d))
            db[i, :nb] = l11 * z[:, 0, :]
            ii[i, :nb] = l21 * z[:, 0, :] + l22 * z[:, 1, :]
        c0 = k0 // refine_ratio
        nc = nb // refine_ratio
        dbc[:, c0:c0 + nc] = db[:, :nb].reshape(c, nc, refine_ratio, d).sum(axis=2)
        iic[:, c0:c0 + nc] = np.tensordot(
            ii[:, :nb].reshape(c, nc, refine_ratio, d), weights, axes=([2], [0]))
        tot_f += db[:, :nb].sum(axis=1)
        for k in range(nb):
            q, p = ref_step(q, p, db[:, k, :], ii[:, k, :])
            if sup_over_n and (k0 + k + 1) % refine_ratio == 0:
                ref_nodes[(k0 + k + 1) // refine_ratio] = q
    _require_finite(q, f"reference (eps={eps}, dt={dt_fine})")
    q_ref = q

    # coupling integrity: scheme and reference must consume the same Brownian
    # path, so the block-summed coarse increments must re-total the fine ones
    if not np.allclose(dbc.sum(axis=1), tot_f, rtol=1e-10, atol=1e-10):
        raise IntegrationError("coarse/fine increment checksum mismatch")

    phis = [(name, get_test_function(name)) for name in phi_names]
    out = {}
    for scheme in scheme_ids:
        step, init, position = _batch_stepper(scheme, model, eps, dt)
        qs, ps = init(ic, c)
        per_n = np.zeros(n_coarse + 1) if sup_over_n else None
        per_n_sq = np.zeros(n_coarse + 1) if sup_over_n else None
        for n in range(n_coarse):
            qs, ps = step(qs, ps, dbc[:, n, :], iic[:, n, :])
            if sup_over_n:
                e_n = ((position(qs, ps) - ref_nodes[n + 1]) ** 2).sum(axis=1)
                per_n[n + 1] = e_n.sum()
                per_n_sq[n + 1] = (e_n * e_n).sum()
        _require_finite(qs, f"scheme {scheme} (eps={eps}, dt={dt})")
        pos = position(qs, ps)
        e = ((pos - q_ref) ** 2).sum(axis=1)
        stats = {"sq_sum": float(e.sum()), "sq_sq_sum": float((e * e).sum())}
        if sup_over_n:
            stats["per_n"] = per_n
            stats["per_n_sq"] = per_n_sq
        for name, phi in phis:
            dphi = phi(pos) - phi(q_ref)
            stats[f"phi_sum:{name}"] = float(dphi.sum())
            stats[f"phi_sq_sum:{name}"] = float((dphi * dphi).sum())
        out[scheme] = stats
    return out


def _limit_chunk(model, scheme_id, eps, dt, n_steps, s0, s1, master_seed, ic, track_sup):
    """One chunk of the eps-scheme vs limiting-scheme coupling (shared dbeta)."""
    d = model.dimension
    c = s1 - s0
    db, ii = _draw_increments(master_seed, s0, s1, n_steps, d, eps, dt)
    step_e, init_e, pos_e = _batch_stepper(scheme_id, model, eps, dt)
    step_0, init_0, _ = _batch_stepper("euler-maruyama", model, eps, dt)
    q, p = init_e(ic, c)
    q0, p0 = init_0(ic, c)
    sup_dev = 0.0
    for n in range(n_steps):
        q, p = step_e(q, p, db[:, n, :], ii[:, n, :])
        q0, p0 = step_0(q0, p0, db[:, n, :], ii[:, n, :])
        if track_sup:
            sup_dev = max(sup_dev, float(np.abs(pos_e(q, p) - q0).max()))
    _require_finite(q, f"scheme {scheme_id} (eps={eps}, dt={dt})")
    _require_finite(q0, f"euler-maruyama (dt={dt})")
    e = ((pos_e(q, p) - q0) ** 2).sum(axis=1)
    return {"sq_sum": float(e.sum()), "sq_sq_sum": float((e * e).sum()),
            "sup_dev": sup_dev}


def _moment_chunk(model, scheme_id, eps, dt, n_steps, s0, s1, master_seed, ic):
    """One chunk of per-step second-moment accumulation.

    Tracks sums and squared sums of |q_n|^2 and |p_n|^2 so the sweep can
    attach a standard error to the worst-over-n moment.
    """
    d = model.dimension
    c = s1 - s0
    db, ii = _draw_increments(master_seed, s0, s1, n_steps, d, eps, dt)
    step, init, position = _batch_stepper(scheme_id, model, eps, dt)
    q, p = init(ic, c)
    q2 = np.zeros(n_steps + 1)
    p2 = np.zeros(n_steps + 1)
    q2_sq = np.zeros(n_steps + 1)
    p2_sq = np.zeros(n_steps + 1)

    def record(n, qn, pn):
        eq = (qn**2).sum(axis=1)
        ep = (pn**2).sum(axis=1)
        q2[n] = eq.sum()
        p2[n] = ep.sum()
        q2_sq[n] = (eq * eq).sum()
        p2_sq[n] = (ep * ep).sum()

    record(0, position(q, p), p)
    blew_up = False
    for n in range(n_steps):
        q, p = step(q, p, db[:, n, :], ii[:, n, :])
        qn = position(q, p)
        if not (np.all(np.isfinite(qn)) and np.all(np.isfinite(p))):
            blew_up = True
            break
        record(n + 1, qn, p)
    return {"q2": q2, "p2": p2, "q2_sq": q2_sq, "p2_sq": p2_sq, "blew_up": blew_up}


# -- parallel dispatch --------------------------------------------------------

_KERNELS = {
    "coupled": _coupled_chunk,
    "limit": _limit_chunk,
    "moment": _moment_chunk,
}


def _pool_worker(payload):
    kernel, model_name, model_params, args = payload
    model = make_model(model_name, **model_params)
    return _KERNELS[kernel](model, *args)


def _run_chunks(kernel: str, model: ModelSpec, make_args, n_samples: int,
                n_fine: int, threads: int):
    """Run one kernel over all sample chunks, preserving chunk order.

    ``make_args(s0, s1)`` produces the kernel's positional arguments after
    ``model``.  Returns the list of chunk partials in chunk-index order.
    """
    chunk = _chunk_size(n_fine, model.dimension, n_samples)
    ranges = _chunk_ranges(n_samples, chunk)
    fn = _KERNELS[kernel]
    parallel_ok = (
        threads > 1
        and len(ranges) > 1
        and model.name in BUILTIN_MODELS
    )
    if not parallel_ok:
        return [fn(model, *make_args(s0, s1)) for s0, s1 in ranges]
    payloads = [(kernel, model.name, dict(model.params), make_args(s0, s1))
                for s0, s1 in ranges]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_pool_worker, payloads))


def coupled_stats(model, scheme_ids, phi_names, eps, dt, n_coarse, refine_ratio,
                  n_samples, master_seed, ic, sup_over_n=False, threads=1):
    """Coupled-difference moments of every scheme against the shared fine reference.

    Returns {scheme: {"sq_sum", "sq_sq_sum"[, "per_n", "per_n_sq"]
    [, "phi_sum:<name>", "phi_sq_sum:<name>"]}} accumulated over all samples.
    """
    scheme_ids = tuple(scheme_ids)
    phi_names = tuple(phi_names)

    def make_args(s0, s1):
        return (scheme_ids, phi_names, eps, dt, n_coarse, refine_ratio,
                s0, s1, master_seed, ic, sup_over_n)

    # memory scales with the draw block, not the whole fine path
    block = min(refine_ratio * max(1, _BLOCK_FINE_STEPS // refine_ratio),
                n_coarse * refine_ratio)
    partials = _run_chunks("coupled", model, make_args, n_samples, block, threads)
    out = {}
    for part in partials:
        for scheme, stats in part.items():
            acc = out.setdefault(scheme, {})
            for key, val in stats.items():
                if key in acc:
                    acc[key] = acc[key] + val
                else:
                    acc[key] = val
    return out


def limit_stats(model, scheme_id, eps, dt, n_steps, n_samples, master_seed, ic,
                track_sup=False, threads=1):
    """Terminal mean-square gap (and optional sup-norm gap) to the coupled limiting scheme."""

    def make_args(s0, s1):
        return (scheme_id, eps, dt, n_steps, s0, s1, master_seed, ic, track_sup)

    partials = _run_chunks("limit", model, make_args, n_samples, n_steps, threads)
    return {
        "sq_sum": sum(p["sq_sum"] for p in partials),
        "sq_sq_sum": sum(p["sq_sq_sum"] for p in partials),
        "sup_dev": max(p["sup_dev"] for p in partials),
    }


def moment_stats(model, scheme_id, eps, dt, n_steps, n_samples, master_seed, ic,
                 threads=1):
    """Per-step sums of |q_n|^2 and |p_n|^2 over samples, plus a blow-up flag."""

    def make_args(s0, s1):
        return (scheme_id, eps, dt, n_steps, s0, s1, master_seed, ic)

    partials = _run_chunks("moment", model, make_args, n_samples, n_steps, threads)
    return {
        "q2": np.sum([p["q2"] for p in partials], axis=0),
        "p2": np.sum([p["p2"] for p in partials], axis=0),
        "q2_sq": np.sum([p["q2_sq"] for p in partials], axis=0),
        "p2_sq": np.sum([p["p2_sq"] for p in partials], axis=0),
        "blew_up": any(p["blew_up"] for p in partials),
    }
