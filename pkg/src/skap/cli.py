"""Command-line front end.

    skap COMMAND [--config FILE] [--seed N] [--threads N] [--out DIR] [--samples M]

Commands: simulate, strong-rate, weak-rate, sk-limit, ap-check, moments,
inequalities, plus ``validate COMMAND`` which checks a config without
running anything.  Every command writes plain CSV (errors.csv, rates.csv
where applicable) and a human-readable summary.txt into the output
directory, and exits 0 only if all configured assertions pass.

Exit codes: 0 pass, 2 config error, 3 assertion failure, 4 numerical
blow-up.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from .config import COMMANDS, load_config, resolve_config, validate_config
from .errors import ConfigError, IntegrationError, UsageError
from .harness import (ap_deviation, check_scalar_inequalities, fit_rate,
                      moment_sweep, sk_limit_error, strong_rate_study,
                      weak_rate_study, write_error_csv, write_rates_csv)
from .models import BUILTIN_MODELS, InitialCondition, make_model
from .noise import generate_path, save_path
from .schemes import SimConfig, integrate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSERTION = 3
EXIT_BLOWUP = 4


def _build_model(cfg):
    spec = cfg["model"]
    return make_model(spec["name"], **spec.get("params", {}))


def _build_ic(cfg, dimension):
    q0 = np.broadcast_to(np.atleast_1d(np.asarray(cfg["q0"], dtype=float)), (dimension,))
    p0 = np.broadcast_to(np.atleast_1d(np.asarray(cfg["p0"], dtype=float)), (dimension,))
    return InitialCondition(q0.copy(), p0.copy())


def _schemes(cfg):
    schemes = cfg["schemes"]
    return [schemes] if isinstance(schemes, str) else list(schemes)


def _fmt(x: float) -> str:
    return repr(float(x))


class Summary:
    """Accumulates report lines and assertion outcomes."""

    def __init__(self, title):
        self.lines = [title]
        self.failed = []

    def info(self, text):
        self.lines.append(text)

    def check(self, ok, text):
        self.lines.append(f"[{'PASS' if ok else 'FAIL'}] {text}")
        if not ok:
            self.failed.append(text)

    def write(self, out_dir):
        path = os.path.join(out_dir, "summary.txt")
        with open(path, "w") as fh:
            fh.write("\n".join(self.lines) + "\n")
        return path


def _slope_checks(summary, fits, amin, amax, label=""):
    for key, fit in sorted(fits.items(), key=repr):
        name = ", ".join(str(k) for k in (key if isinstance(key, tuple) else (key,)))
        summary.check(
            amin <= fit.slope <= amax,
            f"slope({label}{name}) = {fit.slope:.4f} in [{amin}, {amax}] "
            f"(r^2 = {fit.r_squared:.4f})",
        )


def run_simulate(cfg, out_dir):
    summary = Summary("simulate")
    model = _build_model(cfg)
    ic = _build_ic(cfg, model.dimension)
    sim = SimConfig(eps=float(cfg["eps"]), t_end=float(cfg["t_end"]),
                    n_steps=int(cfg["n_steps"]), init=ic,
                    master_seed=int(cfg["seed"]))
    path = generate_path(sim.master_seed, 0, sim.eps, sim.dt, sim.n_steps,
                         model.dimension)
    traj = integrate(cfg["scheme"], model, sim, path)
    if cfg.get("emit_paths"):
        dump = os.path.join(out_dir, "path.bin")
        save_path(path, dump)
        summary.info(f"noise path dumped to {dump}")
    d = model.dimension
    out = os.path.join(out_dir, "trajectory.csv")
    with open(out, "w") as fh:
        cols = ["t"] + [f"q{i}" for i in range(d)]
        if traj.ps is not None:
            cols += [f"p{i}" for i in range(d)]
        fh.write(",".join(cols) + "\n")
        pos = traj.positions()
        for k in range(traj.n_steps + 1):
            row = [_fmt(traj.times[k])] + [_fmt(v) for v in pos[k]]
            if traj.ps is not None:
                row += [_fmt(v) for v in traj.ps[k]]
            fh.write(",".join(row) + "\n")
    summary.info(f"model={model.name} scheme={cfg['scheme']} eps={cfg['eps']} "
                 f"n_steps={cfg['n_steps']} -> {out}")
    return summary


def run_strong_rate(cfg, out_dir):
    summary = Summary("strong-rate")
    model = _build_model(cfg)
    ic = _build_ic(cfg, model.dimension)
    schemes = _schemes(cfg)
    study = strong_rate_study(
        model, schemes, ic, cfg["eps_grid"], [int(n) for n in cfg["n_steps_grid"]],
        float(cfg["t_end"]), int(cfg["refine_ratio"]), int(cfg["samples"]),
        int(cfg["seed"]), sup_over_n=bool(cfg.get("sup_over_n", False)),
        threads=int(cfg.get("threads", 1)),
    )
    write_error_csv(study.records, os.path.join(out_dir, "errors.csv"))
    write_rates_csv(
        [(model.name, scheme, "strong-L2", "", f"eps={eps:g}", fit)
         for (scheme, eps), fit in sorted(study.fits.items(), key=repr)],
        os.path.join(out_dir, "rates.csv"),
    )
    asserts = cfg.get("assertions", {})
    amin, amax = asserts.get("slope_min"), asserts.get("slope_max")
    if amin is not None and amax is not None:
        _slope_checks(summary, study.fits, amin, amax)
    envelope = asserts.get("envelope_factor")
    if envelope is not None and len(cfg["eps_grid"]) >= 2:
        for scheme in schemes:
            worst = 0.0
            for n_steps in cfg["n_steps_grid"]:
                dt = float(cfg["t_end"]) / n_steps
                vals = [r.value for r in study.records
                        if r.scheme == scheme and abs(r.dt - dt) < 1e-12 and r.value > 0]
                if len(vals) >= 2:
                    worst = max(worst, max(vals) / min(vals))
            summary.check(worst <= envelope,
                          f"uniformity({scheme}): max/min error across eps = "
                          f"{worst:.3f} <= {envelope}")
    for eps, b in sorted(study.bias_estimates.items()):
        summary.info(f"reference self-convergence at eps={eps:g}: {b:.3e}")
    for w in study.warnings:
        summary.info(f"warning: {w}")
    return summary


def run_weak_rate(cfg, out_dir):
    summary = Summary("weak-rate")
    model = _build_model(cfg)
    ic = _build_ic(cfg, model.dimension)
    schemes = _schemes(cfg)
    mode = cfg.get("eps_mode", "fixed")
    eps_mode = "sqrt-dt" if mode == "sqrt-dt" else float(cfg["eps"])
    asserts = cfg.get("assertions", {})
    frac = asserts.get("stderr_fraction", 0.2)
    study = weak_rate_study(
        model, schemes, list(cfg["test_functions"]), ic, eps_mode,
        [int(n) for n in cfg["n_steps_grid"]], float(cfg["t_end"]),
        int(cfg["refine_ratio"]), int(cfg["samples"]), int(cfg["seed"]),
        resolve_fraction=frac, threads=int(cfg.get("threads", 1)),
    )
    write_error_csv(study.records, os.path.join(out_dir, "errors.csv"))
    group = "eps=sqrt(dt)" if mode == "sqrt-dt" else f"eps={float(cfg['eps']):g}"
    write_rates_csv(
        [(model.name, scheme, "weak", phi, group, fit)
         for (scheme, phi), fit in sorted(study.fits.items(), key=repr)],
        os.path.join(out_dir, "rates.csv"),
    )
    amin, amax = asserts.get("slope_min"), asserts.get("slope_max")
    if amin is not None and amax is not None:
        _slope_checks(summary, study.fits, amin, amax)
    if "stderr_fraction" in asserts:
        unresolved = [r for r in study.records if not r.resolved(frac)]
        summary.check(not unresolved,
                      f"all records resolved (mc standard error < {frac:.0%} of value); "
                      f"{len(unresolved)} unresolved")
    for w in study.warnings:
        summary.info(f"warning: {w}")
    return summary


def run_sk_limit(cfg, out_dir):
    summary = Summary("sk-limit")
    model = _build_model(cfg)
    ic = _build_ic(cfg, model.dimension)
    records = sk_limit_error(model, cfg["scheme"], ic, cfg["eps_grid"],
                             float(cfg["t_end"]), int(cfg["n_steps"]),
                             int(cfg["samples"]), int(cfg["seed"]),
                             threads=int(cfg.get("threads", 1)))
    write_error_csv(records, os.path.join(out_dir, "errors.csv"))
    fit = fit_rate([r for r in records if r.value > 0.0], against="eps")
    write_rates_csv([(model.name, cfg["scheme"], "sk-limit", "", "vs-eps", fit)],
                    os.path.join(out_dir, "rates.csv"))
    asserts = cfg.get("assertions", {})
    amin, amax = asserts.get("slope_min"), asserts.get("slope_max")
    if amin is not None and amax is not None:
        summary.check(amin <= fit.slope <= amax,
                      f"limit-rate slope vs eps = {fit.slope:.4f} in [{amin}, {amax}] "
                      f"(r^2 = {fit.r_squared:.4f})")
    return summary


def run_ap_check(cfg, out_dir):
    summary = Summary("ap-check")
    model_cfg = cfg.get("model")
    if model_cfg is None:
        models = [make_model(name) for name in sorted(BUILTIN_MODELS)]
    else:
        models = [_build_model(cfg)]
    tol = cfg.get("assertions", {}).get("ap_tolerance", 1e-6)
    for model in models:
        ic = _build_ic(cfg, model.dimension)
        for scheme in _schemes(cfg):
            dev = ap_deviation(model, scheme, ic, float(cfg["eps"]),
                               float(cfg["t_end"]), int(cfg["n_steps"]),
                               int(cfg["paths"]), int(cfg["seed"]))
            summary.check(dev <= tol,
                          f"max deviation {model.name}/{scheme} vs euler-maruyama "
                          f"at eps={cfg['eps']:g}: {dev:.3e} <= {tol:g}")
    return summary


def run_moments(cfg, out_dir):
    summary = Summary("moments")
    model = _build_model(cfg)
    ic = _build_ic(cfg, model.dimension)
    ratio_limit = cfg.get("assertions", {}).get("moment_ratio")
    records = []
    for scheme in _schemes(cfg):
        records.extend(moment_sweep(model, scheme, ic, cfg["eps_grid"],
                                    [int(n) for n in cfg["n_steps_grid"]],
                                    float(cfg["t_end"]), int(cfg["samples"]),
                                    int(cfg["seed"]),
                                    threads=int(cfg.get("threads", 1))))
    write_error_csv(records, os.path.join(out_dir, "errors.csv"))
    finite = all(math.isfinite(r.value) for r in records)
    summary.check(finite, "all moment estimates finite (no blow-up)")
    if ratio_limit is not None and finite:
        for scheme in _schemes(cfg):
            for n_steps in cfg["n_steps_grid"]:
                dt = float(cfg["t_end"]) / int(n_steps)
                for kind in ("max-q2", "max-p2"):
                    vals = [r.value for r in records
                            if r.scheme == scheme and r.test_function == kind
                            and abs(r.dt - dt) < 1e-12]
                    ratio = max(vals) / min(vals)
                    summary.check(ratio <= ratio_limit,
                                  f"{scheme} {kind} at dt={dt:g}: max/min over eps = "
                                  f"{ratio:.3f} <= {ratio_limit}")
    return summary


def run_inequalities(cfg, out_dir):
    summary = Summary("inequalities")
    report = check_scalar_inequalities()
    limit = 1.0 + report.tolerance
    summary.check(report.sup_exp_ratio <= limit,
                  f"sup (1-e^-tau)/sqrt(tau) = {report.sup_exp_ratio:.6f} "
                  f"(at tau={report.sup_exp_ratio_at:.4f}) <= {limit}")
    summary.check(report.sup_resolvent_gap <= limit,
                  f"sup (n+1)((1+tau)^-n - e^-n*tau) = {report.sup_resolvent_gap:.6f} "
                  f"(at n={report.sup_resolvent_gap_at[0]}, "
                  f"tau={report.sup_resolvent_gap_at[1]:.4f}) <= {limit}")
    return summary


_RUNNERS = {
    "simulate": run_simulate,
    "strong-rate": run_strong_rate,
    "weak-rate": run_weak_rate,
    "sk-limit": run_sk_limit,
    "ap-check": run_ap_check,
    "moments": run_moments,
    "inequalities": run_inequalities,
}


def _parser():
    p = argparse.ArgumentParser(prog="skap", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=list(COMMANDS) + ["validate"])
    p.add_argument("validate_target", nargs="?", default=None,
                   help="command whose config to validate (for 'validate')")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="override master seed")
    p.add_argument("--samples", type=int, help="override Monte Carlo sample count")
    p.add_argument("--threads", type=int, help="worker count (results are identical for any value)")
    p.add_argument("--out", help="output directory (default from config)")
    return p


def run(command: str, config_path: str | None = None, overrides: dict | None = None) -> int:
    """Resolve config, run one command, write artifacts; returns the exit code."""
    try:
        file_cfg = load_config(config_path) if config_path else {}
        cfg = resolve_config(command, file_cfg, overrides)
        diags = validate_config(command, cfg)
        errors = [d for d in diags if d.severity == "error"]
        for d in diags:
            print(d, file=sys.stderr)
        if errors:
            return EXIT_CONFIG
    except ConfigError as exc:
        for d in exc.diagnostics:
            print(f"error: {d}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = cfg.get("out_dir", "out")
    os.makedirs(out_dir, exist_ok=True)
    try:
        summary = _RUNNERS[command](cfg, out_dir)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationError as exc:
        print(f"numerical blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    path = summary.write(out_dir)
    print("\n".join(summary.lines))
    print(f"summary written to {path}")
    return EXIT_ASSERTION if summary.failed else EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    overrides = {k: getattr(args, a) for k, a in
                 (("seed", "seed"), ("samples", "samples"),
                  ("threads", "threads"), ("out_dir", "out"))
                 if getattr(args, a) is not None}
    if args.command == "validate":
        target = args.validate_target
        if target is None or target not in COMMANDS:
            print(f"error: validate needs a target command, one of: {', '.join(COMMANDS)}",
                  file=sys.stderr)
            return EXIT_CONFIG
        try:
            file_cfg = load_config(args.config) if args.config else {}
            cfg = resolve_config(target, file_cfg, overrides)
        except ConfigError as exc:
            for d in exc.diagnostics:
                print(f"error: {d}", file=sys.stderr)
            return EXIT_CONFIG
        diags = validate_config(target, cfg)
        for d in diags:
            print(d)
        if not diags:
            print("config ok")
        return EXIT_CONFIG if any(d.severity == "error" for d in diags) else EXIT_OK
    if args.validate_target is not None:
        print("error: positional target is only valid with 'validate'", file=sys.stderr)
        return EXIT_CONFIG
    return run(args.command, args.config, overrides)


if __name__ == "__main__":
    sys.exit(main())
