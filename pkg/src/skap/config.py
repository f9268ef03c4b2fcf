"""Experiment configuration: JSON files, per-command presets, validation.

A config file is a single JSON object; any key omitted falls back to the
command's preset, and command-line flags (--seed, --samples, --threads,
--out) override both.  The presets encode the package's standard
verification experiments, so every command runs out of the box with no
config at all.  See docs/config.md for an annotated walk-through.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ConfigError
from .models import BUILTIN_MODELS
from .observables import TEST_FUNCTIONS
from .schemes import SCHEME_IDS


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    message: str

    def __str__(self):
        return f"{self.severity}: {self.message}"


COMMANDS = ("simulate", "strong-rate", "weak-rate", "sk-limit", "ap-check",
            "moments", "inequalities")

_COMMON_KEYS = {
    "model", "schemes", "scheme", "eps", "eps_grid", "eps_mode", "t_end",
    "n_steps", "n_steps_grid", "refine_ratio", "samples", "seed",
    "test_functions", "q0", "p0", "out_dir", "threads", "sup_over_n",
    "emit_paths", "assertions", "paths",
}

_ASSERTION_KEYS = {
    "slope_min", "slope_max", "envelope_factor", "stderr_fraction",
    "moment_ratio", "ap_tolerance",
}

_DT_SWEEP = [16, 32, 64, 128, 256, 512]

PRESETS = {
    "simulate": {
        "model": {"name": "tanh-diffusion", "params": {"dimension": 1}},
        "scheme": "exponential",
        "eps": 0.1,
        "t_end": 1.0,
        "n_steps": 100,
        "seed": 123456789,
        "q0": [1.0],
        "p0": [1.0],
        "out_dir": "out",
    },
    "strong-rate": {
        "model": {"name": "tanh-diffusion", "params": {"dimension": 1}},
        "schemes": ["semi-implicit", "exponential"],
        "eps_grid": [1.0, 0.1, 0.01, 1e-4],
        "t_end": 1.0,
        "n_steps_grid": _DT_SWEEP,
        "refine_ratio": 64,
        "samples": 10_000,
        "seed": 123456789,
        "q0": [1.0],
        "p0": [1.0],
        "sup_over_n": False,
        "threads": 1,
        "out_dir": "out",
        "assertions": {"slope_min": 0.35, "slope_max": 0.65, "envelope_factor": 3.0},
    },
    "weak-rate": {
        "model": {"name": "tanh-diffusion", "params": {"dimension": 1}},
        "schemes": ["exponential"],
        "test_functions": ["tanh"],
        "eps": 1e-6,
        "eps_mode": "fixed",
        "t_end": 1.0,
        "n_steps_grid": _DT_SWEEP,
        "refine_ratio": 16,
        "samples": 100_000,
        "seed": 123456789,
        "q0": [1.5],
        "p0": [1.0],
        "threads": 1,
        "out_dir": "out",
        "assertions": {"slope_min": 0.8, "slope_max": 1.2, "stderr_fraction": 0.2},
    },
    "sk-limit": {
        "model": {"name": "tanh-diffusion", "params": {"dimension": 1}},
        "scheme": "semi-implicit",
        "eps_grid": [2.0**-k for k in range(1, 7)],
        "t_end": 1.0,
        "n_steps": 1024,
        "samples": 10_000,
        "seed": 123456789,
        "q0": [1.0],
        "p0": [1.0],
        "threads": 1,
        "out_dir": "out",
        "assertions": {"slope_min": 0.8, "slope_max": 1.2},
    },
    "ap-check": {
        "model": None,  # None = every built-in model
        "schemes": ["semi-implicit", "exponential"],
        "eps": 1e-8,
        "t_end": 1.0,
        "n_steps": 100,
        "paths": 200,
        "seed": 123456789,
        "q0": [1.0],
        "p0": [1.0],
        "out_dir": "out",
        "assertions": {"ap_tolerance": 1e-6},
    },
    "moments": {
        "model": {"name": "tanh-diffusion", "params": {"dimension": 1}},
        "schemes": ["semi-implicit", "exponential"],
        "eps_grid": [1.0, 0.1, 0.01, 1e-3, 1e-4, 1e-5, 1e-6],
        "t_end": 1.0,
        "n_steps_grid": [100],
        "samples": 1000,
        "seed": 123456789,
        "q0": [1.5],
        "p0": [1.0],
        "threads": 1,
        "out_dir": "out",
        "assertions": {"moment_ratio": 2.0},
    },
    "inequalities": {
        "out_dir": "out",
    },
}


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config file must contain a JSON object")
    return cfg


def resolve_config(command: str, file_cfg: dict | None = None,
                   overrides: dict | None = None) -> dict:
    """Preset <- config file <- CLI overrides, shallow-merged per key."""
    if command not in PRESETS:
        raise ConfigError(f"unknown command '{command}'; valid: {', '.join(COMMANDS)}")
    cfg = {k: (dict(v) if isinstance(v, dict) else list(v) if isinstance(v, list) else v)
           for k, v in PRESETS[command].items()}
    for layer in (file_cfg or {}), (overrides or {}):
        for key, val in layer.items():
            if val is None:
                continue
            if key == "assertions" and isinstance(val, dict) and isinstance(cfg.get(key), dict):
                cfg[key].update(val)
            else:
                cfg[key] = val
    return cfg


def _check_positive_number(cfg, key, diags, required=True):
    val = cfg.get(key)
    if val is None:
        if required:
            diags.append(Diagnostic("error", f"missing '{key}'"))
        return
    if not isinstance(val, (int, float)) or isinstance(val, bool) or not val > 0:
        diags.append(Diagnostic("error", f"'{key}' must be a positive number, got {val!r}"))


def _check_grid(cfg, key, diags, integer=False):
    grid = cfg.get(key)
    if grid is None:
        diags.append(Diagnostic("error", f"missing '{key}'"))
        return
    if not isinstance(grid, list) or not grid:
        diags.append(Diagnostic("error", f"'{key}' grid empty"))
        return
    for v in grid:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            diags.append(Diagnostic("error", f"'{key}' entries must be positive, got {v!r}"))
            return
        if integer and not (isinstance(v, int) or float(v).is_integer()):
            diags.append(Diagnostic("error", f"'{key}' entries must be integers, got {v!r}"))
            return


def _check_model(cfg, diags, allow_none=False):
    model = cfg.get("model")
    if model is None:
        if not allow_none:
            diags.append(Diagnostic("error", "missing 'model'"))
        return
    if not isinstance(model, dict) or "name" not in model:
        diags.append(Diagnostic("error", "'model' must be an object with a 'name'"))
        return
    if model["name"] not in BUILTIN_MODELS:
        diags.append(Diagnostic(
            "error",
            f"unknown model '{model['name']}'; built-ins: {', '.join(sorted(BUILTIN_MODELS))}",
        ))


def _check_schemes(cfg, diags, key="schemes"):
    schemes = cfg.get(key)
    if schemes is None:
        diags.append(Diagnostic("error", f"missing '{key}'"))
        return
    if isinstance(schemes, str):
        schemes = [schemes]
    for s in schemes:
        if s not in SCHEME_IDS:
            diags.append(Diagnostic(
                "error", f"unknown scheme '{s}'; valid: {', '.join(SCHEME_IDS)}"))


def _check_seed(cfg, diags):
    seed = cfg.get("seed")
    if seed is None:
        diags.append(Diagnostic("error", "missing 'seed'"))
    elif isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        diags.append(Diagnostic("error", f"'seed' must be a nonnegative integer, got {seed!r}"))


def validate_config(command: str, cfg: dict) -> list[Diagnostic]:
    """Structural checks only; never runs an experiment."""
    diags: list[Diagnostic] = []
    if command not in PRESETS:
        return [Diagnostic("error", f"unknown command '{command}'")]
    for key in cfg:
        if key not in _COMMON_KEYS:
            diags.append(Diagnostic("warning", f"unknown config key '{key}' is ignored"))
    assertions = cfg.get("assertions", {})
    if not isinstance(assertions, dict):
        diags.append(Diagnostic("error", "'assertions' must be an object"))
    else:
        for key in assertions:
            if key not in _ASSERTION_KEYS:
                diags.append(Diagnostic("warning", f"unknown assertion key '{key}' is ignored"))

    if command == "inequalities":
        return diags

    _check_seed(cfg, diags)
    _check_positive_number(cfg, "t_end", diags)

    if command == "simulate":
        _check_model(cfg, diags)
        _check_schemes(cfg, diags, key="scheme")
        _check_positive_number(cfg, "eps", diags)
        _check_positive_number(cfg, "n_steps", diags)
        return diags

    if command == "ap-check":
        _check_model(cfg, diags, allow_none=True)
        _check_schemes(cfg, diags)
        _check_positive_number(cfg, "eps", diags)
        _check_positive_number(cfg, "n_steps", diags)
        _check_positive_number(cfg, "paths", diags)
        return diags

    _check_model(cfg, diags)
    if command in ("strong-rate", "weak-rate", "moments"):
        _check_schemes(cfg, diags)
        _check_grid(cfg, "n_steps_grid", diags, integer=True)
        _check_positive_number(cfg, "samples", diags)
    if command == "strong-rate":
        _check_grid(cfg, "eps_grid", diags)
        _check_positive_number(cfg, "refine_ratio", diags)
        ratio = cfg.get("refine_ratio")
        if isinstance(ratio, (int, float)) and 0 < ratio < 2:
            diags.append(Diagnostic(
                "warning",
                "refine_ratio=1 makes the reference as coarse as the scheme; "
                "expect the bias budget check to fail (use >= 2)",
            ))
    if command == "weak-rate":
        mode = cfg.get("eps_mode", "fixed")
        if mode not in ("fixed", "sqrt-dt"):
            diags.append(Diagnostic("error", f"'eps_mode' must be 'fixed' or 'sqrt-dt', got {mode!r}"))
        elif mode == "fixed":
            _check_positive_number(cfg, "eps", diags)
        _check_positive_number(cfg, "refine_ratio", diags)
        phis = cfg.get("test_functions")
        if not phis:
            diags.append(Diagnostic("error", "'test_functions' grid empty"))
        else:
            for name in phis:
                if name not in TEST_FUNCTIONS:
                    diags.append(Diagnostic(
                        "error",
                        f"unknown test function '{name}'; built-ins: "
                        f"{', '.join(sorted(TEST_FUNCTIONS))}",
                    ))
    if command == "sk-limit":
        _check_schemes(cfg, diags, key="scheme")
        _check_grid(cfg, "eps_grid", diags)
        _check_positive_number(cfg, "n_steps", diags)
        _check_positive_number(cfg, "samples", diags)
    if command == "moments":
        _check_grid(cfg, "eps_grid", diags)
    return diags
