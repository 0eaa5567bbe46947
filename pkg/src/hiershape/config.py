"""Run settings with precedence: command-line flags > config file > defaults."""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ParseError
from .inference import EMConfig
from .model import DEFAULT_BETA, DEFAULT_EPSILON, DEFAULT_SIGMA, KernelConfig
from .sampler import HMCConfig

DEFAULTS = {
    # model
    "sigma": DEFAULT_SIGMA,
    "beta": DEFAULT_BETA,
    "epsilon": DEFAULT_EPSILON,
    # sampler
    "step_size": HMCConfig.step_size,
    "n_leapfrog": HMCConfig.n_leapfrog,
    "hmc_iter": HMCConfig.n_iter,
    "max_phase": HMCConfig.max_phase,
    # EM
    "max_iter": EMConfig.max_iter,
    "n_samples": EMConfig.n_samples,
    "burn_in": EMConfig.burn_in,
    "tol": EMConfig.tol,
    "cyclic_init": EMConfig.cyclic_init,
    "init_covariance": EMConfig.init_covariance,
    # analysis
    "max_perms": 200,
    "classify_samples": 500,
    # shared
    "seed": 0,
}


def load_config_file(path) -> dict:
    """Read a JSON object of settings; unknown keys are rejected."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", str(path), exc.lineno) from None
    if not isinstance(doc, dict):
        raise ParseError("config must be a JSON object", str(path))
    unknown = sorted(set(doc) - set(DEFAULTS))
    if unknown:
        raise ParseError(f"unknown setting(s): {', '.join(unknown)}", str(path))
    return doc


def resolve(flags: dict | None = None, config_path=None) -> dict:
    """Merge defaults, then the config file, then every flag that is not ``None``."""
    settings = dict(DEFAULTS)
    if config_path is not None:
        settings.update(load_config_file(config_path))
    for key, value in (flags or {}).items():
        if key in DEFAULTS and value is not None:
            settings[key] = value
    return settings


def em_config(settings: dict, trace_dir=None) -> EMConfig:
    beta = settings["beta"]
    betas = list(beta) if isinstance(beta, (list, tuple)) else [float(beta)]
    hmc = HMCConfig(step_size=float(settings["step_size"]), n_leapfrog=int(settings["n_leapfrog"]),
                    n_iter=int(settings["hmc_iter"]), seed=int(settings["seed"]),
                    max_phase=settings["max_phase"])
    return EMConfig(max_iter=int(settings["max_iter"]), n_samples=int(settings["n_samples"]),
                    burn_in=int(settings["burn_in"]), tol=float(settings["tol"]),
                    kernel=KernelConfig(float(settings["sigma"])), hmc=hmc,
                    epsilon=float(settings["epsilon"]), betas=betas,
                    cyclic_init=bool(settings["cyclic_init"]),
                    init_covariance=str(settings["init_covariance"]),
                    trace_dir=None if trace_dir is None else str(trace_dir))
