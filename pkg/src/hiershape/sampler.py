"""Projected-gradient HMC on the pre-shape sphere and the Gibbs sweep over hidden shapes."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .data import HiddenState, SampleSet
from .errors import NonFiniteEnergy
from .geometry import RHO, optimal_rotation, project_gradient, remove_rotation
from .model import JointDensity

# target(u) -> (log density, raw gradient shaped like u)
Target = Callable[[np.ndarray], tuple[float, np.ndarray]]


@dataclass(frozen=True)
class HMCConfig:
    step_size: float = 5e-3
    n_leapfrog: int = 20
    n_iter: int = 1
    seed: int = 0
    # cap on step_size * sqrt(curvature) per block; None disables the cap
    max_phase: float | None = 1.0

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.n_leapfrog < 1 or self.n_iter < 1:
            raise ValueError("n_leapfrog and n_iter must be >= 1")


@dataclass
class HMCResult:
    state: np.ndarray
    accepted: bool
    delta_h: float
    nonfinite: bool = False


def _renormalize(q, rho):
    q = q - q.mean(axis=0)
    return q * (rho / np.linalg.norm(q))


def _geodesic_flow(q, p, eps, rho):
    """Move along the great circle with velocity ``p`` for time ``eps``; returns the new
    position and the transported velocity (same speed, tangent at the new point)."""
    speed = np.linalg.norm(p)
    if speed == 0.0:
        return q.copy(), p.copy()
    theta = eps * speed / rho
    c, s = np.cos(theta), np.sin(theta)
    q_new = c * q + (rho * s / speed) * p
    p_new = c * p - (speed * s / rho) * q
    return q_new, p_new


def _shape_direction(v, q):
    """Tangent projection followed by removal of the rotational component."""
    return remove_rotation(project_gradient(v, q), q)


def leapfrog(q, p, target: Target, step_size: float, n_steps: int,
             constrained: bool = True, rho: float = RHO):
    """Integrate Hamiltonian dynamics for ``n_steps`` leapfrog steps.

    Unconstrained mode is the textbook kick-drift-kick scheme in ``R^{TD}``.
    Constrained mode keeps ``q`` on the pre-shape sphere: gradients and
    momenta are projected to the tangent space with the rotational direction
    removed, drifts follow great circles, and after each drift position and
    momentum are rotated back onto the pre-drift pose (a second-order correction).

    Returns ``(q, p, log_density, raw_gradient)`` at the end point.
    """
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    logp, raw = target(q)
    grad = _shape_direction(raw, q) if constrained else raw
    for _ in range(n_steps):
        p = p + 0.5 * step_size * grad
        if constrained:
            q_new, p = _geodesic_flow(q, p, step_size, rho)
            r = optimal_rotation(q_new, q)
            q = _renormalize(q_new @ r.T, rho)
            p = _shape_direction(p @ r.T, q)
        else:
            q = q + step_size * p
        logp, raw = target(q)
        if not (np.isfinite(logp) and np.all(np.isfinite(raw))):
            return q, p, logp, raw
        grad = _shape_direction(raw, q) if constrained else raw
        p = p + 0.5 * step_size * grad
    return q, p, logp, raw


def _metropolis_accept(log_ratio: float, rng: np.random.Generator) -> bool:
    return bool(np.log(rng.uniform()) < log_ratio)


def hmc_update(target: Target, current, cfg: HMCConfig, rng: np.random.Generator,
               rho: float = RHO) -> HMCResult:
    """One Metropolis-corrected projected-HMC transition from ``current``.

    Raises :class:`NonFiniteEnergy` only if the current state itself has a
    non-finite energy; a non-finite proposal is rejected and flagged.
    """
    current = np.asarray(current, dtype=float)
    logp0, raw0 = target(current)
    if not np.isfinite(logp0):
        raise NonFiniteEnergy("log density is not finite at the current state")
    p0 = _shape_direction(rng.standard_normal(current.shape), current)
    h0 = -logp0 + 0.5 * np.vdot(p0, p0)
    q1, p1, logp1, _ = leapfrog(current, p0, target, cfg.step_size, cfg.n_leapfrog, True, rho)
    h1 = -logp1 + 0.5 * np.vdot(p1, p1)
    if not np.isfinite(h1):
        rng.uniform()  # keep the stream aligned with the finite branch
        return HMCResult(current.copy(), False, np.inf, nonfinite=True)
    if _metropolis_accept(h0 - h1, rng):
        return HMCResult(q1, True, float(h1 - h0))
    return HMCResult(current.copy(), False, float(h1 - h0))


def _record(samples: SampleSet | None, key: str, accepted: bool):
    if samples is None:
        return
    samples.proposed[key] = samples.proposed.get(key, 0) + 1
    samples.accepted[key] = samples.accepted.get(key, 0) + int(accepted)


def _block_config(cfg: HMCConfig, density: JointDensity, kind: str, g: int) -> HMCConfig:
    """Shrink the step for stiff conditionals so leapfrog stays well inside its stability limit."""
    if cfg.max_phase is None:
        return cfg
    limit = cfg.max_phase / np.sqrt(density.curvature_bound(kind, g))
    if limit >= cfg.step_size:
        return cfg
    return replace(cfg, step_size=float(limit))


def gibbs_sweep(state: HiddenState, density: JointDensity, cfg: HMCConfig,
                rng: np.random.Generator, stats: SampleSet | None = None,
                rho: float = RHO) -> HiddenState:
    """Update every hidden shape once from its full conditional.

    Order: individuals of group 0 (ascending), individuals of group 1, ...,
    then the group means in group order.
    """
    new = state.copy()
    for g, us in enumerate(new.individuals):
        ucfg = _block_config(cfg, density, "u", g)
        for i in range(len(us)):
            target = density.individual_target(new, g, i)
            for _ in range(cfg.n_iter):
                res = hmc_update(target, us[i], ucfg, rng, rho)
                us[i] = res.state
                _record(stats, f"u{g}_{i}", res.accepted)
    for g in range(len(new.group_means)):
        mcfg = _block_config(cfg, density, "m", g)
        target = density.group_mean_target(new, g)
        for _ in range(cfg.n_iter):
            res = hmc_update(target, new.group_means[g], mcfg, rng, rho)
            new.group_means[g] = res.state
            _record(stats, f"m{g}", res.accepted)
    return new


def run_e_step(init: HiddenState, density: JointDensity, cfg: HMCConfig, n_samples: int,
               burn_in: int, rng: np.random.Generator | None = None,
               rho: float = RHO) -> SampleSet:
    """Run ``burn_in + n_samples`` sweeps and keep the last ``n_samples``."""
    if n_samples < 1 or burn_in < 0:
        raise ValueError("need n_samples >= 1 and burn_in >= 0")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    out = SampleSet([])
    state = init
    for s in range(burn_in + n_samples):
        state = gibbs_sweep(state, density, cfg, rng, out, rho)
        if s >= burn_in:
            out.sweeps.append(state)
    return out


def write_trace(samples: SampleSet, path) -> None:
    """CSV with one row per retained sweep, columns as :meth:`HiddenState.column_names`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sweep"] + samples.sweeps[0].column_names())
        for s, st in enumerate(samples.sweeps):
            w.writerow([s] + [repr(float(v)) for v in st.flatten()])
