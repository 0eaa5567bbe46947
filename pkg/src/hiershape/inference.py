"""Monte-Carlo EM for the hierarchical multigroup shape model."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import GroupedDataset, HiddenState, SampleSet
from .geometry import (RHO, best_cyclic_shift, optimal_rotation, optimal_rotation_cyclic,
                       resample_closed, to_preshape)
from .model import (DEFAULT_BETA, DEFAULT_EPSILON, JointDensity, KernelConfig,
                    NeighborhoodSystem, PopulationParams)
from .sampler import HMCConfig, run_e_step, write_trace

log = logging.getLogger(__name__)

INIT_COV_SCALE = 0.01


@dataclass
class EMConfig:
    max_iter: int = 30
    n_samples: int = 100
    burn_in: int = 10
    tol: float = 1e-3
    kernel: KernelConfig = field(default_factory=KernelConfig)
    hmc: HMCConfig = field(default_factory=HMCConfig)
    epsilon: float = DEFAULT_EPSILON
    betas: list[float] | None = None
    rho: float = RHO
    cyclic_init: bool = True
    # "empirical": one M step on the initial hidden state; "identity": INIT_COV_SCALE * I
    init_covariance: str = "identity"
    trace_dir: str | None = None

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.init_covariance not in ("empirical", "identity"):
            raise ValueError(f"unknown init_covariance {self.init_covariance!r}")

    def group_betas(self, n_groups: int) -> list[float]:
        if self.betas is None:
            return [DEFAULT_BETA] * n_groups
        if len(self.betas) == 1:
            return list(self.betas) * n_groups
        if len(self.betas) != n_groups:
            raise ValueError(f"{len(self.betas)} smoothness weights for {n_groups} groups")
        return list(self.betas)


@dataclass
class FitResult:
    params: PopulationParams
    initial_params: PopulationParams
    group_names: list[str]
    group_means: np.ndarray
    individuals: list[np.ndarray]
    kernel: KernelConfig
    betas: list[float]
    q_trace: list[float] = field(default_factory=list)
    change_trace: list[float] = field(default_factory=list)
    acceptance: dict[str, float] = field(default_factory=dict)
    converged: bool = False
    n_iter: int = 0
    samples: SampleSet | None = None

    @property
    def n_points(self) -> int:
        return self.params.mean.shape[0]

    @property
    def dim(self) -> int:
        return self.params.mean.shape[1]

    def spectra(self, k: int = 5) -> dict[str, dict[str, np.ndarray]]:
        """Top-``k`` eigenvalues of every covariance, before and after fitting."""
        out = {}
        for stage, p in (("before", self.initial_params), ("after", self.params)):
            mats = {f"C_{n}": c for n, c in zip(self.group_names, p.group_covariances)}
            mats["C"] = p.covariance
            out[stage] = {name: top_eigenvalues(c, k) for name, c in mats.items()}
        return out


def top_eigenvalues(cov, k: int = 5) -> np.ndarray:
    return np.linalg.eigvalsh(0.5 * (cov + cov.T))[::-1][:k]


def _model_shape(x, n_points, rho):
    if x.shape[0] != n_points:
        x = resample_closed(x, n_points)
    return to_preshape(x, rho)


def cyclic_template(shapes, rho: float = RHO, n_iter: int = 5, rotate: bool = False):
    """Average of closed curves after resolving each one's start index.

    Each curve is re-indexed to its best cyclic match against the running
    average. With ``rotate`` the pose is also re-fitted at every shift;
    otherwise the input pose is kept. Returns the projected average and the
    re-indexed copies.
    """
    ref = shapes[0]
    fitted = list(shapes)
    for _ in range(n_iter):
        fitted = []
        for u in shapes:
            if rotate:
                r, k = optimal_rotation_cyclic(u, ref)
                fitted.append(np.roll(u, -k, axis=0) @ r.T)
            else:
                fitted.append(np.roll(u, -best_cyclic_shift(u, ref), axis=0))
        ref = to_preshape(np.mean(fitted, axis=0), rho)
    return ref, fitted


def initialize(data: GroupedDataset, cfg: EMConfig) -> tuple[HiddenState, PopulationParams]:
    """Starting hidden state and parameters.

    Individuals start at their own data pre-shape (arc-length resampled when
    the point count differs). Group means are projected averages of the
    group's individuals, rotated onto the first group's mean; the population
    mean is the projected average of the group means.

    Covariances come from ``cfg.init_covariance``: ``"empirical"`` applies one
    M step to this initial state, so directions the data never excite start at
    zero variance (EM cannot shrink variance the likelihood does not see);
    ``"identity"`` starts every covariance at ``INIT_COV_SCALE * I``.

    With ``cfg.cyclic_init`` every individual is first re-indexed to its best
    cyclic match against a common template, so point lists with arbitrary
    start points do not average to a tangle. Poses are left as given (pose
    alignment is a separate preprocessing step). The data likelihood ignores
    point order, so this only picks the starting point.
    """
    t, d, rho = data.n_points, data.dim, cfg.rho
    us = [np.stack([_model_shape(x, t, rho) for x in grp]) for grp in data.groups]
    if cfg.cyclic_init:
        _, fitted = cyclic_template([u for grp in us for u in grp], rho)
        bounds = np.cumsum([0] + [len(u) for u in us])
        us = [np.stack(fitted[a:b]) for a, b in zip(bounds, bounds[1:])]
    means = [to_preshape(u.mean(axis=0), rho) for u in us]
    for g in range(1, len(means)):
        means[g] = means[g] @ optimal_rotation(means[g], means[0]).T
    means = np.stack(means)
    state = HiddenState(us, means)
    if cfg.init_covariance == "empirical":
        params = m_step(SampleSet([state]), None, rho, cfg.epsilon)
    else:
        pop = to_preshape(means.mean(axis=0), rho)
        eye = INIT_COV_SCALE * np.eye(t * d)
        params = PopulationParams(pop, eye.copy(), [eye.copy() for _ in us], cfg.epsilon)
    return state, params


def m_step(samples: SampleSet, prev: PopulationParams | None, rho: float = RHO,
           epsilon: float | None = None) -> PopulationParams:
    """Closed-form parameter update from a set of posterior sweeps.

    Group covariances are the average outer products of individual-minus-group-mean
    deviations; the population mean is the average group mean projected back to
    pre-shape space, and the population covariance uses that projected mean.
    """
    sweeps = samples.sweeps
    n_groups = len(sweeps[0].group_means)
    group_covs = []
    for g in range(n_groups):
        dev = np.stack([(st.individuals[g] - st.group_means[g]).reshape(len(st.individuals[g]), -1)
                        for st in sweeps])
        dev = dev.reshape(-1, dev.shape[-1])
        group_covs.append(_sym(dev.T @ dev / len(dev)))
    ms = np.stack([st.group_means for st in sweeps])  # (S, G, T, D)
    mean = to_preshape(ms.reshape(-1, *ms.shape[2:]).mean(axis=0), rho)
    dev = (ms - mean).reshape(-1, mean.size)
    cov = _sym(dev.T @ dev / len(dev))
    if epsilon is None:
        epsilon = prev.epsilon if prev is not None else DEFAULT_EPSILON
    return PopulationParams(mean, cov, group_covs, epsilon)


def _sym(a):
    return 0.5 * (a + a.T)


def q_hat(samples: SampleSet, data: GroupedDataset, params: PopulationParams,
          kernel: KernelConfig, betas=None, nbr: NeighborhoodSystem | None = None) -> float:
    """Monte-Carlo estimate of the expected complete-data log likelihood.

    Gaussian terms carry their normalizers (they depend on the parameters);
    smoothness and data terms are included unnormalized.
    """
    jd = JointDensity(data, params, kernel, betas, nbr)
    total = 0.0
    for st in samples.sweeps:
        for g, us in enumerate(st.individuals):
            m = st.group_means[g]
            total += params.factor.log_normal(m - params.mean)
            fac = params.group_factor(g)
            for i, u in enumerate(us):
                total += fac.log_normal(u - m)
                total -= jd.betas[g] * float(np.sum(u * (jd.lap @ u)))
                total += jd._data_term(g, i, u)
    return total / len(samples.sweeps)


def posterior_means(samples: SampleSet, reference, rho: float = RHO):
    """Sweep averages re-projected to pre-shape space and rotated onto ``reference``."""

    def summarize(stack):
        mu = to_preshape(stack.mean(axis=0), rho)
        return mu @ optimal_rotation(mu, reference).T

    sweeps = samples.sweeps
    n_groups = len(sweeps[0].group_means)
    means = np.stack([summarize(np.stack([st.group_means[g] for st in sweeps]))
                      for g in range(n_groups)])
    individuals = []
    for g in range(n_groups):
        n = len(sweeps[0].individuals[g])
        individuals.append(np.stack([summarize(np.stack([st.individuals[g][i] for st in sweeps]))
                                     for i in range(n)]))
    return means, individuals


def fit(data: GroupedDataset, cfg: EMConfig | None = None,
        callback: Callable[[int, SampleSet, PopulationParams], None] | None = None) -> FitResult:
    """Alternate posterior sampling and closed-form parameter updates.

    Stops when the relative Frobenius change of ``(M, C, C_1, ..., C_G)`` falls
    below ``cfg.tol`` or after ``cfg.max_iter`` iterations; non-convergence is
    reported through ``FitResult.converged``. ``callback(it, samples, params)``
    sees every E-step output together with the parameters it was drawn under.
    """
    cfg = cfg or EMConfig()
    if data.n_groups < 2:
        raise ValueError("multigroup fitting needs at least two groups")
    betas = cfg.group_betas(data.n_groups)
    state, params = initialize(data, cfg)
    initial = params
    rng = np.random.default_rng(cfg.hmc.seed)
    q_trace, changes = [], []
    converged = False
    samples = None
    it = 0
    for it in range(1, cfg.max_iter + 1):
        density = JointDensity(data, params, cfg.kernel, betas)
        samples = run_e_step(state, density, cfg.hmc, cfg.n_samples, cfg.burn_in, rng, cfg.rho)
        if callback is not None:
            callback(it, samples, params)
        if cfg.trace_dir:
            Path(cfg.trace_dir).mkdir(parents=True, exist_ok=True)
            write_trace(samples, Path(cfg.trace_dir) / f"trace_{it:03d}.csv")
        new = m_step(samples, params, cfg.rho)
        q_trace.append(q_hat(samples, data, new, cfg.kernel, betas))
        change = np.linalg.norm(new.vector() - params.vector()) / np.linalg.norm(params.vector())
        changes.append(float(change))
        log.info("EM iteration %d: relative change %.3e, acceptance %.3f, Q %.6g",
                 it, change, samples.overall_acceptance(), q_trace[-1])
        params = new
        state = samples.sweeps[-1]
        if change < cfg.tol:
            converged = True
            break
    means, individuals = posterior_means(samples, params.mean, cfg.rho)
    return FitResult(
        params=params,
        initial_params=initial,
        group_names=list(data.names),
        group_means=means,
        individuals=individuals,
        kernel=cfg.kernel,
        betas=betas,
        q_trace=q_trace,
        change_trace=changes,
        acceptance=samples.acceptance_rates(),
        converged=converged,
        n_iter=it,
        samples=samples,
    )
