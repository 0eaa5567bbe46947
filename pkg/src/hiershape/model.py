"""Log-density terms of the hierarchical shape model and their gradients.

All densities are unnormalized: the smoothness-prior partition function and
the data-likelihood normalizer are constant in the hidden shapes and never
computed. Shapes are ``(T, D)`` arrays, flattened row-major (``x1, y1, x2,
...``) wherever a ``TD`` vector is needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg

from .data import GroupedDataset, HiddenState
from .errors import SingularCovariance

DEFAULT_SIGMA = 0.05
DEFAULT_EPSILON = 1e-4
DEFAULT_BETA = 1000.0


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = DEFAULT_SIGMA

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"kernel bandwidth must be positive, got {self.sigma}")


@dataclass(frozen=True)
class NeighborhoodSystem:
    """Unordered neighbour pairs over point indices (0-based)."""

    n_points: int
    pairs: tuple[tuple[int, int], ...]

    @classmethod
    def cycle(cls, n_points: int) -> "NeighborhoodSystem":
        """Closed-curve system: each point neighbours its predecessor and successor."""
        return cls(n_points, tuple((t, (t + 1) % n_points) for t in range(n_points)))

    @cached_property
    def laplacian(self) -> np.ndarray:
        lap = np.zeros((self.n_points, self.n_points))
        for a, b in self.pairs:
            lap[a, a] += 1
            lap[b, b] += 1
            lap[a, b] -= 1
            lap[b, a] -= 1
        return lap

    def expanded_laplacian(self, dim: int) -> np.ndarray:
        """``L kron I_D`` acting on row-major flattened shapes."""
        return np.kron(self.laplacian, np.eye(dim))


class CovarianceFactor:
    """Cholesky factorization of ``C + epsilon I``, built once and reused."""

    def __init__(self, covariance, epsilon: float = DEFAULT_EPSILON):
        cov = np.asarray(covariance, dtype=float)
        n = cov.shape[0]
        ridged = cov + epsilon * np.eye(n)
        if not np.all(np.isfinite(ridged)):
            raise SingularCovariance("covariance has non-finite entries")
        try:
            self._cho = linalg.cho_factor(ridged, lower=True)
        except linalg.LinAlgError as exc:
            raise SingularCovariance(f"C + {epsilon:g} I is not positive definite") from exc
        self.dim = n
        self.precision = linalg.cho_solve(self._cho, np.eye(n))
        self.precision = 0.5 * (self.precision + self.precision.T)
        self.logdet = 2.0 * np.sum(np.log(np.diag(self._cho[0])))

    def solve(self, v) -> np.ndarray:
        return linalg.cho_solve(self._cho, np.asarray(v, dtype=float))

    def quad(self, v) -> float:
        v = np.ravel(v)
        return float(v @ self.precision @ v)

    def log_normal(self, v) -> float:
        """Normalized Gaussian log density of the deviation ``v``."""
        return -0.5 * (self.quad(v) + self.logdet + self.dim * np.log(2 * np.pi))


@dataclass
class GroupModel:
    mean: np.ndarray
    covariance: np.ndarray
    beta: float = DEFAULT_BETA
    epsilon: float = DEFAULT_EPSILON

    @cached_property
    def factor(self) -> CovarianceFactor:
        return CovarianceFactor(self.covariance, self.epsilon)


@dataclass
class PopulationParams:
    """EM parameters: population mean and covariance plus one covariance per group."""

    mean: np.ndarray
    covariance: np.ndarray
    group_covariances: list[np.ndarray]
    epsilon: float = DEFAULT_EPSILON
    _factors: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_groups(self) -> int:
        return len(self.group_covariances)

    @property
    def factor(self) -> CovarianceFactor:
        if "pop" not in self._factors:
            self._factors["pop"] = CovarianceFactor(self.covariance, self.epsilon)
        return self._factors["pop"]

    def group_factor(self, g: int) -> CovarianceFactor:
        if g not in self._factors:
            self._factors[g] = CovarianceFactor(self.group_covariances[g], self.epsilon)
        return self._factors[g]

    def group_model(self, g: int, mean, beta: float = DEFAULT_BETA) -> GroupModel:
        gm = GroupModel(np.asarray(mean, dtype=float), self.group_covariances[g], beta, self.epsilon)
        gm.__dict__["factor"] = self.group_factor(g)
        return gm

    def vector(self) -> np.ndarray:
        """Concatenation of ``(M, C, C_1, ..., C_G)`` used for convergence checks."""
        return np.concatenate([np.ravel(self.mean), np.ravel(self.covariance)]
                              + [np.ravel(c) for c in self.group_covariances])


# --- current norm ---------------------------------------------------------

def _sigma(kernel) -> float:
    return kernel.sigma if isinstance(kernel, KernelConfig) else float(kernel)


def _sqdist(a, b):
    d2 = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def kernel_matrix(a, b, sigma: float) -> np.ndarray:
    """Gaussian kernel ``exp(-|a_i - b_j|^2 / (2 sigma^2))`` for all pairs."""
    return np.exp(_sqdist(a, b) / (-2.0 * sigma * sigma))


def current_norm_sq(a, b, kernel) -> float:
    """Squared current (kernel mean embedding) distance between two point sets."""
    s = _sigma(kernel)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(kernel_matrix(a, a, s).sum() + kernel_matrix(b, b, s).sum()
                 - 2.0 * kernel_matrix(a, b, s).sum())


def grad_current_norm_sq(a, b, kernel) -> np.ndarray:
    """Gradient of :func:`current_norm_sq` with respect to the points of ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return _current_norm_terms(a, b, _sigma(kernel))[2]


def _current_norm_terms(a, b, s, aa=None):
    """``(d^2, sum K(b, b), grad_b d^2)`` sharing one pair of kernel matrices."""
    kbb = kernel_matrix(b, b, s)
    kba = kernel_matrix(b, a, s)
    if aa is None:
        aa = kernel_matrix(a, a, s).sum()
    bb = kbb.sum()
    d2 = aa + bb - 2.0 * kba.sum()
    # sum_j K_ij (b_i - b_j) and sum_j K_ij (b_i - a_j) as matrix products
    self_term = b * kbb.sum(axis=1)[:, None] - kbb @ b
    cross_term = b * kba.sum(axis=1)[:, None] - kba @ a
    grad = (-2.0 / (s * s)) * (self_term - cross_term)
    return d2, bb, grad


def log_lik_data(x, u, kernel) -> float:
    return -current_norm_sq(x, u, kernel)


def grad_log_lik_data(x, u, kernel) -> np.ndarray:
    return -grad_current_norm_sq(x, u, kernel)


# --- priors ---------------------------------------------------------------

def smoothness_penalty(u, nbr: NeighborhoodSystem) -> float:
    u = np.asarray(u, dtype=float)
    idx = np.asarray(nbr.pairs)
    d = u[idx[:, 0]] - u[idx[:, 1]]
    return float(np.sum(d * d))


def grad_smoothness_penalty(u, nbr: NeighborhoodSystem) -> np.ndarray:
    return 2.0 * nbr.laplacian @ np.asarray(u, dtype=float)


def log_prior_shape(u, group: GroupModel, nbr: NeighborhoodSystem) -> float:
    """Mahalanobis pull to the group mean plus the neighbour smoothness penalty."""
    dev = np.ravel(np.asarray(u, dtype=float) - group.mean)
    return -0.5 * group.factor.quad(dev) - group.beta * smoothness_penalty(u, nbr)


def grad_log_prior_shape(u, group: GroupModel, nbr: NeighborhoodSystem) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    dev = np.ravel(u - group.mean)
    g = -(group.factor.precision @ dev).reshape(u.shape)
    return g - group.beta * grad_smoothness_penalty(u, nbr)


def log_prior_group_mean(m, params: PopulationParams) -> float:
    dev = np.ravel(np.asarray(m, dtype=float) - params.mean)
    return -0.5 * params.factor.quad(dev)


# --- joint density --------------------------------------------------------

class JointDensity:
    """Unnormalized joint log density of all hidden shapes given data and parameters.

    Covariance factorizations are taken from ``params`` (built once per EM
    iteration) and the data self-similarity sums are cached, so the full
    conditionals used by the sampler are cheap to evaluate.
    """

    def __init__(self, data: GroupedDataset, params: PopulationParams, kernel: KernelConfig,
                 betas: Sequence[float] | None = None, nbr: NeighborhoodSystem | None = None):
        self.data = data
        self.params = params
        self.kernel = kernel
        self.sigma = kernel.sigma
        self.betas = list(betas) if betas is not None else [DEFAULT_BETA] * data.n_groups
        if len(self.betas) != data.n_groups:
            raise ValueError("one smoothness weight per group required")
        self.nbr = nbr or NeighborhoodSystem.cycle(data.n_points)
        self.lap = self.nbr.laplacian
        self._curv = {}
        self._xx = [[kernel_matrix(x, x, self.sigma).sum() for x in grp] for grp in data.groups]

    # individual terms

    def _data_term(self, g, i, u):
        return self._data_value_grad(g, i, u)[0]

    def _data_grad(self, g, i, u):
        return self._data_value_grad(g, i, u)[1]

    def _data_value_grad(self, g, i, u):
        d2, _, grad = _current_norm_terms(self.data.groups[g][i], u, self.sigma, self._xx[g][i])
        return -d2, -grad

    def _shape_prior(self, g, u, m):
        return self._shape_prior_value_grad(g, u, m)[0]

    def _shape_prior_grad(self, g, u, m):
        return self._shape_prior_value_grad(g, u, m)[1]

    def _shape_prior_value_grad(self, g, u, m):
        dev = np.ravel(u - m)
        pdev = self.params.group_factor(g).precision @ dev
        lu = self.lap @ u
        val = -0.5 * (dev @ pdev) - self.betas[g] * np.sum(u * lu)
        grad = -pdev.reshape(u.shape) - 2.0 * self.betas[g] * lu
        return val, grad

    def _mean_conditional(self, g, m, us):
        pm = self.params.factor.precision
        pg = self.params.group_factor(g).precision
        dm = np.ravel(m - self.params.mean)
        dev = (us - m).reshape(len(us), -1)
        val = -0.5 * dm @ pm @ dm - 0.5 * np.einsum("ij,jk,ik->", dev, pg, dev)
        grad = -(pm @ dm) + pg @ dev.sum(axis=0)
        return val, grad.reshape(m.shape)

    def curvature_bound(self, kind: str, g: int) -> float:
        """Upper bound on the Gaussian-part curvature of one full conditional.

        ``kind`` is ``"u"`` (individual of group ``g``) or ``"m"`` (mean of group ``g``).
        The data term is not included.
        """
        key = (kind, g)
        if key not in self._curv:
            lam_g = np.linalg.eigvalsh(self.params.group_factor(g).precision)[-1]
            if kind == "u":
                lap_max = np.linalg.eigvalsh(self.lap)[-1]
                self._curv[key] = float(lam_g + 2.0 * self.betas[g] * lap_max)
            else:
                lam = np.linalg.eigvalsh(self.params.factor.precision)[-1]
                self._curv[key] = float(lam + len(self.data.groups[g]) * lam_g)
        return self._curv[key]

    # public API

    def log_joint(self, state: HiddenState) -> float:
        total = 0.0
        for g, us in enumerate(state.individuals):
            m = state.group_means[g]
            total += log_prior_group_mean(m, self.params)
            for i, u in enumerate(us):
                total += self._shape_prior(g, u, m) + self._data_term(g, i, u)
        return float(total)

    def grad_individual(self, state: HiddenState, g: int, i: int) -> np.ndarray:
        u = state.individuals[g][i]
        return self._shape_prior_grad(g, u, state.group_means[g]) + self._data_grad(g, i, u)

    def grad_group_mean(self, state: HiddenState, g: int) -> np.ndarray:
        return self._mean_conditional(g, state.group_means[g], state.individuals[g])[1]

    def individual_target(self, state: HiddenState, g: int, i: int):
        """Full conditional of ``u_{g,i}``: callable ``u -> (log p, raw gradient)``."""
        m = state.group_means[g]

        def target(u):
            dval, dgrad = self._data_value_grad(g, i, u)
            pval, pgrad = self._shape_prior_value_grad(g, u, m)
            return float(pval + dval), pgrad + dgrad

        return target

    def group_mean_target(self, state: HiddenState, g: int):
        """Full conditional of the group mean ``m_g``: callable ``m -> (log p, raw gradient)``."""
        us = state.individuals[g]

        def target(m):
            val, grad = self._mean_conditional(g, m, us)
            return float(val), grad

        return target


def log_joint_hidden(state: HiddenState, data: GroupedDataset, params: PopulationParams,
                     kernel: KernelConfig, betas=None, nbr=None) -> float:
    """Sum of every prior and data term; the prior on the parameters is omitted."""
    return JointDensity(data, params, kernel, betas, nbr).log_joint(state)


def grad_log_joint_wrt(which: tuple, state: HiddenState, data: GroupedDataset,
                       params: PopulationParams, kernel: KernelConfig, betas=None, nbr=None) -> np.ndarray:
    """Raw gradient of :func:`log_joint_hidden` for one hidden variable.

    ``which`` is ``("u", g, i)`` for an individual shape or ``("m", g)`` for a group mean.
    """
    jd = JointDensity(data, params, kernel, betas, nbr)
    if which[0] == "u":
        return jd.grad_individual(state, which[1], which[2])
    if which[0] == "m":
        return jd.grad_group_mean(state, which[1])
    raise ValueError(f"unknown variable selector {which!r}")
