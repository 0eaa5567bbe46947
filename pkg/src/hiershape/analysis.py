"""Group comparison by permutation testing and classification of new shapes."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .data import GroupedDataset
from .errors import InsufficientData, SingularCovariance
from .geometry import RHO, match_point_scale, optimal_rotation_cyclic, resample_closed, to_preshape
from .inference import EMConfig, FitResult, fit as fit_model
from .model import GroupModel, NeighborhoodSystem, kernel_matrix


@dataclass
class PermutationTestResult:
    observed: float
    statistics: np.ndarray        # one per evaluated labelling, observed included
    is_observed: np.ndarray       # bool mask over ``statistics``
    p_value: float
    n_permutations: int
    exhaustive: bool


@dataclass
class ClassificationResult:
    log_scores: np.ndarray        # Monte-Carlo log marginal likelihood per group
    predicted: int
    n_samples: int
    group_names: list[str]

    @property
    def predicted_name(self) -> str:
        return self.group_names[self.predicted]


def hotelling_t2(a, b, epsilon: float = 1e-4) -> float:
    """Two-sample Hotelling T^2 with a ridge on the pooled covariance.

    ``a`` and ``b`` hold one observation per leading index; trailing axes are
    flattened.
    """
    a = np.asarray(a, dtype=float).reshape(len(a), -1)
    b = np.asarray(b, dtype=float).reshape(len(b), -1)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise InsufficientData("Hotelling T^2 needs at least two vectors per group")
    da, db = a - a.mean(axis=0), b - b.mean(axis=0)
    pooled = (da.T @ da + db.T @ db) / (na + nb - 2)
    d = a.mean(axis=0) - b.mean(axis=0)
    ridged = pooled + epsilon * np.eye(len(d))
    t2 = na * nb / (na + nb) * d @ linalg.solve(ridged, d, assume_a="pos")
    return float(max(t2, 0.0))


def _splits(n: int, na: int):
    """Every distinct split of ``range(n)`` into a set of size ``na`` and its complement.

    With equal halves a split and its complement are the same partition, so only
    subsets containing index 0 are produced.
    """
    combos = itertools.combinations(range(n), na)
    if 2 * na == n:
        return (c for c in combos if c[0] == 0)
    return combos


def n_distinct_splits(na: int, nb: int) -> int:
    total = math.comb(na + nb, na)
    return total // 2 if na == nb else total


def _canonical(subset, n, na):
    subset = tuple(sorted(subset))
    if 2 * na == n and subset[0] != 0:
        subset = tuple(i for i in range(n) if i not in subset)
    return subset


def permutation_test(result: FitResult, pair=(0, 1), max_perms: int = 200, seed: int = 0,
                     epsilon: float | None = None, source: str = "posterior",
                     data: GroupedDataset | None = None, refit_cfg: EMConfig | None = None
                     ) -> PermutationTestResult:
    """Permutation distribution of Hotelling T^2 over group relabellings.

    All distinct splits are enumerated when there are at most ``max_perms`` of
    them; otherwise the observed split plus ``max_perms - 1`` distinct random
    splits are used. The p value counts labellings whose statistic is at least
    the observed one, the observed labelling included.

    ``source`` selects the per-individual vectors: ``"posterior"`` (posterior
    mean hidden shapes) or ``"data"`` (observed sets, resampled to the model
    point count and cyclically aligned to the population mean; needs ``data``).
    Passing ``refit_cfg`` together with ``data`` refits the model for every
    relabelling instead, which is only affordable for small problems.
    """
    ga, gb = pair
    eps = result.params.epsilon if epsilon is None else epsilon
    if refit_cfg is not None and data is None:
        raise ValueError("refitting needs the original data")
    if source == "posterior":
        va, vb = result.individuals[ga], result.individuals[gb]
    elif source == "data":
        if data is None:
            raise ValueError("source='data' needs the original data")
        va = np.stack([_align_query(x, result) for x in data.groups[ga]])
        vb = np.stack([_align_query(x, result) for x in data.groups[gb]])
    else:
        raise ValueError(f"unknown source {source!r}")
    na, nb = len(va), len(vb)
    if na < 2 or nb < 2:
        raise InsufficientData("each group needs at least two shapes")
    pooled = np.concatenate([va, vb])
    n = na + nb
    observed_split = tuple(range(na))

    if refit_cfg is not None:
        sets = data.groups[ga] + data.groups[gb]

        def statistic(subset):
            rest = [i for i in range(n) if i not in subset]
            relabelled = GroupedDataset(["a", "b"], [[sets[i] for i in subset], [sets[i] for i in rest]],
                                        data.n_points, data.dim)
            r = fit_model(relabelled, refit_cfg)
            return hotelling_t2(r.individuals[0], r.individuals[1], eps)
    else:
        def statistic(subset):
            mask = np.zeros(n, dtype=bool)
            mask[list(subset)] = True
            return hotelling_t2(pooled[mask], pooled[~mask], eps)

    total = n_distinct_splits(na, nb)
    if total <= max_perms:
        subsets = list(_splits(n, na))
        exhaustive = True
    else:
        rng = np.random.default_rng(seed)
        chosen = {observed_split}
        subsets = [observed_split]
        while len(subsets) < max_perms:
            s = _canonical(rng.choice(n, size=na, replace=False), n, na)
            if s not in chosen:
                chosen.add(s)
                subsets.append(s)
        exhaustive = False
    stats = np.array([statistic(s) for s in subsets])
    flags = np.array([s == observed_split for s in subsets])
    observed = float(stats[flags][0])
    count = int(np.sum(stats >= observed * (1 - 1e-12)))
    return PermutationTestResult(observed, stats, flags, count / len(stats), len(stats), exhaustive)


def sample_prior_shape(group: GroupModel, nbr: NeighborhoodSystem, rng: np.random.Generator,
                       size: int | None = None, rho: float = RHO) -> np.ndarray:
    """Exact draws from the smoothness-augmented Gaussian shape prior.

    The prior combines the Mahalanobis term and the neighbour penalty, both
    quadratic, so it is Gaussian with precision ``(C + eps I)^-1 + 2 beta (L kron I)``.
    Draws are projected to pre-shape space. Returns ``(T, D)`` or ``(size, T, D)``.
    """
    m = np.asarray(group.mean, dtype=float)
    t, d = m.shape
    prec_c = group.factor.precision
    q = prec_c + 2.0 * group.beta * nbr.expanded_laplacian(d)
    try:
        chol = linalg.cholesky(q, lower=True)
    except linalg.LinAlgError as exc:
        raise SingularCovariance("prior precision is not positive definite") from exc
    mu = linalg.cho_solve((chol, True), prec_c @ m.ravel())
    n = 1 if size is None else size
    z = rng.standard_normal((t * d, n))
    x = mu[:, None] + linalg.solve_triangular(chol.T, z, lower=False)
    draws = np.stack([to_preshape(col.reshape(t, d), rho) for col in x.T])
    return draws[0] if size is None else draws


def _query_rotation(u, result: FitResult, rho: float = RHO, reference=None) -> np.ndarray:
    """Rotation taking pre-shape ``u`` onto ``reference`` (default: the population mean).

    Point order is resolved by a cyclic-shift search; a query with a different
    point count is arc-length resampled for this search only.
    """
    if reference is None:
        reference = result.params.mean
    if u.shape[0] != result.n_points:
        u = to_preshape(resample_closed(u, result.n_points), rho)
    r, _ = optimal_rotation_cyclic(u, reference)
    return r


def _align_query(z, result: FitResult, rho: float = RHO) -> np.ndarray:
    """Model-sized pre-shape of ``z``, re-indexed and rotated onto the population mean."""
    z = np.asarray(z, dtype=float)
    if z.shape[0] != result.n_points:
        z = resample_closed(z, result.n_points)
    u = to_preshape(z, rho)
    r, k = optimal_rotation_cyclic(u, result.params.mean)
    return np.roll(u, -k, axis=0) @ r.T


def classify(z, result: FitResult, n_samples: int = 500, seed: int = 0,
             rho: float = RHO) -> ClassificationResult:
    """Assign ``z`` to the group with the largest Monte-Carlo marginal likelihood.

    ``z`` is centred and scaled (to the model's per-point size when its point
    count differs), then rotated onto each group's mean in turn
    (a single common reference lets near-symmetric outlines, such as boxes,
    flip by half a turn towards the wrong group). For each group,
    ``n_samples`` shapes are drawn from the group's shape prior and the data
    likelihood ``exp(-d^2(z, w))`` is averaged in log space.
    """
    u = match_point_scale(np.asarray(z, dtype=float), result.n_points, rho)
    sigma = result.kernel.sigma
    nbr = NeighborhoodSystem.cycle(result.n_points)
    rng = np.random.default_rng(seed)
    kzz = kernel_matrix(u, u, sigma).sum()
    scores = []
    for g in range(len(result.group_names)):
        query = u @ _query_rotation(u, result, rho, result.group_means[g]).T
        gm = result.params.group_model(g, result.group_means[g], result.betas[g])
        draws = sample_prior_shape(gm, nbr, rng, n_samples, rho)
        d2 = np.array([kzz + kernel_matrix(w, w, sigma).sum() - 2.0 * kernel_matrix(query, w, sigma).sum()
                       for w in draws])
        scores.append(float(logsumexp(-d2) - np.log(n_samples)))
    scores = np.array(scores)
    return ClassificationResult(scores, int(np.argmax(scores)), n_samples, list(result.group_names))
