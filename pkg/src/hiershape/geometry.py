"""Pre-shape space primitives.

Point sets are ``(T, D)`` float arrays. A pre-shape is a point set that is
centered and has Frobenius norm ``rho``; it is still an ordinary array; use
:func:`is_preshape` to check the constraint.
"""

from __future__ import annotations

from collections import Counter

import numpy as np

from .errors import DegenerateShape

RHO = 1.0

_DEGENERATE_SIZE = 1e-12


def as_pointset(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 2:
        raise ValueError(f"expected a (T, D) point array, got shape {p.shape}")
    return p


def center(p) -> np.ndarray:
    """Subtract the centroid from every point."""
    p = as_pointset(p)
    return p - p.mean(axis=0)


def to_preshape(p, rho: float = RHO) -> np.ndarray:
    """Center ``p`` and scale it to Frobenius size ``rho``."""
    c = center(p)
    size = np.linalg.norm(c)
    if size < _DEGENERATE_SIZE:
        raise DegenerateShape(f"point set has centered size {size:.3g}")
    return c * (rho / size)


def match_point_scale(p, n_points: int, rho: float = RHO) -> np.ndarray:
    """Pre-shape of ``p`` rescaled to the per-point size of an ``n_points`` pre-shape.

    Kernel distances depend on absolute coordinates. A set with more points
    than the model would otherwise sit at a smaller scale than the model's
    pre-shapes, and one with fewer points at a larger scale.
    """
    u = to_preshape(p, rho)
    return u * np.sqrt(u.shape[0] / n_points)


def is_preshape(u, rho: float = RHO, tol: float = 1e-9) -> bool:
    u = np.asarray(u, dtype=float)
    return bool(
        np.linalg.norm(u.sum(axis=0)) <= tol * rho
        and abs(np.linalg.norm(u) - rho) <= tol * rho
    )


def project_gradient(g, u) -> np.ndarray:
    """Project a raw gradient onto the tangent space of the pre-shape sphere at ``u``.

    The translation component (mean over points) is removed first, then the
    radial component along ``u``. Accepts ``g`` flat or shaped like ``u``.
    """
    u = np.asarray(u, dtype=float)
    g = np.asarray(g, dtype=float).reshape(u.shape)
    r2 = g - g.mean(axis=0)
    uu = np.vdot(u, u)
    return r2 - (np.vdot(r2, u) / uu) * u


def rotation_generators(u) -> np.ndarray:
    """Infinitesimal rotations of ``u``: one ``(T, D)`` direction per skew basis matrix."""
    u = np.asarray(u, dtype=float)
    d = u.shape[1]
    gens = []
    for a in range(d):
        for b in range(a + 1, d):
            g = np.zeros_like(u)
            g[:, a] = -u[:, b]
            g[:, b] = u[:, a]
            gens.append(g)
    return np.stack(gens)


def remove_rotation(v, u) -> np.ndarray:
    """Remove from ``v`` its component along the infinitesimal rotations of ``u``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float).reshape(u.shape)
    gens = rotation_generators(u).reshape(-1, u.size)
    if len(gens) == 1:
        g = gens[0]
        return v - (np.dot(v.ravel(), g) / np.dot(g, g)) * g.reshape(u.shape)
    coef = np.linalg.lstsq(gens.T, v.ravel(), rcond=None)[0]
    return v - (coef @ gens).reshape(u.shape)


def exp_map(u, v, rho: float = RHO) -> np.ndarray:
    """Follow the great circle from ``u`` with initial velocity ``v`` for unit time."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float).reshape(u.shape)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return u.copy()
    theta = nv / rho
    return np.cos(theta) * u + (rho * np.sin(theta) / nv) * v


def geodesic_distance(u, w, rho: float = RHO) -> float:
    """Great-circle distance between two points on the pre-shape sphere."""
    c = np.vdot(u, w) / rho**2
    return float(rho * np.arccos(np.clip(c, -1.0, 1.0)))


def optimal_rotation(source, target) -> np.ndarray:
    """Rotation ``R`` (det +1) minimizing ``sum_t |R source_t - target_t|^2``.

    Both sets must be centered with identical shape. Under rotational
    symmetry the minimizer is not unique; the 2-D path then returns the
    ``atan2`` solution and the general path whatever the SVD produces.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape != target.shape:
        raise ValueError(f"shape mismatch {source.shape} vs {target.shape}")
    a = source.T @ target
    scale = np.linalg.norm(source) * np.linalg.norm(target)
    if source.shape[1] == 2:
        cs = a[0, 0] + a[1, 1]
        sn = a[0, 1] - a[1, 0]
        if np.hypot(cs, sn) <= 1e-14 * max(scale, 1e-300):
            raise DegenerateShape("cross-covariance vanishes; rotation undefined")
        phi = np.arctan2(sn, cs)
        c, s = np.cos(phi), np.sin(phi)
        return np.array([[c, -s], [s, c]])
    if np.linalg.norm(a) <= 1e-14 * max(scale, 1e-300):
        raise DegenerateShape("cross-covariance vanishes; rotation undefined")
    # maximize tr(R a): a = U S Vt  ->  R = V diag(1,..,det) Ut
    uu, _, vt = np.linalg.svd(a)
    d = np.ones(a.shape[0])
    d[-1] = np.sign(np.linalg.det(vt.T @ uu.T))
    return (vt.T * d) @ uu.T


def rotation_2d(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def align_rotation(p, reference) -> np.ndarray:
    """Rotate ``p`` onto ``reference`` (point-to-point correspondence)."""
    p = np.asarray(p, dtype=float)
    return p @ optimal_rotation(p, reference).T


def optimal_rotation_cyclic(source, target) -> tuple[np.ndarray, int]:
    """Best rotation over all cyclic re-indexings of ``source``.

    For closed curves whose point lists start at arbitrary positions. Returns
    ``(R, k)`` where ``np.roll(source, -k, axis=0) @ R.T`` best matches ``target``.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    best = (np.inf, None, 0)
    for k in range(source.shape[0]):
        s = np.roll(source, -k, axis=0)
        try:
            r = optimal_rotation(s, target)
        except DegenerateShape:
            continue
        res = np.sum((s @ r.T - target) ** 2)
        if res < best[0]:
            best = (res, r, k)
    if best[1] is None:
        raise DegenerateShape("no cyclic shift admits a defined rotation")
    return best[1], best[2]


def best_cyclic_shift(source, target) -> int:
    """Start index ``k`` minimising ``||np.roll(source, -k, axis=0) - target||^2`` (no rotation)."""
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    if source.shape != target.shape:
        raise ValueError("cyclic shift search needs equal shapes")
    overlap = [np.vdot(np.roll(source, -k, axis=0), target) for k in range(source.shape[0])]
    return int(np.argmax(overlap))


def resample_closed(points, n: int) -> np.ndarray:
    """Resample a closed polygon to ``n`` points evenly spaced in arc length.

    The first output point coincides with the first input point; order and
    orientation are kept.
    """
    p = as_pointset(points)
    closed = np.vstack([p, p[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total < _DEGENERATE_SIZE:
        raise DegenerateShape("polygon has zero perimeter")
    targets = np.arange(n) * (total / n)
    return np.column_stack([np.interp(targets, s, closed[:, d]) for d in range(p.shape[1])])


def procrustes_align(sets, rho: float = RHO, tol: float = 1e-8, max_iter: int = 100,
                     cyclic: bool = False) -> list[np.ndarray]:
    """Generalized Procrustes alignment to pre-shapes of size ``rho``.

    Every set is centered and scaled. Sets sharing the most common point count
    are then rotated iteratively onto their running mean; sets with any other
    count are only centered and scaled. The result is expressed in the frame
    of the first set of that majority subgroup.

    With ``cyclic=True`` each rotation is estimated over all cyclic
    re-indexings of the set (closed curves with arbitrary start points); the
    point order of the output is left unchanged.
    """
    pre = [to_preshape(s, rho) for s in sets]
    if not pre:
        return []
    dims = {p.shape[1] for p in pre}
    if len(dims) != 1:
        raise ValueError(f"point sets disagree on dimension: {sorted(dims)}")
    counts = Counter(p.shape[0] for p in pre)
    first_t = pre[0].shape[0]
    t_major = max(counts, key=lambda t: (counts[t], t == first_t))
    idx = [i for i, p in enumerate(pre) if p.shape[0] == t_major]

    anchor = pre[idx[0]]
    aligned = {i: pre[i] for i in idx}
    mean = anchor
    for _ in range(max_iter):
        stack = []
        for i in idx:
            if cyclic:
                r, k = optimal_rotation_cyclic(aligned[i], mean)
                aligned[i] = aligned[i] @ r.T
                # the re-indexed copy only feeds the running mean
                stack.append(np.roll(aligned[i], -k, axis=0))
            else:
                aligned[i] = align_rotation(aligned[i], mean)
                stack.append(aligned[i])
        new_mean = to_preshape(np.mean(stack, axis=0), rho)
        moved = np.linalg.norm(new_mean - mean)
        mean = new_mean
        if moved < tol:
            break
    # pin the frame to the anchor's original orientation
    r = optimal_rotation(aligned[idx[0]], anchor)
    out = list(pre)
    for i in idx:
        out[i] = aligned[i] @ r.T
    return out
