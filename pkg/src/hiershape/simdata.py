"""Synthetic box-bump shapes with known group structure, and the two data corruptions.

Every landmark of a box-bump outline is an affine function of the bump centre:
bump points translate rigidly with it and the top-edge points on either side
stretch uniformly. Shapes within a group therefore vary along a single
direction, and the average of two mirrored bump positions is the shape with
the bump in the middle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import GroupedDataset


@dataclass(frozen=True)
class BoxBumpSpec:
    n_points: int = 64
    shapes_per_group: int = 4
    group_ranges: tuple[tuple[float, float], ...] = ((0.2, 0.4), (0.6, 0.8))
    width: float = 2.0
    height: float = 1.0
    bump_width: float = 0.2   # fraction of the top edge
    bump_height: float = 0.3  # fraction of the box height
    noise_sd: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 16:
            raise ValueError("box-bump shapes need at least 16 points")
        if self.shapes_per_group < 1:
            raise ValueError("shapes_per_group must be >= 1")
        half = self.bump_width / 2
        for lo, hi in self.group_ranges:
            if not (half < lo <= hi < 1 - half):
                raise ValueError(f"bump range ({lo}, {hi}) leaves the top edge")


def _counts(spec: BoxBumpSpec):
    t = spec.n_points
    perim = 2 * spec.width + 2 * spec.height
    n_bottom = round(t * spec.width / perim)
    n_side = round(t * spec.height / perim)
    n_top = t - n_bottom - 2 * n_side
    n_flank = round(n_top * 0.3)
    n_bump = n_top - 2 * n_flank
    return n_bottom, n_side, n_flank, n_bump


def box_bump(center: float, spec: BoxBumpSpec = BoxBumpSpec()) -> np.ndarray:
    """Outline with its bump centred at ``center`` (fraction of the top edge).

    Points run counter-clockwise from the bottom-left corner.
    """
    w, h = spec.width, spec.height
    n_bottom, n_side, n_flank, n_bump = _counts(spec)
    cx = -w / 2 + center * w
    bw = spec.bump_width * w
    top = h / 2
    left_end, right_end = cx - bw / 2, cx + bw / 2

    k = np.arange(n_bottom) / n_bottom
    bottom = np.column_stack([-w / 2 + k * w, np.full(n_bottom, -h / 2)])
    k = np.arange(n_side) / n_side
    right = np.column_stack([np.full(n_side, w / 2), -h / 2 + k * h])
    k = np.arange(n_flank) / n_flank
    flank_r = np.column_stack([w / 2 + k * (right_end - w / 2), np.full(n_flank, top)])
    s = 1.0 - (np.arange(n_bump) + 0.5) / n_bump
    bump = np.column_stack([cx + bw * (s - 0.5),
                            top + spec.bump_height * h * 0.5 * (1 - np.cos(2 * np.pi * s))])
    flank_l = np.column_stack([left_end + k * (-w / 2 - left_end), np.full(n_flank, top)])
    k = np.arange(n_side) / n_side
    left = np.column_stack([np.full(n_side, -w / 2), top - k * h])
    return np.vstack([bottom, right, flank_r, bump, flank_l, left])


def bump_centers(spec: BoxBumpSpec) -> list[np.ndarray]:
    return [np.linspace(lo, hi, spec.shapes_per_group) for lo, hi in spec.group_ranges]


def generate_ground_truth(spec: BoxBumpSpec = BoxBumpSpec()) -> GroupedDataset:
    """Clean box-bump groups, bump centres spaced linearly across each group's range.

    Shapes are centred individually and divided by one common scale (the size
    of the middle-bump outline), which keeps every group an affine family.
    """
    mid = box_bump(0.5, spec)
    scale = np.linalg.norm(mid - mid.mean(axis=0))
    groups = []
    for centers in bump_centers(spec):
        shapes = []
        for c in centers:
            x = box_bump(c, spec)
            shapes.append((x - x.mean(axis=0)) / scale)
        groups.append(shapes)
    names = [f"group{g + 1}" for g in range(len(groups))]
    return GroupedDataset(names, groups, spec.n_points, 2)


def corrupt(data: GroupedDataset, noise_sd: float, seed: int = 0, shifts=None) -> GroupedDataset:
    """Circularly shift each point list by a random offset, then add Gaussian noise.

    ``shifts`` (nested like ``data.groups``) overrides the random offsets.
    """
    rng = np.random.default_rng(seed)
    groups = []
    for g, grp in enumerate(data.groups):
        out = []
        for i, x in enumerate(grp):
            k = int(rng.integers(x.shape[0])) if shifts is None else int(shifts[g][i])
            y = np.roll(x, -k, axis=0)
            noise = rng.normal(0.0, noise_sd, size=x.shape) if noise_sd > 0 else 0.0
            out.append(y + noise)
        groups.append(out)
    return GroupedDataset(list(data.names), groups, data.n_points, data.dim)


def simulate(spec: BoxBumpSpec = BoxBumpSpec()) -> tuple[GroupedDataset, GroupedDataset]:
    """Clean and corrupted datasets from one spec."""
    clean = generate_ground_truth(spec)
    return clean, corrupt(clean, spec.noise_sd, spec.seed)


def bump_apex(shape) -> float:
    """Abscissa of the highest point as a fraction of the shape's horizontal extent."""
    shape = np.asarray(shape)
    x = shape[:, 0]
    apex = x[np.argmax(shape[:, 1])]
    return float((apex - x.min()) / (x.max() - x.min()))
