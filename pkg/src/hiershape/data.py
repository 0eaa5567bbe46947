"""Containers shared by the model, sampler and inference layers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GroupedDataset:
    """Observed point sets organised in named groups.

    ``groups[g][i]`` is a ``(T_i, D)`` array; ``T_i`` may differ from the model
    point count ``n_points``.
    """

    names: list[str]
    groups: list[list[np.ndarray]]
    n_points: int
    dim: int = 2

    def __post_init__(self):
        if len(self.names) != len(self.groups):
            raise ValueError("one name per group required")
        self.groups = [[np.asarray(x, dtype=float) for x in grp] for grp in self.groups]
        for name, grp in zip(self.names, self.groups):
            if not grp:
                raise ValueError(f"group {name!r} is empty")
            for x in grp:
                if x.ndim != 2 or x.shape[1] != self.dim:
                    raise ValueError(f"group {name!r}: point set of shape {x.shape}, expected (T, {self.dim})")

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def sizes(self) -> list[int]:
        return [len(g) for g in self.groups]

    def subset(self, indices) -> "GroupedDataset":
        """Dataset restricted to the given group indices (in that order)."""
        return GroupedDataset([self.names[g] for g in indices],
                              [self.groups[g] for g in indices], self.n_points, self.dim)


@dataclass
class HiddenState:
    """One joint configuration of every hidden shape.

    ``individuals[g]`` has shape ``(n_g, T, D)``; ``group_means`` has shape ``(G, T, D)``.
    """

    individuals: list[np.ndarray]
    group_means: np.ndarray

    def copy(self) -> "HiddenState":
        return HiddenState([u.copy() for u in self.individuals], self.group_means.copy())

    def shapes(self):
        """Yield every hidden pre-shape, individuals first (group order), then group means."""
        for grp in self.individuals:
            yield from grp
        yield from self.group_means

    def flatten(self) -> np.ndarray:
        return np.concatenate([u.ravel() for u in self.individuals] + [self.group_means.ravel()])

    def column_names(self) -> list[str]:
        """Names matching :meth:`flatten`: ``u{g}_{i}_t{t}_d{d}`` then ``m{g}_t{t}_d{d}``."""
        cols = []
        for g, grp in enumerate(self.individuals):
            n, t, d = grp.shape
            cols += [f"u{g}_{i}_t{a}_d{b}" for i in range(n) for a in range(t) for b in range(d)]
        g_, t, d = self.group_means.shape
        cols += [f"m{g}_t{a}_d{b}" for g in range(g_) for a in range(t) for b in range(d)]
        return cols


@dataclass
class SampleSet:
    """Retained Gibbs sweeps plus per-variable HMC acceptance counts."""

    sweeps: list[HiddenState]
    accepted: dict[str, int] = field(default_factory=dict)
    proposed: dict[str, int] = field(default_factory=dict)

    def __len__(self):
        return len(self.sweeps)

    def acceptance_rates(self) -> dict[str, float]:
        return {k: self.accepted.get(k, 0) / n for k, n in self.proposed.items() if n}

    def overall_acceptance(self) -> float:
        n = sum(self.proposed.values())
        return sum(self.accepted.values()) / n if n else float("nan")
