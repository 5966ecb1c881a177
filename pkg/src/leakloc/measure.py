"""Finite sums of weighted Dirac masses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DiracMeasure:
    """``mu = sum_i rates[i] * delta_{locations[i]}`` with nonnegative rates."""

    locations: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    rates: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        locs = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        rates = np.asarray(self.rates, dtype=float).reshape(-1)
        if locs.shape[0] != rates.shape[0]:
            raise ValueError("locations and rates differ in length")
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "rates", rates)

    @classmethod
    def from_spikes(cls, spikes) -> "DiracMeasure":
        """Build from an iterable of ``((x, y), rate)`` pairs."""
        spikes = list(spikes)
        if not spikes:
            return cls()
        return cls([s[0] for s in spikes], [s[1] for s in spikes])

    def __len__(self) -> int:
        return self.rates.size

    @property
    def radon_norm(self) -> float:
        return float(np.abs(self.rates).sum())

    def __add__(self, other: "DiracMeasure") -> "DiracMeasure":
        return DiracMeasure(
            np.vstack([self.locations, other.locations]),
            np.concatenate([self.rates, other.rates]),
        )

    def scaled(self, factor: float) -> "DiracMeasure":
        return DiracMeasure(self.locations, factor * self.rates)

    def drop_zeros(self) -> "DiracMeasure":
        keep = self.rates > 0
        return DiracMeasure(self.locations[keep], self.rates[keep])

    def spikes(self):
        return [(tuple(p), float(b)) for p, b in zip(self.locations, self.rates)]
