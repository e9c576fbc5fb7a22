"""Evenly spaced consumption grid.

Consumption and mortality events live on the grid points
``{0, dt, 2*dt, ..., horizon - dt}``.  The grid measure assigns mass
``dt`` to each point, so integrals against it are ``sum(values) * dt``.
Rates (consumption per year, death mass per year) are densities with
respect to this measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Grid with step ``dt`` covering ``[0, horizon)``.

    ``horizon`` must be an integer multiple of ``dt``.  ``n_steps`` is the
    number of grid points; ``points`` excludes the terminal time while
    ``times`` includes it (useful for asset paths, which extend to the
    horizon).
    """

    dt: float
    horizon: float
    n_steps: int = field(init=False)

    def __post_init__(self) -> None:
        if not (self.dt > 0.0):
            raise ValueError(f"grid step must be positive, got {self.dt}")
        if not (self.horizon > 0.0):
            raise ValueError(f"horizon must be positive, got {self.horizon}")
        ratio = self.horizon / self.dt
        m = round(ratio)
        if m < 1 or abs(ratio - m) > 1e-9 * max(1.0, ratio):
            raise ValueError(
                f"horizon {self.horizon} is not an integer multiple of dt {self.dt}"
            )
        object.__setattr__(self, "n_steps", int(m))

    @property
    def points(self) -> np.ndarray:
        """Grid points {0, dt, ..., horizon - dt}."""
        return np.arange(self.n_steps) * self.dt

    @property
    def times(self) -> np.ndarray:
        """Grid points plus the terminal time."""
        return np.arange(self.n_steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Index of grid point ``t``; rejects off-grid times."""
        idx = round(t / self.dt)
        if idx < 0 or idx >= self.n_steps or abs(idx * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"{t} is not a grid point of {self}")
        return int(idx)
