# core/sampling.py
"""
Seeded sampling of test points in a ball ‖x‖ ≤ radius
"""

from dataclasses import dataclass, replace
from typing import Any, Dict

import numpy as np


@dataclass(frozen=True)
class SamplingGrid:
    radius: float = 0.5
    points_per_axis: int = 9
    seed: int = 0

    def rng(self, offset: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.seed + offset)

    def lattice(self, dim: int) -> np.ndarray:
        """Regular lattice of the box [-R, R]^d restricted to the ball"""
        axis = np.linspace(-self.radius, self.radius, self.points_per_axis)
        mesh = np.meshgrid(*([axis] * dim), indexing="ij")
        points = np.stack([m.ravel() for m in mesh], axis=-1)
        keep = np.linalg.norm(points, axis=1) <= self.radius * (1 + 1e-12)
        return points[keep]

    def ball(self, count: int, dim: int, offset: int = 0) -> np.ndarray:
        """Uniform samples in the ball"""
        rng = self.rng(offset)
        directions = rng.standard_normal((count, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        radii = self.radius * rng.random(count) ** (1.0 / dim)
        return directions * radii[:, None]

    def sphere(self, count: int, dim: int, radius: float, offset: int = 0) -> np.ndarray:
        rng = self.rng(offset)
        directions = rng.standard_normal((count, dim))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        return radius * directions

    def denser(self, factor: int = 2) -> "SamplingGrid":
        return replace(self, points_per_axis=self.points_per_axis * factor)

    def to_dict(self) -> Dict[str, Any]:
        return {"radius": self.radius, "points_per_axis": self.points_per_axis, "seed": self.seed}

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "SamplingGrid":
        return SamplingGrid(
            radius=float(data.get("radius", 0.5)),
            points_per_axis=int(data.get("points_per_axis", 9)),
            seed=int(data.get("seed", 0)),
        )
