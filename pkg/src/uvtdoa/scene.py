"""Anchor geometry, units, and scenario definitions shared by all other modules.

All lengths are meters, times seconds, internally double precision. Unit
conversions happen only at I/O boundaries (see the config module).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s

# Anchor triangles flatter than this are rejected: the linearized error
# matrix becomes singular for collinear anchors, so fail fast.
MIN_TRIANGLE_AREA_M2 = 1e-9


class SceneError(ValueError):
    """Degenerate or non-finite scene geometry."""


def _as_point(p, name: str) -> tuple[float, float]:
    arr = np.asarray(p, dtype=float).reshape(-1)
    if arr.shape != (2,):
        raise SceneError(f"{name} must be a 2-D point, got {p!r}")
    if not np.all(np.isfinite(arr)):
        raise SceneError(f"{name} has non-finite coordinates: {p!r}")
    return float(arr[0]), float(arr[1])


def triangle_area(a, b, c) -> float:
    """Unsigned area of the triangle spanned by three 2-D points."""
    ax, ay = a
    bx, by = b
    cx, cy = c
    return 0.5 * abs((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))


@dataclass(frozen=True)
class Scene:
    """Three transmitter anchors and the true receiver position, in meters."""

    tx_a: tuple[float, float]
    tx_b: tuple[float, float]
    tx_c: tuple[float, float]
    rx_true: tuple[float, float]
    c: float = SPEED_OF_LIGHT

    def __post_init__(self):
        object.__setattr__(self, "tx_a", _as_point(self.tx_a, "tx_a"))
        object.__setattr__(self, "tx_b", _as_point(self.tx_b, "tx_b"))
        object.__setattr__(self, "tx_c", _as_point(self.tx_c, "tx_c"))
        object.__setattr__(self, "rx_true", _as_point(self.rx_true, "rx_true"))
        if not (np.isfinite(self.c) and self.c > 0):
            raise SceneError(f"propagation speed must be positive, got {self.c}")
        area = triangle_area(self.tx_a, self.tx_b, self.tx_c)
        if area <= MIN_TRIANGLE_AREA_M2:
            raise SceneError(
                f"anchors are (near-)collinear: triangle area {area:.3e} m^2 "
                f"<= {MIN_TRIANGLE_AREA_M2:.0e} m^2"
            )

    @property
    def anchors(self) -> np.ndarray:
        """Anchor coordinates as a (3, 2) array in A, B, C order."""
        return np.array([self.tx_a, self.tx_b, self.tx_c], dtype=float)

    def centroid(self) -> tuple[float, float]:
        g = self.anchors.mean(axis=0)
        return float(g[0]), float(g[1])

    def with_receiver(self, p) -> "Scene":
        """Copy of this scene with the true receiver moved to ``p``."""
        return Scene(self.tx_a, self.tx_b, self.tx_c, p, self.c)


def ranges(scene: Scene, p) -> tuple[float, float, float]:
    """Euclidean distances from ``p`` to anchors A, B, C."""
    q = np.asarray(_as_point(p, "p"), dtype=float)
    d = np.linalg.norm(scene.anchors - q, axis=1)
    return float(d[0]), float(d[1]), float(d[2])


# Barycentric slack: points this far outside an edge still count as inside,
# so boundary points survive floating-point noise.
_EDGE_TOL = -1e-12


def inside_triangle(scene: Scene, p) -> bool:
    """True iff ``p`` lies inside or on the anchor triangle."""
    px, py = _as_point(p, "p")
    (ax, ay), (bx, by), (cx, cy) = scene.tx_a, scene.tx_b, scene.tx_c
    den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
    w1 = ((by - cy) * (px - cx) + (cx - bx) * (py - cy)) / den
    w2 = ((cy - ay) * (px - cx) + (ax - cx) * (py - cy)) / den
    w3 = 1.0 - w1 - w2
    return w1 >= _EDGE_TOL and w2 >= _EDGE_TOL and w3 >= _EDGE_TOL


@dataclass(frozen=True)
class GridSpec:
    """Rectangular evaluation grid of steps_x * steps_y receiver points."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    steps_x: int = 9
    steps_y: int = 9

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise SceneError(
                f"grid bounds must satisfy x_min < x_max and y_min < y_max, got "
                f"[{self.x_min}, {self.x_max}] x [{self.y_min}, {self.y_max}]"
            )
        if self.steps_x < 1 or self.steps_y < 1:
            raise SceneError("grid steps must be positive integers")

    @property
    def n_points(self) -> int:
        return self.steps_x * self.steps_y

    def points(self) -> np.ndarray:
        """Grid points as an (n_points, 2) array, row-major (y outer, x inner)."""
        xs = np.linspace(self.x_min, self.x_max, self.steps_x)
        ys = np.linspace(self.y_min, self.y_max, self.steps_y)
        gx, gy = np.meshgrid(xs, ys)
        return np.column_stack([gx.ravel(), gy.ravel()])


# Fraction by which the anchor bounding box is shrunk on each side to form
# the default evaluation grid.
DEFAULT_GRID_INSET = 0.20


def default_grid(scene: Scene, steps: int = 9, inset: float = DEFAULT_GRID_INSET) -> GridSpec:
    """Default evaluation grid: anchor bounding box inset on each side.

    The inset keeps the grid away from the anchors themselves, where the
    hyperbolic geometry degenerates and the linearized error model blows up.
    """
    a = scene.anchors
    x0, y0 = a.min(axis=0)
    x1, y1 = a.max(axis=0)
    dx, dy = x1 - x0, y1 - y0
    return GridSpec(
        x_min=x0 + inset * dx,
        x_max=x1 - inset * dx,
        y_min=y0 + inset * dy,
        y_max=y1 - inset * dy,
        steps_x=steps,
        steps_y=steps,
    )
