"""Per-slice dissimilarities, the dynamic metric, and center mean rules.

Every geometry is mapped to a *working* space in which clustering runs:

* ``euclidean``: identity; dissimilarity is the squared distance.
* ``ellipsoid``: data scaled by ``1/l_j`` along each axis ``v_j``; squared
  distance in the scaled coordinates.
* ``sphere``: unit vectors (optionally lifted from lon/lat degrees);
  dissimilarity ``1 - <a, b>``.
* ``circle``: positions on [0, 1) with the ends identified, lifted to
  ``(cos 2 pi x, sin 2 pi x)`` and handled like the sphere.

Centers are stored in working coordinates; :func:`from_working` maps them back.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import TrajectoryEnsemble

KINDS = ("euclidean", "ellipsoid", "sphere", "circle")
UNIT_TOL = 1e-9
DEGENERATE_NORM = 1e-12


class GeometryError(ValueError):
    """Invalid geometry configuration or input outside the geometry's domain."""


class EmptySupportError(GeometryError):
    """Two trajectories (or a trajectory and a center) share no observed slice."""


class DegenerateMeanError(GeometryError):
    """Spherical mean of (near-)antipodal points has no direction."""


@dataclass(frozen=True, eq=False)
class GeometryConfig:
    """Choice of per-slice dissimilarity.

    ``ellipsoid_axes`` holds the orthonormal semi-axis directions as rows and
    ``ellipsoid_lengths`` the matching semi-axis lengths.
    """

    kind: str = "euclidean"
    ellipsoid_axes: np.ndarray | None = None
    ellipsoid_lengths: np.ndarray | None = None
    sphere_lift: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise GeometryError(f"unknown geometry {self.kind!r}; expected one of {KINDS}")
        if self.kind == "ellipsoid":
            if self.ellipsoid_axes is None or self.ellipsoid_lengths is None:
                raise GeometryError("ellipsoid geometry needs axes and lengths")
            axes = np.atleast_2d(np.asarray(self.ellipsoid_axes, dtype=float))
            lengths = np.asarray(self.ellipsoid_lengths, dtype=float).reshape(-1)
            d = lengths.size
            if axes.shape != (d, d):
                raise GeometryError(f"need {d} axes of dimension {d}, got shape {axes.shape}")
            if np.max(np.abs(axes @ axes.T - np.eye(d))) > 1e-10:
                raise GeometryError("ellipsoid axes must be orthonormal")
            if not np.all(lengths > 0) or not np.all(np.isfinite(lengths)):
                raise GeometryError("ellipsoid lengths must be strictly positive")
            object.__setattr__(self, "ellipsoid_axes", axes)
            object.__setattr__(self, "ellipsoid_lengths", lengths)

    @property
    def angular(self) -> bool:
        """True when the working metric is cosine dissimilarity on unit vectors."""
        return self.kind in ("sphere", "circle")

    def scaling_matrix(self, inverse: bool = False) -> np.ndarray:
        v, lengths = self.ellipsoid_axes, self.ellipsoid_lengths
        factors = lengths if inverse else 1.0 / lengths
        return v.T @ np.diag(factors) @ v

    def working_dimension(self, d: int) -> int:
        if self.kind == "circle":
            return 2
        if self.kind == "sphere" and self.sphere_lift:
            return 3
        return d

    def check_dimension(self, d: int) -> None:
        if self.kind == "circle" and d != 1:
            raise GeometryError(f"circle geometry requires d=1 data, got d={d}")
        if self.kind == "sphere" and self.sphere_lift and d != 2:
            raise GeometryError(f"lon/lat lift requires d=2 data, got d={d}")
        if self.kind == "ellipsoid" and self.ellipsoid_lengths.size != d:
            raise GeometryError(f"ellipsoid has {self.ellipsoid_lengths.size} axes but data has d={d}")


def lift_lonlat(lon_deg, lat_deg) -> np.ndarray:
    """Map longitude/latitude in degrees to unit vectors in R^3 (shape ``(..., 3)``)."""
    lon = np.radians(np.asarray(lon_deg, dtype=float))
    lat_deg = np.asarray(lat_deg, dtype=float)
    if np.any(np.abs(lat_deg) > 90.0):
        raise GeometryError("latitude must lie in [-90, 90]")
    lat = np.radians(lat_deg)
    return np.stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)], axis=-1)


def lonlat_from_unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    lon = np.degrees(np.arctan2(v[..., 1], v[..., 0]))
    lat = np.degrees(np.arcsin(np.clip(v[..., 2], -1.0, 1.0)))
    return np.stack([lon, lat], axis=-1)


def lift_circle(x) -> np.ndarray:
    angle = 2.0 * np.pi * np.asarray(x, dtype=float)
    return np.stack([np.cos(angle), np.sin(angle)], axis=-1)


def circle_from_unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    x = np.mod(np.arctan2(v[..., 1], v[..., 0]) / (2.0 * np.pi), 1.0)
    return np.where(x >= 1.0, 0.0, x)[..., None]


def circle_distance(a, b) -> np.ndarray:
    """Arc-length distance on [0, 1) with the ends identified."""
    gap = np.abs(np.mod(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), 1.0))
    return np.minimum(gap, 1.0 - gap)


def _check_unit(v: np.ndarray) -> None:
    norms = np.linalg.norm(v, axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise GeometryError("sphere geometry requires unit-norm points")


def to_working(points: np.ndarray, g: GeometryConfig) -> np.ndarray:
    """Transform native coordinates ``(..., d)`` into working coordinates.

    NaN entries pass through as NaN.
    """
    points = np.asarray(points, dtype=float)
    g.check_dimension(points.shape[-1])
    if g.kind == "euclidean":
        return points.copy()
    if g.kind == "ellipsoid":
        return points @ g.scaling_matrix().T
    if g.kind == "circle":
        return lift_circle(points[..., 0])
    if g.sphere_lift:
        lifted = lift_lonlat(np.nan_to_num(points[..., 0]), np.nan_to_num(points[..., 1]))
        lifted[np.isnan(points).any(axis=-1)] = np.nan
        return lifted
    finite = np.isfinite(points).all(axis=-1)
    _check_unit(points[finite])
    return points.copy()


def from_working(points: np.ndarray, g: GeometryConfig) -> np.ndarray:
    """Inverse of :func:`to_working` for centers."""
    points = np.asarray(points, dtype=float)
    if g.kind == "euclidean":
        return points.copy()
    if g.kind == "ellipsoid":
        return points @ g.scaling_matrix(inverse=True).T
    if g.kind == "circle":
        return circle_from_unit(points)
    if g.sphere_lift:
        return lonlat_from_unit(points)
    return points.copy()


def working_positions(e: TrajectoryEnsemble, g: GeometryConfig) -> np.ndarray:
    """Working-space positions with unobserved cells set to zero."""
    w = to_working(e.positions, g)
    w[~e.mask] = 0.0
    return w


def pointwise(a: np.ndarray, b: np.ndarray, angular: bool) -> np.ndarray:
    """Working-space slice dissimilarity, broadcast over leading axes."""
    if angular:
        return np.maximum(1.0 - np.sum(a * b, axis=-1), 0.0)
    diff = a - b
    return np.sum(diff * diff, axis=-1)


def slice_dissimilarity(a, b, g: GeometryConfig) -> float:
    """Dissimilarity of two points of one time slice, in native coordinates.

    Squared distance for ``euclidean``/``ellipsoid``; ``1 - cos`` of the angle
    between the points for ``sphere``/``circle``.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if a.shape != b.shape:
        raise GeometryError(f"points have different shapes {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise GeometryError("points must be finite")
    return float(pointwise(to_working(a, g), to_working(b, g), g.angular))


def dynamic_distance(i: int, j: int, e: TrajectoryEnsemble, g: GeometryConfig) -> float:
    """Sum of slice dissimilarities over the slices where both trajectories are observed."""
    common = e.mask[i] & e.mask[j]
    if not common.any():
        raise EmptySupportError(f"trajectories {i} and {j} share no observed time slice")
    a = to_working(e.positions[i, common], g)
    b = to_working(e.positions[j, common], g)
    return float(np.sum(pointwise(a, b, g.angular)))


def projected_point_to_center_distance(
    i: int, e: TrajectoryEnsemble, c: np.ndarray, g: GeometryConfig
) -> float:
    """Distance from trajectory ``i`` to a center over the slices where ``i`` is observed.

    Args:
        i: trajectory index.
        e: the ensemble.
        c: center in native coordinates, shape ``(num_times, d)`` or flat
            time-major ``(num_times * d,)``. Only slices in the support of
            ``i`` are read.
        g: geometry.
    """
    c = np.asarray(c, dtype=float).reshape(e.num_times, e.d)
    support = e.mask[i]
    cs = c[support]
    if not np.all(np.isfinite(cs)):
        raise GeometryError(f"center is undefined on a slice observed by trajectory {i}")
    a = to_working(e.positions[i, support], g)
    return float(np.sum(pointwise(a, to_working(cs, g), g.angular)))


def weighted_mean(points: np.ndarray, weights: np.ndarray, angular: bool) -> np.ndarray:
    """Working-space mean rule: weighted average, renormalised for angular kinds."""
    total = np.sum(weights)
    if not total > 0:
        raise GeometryError("center mean needs at least one positive weight")
    s = weights @ points
    if angular:
        norm = np.linalg.norm(s)
        if norm < DEGENERATE_NORM * total:
            raise DegenerateMeanError("weighted spherical mean vanishes (antipodal configuration)")
        return s / norm
    return s / total


def center_slice_mean(points, weights, g: GeometryConfig) -> np.ndarray:
    """Center of one slice in native coordinates (renormalised onto the sphere/circle)."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    weights = np.asarray(weights, dtype=float).reshape(-1)
    if weights.size != points.shape[0]:
        raise GeometryError("need one weight per point")
    if np.any(weights < 0):
        raise GeometryError("weights must be nonnegative")
    mean = weighted_mean(to_working(points, g), weights, g.angular)
    return from_working(mean, g)
