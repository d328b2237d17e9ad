"""Synthetic registration scenes with known ground truth.

A scene is a handful of analytic surfaces (ellipsoids, spheres, planes,
one-sheet hyperboloids) sampled into a source cloud P. The target cloud Q is
the same samples moved by the ground-truth transform (optionally uniformly
scaled) plus isotropic Gaussian noise, so point ``i`` of P matches point ``i``
of Q. Correspondences mix planted true matches with outliers.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import NDArray

from qreg.core import Correspondences, PointCloud, RigidTransform, random_rotation, rotation_about_axis
from qreg.errors import InvalidSpec

SurfaceKind = Literal["ellipsoid", "sphere", "plane", "hyperboloid"]
OutlierModel = Literal["uniform_box", "wrong_match"]


@dataclass(frozen=True)
class SurfaceSpec:
    kind: SurfaceKind
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]  # plane: (half-width, half-height, unused)
    rotation: tuple[tuple[float, ...], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


@dataclass(frozen=True)
class SceneSpec:
    n_ellipsoids: int = 3
    n_spheres: int = 0
    n_planes: int = 0
    n_hyperboloids: int = 0
    surfaces: tuple[SurfaceSpec, ...] | None = None  # explicit surfaces override the counts
    points_per_surface: int = 2000
    noise_sigma: float = 0.0
    gt_transform: tuple[tuple[float, ...], ...] | None = None  # 4x4 rows; None -> random from seed
    target_scale: float = 1.0
    n_correspondences: int = 100
    inlier_ratio: float = 1.0
    outlier_model: OutlierModel = "uniform_box"
    outlier_min_residual: float = 0.1  # outliers landing closer than this to gt(p) are redrawn
    axis_ratio_range: tuple[float, float] = (1.5, 3.0)
    longest_axis_range: tuple[float, float] = (0.25, 0.4)
    extent: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.inlier_ratio <= 1:
            raise InvalidSpec("inlier_ratio must lie in (0, 1]")
        if self.points_per_surface <= 0 or self.n_correspondences <= 0:
            raise InvalidSpec("counts must be positive")
        if self.outlier_min_residual < 0:
            raise InvalidSpec("outlier_min_residual must be >= 0")
        if self.noise_sigma < 0 or self.target_scale <= 0 or self.extent <= 0:
            raise InvalidSpec("noise_sigma must be >= 0; target_scale and extent > 0")
        if self.outlier_model not in ("uniform_box", "wrong_match"):
            raise InvalidSpec(f"unknown outlier model {self.outlier_model!r}")
        n_surf = len(self.surfaces) if self.surfaces is not None else (
            self.n_ellipsoids + self.n_spheres + self.n_planes + self.n_hyperboloids
        )
        if n_surf <= 0:
            raise InvalidSpec("scene needs at least one surface")
        if self.n_correspondences > n_surf * self.points_per_surface:
            raise InvalidSpec("more correspondences requested than sampled points")
        lo, hi = self.axis_ratio_range
        if not 1 <= lo <= hi:
            raise InvalidSpec("axis_ratio_range must satisfy 1 <= low <= high")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown scene keys: {sorted(unknown)}")
        if d.get("surfaces") is not None:
            d["surfaces"] = tuple(
                SurfaceSpec(
                    s["kind"],
                    tuple(s["center"]),
                    tuple(s["semi_axes"]),
                    tuple(tuple(r) for r in s.get("rotation", np.eye(3).tolist())),
                )
                for s in d["surfaces"]
            )
        for key in ("axis_ratio_range", "longest_axis_range"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("gt_transform") is not None:
            d["gt_transform"] = tuple(tuple(r) for r in d["gt_transform"])
        return cls(**d)


@dataclass(eq=False)
class SyntheticScene:
    source: PointCloud
    target: PointCloud
    correspondences: Correspondences
    gt: RigidTransform
    planted_inliers: NDArray[np.int64]
    surfaces: list[SurfaceSpec] = field(default_factory=list)
    n_surface_points: int = 0

    @property
    def clouds(self) -> tuple[PointCloud, PointCloud]:
        return self.source, self.target

    @property
    def gt_correspondences(self) -> Correspondences:
        return self.correspondences.subset(self.planted_inliers)


def _unit_directions(rng: np.random.Generator, n: int) -> NDArray:
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1)[:, None]


def sample_surface(surface: SurfaceSpec, n: int, rng: np.random.Generator) -> NDArray[np.float64]:
    a = np.asarray(surface.semi_axes, dtype=np.float64)
    if surface.kind in ("ellipsoid", "sphere"):
        local = _unit_directions(rng, n) * a
    elif surface.kind == "plane":
        local = np.column_stack([rng.uniform(-a[0], a[0], n), rng.uniform(-a[1], a[1], n), np.zeros(n)])
    elif surface.kind == "hyperboloid":
        # x^2/a^2 + y^2/b^2 - z^2/c^2 = 1 for |z| <= c
        z = rng.uniform(-a[2], a[2], n)
        theta = rng.uniform(0.0, 2 * np.pi, n)
        r = np.sqrt(1.0 + (z / a[2]) ** 2)
        local = np.column_stack([a[0] * r * np.cos(theta), a[1] * r * np.sin(theta), z])
    else:
        raise InvalidSpec(f"unknown surface kind {surface.kind!r}")
    rot = np.asarray(surface.rotation, dtype=np.float64)
    return local @ rot.T + np.asarray(surface.center, dtype=np.float64)


def _random_surfaces(spec: SceneSpec, rng: np.random.Generator) -> list[SurfaceSpec]:
    kinds: list[SurfaceKind] = (
        ["ellipsoid"] * spec.n_ellipsoids
        + ["sphere"] * spec.n_spheres
        + ["plane"] * spec.n_planes
        + ["hyperboloid"] * spec.n_hyperboloids
    )
    lo, hi = spec.longest_axis_range
    surfaces: list[SurfaceSpec] = []
    placed: list[tuple[NDArray, float]] = []
    for kind in kinds:
        longest = rng.uniform(lo, hi) * spec.extent
        if kind == "ellipsoid":
            r1, r2 = rng.uniform(*spec.axis_ratio_range, size=2)
            axes = (longest, longest / r1, longest / (r1 * r2))
        elif kind == "sphere":
            axes = (longest / 2, longest / 2, longest / 2)
        elif kind == "plane":
            axes = (longest, longest / rng.uniform(1.0, 2.0), 0.0)
        else:
            r1 = rng.uniform(*spec.axis_ratio_range)
            axes = (longest / 2, longest / (2 * r1), longest / 2)
        radius = float(np.linalg.norm(axes))
        # Rejection-place bounding spheres so surfaces do not interpenetrate.
        for _ in range(1000):
            center = rng.uniform(0.0, spec.extent, size=3)
            if all(np.linalg.norm(center - c) > radius + r for c, r in placed):
                break
        placed.append((center, radius))
        rot = random_rotation(rng)
        surfaces.append(SurfaceSpec(kind, tuple(center.tolist()), axes, tuple(map(tuple, rot.tolist()))))
    return surfaces


def random_transform(rng: np.random.Generator, max_translation: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-max_translation, max_translation, size=3))


def generate(spec: SceneSpec) -> SyntheticScene:
    """Sample a scene; fully reproducible from ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    surfaces = list(spec.surfaces) if spec.surfaces is not None else _random_surfaces(spec, rng)
    pts = np.concatenate([sample_surface(s, spec.points_per_surface, rng) for s in surfaces])
    if spec.gt_transform is not None:
        gt = RigidTransform.from_matrix(spec.gt_transform)
    else:
        gt = random_transform(rng, spec.extent)
    exact = gt.apply(pts) * spec.target_scale
    moved = exact
    if spec.noise_sigma > 0:
        moved = moved + rng.normal(scale=spec.noise_sigma, size=moved.shape)

    n_pts = pts.shape[0]
    n = spec.n_correspondences
    n_in = int(round(spec.inlier_ratio * n))
    src = rng.choice(n_pts, size=n, replace=False)
    dst = src.copy()
    is_inlier = np.zeros(n, dtype=bool)
    is_inlier[rng.choice(n, size=n_in, replace=False)] = True
    outliers = np.flatnonzero(~is_inlier)

    target_pts = moved
    if spec.outlier_model == "uniform_box":
        lo, hi = moved.min(axis=0), moved.max(axis=0)
        extra = rng.uniform(lo, hi, size=(outliers.shape[0], 3))
        target_pts = np.concatenate([moved, extra])
        dst[outliers] = n_pts + np.arange(outliers.shape[0])
    else:
        shift = rng.integers(1, n_pts, size=outliers.shape[0])
        dst[outliers] = (src[outliers] + shift) % n_pts

    # Redraw chance coincidences so that planted_inliers is exactly the set of
    # geometrically consistent matches. Only scenes that need it consume extra draws.
    clean = exact[src]
    for _ in range(100):
        close = outliers[np.linalg.norm(target_pts[dst[outliers]] - clean[outliers], axis=1) < spec.outlier_min_residual]
        if close.size == 0:
            break
        if spec.outlier_model == "uniform_box":
            target_pts[dst[close]] = rng.uniform(lo, hi, size=(close.shape[0], 3))
        else:
            dst[close] = (src[close] + rng.integers(1, n_pts, size=close.shape[0])) % n_pts
    else:
        raise InvalidSpec("could not place outliers farther than outlier_min_residual; lower it")

    corrs = Correspondences.from_pairs(src, dst)
    return SyntheticScene(
        source=PointCloud(pts),
        target=PointCloud(target_pts),
        correspondences=corrs,
        gt=gt,
        planted_inliers=np.flatnonzero(is_inlier),
        surfaces=surfaces,
        n_surface_points=n_pts,
    )


def perturb_transform(transform: RigidTransform, angle_deg: float, trans_units: float, seed: int) -> RigidTransform:
    """Left-compose a rotation of exactly ``angle_deg`` about a random axis and
    shift the translation by exactly ``trans_units`` in a random direction."""
    rng = np.random.default_rng(seed)
    axis = _unit_directions(rng, 1)[0]
    direction = _unit_directions(rng, 1)[0]
    delta = rotation_about_axis(axis, np.radians(angle_deg))
    return RigidTransform(delta @ transform.rotation, transform.translation + trans_units * direction)
