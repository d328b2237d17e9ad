"""Geometric primitives: point clouds, rigid transforms, correspondences and the
weighted Kabsch-Umeyama solver.

Points are plain ``float64`` numpy arrays of shape ``(3,)`` or ``(N, 3)``.
Transforms and clouds are frozen dataclasses holding read-only arrays, so they
can be shared freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence, TypeAlias

import numpy as np
from numpy.typing import ArrayLike, NDArray

from qreg.errors import DegenerateInput, EmptyCloud

Vec3: TypeAlias = NDArray[np.float64]  # (3,)
Mat3: TypeAlias = NDArray[np.float64]  # (3, 3)
Points: TypeAlias = NDArray[np.float64]  # (N, 3)

ORTHO_TOL = 1e-9
# Reprojection is for round-off only; anything further off is a caller bug.
_MAX_REPAIR = 1e-4


def _frozen(a: ArrayLike, shape: tuple[int, ...] | None = None, name: str = "array") -> NDArray[np.float64]:
    arr = np.array(a, dtype=np.float64)  # always copies
    if shape is not None and arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


def as_points(points: ArrayLike) -> Points:
    """Coerce to a contiguous ``(N, 3)`` float64 array (a single point becomes ``(1, 3)``)."""
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"expected points of shape (N, 3), got {arr.shape}")
    return arr


def project_to_so3(m: ArrayLike) -> Mat3:
    """Closest proper rotation to ``m`` in the Frobenius norm."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_about_axis(axis: ArrayLike, angle: float) -> Mat3:
    """Rodrigues rotation by ``angle`` radians about ``axis``."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0.0, -k[2], k[1]], [k[2], 0.0, -k[0]], [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(angle) * kx + (1.0 - np.cos(angle)) * (kx @ kx)


def random_rotation(rng: np.random.Generator) -> Mat3:
    """Uniformly distributed rotation (unit quaternion from a 4D Gaussian)."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rigid motion ``p -> R p + t``."""

    rotation: Mat3
    translation: Vec3

    def __post_init__(self) -> None:
        r = _frozen(self.rotation, (3, 3), "rotation")
        t = _frozen(self.translation, (3,), "translation")
        drift = max(np.abs(r.T @ r - np.eye(3)).max(), abs(np.linalg.det(r) - 1.0))
        if drift > ORTHO_TOL:
            fixed = project_to_so3(r)
            if np.abs(fixed - r).max() > _MAX_REPAIR or np.linalg.det(r) < 0:
                raise ValueError("rotation is not a proper rotation matrix")
            r = _frozen(fixed)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: ArrayLike) -> RigidTransform:
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        if np.abs(m[3] - [0.0, 0.0, 0.0, 1.0]).max() > ORTHO_TOL:
            raise ValueError("bottom row of a rigid 4x4 matrix must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> NDArray[np.float64]:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: ArrayLike) -> NDArray[np.float64]:
        """Transform one point ``(3,)`` or a stack ``(N, 3)``; output shape follows input."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: RigidTransform) -> RigidTransform:
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __repr__(self) -> str:
        return f"RigidTransform(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def apply_transform(transform: RigidTransform, points: ArrayLike) -> NDArray[np.float64]:
    return transform.apply(points)


def compose(t1: RigidTransform, t2: RigidTransform) -> RigidTransform:
    return t1.compose(t2)


def invert(transform: RigidTransform) -> RigidTransform:
    return transform.inverse()


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Ordered 3D points with optional unit normals. Never reordered."""

    points: Points
    normals: Points | None = None

    def __post_init__(self) -> None:
        pts = _frozen(as_points(self.points) if np.size(self.points) else np.empty((0, 3)), name="points")
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            n = np.array(self.normals, dtype=np.float64).reshape(-1, 3)
            if n.shape != pts.shape:
                raise ValueError("normals must match points in shape")
            lengths = np.linalg.norm(n, axis=1)
            if np.any(lengths == 0) or not np.all(np.isfinite(lengths)):
                raise ValueError("normals must be finite and nonzero")
            object.__setattr__(self, "normals", _frozen(n / lengths[:, None], name="normals"))

    def __len__(self) -> int:
        return self.points.shape[0]

    def require_nonempty(self) -> None:
        if len(self) == 0:
            raise EmptyCloud("point cloud is empty")

    def transformed(self, transform: RigidTransform) -> PointCloud:
        normals = None if self.normals is None else self.normals @ transform.rotation.T
        return PointCloud(transform.apply(self.points), normals)


@dataclass(frozen=True)
class Correspondence:
    source_index: int
    target_index: int
    score: float = 1.0

    def __post_init__(self) -> None:
        if self.source_index < 0 or self.target_index < 0:
            raise ValueError("correspondence indices must be non-negative")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"correspondence score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Columnar storage for a list of :class:`Correspondence`."""

    source: NDArray[np.int64]
    target: NDArray[np.int64]
    score: NDArray[np.float64]

    def __post_init__(self) -> None:
        src = np.array(self.source, dtype=np.int64).reshape(-1)
        dst = np.array(self.target, dtype=np.int64).reshape(-1)
        score = np.array(self.score, dtype=np.float64).reshape(-1)
        if not (src.shape == dst.shape == score.shape):
            raise ValueError("source, target and score columns must have equal length")
        if src.size and (src.min() < 0 or dst.min() < 0):
            raise ValueError("correspondence indices must be non-negative")
        if score.size and (np.any(~np.isfinite(score)) or score.min() < 0.0 or score.max() > 1.0):
            raise ValueError("correspondence scores must lie in [0, 1]")
        for name, arr in (("source", src), ("target", dst), ("score", score)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_pairs(cls, source: ArrayLike, target: ArrayLike, score: ArrayLike | None = None) -> Correspondences:
        src = np.asarray(source, dtype=np.int64).reshape(-1)
        if score is None:
            score = np.ones(src.shape[0])
        return cls(src, target, score)

    @classmethod
    def from_list(cls, items: Iterable[Correspondence]) -> Correspondences:
        items = list(items)
        return cls(
            [c.source_index for c in items],
            [c.target_index for c in items],
            [c.score for c in items],
        )

    def __len__(self) -> int:
        return self.source.shape[0]

    def __getitem__(self, i: int) -> Correspondence:
        return Correspondence(int(self.source[i]), int(self.target[i]), float(self.score[i]))

    def __iter__(self) -> Iterator[Correspondence]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx: ArrayLike) -> Correspondences:
        idx = np.asarray(idx, dtype=np.int64)
        return Correspondences(self.source[idx], self.target[idx], self.score[idx])

    def check_bounds(self, source_cloud: PointCloud, target_cloud: PointCloud) -> None:
        if len(self) == 0:
            return
        if self.source.max() >= len(source_cloud) or self.target.max() >= len(target_cloud):
            raise IndexError("correspondence index out of range for its cloud")

    def endpoints(self, source_cloud: PointCloud, target_cloud: PointCloud) -> tuple[Points, Points]:
        """Matched coordinates ``(p_i, q_i)`` as two ``(K, 3)`` arrays."""
        self.check_bounds(source_cloud, target_cloud)
        return source_cloud.points[self.source], target_cloud.points[self.target]


def rotations_from_covariance(h: NDArray[np.float64]) -> NDArray[np.float64]:
    """Proper rotations maximizing ``trace(R H)`` for a stack of cross-covariances.

    ``h`` has shape ``(..., 3, 3)`` with ``H = sum w (src - c_src)(dst - c_dst)^T``.
    """
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, -1, -2)
    ut = np.swapaxes(u, -1, -2)
    d = np.sign(np.linalg.det(v @ ut))
    d = np.where(d == 0, 1.0, d)
    v = v.copy()
    v[..., :, 2] *= d[..., None]
    return v @ ut


def kabsch_weighted(
    src: ArrayLike,
    dst: ArrayLike,
    weights: ArrayLike | None = None,
    rank_tol: float = 1e-12,
) -> RigidTransform:
    """Weighted least-squares rigid fit minimizing ``sum w_i |R src_i + t - dst_i|^2``.

    Reflections are corrected through the sign of the smallest singular direction.
    Raises :class:`DegenerateInput` when the weighted cross-covariance has rank < 2.
    """
    p = as_points(src)
    q = as_points(dst)
    if p.shape != q.shape:
        raise ValueError("src and dst must have the same shape")
    w = np.ones(p.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != p.shape[0]:
        raise ValueError("one weight per point pair is required")
    if p.shape[0] < 3:
        raise DegenerateInput(f"need at least 3 point pairs, got {p.shape[0]}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateInput("weights are all zero")

    w = w / wsum
    cp = w @ p
    cq = w @ q
    h = (p - cp).T @ ((q - cq) * w[:, None])
    s = np.linalg.svd(h, compute_uv=False)
    if s[0] <= 0 or s[1] <= rank_tol * s[0]:
        raise DegenerateInput("weighted cross-covariance has rank < 2 (collinear or coincident points)")
    r = rotations_from_covariance(h)
    return RigidTransform(r, cq - r @ cp)


def residuals(transform: RigidTransform, src: Points, dst: Points) -> NDArray[np.float64]:
    """Per-pair Euclidean residuals ``|T(src_i) - dst_i|``."""
    return np.linalg.norm(transform.apply(src) - dst, axis=1)


def rotation_angle(r: Mat3) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def stack_rotations(transforms: Sequence[RigidTransform]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    if not transforms:
        return np.empty((0, 3, 3)), np.empty((0, 3))
    return (
        np.stack([t.rotation for t in transforms]),
        np.stack([t.translation for t in transforms]),
    )
