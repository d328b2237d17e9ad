"""Local quadric patches: fit, principal frame, axis lengths, normal, degeneracy class.

A quadric is the zero set of ``p^T Q p`` for homogeneous ``p = (x, y, z, 1)`` and

    Q = [[A, D, E, G],
         [D, B, F, H],
         [E, F, C, I],
         [G, H, I, J]].

Fitting works in a frame centred on the anchor point, so "the surface passes
through the anchor" is simply ``J = 0`` and only eight unknowns remain. The
quadratic block is parameterised so that ``A + B + C = -3``, which fixes the
overall scale of the coefficients and turns the fit into an ordinary linear
least-squares problem with right-hand side ``x^2 + y^2 + z^2``.

Axis lengths are measured in scene units. With the quadric written about its
own centre ``c = -B^{-1} g`` as ``(p - c)^T B (p - c) = k``, where
``k = g^T B^{-1} g - J``, the principal semi-axes are ``sqrt(|k / lambda_i|)``.
This is invariant to rigid motion and scales linearly with the cloud, which the
1-point solver relies on for its scale gate.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from qreg.core import Mat3, PointCloud, Points, Vec3, as_points
from qreg.errors import DegenerateQuadric, PatchFailure, SingularSystem, TooFewPoints, ZeroGradient
from qreg.spatial import SpatialIndex

DEFAULT_NEIGHBORS = 50
DEGENERACY_TOL = 1e-3
MAX_CONDITION = 1e12
EIGEN_TOL = 1e-12
_N_UNKNOWNS = 8


class Degeneracy(enum.Enum):
    DISTINCT = "distinct"
    TWO_EQUAL = "two_equal"
    ALL_EQUAL = "all_equal"


@dataclass(frozen=True)
class QuadricCoefficients:
    A: float
    B: float
    C: float
    D: float
    E: float
    F: float
    G: float
    H: float
    I: float  # noqa: E741
    J: float

    @classmethod
    def from_parts(cls, block: ArrayLike, linear: ArrayLike, constant: float) -> QuadricCoefficients:
        b = np.asarray(block, dtype=np.float64)
        g = np.asarray(linear, dtype=np.float64)
        return cls(
            float(b[0, 0]), float(b[1, 1]), float(b[2, 2]),
            float(b[0, 1]), float(b[0, 2]), float(b[1, 2]),
            float(g[0]), float(g[1]), float(g[2]), float(constant),
        )

    @classmethod
    def from_matrix(cls, q: ArrayLike) -> QuadricCoefficients:
        q = np.asarray(q, dtype=np.float64)
        if q.shape != (4, 4) or not np.allclose(q, q.T):
            raise ValueError("quadric matrix must be a symmetric 4x4 array")
        return cls.from_parts(q[:3, :3], q[:3, 3], q[3, 3])

    @property
    def block(self) -> Mat3:
        """Upper-left 3x3 (quadratic) part of Q."""
        return np.array([[self.A, self.D, self.E], [self.D, self.B, self.F], [self.E, self.F, self.C]])

    @property
    def linear(self) -> Vec3:
        return np.array([self.G, self.H, self.I])

    @property
    def matrix(self) -> NDArray[np.float64]:
        q = np.empty((4, 4))
        q[:3, :3] = self.block
        q[:3, 3] = q[3, :3] = self.linear
        q[3, 3] = self.J
        return q

    def as_vector(self) -> NDArray[np.float64]:
        return np.array([self.A, self.B, self.C, self.D, self.E, self.F, self.G, self.H, self.I, self.J])

    def evaluate(self, points: ArrayLike) -> NDArray[np.float64]:
        """Algebraic residual ``p^T Q p`` for each point."""
        p = as_points(points)
        b = self.block
        return np.einsum("ni,ij,nj->n", p, b, p) + 2.0 * p @ self.linear + self.J

    def normalized_residuals(self, points: ArrayLike) -> NDArray[np.float64]:
        """Residuals after scaling Q to unit Frobenius norm."""
        return self.evaluate(points) / np.linalg.norm(self.matrix)


@dataclass(frozen=True, eq=False)
class LocalFrame:
    """Principal axes of a quadric, longest first, as a right-handed rotation."""

    axes: Mat3
    axis_lengths: Vec3
    eigenvalues: Vec3


@dataclass(frozen=True, eq=False)
class QuadricPatch:
    anchor: Vec3
    coefficients: QuadricCoefficients
    frame: LocalFrame
    normal: Vec3
    degeneracy: Degeneracy
    point_index: int = -1

    @property
    def is_distinct(self) -> bool:
        return self.degeneracy is Degeneracy.DISTINCT


# ---------------------------------------------------------------------------
# Batched kernels. Every public single-item operation goes through these so the
# scalar and vectorised paths cannot drift apart.
# ---------------------------------------------------------------------------


def _design_rows(u: NDArray[np.float64]) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    rows = np.stack(
        [xx + yy - 2 * zz, xx + zz - 2 * yy, 2 * x * y, 2 * x * z, 2 * y * z, 2 * x, 2 * y, 2 * z],
        axis=-1,
    )
    return rows, xx + yy + zz


def _fit_centered(offsets: NDArray[np.float64]) -> tuple[NDArray, NDArray, NDArray]:
    """Fit quadrics through the origin to stacks of centred neighbourhoods.

    ``offsets`` has shape ``(m, n, 3)``. Returns the quadratic blocks ``(m, 3, 3)``,
    linear parts ``(m, 3)`` (both in the centred, unscaled frame) and a boolean
    ``(m,)`` mask of systems that passed the conditioning guard.
    """
    m = offsets.shape[0]
    # Isotropic rescaling to unit RMS radius; the least-squares minimiser is
    # unchanged (all residuals scale by s^2) but the normal matrix is far
    # better conditioned.
    scale = np.sqrt((offsets**2).sum(axis=2).mean(axis=1))
    ok = scale > 0
    safe_scale = np.where(ok, scale, 1.0)
    u = offsets / safe_scale[:, None, None]
    rows, rhs = _design_rows(u)
    normal = np.einsum("mni,mnj->mij", rows, rows)
    moment = np.einsum("mni,mn->mi", rows, rhs)

    lam, vec = np.linalg.eigh(normal)
    lam_max = lam[:, -1]
    ok &= lam[:, 0] > 0
    ok &= lam_max <= MAX_CONDITION * np.where(lam[:, 0] > 0, lam[:, 0], np.inf)
    inv = np.where(ok[:, None], 1.0 / np.where(lam > 0, lam, 1.0), 0.0)
    w = np.einsum("mij,mj,mkj,mk->mi", vec, inv, vec, moment)

    a_prime, b_prime = w[:, 0], w[:, 1]
    a = a_prime + b_prime - 1.0
    b = a_prime - 2.0 * b_prime - 1.0
    c = -3.0 - a - b
    block = np.empty((m, 3, 3))
    block[:, 0, 0], block[:, 1, 1], block[:, 2, 2] = a, b, c
    block[:, 0, 1] = block[:, 1, 0] = w[:, 2]
    block[:, 0, 2] = block[:, 2, 0] = w[:, 3]
    block[:, 1, 2] = block[:, 2, 1] = w[:, 4]
    linear = w[:, 5:8] * safe_scale[:, None]
    return block, linear, ok


def _frames(block: NDArray, linear: NDArray, constant: NDArray) -> tuple[NDArray, NDArray, NDArray, NDArray]:
    """Principal frames for stacks of quadrics.

    Returns ``axes (m,3,3)``, ``lengths (m,3)``, ``eigenvalues (m,3)`` of the
    centre-normalised matrix ``B / k`` and an ``ok`` mask.
    """
    lam, vec = np.linalg.eigh(block)
    mag = np.abs(lam)
    ok = mag.min(axis=1) > EIGEN_TOL * mag.max(axis=1)
    safe = np.where(mag > 0, lam, 1.0)
    proj = np.einsum("mji,mj->mi", vec, linear)
    quad = (proj**2 / safe).sum(axis=1)
    k = quad - constant
    ok &= np.abs(k) > EIGEN_TOL * np.maximum(np.abs(quad), np.abs(constant))
    safe_k = np.where(ok, k, 1.0)

    eig = lam / safe_k[:, None]
    lengths = 1.0 / np.sqrt(np.abs(np.where(ok[:, None], eig, 1.0)))
    # Longest axis first; stable so that exact ties keep eigh's order.
    order = np.argsort(-lengths, axis=1, kind="stable")
    lengths = np.take_along_axis(lengths, order, axis=1)
    eig = np.take_along_axis(eig, order, axis=1)
    axes = np.take_along_axis(vec, order[:, None, :], axis=2)
    flip = np.linalg.det(axes) < 0
    axes[flip, :, 2] *= -1.0
    return axes, lengths, eig, ok


def _classify(lengths: NDArray, tol: float) -> list[Degeneracy]:
    l1 = lengths[:, 0]
    gaps = np.stack(
        [
            np.abs(lengths[:, 0] - lengths[:, 1]),
            np.abs(lengths[:, 0] - lengths[:, 2]),
            np.abs(lengths[:, 1] - lengths[:, 2]),
        ],
        axis=1,
    ) / l1[:, None]
    out = []
    for g in gaps:
        if np.all(g > tol):
            out.append(Degeneracy.DISTINCT)
        elif np.all(g <= tol):
            out.append(Degeneracy.ALL_EQUAL)
        else:
            out.append(Degeneracy.TWO_EQUAL)
    return out


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def fit_quadric(anchor: ArrayLike, neighborhood: ArrayLike) -> QuadricCoefficients:
    """Least-squares quadric through ``anchor`` fitted to ``neighborhood``.

    Coefficients are returned in the original coordinate frame with the
    quadratic block normalised to trace -3.
    """
    a = np.asarray(anchor, dtype=np.float64).reshape(3)
    pts = as_points(neighborhood)
    if pts.shape[0] < _N_UNKNOWNS:
        raise TooFewPoints(f"need at least {_N_UNKNOWNS} neighbours, got {pts.shape[0]}")
    if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(a))):
        raise ValueError("points must be finite")
    block, linear, ok = _fit_centered((pts - a)[None])
    if not ok[0]:
        raise SingularSystem("normal equations are singular or too ill-conditioned (coplanar/degenerate neighbourhood)")
    return _uncenter(block[0], linear[0], a)


def _uncenter(block: Mat3, linear: Vec3, anchor: Vec3) -> QuadricCoefficients:
    # x = y - a:  x^T B x + 2 g^T x  ==  y^T B y + 2 (g - B a)^T y + (a^T B a - 2 g^T a)
    ba = block @ anchor
    return QuadricCoefficients.from_parts(block, linear - ba, anchor @ ba - 2.0 * linear @ anchor)


def extract_frame(coeffs: QuadricCoefficients) -> LocalFrame:
    """Principal axes and semi-axis lengths of a quadric.

    Raises :class:`DegenerateQuadric` when an eigenvalue of the quadratic block
    vanishes or the centre constant is zero (unbounded or zero-size axes).
    """
    axes, lengths, eig, ok = _frames(coeffs.block[None], coeffs.linear[None], np.array([coeffs.J]))
    if not ok[0]:
        raise DegenerateQuadric("quadric has a vanishing eigenvalue or centre constant")
    return LocalFrame(axes[0], lengths[0], eig[0])


def classify_degeneracy(frame: LocalFrame, tol: float = DEGENERACY_TOL) -> Degeneracy:
    """Distinct / TwoEqual / AllEqual from pairwise axis-length gaps relative to the longest axis."""
    lengths = np.sort(np.asarray(frame.axis_lengths, dtype=np.float64))[::-1]
    return _classify(lengths[None], tol)[0]


def quadric_normal(coeffs: QuadricCoefficients, at: ArrayLike, centroid: ArrayLike | None = None) -> Vec3:
    """Unit gradient of ``p^T Q p`` at ``at``.

    If ``centroid`` is given the sign is chosen so the normal points away from it.
    """
    p = np.asarray(at, dtype=np.float64).reshape(3)
    bp = coeffs.block @ p
    grad = 2.0 * (bp + coeffs.linear)
    norm = np.linalg.norm(grad)
    if norm <= 1e-12 * (np.linalg.norm(bp) + np.linalg.norm(coeffs.linear)) or norm == 0:
        raise ZeroGradient(f"quadric gradient vanishes at {p.tolist()}")
    n = grad / norm
    if centroid is not None and n @ (p - np.asarray(centroid, dtype=np.float64)) < 0:
        n = -n
    return n


def build_patches(
    cloud: PointCloud,
    index: SpatialIndex,
    point_indices: Sequence[int] | NDArray[np.int64],
    k: int = DEFAULT_NEIGHBORS,
    tol: float = DEGENERACY_TOL,
) -> list[QuadricPatch | PatchFailure]:
    """Vectorised :func:`build_patch`; failures are returned in place, not raised."""
    idx = np.asarray(point_indices, dtype=np.int64).reshape(-1)
    n = len(cloud)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError("point index out of range")
    if idx.size == 0:
        return []
    k_eff = min(k, n)
    if k_eff < _N_UNKNOWNS:
        err = TooFewPoints(f"need at least {_N_UNKNOWNS} neighbours, cloud has {n}")
        return [PatchFailure(int(i), err) for i in idx]

    anchors = cloud.points[idx]
    nbr, _ = index.knn_batch(anchors, k_eff)
    offsets = cloud.points[nbr] - anchors[:, None, :]
    block, linear, fit_ok = _fit_centered(offsets)
    # Anchor-centred quadric: constant term is exactly zero.
    axes, lengths, eig, frame_ok = _frames(block, linear, np.zeros(idx.shape[0]))
    classes = _classify(np.where(frame_ok[:, None], lengths, 1.0), tol)

    grad_norm = np.linalg.norm(linear, axis=1)
    normals = linear / np.where(grad_norm > 0, grad_norm, 1.0)[:, None]
    # Centroid sits at mean(offsets) in the centred frame; face away from it.
    away = np.einsum("mi,mi->m", normals, -offsets.mean(axis=1))
    normals[away < 0] *= -1.0

    out: list[QuadricPatch | PatchFailure] = []
    for j, pi in enumerate(idx):
        if not fit_ok[j]:
            out.append(PatchFailure(int(pi), SingularSystem("ill-conditioned neighbourhood")))
            continue
        if not frame_ok[j]:
            out.append(PatchFailure(int(pi), DegenerateQuadric("vanishing eigenvalue or centre constant")))
            continue
        if grad_norm[j] == 0:
            out.append(PatchFailure(int(pi), ZeroGradient("zero gradient at anchor")))
            continue
        anchor = anchors[j].copy()
        out.append(
            QuadricPatch(
                anchor=anchor,
                coefficients=_uncenter(block[j], linear[j], anchor),
                frame=LocalFrame(axes[j], lengths[j], eig[j]),
                normal=normals[j],
                degeneracy=classes[j],
                point_index=int(pi),
            )
        )
    return out


def build_patch(
    cloud: PointCloud,
    index: SpatialIndex,
    point_index: int,
    k: int = DEFAULT_NEIGHBORS,
    tol: float = DEGENERACY_TOL,
) -> QuadricPatch:
    """kNN neighbourhood -> quadric fit -> frame -> degeneracy class -> normal, for one point."""
    result = build_patches(cloud, index, [point_index], k, tol)[0]
    if isinstance(result, PatchFailure):
        raise result
    return result
