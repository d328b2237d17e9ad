"""Registration quality metrics for 3DMatch-, KITTI- and ModelNet-style protocols."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable, Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike

from qreg.core import Correspondences, PointCloud, RigidTransform, as_points
from qreg.estimator import pose_rmse
from qreg.spatial import SpatialIndex

Protocol = Literal["threedmatch", "kitti", "modelnet"]
PROTOCOLS: tuple[str, ...] = ("threedmatch", "kitti", "modelnet")

RMSE_RECALL_THRESHOLD = 0.2
KITTI_RRE_MAX = 5.0
KITTI_RTE_MAX = 2.0


def _rotation(x: RigidTransform | ArrayLike) -> np.ndarray:
    return x.rotation if isinstance(x, RigidTransform) else np.asarray(x, dtype=np.float64)


def _translation(x: RigidTransform | ArrayLike) -> np.ndarray:
    return x.translation if isinstance(x, RigidTransform) else np.asarray(x, dtype=np.float64)


def rre(est: RigidTransform | ArrayLike, gt: RigidTransform | ArrayLike) -> float:
    """Geodesic angle in degrees between two rotations (transforms or 3x3 matrices).

    Same angle as ``arccos((trace(R_est^T R_gt) - 1) / 2)``, evaluated with atan2
    of the sine and cosine parts so it stays accurate near 0 and 180 degrees.
    """
    r_est, r_gt = _rotation(est), _rotation(gt)
    m = r_est.T @ r_gt
    c = (np.trace(m) - 1.0) / 2.0
    s = 0.5 * np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    return float(np.degrees(np.arctan2(s, np.clip(c, -1.0, 1.0))))


def rte(est: RigidTransform | ArrayLike, gt: RigidTransform | ArrayLike) -> float:
    """Euclidean distance between two translations (transforms or 3-vectors)."""
    return float(np.linalg.norm(_translation(est) - _translation(gt)))


def rmse_gt_correspondences(est: RigidTransform, gt_corrs: Correspondences, clouds: tuple[PointCloud, PointCloud]) -> float:
    return pose_rmse(est, gt_corrs, clouds)


def recall_3dmatch(rmse_values: Iterable[float], threshold: float = RMSE_RECALL_THRESHOLD) -> float:
    v = np.asarray(list(rmse_values), dtype=np.float64)
    return float(np.mean(v < threshold)) if v.size else 0.0


def recall_kitti(
    rre_values: Iterable[float],
    rte_values: Iterable[float],
    rre_max: float = KITTI_RRE_MAX,
    rte_max: float = KITTI_RTE_MAX,
) -> float:
    a = np.asarray(list(rre_values), dtype=np.float64)
    b = np.asarray(list(rte_values), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("rre and rte lists must have equal length")
    return float(np.mean((a < rre_max) & (b < rte_max))) if a.size else 0.0


def _mean_nearest_sq(queries: np.ndarray, reference: np.ndarray) -> float:
    _, dist = SpatialIndex(PointCloud(reference)).knn_batch(queries, 1)
    return float(np.mean(dist[:, 0] ** 2))


def chamfer_modified(
    source: ArrayLike,
    source_raw: ArrayLike,
    target: ArrayLike,
    target_raw: ArrayLike,
    transform: RigidTransform,
) -> float:
    """Bidirectional mean squared nearest-neighbour distance against the raw clouds.

    ``mean_p min_{q in target_raw} |T(p) - q|^2 + mean_q min_{p in source_raw} |q - T(p)|^2``
    """
    p = as_points(source)
    q = as_points(target)
    p_raw = as_points(source_raw)
    q_raw = as_points(target_raw)
    if p_raw.shape[0] == 0 or q_raw.shape[0] == 0:
        raise ValueError("raw clouds must be non-empty")
    return _mean_nearest_sq(transform.apply(p), q_raw) + _mean_nearest_sq(q, transform.apply(p_raw))


@dataclass(frozen=True)
class PairEvaluation:
    rre_degrees: float
    rte_units: float
    rmse_units: float
    registered_3dmatch: bool
    registered_kitti: bool
    chamfer: float | None = None

    def as_row(self) -> dict:
        return asdict(self)


def evaluate_pair(
    est: RigidTransform,
    gt: RigidTransform,
    gt_corrs: Correspondences | None = None,
    clouds: tuple[PointCloud, PointCloud] | None = None,
    protocol: Protocol = "threedmatch",
    raw_clouds: tuple[PointCloud, PointCloud] | None = None,
) -> PairEvaluation:
    """All per-pair metrics. RMSE needs ``gt_corrs`` and ``clouds``; otherwise it is NaN.

    Chamfer distance is computed only for the ``modelnet`` protocol and uses
    ``raw_clouds`` (defaulting to ``clouds``).
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}")
    r = rre(est, gt)
    t = rte(est, gt)
    rmse = float("nan")
    if gt_corrs is not None and clouds is not None and len(gt_corrs):
        rmse = rmse_gt_correspondences(est, gt_corrs, clouds)
    cd = None
    if protocol == "modelnet":
        if clouds is None:
            raise ValueError("the modelnet protocol needs clouds for the chamfer distance")
        raw = raw_clouds or clouds
        cd = chamfer_modified(clouds[0].points, raw[0].points, clouds[1].points, raw[1].points, est)
    return PairEvaluation(
        rre_degrees=r,
        rte_units=t,
        rmse_units=rmse,
        registered_3dmatch=bool(rmse < RMSE_RECALL_THRESHOLD),
        registered_kitti=bool(r < KITTI_RRE_MAX and t < KITTI_RTE_MAX),
        chamfer=cd,
    )


@dataclass(frozen=True)
class BenchmarkSummary:
    registration_recall: float
    median_rre: float
    median_rte: float
    mean_rre: float
    mean_rte: float
    mean_rmse: float
    pairs: int

    def as_row(self) -> dict:
        return asdict(self)


def summarize(evals: Sequence[PairEvaluation], protocol: Protocol = "threedmatch") -> BenchmarkSummary:
    """Recall plus medians over registered pairs and plain means over all pairs."""
    if not evals:
        nan = float("nan")
        return BenchmarkSummary(0.0, nan, nan, nan, nan, nan, 0)
    flag = "registered_kitti" if protocol == "kitti" else "registered_3dmatch"
    registered = [e for e in evals if getattr(e, flag)]
    rre_all = np.array([e.rre_degrees for e in evals])
    rte_all = np.array([e.rte_units for e in evals])
    rmse_all = np.array([e.rmse_units for e in evals])

    def median(values):
        return float(np.median(values)) if len(values) else float("nan")

    return BenchmarkSummary(
        registration_recall=len(registered) / len(evals),
        median_rre=median([e.rre_degrees for e in registered]),
        median_rte=median([e.rte_units for e in registered]),
        mean_rre=float(rre_all.mean()),
        mean_rte=float(rte_all.mean()),
        mean_rmse=float(rmse_all.mean()),
        pairs=len(evals),
    )
