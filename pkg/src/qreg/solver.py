"""Rigid pose from a single correspondence of two quadric patches.

Both local frames store their axes longest-first, so matching axes by length
is the identity permutation. Eigenvectors carry an arbitrary sign each; with
both frames right-handed only the four sign patterns with determinant +1 give
proper rotations, and all four are emitted for the estimator to score.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from qreg.core import Correspondence, RigidTransform
from qreg.errors import NotDistinct
from qreg.quadric import QuadricPatch

SIGN_PATTERNS = np.array(
    [
        [1.0, 1.0, 1.0],
        [1.0, -1.0, -1.0],
        [-1.0, 1.0, -1.0],
        [-1.0, -1.0, 1.0],
    ]
)
DEFAULT_SCALE_BOUNDS = (0.9, 1.1)
AXIS_RATIO_TOL = 0.10


@dataclass(frozen=True, eq=False)
class EnrichedCorrespondence:
    correspondence: Correspondence
    patch_p: QuadricPatch
    patch_q: QuadricPatch
    index: int = -1  # position in the caller's correspondence list

    @property
    def eligible(self) -> bool:
        return self.patch_p.is_distinct and self.patch_q.is_distinct


@dataclass(frozen=True, eq=False)
class PoseCandidate:
    transform: RigidTransform
    scale_estimate: float
    source: int
    sign_variant: int


def scale_check(
    patch_p: QuadricPatch,
    patch_q: QuadricPatch,
    scale_bounds: tuple[float, float] = DEFAULT_SCALE_BOUNDS,
    axis_ratio_tol: float = AXIS_RATIO_TOL,
) -> tuple[float, bool]:
    """Uniform scale implied by a patch pair and whether it passes both gates."""
    ratios = patch_q.frame.axis_lengths / patch_p.frame.axis_lengths
    scale = float(np.exp(np.log(ratios).mean()))
    lo, hi = scale_bounds
    consistent = bool(np.all(np.abs(ratios / scale - 1.0) <= axis_ratio_tol))
    return scale, lo <= scale <= hi and consistent


@dataclass(frozen=True, eq=False)
class CandidateArrays:
    """Stacked candidates from many correspondences, for vectorised scoring."""

    rotations: NDArray[np.float64]  # (M, 3, 3)
    translations: NDArray[np.float64]  # (M, 3)
    scales: NDArray[np.float64]  # (M,)
    sources: NDArray[np.int64]  # (M,)
    variants: NDArray[np.int64]  # (M,)

    def __len__(self) -> int:
        return self.sources.shape[0]

    def candidate(self, i: int) -> PoseCandidate:
        return PoseCandidate(
            RigidTransform(self.rotations[i], self.translations[i]),
            float(self.scales[i]),
            int(self.sources[i]),
            int(self.variants[i]),
        )


def _empty_candidates() -> CandidateArrays:
    return CandidateArrays(
        np.empty((0, 3, 3)), np.empty((0, 3)), np.empty(0), np.empty(0, np.int64), np.empty(0, np.int64)
    )


def solve_batch(
    ecs: Sequence[EnrichedCorrespondence],
    scale_bounds: tuple[float, float] = DEFAULT_SCALE_BOUNDS,
    axis_ratio_tol: float = AXIS_RATIO_TOL,
) -> CandidateArrays:
    """All candidates of :func:`solve_from_correspondence` for many matches at once.

    Candidates are ordered by input position, then sign variant.
    """
    if any(not ec.eligible for ec in ecs):
        raise NotDistinct("both patches must have three distinct axis lengths")
    if not ecs:
        return _empty_candidates()
    lp = np.stack([ec.patch_p.frame.axis_lengths for ec in ecs])
    lq = np.stack([ec.patch_q.frame.axis_lengths for ec in ecs])
    ratios = lq / lp
    scales = np.exp(np.log(ratios).mean(axis=1))
    lo, hi = scale_bounds
    keep = (scales >= lo) & (scales <= hi)
    keep &= np.all(np.abs(ratios / scales[:, None] - 1.0) <= axis_ratio_tol, axis=1)
    kept = np.flatnonzero(keep)
    if kept.size == 0:
        return _empty_candidates()

    vp = np.stack([ecs[i].patch_p.frame.axes for i in kept]).reshape(-1, 3, 3)
    vq = np.stack([ecs[i].patch_q.frame.axes for i in kept]).reshape(-1, 3, 3)
    p = np.stack([ecs[i].patch_p.anchor for i in kept]).reshape(-1, 3)
    q = np.stack([ecs[i].patch_q.anchor for i in kept]).reshape(-1, 3)
    # (m, 4, 3, 3): V_q diag(s) V_p^T for each sign pattern s. Products of
    # right-handed orthonormal frames are already proper rotations.
    rot = np.einsum("mij,sj,mkj->msik", vq, SIGN_PATTERNS, vp)
    trans = q[:, None, :] - np.einsum("msij,mj->msi", rot, p)
    n_var = SIGN_PATTERNS.shape[0]
    sources = np.array([ecs[i].index for i in kept], dtype=np.int64)
    return CandidateArrays(
        rot.reshape(-1, 3, 3),
        trans.reshape(-1, 3),
        np.repeat(scales[kept], n_var),
        np.repeat(sources, n_var),
        np.tile(np.arange(n_var, dtype=np.int64), kept.shape[0]),
    )


def solve_from_correspondence(
    ec: EnrichedCorrespondence,
    scale_bounds: tuple[float, float] = DEFAULT_SCALE_BOUNDS,
    axis_ratio_tol: float = AXIS_RATIO_TOL,
) -> list[PoseCandidate]:
    """Up to four candidate poses from one patch match (none if the scale gate fails).

    The scale estimate is the geometric mean of the per-axis length ratios
    ``l_q / l_p``. The match is dropped when that scale leaves ``scale_bounds``
    or any single ratio deviates from it by more than ``axis_ratio_tol``.
    """
    batch = solve_batch([ec], scale_bounds, axis_ratio_tol)
    return [batch.candidate(i) for i in range(len(batch))]


def filter_solver_eligible(ecs: Iterable[EnrichedCorrespondence]) -> list[EnrichedCorrespondence]:
    return [ec for ec in ecs if ec.eligible]
