"""Robust pose selection.

``qreg_register`` scores every single-correspondence pose candidate against
all correspondences (exhaustive, deterministic) and refines the winner with a
normal-gated local optimisation. ``ransac_register`` is the classic 3-point
hypothesise-and-verify baseline. Model quality is the inlier count, i.e. a 0/1
truncated loss on the residual.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from qreg.core import (
    Correspondences,
    PointCloud,
    Points,
    RigidTransform,
    kabsch_weighted,
    rotations_from_covariance,
)
from qreg.errors import DegenerateInput, NoEligibleCorrespondences, PatchFailure
from qreg.quadric import DEFAULT_NEIGHBORS, QuadricPatch, build_patches
from qreg.solver import EnrichedCorrespondence, filter_solver_eligible, solve_batch
from qreg.spatial import SpatialIndex

Clouds = tuple[PointCloud, PointCloud]

# Hypotheses scored per vectorised block; fixed so results never depend on it.
_CHUNK = 512


@dataclass(frozen=True)
class EstimatorConfig:
    inlier_threshold: float = 0.1
    lo_iterations: int = 10
    lo_sample_fraction: float = 0.5
    lo_normal_angle_max: float = 30.0  # degrees; set to 180 to disable the normal gate
    scale_bounds: tuple[float, float] = (0.9, 1.1)
    axis_ratio_tol: float = 0.1
    rng_seed: int = 0
    gamma: float = 0.2
    neighbors: int = DEFAULT_NEIGHBORS

    def __post_init__(self) -> None:
        object.__setattr__(self, "scale_bounds", tuple(float(b) for b in self.scale_bounds))
        if self.inlier_threshold <= 0 or self.gamma <= 0 or self.lo_normal_angle_max <= 0:
            raise ValueError("thresholds must be positive")
        if not 0 < self.lo_sample_fraction <= 1:
            raise ValueError("lo_sample_fraction must lie in (0, 1]")
        if self.axis_ratio_tol <= 0:
            raise ValueError("axis_ratio_tol must be positive")
        if self.lo_iterations < 0:
            raise ValueError("lo_iterations must be non-negative")
        if self.neighbors < 1:
            raise ValueError("neighbors must be positive")
        lo, hi = self.scale_bounds
        if not 0 < lo <= hi:
            raise ValueError("scale_bounds must satisfy 0 < low <= high")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_bounds"] = list(self.scale_bounds)
        return d


@dataclass(eq=False)
class RegistrationReport:
    best_transform: RigidTransform
    inlier_indices: NDArray[np.int64]
    candidates_evaluated: int
    stage_timings: dict[str, float]
    method: str
    config: EstimatorConfig
    pre_lo_transform: RigidTransform | None = None
    per_candidate_scores: list[tuple[int, int, int]] | None = None  # (source, sign_variant, count)
    extra: dict = field(default_factory=dict)

    @property
    def inlier_count(self) -> int:
        return int(self.inlier_indices.shape[0])


@dataclass(frozen=True, eq=False)
class PatchSet:
    """Quadric patches for both endpoints of every correspondence.

    ``enriched`` holds every correspondence whose two patches were fitted
    (eligible or not). Normals are NaN where a fit failed.
    """

    enriched: list[EnrichedCorrespondence]
    source_normals: Points
    target_normals: Points
    failures: int

    @property
    def eligible(self) -> list[EnrichedCorrespondence]:
        return filter_solver_eligible(self.enriched)


def compute_patches(
    corrs: Correspondences,
    clouds: Clouds,
    k: int = DEFAULT_NEIGHBORS,
    indices: tuple[SpatialIndex, SpatialIndex] | None = None,
) -> PatchSet:
    """Fit quadrics around every distinct correspondence endpoint."""
    source_cloud, target_cloud = clouds
    corrs.check_bounds(source_cloud, target_cloud)
    if indices is None:
        indices = (SpatialIndex(source_cloud), SpatialIndex(target_cloud))

    def fit(cloud, index, wanted):
        uniq = np.unique(wanted)
        return dict(zip(uniq.tolist(), build_patches(cloud, index, uniq, k)))

    src_patches = fit(source_cloud, indices[0], corrs.source)
    dst_patches = fit(target_cloud, indices[1], corrs.target)

    n = len(corrs)
    src_normals = np.full((n, 3), np.nan)
    dst_normals = np.full((n, 3), np.nan)
    enriched = []
    failures = 0
    for i in range(n):
        pp = src_patches[int(corrs.source[i])]
        pq = dst_patches[int(corrs.target[i])]
        if isinstance(pp, QuadricPatch):
            src_normals[i] = pp.normal
        if isinstance(pq, QuadricPatch):
            dst_normals[i] = pq.normal
        if isinstance(pp, PatchFailure) or isinstance(pq, PatchFailure):
            failures += 1
            continue
        enriched.append(EnrichedCorrespondence(corrs[i], pp, pq, i))
    return PatchSet(enriched, src_normals, dst_normals, failures)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


def _residual_block(rot: NDArray, trans: NDArray, src: Points, dst: Points) -> NDArray:
    moved = np.einsum("cij,kj->cki", rot, src) + trans[:, None, :]
    return np.sqrt(((moved - dst[None]) ** 2).sum(axis=2))


def _score_stack(rot: NDArray, trans: NDArray, src: Points, dst: Points, threshold: float) -> tuple[NDArray, NDArray]:
    """Inlier counts and mean inlier residuals for a stack of hypotheses."""
    counts = np.empty(rot.shape[0], dtype=np.int64)
    mean_res = np.empty(rot.shape[0])
    for start in range(0, rot.shape[0], _CHUNK):
        sl = slice(start, start + _CHUNK)
        res = _residual_block(rot[sl], trans[sl], src, dst)
        mask = res <= threshold
        c = mask.sum(axis=1)
        counts[sl] = c
        total = np.where(mask, res, 0.0).sum(axis=1)
        mean_res[sl] = np.where(c > 0, total / np.maximum(c, 1), np.inf)
    return counts, mean_res


def count_inliers(
    transform: RigidTransform,
    corrs: Correspondences,
    clouds: Clouds,
    threshold: float,
) -> tuple[int, NDArray[np.int64]]:
    """Number and ascending indices of correspondences with ``|T(p) - q| <= threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    src, dst = corrs.endpoints(*clouds)
    res = np.sqrt(((transform.apply(src) - dst) ** 2).sum(axis=1))
    idx = np.flatnonzero(res <= threshold)
    return int(idx.shape[0]), idx


def pose_rmse(transform: RigidTransform, corrs: Correspondences, clouds: Clouds) -> float:
    """Root-mean-square residual of all correspondences under ``transform``."""
    if len(corrs) == 0:
        raise ValueError("pose_rmse needs at least one correspondence")
    src, dst = corrs.endpoints(*clouds)
    return _rmse(transform, src, dst)


def _rmse(transform: RigidTransform, src: Points, dst: Points) -> float:
    return float(np.sqrt(((transform.apply(src) - dst) ** 2).sum(axis=1).mean()))


def _pick_best(counts, mean_res, sources, variants) -> int:
    # Highest count, then lowest mean inlier residual, then lowest source index,
    # then lowest sign variant: a total order, so the winner is unique.
    order = np.lexsort((variants, sources, mean_res, -counts))
    return int(order[0])


# ---------------------------------------------------------------------------
# Q-REG
# ---------------------------------------------------------------------------


def qreg_register(
    corrs: Correspondences,
    clouds: Clouds,
    patches: PatchSet | None = None,
    cfg: EstimatorConfig | None = None,
    refine: bool = True,
    keep_scores: bool = False,
) -> RegistrationReport:
    """Exhaustive single-correspondence search followed by local optimisation.

    Every pose candidate from every solver-eligible correspondence is scored by
    its inlier count. Raises :class:`NoEligibleCorrespondences` when no
    correspondence has two Distinct patches (or all fail the scale gate).
    """
    cfg = cfg or EstimatorConfig()
    timings: dict[str, float] = {}
    t_start = time.perf_counter()
    if patches is None:
        patches = compute_patches(corrs, clouds, cfg.neighbors)
        timings["patch_fit"] = time.perf_counter() - t_start

    t0 = time.perf_counter()
    eligible = patches.eligible
    if not eligible:
        raise NoEligibleCorrespondences("no correspondence has two Distinct quadric patches")
    candidates = solve_batch(eligible, cfg.scale_bounds, cfg.axis_ratio_tol)
    if len(candidates) == 0:
        raise NoEligibleCorrespondences("every eligible correspondence failed the scale gate")
    timings["solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    src, dst = corrs.endpoints(*clouds)
    counts, mean_res = _score_stack(candidates.rotations, candidates.translations, src, dst, cfg.inlier_threshold)
    sources, variants = candidates.sources, candidates.variants
    best = _pick_best(counts, mean_res, sources, variants)
    pre_lo = candidates.candidate(best).transform
    timings["scoring"] = time.perf_counter() - t0

    final = pre_lo
    if refine:
        t0 = time.perf_counter()
        final = local_optimize(pre_lo, corrs, clouds, patches, cfg)
        timings["local_optimization"] = time.perf_counter() - t0

    _, inliers = count_inliers(final, corrs, clouds, cfg.inlier_threshold)
    timings["total"] = time.perf_counter() - t_start
    scores = None
    if keep_scores:
        scores = [(int(s), int(v), int(c)) for s, v, c in zip(sources, variants, counts)]
    return RegistrationReport(
        best_transform=final,
        inlier_indices=inliers,
        candidates_evaluated=len(candidates),
        stage_timings=timings,
        method="qreg" if refine else "qreg_no_lo",
        config=cfg,
        pre_lo_transform=pre_lo,
        per_candidate_scores=scores,
        extra={
            "eligible_correspondences": len(eligible),
            "patch_failures": patches.failures,
            "best_source": int(sources[best]),
            "best_sign_variant": int(variants[best]),
            "pre_lo_inliers": int(counts[best]),
        },
    )


def local_optimize(
    initial: RigidTransform,
    corrs: Correspondences,
    clouds: Clouds,
    patches: PatchSet | None,
    cfg: EstimatorConfig | None = None,
) -> RigidTransform:
    """Inlier re-sampling and re-fitting with a quadric-normal consistency gate.

    Each round takes the inliers of the current pose, drops those whose rotated
    source normal disagrees with the target normal by more than
    ``lo_normal_angle_max``, re-fits a score-weighted Kabsch on a seeded random
    subset and keeps the result if the inlier count does not drop. Without
    ``patches`` the normal gate is skipped. Stops early (returning the best pose
    so far) once fewer than three correspondences survive a round.
    """
    cfg = cfg or EstimatorConfig()
    src, dst = corrs.endpoints(*clouds)
    weights = corrs.score
    rng = np.random.default_rng(cfg.rng_seed)
    cos_max = math.cos(math.radians(min(cfg.lo_normal_angle_max, 180.0)))
    gate = patches is not None and cfg.lo_normal_angle_max < 180.0

    def inliers_of(t: RigidTransform) -> NDArray[np.int64]:
        res = np.sqrt(((t.apply(src) - dst) ** 2).sum(axis=1))
        return np.flatnonzero(res <= cfg.inlier_threshold)

    current = initial
    current_inliers = inliers_of(current)
    for _ in range(cfg.lo_iterations):
        survivors = current_inliers
        if gate:
            n_src = patches.source_normals[survivors] @ current.rotation.T
            n_dst = patches.target_normals[survivors]
            cos = np.einsum("ij,ij->i", n_src, n_dst)
            # NaN normals (failed fits) compare False and are dropped.
            survivors = survivors[cos >= cos_max]
        if survivors.shape[0] < 3:
            break
        m = max(3, math.ceil(cfg.lo_sample_fraction * survivors.shape[0]))
        sample = np.sort(rng.choice(survivors, size=min(m, survivors.shape[0]), replace=False))
        if not np.any(weights[sample] > 0):
            continue
        try:
            candidate = kabsch_weighted(src[sample], dst[sample], weights[sample])
        except DegenerateInput:
            continue
        cand_inliers = inliers_of(candidate)
        if cand_inliers.shape[0] >= current_inliers.shape[0]:
            current, current_inliers = candidate, cand_inliers
    return current


# ---------------------------------------------------------------------------
# RANSAC baseline
# ---------------------------------------------------------------------------


def _nondegenerate(tri: NDArray) -> NDArray[np.bool_]:
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    area = np.linalg.norm(np.cross(e1, e2), axis=1)
    return area > 1e-9 * np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1)


def _triplet_poses(ps: NDArray, qs: NDArray) -> tuple[NDArray, NDArray]:
    cp = ps.mean(axis=1)
    cq = qs.mean(axis=1)
    h = np.einsum("nki,nkj->nij", ps - cp[:, None], qs - cq[:, None])
    rot = rotations_from_covariance(h)
    return rot, cq - np.einsum("nij,nj->ni", rot, cp)


def ransac_register(
    corrs: Correspondences,
    clouds: Clouds,
    iterations: int,
    cfg: EstimatorConfig | None = None,
    refine: bool = False,
    patches: PatchSet | None = None,
) -> RegistrationReport:
    """3-point RANSAC with Kabsch hypotheses and inlier-count scoring.

    Minimal samples are drawn uniformly with ``cfg.rng_seed``; degenerate
    (collinear) samples are skipped and re-drawn, up to ``10 * iterations``
    draws. When there are no more distinct triplets than ``iterations`` they are
    enumerated exhaustively instead. ``refine`` applies :func:`local_optimize`.
    """
    cfg = cfg or EstimatorConfig()
    n = len(corrs)
    if n < 3:
        raise ValueError("RANSAC needs at least 3 correspondences")
    if iterations < 1:
        raise ValueError("iterations must be positive")
    timings: dict[str, float] = {}
    t_start = time.perf_counter()
    src, dst = corrs.endpoints(*clouds)

    best = (-1, np.inf)
    best_rt: tuple[NDArray, NDArray] | None = None
    evaluated = 0

    def consider(triplets: NDArray) -> None:
        nonlocal best, best_rt, evaluated
        ps, qs = src[triplets], dst[triplets]
        ok = _nondegenerate(ps) & _nondegenerate(qs)
        ps, qs = ps[ok], qs[ok]
        if ps.shape[0] == 0:
            return
        rot, trans = _triplet_poses(ps, qs)
        counts, mean_res = _score_stack(rot, trans, src, dst, cfg.inlier_threshold)
        # Earliest hypothesis wins ties, as in a sequential loop.
        order = np.lexsort((np.arange(counts.shape[0]), mean_res, -counts))
        j = order[0]
        if (counts[j], -mean_res[j]) > (best[0], -best[1]):
            best = (int(counts[j]), float(mean_res[j]))
            best_rt = (rot[j], trans[j])
        evaluated += ps.shape[0]

    if math.comb(n, 3) <= iterations:
        consider(np.array(list(combinations(range(n), 3)), dtype=np.int64))
    else:
        rng = np.random.default_rng(cfg.rng_seed)
        draws = 0
        while evaluated < iterations and draws < 10 * iterations:
            want = min(_CHUNK, iterations - evaluated, 10 * iterations - draws)
            trip = rng.integers(0, n, size=(want, 3))
            draws += want
            distinct = (trip[:, 0] != trip[:, 1]) & (trip[:, 0] != trip[:, 2]) & (trip[:, 1] != trip[:, 2])
            consider(trip[distinct])
    timings["sampling_scoring"] = time.perf_counter() - t_start

    if best_rt is None:
        raise DegenerateInput("every RANSAC sample was degenerate")
    pre_lo = RigidTransform(*best_rt)
    final = pre_lo
    if refine:
        t0 = time.perf_counter()
        final = local_optimize(pre_lo, corrs, clouds, patches, cfg)
        timings["local_optimization"] = time.perf_counter() - t0
    _, inliers = count_inliers(final, corrs, clouds, cfg.inlier_threshold)
    timings["total"] = time.perf_counter() - t_start
    return RegistrationReport(
        best_transform=final,
        inlier_indices=inliers,
        candidates_evaluated=evaluated,
        stage_timings=timings,
        method=f"ransac{'+lo' if refine else ''}({iterations})",
        config=cfg,
        pre_lo_transform=pre_lo,
        extra={"iterations": iterations, "pre_lo_inliers": best[0]},
    )


def kabsch_register(corrs: Correspondences, clouds: Clouds, cfg: EstimatorConfig | None = None) -> RegistrationReport:
    """Score-weighted Kabsch over all correspondences (no outlier rejection)."""
    cfg = cfg or EstimatorConfig()
    t0 = time.perf_counter()
    src, dst = corrs.endpoints(*clouds)
    transform = kabsch_weighted(src, dst, corrs.score)
    _, inliers = count_inliers(transform, corrs, clouds, cfg.inlier_threshold)
    return RegistrationReport(
        best_transform=transform,
        inlier_indices=inliers,
        candidates_evaluated=1,
        stage_timings={"total": time.perf_counter() - t0},
        method="kabsch_weighted",
        config=cfg,
    )


# ---------------------------------------------------------------------------
# Pose loss
# ---------------------------------------------------------------------------


def loss_term(error: float, gamma: float, score: float) -> float:
    """One summand ``1 - min(error, gamma) / gamma - score``."""
    return 1.0 - min(error, gamma) / gamma - score


def pose_loss_terms(
    enriched: Sequence[EnrichedCorrespondence],
    corrs: Correspondences,
    clouds: Clouds,
    gamma: float,
    threshold: float = 0.1,
    scale_bounds: tuple[float, float] = (0.9, 1.1),
    axis_ratio_tol: float = 0.1,
) -> tuple[NDArray[np.float64], int]:
    """Per-correspondence loss terms and the number of skipped correspondences.

    Each term uses the candidate with the most inliers over ``corrs`` (lowest
    sign variant on ties) and its RMSE over all of ``corrs``. Ineligible
    correspondences and those rejected by the scale gate contribute 0.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    src, dst = corrs.endpoints(*clouds)
    terms = np.zeros(len(enriched))
    skipped = 0
    for i, ec in enumerate(enriched):
        if not ec.eligible:
            skipped += 1
            continue
        cands = solve_batch([ec], scale_bounds, axis_ratio_tol)
        if len(cands) == 0:
            skipped += 1
            continue
        counts, _ = _score_stack(cands.rotations, cands.translations, src, dst, threshold)
        chosen = cands.candidate(int(np.argmax(counts)))
        terms[i] = loss_term(_rmse(chosen.transform, src, dst), gamma, ec.correspondence.score)
    return terms, skipped


def pose_loss(
    enriched: Sequence[EnrichedCorrespondence],
    corrs: Correspondences,
    clouds: Clouds,
    gamma: float,
    threshold: float = 0.1,
    scale_bounds: tuple[float, float] = (0.9, 1.1),
    axis_ratio_tol: float = 0.1,
) -> float:
    terms, _ = pose_loss_terms(enriched, corrs, clouds, gamma, threshold, scale_bounds, axis_ratio_tol)
    return float(terms.sum())
