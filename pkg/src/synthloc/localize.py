"""Pose protocols over ranked retrieval lists: equal-weighted barycenter
approximation, PnP+RANSAC against the map's 3D points, and the localization
accuracy metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quats
from .embed import EmbeddingModel
from .errors import (
    EmptyRankingError,
    InsufficientCorrespondencesError,
    NoConsensusError,
)
from .geometry import MatchParams, match_features
from .index import RankedList
from .worldgen import CameraIntrinsics, CameraPose, Landmark, ViewImage

NEAR_PLANE = 0.1


@dataclass
class PoseError:
    translation: float  # meters
    rotation: float  # degrees


@dataclass
class AccuracyThresholds:
    # (name, max translation m, max rotation deg), strict to loose
    levels: list[tuple[str, float, float]] = field(
        default_factory=lambda: [("high", 0.25, 2.0), ("mid", 0.5, 5.0), ("low", 5.0, 10.0)]
    )

    def __post_init__(self) -> None:
        for (na, ta, ra), (nb, tb, rb) in zip(self.levels, self.levels[1:]):
            if not (ta < tb and ra < rb):
                raise ValueError("thresholds must be strictly increasing")


PLACE_RECOGNITION_RADIUS_M = 25.0


@dataclass
class RansacParams:
    iterations: int = 1000  # upper bound; adaptive termination below
    inlier_px: float = 3.0
    min_inliers: int = 8
    seed: int = 0
    confidence: float = 0.99


def ewb_pose(ranked: RankedList, poses: dict[int, CameraPose], k: int) -> CameraPose:
    """Equal-weighted barycenter of the top-k poses: arithmetic mean of the
    camera centers and a sign-aligned chordal mean of the rotations. k=1 is
    exactly the top-1 pose."""
    if not ranked:
        raise EmptyRankingError("empty ranking")
    top = [poses[vid] for vid, _ in ranked[:k]]
    if len(top) == 1:
        return top[0]
    if all(
        np.array_equal(p.position, top[0].position) and np.array_equal(p.rotation, top[0].rotation)
        for p in top[1:]
    ):
        return top[0]
    position = np.mean([p.position for p in top], axis=0)
    rotation = quats.chordal_mean([p.rotation for p in top])
    return CameraPose(rotation=rotation, position=position)


def _dlt_rt(points3d: np.ndarray, norm_xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Direct linear transform for [R|t] from >= 6 points in normalized image
    coordinates, followed by projection to the nearest rotation. Returns the
    world-to-camera rotation matrix and the camera center."""
    n = points3d.shape[0]
    centroid = points3d.mean(axis=0)
    spread = float(np.mean(np.linalg.norm(points3d - centroid, axis=1)))
    scale = np.sqrt(3.0) / spread if spread > 0 else 1.0
    Xh = np.hstack([(points3d - centroid) * scale, np.ones((n, 1))])

    A = np.zeros((2 * n, 12))
    A[0::2, 0:4] = Xh
    A[0::2, 8:12] = -norm_xy[:, 0:1] * Xh
    A[1::2, 4:8] = Xh
    A[1::2, 8:12] = -norm_xy[:, 1:2] * Xh
    _, _, vt = np.linalg.svd(A, full_matrices=False)
    P = vt[-1].reshape(3, 4)

    # undo the 3D normalization: X' = scale * (X - centroid)
    T = np.eye(4)
    T[:3, :3] *= scale
    T[:3, 3] = -scale * centroid
    P = P @ T

    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    U, s, Vt = np.linalg.svd(M)
    R = U @ np.diag([1.0, 1.0, np.linalg.det(U @ Vt)]) @ Vt
    sigma = float(np.mean(s))
    t = P[:, 3] / sigma
    return R, -R.T @ t


def _dlt_pose(points3d: np.ndarray, norm_xy: np.ndarray) -> CameraPose:
    R, center = _dlt_rt(points3d, norm_xy)
    return CameraPose(rotation=quats.from_matrix(R), position=center)


def _residuals_rc(
    R: np.ndarray, center: np.ndarray, points3d: np.ndarray, pixels: np.ndarray, intr: CameraIntrinsics
) -> np.ndarray:
    cam = (points3d - center) @ R.T
    z = cam[:, 2]
    res = np.full(points3d.shape[0], np.inf)
    front = z > NEAR_PLANE
    if np.any(front):
        u = intr.focal * cam[front, 0] / z[front] + intr.principal_point[0]
        v = intr.focal * cam[front, 1] / z[front] + intr.principal_point[1]
        res[front] = np.hypot(u - pixels[front, 0], v - pixels[front, 1])
    return res


def _reprojection_residuals(
    pose: CameraPose, points3d: np.ndarray, pixels: np.ndarray, intr: CameraIntrinsics
) -> np.ndarray:
    return _residuals_rc(pose.matrix(), pose.position, points3d, pixels, intr)


def pnp_ransac(
    corr_2d3d: list[tuple[np.ndarray, np.ndarray]],
    intrinsics: CameraIntrinsics,
    params: RansacParams,
) -> tuple[CameraPose, list[int]]:
    """RANSAC over 6-point DLT pose hypotheses with a full-inlier DLT refit.

    Returns the refit pose and the inlier indices under it. Raises
    InsufficientCorrespondencesError below 6 points and NoConsensusError when
    no hypothesis reaches min_inliers. Deterministic per seed; iterations are
    an upper bound, with standard adaptive early termination.
    """
    n = len(corr_2d3d)
    if n < 6:
        raise InsufficientCorrespondencesError("insufficient correspondences")
    pixels = np.array([c[0] for c in corr_2d3d], dtype=float)
    points = np.array([c[1] for c in corr_2d3d], dtype=float)
    norm_xy = (pixels - intrinsics.principal_point) / intrinsics.focal

    rng = np.random.default_rng(params.seed)
    best_count = 0
    best_mask: np.ndarray | None = None
    needed = params.iterations
    it = 0
    while it < min(needed, params.iterations):
        it += 1
        sample = rng.choice(n, size=6, replace=False)
        try:
            R, center = _dlt_rt(points[sample], norm_xy[sample])
        except np.linalg.LinAlgError:
            continue
        res = _residuals_rc(R, center, points, pixels, intrinsics)
        mask = res <= params.inlier_px
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
            w = count / n
            if w >= 1.0:
                break
            denom = np.log(max(1.0 - w**6, 1e-12))
            needed = min(
                params.iterations, int(np.ceil(np.log(max(1.0 - params.confidence, 1e-12)) / denom))
            )
    if best_mask is None or best_count < max(params.min_inliers, 6):
        raise NoConsensusError("no consensus")

    idx = np.nonzero(best_mask)[0]
    pose = _dlt_pose(points[idx], norm_xy[idx])
    res = _reprojection_residuals(pose, points, pixels, intrinsics)
    final = np.nonzero(res <= params.inlier_px)[0]
    if final.size < max(params.min_inliers, 6):
        raise NoConsensusError("no consensus")
    return pose, [int(i) for i in final]


def sfm_localize(
    query: ViewImage,
    ranked: RankedList,
    map_views: dict[int, ViewImage],
    landmarks: list[Landmark],
    model: EmbeddingModel,
    k: int,
    match_params: MatchParams,
    ransac_params: RansacParams,
) -> CameraPose:
    """Match the query against the top-k map views, lift matched map features
    to their landmarks' 3D positions (deduplicated per landmark by descriptor
    distance), and solve PnP+RANSAC."""
    corr: dict[int, tuple[float, np.ndarray, np.ndarray]] = {}
    dq = query.descriptors()
    kq = query.keypoints()
    positions = {lm.id: lm.position for lm in landmarks}
    for vid, _score in ranked[:k]:
        view = map_views[vid]
        pairs = match_features(query, view, match_params).pairs
        dv = view.descriptors()
        lids = view.landmark_ids()
        for (iq, iv) in pairs:
            lid = int(lids[iv])
            if lid < 0:
                continue
            dist = float(np.linalg.norm(dq[iq] - dv[iv]))
            if lid not in corr or dist < corr[lid][0]:
                corr[lid] = (dist, kq[iq], positions[lid])
    corr_2d3d = [(corr[lid][1], corr[lid][2]) for lid in sorted(corr)]
    pose, _ = pnp_ransac(corr_2d3d, query.intrinsics, ransac_params)
    return pose


def pose_error(est: CameraPose, gt: CameraPose) -> PoseError:
    translation = float(np.linalg.norm(est.position - gt.position))
    rotation = quats.rotation_angle_deg(est.matrix() @ gt.matrix().T)
    return PoseError(translation=translation, rotation=rotation)


def localization_rate(
    errors: list[PoseError | None], thresholds: AccuracyThresholds
) -> dict[str, float]:
    """Percentage localized per accuracy level; None entries (queries the
    protocol failed on) count as failures at every level."""
    n = len(errors)
    out = {}
    for name, max_t, max_r in thresholds.levels:
        if n == 0:
            out[name] = 0.0
            continue
        ok = sum(
            1 for e in errors if e is not None and e.translation <= max_t and e.rotation <= max_r
        )
        out[name] = 100.0 * ok / n
    return out


def recall_at_k(
    rankings: dict[int, RankedList],
    positions: dict[int, np.ndarray],
    radius: float = PLACE_RECOGNITION_RADIUS_M,
    ks: list[int] = (1, 5, 10),
) -> dict[int, float]:
    """R@k: fraction of queries with at least one of the top-k retrieved views
    within `radius` meters of the query's ground-truth position."""
    out = {}
    for k in ks:
        hits = 0
        for qid, ranked in rankings.items():
            qpos = positions[qid]
            for vid, _ in ranked[:k]:
                if float(np.linalg.norm(positions[vid] - qpos)) <= radius:
                    hits += 1
                    break
        out[k] = hits / len(rankings) if rankings else 0.0
    return out
