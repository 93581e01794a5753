"""Deterministic synthetic 3D world: landmarks along a street, pinhole views,
local features with ground-truth landmark ids, and co-observation pairs.

Conventions: world up is +z. A camera pose stores the camera center C in the
world frame and a unit quaternion (w,x,y,z) for the world-to-camera rotation,
i.e. x_cam = R (X - C). Image axes follow the usual u-right / v-down layout,
so the camera's +z axis is the viewing direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import quats
from .errors import DegenerateWorldError, NoVisibleLandmarksError


@dataclass
class Landmark:
    id: int
    position: np.ndarray  # (3,) meters
    base_descriptor: np.ndarray  # (d,) unit norm


@dataclass
class CameraPose:
    rotation: np.ndarray  # unit quaternion (w,x,y,z), world-to-camera
    position: np.ndarray  # (3,) camera center in world frame

    def __post_init__(self) -> None:
        q = np.asarray(self.rotation, dtype=float)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("rotation quaternion must have unit norm")
        # canonical sign only; renormalizing here would silently move the
        # stored value away from what serialization round-trips
        if q[0] < 0.0 or (q[0] == 0.0 and q[np.nonzero(q)[0][0]] < 0.0):
            q = -q
        self.rotation = q
        self.position = np.asarray(self.position, dtype=float)

    def matrix(self) -> np.ndarray:
        return quats.to_matrix(self.rotation)


@dataclass
class CameraIntrinsics:
    focal: float
    principal_point: np.ndarray  # (2,) pixels
    image_size: tuple[int, int]  # (width, height)

    def __post_init__(self) -> None:
        self.principal_point = np.asarray(self.principal_point, dtype=float)
        w, h = self.image_size
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if not (0 <= self.principal_point[0] < w and 0 <= self.principal_point[1] < h):
            raise ValueError("principal point outside image bounds")


@dataclass
class LocalFeature:
    keypoint: np.ndarray  # (2,) pixels
    descriptor: np.ndarray  # (d,)
    landmark_id: int | None = None  # None for clutter


@dataclass
class ViewImage:
    id: int
    pose: CameraPose
    intrinsics: CameraIntrinsics
    features: list[LocalFeature]
    condition: str = "original"
    _arrays: dict | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.features:
            raise ValueError("view has no features")

    # Views are treated as immutable once built; array forms are cached.
    def _cache(self) -> dict:
        if self._arrays is None:
            self._arrays = {
                "kp": np.array([f.keypoint for f in self.features], dtype=float),
                "desc": np.array([f.descriptor for f in self.features], dtype=float),
                "lid": np.array(
                    [-1 if f.landmark_id is None else f.landmark_id for f in self.features],
                    dtype=int,
                ),
            }
        return self._arrays

    def keypoints(self) -> np.ndarray:
        return self._cache()["kp"]

    def descriptors(self) -> np.ndarray:
        return self._cache()["desc"]

    def landmark_ids(self) -> np.ndarray:
        """Per-feature landmark id, -1 for clutter."""
        return self._cache()["lid"]

    def visible_landmark_set(self) -> frozenset[int]:
        return frozenset(int(i) for i in self.landmark_ids() if i >= 0)


@dataclass
class RenderNoise:
    keypoint_sigma: float = 0.3  # px
    descriptor_sigma: float = 0.05
    clutter_count: int = 5

    def __post_init__(self) -> None:
        if self.clutter_count < 0:
            raise ValueError("clutter_count must be >= 0")


@dataclass
class WorldConfig:
    num_landmarks: int = 500
    descriptor_dim: int = 32
    num_map_views: int = 40
    num_query_views: int = 20
    street_length: float = 100.0
    bend_angle_deg: float = 25.0
    lateral_min: float = 6.0
    lateral_max: float = 14.0
    height_max: float = 8.0
    camera_height: float = 1.6
    focal: float = 400.0
    image_width: int = 640
    image_height: int = 480
    visibility_radius: float = 30.0
    min_visible: int = 8
    heading_jitter_deg: float = 2.0
    query_translation_sigma: float = 0.7
    query_rotation_sigma_deg: float = 2.0
    min_coobs: int = 10
    noise: RenderNoise = field(default_factory=RenderNoise)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(
            focal=self.focal,
            principal_point=np.array([self.image_width / 2.0, self.image_height / 2.0]),
            image_size=(self.image_width, self.image_height),
        )


@dataclass
class World:
    landmarks: list[Landmark]
    map_views: list[ViewImage]
    query_views: list[ViewImage]
    matching_pairs: list[tuple[int, int, int]]  # (view_id, view_id, co-observations), i < j
    seed: int

    def landmark_positions(self) -> np.ndarray:
        return np.array([lm.position for lm in self.landmarks], dtype=float)

    def view_by_id(self) -> dict[int, ViewImage]:
        return {v.id: v for v in list(self.map_views) + list(self.query_views)}


NEAR_PLANE = 0.1


def derive_seed(*parts: int) -> int:
    """Stable child seed for parallel-safe per-view RNG streams."""
    ss = np.random.SeedSequence(list(int(p) for p in parts))
    return int(ss.generate_state(1, np.uint64)[0])


def project_points(points: np.ndarray, pose: CameraPose, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pinhole projection. Returns (uv array, depth array); callers mask by depth."""
    R = pose.matrix()
    cam = (np.atleast_2d(points) - pose.position) @ R.T
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.focal * cam[:, 0] / z + intr.principal_point[0]
        v = intr.focal * cam[:, 1] / z + intr.principal_point[1]
    return np.stack([u, v], axis=1), z


def visible_mask(points: np.ndarray, pose: CameraPose, intr: CameraIntrinsics, max_dist: float) -> np.ndarray:
    uv, z = project_points(points, pose, intr)
    w, h = intr.image_size
    dist = np.linalg.norm(points - pose.position, axis=1)
    ok = (z > NEAR_PLANE) & (dist <= max_dist)
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < w) & (uv[:, 1] >= 0) & (uv[:, 1] < h)
    return ok


def render_view(
    world: World,
    pose: CameraPose,
    intrinsics: CameraIntrinsics,
    noise: RenderNoise,
    seed: int,
    view_id: int = -1,
    max_dist: float | None = None,
) -> ViewImage:
    """Render the landmarks visible from `pose` into a feature set.

    Keypoints are exact pinhole projections plus Gaussian pixel noise;
    descriptors are renormalized noisy copies of the landmark descriptors.
    `clutter_count` extra features carry random unit descriptors and no
    landmark id. Raises NoVisibleLandmarksError when the frustum is empty.
    """
    rng = np.random.default_rng(seed)
    points = world.landmark_positions()
    radius = max_dist if max_dist is not None else np.inf
    mask = visible_mask(points, pose, intrinsics, radius)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        raise NoVisibleLandmarksError("no visible landmarks")

    uv, _ = project_points(points[idx], pose, intrinsics)
    d = world.landmarks[0].base_descriptor.shape[0]
    features: list[LocalFeature] = []
    for row, lm_i in enumerate(idx):
        kp = uv[row] + noise.keypoint_sigma * rng.standard_normal(2)
        desc = world.landmarks[lm_i].base_descriptor + noise.descriptor_sigma * rng.standard_normal(d)
        desc = desc / np.linalg.norm(desc)
        features.append(LocalFeature(keypoint=kp, descriptor=desc, landmark_id=int(lm_i)))

    w, h = intrinsics.image_size
    for _ in range(noise.clutter_count):
        kp = rng.uniform(0.0, [w, h])
        desc = rng.standard_normal(d)
        desc = desc / np.linalg.norm(desc)
        features.append(LocalFeature(keypoint=kp, descriptor=desc, landmark_id=None))

    return ViewImage(id=view_id, pose=pose, intrinsics=intrinsics, features=features)


def _street_frame(config: WorldConfig, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Position and left-normal of the two-segment street at arclength s."""
    s = np.atleast_1d(np.asarray(s, dtype=float))
    half = config.street_length / 2.0
    ang = np.radians(config.bend_angle_deg)
    d0 = np.array([1.0, 0.0])
    d1 = np.array([np.cos(ang), np.sin(ang)])
    corner = half * d0
    pos = np.where(
        (s <= half)[:, None],
        s[:, None] * d0,
        corner + (s - half)[:, None] * d1,
    )
    direction = np.where((s <= half)[:, None], d0, d1)
    left = np.stack([-direction[:, 1], direction[:, 0]], axis=1)
    return pos, left


def _pose_at(config: WorldConfig, s: float, heading_offset_rad: float, height: float) -> CameraPose:
    pos2, left = _street_frame(config, np.array([s]))
    look = left[0]
    c, sn = np.cos(heading_offset_rad), np.sin(heading_offset_rad)
    look = np.array([c * look[0] - sn * look[1], sn * look[0] + c * look[1]])
    fx, fy = look
    # rows of R: camera right, camera down, camera forward (world coords)
    R = np.array([[fy, -fx, 0.0], [0.0, 0.0, -1.0], [fx, fy, 0.0]])
    center = np.array([pos2[0, 0], pos2[0, 1], height])
    return CameraPose(rotation=quats.from_matrix(R), position=center)


def generate_world(config: WorldConfig, seed: int) -> World:
    """Deterministically generate landmarks, map views, query views and pairs.

    Raises DegenerateWorldError for configs that cannot support pose
    estimation (too few landmarks, views seeing fewer than 4 of them, ...).
    """
    if config.num_landmarks < 10:
        raise DegenerateWorldError("degenerate world: num_landmarks < 10")
    if config.descriptor_dim < 4:
        raise DegenerateWorldError("degenerate world: descriptor_dim < 4")
    if config.num_map_views < 2:
        raise DegenerateWorldError("degenerate world: trajectory needs >= 2 views")
    if config.visibility_radius <= 0:
        raise DegenerateWorldError("degenerate world: visibility radius must be > 0")

    rng = np.random.default_rng(derive_seed(seed, 0))
    margin = 0.05 * config.street_length
    s_lm = rng.uniform(-margin, config.street_length + margin, config.num_landmarks)
    pos2, left = _street_frame(config, np.clip(s_lm, 0.0, config.street_length))
    lateral = rng.uniform(config.lateral_min, config.lateral_max, config.num_landmarks)
    along = s_lm - np.clip(s_lm, 0.0, config.street_length)  # overhang past the ends
    tangent = np.stack([left[:, 1], -left[:, 0]], axis=1)  # street direction
    xy = pos2 + lateral[:, None] * left + along[:, None] * tangent
    z = rng.uniform(0.0, config.height_max, config.num_landmarks)

    landmarks = []
    for i in range(config.num_landmarks):
        desc = rng.standard_normal(config.descriptor_dim)
        desc = desc / np.linalg.norm(desc)
        landmarks.append(
            Landmark(id=i, position=np.array([xy[i, 0], xy[i, 1], z[i]]), base_descriptor=desc)
        )

    world = World(landmarks=landmarks, map_views=[], query_views=[], matching_pairs=[], seed=seed)
    intr = config.intrinsics()

    heading_rng = np.random.default_rng(derive_seed(seed, 1))
    for i in range(config.num_map_views):
        s = (i + 0.5) * config.street_length / config.num_map_views
        jitter = np.radians(config.heading_jitter_deg) * heading_rng.standard_normal()
        pose = _pose_at(config, s, jitter, config.camera_height)
        view = render_view(
            world,
            pose,
            intr,
            config.noise,
            derive_seed(seed, 2, i),
            view_id=i,
            max_dist=config.visibility_radius,
        )
        n_lm = int(np.sum(view.landmark_ids() >= 0))
        if n_lm < max(4, config.min_visible):
            raise DegenerateWorldError(
                f"degenerate world: map view {i} sees only {n_lm} landmarks"
            )
        world.map_views.append(view)

    query_rng = np.random.default_rng(derive_seed(seed, 3))
    next_id = config.num_map_views
    for i in range(config.num_query_views):
        view = None
        for _ in range(100):  # bounded redraw; deterministic given the rng stream
            s = query_rng.uniform(0.0, config.street_length)
            jitter = np.radians(config.query_rotation_sigma_deg) * query_rng.standard_normal()
            pose = _pose_at(config, s, jitter, config.camera_height)
            offset = config.query_translation_sigma * query_rng.standard_normal(2)
            pose = CameraPose(rotation=pose.rotation, position=pose.position + np.array([offset[0], offset[1], 0.0]))
            try:
                candidate = render_view(
                    world,
                    pose,
                    intr,
                    config.noise,
                    derive_seed(seed, 4, i),
                    view_id=next_id,
                    max_dist=config.visibility_radius,
                )
            except NoVisibleLandmarksError:
                continue
            if int(np.sum(candidate.landmark_ids() >= 0)) >= 4:
                view = candidate
                break
        if view is None:
            raise DegenerateWorldError(f"degenerate world: query view {i} sees < 4 landmarks")
        world.query_views.append(view)
        next_id += 1

    world.matching_pairs = make_matching_pairs(world, config.min_coobs)
    return world


def make_matching_pairs(world: World, min_coobs: int) -> list[tuple[int, int, int]]:
    """All map-view pairs (i < j) sharing at least `min_coobs` landmark ids."""
    if min_coobs < 1:
        raise ValueError("min_coobs must be >= 1")
    sets = [(v.id, v.visible_landmark_set()) for v in world.map_views]
    pairs = []
    for a in range(len(sets)):
        for b in range(a + 1, len(sets)):
            count = len(sets[a][1] & sets[b][1])
            if count >= min_coobs:
                pairs.append((sets[a][0], sets[b][0], count))
    return pairs


def relabel_view(view: ViewImage, view_id: int) -> ViewImage:
    return replace(view, id=view_id, _arrays=None)
