"""Synthetic desktop world: scenes, camera trajectories, depth rendering.

Deterministic stand-in for the RGB-D front end: scenes are built from
primitives with closed-form ray intersections and normals (boxes, cylinders,
a ground plane), cameras follow orbit or vertical-arc trajectories, and depth
point clouds come from pinhole ray casting. Ground-truth object centroids are
exactly the primitive poses' translations, so every fusion and relocalisation
test has an exact reference.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyModel, PlacementFailure
from .geometry import RigidTransform, rotation_from_axis_angle
from .registration import SurfaceModel
from .validation import as_vector3

# Categories of the pre-trained detector this pipeline abstracts over.
CATEGORIES = ("bottle", "bowl", "camera", "can", "laptop", "mug")

# shape and half-extent ranges per category (metres); cylinders use
# extents = (radius, radius, half_height). Sizes sit at the large end of
# desk-scale so the IoU association gate stays meaningful under
# centimetre-level detector noise.
_CATALOG = {
    "bottle": ("cylinder", (0.045, 0.06), (0.045, 0.06), (0.09, 0.14)),
    "bowl": ("cylinder", (0.07, 0.11), (0.07, 0.11), (0.035, 0.055)),
    "camera": ("box", (0.055, 0.08), (0.045, 0.065), (0.04, 0.06)),
    "can": ("cylinder", (0.042, 0.055), (0.042, 0.055), (0.055, 0.085)),
    "laptop": ("box", (0.15, 0.19), (0.10, 0.14), (0.02, 0.04)),
    "mug": ("cylinder", (0.05, 0.07), (0.05, 0.07), (0.045, 0.065)),
}

_CLUTTER_EXTENTS = ((0.04, 0.09), (0.04, 0.09), (0.25, 0.45))


@dataclass(frozen=True)
class SensorParams:
    """Pinhole depth sensor: horizontal FOV, ray-grid resolution, range.

    min_cos_incidence models the grazing-angle cutoff of real depth sensors:
    rays striking a surface at more than ~84 degrees from its normal return
    no depth. Without it, silhouette edges produce one-row slivers of points
    that poison ICP with systematic mismatches.
    """

    fov_deg: float = 90.0
    width: int = 160
    height: int = 120
    max_range: float = 5.0
    min_cos_incidence: float = 0.1

    @property
    def tan_half_fov(self):
        return float(np.tan(np.deg2rad(self.fov_deg) / 2.0))


DEFAULT_SENSOR = SensorParams()


@dataclass(frozen=True)
class SceneObject:
    label: str
    pose: RigidTransform
    extents: np.ndarray
    shape: str = "box"  # box | cylinder

    def __post_init__(self):
        object.__setattr__(self, "extents", as_vector3(self.extents, "extents"))
        if self.shape not in ("box", "cylinder"):
            raise ValueError(f"unknown shape {self.shape!r}")


@dataclass(frozen=True)
class Scene:
    objects: tuple
    ground_height: float = 0.0
    ground_extent: float = 1.0
    clutter: tuple = ()

    def primitives(self):
        return tuple(self.objects) + tuple(self.clutter)


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "orbit_horizontal"  # orbit_horizontal | arc_vertical | replay
    radius: float = 1.4
    height: float = 1.0
    angle_range: float = 120.0
    frame_count: int = 40
    lookat: tuple = (0.0, 0.0, 0.0)
    start_deg: float = 0.0
    poses: tuple = ()  # replay only

    def __post_init__(self):
        if self.frame_count < 1:
            raise ValueError("frame_count must be >= 1")
        if self.kind != "replay" and self.radius <= 0:
            raise ValueError("radius must be > 0")


def _philox(*key):
    return np.random.Generator(np.random.Philox(key=np.array(key, dtype=np.uint64)))


def _pose_digest(pose):
    h = hashlib.blake2b(digest_size=8)
    h.update(np.ascontiguousarray(pose.rotation).tobytes())
    h.update(np.ascontiguousarray(pose.translation).tobytes())
    return int.from_bytes(h.digest(), "little")


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """World-from-camera pose with the camera's +z axis toward target.

    Camera convention: x right, y down, z forward (right-handed). Falls back
    to an x-axis up vector when the view direction is parallel to up.
    """
    eye = as_vector3(eye, "eye")
    target = as_vector3(target, "target")
    z = target - eye
    n = np.linalg.norm(z)
    if n == 0.0:
        raise ValueError("eye and target coincide")
    z = z / n
    up = as_vector3(up, "up")
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), eye)


def in_frustum(p_cam, sensor=DEFAULT_SENSOR):
    """Whether a camera-frame point is inside the sensor's view frustum and range."""
    p = as_vector3(p_cam, "p_cam")
    if p[2] <= 1e-9 or np.linalg.norm(p) > sensor.max_range:
        return False
    t = sensor.tan_half_fov
    return abs(p[0] / p[2]) <= t and abs(p[1] / p[2]) <= t * sensor.height / sensor.width


def generate_scene(
    object_count=5,
    label_mix=None,
    extent_ranges=None,
    seed=0,
    plane_height=0.0,
    plane_extent=1.0,
    clutter_count=0,
    margin_factor=1.0,
):
    """Rejection-sample a desktop scene of non-intersecting categorised primitives.

    label_mix: sequence of category names to draw from (with repetition
    allowed), default all six. extent_ranges overrides catalogue entries per
    label with ((lo,hi),(lo,hi),(lo,hi)). Deterministic given seed. Raises
    PlacementFailure after 10000 rejected placements.
    """
    rng = _philox(seed, 0x5CE)
    labels = tuple(label_mix) if label_mix else CATEGORIES
    for lab in labels:
        if lab not in _CATALOG:
            raise ValueError(f"unknown category {lab!r}")
    placed = []
    rejections = 0

    def sample_one(label, ranges, shape):
        ext = np.array([rng.uniform(lo, hi) for lo, hi in ranges])
        if shape == "cylinder":
            ext[1] = ext[0]
        yaw = rng.uniform(0.0, 360.0)
        lim = max(plane_extent - ext[:2].max(), 0.05)
        xy = rng.uniform(-lim, lim, 2)
        centroid = np.array([xy[0], xy[1], plane_height + ext[2]])
        return centroid, rotation_from_axis_angle([0, 0, 1], yaw), ext

    def collides(centroid, ext):
        for other in placed:
            min_sep = margin_factor * (ext.max() + other.extents.max())
            if np.linalg.norm(centroid - other.pose.translation) < min_sep:
                return True
        return False

    specs = [labels[int(rng.integers(0, len(labels)))] for _ in range(object_count)]
    specs += ["clutter"] * clutter_count
    for label in specs:
        if label == "clutter":
            shape, ranges = "box", _CLUTTER_EXTENTS
        else:
            entry = _CATALOG[label]
            shape = entry[0]
            ranges = entry[1:]
            if extent_ranges and label in extent_ranges:
                ranges = extent_ranges[label]
        while True:
            centroid, rot, ext = sample_one(label, ranges, shape)
            if not collides(centroid, ext):
                break
            rejections += 1
            if rejections > 10000:
                raise PlacementFailure(
                    f"could not place {object_count + clutter_count} objects "
                    f"after 10000 rejections (plane_extent={plane_extent})"
                )
        placed.append(SceneObject(label, RigidTransform(rot, centroid), ext, shape))
    objects = tuple(o for o in placed if o.label != "clutter")
    clutter = tuple(o for o in placed if o.label == "clutter")
    return Scene(objects, plane_height, plane_extent, clutter)


def generate_trajectory(spec):
    """World-from-camera poses along the trajectory described by spec.

    orbit_horizontal sweeps azimuth start_deg + angle_range * k / frame_count
    at fixed height and radius; arc_vertical sweeps elevation start_deg +
    angle_range * k / frame_count above the elevation implied by height, at
    azimuth 0; replay returns spec.poses unchanged.
    """
    if spec.kind == "replay":
        if not spec.poses:
            raise ValueError("replay trajectory requires poses")
        return list(spec.poses)
    lookat = np.asarray(spec.lookat, dtype=np.float64)
    poses = []
    for k in range(spec.frame_count):
        if spec.kind == "orbit_horizontal":
            az = np.deg2rad(spec.start_deg + spec.angle_range * k / spec.frame_count)
            eye = np.array(
                [
                    lookat[0] + spec.radius * np.cos(az),
                    lookat[1] + spec.radius * np.sin(az),
                    spec.height,
                ]
            )
        elif spec.kind == "arc_vertical":
            el0 = np.arcsin(np.clip((spec.height - lookat[2]) / spec.radius, -1.0, 1.0))
            el = el0 + np.deg2rad(spec.start_deg + spec.angle_range * k / spec.frame_count)
            eye = lookat + spec.radius * np.array([np.cos(el), 0.0, np.sin(el)])
        else:
            raise ValueError(f"unknown trajectory kind {spec.kind!r}")
        poses.append(look_at(eye, lookat))
    return poses


def _ray_dirs(sensor):
    fx = (sensor.width / 2.0) / sensor.tan_half_fov
    cx = (sensor.width - 1) / 2.0
    cy = (sensor.height - 1) / 2.0
    u, v = np.meshgrid(np.arange(sensor.width), np.arange(sensor.height), indexing="ij")
    d = np.stack([(u.ravel() - cx) / fx, (v.ravel() - cy) / fx, np.ones(u.size)], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _intersect_box(obj, origins, dirs):
    rot = obj.pose.rotation
    o = (origins - obj.pose.translation) @ rot
    d = dirs @ rot
    e = obj.extents
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-e - o) * inv
        t2 = (e - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # parallel rays: inside slab -> -inf/+inf, outside -> no hit
    par = np.abs(d) < 1e-15
    inside = np.abs(o) <= e
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    t_near = tmin.max(axis=1)
    t_far = tmax.min(axis=1)
    hit = (t_near <= t_far) & (t_far > 1e-9) & (t_near > 1e-9)
    t = np.where(hit, t_near, np.inf)
    axis = tmin.argmax(axis=1)
    sign = -np.sign(np.take_along_axis(d, axis[:, None], 1)[:, 0])
    normals_local = np.zeros_like(dirs)
    normals_local[np.arange(len(dirs)), axis] = np.where(sign == 0.0, 1.0, sign)
    normals = normals_local @ rot.T
    return t, normals


def _intersect_cylinder(obj, origins, dirs):
    rot = obj.pose.rotation
    o = (origins - obj.pose.translation) @ rot
    d = dirs @ rot
    r = obj.extents[0]
    hh = obj.extents[2]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
    disc = b * b - 4.0 * a * c
    t_best = np.full(len(dirs), np.inf)
    n_local = np.zeros_like(dirs)
    ok = (disc >= 0.0) & (a > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        for sgn in (-1.0, 1.0):
            t = np.where(ok, (-b + sgn * sq) / (2.0 * a), np.inf)
            z = o[:, 2] + t * d[:, 2]
            good = ok & (t > 1e-9) & (np.abs(z) <= hh) & (t < t_best)
            t_best = np.where(good, t, t_best)
            px = o[:, 0] + t * d[:, 0]
            py = o[:, 1] + t * d[:, 1]
            n_local[good] = np.column_stack([px / r, py / r, np.zeros_like(px)])[good]
        # caps
        for zcap, nz in ((hh, 1.0), (-hh, -1.0)):
            t = np.where(np.abs(d[:, 2]) > 1e-15, (zcap - o[:, 2]) / d[:, 2], np.inf)
            px = o[:, 0] + t * d[:, 0]
            py = o[:, 1] + t * d[:, 1]
            good = (t > 1e-9) & (px**2 + py**2 <= r * r) & (t < t_best)
            t_best = np.where(good, t, t_best)
            n_local[good] = [0.0, 0.0, nz]
    return t_best, n_local @ rot.T


def _intersect_ground(scene, origins, dirs):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (scene.ground_height - origins[:, 2]) / dirs[:, 2]
    p = origins + t[:, None] * dirs
    ok = (
        (t > 1e-9)
        & np.isfinite(t)
        & (np.abs(p[:, 0]) <= scene.ground_extent)
        & (np.abs(p[:, 1]) <= scene.ground_extent)
    )
    t = np.where(ok, t, np.inf)
    normals = np.tile([0.0, 0.0, 1.0], (len(dirs), 1))
    return t, normals


def _raycast(scene, camera_pose, sensor):
    """Cast the full pinhole grid; returns (t, normals_world, dirs_cam) with
    t = inf for misses. Normals belong to the nearest hit primitive. Hits at
    grazing incidence (|n . dir| below the sensor cutoff) return no depth."""
    dirs_cam = _ray_dirs(sensor)
    dirs_w = dirs_cam @ camera_pose.rotation.T
    origins = np.tile(camera_pose.translation, (len(dirs_w), 1))
    t_best, n_best = _intersect_ground(scene, origins, dirs_w)
    for obj in scene.primitives():
        if obj.shape == "box":
            t, n = _intersect_box(obj, origins, dirs_w)
        else:
            t, n = _intersect_cylinder(obj, origins, dirs_w)
        closer = t < t_best
        t_best = np.where(closer, t, t_best)
        n_best = np.where(closer[:, None], n, n_best)
    t_best = np.where(t_best <= sensor.max_range, t_best, np.inf)
    grazing = np.abs(np.einsum("ni,ni->n", n_best, dirs_w)) < sensor.min_cos_incidence
    t_best = np.where(grazing, np.inf, t_best)
    return t_best, n_best, dirs_cam


def render_depth_points(scene, camera_pose, sensor=DEFAULT_SENSOR, sigma_depth=0.0, seed=0, rng=None):
    """Depth point cloud in the camera frame: nearest hit per ray, perturbed
    along the ray by N(0, sigma_depth^2); misses omitted.

    Deterministic given (seed, camera_pose) when rng is not supplied.
    """
    t, _, dirs_cam = _raycast(scene, camera_pose, sensor)
    if rng is None:
        rng = _philox(seed, _pose_digest(camera_pose))
    noise = rng.normal(0.0, sigma_depth, len(t)) if sigma_depth > 0.0 else np.zeros(len(t))
    hit = np.isfinite(t)
    return dirs_cam[hit] * (t[hit] + noise[hit])[:, None]


def build_surface_model(scene, keyframe_poses, sensor=DEFAULT_SENSOR, sigma_depth=0.0, seed=0, voxel=0.01):
    """Accumulate rendered depth over key-frame poses into a SurfaceModel.

    Points are transformed to world, voxel-downsampled at `voxel` (first point
    per cell kept) and paired with the analytic normal of their hit primitive.
    """
    if not keyframe_poses:
        raise ValueError("need at least one pose")
    all_pts = []
    all_nrm = []
    for pose in keyframe_poses:
        t, normals, dirs_cam = _raycast(scene, pose, sensor)
        rng = _philox(seed, _pose_digest(pose))
        noise = rng.normal(0.0, sigma_depth, len(t)) if sigma_depth > 0.0 else np.zeros(len(t))
        hit = np.isfinite(t)
        pts_cam = dirs_cam[hit] * (t[hit] + noise[hit])[:, None]
        all_pts.append(pose.apply(pts_cam))
        all_nrm.append(normals[hit])
    pts = np.vstack(all_pts)
    nrm = np.vstack(all_nrm)
    if len(pts) == 0:
        raise EmptyModel("no rays hit the scene from any pose")
    keys = np.floor(pts / voxel).astype(np.int64)
    # lexicographic unique, keeping the first occurrence per voxel
    order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
    sk = keys[order]
    new_cell = np.ones(len(sk), dtype=bool)
    new_cell[1:] = np.any(sk[1:] != sk[:-1], axis=1)
    first_in_cell = np.minimum.reduceat(order, np.flatnonzero(new_cell))
    first_in_cell.sort()
    return SurfaceModel(pts[first_in_cell], nrm[first_in_cell])
