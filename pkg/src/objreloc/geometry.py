"""Core geometric types and exact primitive operations.

Everything downstream (fusion, matching, registration, simulation) is built on
the three value types defined here: rigid transforms, oriented bounding boxes
and Gaussian-distributed centroids. All types are immutable and all operations
are pure functions, so they are safe for unrestricted concurrent use.

Conventions: rotations are 3x3 row-major orthonormal matrices with det +1,
translations and points are metres, angles returned in degrees.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateRotations
from .validation import as_matrix3, as_vector3, check_covariance, check_rotation

# Eigenvalue floor applied to every centroid covariance so that Mahalanobis
# distances stay defined even for single-sample configurations.
COVARIANCE_FLOOR = 1e-6

_ORTHONORMALITY_DRIFT = 1e-9

# Cell-centre lattice of a 32^3 grid over [-1, 1]^3, built once. box_iou maps
# it into each box's own frame, which keeps the estimate exact for identical
# boxes and for axis-aligned overlaps whose boundaries fall on lattice planes.
_IOU_GRID_N = 32
_g = (np.arange(_IOU_GRID_N) + 0.5) / _IOU_GRID_N * 2.0 - 1.0
_IOU_LATTICE = np.stack(np.meshgrid(_g, _g, _g, indexing="ij"), axis=-1).reshape(-1, 3)
del _g


def nearest_rotation(m):
    """Project a 3x3 matrix to the nearest rotation (orthogonal polar factor, det +1)."""
    u, _, vt = np.linalg.svd(as_matrix3(m, "m"))
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def rotation_from_axis_angle(axis, angle_deg):
    """Rotation matrix for a right-handed rotation of angle_deg about axis."""
    axis = as_vector3(axis, "axis")
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("axis: zero vector")
    return exp_so3(axis / n * np.deg2rad(angle_deg))


def exp_so3(omega):
    """Rodrigues exponential: rotation vector (radians) -> rotation matrix."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = np.array(
        [
            [0.0, -omega[2], omega[1]],
            [omega[2], 0.0, -omega[0]],
            [-omega[1], omega[0], 0.0],
        ]
    )
    if theta < 1e-10:
        # second-order series, accurate to ~1e-30 here
        return np.eye(3) + k + 0.5 * (k @ k)
    return np.eye(3) + np.sin(theta) / theta * k + (1.0 - np.cos(theta)) / theta**2 * (k @ k)


@dataclass(frozen=True)
class RigidTransform:
    """Element of SE(3): x_out = rotation @ x_in + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", check_rotation(self.rotation, "rotation", tol=1e-8))
        object.__setattr__(self, "translation", as_vector3(self.translation, "translation"))

    @staticmethod
    def identity():
        return RigidTransform(np.eye(3), np.zeros(3))

    def inverse(self):
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points):
        """Transform a single 3-vector or an (N, 3) array of points."""
        p = np.asarray(points, dtype=np.float64)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m):
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got shape {m.shape}")
        return RigidTransform(m[:3, :3], m[:3, 3])


def compose(a, b):
    """Composition a∘b: apply b first, then a.

    Re-orthonormalises the product rotation via polar projection when the
    accumulated drift exceeds 1e-9 per element.
    """
    r = a.rotation @ b.rotation
    if np.abs(r.T @ r - np.eye(3)).max() > _ORTHONORMALITY_DRIFT:
        r = nearest_rotation(r)
    return RigidTransform(r, a.rotation @ b.translation + a.translation)


def transform_point(t, p):
    """rotation @ p + translation for a single point."""
    return t.rotation @ as_vector3(p, "p") + t.translation


def rotation_angle_between(a, b):
    """Geodesic angle between two rotations, in degrees, clamped to [0, 180]."""
    a = as_matrix3(a, "a")
    b = as_matrix3(b, "b")
    c = (np.trace(a.T @ b) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def rotation_mean(rotations):
    """Chordal L2 mean: nearest rotation to the element-wise arithmetic mean.

    Raises DegenerateRotations when the arithmetic mean is rank-deficient
    (antipodal or otherwise irreconcilable inputs).
    """
    rs = list(rotations)
    if not rs:
        raise ValueError("rotation_mean: empty input")
    m = np.mean(np.stack([as_matrix3(r, "rotation") for r in rs]), axis=0)
    u, s, vt = np.linalg.svd(m)
    if s[1] < 1e-9:
        raise DegenerateRotations(
            f"arithmetic mean of rotations is rank-deficient (singular values {s})"
        )
    r = u @ vt
    if np.linalg.det(r) < 0.0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


@dataclass(frozen=True)
class OrientedBox:
    """3D bounding box: centroid, orientation, per-axis half-lengths and scalar scale.

    scale is the cube root of the box volume, stored redundantly because the
    correspondence matcher scores boxes by a single scalar size.
    """

    centroid: np.ndarray
    orientation: np.ndarray
    extents: np.ndarray
    scale: float

    def __post_init__(self):
        object.__setattr__(self, "centroid", as_vector3(self.centroid, "centroid"))
        object.__setattr__(self, "orientation", check_rotation(self.orientation, "orientation", tol=1e-8))
        e = as_vector3(self.extents, "extents")
        if np.any(e <= 0.0):
            raise ValueError(f"extents: must be positive, got {e}")
        object.__setattr__(self, "extents", e)
        object.__setattr__(self, "scale", float(self.scale))

    @staticmethod
    def create(centroid, orientation, extents):
        """Build a box computing scale = (8 * ex * ey * ez)^(1/3)."""
        e = as_vector3(extents, "extents")
        return OrientedBox(centroid, orientation, e, float(np.cbrt(8.0 * np.prod(e))))

    @property
    def volume(self):
        return float(8.0 * np.prod(self.extents))

    def corners(self):
        """The 8 box corners, (8, 3)."""
        signs = np.array(
            [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
            dtype=np.float64,
        )
        return self.centroid + (signs * self.extents) @ self.orientation.T

    def aabb(self):
        """Axis-aligned bounds (lo, hi) of the oriented box."""
        half = np.abs(self.orientation) @ self.extents
        return self.centroid - half, self.centroid + half

    def contains(self, points, tol=1e-12):
        """Boolean mask: which of the (N, 3) points lie inside the box."""
        q = (np.atleast_2d(points) - self.centroid) @ self.orientation
        return np.all(np.abs(q) <= self.extents + tol, axis=1)


def _lattice_points(box):
    # 32^3 cell centres tiling the box's own volume
    return box.centroid + (_IOU_LATTICE * box.extents) @ box.orientation.T


def box_iou(b1, b2):
    """Intersection-over-union of two oriented boxes.

    Deterministic 32^3 grid sampling: each box is tiled by the cell centres of
    a 32^3 lattice in its own frame and the intersection volume is estimated
    symmetrically from the fraction of each box's lattice falling inside the
    other. Exact for identical boxes; relative error <= 2% for non-degenerate
    overlaps. Symmetric by construction.
    """
    lo1, hi1 = b1.aabb()
    lo2, hi2 = b2.aabb()
    if np.any(hi1 < lo2) or np.any(hi2 < lo1):
        return 0.0
    v1 = b1.volume
    v2 = b2.volume
    i12 = v1 * np.count_nonzero(b2.contains(_lattice_points(b1))) / _IOU_LATTICE.shape[0]
    i21 = v2 * np.count_nonzero(b1.contains(_lattice_points(b2))) / _IOU_LATTICE.shape[0]
    inter = 0.5 * (i12 + i21)
    union = v1 + v2 - inter
    if inter <= 0.0 or union <= 0.0:
        return 0.0
    return float(min(inter / union, 1.0))


def regularize_covariance(cov, floor=COVARIANCE_FLOOR):
    """Symmetrise and clip eigenvalues to the floor."""
    c = 0.5 * (np.asarray(cov, dtype=np.float64) + np.asarray(cov, dtype=np.float64).T)
    w, v = np.linalg.eigh(c)
    if w[0] >= floor:
        return c
    w = np.maximum(w, floor)
    c = (v * w) @ v.T
    return 0.5 * (c + c.T)


@dataclass(frozen=True)
class GaussianCentroid:
    """Normally distributed centroid N(mean, covariance) for one box configuration.

    samples retains the assigned centroid observations (an (n, 3) array) so
    that configurations can be re-pooled on merge; it is None for summarised
    centroids loaded from a map file, which can no longer be updated.
    """

    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int
    samples: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "mean", as_vector3(self.mean, "mean"))
        cov = check_covariance(self.covariance, "covariance", sym_tol=1e-12, min_eig=COVARIANCE_FLOOR)
        object.__setattr__(self, "covariance", cov)
        object.__setattr__(self, "sample_count", int(self.sample_count))
        if self.sample_count < 0:
            raise ValueError("sample_count: must be non-negative")
        if self.samples is not None:
            s = np.asarray(self.samples, dtype=np.float64).reshape(-1, 3)
            if s.shape[0] != self.sample_count:
                raise ValueError(
                    f"sample_count {self.sample_count} != number of samples {s.shape[0]}"
                )
            object.__setattr__(self, "samples", s)

    @staticmethod
    def from_samples(samples, prior_sigma=0.02, min_samples_for_cov=3, floor=COVARIANCE_FLOOR):
        """Mean + covariance of retained samples.

        Below min_samples_for_cov observations the covariance is the isotropic
        prior prior_sigma^2 * I; from then on the unbiased sample covariance
        plus the decaying prior term (prior_sigma^2 / n) I. The blend keeps
        the gate calibrated while the sample covariance is still rank-deficient
        (3 points span only a plane) and washes out as evidence accumulates.
        """
        s = np.asarray(samples, dtype=np.float64).reshape(-1, 3)
        n = s.shape[0]
        if n == 0:
            raise ValueError("from_samples: empty sample list")
        mean = s.mean(axis=0)
        if n < min_samples_for_cov:
            cov = np.eye(3) * prior_sigma**2
        else:
            cov = np.cov(s.T, ddof=1) + np.eye(3) * (prior_sigma**2 / n)
        return GaussianCentroid(mean, regularize_covariance(cov, floor), n, s)


def mahalanobis_sq(x, g):
    """Squared Mahalanobis distance of point x to the Gaussian centroid g."""
    d = as_vector3(x, "x") - g.mean
    return float(d @ np.linalg.solve(g.covariance, d))
