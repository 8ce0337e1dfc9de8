"""SE(3) poses, yaw-only cuboids, pinhole projection, and IoU primitives.

Twist ordering is (omega, v): rotation first, translation second. All
rotations are stored as 3x3 orthonormal matrices; quaternions appear only
at the TUM serialization boundary (Hamilton convention, scalar last).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Taylor-series branch below this rotation angle avoids sin(t)/t cancellation.
SMALL_ANGLE = 1e-6
# log() is ill-conditioned within this margin of pi.
NEAR_PI = math.pi - 1e-6


class NotVisible(Exception):
    """Cuboid projects to nothing usable on the image plane."""


class AngleNearPi(Exception):
    """Rotation angle too close to pi for a stable logarithm."""


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric (hat) matrix of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` (vee) for a skew-symmetric matrix."""
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula; quadratic Taylor branch below SMALL_ANGLE."""
    omega = np.asarray(omega, dtype=float)
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * k2
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * k2


def so3_log(r: np.ndarray) -> np.ndarray:
    """Rotation vector of an orthonormal matrix; raises AngleNearPi near pi."""
    c = (np.trace(r) - 1.0) / 2.0
    theta = math.acos(min(1.0, max(-1.0, c)))
    if theta >= NEAR_PI:
        raise AngleNearPi(f"rotation angle {theta:.9f} rad is within 1e-6 of pi")
    s = unskew(r - r.T) / 2.0  # = sin(theta) * axis
    if theta < SMALL_ANGLE:
        return s * (1.0 + theta * theta / 6.0)
    return s * (theta / math.sin(theta))


def _left_jacobian(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * k + k2 / 6.0
    t2 = theta * theta
    a = (1.0 - math.cos(theta)) / t2
    b = (theta - math.sin(theta)) / (t2 * theta)
    return np.eye(3) + a * k + b * k2


def _left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    theta = float(np.linalg.norm(omega))
    k = skew(omega)
    k2 = k @ k
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * k + k2 / 12.0
    c = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / (theta * theta)
    return np.eye(3) - 0.5 * k + c * k2


def orthonormalize(r: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix in the Frobenius sense (SVD projection)."""
    u, _, vt = np.linalg.svd(r)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


@dataclass(frozen=True)
class Pose:
    """Rigid transform on SE(3): x_out = r @ x_in + t."""

    r: np.ndarray
    t: np.ndarray

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_rt(r: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(np.array(r, dtype=float), np.array(t, dtype=float).reshape(3))

    @staticmethod
    def from_translation(t) -> "Pose":
        return Pose(np.eye(3), np.array(t, dtype=float).reshape(3))

    @staticmethod
    def from_yaw(yaw: float, t=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Pose(r, np.array(t, dtype=float).reshape(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(m[:3, :3].copy(), m[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.r
        m[:3, 3] = self.t
        return m

    def compose(self, other: "Pose") -> "Pose":
        """self applied after other (matrix product self @ other)."""
        r = self.r @ other.r
        drift = np.abs(r @ r.T - np.eye(3)).max()
        if drift > 1e-12:
            r = orthonormalize(r)
        return Pose(r, self.r @ other.t + self.t)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        rt = self.r.T
        return Pose(rt.copy(), -rt @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch."""
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.r @ points + self.t
        return points @ self.r.T + self.t

    def yaw(self) -> float:
        """Heading about world z; meaningful for near-upright rotations."""
        return math.atan2(self.r[1, 0], self.r[0, 0])

    def is_close(self, other: "Pose", tol: float = 1e-9) -> bool:
        return (
            np.abs(self.r - other.r).max() <= tol
            and np.abs(self.t - other.t).max() <= tol
        )


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Apply b then a."""
    return a.compose(b)


def pose_inverse(a: Pose) -> Pose:
    return a.inverse()


def se3_exp(xi: np.ndarray) -> Pose:
    """Exponential map of a twist (omega, v) onto SE(3)."""
    xi = np.asarray(xi, dtype=float).reshape(6)
    omega, v = xi[:3], xi[3:]
    return Pose(so3_exp(omega), _left_jacobian(omega) @ v)


def se3_log(p: Pose) -> np.ndarray:
    """Twist (omega, v) with se3_exp(se3_log(p)) == p; AngleNearPi near pi."""
    omega = so3_log(p.r)
    v = _left_jacobian_inv(omega) @ p.t
    return np.concatenate([omega, v])


# ---------------------------------------------------------------------------
# Batched 4x4 kernels used by the nonlinear least-squares solver.
# ---------------------------------------------------------------------------


def batch_inverse(m: np.ndarray) -> np.ndarray:
    """Invert an (N, 4, 4) stack of rigid transforms."""
    rt = np.swapaxes(m[:, :3, :3], 1, 2)
    out = np.zeros_like(m)
    out[:, :3, :3] = rt
    out[:, :3, 3] = -np.einsum("nij,nj->ni", rt, m[:, :3, 3])
    out[:, 3, 3] = 1.0
    return out


def batch_exp(xi: np.ndarray) -> np.ndarray:
    """Exponential map of an (N, 6) twist stack to (N, 4, 4) transforms."""
    xi = np.asarray(xi, dtype=float)
    omega, v = xi[:, :3], xi[:, 3:]
    theta = np.linalg.norm(omega, axis=1)
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)

    k = np.zeros((len(xi), 3, 3))
    k[:, 0, 1], k[:, 0, 2] = -omega[:, 2], omega[:, 1]
    k[:, 1, 0], k[:, 1, 2] = omega[:, 2], -omega[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -omega[:, 1], omega[:, 0]
    k2 = np.einsum("nij,njk->nik", k, k)

    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    c = np.where(small, 1.0 / 6.0, (safe - np.sin(safe)) / safe**3)

    eye = np.broadcast_to(np.eye(3), (len(xi), 3, 3))
    r = eye + a[:, None, None] * k + b[:, None, None] * k2
    vmat = eye + b[:, None, None] * k + c[:, None, None] * k2

    out = np.zeros((len(xi), 4, 4))
    out[:, :3, :3] = r
    out[:, :3, 3] = np.einsum("nij,nj->ni", vmat, v)
    out[:, 3, 3] = 1.0
    return out


def batch_log(m: np.ndarray) -> np.ndarray:
    """Logarithm of an (N, 4, 4) transform stack; raises AngleNearPi."""
    r = m[:, :3, :3]
    t = m[:, :3, 3]
    tr = np.clip((r[:, 0, 0] + r[:, 1, 1] + r[:, 2, 2] - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(tr)
    if np.any(theta >= NEAR_PI):
        idx = int(np.argmax(theta))
        raise AngleNearPi(f"rotation angle {theta[idx]:.9f} rad at index {idx}")
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)

    s = np.stack(
        [
            r[:, 2, 1] - r[:, 1, 2],
            r[:, 0, 2] - r[:, 2, 0],
            r[:, 1, 0] - r[:, 0, 1],
        ],
        axis=1,
    ) / 2.0
    factor = np.where(small, 1.0 + theta**2 / 6.0, safe / np.sin(safe))
    omega = s * factor[:, None]

    k = np.zeros_like(r)
    k[:, 0, 1], k[:, 0, 2] = -omega[:, 2], omega[:, 1]
    k[:, 1, 0], k[:, 1, 2] = omega[:, 2], -omega[:, 0]
    k[:, 2, 0], k[:, 2, 1] = -omega[:, 1], omega[:, 0]
    k2 = np.einsum("nij,njk->nik", k, k)
    c = np.where(
        small,
        1.0 / 12.0,
        (1.0 - safe * np.sin(safe) / (2.0 * (1.0 - np.cos(safe)))) / safe**2,
    )
    vinv = np.broadcast_to(np.eye(3), r.shape) - 0.5 * k + c[:, None, None] * k2
    v = np.einsum("nij,nj->ni", vinv, t)
    return np.concatenate([omega, v], axis=1)


# ---------------------------------------------------------------------------
# Cuboids, boxes, cameras.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Cuboid:
    """Yaw-only 3D box: center position, heading about z, full extents."""

    t: np.ndarray
    yaw: float
    dims: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(3))
        object.__setattr__(self, "dims", np.asarray(self.dims, dtype=float).reshape(3))
        if np.any(self.dims <= 0):
            raise ValueError(f"cuboid dims must be positive, got {self.dims}")

    def pose(self) -> Pose:
        return Pose.from_yaw(self.yaw, self.t)

    def corners(self) -> np.ndarray:
        """(8, 3) corner positions in the world frame."""
        dx, dy, dz = self.dims / 2.0
        local = np.array(
            [[sx * dx, sy * dy, sz * dz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        )
        return self.pose().apply(local)

    def ground_rect(self) -> np.ndarray:
        """(4, 2) footprint corners on the ground plane, counter-clockwise."""
        dx, dy = self.dims[0] / 2.0, self.dims[1] / 2.0
        local = np.array([[-dx, -dy], [dx, -dy], [dx, dy], [-dx, dy]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.t[:2]

    def volume(self) -> float:
        return float(np.prod(self.dims))

    def z_interval(self) -> tuple[float, float]:
        half = self.dims[2] / 2.0
        return (self.t[2] - half, self.t[2] + half)


@dataclass(frozen=True)
class BBox2D:
    """Axis-aligned pixel box with (u_min, v_min) top-left corner."""

    u_min: float
    v_min: float
    u_max: float
    v_max: float

    def __post_init__(self):
        if not (self.u_min < self.u_max and self.v_min < self.v_max):
            raise ValueError(f"degenerate bbox {self}")

    def area(self) -> float:
        return (self.u_max - self.u_min) * (self.v_max - self.v_min)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Pinhole projection of (N, 3) camera-frame points (z forward)."""
        z = points_cam[:, 2]
        return np.stack(
            [
                self.fx * points_cam[:, 0] / z + self.cx,
                self.fy * points_cam[:, 1] / z + self.cy,
            ],
            axis=1,
        )


MIN_DEPTH = 0.01  # corners closer than this to the image plane are dropped


def predict_bbox(c: Cuboid, t_cw: Pose, k: CameraIntrinsics) -> BBox2D:
    """Project the 8 cuboid corners and take the pixel min/max rectangle.

    Corners behind the camera are excluded; the box is clamped to the image
    bounds. Raises NotVisible when nothing in front remains or the clamped
    box has zero area.
    """
    corners_cam = t_cw.apply(c.corners())
    front = corners_cam[corners_cam[:, 2] > MIN_DEPTH]
    if len(front) == 0:
        raise NotVisible("all cuboid corners behind the camera")
    px = k.project(front)
    u0 = max(0.0, float(px[:, 0].min()))
    v0 = max(0.0, float(px[:, 1].min()))
    u1 = min(float(k.width), float(px[:, 0].max()))
    v1 = min(float(k.height), float(px[:, 1].max()))
    if u1 <= u0 or v1 <= v0:
        raise NotVisible("projected box falls outside the image")
    return BBox2D(u0, v0, u1, v1)


def iou_2d(a: BBox2D, b: BBox2D) -> float:
    """Intersection-over-union of two pixel boxes."""
    iw = min(a.u_max, b.u_max) - max(a.u_min, b.u_min)
    ih = min(a.v_max, b.v_max) - max(a.v_min, b.v_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def _clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of a polygon by a convex CCW polygon."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        edge = b - a
        if not output:
            break
        inp, output = output, []
        prev = inp[-1]
        prev_in = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0]) >= 0
        for cur in inp:
            cur_in = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0]) >= 0
            if cur_in != prev_in:
                d = cur - prev
                denom = edge[0] * d[1] - edge[1] * d[0]
                s = (edge[1] * (prev[0] - a[0]) - edge[0] * (prev[1] - a[1])) / denom
                output.append(prev + s * d)
            if cur_in:
                output.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(output) if output else np.zeros((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def iou_3d(a: Cuboid, b: Cuboid) -> float:
    """Exact IoU of two yaw-only cuboids.

    Ground-plane footprint intersection (polygon clipping, clockwise-safe
    for CCW rectangles) times the vertical interval overlap.
    """
    inter_poly = _clip_polygon(a.ground_rect(), b.ground_rect())
    inter_area = _polygon_area(inter_poly)
    if inter_area == 0.0:
        return 0.0
    za0, za1 = a.z_interval()
    zb0, zb1 = b.z_interval()
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0:
        return 0.0
    inter = inter_area * dz
    return inter / (a.volume() + b.volume() - inter)


def translation_distance(a: Pose, b: Pose) -> float:
    """Euclidean distance between the two frame origins."""
    return float(np.linalg.norm(a.inverse().compose(b).t))


# ---------------------------------------------------------------------------
# TUM trajectory line format (Hamilton quaternion, scalar last).
# ---------------------------------------------------------------------------


def rotation_to_quat(r: np.ndarray) -> np.ndarray:
    """(qx, qy, qz, qw) via Shepperd's method."""
    tr = np.trace(r)
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2.0
        return np.array(
            [(r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s, 0.25 * s]
        )
    if r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2.0
        return np.array(
            [0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s, (r[2, 1] - r[1, 2]) / s]
        )
    if r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2.0
        return np.array(
            [(r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s, (r[0, 2] - r[2, 0]) / s]
        )
    s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2.0
    return np.array(
        [(r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s, (r[1, 0] - r[0, 1]) / s]
    )


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    x, y, z, w = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def pose_to_tum_line(stamp: float, pose: Pose) -> str:
    q = rotation_to_quat(pose.r)
    vals = [stamp, *pose.t, *q]
    return " ".join(f"{v:.9g}" for v in vals)


def pose_from_tum_line(line: str) -> tuple[float, Pose]:
    vals = [float(x) for x in line.split()]
    if len(vals) != 8:
        raise ValueError(f"TUM line needs 8 fields, got {len(vals)}")
    return vals[0], Pose(quat_to_rotation(vals[4:8]), np.array(vals[1:4]))
