"""Camera geometry: projection, triangulation and ground footprints.

Conventions used everywhere in this package:

* World frame is right-handed with z up (metres).
* ``Pose`` stores the world-to-camera map: ``p_cam = R @ p_world + t``.
  The camera centre in world coordinates is therefore ``-R.T @ t``.
* Camera frame: x right, y down, z forward (optical axis).  A point is
  visible only if its camera-frame z is strictly positive; ``project``
  raises :class:`NonPositiveDepth` otherwise.
* Pixel coordinates are (u, v) with u along image x (width) and v along
  image y (height).  ``u = fx * x/z + cx``, ``v = fy * y/z + cy``.  No
  half-pixel offset: integer coordinates address exact ray directions.
* "Depth" always means camera-frame z (perpendicular depth), never the
  Euclidean ray length.

Pose increments are left-multiplicative axis-angle: a 6-vector
``(w, dt)`` maps the pose to ``(exp([w]x) @ R, t + dt)``.  The analytic
Jacobians in :func:`reprojection_jacobians` are taken with respect to
this parameterisation, and any finite-difference check must perturb the
pose the same way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateGeometry, HorizonRay, NonPositiveDepth

# Shortest admissible depth; anything closer counts as "behind the camera".
MIN_DEPTH = 1e-12

# Rays closer to parallel than this cannot triangulate.
PARALLEL_RAY_TOL = 1e-6


def so3_hat(w):
    """Skew-symmetric matrix [w]x such that [w]x @ v == cross(w, v)."""
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(w):
    """Rodrigues rotation exp([w]x) for an axis-angle 3-vector."""
    w = np.asarray(w, dtype=float)
    theta = np.linalg.norm(w)
    K = so3_hat(w)
    if theta < 1e-12:
        # Second-order series keeps the result orthonormal to float precision.
        return np.eye(3) + K + 0.5 * (K @ K)
    s, c = np.sin(theta), np.cos(theta)
    return np.eye(3) + (s / theta) * K + ((1.0 - c) / theta**2) * (K @ K)


def quat_to_rot(q):
    """Rotation matrix from a unit quaternion (w, x, y, z)."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    w, x, y, z = q / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(R):
    """Unit quaternion (w, x, y, z) from a rotation matrix, w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics; no distortion model (inputs are pre-undistorted)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"invalid image size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @property
    def matrix(self):
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, s: float) -> "CameraIntrinsics":
        """Intrinsics for the same camera at resolution scale ``s``.

        Image size is scaled exactly; callers only use s that keeps it
        integral (the ba stage uses 0.5 on even-sized images).
        """
        w, h = self.width * s, self.height * s
        return CameraIntrinsics(self.fx * s, self.fy * s, self.cx * s, self.cy * s,
                                int(round(w)), int(round(h)))


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform: p_cam = rotation @ p_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        err = float(np.abs(R @ R.T - np.eye(3)).max())
        if err > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError(f"rotation not orthonormal (max deviation {err:.2e})")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self):
        """Camera centre in world coordinates."""
        return -self.rotation.T @ self.translation

    def apply(self, points):
        """World points (3,) or (n, 3) to camera coordinates."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse_apply(self, points):
        """Camera points back to world coordinates."""
        p = np.asarray(points, dtype=float)
        return (p - self.translation) @ self.rotation

    def retract(self, w, dt) -> "Pose":
        """Left-multiplicative update: (exp([w]x) @ R, t + dt)."""
        return Pose(so3_exp(w) @ self.rotation, self.translation + np.asarray(dt, dtype=float))

    def inverse(self) -> "Pose":
        """Camera-to-world transform as a Pose."""
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Composition self after other: maps world through ``other`` first."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)


@dataclass
class Frame:
    """One streamed image with calibration and an optional GNSS pose prior."""

    frame_id: int
    timestamp: float
    intrinsics: CameraIntrinsics
    gnss_prior: Pose | None = None
    gnss_sigma: float | None = None
    image_path: str | None = None

    def __post_init__(self):
        if self.gnss_prior is not None and (self.gnss_sigma is None or self.gnss_sigma <= 0):
            raise ValueError(f"frame {self.frame_id}: GNSS prior requires a positive sigma")


def project(points, pose: Pose, intr: CameraIntrinsics):
    """Project world points to pixels.

    Accepts a single (3,) point or an (n, 3) array and returns
    ``(pixels, depths)``: (2,) / (n, 2) pixel coordinates plus the
    camera-frame z of each point.  Raises NonPositiveDepth if any point
    fails the cheirality check; pixels outside the image bounds are the
    caller's concern.
    """
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    pc = pose.apply(p.reshape(-1, 3))
    z = pc[:, 2]
    if np.any(z <= MIN_DEPTH):
        bad = int(np.argmax(z <= MIN_DEPTH))
        raise NonPositiveDepth(f"point at camera z={z[bad]:.6g}")
    uv = np.empty((pc.shape[0], 2))
    uv[:, 0] = intr.fx * pc[:, 0] / z + intr.cx
    uv[:, 1] = intr.fy * pc[:, 1] / z + intr.cy
    return (uv[0], float(z[0])) if single else (uv, z)


def backproject(uv, depth, pose: Pose, intr: CameraIntrinsics):
    """Pixels + camera-frame depths back to world points.

    Inverse of :func:`project` for positive depths: depth scales the ray
    through (u, v) so that camera z equals ``depth``.
    """
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    d = np.asarray(depth, dtype=float).reshape(-1)
    xn = (uv[:, 0] - intr.cx) / intr.fx
    yn = (uv[:, 1] - intr.cy) / intr.fy
    pc = np.stack([xn * d, yn * d, d], axis=1)
    out = pose.inverse_apply(pc)
    return out[0] if np.asarray(depth).ndim == 0 and np.asarray(uv).size == 2 else out


def reprojection_residual(observation, pose: Pose, point, intr: CameraIntrinsics):
    """Residual r = project(point) - observation as a 2-vector (pixels)."""
    uv, _ = project(np.asarray(point, dtype=float), pose, intr)
    return uv - np.asarray(observation, dtype=float)


def reprojection_jacobians(points, pose: Pose, intr: CameraIntrinsics):
    """Analytic Jacobians of the reprojection residual.

    For camera point p = R @ P + t with pixel residual r:

        d r / d p      = [[fx/z, 0, -fx x/z^2], [0, fy/z, -fy y/z^2]]
        d p / d (w,dt) = [-[R @ P]x | I]     (left-multiplicative increment)
        d p / d P      = R

    Args:
        points: (n, 3) world points, all strictly in front of the camera.
        pose: camera pose.
        intr: intrinsics.

    Returns:
        (J_pose, J_point): arrays (n, 2, 6) and (n, 2, 3).  Pose columns are
        ordered rotation increment first, then translation.
    """
    P = np.asarray(points, dtype=float).reshape(-1, 3)
    pc = pose.apply(P)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise NonPositiveDepth("jacobian requested behind the camera")
    n = P.shape[0]
    iz = 1.0 / z
    # d(pixel)/d(camera point)
    Jproj = np.zeros((n, 2, 3))
    Jproj[:, 0, 0] = intr.fx * iz
    Jproj[:, 0, 2] = -intr.fx * x * iz * iz
    Jproj[:, 1, 1] = intr.fy * iz
    Jproj[:, 1, 2] = -intr.fy * y * iz * iz

    u = P @ pose.rotation.T  # R @ P, the rotated point before translation
    hat = np.zeros((n, 3, 3))
    hat[:, 0, 1] = u[:, 2]
    hat[:, 0, 2] = -u[:, 1]
    hat[:, 1, 0] = -u[:, 2]
    hat[:, 1, 2] = u[:, 0]
    hat[:, 2, 0] = u[:, 1]
    hat[:, 2, 1] = -u[:, 0]
    # hat holds -[R@P]x already (signs above are transposed on purpose)
    J_pose = np.empty((n, 2, 6))
    J_pose[:, :, :3] = Jproj @ hat
    J_pose[:, :, 3:] = Jproj
    J_point = Jproj @ pose.rotation
    return J_pose, J_point


def triangulate(observations, poses, intrinsics):
    """Linear (DLT) triangulation of one point from >= 2 views.

    Args:
        observations: (m, 2) pixel coordinates, one row per view.
        poses: matching list of Pose.
        intrinsics: matching list of CameraIntrinsics.

    Returns:
        (3,) world point with strictly positive depth in every view.

    Raises:
        DegenerateGeometry: fewer than two views, (near-)zero baseline,
            rays parallel within PARALLEL_RAY_TOL, or a behind-camera
            solution.
    """
    obs = np.asarray(observations, dtype=float).reshape(-1, 2)
    m = obs.shape[0]
    if m < 2 or len(poses) != m or len(intrinsics) != m:
        raise DegenerateGeometry(f"need >= 2 consistent observations, got {m}")

    centers = np.stack([p.center for p in poses])
    max_base = max(
        np.linalg.norm(centers[i] - centers[j]) for i in range(m) for j in range(i + 1, m)
    )
    if max_base < 1e-12:
        raise DegenerateGeometry("zero baseline between all views")

    rays = np.empty((m, 3))
    for i, (p, K) in enumerate(zip(poses, intrinsics)):
        d = np.array([(obs[i, 0] - K.cx) / K.fx, (obs[i, 1] - K.cy) / K.fy, 1.0])
        rays[i] = p.rotation.T @ (d / np.linalg.norm(d))
    max_angle = 0.0
    for i in range(m):
        for j in range(i + 1, m):
            c = float(np.clip(abs(np.dot(rays[i], rays[j])), -1.0, 1.0))
            max_angle = max(max_angle, np.arccos(c))
    if max_angle < PARALLEL_RAY_TOL:
        raise DegenerateGeometry(f"rays parallel within {max_angle:.2e} rad")

    A = np.empty((2 * m, 4))
    for i, (p, K) in enumerate(zip(poses, intrinsics)):
        P34 = K.matrix @ np.hstack([p.rotation, p.translation.reshape(3, 1)])
        A[2 * i] = obs[i, 0] * P34[2] - P34[0]
        A[2 * i + 1] = obs[i, 1] * P34[2] - P34[1]
    _, _, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-15:
        raise DegenerateGeometry("point at infinity")
    point = X[:3] / X[3]

    for p in poses:
        if p.apply(point)[2] <= MIN_DEPTH:
            raise DegenerateGeometry("triangulated point behind a camera")
    return point


# --- ground footprints -------------------------------------------------------


def polygon_area(vertices) -> float:
    """Shoelace area of a simple 2D polygon (absolute value)."""
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def convex_clip(subject, clip):
    """Sutherland-Hodgman clip of ``subject`` against a convex ``clip`` polygon.

    Both are (n, 2) vertex arrays; the clip polygon may wind either way.
    Returns the intersection polygon as an (m, 2) array (m may be 0).
    """
    clip = np.asarray(clip, dtype=float)
    # Establish a consistent winding so the inside test has a fixed sign.
    if _signed_area(clip) < 0:
        clip = clip[::-1]
    out = [tuple(p) for p in np.asarray(subject, dtype=float)]
    n = len(clip)
    for i in range(n):
        a, b = clip[i], clip[(i + 1) % n]
        if not out:
            break
        edge = (b[0] - a[0], b[1] - a[1])
        inp, out = out, []
        prev = inp[-1]
        prev_in = _inside(prev, a, edge)
        for cur in inp:
            cur_in = _inside(cur, a, edge)
            if cur_in != prev_in:
                out.append(_edge_intersect(prev, cur, a, b))
            if cur_in:
                out.append(cur)
            prev, prev_in = cur, cur_in
    return np.array(out).reshape(-1, 2)


def _signed_area(v):
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def _inside(p, a, edge):
    return edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0]) >= 0.0


def _edge_intersect(p, q, a, b):
    # Line through a-b intersected with segment p-q.
    d1 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
    d2 = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
    t = d1 / (d1 - d2)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def footprint(frame: Frame, ground_elevation: float = 0.0, pose: Pose | None = None):
    """Ground footprint of a frame on the plane z = ground_elevation.

    Projects rays through the four image corners (0,0), (w,0), (w,h), (0,h)
    onto the horizontal plane.  Uses ``pose`` when given, else the frame's
    GNSS prior.

    Returns:
        (4, 2) array of world xy vertices, ordered like the corners.

    Raises:
        MissingPrior: no pose available.
        HorizonRay: a corner ray misses the plane in front of the camera.
    """
    from .errors import MissingPrior

    if pose is None:
        pose = frame.gnss_prior
    if pose is None:
        raise MissingPrior(f"frame {frame.frame_id} has no GNSS prior")
    K = frame.intrinsics
    C = pose.center
    corners = np.array([[0, 0], [K.width, 0], [K.width, K.height], [0, K.height]], dtype=float)
    verts = np.empty((4, 2))
    for i, (u, v) in enumerate(corners):
        d_cam = np.array([(u - K.cx) / K.fx, (v - K.cy) / K.fy, 1.0])
        d = pose.rotation.T @ d_cam
        if abs(d[2]) < 1e-15:
            raise HorizonRay(f"corner {i} parallel to ground")
        s = (ground_elevation - C[2]) / d[2]
        if s <= 0:
            raise HorizonRay(f"corner {i} hits the plane behind the camera")
        verts[i] = C[:2] + s * d[:2]
    return verts


def overlap_ratio(poly_a, poly_b) -> float:
    """area(a intersect b) / area(a) for convex ground polygons."""
    area_a = polygon_area(poly_a)
    if area_a == 0.0:
        return 0.0
    inter = convex_clip(poly_a, poly_b)
    if len(inter) < 3:
        return 0.0
    return polygon_area(inter) / area_a
