"""Rigid poses, their Euler / quaternion / anchor-triplet encodings and pose errors.

Conventions
-----------
* Euler angles compose as ``R = Rz(gamma) @ Ry(beta) @ Rx(alpha)``.
* Quaternions are scalar-first ``(q1, q2, q3, q4) = (w, x, y, z)`` with ``q1 >= 0``.
* A slice plane with pose ``(R, t)`` maps in-plane coordinates ``(u, w, 0)``
  to world ``t + R @ (u, w, 0)``.  In-stack planes have ``t = R @ (0, 0, z)``.
* Anchor labels: ``p_c = t``, ``p_l = t + R @ (-L/2, -L/2, 0)``,
  ``p_r = t + R @ (L/2, -L/2, 0)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DegenerateGeometryError",
    "RigidPose",
    "EulerPose",
    "QuaternionPose",
    "AnchorTriplet",
    "euler_matrix",
    "euler_to_rotation",
    "rotation_to_euler",
    "quat_to_rotation",
    "rotation_to_quat",
    "axis_angle_matrix",
    "shortest_arc",
    "random_rotation",
    "calculate_rotation",
    "anchors_from_pose",
    "pose_from_anchors",
    "anchor_error",
    "rotation_angle",
    "pose_error_decomposed",
]

ORTHO_TOL = 1e-9


class DegenerateGeometryError(ValueError):
    """Anchor points are collinear or coincident."""


def _wrap(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    return -math.pi if w >= math.pi else w


@dataclass(frozen=True, eq=False)
class RigidPose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
            raise ValueError("rotation must be orthonormal with det +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def in_stack(cls, rotation, z: float) -> "RigidPose":
        R = np.asarray(rotation, dtype=np.float64)
        return cls(R, R @ np.array([0.0, 0.0, z]))

    @property
    def z_offset(self) -> float:
        """Offset of the plane along its own normal."""
        return float(self.rotation[:, 2] @ self.translation)

    @property
    def normal(self) -> np.ndarray:
        return self.rotation[:, 2].copy()

    def compose(self, rotation=None, translation=None) -> "RigidPose":
        """Rotate about the plane centre by a local rotation, then shift in world."""
        R = self.rotation if rotation is None else self.rotation @ np.asarray(rotation)
        t = self.translation if translation is None else self.translation + np.asarray(translation)
        return RigidPose(_reorthonormalize(R), t)

    def to_json(self) -> dict:
        return {
            "R": [float(x) for x in self.rotation.ravel()],
            "t": [float(x) for x in self.translation],
            "z_offset_mm": self.z_offset,
        }

    @classmethod
    def from_json(cls, d: dict) -> "RigidPose":
        return cls(np.array(d["R"], dtype=np.float64).reshape(3, 3), np.array(d["t"], dtype=np.float64))


@dataclass(frozen=True)
class EulerPose:
    rx: float
    ry: float
    rz: float
    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0

    def __post_init__(self):
        if not (-math.pi <= self.rx < math.pi and -math.pi <= self.rz < math.pi):
            raise ValueError("alpha and gamma must lie in [-pi, pi)")
        # beta = +pi/2 only occurs as the gimbal-lock representative
        if not -math.pi / 2 <= self.ry <= math.pi / 2:
            raise ValueError("beta must lie in [-pi/2, pi/2]")

    @property
    def angles(self) -> np.ndarray:
        return np.array([self.rx, self.ry, self.rz])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])


@dataclass(frozen=True, eq=False)
class QuaternionPose:
    q: np.ndarray
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > 1e-9:
            raise ValueError("quaternion must have unit norm")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.array(self.t, dtype=np.float64).reshape(3))


@dataclass(frozen=True, eq=False)
class AnchorTriplet:
    pc: np.ndarray
    pl: np.ndarray
    pr: np.ndarray

    def __post_init__(self):
        for name in ("pc", "pl", "pr"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64).reshape(3))

    def as_array(self) -> np.ndarray:
        """(3, 3) array with rows ``pc, pl, pr``."""
        return np.stack([self.pc, self.pl, self.pr])

    @classmethod
    def from_array(cls, a) -> "AnchorTriplet":
        a = np.asarray(a, dtype=np.float64).reshape(3, 3)
        return cls(a[0], a[1], a[2])

    def transformed(self, rotation, translation) -> "AnchorTriplet":
        R = np.asarray(rotation)
        t = np.asarray(translation)
        return AnchorTriplet.from_array(self.as_array() @ R.T + t)

    def to_json(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)] for k in ("pc", "pl", "pr")}

    @classmethod
    def from_json(cls, d: dict) -> "AnchorTriplet":
        return cls(d["pc"], d["pl"], d["pr"])


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def euler_matrix(alpha: float, beta: float, gamma: float) -> np.ndarray:
    ca, sa = math.cos(alpha), math.sin(alpha)
    cb, sb = math.cos(beta), math.sin(beta)
    cg, sg = math.cos(gamma), math.sin(gamma)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rz @ ry @ rx


def euler_to_rotation(e: EulerPose) -> RigidPose:
    return RigidPose(euler_matrix(e.rx, e.ry, e.rz), e.translation)


def rotation_to_euler(R, translation=(0.0, 0.0, 0.0)) -> EulerPose:
    """Inverse of :func:`euler_matrix`; at gimbal lock alpha is set to 0."""
    R = np.asarray(R, dtype=np.float64)
    beta = math.atan2(-R[2, 0], math.hypot(R[2, 1], R[2, 2]))
    if math.hypot(R[2, 1], R[2, 2]) < 1e-12:
        alpha = 0.0
        if R[2, 0] < 0:  # beta = +pi/2
            beta = math.pi / 2
            gamma = math.atan2(-R[0, 1], R[1, 1])
        else:
            beta = -math.pi / 2
            gamma = math.atan2(-R[0, 1], R[1, 1])
    else:
        alpha = math.atan2(R[2, 1], R[2, 2])
        gamma = math.atan2(R[1, 0], R[0, 0])
    t = np.asarray(translation, dtype=np.float64)
    return EulerPose(_wrap(alpha), beta, _wrap(gamma), *map(float, t))


def quat_to_rotation(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quat(R) -> np.ndarray:
    """Shepperd's method; sign fixed so that ``q1 >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    nz = np.flatnonzero(np.abs(q) > 1e-15)
    if q[0] < 0 or (q[0] == 0 and q[nz[0]] < 0):
        q = -q
    return q


def axis_angle_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a (not necessarily unit) axis."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * (K @ K)


def shortest_arc(normal) -> np.ndarray:
    """Minimal rotation taking (0, 0, 1) onto ``normal``.

    The antipodal case uses a 180 degree turn about the x-axis.
    """
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    c = n[2]
    if c <= -1.0 + 1e-15:
        return np.diag([1.0, -1.0, -1.0])
    # R = I + [v]x + [v]x^2 / (1 + c) with v = z x n
    v = np.array([-n[1], n[0], 0.0])
    K = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + K + (K @ K) / (1.0 + c)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalised Gaussian quaternion."""
    q = rng.normal(size=4)
    return quat_to_rotation(q / np.linalg.norm(q))


def calculate_rotation(p1, p2, p3) -> np.ndarray:
    """Frame spanned by three points: x along ``p3 - p1``, z along ``(p3-p1) x (p2-p1)``.

    Always orthonormal with det +1, also for noisy (non-isosceles) points.
    """
    p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3))
    v1 = p3 - p1
    v2 = p2 - p1
    n1 = np.cross(v1, v2)
    nv1, nv2, nn1 = np.linalg.norm(v1), np.linalg.norm(v2), np.linalg.norm(n1)
    if nn1 <= 1e-9 * nv1 * nv2:
        raise DegenerateGeometryError("anchor points are collinear or coincident")
    n2 = np.cross(n1, v1)
    return np.column_stack([v1 / nv1, n2 / np.linalg.norm(n2), n1 / nn1])


def _canonical_anchor_frame() -> np.ndarray:
    # frame that calculate_rotation assigns to the label triplet of the identity pose
    return calculate_rotation([0, 0, 0], [-1, -1, 0], [1, -1, 0])


_CANONICAL_FRAME = _canonical_anchor_frame()


def anchors_from_pose(pose: RigidPose, L: float) -> AnchorTriplet:
    """Anchor triplet of a square plane of side ``L`` mm."""
    R = pose.rotation
    t = pose.translation
    h = 0.5 * L
    return AnchorTriplet(t.copy(), t + R @ np.array([-h, -h, 0.0]), t + R @ np.array([h, -h, 0.0]))


def pose_from_anchors(a: AnchorTriplet) -> RigidPose:
    """Recover the plane pose; ``p_c`` is the origin of the plane.

    The three-point frame of the label triplet differs from the plane frame
    by a constant rotation, which is removed so label round trips are exact.
    """
    frame = calculate_rotation(a.pc, a.pl, a.pr)
    R = _reorthonormalize(frame @ _CANONICAL_FRAME.T)
    return RigidPose(R, a.pc.copy())


def anchor_error(gt: AnchorTriplet, pred: AnchorTriplet) -> float:
    return float(
        (np.linalg.norm(gt.pc - pred.pc) + np.linalg.norm(gt.pl - pred.pl) + np.linalg.norm(gt.pr - pred.pr))
        / 3.0
    )


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    R = np.asarray(R, dtype=np.float64)
    c = 0.5 * (np.trace(R) - 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return math.atan2(s, c)


def pose_error_decomposed(gt: RigidPose, pred: RigidPose) -> tuple[float, float]:
    """(translation error in mm, rotation error in degrees)."""
    dt = float(np.linalg.norm(gt.translation - pred.translation))
    return dt, math.degrees(rotation_angle(gt.rotation.T @ pred.rotation))
