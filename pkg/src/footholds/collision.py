"""Self- and ground-collision predicates over capsule and box primitives.

Each leg contributes two capsules, thigh and shank.  The shank capsule stops
``shank_radius`` short of the foot center so the ball around the foot is not
part of the collision geometry; foot-terrain contact is handled by the foothold
evaluation itself, not here.  The torso is a yaw-aligned box.  Collision means
strict penetration: touching surfaces do not collide.

Ground contact is tested against cell-top center points of the elevation grid
that fall inside a capsule's horizontal footprint.  A capsule entering a tall
cell column strictly below its top surface is not seen by this test; at 2 cm
cells the supersampling error stays below the acceptance thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kinematics import JointAngles, LegModel, fk_joints
from .terrain import ElevationMap, sincos

_EPS = 1e-12


@dataclass
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.shape != (3,) or self.b.shape != (3,):
            raise ValueError("capsule endpoints must be 3-vectors")
        if not self.radius > 0:
            raise ValueError("capsule radius must be positive")


@dataclass
class BodyBox:
    """Torso box; center is in the robot base frame, yaw relative to base."""

    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    half_extents: tuple[float, float, float] = (0.28, 0.16, 0.07)
    yaw: float = 0.0

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise ValueError("half extents must be positive")


@dataclass
class RobotPose:
    """Base placement plus joint angles for all four legs, keyed by leg name."""

    base_xyz: tuple[float, float, float]
    base_yaw: float
    joint_angles: dict[str, JointAngles] = field(default_factory=dict)


def default_body_box() -> BodyBox:
    return BodyBox()


# ---------------------------------------------------------------------------
# Distance kernels

def _dot(u, v):
    return np.sum(u * v, axis=-1)


def segment_segment_distance_many(p1, q1, p2, q2) -> np.ndarray:
    """Distance between segments [p1,q1] and [p2,q2]; broadcasts over (..., 3).

    Clamped closest-point parameterization; degenerate segments fall back to
    point distances.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    q1 = np.asarray(q1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    q2 = np.asarray(q2, dtype=np.float64)
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = _dot(d1, d1)
    e = _dot(d2, d2)
    f = _dot(d2, r)
    c = _dot(d1, r)
    b = _dot(d1, d2)
    denom = a * e - b * b

    a_deg = a <= _EPS
    e_deg = e <= _EPS
    safe_a = np.where(a_deg, 1.0, a)
    safe_e = np.where(e_deg, 1.0, e)
    safe_denom = np.where(denom > _EPS, denom, 1.0)

    # general case: solve for s on segment 1, derive t, clamp, re-solve s
    s = np.where(denom > _EPS,
                 np.clip((b * f - c * e) / safe_denom, 0.0, 1.0), 0.0)
    t = (b * s + f) / safe_e
    s = np.where(t < 0.0, np.clip(-c / safe_a, 0.0, 1.0),
                 np.where(t > 1.0, np.clip((b - c) / safe_a, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)

    # degenerate segments collapse to point-segment cases
    s = np.where(e_deg & ~a_deg, np.clip(-c / safe_a, 0.0, 1.0), s)
    t = np.where(a_deg & ~e_deg, np.clip(f / safe_e, 0.0, 1.0), t)
    s = np.where(a_deg, 0.0, s)
    t = np.where(e_deg, 0.0, t)

    closest1 = p1 + s[..., None] * d1
    closest2 = p2 + t[..., None] * d2
    return np.linalg.norm(closest1 - closest2, axis=-1)


def point_segment_distance_many(a, b, pts) -> np.ndarray:
    """Distances from points (..., 3) to segments [a, b] (..., 3), broadcast."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    d = b - a
    L2 = _dot(d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(L2 > _EPS, np.clip(_dot(pts - a, d) / np.where(L2 > _EPS, L2, 1.0),
                                        0.0, 1.0), 0.0)
    closest = a + t[..., None] * d
    return np.linalg.norm(pts - closest, axis=-1)


def segment_distance(c1: Capsule, c2: Capsule) -> float:
    """Surface distance between two capsules; negative means penetration.

    Arguments are ordered canonically before evaluation so both call orders
    run the identical float expression.
    """
    k1 = (*c1.a, *c1.b)
    k2 = (*c2.a, *c2.b)
    if k2 < k1:
        c1, c2 = c2, c1
    d = segment_segment_distance_many(c1.a, c1.b, c2.a, c2.b)
    return float(d) - c1.radius - c2.radius


def _box_frame(box: BodyBox, base_xyz, base_yaw):
    """World-to-box rotation angle and box center in world."""
    cy, sy = sincos(base_yaw)
    cx, cyc, czc = box.center
    center_w = np.array([base_xyz[0] + cx * cy - cyc * sy,
                         base_xyz[1] + cx * sy + cyc * cy,
                         base_xyz[2] + czc])
    return base_yaw + box.yaw, center_w


def point_box_distance_many(pts, box: BodyBox, base_xyz=(0.0, 0.0, 0.0),
                            base_yaw: float = 0.0) -> np.ndarray:
    """Distance from points (..., 3) to the box surface; 0 inside."""
    ang, center = _box_frame(box, base_xyz, base_yaw)
    p = np.asarray(pts, dtype=np.float64) - center
    c, s = sincos(ang)
    local = np.stack([p[..., 0] * c + p[..., 1] * s,
                      -p[..., 0] * s + p[..., 1] * c,
                      p[..., 2]], axis=-1)
    excess = np.maximum(np.abs(local) - np.asarray(box.half_extents), 0.0)
    return np.linalg.norm(excess, axis=-1)


def segment_box_distance_many(a, b, box: BodyBox, base_xyz=(0.0, 0.0, 0.0),
                              base_yaw: float = 0.0, iters: int = 80) -> np.ndarray:
    """Min distance from segments (N, 3) to the box, by ternary search.

    Point-to-box distance along a segment is convex, so the search converges
    to the global minimum.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    lo = np.zeros(a.shape[0])
    hi = np.ones(a.shape[0])
    for _ in range(iters):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        d1 = point_box_distance_many(a + m1[:, None] * (b - a), box, base_xyz, base_yaw)
        d2 = point_box_distance_many(a + m2[:, None] * (b - a), box, base_xyz, base_yaw)
        take1 = d1 <= d2
        hi = np.where(take1, m2, hi)
        lo = np.where(take1, lo, m1)
    mid = 0.5 * (lo + hi)
    return point_box_distance_many(a + mid[:, None] * (b - a), box, base_xyz, base_yaw)


# ---------------------------------------------------------------------------
# Robot geometry

def leg_to_world(leg: LegModel, p_leg, base_xyz, base_yaw: float) -> np.ndarray:
    """Map leg-frame points (..., 3) to world coordinates."""
    p = np.asarray(p_leg, dtype=np.float64)
    cm, sm = sincos(leg.mount_yaw)
    x = p[..., 0] * cm - p[..., 1] * sm + leg.mount_xyz[0]
    y = p[..., 0] * sm + p[..., 1] * cm + leg.mount_xyz[1]
    z = p[..., 2] + leg.mount_xyz[2]
    cb, sb = sincos(base_yaw)
    return np.stack([x * cb - y * sb + base_xyz[0],
                     x * sb + y * cb + base_xyz[1],
                     z + base_xyz[2]], axis=-1)


def world_to_leg(leg: LegModel, p_world, base_xyz, base_yaw: float) -> np.ndarray:
    """Inverse of leg_to_world for points (..., 3)."""
    p = np.asarray(p_world, dtype=np.float64)
    cb, sb = sincos(base_yaw)
    x = p[..., 0] - base_xyz[0]
    y = p[..., 1] - base_xyz[1]
    z = p[..., 2] - base_xyz[2]
    xb = x * cb + y * sb - leg.mount_xyz[0]
    yb = -x * sb + y * cb - leg.mount_xyz[1]
    cm, sm = sincos(leg.mount_yaw)
    return np.stack([xb * cm + yb * sm,
                     -xb * sm + yb * cm,
                     z - leg.mount_xyz[2]], axis=-1)


def build_leg_capsules(leg: LegModel, q, base_xyz=(0.0, 0.0, 0.0),
                       base_yaw: float = 0.0) -> tuple[Capsule, Capsule]:
    """Thigh and shank capsules in the world frame.

    The shank endpoint retreats from the foot center by shank_radius, leaving
    the foot ball out of the collision geometry.
    """
    _, hip, knee, foot = fk_joints(leg, q)
    L = np.linalg.norm(foot - knee)
    if L > leg.shank_radius + _EPS:
        tip = foot + (knee - foot) * (leg.shank_radius / L)
    else:
        tip = knee.copy()
    hip_w = leg_to_world(leg, hip, base_xyz, base_yaw)
    knee_w = leg_to_world(leg, knee, base_xyz, base_yaw)
    tip_w = leg_to_world(leg, tip, base_xyz, base_yaw)
    return (Capsule(hip_w, knee_w, leg.thigh_radius),
            Capsule(knee_w, tip_w, leg.shank_radius))


def self_collision(pose: RobotPose, legs: dict[str, LegModel], swing_leg: str,
                   body: BodyBox | None = None) -> bool:
    """True iff the swing leg's capsules penetrate the torso or another leg."""
    if body is None:
        body = default_body_box()
    swing = build_leg_capsules(legs[swing_leg], pose.joint_angles[swing_leg],
                               pose.base_xyz, pose.base_yaw)
    for cap in swing:
        d = segment_box_distance_many(cap.a[None], cap.b[None], body,
                                      pose.base_xyz, pose.base_yaw)[0]
        if d - cap.radius < 0.0:
            return True
    for name, leg in legs.items():
        if name == swing_leg:
            continue
        for other in build_leg_capsules(leg, pose.joint_angles[name],
                                        pose.base_xyz, pose.base_yaw):
            for cap in swing:
                if segment_distance(cap, other) < 0.0:
                    return True
    return False


def _capsule_hits_cells(cap: Capsule, emap: ElevationMap) -> bool:
    lo = np.minimum(cap.a, cap.b) - cap.radius
    hi = np.maximum(cap.a, cap.b) + cap.radius
    ix0, iy0 = emap.cell_index(lo[0], lo[1])
    ix1, iy1 = emap.cell_index(hi[0], hi[1])
    ix0, ix1 = max(ix0, 0), min(ix1, emap.width - 1)
    iy0, iy1 = max(iy0, 0), min(iy1, emap.height - 1)
    if ix0 > ix1 or iy0 > iy1:
        return False
    ix = np.arange(ix0, ix1 + 1)
    iy = np.arange(iy0, iy1 + 1)
    gx, gy = np.meshgrid(ix, iy, indexing="ij")
    k = emap.known[gy, gx]
    if not k.any():
        return False
    xs = emap.origin_xy[0] + gx[k] * emap.cell_size
    ys = emap.origin_xy[1] + gy[k] * emap.cell_size
    zs = emap.heights[gy, gx][k]
    pts = np.stack([xs, ys, zs], axis=-1)
    d = point_segment_distance_many(cap.a, cap.b, pts)
    return bool(np.any(d < cap.radius))


def ground_collision(pose: RobotPose, leg: LegModel, q,
                     emap: ElevationMap) -> bool:
    """True iff thigh or shank penetrates the terrain's cell-top points."""
    for cap in build_leg_capsules(leg, q, pose.base_xyz, pose.base_yaw):
        if _capsule_hits_cells(cap, emap):
            return True
    return False
