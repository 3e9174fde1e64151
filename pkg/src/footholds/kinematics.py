"""Closed-form kinematics for a 3-DOF quadruped leg.

The leg-base frame L sits at the hip ab/adduction axis: x forward, y to the
robot's left, z up.  q1 rolls the whole leg about x, then an offset l0 runs
laterally to the hip flexion joint; q2 and q3 pitch thigh (l1) and shank (l2)
in the rotated sagittal plane.  At q = (0, 0, 0) the foot hangs straight down,
p = (0, s*l0, -(l1+l2)) with s = +1 for a left leg and -1 for a right leg.

Right legs are evaluated through the left-side formulas on the y-mirrored
point with q1 negated.  Both maps are exact sign flips in floating point, so
mirrored legs produce bit-identical mirrored results.

Foot positions are plain (3,) float arrays in the leg-base frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

# IK acceptance slack at the workspace boundary (|cos q3| and the hip-circle
# radicand); keeps points on the reach sphere inside the workspace.
_BOUNDARY_EPS = 1e-12


class UnreachableError(ValueError):
    """Requested foot position has no limit-respecting IK solution."""


class JointAngles(NamedTuple):
    """Hip ab/adduction, hip flexion, knee angle (rad).  Tuple-compatible."""

    q1: float
    q2: float
    q3: float


@dataclass(frozen=True)
class LegModel:
    """Geometry, joint limits and collision radii of one leg."""

    name: str = "LF"
    side: str = "left"              # left | right
    role: str = "front"             # front | rear
    mount_xyz: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mount_yaw: float = 0.0
    l0: float = 0.10                # hip lateral offset, m
    l1: float = 0.25                # thigh, m
    l2: float = 0.33                # shank, m
    joint_limits: tuple[tuple[float, float], ...] = (
        (-0.6, 0.6), (-1.6, 1.6), (-2.6, -0.3))
    foot_radius: float = 0.02
    thigh_radius: float = 0.04
    shank_radius: float = 0.04

    def __post_init__(self):
        if self.side not in ("left", "right"):
            raise ValueError(f"side must be left or right, got {self.side!r}")
        if self.role not in ("front", "rear"):
            raise ValueError(f"role must be front or rear, got {self.role!r}")
        if min(self.l0, self.l1, self.l2) <= 0:
            raise ValueError("link lengths must be positive")
        if len(self.joint_limits) != 3 or any(hi < lo for lo, hi in self.joint_limits):
            raise ValueError("joint_limits must be three non-empty intervals")
        if min(self.foot_radius, self.thigh_radius, self.shank_radius) <= 0:
            raise ValueError("radii must be positive")

    @property
    def is_left(self) -> bool:
        return self.side == "left"

    @property
    def reach(self) -> float:
        """Radius of the sphere bounding the workspace (from the leg origin)."""
        return math.hypot(self.l0, self.l1 + self.l2)

    def mirrored(self) -> "LegModel":
        """Twin leg on the other side; q1 limits flip with the geometry."""
        lo, hi = self.joint_limits[0]
        return replace(
            self,
            side="right" if self.is_left else "left",
            mount_xyz=(self.mount_xyz[0], -self.mount_xyz[1], self.mount_xyz[2]),
            mount_yaw=-self.mount_yaw,
            joint_limits=((-hi, -lo),) + tuple(self.joint_limits[1:]),
        )


def default_legs() -> dict[str, LegModel]:
    """Four-leg set around a torso-centered base frame."""
    lf = LegModel(name="LF", side="left", role="front", mount_xyz=(0.30, 0.15, 0.0))
    lh = replace(lf, name="LH", role="rear", mount_xyz=(-0.30, 0.15, 0.0))
    return {
        "LF": lf,
        "RF": replace(lf.mirrored(), name="RF"),
        "LH": lh,
        "RH": replace(lh.mirrored(), name="RH"),
    }


def _wrap_pi(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def _canon_q1(leg: LegModel, q1):
    return q1 if leg.is_left else -q1


def _canon_limits(leg: LegModel):
    (a, b), lim2, lim3 = leg.joint_limits
    if leg.is_left:
        return (a, b), lim2, lim3
    return (-b, -a), lim2, lim3


def _canon_points(leg: LegModel, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    if leg.is_left:
        return pts
    out = pts.copy()
    out[..., 1] = -out[..., 1]
    return out


def forward_kinematics(leg: LegModel, q) -> np.ndarray:
    """Foot center position for joint angles q = (q1, q2, q3), leg frame."""
    q1, q2, q3 = (float(v) for v in q)
    q1c = _canon_q1(leg, q1)
    r = leg.l1 * math.sin(q2) + leg.l2 * math.sin(q2 + q3)
    d = leg.l1 * math.cos(q2) + leg.l2 * math.cos(q2 + q3)
    c1, s1 = math.cos(q1c), math.sin(q1c)
    y = leg.l0 * c1 + d * s1
    z = leg.l0 * s1 - d * c1
    if not leg.is_left:
        y = -y
    return np.array([r, y, z])


def fk_joints(leg: LegModel, q) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Positions of (leg origin, hip flexion joint, knee, foot) in the leg frame."""
    q1, q2, q3 = (float(v) for v in q)
    q1c = _canon_q1(leg, q1)
    c1, s1 = math.cos(q1c), math.sin(q1c)

    def place(r, d):
        y = leg.l0 * c1 + d * s1
        z = leg.l0 * s1 - d * c1
        return np.array([r, -y if not leg.is_left else y, z])

    origin = np.zeros(3)
    hip = place(0.0, 0.0)
    knee = place(leg.l1 * math.sin(q2), leg.l1 * math.cos(q2))
    foot = place(leg.l1 * math.sin(q2) + leg.l2 * math.sin(q2 + q3),
                 leg.l1 * math.cos(q2) + leg.l2 * math.cos(q2 + q3))
    return origin, hip, knee, foot


def _ik_canonical(l0, l1, l2, limits, x, y, z):
    """Vectorized left-side IK.

    Returns (ok, q1, q2, q3) over broadcast inputs.  The knee is always flexed
    backward (sin q3 <= 0).  The hip circle has two intersections with the
    sagittal plane; the D >= 0 one is preferred, the other is kept as a
    fallback so every limit-respecting configuration stays reachable.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    (q1l, q1h), (q2l, q2h), (q3l, q3h) = limits

    d2 = y * y + z * z - l0 * l0
    ok_d = d2 >= -_BOUNDARY_EPS
    D = np.sqrt(np.maximum(d2, 0.0))

    r2 = x * x + D * D
    c3 = (r2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2)
    ok_c3 = np.abs(c3) <= 1.0 + _BOUNDARY_EPS
    c3c = np.clip(c3, -1.0, 1.0)
    s3 = -np.sqrt(1.0 - c3c * c3c)
    q3 = np.arctan2(s3, c3c)
    ok_q3 = (q3 >= q3l) & (q3 <= q3h)
    base_ok = ok_d & ok_c3 & ok_q3

    ang_yz = np.arctan2(z, y)
    ang_knee = np.arctan2(l2 * s3, l1 + l2 * c3c)

    q1 = np.zeros(np.broadcast(x, y, z).shape)
    q2 = np.zeros_like(q1)
    ok = np.zeros_like(q1, dtype=bool)
    for sign in (1.0, -1.0):
        Db = sign * D
        q1b = _wrap_pi(ang_yz - np.arctan2(-Db, l0))
        q2b = _wrap_pi(np.arctan2(x, Db) - ang_knee)
        okb = (base_ok & (q1b >= q1l) & (q1b <= q1h)
               & (q2b >= q2l) & (q2b <= q2h))
        take = okb & ~ok
        q1 = np.where(take, q1b, q1)
        q2 = np.where(take, q2b, q2)
        ok = ok | okb
    return ok, q1, q2, np.broadcast_to(q3, q1.shape)


def inverse_kinematics(leg: LegModel, p) -> JointAngles:
    """Joint angles reaching foot position p; raises UnreachableError."""
    pc = _canon_points(leg, np.asarray(p, dtype=np.float64))
    ok, q1, q2, q3 = _ik_canonical(leg.l0, leg.l1, leg.l2, _canon_limits(leg),
                                   pc[0], pc[1], pc[2])
    if not ok:
        raise UnreachableError(f"foot position {np.asarray(p)} outside workspace")
    q1v = float(q1)
    if not leg.is_left:
        q1v = -q1v
    return JointAngles(q1v, float(q2), float(q3))


def inverse_kinematics_many(leg: LegModel, pts) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized IK over (..., 3) foot positions.

    Returns (ok, q) with q of shape (..., 3); rows with ok False hold zeros.
    """
    pc = _canon_points(leg, pts)
    ok, q1, q2, q3 = _ik_canonical(leg.l0, leg.l1, leg.l2, _canon_limits(leg),
                                   pc[..., 0], pc[..., 1], pc[..., 2])
    if not leg.is_left:
        q1 = -q1
    q = np.stack([np.where(ok, q1, 0.0), np.where(ok, q2, 0.0),
                  np.where(ok, q3, 0.0)], axis=-1)
    return ok, q


def fk_joints_many(leg: LegModel, q) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hip, knee and foot positions for (..., 3) joint angle rows, leg frame."""
    q = np.asarray(q, dtype=np.float64)
    q1 = q[..., 0] if leg.is_left else -q[..., 0]
    q2, q3 = q[..., 1], q[..., 2]
    c1, s1 = np.cos(q1), np.sin(q1)
    side = 1.0 if leg.is_left else -1.0

    def place(r, d):
        y = leg.l0 * c1 + d * s1
        z = leg.l0 * s1 - d * c1
        return np.stack([r, side * y, z], axis=-1)

    hip = place(np.zeros_like(q1), np.zeros_like(q1))
    knee = place(leg.l1 * np.sin(q2), leg.l1 * np.cos(q2))
    foot = place(leg.l1 * np.sin(q2) + leg.l2 * np.sin(q2 + q3),
                 leg.l1 * np.cos(q2) + leg.l2 * np.cos(q2 + q3))
    return hip, knee, foot


def in_workspace(leg: LegModel, p) -> bool:
    return bool(in_workspace_many(leg, np.asarray(p, dtype=np.float64)[None])[0])


def in_workspace_many(leg: LegModel, pts) -> np.ndarray:
    """Vectorized workspace membership for an (..., 3) array of points."""
    pc = _canon_points(leg, pts)
    ok, _, _, _ = _ik_canonical(leg.l0, leg.l1, leg.l2, _canon_limits(leg),
                                pc[..., 0], pc[..., 1], pc[..., 2])
    return ok


def icosphere_directions() -> np.ndarray:
    """42 unit ray directions: icosahedron vertices plus edge midpoints."""
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = []
    for a in (-1.0, 1.0):
        for b in (-phi, phi):
            verts += [(0.0, a, b), (a, b, 0.0), (b, 0.0, a)]
    verts = np.array(verts)
    dists = np.linalg.norm(verts[:, None] - verts[None, :], axis=-1)
    mids = []
    for i in range(len(verts)):
        for j in range(i + 1, len(verts)):
            if abs(dists[i, j] - 2.0) < 1e-6:
                mids.append(0.5 * (verts[i] + verts[j]))
    pts = np.vstack([verts, np.array(mids)])
    assert pts.shape == (42, 3)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def kinematic_margin_many(leg: LegModel, pts, step: float = 0.005,
                          tol: float = 0.0005, max_distance: float | None = None,
                          directions: np.ndarray | None = None) -> np.ndarray:
    """Directional distance to the workspace boundary for (N, 3) points.

    For each point the rays of ``directions`` are marched outward in ``step``
    increments until membership fails, then the exit is bisected down to
    ``tol``; the margin is the minimum over rays of the last inside distance.
    Rays still inside at ``max_distance`` contribute exactly that cap.
    Points outside the workspace get NaN.
    """
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("pts must be (N, 3)")
    pc = _canon_points(leg, pts)
    dirs = icosphere_directions() if directions is None else np.asarray(directions)
    limits = _canon_limits(leg)
    geom = (leg.l0, leg.l1, leg.l2)

    def inside(flat_pts):
        ok, _, _, _ = _ik_canonical(*geom, limits,
                                    flat_pts[:, 0], flat_pts[:, 1], flat_pts[:, 2])
        return ok

    n, k = pts.shape[0], dirs.shape[0]
    feasible = inside(pc)
    cap = 2.0 * leg.reach if max_distance is None else float(max_distance)

    # Per-ray state: last inside distance, first outside distance (nan = none).
    lo = np.zeros((n, k))
    hi = np.full((n, k), np.nan)
    marching = np.broadcast_to(feasible[:, None], (n, k)).copy()
    t = 0.0
    while t < cap and marching.any():
        t = min(t + step, cap)
        idx = np.nonzero(marching)
        probes = pc[idx[0]] + t * dirs[idx[1]]
        ok = inside(probes)
        lo[idx[0][ok], idx[1][ok]] = t
        hi[idx[0][~ok], idx[1][~ok]] = t
        marching[idx[0][~ok], idx[1][~ok]] = False

    # Bisect rays that actually exited; capped rays keep lo = cap.
    refine = np.isfinite(hi)
    n_iter = max(1, math.ceil(math.log2(step / tol)))
    for _ in range(n_iter):
        idx = np.nonzero(refine)
        if idx[0].size == 0:
            break
        mid = 0.5 * (lo[idx] + hi[idx])
        probes = pc[idx[0]] + mid[:, None] * dirs[idx[1]]
        ok = inside(probes)
        lo[idx[0][ok], idx[1][ok]] = mid[ok]
        hi[idx[0][~ok], idx[1][~ok]] = mid[~ok]

    margins = lo.min(axis=1)
    margins[~feasible] = np.nan
    return margins


def kinematic_margin(leg: LegModel, p, step: float = 0.005, tol: float = 0.0005,
                     max_distance: float | None = None) -> float:
    """Scalar kinematic margin of one foot position; raises if unreachable."""
    m = kinematic_margin_many(leg, np.asarray(p, dtype=np.float64)[None],
                              step=step, tol=tol, max_distance=max_distance)[0]
    if math.isnan(m):
        raise UnreachableError(f"foot position {np.asarray(p)} outside workspace")
    return float(m)


# ---------------------------------------------------------------------------
# Leg configuration files: one leg per file, whitespace-separated key/values.

def save_leg_config(leg: LegModel, path) -> None:
    (q1l, q1h), (q2l, q2h), (q3l, q3h) = leg.joint_limits
    lines = [
        f"leg {leg.name}",
        f"side {leg.side}",
        f"role {leg.role}",
        "mount %.17g %.17g %.17g %.17g" % (*leg.mount_xyz, leg.mount_yaw),
        "l0 %.17g" % leg.l0,
        "l1 %.17g" % leg.l1,
        "l2 %.17g" % leg.l2,
        "q1 %.17g %.17g" % (q1l, q1h),
        "q2 %.17g %.17g" % (q2l, q2h),
        "q3 %.17g %.17g" % (q3l, q3h),
        "foot_radius %.17g" % leg.foot_radius,
        "thigh_radius %.17g" % leg.thigh_radius,
        "shank_radius %.17g" % leg.shank_radius,
    ]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_leg_config(path) -> LegModel:
    kv: dict[str, list[str]] = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, *vals = line.split()
            kv[key] = vals
    try:
        mount = [float(v) for v in kv["mount"]]
        limits = tuple((float(kv[k][0]), float(kv[k][1])) for k in ("q1", "q2", "q3"))
        return LegModel(
            name=kv["leg"][0], side=kv["side"][0], role=kv["role"][0],
            mount_xyz=(mount[0], mount[1], mount[2]), mount_yaw=mount[3],
            l0=float(kv["l0"][0]), l1=float(kv["l1"][0]), l2=float(kv["l2"][0]),
            joint_limits=limits,
            foot_radius=float(kv["foot_radius"][0]),
            thigh_radius=float(kv["thigh_radius"][0]),
            shank_radius=float(kv["shank_radius"][0]),
        )
    except (KeyError, IndexError, ValueError) as e:
        raise ValueError(f"{path}: malformed leg config ({e})") from e
