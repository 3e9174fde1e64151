"""Ground-truth foothold cost labeling and dataset generation.

Every cell of a robot-aligned elevation patch is scored as a landing target
for one swing leg while the other three legs keep their stance.  Hard
constraints are checked in a fixed order: a cell whose foot target leaves the
leg's reachable set, puts the swing leg in self-collision, or drives thigh or
shank into the terrain is infeasible and scores 255.  Surviving cells combine
a kinematic-margin term c_k and a terrain-shape term c_m into

    cost = round(((c_k + 2 c_m) / 3) * 255), capped at 254.

Class ids bin feasible costs into 13 levels; id 13 is reserved for cost 255.
Dataset generation draws robot stances over synthetic terrains and writes
image/label pairs plus a manifest with the class statistics needed for
weighted training.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .collision import (BodyBox, RobotPose, build_leg_capsules,
                        default_body_box, leg_to_world,
                        point_segment_distance_many,
                        segment_box_distance_many,
                        segment_segment_distance_many, world_to_leg)
from .kinematics import (JointAngles, LegModel, UnreachableError,
                         fk_joints_many, inverse_kinematics,
                         inverse_kinematics_many, kinematic_margin_many,
                         save_leg_config)
from .terrain import (GrayImage, Patch, TerrainError, TerrainSpec,
                      extract_patch, generate_terrain, patch_to_image,
                      rotate_crop, save_pgm, load_pgm, sincos)
from .terrain_cost import TerrainCostParams, terrain_cost_map

INFEASIBLE_COST = 255
RESERVED_CLASS = 13
NUM_CLASSES = 14

_GROUND_CHUNK = 256


class LabelError(Exception):
    pass


# ---------------------------------------------------------------------------
# Cost arithmetic

def combine_cost(c_k, c_m) -> np.ndarray:
    """8-bit cost from kinematic and terrain terms; feasible range [0, 254].

    Rounding is half-up; the cap at 254 keeps 255 free as the infeasible
    marker.
    """
    c = (np.asarray(c_k, dtype=np.float64)
         + 2.0 * np.asarray(c_m, dtype=np.float64)) / 3.0
    v = np.floor(c * 255.0 + 0.5).astype(np.int64)
    return np.clip(v, 0, 254)


def class_of_cost(cost):
    """Class id 0..13 for 8-bit costs; 255 maps to the reserved id 13."""
    arr = np.asarray(cost)
    feasible = np.minimum(arr.astype(np.int64) * 13 // 255, 12)
    out = np.where(arr == INFEASIBLE_COST, RESERVED_CLASS, feasible)
    if np.ndim(cost) == 0:
        return int(out)
    return out


@dataclass
class ClassWeights:
    """Inverse-log-frequency weights over the 14 classes."""

    probabilities: np.ndarray
    weights: np.ndarray
    c: float = 1.08


def class_weights(histogram, c: float = 1.08) -> ClassWeights:
    """w_i = 1 / ln(c + p_i) from a class-count histogram."""
    hist = np.asarray(histogram, dtype=np.float64)
    if hist.shape != (NUM_CLASSES,):
        raise LabelError(f"histogram must have {NUM_CLASSES} entries")
    if (hist < 0).any() or hist.sum() <= 0:
        raise LabelError("histogram needs nonnegative counts and a positive total")
    if not c > 1.0:
        raise LabelError("weight smoothing constant must exceed 1")
    p = hist / hist.sum()
    return ClassWeights(probabilities=p, weights=1.0 / np.log(c + p), c=c)


# ---------------------------------------------------------------------------
# Per-cell evaluation

@dataclass
class LabelParams:
    """Knobs of the ground-truth evaluation."""

    margin_scale: float = 0.15     # m of margin that counts as fully safe
    margin_step: float = 0.005
    margin_tol: float = 0.0005
    terrain: TerrainCostParams = field(default_factory=TerrainCostParams)
    body: BodyBox = field(default_factory=default_body_box)

    def validate(self):
        if not self.margin_scale > 0:
            raise LabelError("margin_scale must be positive")
        if not 0 < self.margin_tol <= self.margin_step:
            raise LabelError("need 0 < margin_tol <= margin_step")

    def to_dict(self) -> dict:
        return {
            "margin_scale": self.margin_scale,
            "margin_step": self.margin_step,
            "margin_tol": self.margin_tol,
            "terrain": self.terrain.to_dict(),
            "body": {"center": list(self.body.center),
                     "half_extents": list(self.body.half_extents),
                     "yaw": self.body.yaw},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelParams":
        body = d.get("body", {})
        p = cls(margin_scale=d.get("margin_scale", 0.15),
                margin_step=d.get("margin_step", 0.005),
                margin_tol=d.get("margin_tol", 0.0005),
                terrain=TerrainCostParams.from_dict(d.get("terrain", {})),
                body=BodyBox(center=tuple(body.get("center", (0.0, 0.0, 0.0))),
                             half_extents=tuple(body.get("half_extents",
                                                         (0.28, 0.16, 0.07))),
                             yaw=body.get("yaw", 0.0)))
        p.validate()
        return p


def patch_cell_of(patch: Patch, point_world) -> tuple[int, int]:
    """Patch indices (r, c) of the cell containing a world xy point."""
    p = np.asarray(point_world, dtype=np.float64)
    dx = p[0] - patch.center_world[0]
    dy = p[1] - patch.center_world[1]
    cy, sy = sincos(patch.yaw)
    a = dx * cy + dy * sy
    b = -dx * sy + dy * cy
    r = int(math.floor(a / patch.cell_size + 0.5)) + patch.center_index
    c = int(math.floor(b / patch.cell_size + 0.5)) + patch.center_index
    if not (0 <= r < patch.size and 0 <= c < patch.size):
        raise LabelError(f"point {p[:2]} lies outside the patch")
    return r, c


def _support_capsules(legs: dict[str, LegModel], swing: str, pose: RobotPose):
    caps = []
    for name, leg in legs.items():
        if name == swing:
            continue
        caps.extend(build_leg_capsules(leg, pose.joint_angles[name],
                                       pose.base_xyz, pose.base_yaw))
    return caps


def _evaluate_cells(legs: dict[str, LegModel], swing: str, pose: RobotPose,
                    patch: Patch, params: LabelParams,
                    sel: np.ndarray) -> np.ndarray:
    """Cost of the selected cells; everything outside ``sel`` stays 255.

    Single code path behind both label_patch and foothold_cost, so the scalar
    and full-patch answers can never drift apart.
    """
    leg = legs[swing]
    cost = np.full((patch.size, patch.size), INFEASIBLE_COST, dtype=np.uint8)
    active = sel & patch.known
    if not active.any():
        return cost
    rr, cc = np.nonzero(active)

    x, y = patch.cell_world_xy(rr, cc)
    z = patch.heights[rr, cc] + leg.foot_radius
    pts_w = np.stack([x, y, z], axis=-1)
    pts_leg = world_to_leg(leg, pts_w, pose.base_xyz, pose.base_yaw)

    ok, q = inverse_kinematics_many(leg, pts_leg)
    if ok.any():
        hip, knee, foot = fk_joints_many(leg, q)
        # shank capsule stops shank_radius short of the foot center
        seg = knee - foot
        L = np.linalg.norm(seg, axis=-1)
        short = L <= leg.shank_radius + 1e-12
        t = leg.shank_radius / np.where(short, 1.0, L)
        tip = np.where(short[:, None], knee, foot + seg * t[:, None])
        hip_w = leg_to_world(leg, hip, pose.base_xyz, pose.base_yaw)
        knee_w = leg_to_world(leg, knee, pose.base_xyz, pose.base_yaw)
        tip_w = leg_to_world(leg, tip, pose.base_xyz, pose.base_yaw)

        hit = np.zeros(len(rr), dtype=bool)
        idx = np.nonzero(ok)[0]
        segments = ((hip_w[idx], knee_w[idx], leg.thigh_radius),
                    (knee_w[idx], tip_w[idx], leg.shank_radius))

        for a, b, radius in segments:
            d = segment_box_distance_many(a, b, params.body,
                                          pose.base_xyz, pose.base_yaw)
            hit[idx] |= d - radius < 0.0
        support = _support_capsules(legs, swing, pose)
        if support:
            sa = np.array([cap.a for cap in support])
            sb = np.array([cap.b for cap in support])
            sr = np.array([cap.radius for cap in support])
            for a, b, radius in segments:
                d = segment_segment_distance_many(a[:, None], b[:, None],
                                                  sa[None], sb[None])
                hit[idx] |= (d - (radius + sr[None]) < 0.0).any(axis=1)

        # terrain penetration, tested against cell-top centers of the patch
        gx, gy = patch.cell_world_xy(*np.nonzero(patch.known))
        gz = patch.heights[patch.known]
        gpts = np.stack([gx, gy, gz], axis=-1)
        for a, b, radius in segments:
            for i0 in range(0, len(idx), _GROUND_CHUNK):
                sl = slice(i0, i0 + _GROUND_CHUNK)
                sub = idx[sl]
                live = ~hit[sub]
                if not live.any():
                    continue
                al, bl = a[sl][live], b[sl][live]
                # cells beyond the chunk's inflated bounding box cannot touch
                lo = np.minimum(al, bl).min(axis=0) - radius
                hi = np.maximum(al, bl).max(axis=0) + radius
                near = ((gpts >= lo) & (gpts <= hi)).all(axis=1)
                if not near.any():
                    continue
                d = point_segment_distance_many(al[:, None], bl[:, None],
                                                gpts[near][None])
                hit[sub[live]] |= (d < radius).any(axis=1)

        alive = ok & ~hit
        if alive.any():
            m = kinematic_margin_many(leg, pts_leg[alive],
                                      step=params.margin_step,
                                      tol=params.margin_tol,
                                      max_distance=params.margin_scale)
            c_k = 1.0 - np.clip(m / params.margin_scale, 0.0, 1.0)
            cm_map = terrain_cost_map(patch, params.terrain)
            c_m = cm_map[rr[alive], cc[alive]]
            cost[rr[alive], cc[alive]] = combine_cost(c_k, c_m).astype(np.uint8)
    return cost


def label_patch(legs: dict[str, LegModel], swing: str, pose: RobotPose,
                patch: Patch, params: LabelParams | None = None) -> np.ndarray:
    """Ground-truth cost of every patch cell as a landing target for one leg.

    ``pose.joint_angles`` must hold stance angles for the three support legs;
    the swing leg's entry is ignored.  Unknown cells are 255.
    """
    if params is None:
        params = LabelParams()
    params.validate()
    sel = np.ones((patch.size, patch.size), dtype=bool)
    return _evaluate_cells(legs, swing, pose, patch, params, sel)


def foothold_cost(legs: dict[str, LegModel], swing: str, pose: RobotPose,
                  point_world, patch: Patch,
                  params: LabelParams | None = None) -> int:
    """Cost of the single cell containing a world point; same path as label_patch."""
    if params is None:
        params = LabelParams()
    params.validate()
    r, c = patch_cell_of(patch, point_world)
    sel = np.zeros((patch.size, patch.size), dtype=bool)
    sel[r, c] = True
    return int(_evaluate_cells(legs, swing, pose, patch, params, sel)[r, c])


# ---------------------------------------------------------------------------
# Dataset generation

def default_terrain_kinds() -> tuple[TerrainSpec, ...]:
    """Terrain mix used for training data."""
    return (TerrainSpec(kind="flat"),
            TerrainSpec(kind="slope", inclination=0.2),
            TerrainSpec(kind="stairs", rise=0.09, run=0.24),
            TerrainSpec(kind="boxes", box_count=28,
                        box_height=(0.04, 0.2), box_extent=(0.12, 0.5)),
            TerrainSpec(kind="rough", amplitude=0.07))


@dataclass
class SamplerConfig:
    """Stance sampling for dataset generation.

    Each sample draws a terrain, a base position, one of four base yaws and a
    hip height; stances whose support legs cannot reach the ground below their
    hips are rejected and redrawn from the same per-sample stream.
    """

    samples: int = 2000
    seed: int = 0
    leg: str = "LF"
    yaw_choices: tuple[float, ...] = (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)
    hip_height: tuple[float, float] = (0.35, 0.65)
    map_cells: int = 200
    cell_size: float = 0.02
    terrain_kinds: tuple[TerrainSpec, ...] = field(default_factory=default_terrain_kinds)
    max_attempts: int = 100

    def validate(self):
        if self.samples < 1:
            raise LabelError("need at least one sample")
        if not self.yaw_choices:
            raise LabelError("need at least one yaw choice")
        lo, hi = self.hip_height
        if not 0 < lo <= hi:
            raise LabelError("hip height range must be positive and ordered")
        if self.map_cells * self.cell_size < 2.2:
            raise LabelError("map too small to place stances away from its rim")
        for spec in self.terrain_kinds:
            spec.validate()

    def to_dict(self) -> dict:
        return {
            "samples": self.samples, "seed": self.seed, "leg": self.leg,
            "yaw_choices": list(self.yaw_choices),
            "hip_height": list(self.hip_height),
            "map_cells": self.map_cells, "cell_size": self.cell_size,
            "terrain_kinds": [s.to_dict() for s in self.terrain_kinds],
            "max_attempts": self.max_attempts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        cfg = cls()
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise LabelError(f"unknown sampler config field {k!r}")
            if k == "terrain_kinds":
                v = tuple(TerrainSpec.from_dict(s) for s in v)
            elif k in ("yaw_choices", "hip_height"):
                v = tuple(v)
            setattr(cfg, k, v)
        cfg.validate()
        return cfg


def draw_sample(config: SamplerConfig, legs: dict[str, LegModel], index: int,
                params: LabelParams | None = None):
    """One (image, class map) pair from the per-sample random stream.

    Deterministic in (config.seed, index) alone, so any sample can be
    regenerated without replaying the ones before it.
    """
    if params is None:
        params = LabelParams()
    rng = np.random.default_rng([config.seed, index])
    swing = legs[config.leg]
    extent = config.map_cells * config.cell_size
    rim = 0.95

    for _ in range(config.max_attempts):
        spec = config.terrain_kinds[int(rng.integers(len(config.terrain_kinds)))]
        spec = replace(spec, seed=int(rng.integers(2 ** 31)))
        emap = generate_terrain(spec, config.map_cells, config.map_cells,
                                config.cell_size)
        bx = float(rng.uniform(rim, extent - rim))
        by = float(rng.uniform(rim, extent - rim))
        yaw = float(config.yaw_choices[int(rng.integers(len(config.yaw_choices)))])
        hip = float(rng.uniform(*config.hip_height))
        bz = emap.height_at(bx, by) + hip
        pose = RobotPose(base_xyz=(bx, by, bz), base_yaw=yaw)

        stance_ok = True
        for name, leg in legs.items():
            if name == config.leg:
                pose.joint_angles[name] = JointAngles(0.0, 0.0, 0.0)
                continue
            origin = leg_to_world(leg, np.zeros(3), pose.base_xyz, yaw)
            try:
                h = emap.height_at(float(origin[0]), float(origin[1]))
            except TerrainError:
                stance_ok = False
                break
            target = np.array([origin[0], origin[1], h + leg.foot_radius])
            try:
                pose.joint_angles[name] = inverse_kinematics(
                    leg, world_to_leg(leg, target, pose.base_xyz, yaw))
            except UnreachableError:
                stance_ok = False
                break
        if not stance_ok:
            continue

        origin = leg_to_world(swing, np.zeros(3), pose.base_xyz, yaw)
        patch51 = extract_patch(emap, (float(origin[0]), float(origin[1])), 51)
        patch = rotate_crop(patch51, yaw)
        image = patch_to_image(patch, leg_origin_z=float(origin[2]))
        cost = label_patch(legs, config.leg, pose, patch, params)
        return image, class_of_cost(cost).astype(np.uint8)

    raise LabelError(f"sample {index}: no feasible stance "
                     f"after {config.max_attempts} attempts")


def _draw_indexed(packed):
    config, legs, index, params = packed
    image, label = draw_sample(config, legs, index, params)
    return image.pixels, label


def generate_dataset(config: SamplerConfig, legs: dict[str, LegModel],
                     out_dir, params: LabelParams | None = None,
                     jobs: int = 1) -> dict:
    """Write image/label pairs plus manifest; returns the manifest dict.

    Samples are independent (per-index rng streams), so jobs > 1 farms the
    labeling out to worker processes; files are still written in order from
    the parent, so the output is identical for any job count.
    """
    if params is None:
        params = LabelParams()
    config.validate()
    params.validate()
    if config.leg not in legs:
        raise LabelError(f"config names unknown leg {config.leg!r}")
    if jobs < 1:
        raise LabelError("jobs must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    work = ((config, legs, i, params) for i in range(config.samples))
    if jobs == 1:
        pairs = map(_draw_indexed, work)
    else:
        import multiprocessing
        pool = multiprocessing.get_context("fork").Pool(jobs)
        pairs = pool.imap(_draw_indexed, work, chunksize=8)

    hist = np.zeros(NUM_CLASSES, dtype=np.int64)
    for i, (pixels, label) in enumerate(pairs):
        save_pgm(pixels, out / f"input_{i:05d}.pgm")
        save_pgm(label, out / f"label_{i:05d}.pgm")
        hist += np.bincount(label.ravel(), minlength=NUM_CLASSES)
    if jobs > 1:
        pool.close()
        pool.join()

    weights = class_weights(hist)
    leg_files = {}
    for name in sorted(legs):
        leg_files[name] = f"leg_{name}.cfg"
        save_leg_config(legs[name], out / leg_files[name])

    manifest = {
        "kind": "foothold-dataset",
        "version": 1,
        "samples": config.samples,
        "leg": config.leg,
        "config": config.to_dict(),
        "label_params": params.to_dict(),
        "leg_files": leg_files,
        "class_histogram": hist.tolist(),
        "class_probabilities": weights.probabilities.tolist(),
        "class_weights": weights.weights.tolist(),
        "weight_smoothing": weights.c,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_dataset(path):
    """(images, labels, manifest) arrays of a generated dataset directory."""
    root = Path(path)
    with open(root / "manifest.json") as f:
        manifest = json.load(f)
    n = manifest["samples"]
    images = np.stack([load_pgm(root / f"input_{i:05d}.pgm") for i in range(n)])
    labels = np.stack([load_pgm(root / f"label_{i:05d}.pgm") for i in range(n)])
    if labels.max() >= NUM_CLASSES:
        raise LabelError("label map holds out-of-range class ids")
    return images, labels, manifest
