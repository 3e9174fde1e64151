"""Single-shot foothold selection over a local elevation patch.

Pipeline: extract a 51x51 submap under the leg, rotate-crop it to the
robot-aligned 40x40 patch, score every cell with a per-pixel class map (a
trained network or the analytical labeler used as oracle), convert classes
back to costs, add a distance-from-nominal penalty, and take the argmin.

Right legs reuse the left-side network of the same role by flipping the
image columns before prediction and the label map back after.  The oracle
path evaluates the actual leg and needs no flip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .collision import RobotPose, leg_to_world
from .kinematics import JointAngles, LegModel, inverse_kinematics
from .labeler import (LabelParams, RESERVED_CLASS, class_of_cost, label_patch)
from .net import NetConfig, forward, images_to_input
from .terrain import ElevationMap, Patch, extract_patch, patch_to_image, \
    rotate_crop, save_pgm

COST_PER_CLASS = 255.0 / 13.0      # width of one class bin on the cost scale


class InferenceError(Exception):
    pass


class NoFootholdError(InferenceError):
    """Every cell of the patch is unknown or infeasible."""


@dataclass
class InferenceConfig:
    k: float = 160.0                          # cost per meter off nominal
    nominal_offset: tuple[float, float] = (0.0, 0.0)   # leg frame x,y (m)
    norm_factor: float = 0.85                 # vertical image scaling (m)
    evaluator: str = "network"                # network | oracle

    def validate(self):
        if self.k < 0:
            raise InferenceError("k must be nonnegative")
        if not self.norm_factor > 0:
            raise InferenceError("norm_factor must be positive")
        if self.evaluator not in ("network", "oracle"):
            raise InferenceError(f"unknown evaluator {self.evaluator!r}")

    def to_dict(self) -> dict:
        return {"k": self.k, "nominal_offset": list(self.nominal_offset),
                "norm_factor": self.norm_factor, "evaluator": self.evaluator}

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceConfig":
        cfg = cls(k=d["k"], nominal_offset=tuple(d["nominal_offset"]),
                  norm_factor=d["norm_factor"], evaluator=d["evaluator"])
        cfg.validate()
        return cfg


@dataclass
class FootholdDecision:
    cell: tuple[int, int]
    class_id: int
    z_c: float                     # reconstructed class cost, 0..255 scale
    d_n: float                     # horizontal distance from nominal (m)
    c_final: float                 # z_c + k*d_n
    world: tuple[float, float, float]


def reconstruct_cost(class_id: int):
    """Bin-center cost of a class; infinity for the infeasible class."""
    if not 0 <= class_id <= RESERVED_CLASS:
        raise InferenceError(f"class id {class_id} out of range")
    if class_id == RESERVED_CLASS:
        return math.inf
    return (class_id + 0.5) * COST_PER_CLASS


def reconstruct_cost_map(labels: np.ndarray) -> np.ndarray:
    z = (np.asarray(labels, dtype=np.float64) + 0.5) * COST_PER_CLASS
    z[labels == RESERVED_CLASS] = np.inf
    return z


def flip_for_side(arr: np.ndarray, side: str) -> np.ndarray:
    """Column reversal for right-side legs; identity for left."""
    if side not in ("left", "right"):
        raise InferenceError(f"side must be left or right, got {side!r}")
    arr = np.asarray(arr)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise InferenceError("flip expects a square 2D array")
    if side == "left":
        return arr
    return arr[:, ::-1].copy()


class OracleEvaluator:
    """Analytical per-cell evaluation; ground truth and network fallback."""

    def __init__(self, legs: dict[str, LegModel],
                 params: LabelParams | None = None):
        self.legs = legs
        self.params = params if params is not None else LabelParams()

    def predict_classes(self, pose: RobotPose, swing: str, patch: Patch,
                        config: InferenceConfig) -> np.ndarray:
        cost = label_patch(self.legs, swing, pose, patch, self.params)
        return class_of_cost(cost)


class NetworkEvaluator:
    """Trained classifier with the left/right flip trick.

    The model is tied to the leg it was trained for; a leg of the same role
    on the other side is served by flipping input and output columns.
    """

    def __init__(self, legs: dict[str, LegModel], params: dict,
                 net_cfg: NetConfig, model_leg: str):
        if model_leg not in legs:
            raise InferenceError(f"unknown model leg {model_leg!r}")
        self.legs = legs
        self.params = params
        self.net_cfg = net_cfg
        self.model_leg = model_leg

    def predict_classes(self, pose: RobotPose, swing: str, patch: Patch,
                        config: InferenceConfig) -> np.ndarray:
        leg = self.legs[swing]
        model_leg = self.legs[self.model_leg]
        if leg.role != model_leg.role:
            raise InferenceError(
                f"model trained for {self.model_leg} ({model_leg.role}) "
                f"cannot serve {swing} ({leg.role})")
        origin = leg_to_world(leg, (0.0, 0.0, 0.0), pose.base_xyz,
                              pose.base_yaw)
        image = patch_to_image(patch, leg_origin_z=float(origin[2]),
                               norm_factor=config.norm_factor)
        px = image.pixels
        flip = leg.side != model_leg.side
        if flip:
            px = flip_for_side(px, "right")
        x = images_to_input(px)
        logits, _ = forward(self.params, self.net_cfg, x)
        pred = logits.argmax(axis=1)[0]
        if flip:
            pred = flip_for_side(pred, "right")
        return pred


def predict_cost_classes(evaluator, pose: RobotPose, swing: str,
                         patch: Patch,
                         config: InferenceConfig | None = None) -> np.ndarray:
    """Per-cell class ids (40x40) from either evaluator."""
    if config is None:
        config = InferenceConfig()
    return evaluator.predict_classes(pose, swing, patch, config)


def select_foothold(labels: np.ndarray, known: np.ndarray,
                    config: InferenceConfig, patch: Patch,
                    side: str = "left") -> FootholdDecision:
    """Argmin of class cost plus k times distance from the nominal cell.

    Ties resolve by smaller distance, then row, then column scanned toward
    the leg's side, which keeps decisions mirror-consistent for the oracle
    path on mirrored scenes.
    """
    labels = np.asarray(labels)
    if labels.shape != (patch.size, patch.size):
        raise InferenceError("label map does not match the patch")
    feasible = np.asarray(known, dtype=bool) & (labels != RESERVED_CLASS)
    if not feasible.any():
        raise NoFootholdError("no feasible known cell in the patch")

    center = patch.size // 2
    off_x, off_y = config.nominal_offset
    r_n = center + off_x / patch.cell_size
    c_n = center + off_y / patch.cell_size
    rows, cols = np.nonzero(feasible)
    d_n = patch.cell_size * np.hypot(rows - r_n, cols - c_n)
    z = (labels[rows, cols] + 0.5) * COST_PER_CLASS
    c_final = z + config.k * d_n

    col_key = cols if side == "left" else -cols
    best = np.lexsort((col_key, rows, d_n, c_final))[0]
    r, c = int(rows[best]), int(cols[best])
    x, y = patch.cell_world_xy(r, c)
    return FootholdDecision(
        cell=(r, c), class_id=int(labels[r, c]), z_c=float(z[best]),
        d_n=float(d_n[best]), c_final=float(c_final[best]),
        world=(float(x), float(y), float(patch.heights[r, c])))


def evaluate_leg(emap: ElevationMap, pose: RobotPose, swing: str,
                 evaluator, config: InferenceConfig | None = None
                 ) -> FootholdDecision:
    """End-to-end selection for one leg against a map snapshot."""
    if config is None:
        config = InferenceConfig()
    leg = evaluator.legs[swing]
    origin = leg_to_world(leg, (0.0, 0.0, 0.0), pose.base_xyz, pose.base_yaw)
    patch51 = extract_patch(emap, (float(origin[0]), float(origin[1])), 51)
    patch = rotate_crop(patch51, pose.base_yaw)
    labels = evaluator.predict_classes(pose, swing, patch, config)
    return select_foothold(labels, patch.known, config, patch, side=leg.side)


def nominal_stance(emap: ElevationMap, legs: dict[str, LegModel], swing: str,
                   base_xy: tuple[float, float], yaw: float = 0.0,
                   hip: float = 0.45) -> RobotPose:
    """Stand the robot at base_xy with support feet on the terrain.

    The base sits `hip` above the ground under its center, support legs
    reach straight down from their hips, and the swing leg's angles are
    irrelevant to the pipeline so they are zeroed.  Raises if a support
    foot cannot reach the ground from that height.
    """
    if swing not in legs:
        raise InferenceError(f"unknown leg {swing!r}")
    bz = emap.height_at(float(base_xy[0]), float(base_xy[1])) + hip
    pose = RobotPose(base_xyz=(float(base_xy[0]), float(base_xy[1]), bz),
                     base_yaw=yaw)
    for name, leg in legs.items():
        if name == swing:
            pose.joint_angles[name] = JointAngles(0.0, 0.0, 0.0)
            continue
        o = leg_to_world(leg, np.zeros(3), pose.base_xyz, yaw)
        h = emap.height_at(float(o[0]), float(o[1]))
        pose.joint_angles[name] = inverse_kinematics(
            leg, np.array([0.0, 0.0, (h + leg.foot_radius) - o[2]]))
    return pose


# ---------------------------------------------------------------------------
# decision records and debug maps

def format_decision(leg_name: str, d: FootholdDecision) -> str:
    """One-line record: leg, cell, class, costs and the world target."""
    return (f"leg={leg_name} cell={d.cell[0]},{d.cell[1]} "
            f"class={d.class_id} zc={d.z_c:.6f} dn={d.d_n:.6f} "
            f"cfinal={d.c_final:.6f} "
            f"world={d.world[0]:.6f},{d.world[1]:.6f},{d.world[2]:.6f}")


def parse_decision(line: str) -> tuple[str, FootholdDecision]:
    try:
        fields = dict(part.split("=", 1) for part in line.split())
        cell = tuple(int(v) for v in fields["cell"].split(","))
        world = tuple(float(v) for v in fields["world"].split(","))
        return fields["leg"], FootholdDecision(
            cell=cell, class_id=int(fields["class"]),
            z_c=float(fields["zc"]), d_n=float(fields["dn"]),
            c_final=float(fields["cfinal"]), world=world)
    except (KeyError, ValueError) as e:
        raise InferenceError(f"bad decision record {line!r}: {e}") from e


def save_debug_maps(labels: np.ndarray, config: InferenceConfig,
                    patch: Patch, label_path, cost_path) -> None:
    """PGM dumps of the class map and the clipped final-cost map."""
    save_pgm(np.asarray(labels, dtype=np.uint8), label_path)
    center = patch.size // 2
    off_x, off_y = config.nominal_offset
    rr, cc = np.mgrid[0:patch.size, 0:patch.size]
    d_n = patch.cell_size * np.hypot(rr - (center + off_x / patch.cell_size),
                                     cc - (center + off_y / patch.cell_size))
    c_final = reconstruct_cost_map(labels) + config.k * d_n
    img = np.clip(np.nan_to_num(c_final, posinf=255.0), 0.0, 255.0)
    save_pgm(np.floor(img + 0.5).astype(np.uint8), cost_path)
