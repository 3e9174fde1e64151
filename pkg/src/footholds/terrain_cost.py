"""Terrain-shape cost of candidate foothold cells.

Scores each cell by a least-squares plane fit over a small window: slope of
the fitted plane, RMS of the residuals, and the largest residual step between
4-adjacent cells (edge proximity measured after removing the plane, so an
ideal incline carries no edge penalty).  The three terms are clamped to [0, 1]
and mixed by fixed weights into c_m in [0, 1].

Windows touching the patch border or any unknown cell score the worst value 1.

Every window is canonicalized against its horizontal mirror (lexicographically
smaller byte string wins) before evaluation, so mirrored patches produce
bit-identical cost values; summation order would otherwise leak into the last
float ulp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .terrain import Patch


@dataclass
class TerrainCostParams:
    window: int = 5          # cells, odd
    slope_max: float = 0.7   # rad
    rough_max: float = 0.02  # m RMS
    edge_max: float = 0.04   # m residual step
    w_slope: float = 0.4
    w_rough: float = 0.3
    w_edge: float = 0.3

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if min(self.slope_max, self.rough_max, self.edge_max) <= 0:
            raise ValueError("term maxima must be positive")
        w = (self.w_slope, self.w_rough, self.w_edge)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("weights must be nonnegative and sum to 1")

    def to_dict(self) -> dict:
        return {"window": self.window, "slope_max": self.slope_max,
                "rough_max": self.rough_max, "edge_max": self.edge_max,
                "w_slope": self.w_slope, "w_rough": self.w_rough,
                "w_edge": self.w_edge}

    @classmethod
    def from_dict(cls, d: dict) -> "TerrainCostParams":
        return cls(**d)


def _canonicalize(wins: np.ndarray) -> np.ndarray:
    """Per window, the lexicographic smaller of (window, mirrored window)."""
    n, k, _ = wins.shape
    flat = wins.reshape(n, -1)
    flipped = wins[:, :, ::-1].reshape(n, -1)
    neq = flat != flipped
    rows = np.arange(n)
    first = np.argmax(neq, axis=1)
    take = neq.any(axis=1) & (flipped[rows, first] < flat[rows, first])
    return np.where(take[:, None], flipped, flat).reshape(n, k, k)


def _window_costs(wins: np.ndarray, params: TerrainCostParams,
                  cell_size: float) -> np.ndarray:
    """Cost of fully known windows (n, k, k)."""
    k = params.window
    half = k // 2
    coords = (np.arange(k) - half) * cell_size
    x = coords[:, None]
    y = coords[None, :]
    # symmetric coordinates decouple the normal equations
    denom = k * np.sum(coords * coords)
    a = np.sum(wins * x[None], axis=(1, 2)) / denom
    b = np.sum(wins * y[None], axis=(1, 2)) / denom
    mean = wins.mean(axis=(1, 2))
    fit = (a[:, None, None] * x[None] + b[:, None, None] * y[None]
           + mean[:, None, None])
    res = wins - fit

    slope = np.arctan(np.hypot(a, b))
    s_hat = np.clip(slope / params.slope_max, 0.0, 1.0)
    rms = np.sqrt(np.mean(res * res, axis=(1, 2)))
    r_hat = np.clip(rms / params.rough_max, 0.0, 1.0)
    step_r = np.abs(np.diff(res, axis=1)).max(axis=(1, 2))
    step_c = np.abs(np.diff(res, axis=2)).max(axis=(1, 2))
    e_hat = np.clip(np.maximum(step_r, step_c) / params.edge_max, 0.0, 1.0)
    return params.w_slope * s_hat + params.w_rough * r_hat + params.w_edge * e_hat


def terrain_cost_map(patch: Patch, params: TerrainCostParams | None = None) -> np.ndarray:
    """c_m for every cell of the patch; border and unknown windows get 1."""
    if params is None:
        params = TerrainCostParams()
    k = params.window
    half = k // 2
    n = patch.size
    out = np.ones((n, n), dtype=np.float64)
    if n < k:
        return out
    wins = sliding_window_view(patch.heights, (k, k))
    kwin = sliding_window_view(patch.known, (k, k))
    ok = kwin.all(axis=(2, 3))
    idx = np.nonzero(ok)
    if idx[0].size:
        w = _canonicalize(np.ascontiguousarray(wins[idx]))
        out[idx[0] + half, idx[1] + half] = _window_costs(w, params,
                                                          patch.cell_size)
    return out


def local_terrain_cost(patch: Patch, cell: tuple[int, int],
                       params: TerrainCostParams | None = None) -> float:
    """c_m of one cell; same code path as the full map."""
    if params is None:
        params = TerrainCostParams()
    r, c = cell
    half = params.window // 2
    n = patch.size
    if not (half <= r < n - half and half <= c < n - half):
        return 1.0
    win = patch.known[r - half:r + half + 1, c - half:c + half + 1]
    if not win.all():
        return 1.0
    w = patch.heights[r - half:r + half + 1, c - half:c + half + 1]
    w = _canonicalize(np.ascontiguousarray(w)[None])
    return float(_window_costs(w, params, patch.cell_size)[0])
