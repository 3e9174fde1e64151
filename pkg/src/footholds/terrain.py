"""Elevation maps, synthetic terrain, local patch extraction and image conversion.

Grid conventions used throughout the package:

* ``ElevationMap.heights`` has shape ``(height, width)`` and is indexed
  ``[iy, ix]``; the center of cell ``(ix, iy)`` sits at
  ``origin_xy + (ix * cell_size, iy * cell_size)`` in world coordinates.
* A ``Patch`` is a square grid indexed ``[r, c]`` where ``r`` runs along the
  patch x axis and ``c`` along the patch y axis.  A freshly extracted patch is
  world-aligned (``yaw == 0``); after :func:`rotate_crop` the axes follow the
  robot heading.  ``center_world`` is the world position of the patch's center
  cell at terrain height.
* Missing data travels as a boolean ``known`` mask, never as sentinel heights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Pixel value used for unknown cells in rendered images.
UNKNOWN_PIXEL = 255

# Bilinear weights below this threshold do not pull in a neighbour cell; keeps
# right-angle rotations exact despite cos(pi/2) != 0 in floats.
_WEIGHT_EPS = 1e-9
_SNAP_EPS = 1e-6


def sincos(angle: float) -> tuple[float, float]:
    """(cos, sin) that are bit-exactly even/odd in the angle.

    libm does not promise cos(-a) == cos(a) to the last ulp; mirrored scenes
    rely on it, so evaluate at |a| and negate the sine for negative angles.
    """
    c = math.cos(abs(angle))
    s = math.sin(abs(angle))
    if angle < 0.0:
        s = -s
    return c, s


class TerrainError(ValueError):
    """Invalid terrain specification or out-of-range query."""


@dataclass
class ElevationMap:
    """World-anchored uniform height grid with an unknown-cell mask."""

    origin_xy: tuple[float, float]
    cell_size: float
    heights: np.ndarray  # (height, width), metres
    known: np.ndarray    # (height, width), bool

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float64)
        self.known = np.asarray(self.known, dtype=bool)
        if self.heights.ndim != 2 or self.heights.shape != self.known.shape:
            raise TerrainError("heights and known must be matching 2-D arrays")
        if self.heights.shape[0] < 1 or self.heights.shape[1] < 1:
            raise TerrainError("map must contain at least one cell")
        if not self.cell_size > 0:
            raise TerrainError("cell_size must be positive")
        if not np.all(np.isfinite(self.heights[self.known])):
            raise TerrainError("known cells must hold finite heights")

    @property
    def height(self) -> int:
        return self.heights.shape[0]

    @property
    def width(self) -> int:
        return self.heights.shape[1]

    def cell_index(self, x: float, y: float) -> tuple[int, int]:
        """Indices (ix, iy) of the cell containing world point (x, y)."""
        ix = int(math.floor((x - self.origin_xy[0]) / self.cell_size + 0.5))
        iy = int(math.floor((y - self.origin_xy[1]) / self.cell_size + 0.5))
        return ix, iy

    def cell_center(self, ix: int, iy: int) -> tuple[float, float]:
        return (self.origin_xy[0] + ix * self.cell_size,
                self.origin_xy[1] + iy * self.cell_size)

    def in_bounds(self, ix: int, iy: int) -> bool:
        return 0 <= ix < self.width and 0 <= iy < self.height

    def height_at(self, x: float, y: float) -> float:
        """Height of the cell containing (x, y); raises if unknown or outside."""
        ix, iy = self.cell_index(x, y)
        if not self.in_bounds(ix, iy):
            raise TerrainError(f"point ({x:.3f}, {y:.3f}) outside map bounds")
        if not self.known[iy, ix]:
            raise TerrainError(f"cell ({ix}, {iy}) is unknown")
        return float(self.heights[iy, ix])


@dataclass
class Patch:
    """Square local grid cut from an elevation map.

    ``heights[r, c]`` lies at offset ``((r - size//2) * cell_size,
    (c - size//2) * cell_size)`` from ``center_world`` along the patch axes,
    which are the world axes rotated by ``yaw``.
    """

    size: int
    cell_size: float
    heights: np.ndarray  # (size, size)
    known: np.ndarray    # (size, size), bool
    center_world: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        self.heights = np.asarray(self.heights, dtype=np.float64)
        self.known = np.asarray(self.known, dtype=bool)
        if self.heights.shape != (self.size, self.size):
            raise TerrainError("patch heights must be size x size")
        if self.known.shape != (self.size, self.size):
            raise TerrainError("patch known mask must be size x size")

    @property
    def center_index(self) -> int:
        return self.size // 2

    def cell_world_xy(self, r, c):
        """World (x, y) of cell centers; r, c may be arrays."""
        a = (np.asarray(r, dtype=np.float64) - self.center_index) * self.cell_size
        b = (np.asarray(c, dtype=np.float64) - self.center_index) * self.cell_size
        cy, sy = sincos(self.yaw)
        x = self.center_world[0] + a * cy - b * sy
        y = self.center_world[1] + a * sy + b * cy
        return x, y


@dataclass
class GrayImage:
    """8-bit square grayscale image."""

    pixels: np.ndarray  # (size, size), uint8

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8:
            raise TerrainError("pixels must be uint8")
        if self.pixels.ndim != 2 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise TerrainError("image must be square")

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass
class TerrainSpec:
    """Parameters of a synthetic terrain generator.

    kind: one of flat | slope | stairs | boxes | rough.
    """

    kind: str = "flat"
    seed: int = 0
    # slope
    inclination: float = 0.1          # rad, rises along +x
    # stairs
    rise: float = 0.1                 # m per step
    run: float = 0.2                  # m per tread
    # boxes
    box_count: int = 30
    box_height: tuple[float, float] = (0.05, 0.25)
    box_extent: tuple[float, float] = (0.1, 0.6)
    # rough
    amplitude: float = 0.08           # m, peak height magnitude
    octaves: int = 4
    persistence: float = 0.5

    def validate(self):
        if self.kind not in ("flat", "slope", "stairs", "boxes", "rough"):
            raise TerrainError(f"unknown terrain kind {self.kind!r}")
        if self.kind == "stairs" and (self.rise <= 0 or self.run <= 0):
            raise TerrainError("stairs need positive rise and run")
        if self.kind == "rough" and (self.octaves < 1 or self.amplitude <= 0):
            raise TerrainError("rough terrain needs octaves >= 1 and amplitude > 0")
        if self.kind == "boxes" and self.box_count < 0:
            raise TerrainError("box_count must be >= 0")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "seed": self.seed, "inclination": self.inclination,
            "rise": self.rise, "run": self.run, "box_count": self.box_count,
            "box_height": list(self.box_height), "box_extent": list(self.box_extent),
            "amplitude": self.amplitude, "octaves": self.octaves,
            "persistence": self.persistence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TerrainSpec":
        spec = cls()
        for k, v in d.items():
            if not hasattr(spec, k):
                raise TerrainError(f"unknown terrain spec field {k!r}")
            if k in ("box_height", "box_extent"):
                v = tuple(v)
            setattr(spec, k, v)
        spec.validate()
        return spec


def _bilinear_resize(grid: np.ndarray, out_n: int) -> np.ndarray:
    """Upsample a square grid to out_n x out_n with bilinear interpolation."""
    n = grid.shape[0]
    if n == out_n:
        return grid.copy()
    pos = np.linspace(0.0, n - 1.0, out_n)
    i0 = np.clip(np.floor(pos).astype(int), 0, n - 2)
    f = pos - i0
    rows = grid[i0, :] * (1 - f)[:, None] + grid[i0 + 1, :] * f[:, None]
    out = rows[:, i0] * (1 - f)[None, :] + rows[:, i0 + 1] * f[None, :]
    return out


def generate_terrain(spec: TerrainSpec, width: int, height: int,
                     cell_size: float = 0.02,
                     origin_xy: tuple[float, float] = (0.0, 0.0)) -> ElevationMap:
    """Deterministic synthetic elevation map; all cells known."""
    spec.validate()
    if width < 51 or height < 51:
        raise TerrainError("map must be at least 51x51 cells")
    rng = np.random.default_rng(spec.seed)
    xs = np.arange(width) * cell_size          # along ix
    h = np.zeros((height, width), dtype=np.float64)

    if spec.kind == "flat":
        pass
    elif spec.kind == "slope":
        h[:] = math.tan(spec.inclination) * xs[None, :]
    elif spec.kind == "stairs":
        cells_per_step = spec.run / cell_size
        if abs(cells_per_step - round(cells_per_step)) < 1e-9:
            steps = np.arange(width) // int(round(cells_per_step))
        else:
            steps = np.floor(xs / spec.run)
        h[:] = spec.rise * steps[None, :]
    elif spec.kind == "boxes":
        for _ in range(spec.box_count):
            bh = rng.uniform(*spec.box_height)
            ex = rng.uniform(*spec.box_extent)
            ey = rng.uniform(*spec.box_extent)
            cx = rng.uniform(0, width * cell_size)
            cy = rng.uniform(0, height * cell_size)
            mask_x = np.abs(xs - cx) <= ex / 2
            mask_y = np.abs(np.arange(height) * cell_size - cy) <= ey / 2
            region = np.outer(mask_y, mask_x)
            h[region] = np.maximum(h[region], bh)
    elif spec.kind == "rough":
        acc = np.zeros((height, width))
        amp_total = 0.0
        n_full = max(width, height)
        for o in range(spec.octaves):
            n_coarse = max(2, 2 ** (o + 2))
            a = spec.persistence ** o
            coarse = rng.uniform(-1.0, 1.0, size=(n_coarse, n_coarse))
            acc += a * _bilinear_resize(coarse, n_full)[:height, :width]
            amp_total += a
        h = spec.amplitude * acc / amp_total

    known = np.ones_like(h, dtype=bool)
    return ElevationMap(origin_xy=origin_xy, cell_size=cell_size,
                        heights=h, known=known)


def extract_patch(emap: ElevationMap, center_world: tuple[float, float],
                  size: int) -> Patch:
    """Cut a world-aligned size x size patch around the cell containing a point.

    Cells falling outside the map are marked unknown.  Raises if the center
    point itself lies outside the map.
    """
    cx, cy = center_world
    ixc, iyc = emap.cell_index(cx, cy)
    if not emap.in_bounds(ixc, iyc):
        raise TerrainError(f"patch center ({cx:.3f}, {cy:.3f}) outside map")
    half = size // 2
    heights = np.zeros((size, size), dtype=np.float64)
    known = np.zeros((size, size), dtype=bool)
    # Patch index r follows ix (world x), c follows iy (world y).
    ix = ixc + np.arange(size) - half
    iy = iyc + np.arange(size) - half
    ok_x = (ix >= 0) & (ix < emap.width)
    ok_y = (iy >= 0) & (iy < emap.height)
    sel = np.ix_(iy[ok_y], ix[ok_x])
    block_h = emap.heights[sel]      # (ny, nx) indexed [iy, ix]
    block_k = emap.known[sel]
    grid = np.ix_(np.nonzero(ok_x)[0], np.nonzero(ok_y)[0])
    heights[grid] = block_h.T
    known[grid] = block_k.T
    ccx, ccy = emap.cell_center(ixc, iyc)
    cz = float(emap.heights[iyc, ixc]) if emap.known[iyc, ixc] else 0.0
    return Patch(size=size, cell_size=emap.cell_size, heights=heights,
                 known=known, center_world=(ccx, ccy, cz), yaw=0.0)


def rotate_crop(patch51: Patch, yaw: float, out_size: int = 40) -> Patch:
    """Resample a 51x51 world-aligned patch into a robot-aligned 40x40 patch.

    Output cell (r, c) is sampled by rotating its offset from the patch center
    into the world frame and bilinearly interpolating the input heights.  Any
    sample whose support touches an unknown or out-of-bounds cell is unknown.
    Sampling positions within 1e-6 cells of an exact grid point are snapped,
    so multiples of pi/2 reproduce input cells bit-exactly.
    """
    if patch51.size != 51:
        raise TerrainError("rotate_crop expects a 51x51 input patch")
    if out_size >= patch51.size:
        raise TerrainError("output must be smaller than the input patch")
    n_in = patch51.size
    ci = n_in // 2
    off = (n_in - out_size) // 2
    # Offsets of output cells from the rotation center, in cells.
    a, b = np.meshgrid(np.arange(out_size) + off - ci,
                       np.arange(out_size) + off - ci, indexing="ij")
    cz, sz = sincos(yaw)
    ri = ci + a * cz - b * sz
    cj = ci + a * sz + b * cz

    heights = np.zeros((out_size, out_size), dtype=np.float64)
    known = np.ones((out_size, out_size), dtype=bool)
    acc_w = np.zeros_like(heights)

    for coords in (ri, cj):
        snap = np.round(coords)
        near = np.abs(coords - snap) < _SNAP_EPS
        coords[near] = snap[near]

    r0 = np.floor(ri).astype(int)
    c0 = np.floor(cj).astype(int)
    fr = ri - r0
    fc = cj - c0
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        w = (fr if dr else 1.0 - fr) * (fc if dc else 1.0 - fc)
        use = w > _WEIGHT_EPS
        rr = r0 + dr
        cc = c0 + dc
        inb = (rr >= 0) & (rr < n_in) & (cc >= 0) & (cc < n_in)
        rrc = np.clip(rr, 0, n_in - 1)
        ccc = np.clip(cc, 0, n_in - 1)
        good = inb & patch51.known[rrc, ccc]
        known &= ~use | good
        take = use & good
        heights = np.where(take, heights + w * patch51.heights[rrc, ccc], heights)
        acc_w = np.where(take, acc_w + w, acc_w)

    heights[~known] = 0.0
    # Renormalise guards against the snapped-weight epsilon; acc_w is 1 within
    # float error wherever known.
    with np.errstate(invalid="ignore"):
        heights = np.where(known & (acc_w > 0), heights / np.where(acc_w > 0, acc_w, 1.0), heights)
    return Patch(size=out_size, cell_size=patch51.cell_size, heights=heights,
                 known=known, center_world=patch51.center_world,
                 yaw=patch51.yaw + yaw)


def patch_to_image(patch: Patch, leg_origin_z: float,
                   norm_factor: float = 0.85) -> GrayImage:
    """Render vertical leg-to-cell distances as an 8-bit image.

    Distance d = leg_origin_z - cell height maps linearly from [0, norm_factor]
    onto [0, 255] with clamping; unknown cells render as 255.
    """
    if not norm_factor > 0:
        raise TerrainError("norm_factor must be positive")
    d = leg_origin_z - patch.heights
    scaled = np.clip(d / norm_factor, 0.0, 1.0) * 255.0
    pixels = np.floor(scaled + 0.5).astype(np.uint8)
    pixels[~patch.known] = UNKNOWN_PIXEL
    return GrayImage(pixels=pixels)


# ---------------------------------------------------------------------------
# File formats

def save_heightmap(emap: ElevationMap, path) -> None:
    """Textual heightmap: one header line, then row-major heights, '?' = unknown."""
    with open(path, "w") as f:
        f.write("heightmap %d %d %.17g %.17g %.17g\n"
                % (emap.width, emap.height, emap.cell_size,
                   emap.origin_xy[0], emap.origin_xy[1]))
        for iy in range(emap.height):
            row = ["?" if not emap.known[iy, ix] else "%.17g" % emap.heights[iy, ix]
                   for ix in range(emap.width)]
            f.write(" ".join(row) + "\n")


def load_heightmap(path) -> ElevationMap:
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 6 or header[0] != "heightmap":
            raise TerrainError(f"{path}: not a heightmap file")
        width, height = int(header[1]), int(header[2])
        cell_size = float(header[3])
        origin = (float(header[4]), float(header[5]))
        tokens = f.read().split()
    if len(tokens) != width * height:
        raise TerrainError(f"{path}: expected {width * height} cells, got {len(tokens)}")
    heights = np.zeros((height, width))
    known = np.ones((height, width), dtype=bool)
    vals = np.array([0.0 if t == "?" else float(t) for t in tokens])
    known_flat = np.array([t != "?" for t in tokens])
    heights[:] = vals.reshape(height, width)
    known[:] = known_flat.reshape(height, width)
    heights[~known] = 0.0
    return ElevationMap(origin_xy=origin, cell_size=cell_size,
                        heights=heights, known=known)


def save_pgm(pixels: np.ndarray, path) -> None:
    """Binary PGM (P5, maxval 255)."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8:
        raise TerrainError("PGM output requires uint8 data")
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(arr.tobytes())


def load_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise TerrainError(f"{path}: not a binary PGM")
    # Header: magic, width, height, maxval; comments allowed after any token.
    fields = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        fields.append(int(data[i:j]))
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise TerrainError(f"{path}: unsupported maxval {maxval}")
    raw = data[i:i + w * h]
    if len(raw) != w * h:
        raise TerrainError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
