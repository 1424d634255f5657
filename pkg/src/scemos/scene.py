"""Procedural scene representation, surface queries, heightmaps, and BEV rasters.

A scene is a flat floor plus labeled axis-aligned boxes. All geometry is
Z-up; ``surface_height`` returns the topmost supporting surface at an (x, y)
query point.
"""

import json
from dataclasses import dataclass, field

import numpy as np

LABELS = ("floor", "chair", "table", "sofa", "platform", "shelf", "obstacle")
LABEL_IDS = {name: i for i, name in enumerate(LABELS)}

HEIGHTMAP_CLAMP = (-1.0, 2.0)  # meters relative to the floor


@dataclass(frozen=True)
class Box:
    min: np.ndarray  # (3,)
    max: np.ndarray  # (3,)
    label: str
    target: bool = False

    def __post_init__(self):
        object.__setattr__(self, "min", np.asarray(self.min, dtype=np.float64))
        object.__setattr__(self, "max", np.asarray(self.max, dtype=np.float64))
        if not np.all(self.min < self.max):
            raise ValueError("box min must be strictly below max componentwise")

    @property
    def center_xy(self):
        return 0.5 * (self.min[:2] + self.max[:2])

    @property
    def top(self):
        return float(self.max[2])


@dataclass(frozen=True)
class SceneModel:
    floor_z: float = 0.0
    bounds: tuple = ((-4.0, -4.0), (4.0, 4.0))  # ((min_x, min_y), (max_x, max_y))
    boxes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if sum(1 for b in self.boxes if b.target) > 1:
            raise ValueError("at most one box may be the target")

    @property
    def target_box(self):
        for b in self.boxes:
            if b.target:
                return b
        return None

    def to_json(self):
        return json.dumps(
            {
                "floor_z": self.floor_z,
                "bounds": [list(self.bounds[0]), list(self.bounds[1])],
                "boxes": [
                    {
                        "min": b.min.tolist(),
                        "max": b.max.tolist(),
                        "label": b.label,
                        "target": b.target,
                    }
                    for b in self.boxes
                ],
            },
            indent=2,
        )

    @staticmethod
    def from_json(text):
        d = json.loads(text)
        return SceneModel(
            floor_z=d["floor_z"],
            bounds=(tuple(d["bounds"][0]), tuple(d["bounds"][1])),
            boxes=tuple(
                Box(min=b["min"], max=b["max"], label=b["label"], target=b.get("target", False))
                for b in d["boxes"]
            ),
        )


def save_scene(path, scene):
    with open(path, "w") as fh:
        fh.write(scene.to_json())


def load_scene(path):
    with open(path) as fh:
        return SceneModel.from_json(fh.read())


def surface_height(scene, x, y):
    """Topmost supporting surface at (x, y): floor or the highest box top."""
    h = scene.floor_z
    for b in scene.boxes:
        if b.min[0] <= x <= b.max[0] and b.min[1] <= y <= b.max[1]:
            h = max(h, b.top)
    return h


def surface_height_grid(scene, xs, ys):
    """Vectorized surface_height over broadcastable coordinate arrays."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    h = np.full(np.broadcast(xs, ys).shape, scene.floor_z)
    for b in scene.boxes:
        inside = (xs >= b.min[0]) & (xs <= b.max[0]) & (ys >= b.min[1]) & (ys <= b.max[1])
        np.maximum(h, np.where(inside, b.top, scene.floor_z), out=h)
    return h


@dataclass(frozen=True)
class Heightmap:
    grid: np.ndarray  # (g, g) meters above the floor, clamped
    g: int
    radius: float
    center_xy: np.ndarray  # (2,)
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "grid", np.asarray(self.grid, dtype=np.float32))
        object.__setattr__(self, "center_xy", np.asarray(self.center_xy, dtype=np.float64))


def heightmap_cell_offsets(g, radius):
    """Body-frame (forward, lateral) offsets of the g x g cell centers.

    Cell centers span [-radius, +radius] inclusive via linspace, so for even g
    the grid has no cell exactly at the origin; cell (g//2, g//2) sits half a
    step forward/left of the root.
    Row index walks the forward axis, column index the lateral axis.
    """
    u = np.linspace(-radius, radius, g)
    fwd, lat = np.meshgrid(u, u, indexing="ij")
    return fwd, lat


def extract_heightmap(scene, root_xy, yaw, g=32, radius=0.6):
    """Oriented local elevation grid around the root.

    Body frame: forward = +Y rotated by yaw. Heights are stored relative to
    floor_z and clamped to [-1, 2] m.
    """
    if g < 2 or radius <= 0:
        raise ValueError("g >= 2 and radius > 0 required")
    root_xy = np.asarray(root_xy, dtype=np.float64)
    fwd, lat = heightmap_cell_offsets(g, radius)
    c, s = np.cos(yaw), np.sin(yaw)
    # world offset of a body-frame (forward f, lateral l) point:
    # rot_z(yaw) @ [l_x_axis, f_y_axis]; lateral is the body +X axis.
    xs = root_xy[0] + c * lat - s * fwd
    ys = root_xy[1] + s * lat + c * fwd
    h = surface_height_grid(scene, xs, ys) - scene.floor_z
    grid = np.clip(h, HEIGHTMAP_CLAMP[0], HEIGHTMAP_CLAMP[1])
    return Heightmap(grid=grid, g=g, radius=radius, center_xy=root_xy, yaw=float(yaw))


@dataclass(frozen=True)
class BEVImage:
    pixels: np.ndarray  # (P, P, 2): class id, surface height
    p: int
    center_xy: np.ndarray
    yaw: float
    extent: float  # half-size of the covered square, meters

    def __post_init__(self):
        object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=np.float32))
        object.__setattr__(self, "center_xy", np.asarray(self.center_xy, dtype=np.float64))


def render_bev(scene, p=224, center_xy=None, yaw=0.0, extent=None):
    """Orthographic top-down semantic raster.

    By default covers the scene bounds in world axes. Passing center_xy /
    yaw / extent renders a square window in the frame of a character (used by
    the inference loop to refresh the scene snapshot around the body).
    Channel 0 holds the topmost label's class id, channel 1 the surface
    height above the floor.
    """
    if p < 7 or p % 7 != 0:
        raise ValueError("p must be >= 7 and divisible by 7")
    if center_xy is None:
        (x0, y0), (x1, y1) = scene.bounds
        center_xy = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
        extent = max(x1 - x0, y1 - y0) / 2.0
    else:
        center_xy = np.asarray(center_xy, dtype=np.float64)
        if extent is None:
            (x0, y0), (x1, y1) = scene.bounds
            extent = max(x1 - x0, y1 - y0) / 2.0

    u = (np.arange(p) + 0.5) / p * 2.0 * extent - extent
    fwd, lat = np.meshgrid(u, u, indexing="ij")
    c, s = np.cos(yaw), np.sin(yaw)
    xs = center_xy[0] + c * lat - s * fwd
    ys = center_xy[1] + s * lat + c * fwd

    height = np.full((p, p), 0.0)
    class_id = np.zeros((p, p))
    top = np.full((p, p), -np.inf)
    for b in scene.boxes:
        inside = (xs >= b.min[0]) & (xs <= b.max[0]) & (ys >= b.min[1]) & (ys <= b.max[1])
        taller = inside & (b.top > top)
        top[taller] = b.top
        class_id[taller] = LABEL_IDS[b.label]
        height[taller] = b.top - scene.floor_z
    pixels = np.stack([class_id, height], axis=-1)
    return BEVImage(pixels=pixels, p=p, center_xy=center_xy, yaw=float(yaw), extent=float(extent))


def voxelize(scene, region=None, resolution=0.1):
    """Boolean occupancy grid; a cell is occupied iff its center is inside a
    box or below the floor.

    region: ((min_x, min_y, min_z), (max_x, max_y, max_z)); defaults to the
    scene bounds from floor-1m up to +2m.
    Returns (grid, origin, resolution) with grid indexed [ix, iy, iz].
    """
    if resolution <= 0:
        raise ValueError("resolution must be positive")
    if region is None:
        (x0, y0), (x1, y1) = scene.bounds
        region = ((x0, y0, scene.floor_z - 1.0), (x1, y1, scene.floor_z + 2.0))
    lo = np.asarray(region[0], dtype=np.float64)
    hi = np.asarray(region[1], dtype=np.float64)
    counts = np.maximum(np.ceil((hi - lo) / resolution - 1e-9).astype(int), 1)
    axes = [lo[k] + (np.arange(counts[k]) + 0.5) * resolution for k in range(3)]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    occ = zs < scene.floor_z
    for b in scene.boxes:
        inside = (
            (xs >= b.min[0]) & (xs <= b.max[0])
            & (ys >= b.min[1]) & (ys <= b.max[1])
            & (zs >= b.min[2]) & (zs <= b.max[2])
        )
        occ |= inside
    return occ, lo, resolution


def rotate_scene_90(scene, quarter_turns=1):
    """Rotate a scene about the world origin by k*90 degrees, exactly.

    Only quarter turns keep axis-aligned boxes axis-aligned; used by the
    co-rotation symmetry tests.
    """
    k = quarter_turns % 4

    def rot_pt(x, y):
        for _ in range(k):
            x, y = -y, x
        return x, y

    def rot_box(b):
        x0, y0 = rot_pt(b.min[0], b.min[1])
        x1, y1 = rot_pt(b.max[0], b.max[1])
        return Box(
            min=[min(x0, x1), min(y0, y1), b.min[2]],
            max=[max(x0, x1), max(y0, y1), b.max[2]],
            label=b.label,
            target=b.target,
        )

    (bx0, by0), (bx1, by1) = scene.bounds
    cx0, cy0 = rot_pt(bx0, by0)
    cx1, cy1 = rot_pt(bx1, by1)
    bounds = ((min(cx0, cx1), min(cy0, cy1)), (max(cx0, cx1), max(cy0, cy1)))
    return SceneModel(
        floor_z=scene.floor_z,
        bounds=bounds,
        boxes=tuple(rot_box(b) for b in scene.boxes),
    )
