"""Procedural scenes, physically consistent locomotion, and dataset assembly.

The generator plans a collision-free root path with grid A*, drives an
alternating gait whose stance feet are pinned to the local surface, and
solves the legs with analytic two-bone IK so forward kinematics reproduces
the pinned feet exactly. Tasks: walk to a target, sit on it, or step onto it.
"""

import heapq
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import GenerationRetryExceeded, PathNotFound
from .motion import (
    MotionSequence,
    assemble_features,
    canonicalize,
    compute_norm_stats,
    root_positions,
    save_motion,
)
from .rotations import rot_z
from .scene import Box, SceneModel, save_scene, surface_height
from .skeleton import HEEL_CLEARANCE, SHANK_LEN, THIGH_LEN, default_skeleton

FPS = 20
GRID_CELL = 0.25
OBSTACLE_INFLATION = 0.15  # default grid used by path-existence checks
BODY_INFLATION = 0.28  # clearance used when planning actual motion (shoulders/toes)
WALK_SPEED = 0.06  # m/frame (1.2 m/s at 20 fps)
ROOT_HEIGHT = 0.74  # pelvis height above the local surface while walking
STAND_HEIGHT = 0.84  # taller stance straightens the knees next to furniture
TOE_REACH = 0.14  # toe joint offset ahead of the heel
STEP_FRAMES = 8  # swing duration; stance is the same, so a full cycle is 16
SWING_LIFT = 0.12
HIP_LATERAL = 0.09
SIT_PELVIS_GAP = 0.05  # pelvis sits this far above the seat surface

PROMPT_TEMPLATES = {
    "walk_to": "walk to the {label}",
    "sit_on": "sit on the {label}",
    "step_onto": "step onto the {label}",
}

# target label -> (footprint (w, d), height range, compatible task kinds).
# Heights vary per scene so surface elevation must be read from the scene
# geometry; it cannot be inferred from the label alone.
TARGET_SPECS = {
    "chair": ((0.4, 0.4), (0.40, 0.50), ("walk_to", "sit_on")),
    "sofa": ((0.4, 0.4), (0.38, 0.46), ("walk_to", "sit_on")),
    "platform": ((0.7, 0.7), (0.10, 0.30), ("step_onto",)),
}
_OBSTACLE_LABELS = ("table", "shelf", "obstacle")


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # walk_to | sit_on | step_onto
    target_label: str
    seed: int

    def __post_init__(self):
        if self.kind not in PROMPT_TEMPLATES:
            raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass
class DatasetManifest:
    window: int
    stride: int
    fps: int
    norm_stats_file: str
    splits: dict  # split name -> list of scene ids
    records: list  # {scene_id, split, prompt, kind, target_label, motion_file, token_file}

    def to_json(self):
        return json.dumps(
            {
                "window": self.window,
                "stride": self.stride,
                "fps": self.fps,
                "norm_stats_file": self.norm_stats_file,
                "splits": self.splits,
                "records": self.records,
            },
            indent=2,
        )

    @staticmethod
    def from_json(text):
        d = json.loads(text)
        return DatasetManifest(
            window=d["window"],
            stride=d["stride"],
            fps=d["fps"],
            norm_stats_file=d["norm_stats_file"],
            splits=d["splits"],
            records=d["records"],
        )


# --------------------------------------------------------------------------
# Grid pathing


def occupancy_grid(scene, cell=GRID_CELL, inflation=OBSTACLE_INFLATION, walk_on_target=False):
    """Boolean blocked grid over the scene bounds.

    A cell is blocked when its square intersects any box footprint expanded
    by ``inflation``. With ``walk_on_target`` the target box stays walkable.
    """
    (x0, y0), (x1, y1) = scene.bounds
    nx = int(round((x1 - x0) / cell))
    ny = int(round((y1 - y0) / cell))
    blocked = np.zeros((nx, ny), dtype=bool)
    for b in scene.boxes:
        if walk_on_target and b.target:
            continue
        lo_i = max(0, int(math.floor((b.min[0] - inflation - x0) / cell)))
        hi_i = min(nx - 1, int(math.floor((b.max[0] + inflation - x0) / cell)))
        lo_j = max(0, int(math.floor((b.min[1] - inflation - y0) / cell)))
        hi_j = min(ny - 1, int(math.floor((b.max[1] + inflation - y0) / cell)))
        if lo_i <= hi_i and lo_j <= hi_j:
            blocked[lo_i : hi_i + 1, lo_j : hi_j + 1] = True
    return blocked


def cell_center(scene, cell_ij, cell=GRID_CELL):
    (x0, y0), _ = scene.bounds
    i, j = cell_ij
    return np.array([x0 + (i + 0.5) * cell, y0 + (j + 0.5) * cell])


def point_cell(scene, xy, cell=GRID_CELL):
    (x0, y0), (x1, y1) = scene.bounds
    i = int((xy[0] - x0) / cell)
    j = int((xy[1] - y0) / cell)
    nx = int(round((x1 - x0) / cell))
    ny = int(round((y1 - y0) / cell))
    return (min(max(i, 0), nx - 1), min(max(j, 0), ny - 1))


def nearest_free_cell(blocked, cell_ij):
    """The free cell closest (squared euclidean, then index order) to cell_ij."""
    free = np.argwhere(~blocked)
    if len(free) == 0:
        raise PathNotFound("grid has no free cells")
    d = (free[:, 0] - cell_ij[0]) ** 2 + (free[:, 1] - cell_ij[1]) ** 2
    return tuple(free[np.argmin(d)])


_SQRT2 = math.sqrt(2.0)


def astar(blocked, start, goal):
    """Shortest 8-connected grid path; diagonal moves cannot cut corners."""
    nx, ny = blocked.shape
    if blocked[start] or blocked[goal]:
        raise PathNotFound("start or goal cell is blocked")

    def heuristic(c):
        dx, dy = abs(c[0] - goal[0]), abs(c[1] - goal[1])
        return (dx + dy) + (_SQRT2 - 2.0) * min(dx, dy)

    open_heap = [(heuristic(start), 0, start)]
    g_cost = {start: 0.0}
    came = {}
    counter = 1
    while open_heap:
        _, _, cur = heapq.heappop(open_heap)
        if cur == goal:
            path = [cur]
            while cur in came:
                cur = came[cur]
                path.append(cur)
            return path[::-1]
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                if di == 0 and dj == 0:
                    continue
                ni, nj = cur[0] + di, cur[1] + dj
                if not (0 <= ni < nx and 0 <= nj < ny) or blocked[ni, nj]:
                    continue
                if di != 0 and dj != 0 and (
                    blocked[cur[0] + di, cur[1]] or blocked[cur[0], cur[1] + dj]
                ):
                    continue
                step = _SQRT2 if di != 0 and dj != 0 else 1.0
                ng = g_cost[cur] + step
                nxt = (ni, nj)
                if ng < g_cost.get(nxt, float("inf")) - 1e-12:
                    g_cost[nxt] = ng
                    came[nxt] = cur
                    heapq.heappush(open_heap, (ng + heuristic(nxt), counter, nxt))
                    counter += 1
    raise PathNotFound("no path between start and goal")


def _reachable_component(blocked, seed_cell):
    """All free cells 8-connected (no corner cutting) to seed_cell."""
    nx, ny = blocked.shape
    seen = np.zeros_like(blocked)
    stack = [seed_cell]
    seen[seed_cell] = True
    while stack:
        ci, cj = stack.pop()
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                ni, nj = ci + di, cj + dj
                if not (0 <= ni < nx and 0 <= nj < ny):
                    continue
                if blocked[ni, nj] or seen[ni, nj]:
                    continue
                if di != 0 and dj != 0 and (blocked[ci + di, cj] or blocked[ci, cj + dj]):
                    continue
                seen[ni, nj] = True
                stack.append((ni, nj))
    return seen


# --------------------------------------------------------------------------
# Scene generation


def _footprints_clear(box_min, box_max, others, gap):
    for o in others:
        if (
            box_min[0] - gap < o.max[0]
            and box_max[0] + gap > o.min[0]
            and box_min[1] - gap < o.max[1]
            and box_max[1] + gap > o.min[1]
        ):
            return False
    return True


def generate_scene(seed, bounds=((-4.0, -4.0), (4.0, 4.0)), max_attempts=60):
    """Floor plus 3-8 labeled boxes, exactly one small target, fully connected
    walkable space. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    (x0, y0), (x1, y1) = bounds
    for _ in range(max_attempts):
        target_label = str(rng.choice(sorted(TARGET_SPECS)))
        (tw, td), (th_lo, th_hi), _ = TARGET_SPECS[target_label]
        th = float(rng.uniform(th_lo, th_hi))
        boxes = []
        cx = rng.uniform(x0 + 1.2, x1 - 1.2)
        cy = rng.uniform(y0 + 1.2, y1 - 1.2)
        boxes.append(
            Box(
                min=[cx - tw / 2, cy - td / 2, 0.0],
                max=[cx + tw / 2, cy + td / 2, th],
                label=target_label,
                target=True,
            )
        )
        n_boxes = int(rng.integers(3, 9))
        ok = True
        for _ in range(n_boxes - 1):
            placed = False
            for _ in range(40):
                w = rng.uniform(0.4, 1.1)
                d = rng.uniform(0.4, 1.1)
                h = rng.uniform(0.3, 1.4)
                bx = rng.uniform(x0 + 0.6 + w / 2, x1 - 0.6 - w / 2)
                by = rng.uniform(y0 + 0.6 + d / 2, y1 - 0.6 - d / 2)
                bmin = np.array([bx - w / 2, by - d / 2, 0.0])
                bmax = np.array([bx + w / 2, by + d / 2, h])
                if _footprints_clear(bmin, bmax, boxes, gap=1.2):
                    boxes.append(
                        Box(min=bmin, max=bmax, label=str(rng.choice(_OBSTACLE_LABELS)))
                    )
                    placed = True
                    break
            if not placed:
                ok = False
                break
        if not ok:
            continue
        scene = SceneModel(bounds=bounds, boxes=boxes)
        # every free cell must reach the target's surroundings, even with the
        # wide body-clearance inflation used for motion planning
        blocked = occupancy_grid(scene, inflation=BODY_INFLATION)
        if blocked.all():
            continue
        seed_cell = nearest_free_cell(blocked, point_cell(scene, (cx, cy)))
        component = _reachable_component(blocked, seed_cell)
        if np.array_equal(component, ~blocked):
            return scene
    raise GenerationRetryExceeded(f"no valid scene after {max_attempts} attempts (seed={seed})")


# --------------------------------------------------------------------------
# Gait synthesis


def _rot_y(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _bone_frame(bone_dir, fwd_hint):
    """Orthonormal world frame whose local -Z maps along bone_dir."""
    z = -bone_dir
    x = np.cross(fwd_hint, z)
    nx = np.linalg.norm(x)
    if nx < 1e-8:
        x = np.cross(np.array([0.0, 0.0, 1.0]), z)
        nx = np.linalg.norm(x)
        if nx < 1e-8:
            x, nx = np.array([1.0, 0.0, 0.0]), 1.0
    x = x / nx
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def _leg_ik(hip, heel_target, fwd):
    """Two-bone analytic IK; knee bends toward fwd. Returns world rotations."""
    d_vec = heel_target - hip
    d = np.linalg.norm(d_vec)
    d_eff = min(max(d, abs(THIGH_LEN - SHANK_LEN) + 1e-4), THIGH_LEN + SHANK_LEN - 1e-4)
    u = d_vec / max(d, 1e-9)
    n = fwd - (fwd @ u) * u
    nn = np.linalg.norm(n)
    if nn < 1e-8:
        n = np.cross(u, np.array([0.0, 0.0, 1.0]))
        nn = np.linalg.norm(n)
        if nn < 1e-8:
            n, nn = np.array([0.0, 1.0, 0.0]), 1.0
    n = n / nn
    cos_a = (THIGH_LEN**2 + d_eff**2 - SHANK_LEN**2) / (2.0 * THIGH_LEN * d_eff)
    cos_a = min(max(cos_a, -1.0), 1.0)
    sin_a = math.sqrt(max(0.0, 1.0 - cos_a * cos_a))
    dir1 = cos_a * u + sin_a * n
    knee = hip + THIGH_LEN * dir1
    d2 = heel_target - knee
    dir2 = d2 / max(np.linalg.norm(d2), 1e-9)
    return _bone_frame(dir1, fwd), _bone_frame(dir2, fwd)


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _moving_average(arr, k):
    pad = k // 2
    padded = np.concatenate([np.repeat(arr[:1], pad, 0), arr, np.repeat(arr[-1:], pad, 0)])
    kernel = np.ones(k) / k
    out = np.empty_like(arr, dtype=np.float64)
    for c in range(arr.shape[1] if arr.ndim > 1 else 1):
        col = padded[:, c] if arr.ndim > 1 else padded
        sm = np.convolve(col, kernel, mode="valid")
        if arr.ndim > 1:
            out[:, c] = sm
        else:
            out = sm
    return out


def _foot_track(n, plants, scene):
    """Per-frame heel targets and foot yaws from a plant schedule.

    plants: list of (land_frame, xy(2,), yaw). The first entry is the initial
    stance (land_frame 0). Swings occupy the STEP_FRAMES before each landing.
    """
    pos = np.empty((n, 3))
    yaw = np.empty(n)

    def plant_z(xy):
        return surface_height(scene, xy[0], xy[1]) + HEEL_CLEARANCE

    points = [(t, np.asarray(xy, dtype=np.float64), y) for t, xy, y in plants]
    for idx, (t_land, xy, fy) in enumerate(points):
        z = plant_z(xy)
        t_next = points[idx + 1][0] if idx + 1 < len(points) else n + STEP_FRAMES
        stance_end = min(n, t_next - STEP_FRAMES)
        pos[t_land:stance_end] = [xy[0], xy[1], z]
        yaw[t_land:stance_end] = fy
        if idx + 1 < len(points):
            nxt_t, nxt_xy, nxt_yaw = points[idx + 1]
            nz = plant_z(nxt_xy)
            for s in range(max(0, nxt_t - STEP_FRAMES), min(n, nxt_t)):
                phase = (s - (nxt_t - STEP_FRAMES)) / STEP_FRAMES
                sp = _smoothstep(phase)
                pos[s, :2] = (1 - sp) * xy + sp * nxt_xy
                zi = (1 - sp) * z + sp * nz + SWING_LIFT * math.sin(math.pi * phase)
                dy = (nxt_yaw - fy + math.pi) % (2 * math.pi) - math.pi
                yaw[s] = fy + sp * dy
                # keep both heel and toe clear of whatever the foot crosses
                toe = pos[s, :2] + TOE_REACH * np.array(
                    [-math.sin(yaw[s]), math.cos(yaw[s])]
                )
                z_floor = max(
                    surface_height(scene, pos[s, 0], pos[s, 1]) + HEEL_CLEARANCE,
                    surface_height(scene, toe[0], toe[1]) + HEEL_CLEARANCE,
                )
                pos[s, 2] = max(zi, z_floor)
    return pos, yaw


def _lateral(yaw, side):
    # side +1 = left foot; body faces +Y at zero yaw so +X is the left side
    return rot_z(yaw)[:2, :2] @ np.array([HIP_LATERAL * side, 0.0])


def _clear_plant(scene, xy, yaw, max_shift=0.24):
    """Shift a plant along its heading until heel and toe share a surface.

    A heel planted just short of a raised edge would leave the toe hanging
    inside the higher box; backing the plant up (or pushing it fully onto the
    upper surface) removes the overlap.
    """
    fwd = np.array([-math.sin(yaw), math.cos(yaw)])
    xy = np.asarray(xy, dtype=np.float64)

    def level_ok(p):
        heel_s = surface_height(scene, p[0], p[1])
        toe = p + fwd * TOE_REACH
        toe_s = surface_height(scene, toe[0], toe[1])
        return abs(heel_s - toe_s) < 0.03

    if level_ok(xy):
        return xy
    for sign in (-1.0, 1.0):  # prefer backing up; else step fully onto the edge
        for step in np.arange(0.02, max_shift + 1e-9, 0.02):
            cand = xy + sign * step * fwd
            if level_ok(cand):
                return cand
    return xy


def _schedule_walk_plants(scene, root_xy, yaw, walk_start, n):
    """Alternating-foot plant schedules anticipating the root trajectory."""
    plants = {
        1: [(0, _clear_plant(scene, root_xy[0] + _lateral(yaw[0], 1), yaw[0]), yaw[0])],
        -1: [(0, _clear_plant(scene, root_xy[0] + _lateral(yaw[0], -1), yaw[0]), yaw[0])],
    }
    k = 0
    while True:
        te = walk_start + k * STEP_FRAMES + STEP_FRAMES
        if te >= n or k > 400:
            break
        side = 1 if k % 2 == 0 else -1
        tp = min(te + STEP_FRAMES // 2, n - 1)
        target = _clear_plant(scene, root_xy[tp] + _lateral(yaw[tp], side), yaw[tp])
        if np.linalg.norm(target - plants[side][-1][1]) >= 0.03:
            plants[side].append((te, target, yaw[tp]))
        else:
            # this foot has settled; stop once the other foot has too
            other = _clear_plant(scene, root_xy[tp] + _lateral(yaw[tp], -side), yaw[tp])
            if np.linalg.norm(other - plants[-side][-1][1]) < 0.03:
                break
        k += 1
    return plants


def _pose_frames(scene, roots, yaws, heel_l, heel_r, yaw_l, yaw_r, skeleton):
    """Local rotation matrices per frame: pelvis yaw, IK legs, hanging arms."""
    n = len(roots)
    j = skeleton.joint_count
    rots = np.tile(np.eye(3), (n, j, 1, 1))
    arm_pose = {
        15: _rot_y(1.45), 16: _rot_y(0.15),  # left shoulder/elbow
        19: _rot_y(-1.45), 20: _rot_y(-0.15),  # right shoulder/elbow
    }
    names = skeleton.joint_names
    idx = {nm: i for i, nm in enumerate(names)}
    off = skeleton.rest_offsets
    for i in range(n):
        pelvis = rot_z(yaws[i])
        rots[i, 0] = pelvis
        for jj, mat in arm_pose.items():
            rots[i, jj] = mat
        fwd = pelvis @ np.array([0.0, 1.0, 0.0])
        for side, heel, fyaw in ((1, heel_l[i], yaw_l[i]), (-1, heel_r[i], yaw_r[i])):
            hip_j = idx["l_hip"] if side == 1 else idx["r_hip"]
            hip_world = roots[i] + pelvis @ off[hip_j]
            r_hip_w, r_knee_w = _leg_ik(hip_world, heel, fwd)
            r_heel_w = rot_z(fyaw)
            rots[i, hip_j] = pelvis.T @ r_hip_w
            rots[i, hip_j + 1] = r_hip_w.T @ r_knee_w
            rots[i, hip_j + 2] = r_knee_w.T @ r_heel_w
    return rots


def _root_track(scene, points, spawn_xy, stop_xy, idle_head=STEP_FRAMES, tail=40):
    """Per-frame root xy/yaw/z along a polyline at walking speed."""
    poly = [np.asarray(spawn_xy, dtype=np.float64)]
    for p in points:
        poly.append(np.asarray(p, dtype=np.float64))
    poly.append(np.asarray(stop_xy, dtype=np.float64))
    poly = np.array(poly)
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    keep = np.concatenate([[True], seg > 1e-9])
    poly = poly[keep]
    if len(poly) < 2:
        poly = np.vstack([poly, poly[-1] + [1e-6, 0.0]])
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]

    # trapezoidal speed profile with 10-frame cosine ramps
    dists = [0.0]
    s, ramp = 0.0, 10
    while s < total - 1e-9:
        t = len(dists) - 1
        v_in = WALK_SPEED * 0.5 * (1 - math.cos(math.pi * min(t / ramp, 1.0)))
        remaining = total - s
        v_out = min(WALK_SPEED, math.sqrt(2 * remaining * WALK_SPEED / ramp) * 0.9 + 0.012)
        s = min(total, s + max(0.012, min(v_in, v_out)))
        dists.append(s)
        if len(dists) > 5000:
            break
    walk_xy = np.array(
        [
            [np.interp(d, cum, poly[:, 0]), np.interp(d, cum, poly[:, 1])]
            for d in dists
        ]
    )
    xy = np.concatenate(
        [np.repeat(walk_xy[:1], idle_head, 0), walk_xy, np.repeat(walk_xy[-1:], tail, 0)]
    )
    xy = _moving_average(xy, 5)
    n = len(xy)

    deltas = np.diff(xy, axis=0)
    yaw = np.empty(n)
    cur = math.atan2(-deltas[idle_head + 1][0], deltas[idle_head + 1][1])
    for i in range(n):
        if i < n - 1 and np.linalg.norm(deltas[i]) > 1e-3:
            raw = math.atan2(-deltas[i][0], deltas[i][1])
            cur += (raw - cur + math.pi) % (2 * math.pi) - math.pi
        yaw[i] = cur
    yaw = _moving_average(yaw, 5)

    surf = np.array([surface_height(scene, p[0], p[1]) for p in xy])
    # straighten the legs over the last stretch so the knees do not jut
    # forward into the furniture the character stops next to
    rem = np.concatenate(
        [
            np.full(idle_head, total),
            total - np.asarray(dists),
            np.zeros(n - idle_head - len(dists)),
        ]
    )
    stand = _smoothstep(np.clip((0.4 - rem) / 0.4, 0.0, 1.0))
    # trailing (causal) surface smoothing: the pelvis rises after stepping up,
    # while the legs are compressed, never while a trailing foot is still low
    surf_sm = np.array([surf[max(0, i - 8) : i + 1].mean() for i in range(n)])
    z = surf_sm + ROOT_HEIGHT + (STAND_HEIGHT - ROOT_HEIGHT) * stand
    return xy, yaw, z, idle_head


def _pick_spawn(scene, rng, target_xy, inflation=BODY_INFLATION):
    blocked = occupancy_grid(scene, inflation=inflation)
    free = np.argwhere(~blocked)
    centers = np.array([cell_center(scene, tuple(c)) for c in free])
    dist = np.linalg.norm(centers - np.asarray(target_xy), axis=1)
    # mix spawn distances: mostly far approaches, but a fraction start within
    # arm's reach of the goal so short walk-then-stop segments are covered
    near = free[(dist >= 1.0) & (dist < 2.0)]
    far = free[dist >= 2.0]
    use_near = rng.random() < 0.3
    pool = near if (use_near and len(near)) else far
    if len(pool) == 0:
        pool = free[dist >= 1.0]
    if len(pool) == 0:
        raise PathNotFound("no free spawn cell away from the target")
    choice = pool[rng.integers(0, len(pool))]
    return tuple(choice)


def generate_motion(scene, task, skeleton=None, min_frames=200, pad_to=None):
    """Procedural motion for one task; returns (MotionSequence, prompt).

    Deterministic per (scene, task). Stance feet are pinned with zero
    velocity at heel-clearance height, so the generated contact labels meet
    the contact thresholds by construction. With ``pad_to`` the final resting
    pose is repeated until the frame count is a multiple of it, so fixed-size
    windows tile the motion exactly and the last window holds the arrived
    (standing or sitting) state.
    """
    skeleton = skeleton or default_skeleton()
    target = scene.target_box
    if target is None or target.label != task.target_label:
        raise ValueError("task target does not match the scene")
    if task.kind not in TARGET_SPECS[target.label][2]:
        raise ValueError(f"task {task.kind!r} incompatible with a {target.label}")
    rng = np.random.default_rng(task.seed)
    c = target.center_xy
    half = float(max(target.max[0] - target.min[0], target.max[1] - target.min[1]) / 2)

    walk_on = task.kind == "step_onto"
    blocked = occupancy_grid(scene, inflation=BODY_INFLATION, walk_on_target=walk_on)
    spawn_cell = _pick_spawn(scene, rng, c)
    if walk_on:
        goal_cell = nearest_free_cell(blocked, point_cell(scene, c))
    else:
        goal_cell = nearest_free_cell(blocked, point_cell(scene, c))
    path_cells = astar(blocked, spawn_cell, goal_cell)
    points = [cell_center(scene, cc) for cc in path_cells[1:]]
    spawn_xy = cell_center(scene, spawn_cell)

    if walk_on:
        stop_xy = c.copy()
    else:
        # approach a square target face-on so the bent knee stays outside the
        # footprint; the face is the one nearest the end of the A* path
        last = points[-1] if points else spawn_xy
        rel = last - c
        axis = int(np.argmax(np.abs(rel)))
        normal = np.zeros(2)
        normal[axis] = math.copysign(1.0, rel[axis] if rel[axis] != 0 else 1.0)
        stop_dist = half + (0.30 if task.kind == "sit_on" else 0.22)
        stop_xy = c + normal * stop_dist
        waypoint = c + normal * (stop_dist + 0.45)
        # drop trailing path points inside the approach ring, then route
        # through the face-aligned waypoint
        ring = np.linalg.norm(waypoint - c)
        while points and np.linalg.norm(points[-1] - c) < ring:
            points.pop()
        points.append(waypoint)

    tail = 20 if task.kind == "sit_on" else 40
    xy, yaw, z, walk_start = _root_track(scene, points, spawn_xy, stop_xy, tail=tail)
    plants = _schedule_walk_plants(scene, xy, yaw, walk_start, len(xy))

    if task.kind == "sit_on":
        xy, yaw, z, plants = _append_sit(scene, target, xy, yaw, z, plants)

    n = len(xy)
    pad = max(min_frames - n, 0)
    if pad_to:
        pad += (-(n + pad)) % pad_to
    if pad:
        xy = np.concatenate([xy, np.repeat(xy[-1:], pad, 0)])
        yaw = np.concatenate([yaw, np.repeat(yaw[-1:], pad, 0)])
        z = np.concatenate([z, np.repeat(z[-1:], pad, 0)])
        n = len(xy)

    heel_l, yaw_l = _foot_track(n, plants[1], scene)
    heel_r, yaw_r = _foot_track(n, plants[-1], scene)
    roots = np.column_stack([xy, z])
    rots = _pose_frames(scene, roots, yaw, heel_l, heel_r, yaw_l, yaw_r, skeleton)
    seq = assemble_features(
        skeleton, roots, rots, lambda x, y: surface_height(scene, x, y)
    )
    prompt = PROMPT_TEMPLATES[task.kind].format(label=target.label)
    return seq, prompt


def _append_sit(scene, target, xy, yaw, z, plants):
    """Turn away from the seat, reposition the feet, and lower the pelvis."""
    c = target.center_xy
    seat = target.top
    n0 = len(xy)
    stop = xy[-1]
    a = c - stop
    a = a / max(np.linalg.norm(a), 1e-9)
    yaw_sit = math.atan2(-(-a)[0], (-a)[1])
    yaw_end = yaw[-1]
    # unwrap the turn target next to the current heading
    dy = (yaw_sit - yaw_end + math.pi) % (2 * math.pi) - math.pi
    yaw_sit = yaw_end + dy if abs(dy) > 1e-9 else yaw_end + math.pi

    turn, reposition, descent, tail = 12, 2 * STEP_FRAMES, 16, 40
    extra = turn + reposition + descent + tail
    xy = np.concatenate([xy, np.repeat(xy[-1:], extra, 0)])
    z = np.concatenate([z, np.repeat(z[-1:], extra, 0)])
    yaw = np.concatenate([yaw, np.full(extra, yaw_sit)])
    for i in range(turn):
        yaw[n0 + i] = yaw_end + _smoothstep((i + 1) / turn) * (yaw_sit - yaw_end)

    pelvis_end = c - a * SIT_PELVIS_GAP
    fwd_sit = -a
    for side in (1, -1):
        land = n0 + turn + STEP_FRAMES * (1 if side == 1 else 2)
        heel = pelvis_end + _lateral(yaw_sit, side) + fwd_sit * THIGH_LEN
        plants[side].append((land, heel, yaw_sit))

    t0 = n0 + turn + reposition
    z_sit = scene.floor_z + seat + SIT_PELVIS_GAP
    for i in range(descent):
        s = _smoothstep((i + 1) / descent)
        xy[t0 + i] = (1 - s) * stop + s * pelvis_end
        z[t0 + i] = (1 - s) * z[n0 - 1] + s * z_sit
    xy[t0 + descent :] = pelvis_end
    z[t0 + descent :] = z_sit
    return xy, yaw, z, plants


# --------------------------------------------------------------------------
# Dataset assembly


def count_windows(n_frames, window=80, stride=40):
    return max(0, (n_frames - window) // stride + 1)


def window_sequences(seq, window=80, stride=40):
    """Canonicalized 80-frame windows with their world-placement transforms."""
    roots = root_positions(seq)
    out = []
    for w in range(count_windows(seq.n_frames, window, stride)):
        s = w * stride
        sub = MotionSequence(
            frames=seq.frames[s : s + window].copy(),
            root_start=roots[s].copy(),
            fps=seq.fps,
        )
        canon, transform = canonicalize(sub)
        out.append((canon, transform, s))
    return out


def build_dataset(
    out_dir,
    n_scenes=(60, 10, 20),
    tasks_per_scene=5,
    seed=0,
    window=80,
    stride=40,
):
    """Generate scenes x tasks, write all files, and return the manifest.

    Splits are disjoint by scene id; normalization stats come from train
    windows only. Pure function of the arguments.
    """
    out = Path(out_dir)
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    (out / "motions").mkdir(parents=True, exist_ok=True)
    skeleton = default_skeleton()

    split_names = ("train", "val", "test")
    splits = {name: [] for name in split_names}
    records = []
    train_frames = []

    total = sum(n_scenes)
    boundaries = np.cumsum(n_scenes)
    for i in range(total):
        split = split_names[int(np.searchsorted(boundaries, i, side="right"))]
        scene_id = f"scene_{i:03d}"
        scene = generate_scene(seed * 100_003 + i)
        splits[split].append(scene_id)
        save_scene(out / "scenes" / f"{scene_id}.json", scene)

        kinds = TARGET_SPECS[scene.target_box.label][2]
        task_rng = np.random.default_rng(seed * 1_000_003 + i)
        for t in range(tasks_per_scene):
            kind = str(kinds[int(task_rng.integers(0, len(kinds)))])
            task = TaskSpec(
                kind=kind,
                target_label=scene.target_box.label,
                seed=int(task_rng.integers(0, 2**31 - 1)),
            )
            motion, prompt = generate_motion(scene, task, skeleton, pad_to=window)
            motion_file = f"motions/{scene_id}_task{t}.scmo"
            save_motion(out / motion_file, motion)
            records.append(
                {
                    "scene_id": scene_id,
                    "split": split,
                    "prompt": prompt,
                    "kind": kind,
                    "target_label": scene.target_box.label,
                    "motion_file": motion_file,
                    "token_file": None,
                }
            )
            if split == "train":
                for canon, _, _ in window_sequences(motion, window, stride):
                    train_frames.append(canon.frames)

    stats = compute_norm_stats(train_frames)
    stats_file = "norm_stats.json"
    with open(out / stats_file, "w") as fh:
        json.dump({"mean": stats.mean.tolist(), "std": stats.std.tolist()}, fh)

    manifest = DatasetManifest(
        window=window,
        stride=stride,
        fps=FPS,
        norm_stats_file=stats_file,
        splits=splits,
        records=records,
    )
    with open(out / "manifest.json", "w") as fh:
        fh.write(manifest.to_json())
    return manifest
