"""Motion feature representation, canonicalization, normalization, and file IO.

Each frame is the flattened vector
``[t_delta (3), j_r (J*6), j_p ((J-1)*3), j_v (J*3), c_f (4)]``
giving D = 268 for the 22-joint skeleton. Features are expressed in world
axes: integrating t_delta from root_start recovers absolute root positions.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FileCorrupt, LengthMismatch, ShapeMismatch, StatsMismatch
from .rotations import (
    matrix_to_rot6d_batch,
    rot6d_to_matrix_batch,
    rot_z,
    yaw_of,
)
from .skeleton import fk_world_positions

V_CONTACT = 0.005  # m/frame (0.1 m/s at 20 fps)
H_CONTACT = 0.05   # m above the local surface

_MAGIC = b"SCMO1"


class FeatureLayout:
    """Column slices of the flattened per-frame feature vector."""

    def __init__(self, joint_count):
        j = joint_count
        self.joint_count = j
        self.t_delta = slice(0, 3)
        self.j_r = slice(3, 3 + 6 * j)
        self.j_p = slice(3 + 6 * j, 3 + 6 * j + 3 * (j - 1))
        self.j_v = slice(3 + 6 * j + 3 * (j - 1), 3 + 6 * j + 3 * (j - 1) + 3 * j)
        self.c_f = slice(3 + 9 * j + 3 * (j - 1), 3 + 9 * j + 3 * (j - 1) + 4)
        self.width = self.c_f.stop

    def rot6d(self, frames):
        return frames[..., self.j_r].reshape(*frames.shape[:-1], self.joint_count, 6)


@dataclass
class MotionSequence:
    frames: np.ndarray  # (N, D) float32
    fps: int = 20
    root_start: np.ndarray = None  # (3,) world root position at frame 0
    yaw_start: float = 0.0
    normalized: bool = False

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ShapeMismatch("frames must be a nonempty (N, D) matrix")
        if self.root_start is None:
            self.root_start = np.zeros(3, dtype=np.float32)
        self.root_start = np.asarray(self.root_start, dtype=np.float32)
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def width(self):
        return self.frames.shape[1]

    def copy(self):
        return MotionSequence(
            frames=self.frames.copy(),
            fps=self.fps,
            root_start=self.root_start.copy(),
            yaw_start=self.yaw_start,
            normalized=self.normalized,
        )


@dataclass(frozen=True)
class RigidTransform:
    """Yaw rotation about +Z followed by a translation."""

    translation: np.ndarray  # (3,)
    yaw: float

    def apply_point(self, p):
        return rot_z(self.yaw) @ np.asarray(p, dtype=np.float64) + np.asarray(
            self.translation, dtype=np.float64
        )

    def inverse(self):
        inv_t = -(rot_z(-self.yaw) @ np.asarray(self.translation, dtype=np.float64))
        return RigidTransform(translation=inv_t, yaw=-self.yaw)

    @property
    def is_identity(self):
        return abs(self.yaw) < 1e-6 and np.all(np.abs(self.translation) < 1e-6)


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    epsilon: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float32))
        object.__setattr__(self, "std", np.asarray(self.std, dtype=np.float32))
        if np.any(self.std < self.epsilon):
            raise StatsMismatch("std entries must be >= epsilon")


def compute_norm_stats(frame_arrays, epsilon=1e-6):
    """Per-column mean/std over a list of (N, D) frame matrices."""
    stacked = np.concatenate([np.asarray(a, dtype=np.float64) for a in frame_arrays])
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), epsilon)
    return NormStats(mean=mean, std=std, epsilon=epsilon)


def normalize(seq, stats):
    if seq.width != stats.mean.shape[0]:
        raise StatsMismatch(f"stats dimension {stats.mean.shape[0]} != D={seq.width}")
    if seq.normalized:
        raise ValueError("sequence is already normalized")
    frames = (seq.frames - stats.mean) / stats.std
    out = seq.copy()
    out.frames = frames.astype(np.float32)
    out.normalized = True
    return out


def denormalize(seq, stats):
    if seq.width != stats.mean.shape[0]:
        raise StatsMismatch(f"stats dimension {stats.mean.shape[0]} != D={seq.width}")
    if not seq.normalized:
        raise ValueError("sequence is not normalized")
    frames = seq.frames * stats.std + stats.mean
    out = seq.copy()
    out.frames = frames.astype(np.float32)
    out.normalized = False
    return out


def detect_foot_contacts(foot_positions, foot_velocities, surface_query,
                         v_contact=V_CONTACT, h_contact=H_CONTACT):
    """Binary contact labels: slow AND close to the local surface."""
    pos = np.asarray(foot_positions, dtype=np.float64)
    vel = np.asarray(foot_velocities, dtype=np.float64)
    if pos.shape != vel.shape or pos.ndim != 3 or pos.shape[1:] != (4, 3):
        raise ShapeMismatch("foot arrays must both be (N, 4, 3)")
    speed = np.linalg.norm(vel, axis=-1)
    heights = np.empty(pos.shape[:2])
    for i in range(pos.shape[0]):
        for f in range(4):
            heights[i, f] = pos[i, f, 2] - surface_query(pos[i, f, 0], pos[i, f, 1])
    return ((speed < v_contact) & (heights < h_contact)).astype(np.float32)


def assemble_features(skeleton, raw_roots, raw_rotmats, surface_query):
    """Build a MotionSequence from raw root trajectories and local rotations.

    raw_rotmats holds local joint rotations per frame; the root's local
    rotation is its absolute orientation in world axes.
    """
    roots = np.asarray(raw_roots, dtype=np.float64)
    rots = np.asarray(raw_rotmats, dtype=np.float64)
    if roots.ndim != 2 or roots.shape[1] != 3:
        raise LengthMismatch("raw_roots must be (N, 3)")
    if rots.shape[:1] != roots.shape[:1]:
        raise LengthMismatch("raw_roots and raw_rotmats length mismatch")
    n = roots.shape[0]
    if n < 2:
        raise LengthMismatch("need at least 2 frames for finite differences")
    j = skeleton.joint_count
    if rots.shape[1:] != (j, 3, 3):
        raise ShapeMismatch(f"raw_rotmats must be (N, {j}, 3, 3)")

    layout = FeatureLayout(j)
    pos, _ = fk_world_positions(skeleton, rots, roots)

    t_delta = np.empty((n, 3))
    t_delta[:-1] = roots[1:] - roots[:-1]
    t_delta[-1] = t_delta[-2]

    j_v = np.empty((n, j, 3))
    j_v[:-1] = pos[1:] - pos[:-1]
    j_v[-1] = j_v[-2]

    j_p = pos[:, 1:] - pos[:, :1]
    j_r = matrix_to_rot6d_batch(rots)

    foot_ids = list(skeleton.foot_joint_ids)
    c_f = detect_foot_contacts(pos[:, foot_ids], j_v[:, foot_ids], surface_query)

    frames = np.empty((n, layout.width), dtype=np.float32)
    frames[:, layout.t_delta] = t_delta
    frames[:, layout.j_r] = j_r.reshape(n, j * 6)
    frames[:, layout.j_p] = j_p.reshape(n, (j - 1) * 3)
    frames[:, layout.j_v] = j_v.reshape(n, j * 3)
    frames[:, layout.c_f] = c_f

    return MotionSequence(
        frames=frames,
        root_start=roots[0],
        yaw_start=yaw_of(rots[0, 0]),
        normalized=False,
    )


def root_positions(seq):
    """Absolute root positions from root_start + cumulative t_delta."""
    layout = FeatureLayout((seq.width - 4) // 12)
    t_delta = seq.frames[:, layout.t_delta].astype(np.float64)
    roots = np.empty((seq.n_frames, 3))
    roots[0] = seq.root_start
    roots[1:] = seq.root_start + np.cumsum(t_delta[:-1], axis=0)
    return roots


def world_joint_positions(seq, skeleton):
    """FK over all frames; returns (N, J, 3) world joint positions."""
    if seq.normalized:
        raise ValueError("denormalize the sequence before FK")
    layout = FeatureLayout(skeleton.joint_count)
    rots = rot6d_to_matrix_batch(layout.rot6d(seq.frames.astype(np.float64)))
    pos, _ = fk_world_positions(skeleton, rots, root_positions(seq))
    return pos


def _rotate_frames(frames, layout, yaw):
    """Rotate all vector/rotation features of a frame matrix about +Z."""
    rot = rot_z(yaw)
    out = np.asarray(frames, dtype=np.float64).copy()
    n = out.shape[0]
    j = layout.joint_count
    for sl, per in ((layout.t_delta, 1), (layout.j_p, j - 1), (layout.j_v, j)):
        vecs = out[:, sl].reshape(n, per, 3)
        out[:, sl] = (vecs @ rot.T).reshape(n, per * 3)
    r6 = out[:, layout.j_r].reshape(n, j, 6)
    root_mats = rot6d_to_matrix_batch(r6[:, 0])
    r6[:, 0] = matrix_to_rot6d_batch(rot @ root_mats)
    out[:, layout.j_r] = r6.reshape(n, j * 6)
    return out.astype(np.float32)


def canonicalize(seq):
    """Move frame 0's root to the origin facing +Y; return (canonical, transform).

    The returned transform maps the canonical sequence back to the input.
    """
    if seq.normalized:
        raise ValueError("canonicalize expects an unnormalized sequence")
    layout = FeatureLayout((seq.width - 4) // 12)
    r6_0 = seq.frames[0, layout.j_r].astype(np.float64).reshape(layout.joint_count, 6)
    yaw0 = yaw_of(rot6d_to_matrix_batch(r6_0[:1])[0])
    transform = RigidTransform(
        translation=seq.root_start.astype(np.float64).copy(), yaw=yaw0
    )
    out = seq.copy()
    if abs(yaw0) > 1e-12:
        out.frames = _rotate_frames(seq.frames, layout, -yaw0)
    out.root_start = np.zeros(3, dtype=np.float32)
    out.yaw_start = 0.0
    return out, transform


def apply_rigid(seq, transform):
    """Apply a rigid transform (yaw about +Z, then translation) to a sequence."""
    if seq.normalized:
        raise ValueError("apply_rigid expects an unnormalized sequence")
    layout = FeatureLayout((seq.width - 4) // 12)
    out = seq.copy()
    if abs(transform.yaw) > 1e-12:
        out.frames = _rotate_frames(seq.frames, layout, transform.yaw)
    out.root_start = transform.apply_point(seq.root_start).astype(np.float32)
    out.yaw_start = float(seq.yaw_start + transform.yaw)
    return out


def save_motion(path, seq):
    """Write the SCMO1 binary format (little-endian)."""
    frames = np.ascontiguousarray(seq.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<III", seq.n_frames, seq.width, int(seq.fps)))
        fh.write(np.asarray(seq.root_start, dtype="<f4").tobytes())
        fh.write(struct.pack("<fB", float(seq.yaw_start), int(bool(seq.normalized))))
        fh.write(frames.tobytes())


def load_motion(path):
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != _MAGIC:
            raise FileCorrupt(f"bad magic {magic!r} in {path}")
        n, d, fps = struct.unpack("<III", fh.read(12))
        root_start = np.frombuffer(fh.read(12), dtype="<f4").copy()
        yaw_start, normalized = struct.unpack("<fB", fh.read(5))
        payload = fh.read(n * d * 4)
        if len(payload) != n * d * 4:
            raise FileCorrupt(f"truncated payload in {path}")
        frames = np.frombuffer(payload, dtype="<f4").reshape(n, d).copy()
    return MotionSequence(
        frames=frames,
        fps=fps,
        root_start=root_start,
        yaw_start=float(yaw_start),
        normalized=bool(normalized),
    )
