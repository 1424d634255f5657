"""Evaluation metrics with simple, independently checkable definitions.

Positional metrics run on world joint positions from forward kinematics.
Distribution metrics (FID, diversity) use a deterministic handcrafted 64-d
motion descriptor instead of a learned embedding, so absolute values are not
comparable to scores from learned feature spaces — only orderings are.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import CovarianceFailure, LengthMismatch
from .motion import FeatureLayout, root_positions, world_joint_positions
from .scene import surface_height
from .skeleton import default_skeleton

SKIN_OFFSET = 0.010  # joints are skeleton points, not the body surface
EPS_CONTACT = 0.05
GOAL_RADIUS = 0.5
DESCRIPTOR_DIM = 64


@dataclass
class MetricReport:
    mpjpe_mm: float
    mpjve_mm: float
    contact: float
    penetration_mean_mm: float
    penetration_max_mm: float
    pfc: float
    footskate_m: float
    fid: float
    diversity: float
    goal_accuracy: float
    sample_count: int

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value}")
            if value < 0 and name != "sample_count":
                raise ValueError(f"{name} must be nonnegative, got {value}")
        for name in ("contact", "goal_accuracy"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def as_dict(self):
        return asdict(self)


def _positions(seq, skeleton):
    if seq.normalized:
        raise ValueError("denormalize sequences before computing metrics")
    return world_joint_positions(seq, skeleton)


def mpjpe(pred, gt, skeleton=None):
    """Mean per-joint position error in millimeters."""
    skeleton = skeleton or default_skeleton()
    if pred.n_frames != gt.n_frames:
        raise LengthMismatch(f"{pred.n_frames} != {gt.n_frames} frames")
    pa = _positions(pred, skeleton)
    pb = _positions(gt, skeleton)
    return float(np.linalg.norm(pa - pb, axis=-1).mean() * 1000.0)


def mpjve(pred, gt, skeleton=None):
    """Mean per-joint velocity error (positional differences) in mm/frame."""
    skeleton = skeleton or default_skeleton()
    if pred.n_frames != gt.n_frames:
        raise LengthMismatch(f"{pred.n_frames} != {gt.n_frames} frames")
    if pred.n_frames < 2:
        raise LengthMismatch("need at least 2 frames for velocities")
    va = np.diff(_positions(pred, skeleton), axis=0)
    vb = np.diff(_positions(gt, skeleton), axis=0)
    return float(np.linalg.norm(va - vb, axis=-1).mean() * 1000.0)


def contact_score(motion, scene, skeleton=None):
    """Fraction of frames with any foot joint within EPS_CONTACT of the
    supporting surface."""
    skeleton = skeleton or default_skeleton()
    pos = _positions(motion, skeleton)
    feet = pos[:, list(skeleton.foot_joint_ids)]
    good = 0
    for frame in feet:
        for joint in frame:
            h = joint[2] - surface_height(scene, joint[0], joint[1])
            if abs(h) <= EPS_CONTACT:
                good += 1
                break
    return good / len(feet)


def penetration(motion, scene, skeleton=None):
    """(mean, max) surface penetration depth over frames, in millimeters.

    Per frame the depth is the worst joint's max(0, surface - z - skin).
    """
    skeleton = skeleton or default_skeleton()
    pos = _positions(motion, skeleton)
    depths = np.empty(pos.shape[0])
    for i, frame in enumerate(pos):
        worst = 0.0
        for joint in frame:
            d = surface_height(scene, joint[0], joint[1]) - joint[2] - SKIN_OFFSET
            worst = max(worst, d)
        depths[i] = worst
    return float(depths.mean() * 1000.0), float(depths.max() * 1000.0)


def pfc(motion, skeleton=None):
    """Physical foot contact score: root acceleration should only occur while
    a foot is static. Lower is better; 0 when every frame has a pinned foot
    or the root never accelerates."""
    skeleton = skeleton or default_skeleton()
    if motion.n_frames < 3:
        raise LengthMismatch("need at least 3 frames for accelerations")
    pos = _positions(motion, skeleton)
    roots = root_positions(motion)
    vel = np.diff(roots, axis=0)
    acc = np.diff(vel, axis=0)  # frame i acceleration, i in [0, N-3]
    acc = acc.copy()
    acc[:, 2] = np.maximum(acc[:, 2], 0.0)
    heel_l, _, heel_r, _ = skeleton.foot_joint_ids
    v_l = np.linalg.norm(np.diff(pos[:, heel_l], axis=0), axis=-1)[: len(acc)]
    v_r = np.linalg.norm(np.diff(pos[:, heel_r], axis=0), axis=-1)[: len(acc)]
    a_mag = np.linalg.norm(acc, axis=-1)
    scores = a_mag * v_l * v_r
    peak = a_mag.max()
    if peak <= 0:
        return 0.0
    return float(scores.mean() / peak)


def footskate(motion, skeleton=None):
    """Mean horizontal foot displacement over labeled contact frames, meters."""
    skeleton = skeleton or default_skeleton()
    layout = FeatureLayout(skeleton.joint_count)
    pos = _positions(motion, skeleton)
    feet = pos[:, list(skeleton.foot_joint_ids)]
    labels = motion.frames[:, layout.c_f] > 0.5
    slide, count = 0.0, 0
    for i in range(len(feet) - 1):
        for f in range(4):
            if labels[i, f]:
                slide += float(np.linalg.norm(feet[i + 1, f, :2] - feet[i, f, :2]))
                count += 1
    return slide / count if count else 0.0


# --------------------------------------------------------------------------
# Distribution metrics


def motion_descriptor(seq, skeleton=None):
    """Deterministic 64-d dynamics descriptor of one sequence.

    Built from velocity statistics, contact patterns, and frame-to-frame
    change magnitudes, so shuffling frames in time moves the descriptor.
    """
    skeleton = skeleton or default_skeleton()
    layout = FeatureLayout(skeleton.joint_count)
    f = seq.frames.astype(np.float64)
    n, j = seq.n_frames, skeleton.joint_count

    t_delta = f[:, layout.t_delta]
    j_v = f[:, layout.j_v].reshape(n, j, 3)
    j_p = f[:, layout.j_p].reshape(n, j - 1, 3)
    c_f = f[:, layout.c_f]

    groups = {
        "spine": [1, 2, 3, 4, 5],
        "legs": [6, 7, 8, 9, 10, 11, 12, 13],
        "arms": [14, 15, 16, 17, 18, 19, 20, 21],
    }
    feats = []

    speed = np.linalg.norm(t_delta, axis=1)
    feats += [speed.mean(), speed.std(), speed.max(), t_delta[:, 2].mean(), t_delta[:, 2].std()]
    feats += list(np.quantile(speed, [0.25, 0.5, 0.75]))

    hist, _ = np.histogram(speed, bins=8, range=(0.0, 0.12))
    feats += list(hist / max(n, 1))

    for ids in groups.values():
        mag = np.linalg.norm(j_v[:, ids], axis=-1)
        feats += [mag.mean(), mag.std(), mag.max(), j_v[:, ids, 2].mean()]
        acc = np.diff(j_v[:, ids], axis=0)
        amag = np.linalg.norm(acc, axis=-1)
        feats += [amag.mean(), amag.std()]

    for ids in groups.values():
        off = np.linalg.norm(j_p[:, [i - 1 for i in ids]], axis=-1)
        feats += [off.mean(), off.std()]

    feats += list(c_f.mean(axis=0))
    transitions = np.abs(np.diff(c_f, axis=0)).mean() if n > 1 else 0.0
    feats += [transitions]

    dfr = np.linalg.norm(np.diff(f, axis=0), axis=1) if n > 1 else np.zeros(1)
    feats += [dfr.mean(), dfr.std(), dfr.max()]
    dhist, _ = np.histogram(dfr, bins=8, range=(0.0, 2.0))
    feats += list(dhist / max(len(dfr), 1))

    # direction coherence of consecutive root steps: order-sensitive
    if n > 2:
        v = t_delta[:-1]
        w = t_delta[1:]
        nv = np.linalg.norm(v, axis=1)
        nw = np.linalg.norm(w, axis=1)
        ok = (nv > 1e-8) & (nw > 1e-8)
        coher = float((np.sum(v[ok] * w[ok], axis=1) / (nv[ok] * nw[ok])).mean()) if ok.any() else 0.0
    else:
        coher = 0.0
    feats += [coher]

    heights = j_p[:, [i - 1 for i in skeleton.foot_joint_ids], 2]
    feats += [heights.mean(), heights.std(), heights.min(), heights.max()]
    feats += [float(j_p[:, :, 2].mean())]

    yaw_like = np.diff(f[:, layout.j_r][:, :6], axis=0) if n > 1 else np.zeros((1, 6))
    feats += [np.abs(yaw_like).mean(), np.abs(yaw_like).std()]

    vec = np.asarray(feats, dtype=np.float64)
    if vec.shape != (DESCRIPTOR_DIM,):
        raise ValueError(f"descriptor has {vec.shape[0]} entries, wanted {DESCRIPTOR_DIM}")
    return vec


def _psd_sqrt(mat):
    vals, vecs = np.linalg.eigh(mat)
    if not np.all(np.isfinite(vals)):
        raise CovarianceFailure("covariance eigendecomposition produced non-finite values")
    if vals.min() < -1e-6:
        raise CovarianceFailure(f"covariance has negative eigenvalue {vals.min()}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid_from_descriptors(feats_a, feats_b, regularization=1e-6):
    """Frechet distance between Gaussians fit to two descriptor sets."""
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise LengthMismatch("descriptor sets must be (n, d) with equal d")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    d = a.shape[1]
    cov_a = np.cov(a, rowvar=False) + regularization * np.eye(d)
    cov_b = np.cov(b, rowvar=False) + regularization * np.eye(d)
    sa = _psd_sqrt(cov_a)
    cross = _psd_sqrt(sa @ cov_b @ sa)
    gap = mu_a - mu_b
    val = float(gap @ gap + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(val, 0.0)


def fid(set_a, set_b, skeleton=None):
    skeleton = skeleton or default_skeleton()
    fa = np.stack([motion_descriptor(m, skeleton) for m in set_a])
    fb = np.stack([motion_descriptor(m, skeleton) for m in set_b])
    return fid_from_descriptors(fa, fb)


def diversity(motions, skeleton=None):
    """Mean pairwise L2 distance between motion descriptors."""
    skeleton = skeleton or default_skeleton()
    feats = np.stack([motion_descriptor(m, skeleton) for m in motions])
    n = len(feats)
    if n < 2:
        return 0.0
    total, pairs = 0.0, 0
    for i in range(n):
        for j in range(i + 1, n):
            total += float(np.linalg.norm(feats[i] - feats[j]))
            pairs += 1
    return total / pairs


def goal_accuracy(results):
    """Fraction of (motion, scene) pairs whose final root xy lands within
    GOAL_RADIUS of the target box's footprint center."""
    if not results:
        return 0.0
    hits = 0
    for motion, scene in results:
        target = scene.target_box
        if target is None:
            continue
        final = root_positions(motion)[-1][:2]
        if np.linalg.norm(final - target.center_xy) <= GOAL_RADIUS:
            hits += 1
    return hits / len(results)
