"""Trajectory refinement: regress smoothed root velocities from local motion.

The regressor sees the per-frame features with the root translation column
removed, so its output is invariant to where the motion sits in the world.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch
from .motion import FeatureLayout


@dataclass
class RefinerConfig:
    feature_dim: int = 268  # full frame width; input is feature_dim - 3
    hidden: int = 128
    kernel: int = 5
    lambda_r: float = 1.0
    lambda_v: float = 1.0


def local_features(frames):
    """Drop the t_delta columns: [j_r, j_p, j_v, c_f]."""
    return frames[..., 3:]


def root_velocity_columns(feature_dim):
    """Slice of the *local* feature columns holding the root joint's world
    velocity — the anchor the refiner corrects."""
    layout = FeatureLayout((feature_dim - 4) // 12)
    start = layout.j_v.start - 3
    return slice(start, start + 3)


class TrajectoryRefiner(nn.Module):
    """3 temporal conv layers (kernel 5, SiLU, residual middle layer).

    Receptive field: 13 frames. The final layer is zero-initialized so the
    untrained model predicts zero velocity.
    """

    def __init__(self, cfg=None, seed=0):
        super().__init__()
        self.cfg = cfg or RefinerConfig()
        torch.manual_seed(seed)
        k = self.cfg.kernel
        in_dim = self.cfg.feature_dim - 3
        h = self.cfg.hidden
        self.conv1 = nn.Conv1d(in_dim, h, k)
        self.conv2 = nn.Conv1d(h, h, k)
        self.conv3 = nn.Conv1d(h, 3, k)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)

    def _pad(self, x):
        # edge replication keeps short sequences within the receptive field valid
        half = self.cfg.kernel // 2
        return F.pad(x, (half, half), mode="replicate")

    def forward(self, local):
        # local: (B, N, D-3) -> (B, N, 3) root velocities
        if local.shape[-1] != self.cfg.feature_dim - 3:
            raise ShapeMismatch(
                f"expected width {self.cfg.feature_dim - 3}, got {local.shape[-1]}"
            )
        x = local.transpose(1, 2)
        h = F.silu(self.conv1(self._pad(x)))
        h = h + F.silu(self.conv2(self._pad(h)))
        return self.conv3(self._pad(h)).transpose(1, 2)


@torch.no_grad()
def refine_trajectory(model, local, input_stats=None):
    """Per-frame root velocities (N, 3) from local features (N, D-3).

    The network predicts a correction on top of the root joint's own
    velocity column (taken from the raw, unscaled features), so a
    zero-initialized model reproduces the root velocity unchanged.
    input_stats, when given, is a (mean, std) pair over the local columns
    used to scale inputs the way the model was trained.
    """
    arr = np.asarray(local, dtype=np.float32)
    base = arr[..., root_velocity_columns(model.cfg.feature_dim)].copy()
    if input_stats is not None:
        mean, std = input_stats
        arr = (arr - mean) / std
    out = model(torch.as_tensor(arr)[None])
    return out[0].numpy() + base


def traj_loss(t_true, t_pred, lambda_r=1.0, lambda_v=1.0):
    """L1 on absolute root positions (inclusive cumsum) and velocities."""
    if t_true.shape != t_pred.shape:
        raise ShapeMismatch("velocity tensors must have equal shapes")
    pos_true = torch.cumsum(t_true, dim=-2)
    pos_pred = torch.cumsum(t_pred, dim=-2)
    return lambda_r * (pos_true - pos_pred).abs().mean() + lambda_v * (
        t_true - t_pred
    ).abs().mean()


def apply_refinement(motion, model, input_stats=None):
    """Replace the t_delta columns with refined predictions.

    All other columns and root_start are untouched.
    """
    if motion.normalized:
        raise ValueError("apply_refinement expects a denormalized sequence")
    layout = FeatureLayout((motion.width - 4) // 12)
    refined = refine_trajectory(model, local_features(motion.frames), input_stats)
    out = motion.copy()
    out.frames[:, layout.t_delta] = refined
    return out
