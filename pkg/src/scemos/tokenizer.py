"""Geometry-grounded conditional VQ-VAE motion tokenizer.

A temporal-convolution encoder downsamples 80-frame windows to 20 latent
tokens, an EMA codebook with dead-code resets quantizes them, and a causal
decoder reconstructs frames conditioned on one local heightmap per token.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import EmptyCodebook, HeightmapCountMismatch, ShapeMismatch
from .motion import FeatureLayout


@dataclass
class TokenizerConfig:
    K: int = 256
    D_z: int = 128
    downsample: int = 4
    input_frames: int = 80
    channels: int = 256
    heightmap_feature_dim: int = 64
    heightmap_g: int = 32
    heightmap_radius: float = 0.6
    fusion: str = "concat"
    scene_conditioning: bool = True
    ema_gamma: float = 0.99
    ema_epsilon: float = 1e-5
    reset_age_threshold: int = 256
    lambda_rec: float = 1.0
    beta: float = 0.1
    feature_dim: int = 268
    joint_count: int = 22
    # reconstruction group weights: root offsets, joint positions,
    # orientations, velocities, contacts; the root offset gets its own
    # heavy weight because its error integrates into global drift
    w_root: float = 6.0
    w_pos: float = 1.0
    w_rot: float = 1.0
    w_vel: float = 0.5
    w_contact: float = 0.2

    def __post_init__(self):
        if self.input_frames % self.downsample != 0:
            raise ValueError("input_frames must be divisible by downsample")
        if self.fusion != "concat":
            raise ValueError("only concat fusion is supported")

    @property
    def n_tokens(self):
        return self.input_frames // self.downsample


@dataclass
class Codebook:
    entries: np.ndarray  # (K, D_z)
    ema_cluster_size: np.ndarray  # (K,)
    ema_embed_sum: np.ndarray  # (K, D_z)
    usage_age: np.ndarray  # (K,) int64, batches since last assignment

    @staticmethod
    def initialize(cfg, seed=0):
        rng = np.random.default_rng(seed)
        entries = rng.standard_normal((cfg.K, cfg.D_z)) * 0.1
        return Codebook(
            entries=entries,
            ema_cluster_size=np.zeros(cfg.K),
            ema_embed_sum=entries.copy(),
            usage_age=np.zeros(cfg.K, dtype=np.int64),
        )

    def usage_histogram(self, assignments):
        return np.bincount(np.asarray(assignments).ravel(), minlength=self.entries.shape[0])


@dataclass
class LatentSequence:
    z: np.ndarray  # (n_tokens, D_z)
    quantized: bool = False
    indices: np.ndarray = None  # (n_tokens,) valid iff quantized


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel dim of (B, C, T) tensors."""

    def __init__(self, channels):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.transpose(1, 2)).transpose(1, 2)


class ResBlock(nn.Module):
    def __init__(self, channels, causal=False):
        super().__init__()
        self.causal = causal
        self.norm = ChannelLayerNorm(channels)
        self.conv1 = nn.Conv1d(channels, channels, 3, padding=0 if causal else 1)
        self.conv2 = nn.Conv1d(channels, channels, 1)

    def forward(self, x):
        h = self.norm(x)
        h = F.pad(h, (2, 0)) if self.causal else h
        h = F.silu(self.conv1(h))
        return x + self.conv2(h)


def _causal_conv(conv, x):
    pad = conv.kernel_size[0] - 1
    return conv(F.pad(x, (pad, 0)))


class MotionEncoder(nn.Module):
    """Strided temporal convolutions: N frames -> N / downsample latents."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.channels
        self.stem = nn.Conv1d(cfg.feature_dim, c, 3, padding=1)
        n_stages = int(round(np.log2(cfg.downsample)))
        self.downs = nn.ModuleList(
            [nn.Conv1d(c, c, 4, stride=2, padding=1) for _ in range(n_stages)]
        )
        self.blocks = nn.ModuleList([ResBlock(c) for _ in range(n_stages)])
        self.head = nn.Conv1d(c, cfg.D_z, 3, padding=1)

    def forward(self, x):
        # x: (B, N, D)
        h = F.silu(self.stem(x.transpose(1, 2)))
        for down, block in zip(self.downs, self.blocks):
            h = block(F.silu(down(h)))
        return self.head(h).transpose(1, 2)  # (B, n_tokens, D_z)


class HeightmapEncoder(nn.Module):
    """Small strided 2D conv net mapping a g x g heightmap to a feature vector."""

    def __init__(self, cfg):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 16, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        self.pool = nn.AdaptiveAvgPool2d(4)
        self.proj = nn.Linear(32 * 16, cfg.heightmap_feature_dim)

    def forward(self, grids):
        # grids: (B, n_tokens, g, g)
        b, t, g, _ = grids.shape
        h = grids.reshape(b * t, 1, g, g)
        h = F.silu(self.conv1(h))
        h = F.silu(self.conv2(h))
        h = self.pool(h).reshape(b * t, -1)
        return self.proj(h).reshape(b, t, -1)


class InteractionDecoder(nn.Module):
    """Causal decoder: frames of token i depend only on tokens <= i."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.channels
        in_dim = cfg.D_z + cfg.heightmap_feature_dim
        self.stem = nn.Conv1d(in_dim, c, 3)
        n_stages = int(round(np.log2(cfg.downsample)))
        self.ups = nn.ModuleList([nn.Conv1d(c, c, 3) for _ in range(n_stages)])
        self.blocks = nn.ModuleList([ResBlock(c, causal=True) for _ in range(n_stages)])
        self.head = nn.Conv1d(c, cfg.feature_dim, 1)

    def forward(self, x):
        # x: (B, n_tokens, D_z + F_h)
        h = F.silu(_causal_conv(self.stem, x.transpose(1, 2)))
        for up, block in zip(self.ups, self.blocks):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = block(F.silu(_causal_conv(up, h)))
        return self.head(h).transpose(1, 2)  # (B, N, D)


def nearest_code(z, entries):
    """Nearest-neighbor indices with ties broken by the lowest index.

    z: (..., D_z) tensor; entries: (K, D_z) tensor.
    """
    if entries.shape[0] == 0:
        raise EmptyCodebook("codebook has no entries")
    flat = z.reshape(-1, z.shape[-1])
    # exact double-precision distances keep the lowest-index tie rule reliable
    d = torch.cdist(flat.double()[None], entries.double()[None])[0]
    return d.argmin(dim=1).reshape(z.shape[:-1])


class MotionTokenizer(nn.Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.encoder = MotionEncoder(cfg)
        self.decoder = InteractionDecoder(cfg)
        self.hm_encoder = HeightmapEncoder(cfg) if cfg.scene_conditioning else None
        self.codebook = Codebook.initialize(cfg, seed=seed)
        self._reset_rng = np.random.default_rng(seed + 1)

    # --- tensor paths used by training ---

    def encode_batch(self, frames):
        # frames: (B, N, D) normalized
        if frames.shape[1] != self.cfg.input_frames or frames.shape[2] != self.cfg.feature_dim:
            raise ShapeMismatch(
                f"expected (B, {self.cfg.input_frames}, {self.cfg.feature_dim}), got {tuple(frames.shape)}"
            )
        return self.encoder(frames)

    def entries_tensor(self):
        return torch.as_tensor(self.codebook.entries, dtype=torch.float32)

    def quantize_batch(self, z):
        entries = self.entries_tensor()
        idx = nearest_code(z.detach(), entries)
        zq = entries[idx]
        # straight-through: forward value is the code, gradient passes to z
        zq_st = z + (zq - z).detach()
        return zq_st, idx

    def heightmap_features(self, heightmaps, batch, n_tokens):
        if not self.cfg.scene_conditioning:
            return torch.zeros(batch, n_tokens, self.cfg.heightmap_feature_dim)
        if heightmaps.shape[:2] != (batch, n_tokens):
            raise HeightmapCountMismatch(
                f"expected ({batch}, {n_tokens}) heightmaps, got {tuple(heightmaps.shape[:2])}"
            )
        return self.hm_encoder(heightmaps)

    def decode_batch(self, zq, heightmaps=None):
        # zq: (B, n_tokens, D_z); heightmaps: (B, n_tokens, g, g)
        b, t, _ = zq.shape
        if self.cfg.scene_conditioning:
            if heightmaps is None:
                raise HeightmapCountMismatch("scene-conditioned decoder needs heightmaps")
            hm_feat = self.heightmap_features(heightmaps, b, t)
        else:
            hm_feat = torch.zeros(b, t, self.cfg.heightmap_feature_dim)
        return self.decoder(torch.cat([zq, hm_feat], dim=-1))

    # --- MotionSequence-level operations ---

    @torch.no_grad()
    def encode(self, motion):
        if not motion.normalized:
            raise ValueError("encode expects a normalized MotionSequence")
        frames = torch.as_tensor(motion.frames, dtype=torch.float32)[None]
        z = self.encode_batch(frames)[0]
        return LatentSequence(z=z.numpy(), quantized=False)

    def quantize(self, latent):
        if latent.quantized:
            raise ValueError("latent sequence is already quantized")
        z = torch.as_tensor(latent.z, dtype=torch.float32)
        entries = self.entries_tensor()
        idx = nearest_code(z, entries)
        return LatentSequence(
            z=entries[idx].numpy(), quantized=True, indices=idx.numpy()
        )

    @torch.no_grad()
    def decode(self, latent, heightmap_grids=None):
        z = torch.as_tensor(latent.z, dtype=torch.float32)[None]
        hm = None
        if heightmap_grids is not None:
            hm = torch.as_tensor(np.asarray(heightmap_grids), dtype=torch.float32)[None]
        return self.decode_batch(z, hm)[0].numpy()

    @torch.no_grad()
    def tokenize_sequence(self, motion):
        return self.quantize(self.encode(motion)).indices

    def codes_from_indices(self, indices):
        return self.codebook.entries[np.asarray(indices)].astype(np.float32)


def vq_loss(x, x_hat, z, zq, cfg, layout=None):
    """Composite loss: weighted L1 reconstruction + un-squared L2 commitment.

    All of x, x_hat are (..., N, D) normalized features; z, zq are latents.
    Returns (total, components dict).
    """
    if x.shape != x_hat.shape or z.shape != zq.shape:
        raise ShapeMismatch("loss inputs disagree in shape")
    layout = layout or FeatureLayout(cfg.joint_count)
    groups = {
        "root": (np.arange(*layout.t_delta.indices(layout.width)), cfg.w_root),
        "pos": (np.arange(*layout.j_p.indices(layout.width)), cfg.w_pos),
        "rot": (np.arange(*layout.j_r.indices(layout.width)), cfg.w_rot),
        "vel": (np.arange(*layout.j_v.indices(layout.width)), cfg.w_vel),
        "contact": (np.arange(*layout.c_f.indices(layout.width)), cfg.w_contact),
    }
    components = {}
    rec = x.new_zeros(())
    for name, (cols, weight) in groups.items():
        term = (x[..., cols] - x_hat[..., cols]).abs().mean()
        components[f"rec_{name}"] = term
        rec = rec + weight * term
    diff = (zq.detach() - z).reshape(zq.shape[0], -1) if zq.dim() > 2 else (zq.detach() - z).reshape(1, -1)
    commit = diff.norm(dim=1).mean()
    components["rec"] = rec
    components["commit"] = commit
    total = cfg.lambda_rec * rec + cfg.beta * commit
    components["total"] = total
    return total, components


def ema_update(codebook, assignments, encoder_outputs, cfg, reset_rng=None):
    """EMA codebook update with Laplace smoothing and dead-code resets.

    assignments: (M,) int indices from the current batch's quantize call;
    encoder_outputs: (M, D_z) matching latents. Mutates and returns codebook.
    """
    idx = np.asarray(assignments).ravel()
    z = np.asarray(encoder_outputs, dtype=np.float64).reshape(len(idx), -1)
    k = codebook.entries.shape[0]
    gamma, eps = cfg.ema_gamma, cfg.ema_epsilon

    counts = np.bincount(idx, minlength=k).astype(np.float64)
    sums = np.zeros_like(codebook.ema_embed_sum)
    np.add.at(sums, idx, z)

    codebook.ema_cluster_size = gamma * codebook.ema_cluster_size + (1 - gamma) * counts
    codebook.ema_embed_sum = gamma * codebook.ema_embed_sum + (1 - gamma) * sums

    total = codebook.ema_cluster_size.sum()
    if total > 0:
        smoothed = (codebook.ema_cluster_size + eps) / (total + k * eps) * total
        codebook.entries = codebook.ema_embed_sum / smoothed[:, None]

    assigned = counts > 0
    codebook.usage_age[assigned] = 0
    codebook.usage_age[~assigned] += 1

    dead = codebook.usage_age > cfg.reset_age_threshold
    if dead.any() and len(z) > 0:
        rng = reset_rng if reset_rng is not None else np.random.default_rng(0)
        picks = rng.integers(0, len(z), size=int(dead.sum()))
        codebook.entries[dead] = z[picks]
        codebook.ema_embed_sum[dead] = z[picks]
        codebook.ema_cluster_size[dead] = 1.0
        codebook.usage_age[dead] = 0
    return codebook
