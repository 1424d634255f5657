"""Pluggable text and scene feature providers plus the FEAT1 file format.

The builtin providers are deterministic, seeded stand-ins for the pretrained
backbones: text becomes a hashed bag-of-words projection, scene features are
per-patch statistics of the BEV raster pushed through a fixed random linear
map. File providers load precomputed tensors.
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FeatureShapeMismatch, FileCorrupt, UnknownPrompt
from .scene import LABELS, render_bev

TEXT_DIM = 1024
SCENE_PATCHES = 49
SCENE_DIM = 768

_FEAT_MAGIC = b"FEAT1"


@dataclass
class ConditioningBundle:
    f_text: np.ndarray  # (1024,)
    f_dino: np.ndarray  # (49, 768)
    text_dropped: bool = False
    scene_dropped: bool = False

    def __post_init__(self):
        self.f_text = np.asarray(self.f_text, dtype=np.float32)
        self.f_dino = np.asarray(self.f_dino, dtype=np.float32)
        if self.f_text.shape != (TEXT_DIM,):
            raise FeatureShapeMismatch(f"f_text must be ({TEXT_DIM},)")
        if self.f_dino.shape != (SCENE_PATCHES, SCENE_DIM):
            raise FeatureShapeMismatch(f"f_dino must be ({SCENE_PATCHES}, {SCENE_DIM})")


def _word_vector(word, seed, dim):
    digest = hashlib.blake2b(f"{seed}:{word}".encode(), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(dim)


def text_features(prompt, seed=0):
    """Seeded hashed bag-of-words embedding, unit-normalized."""
    if not prompt or not prompt.strip():
        raise ValueError("prompt must be non-empty")
    words = prompt.lower().split()
    vec = np.zeros(TEXT_DIM)
    for w in words:
        vec += _word_vector(w, seed, TEXT_DIM)
    norm = np.linalg.norm(vec)
    if norm < 1e-12:
        vec[0] = 1.0
        norm = 1.0
    return (vec / norm).astype(np.float32)


def prompt_hash(prompt):
    digest = hashlib.blake2b(prompt.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# Per-patch raw statistics: class occupancy fractions, height moments, and
# the centroid of non-floor mass inside the patch.
_PATCH_STATS = len(LABELS) + 5


def _patch_statistics(bev):
    p = bev.p
    step = p // 7
    pix = np.asarray(bev.pixels, dtype=np.float64)
    stats = np.empty((SCENE_PATCHES, _PATCH_STATS))
    for pi in range(7):
        for pj in range(7):
            patch = pix[pi * step:(pi + 1) * step, pj * step:(pj + 1) * step]
            cls = patch[..., 0]
            hgt = patch[..., 1]
            occ = [np.mean(cls == k) for k in range(len(LABELS))]
            nonfloor = cls > 0
            if np.any(nonfloor):
                ii, jj = np.nonzero(nonfloor)
                centroid = [ii.mean() / step, jj.mean() / step]
            else:
                centroid = [0.5, 0.5]
            stats[pi * 7 + pj] = occ + [hgt.mean(), hgt.max(), hgt.std()] + centroid
    return stats


def _projection_matrix(seed):
    rng = np.random.default_rng(seed + 104729)
    return rng.standard_normal((_PATCH_STATS, SCENE_DIM)) / np.sqrt(_PATCH_STATS)


def scene_features(scene_or_bev, seed=0, p=224):
    """49x768 patch features from a BEV raster (builtin provider)."""
    bev = scene_or_bev
    if not hasattr(bev, "pixels"):
        bev = render_bev(bev, p=p)
    stats = _patch_statistics(bev)
    feats = stats @ _projection_matrix(seed)
    return feats.astype(np.float32)


def save_features(path, array):
    arr = np.ascontiguousarray(array, dtype="<f4")
    if arr.ndim != 2:
        raise FeatureShapeMismatch("feature array must be 2D")
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_features(path, expect_shape=None):
    with open(path, "rb") as fh:
        if fh.read(5) != _FEAT_MAGIC:
            raise FileCorrupt(f"bad magic in {path}")
        rows, cols = struct.unpack("<II", fh.read(8))
        payload = fh.read(rows * cols * 4)
        if len(payload) != rows * cols * 4:
            raise FileCorrupt(f"truncated payload in {path}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    if expect_shape is not None and arr.shape != tuple(expect_shape):
        raise FeatureShapeMismatch(f"expected {expect_shape}, got {arr.shape}")
    return arr


def save_prompt_features(path, prompts, vectors):
    """FEAT1 payload preceded by a u64 prompt-hash index table."""
    arr = np.ascontiguousarray(vectors, dtype="<f4")
    if arr.ndim != 2 or arr.shape[0] != len(prompts):
        raise FeatureShapeMismatch("vectors must be (num_prompts, dim)")
    with open(path, "wb") as fh:
        fh.write(_FEAT_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        for prompt in prompts:
            fh.write(struct.pack("<Q", prompt_hash(prompt)))
        fh.write(arr.tobytes())


def load_prompt_features(path):
    with open(path, "rb") as fh:
        if fh.read(5) != _FEAT_MAGIC:
            raise FileCorrupt(f"bad magic in {path}")
        rows, cols = struct.unpack("<II", fh.read(8))
        hashes = struct.unpack(f"<{rows}Q", fh.read(rows * 8))
        payload = fh.read(rows * cols * 4)
        if len(payload) != rows * cols * 4:
            raise FileCorrupt(f"truncated payload in {path}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    return dict(zip(hashes, arr))


class FileTextProvider:
    """Prompt embeddings looked up by hash from a prompt-feature file."""

    def __init__(self, path):
        self._table = load_prompt_features(path)

    def __call__(self, prompt):
        key = prompt_hash(prompt)
        if key not in self._table:
            raise UnknownPrompt(f"no stored embedding for prompt {prompt!r}")
        vec = self._table[key]
        if vec.shape != (TEXT_DIM,):
            raise FeatureShapeMismatch(f"stored embedding has shape {vec.shape}")
        return vec


class FileSceneProvider:
    """Scene features loaded verbatim from a FEAT1 file."""

    def __init__(self, path):
        self._feats = load_features(path, expect_shape=(SCENE_PATCHES, SCENE_DIM))

    def __call__(self, scene_or_bev=None):
        return self._feats
