"""Autoregressive global motion planner.

A causal transformer predicts discrete motion tokens conditioned on text and
BEV scene features, trained with cross-entropy and random condition dropping
for classifier-free guidance.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ContextOverflow, FileCorrupt, ShapeMismatch
from .features import SCENE_DIM, SCENE_PATCHES, TEXT_DIM

_TOKS_MAGIC = b"TOKS1"


@dataclass
class PlannerConfig:
    K: int = 256
    layers: int = 4
    heads: int = 4
    hidden: int = 256
    max_tokens: int = 20
    dropout: float = 0.0
    cond_drop_prob: float = 0.1
    guidance_scale: float = 2.0
    conditioning: str = "prefix"  # or "per-token-concat"

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError("hidden must be divisible by heads")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.conditioning not in ("prefix", "per-token-concat"):
            raise ValueError("unknown conditioning mode")

    @property
    def k_vocab(self):
        return self.K + 2

    @property
    def bos_id(self):
        return self.K

    @property
    def pad_id(self):
        return self.K + 1

    @property
    def prefix_len(self):
        return SCENE_PATCHES + 1 if self.conditioning == "prefix" else 0

    @property
    def context_len(self):
        return self.prefix_len + 1 + self.max_tokens  # prefix + BOS + motion


class TransformerBlock(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.hidden)
        self.attn = nn.MultiheadAttention(
            cfg.hidden, cfg.heads, dropout=cfg.dropout, batch_first=True
        )
        self.ln2 = nn.LayerNorm(cfg.hidden)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.hidden, 4 * cfg.hidden),
            nn.SiLU(),
            nn.Linear(4 * cfg.hidden, cfg.hidden),
            nn.Dropout(cfg.dropout),
        )

    def forward(self, x, mask):
        h = self.ln1(x)
        a, _ = self.attn(h, h, h, attn_mask=mask, need_weights=False)
        x = x + a
        return x + self.mlp(self.ln2(x))


class MotionPlanner(nn.Module):
    def __init__(self, cfg, seed=0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        self.token_emb = nn.Embedding(cfg.k_vocab, cfg.hidden)
        self.pos_emb = nn.Embedding(cfg.context_len, cfg.hidden)
        self.scene_proj = nn.Linear(SCENE_DIM, cfg.hidden)
        self.text_proj = nn.Linear(TEXT_DIM, cfg.hidden)
        self.null_scene = nn.Parameter(torch.zeros(cfg.hidden))
        self.null_text = nn.Parameter(torch.zeros(cfg.hidden))
        self.blocks = nn.ModuleList([TransformerBlock(cfg) for _ in range(cfg.layers)])
        self.ln_f = nn.LayerNorm(cfg.hidden)
        self.head = nn.Linear(cfg.hidden, cfg.k_vocab)
        # small head init keeps the initial loss at the uniform anchor
        nn.init.normal_(self.head.weight, std=0.01)
        nn.init.zeros_(self.head.bias)

    def _cond_embeddings(self, f_text, f_dino, text_dropped, scene_dropped):
        """Projected conditioning tokens with null replacement for drops.

        f_text: (B, 1024); f_dino: (B, 49, 768); drop flags: (B,) bool.
        Returns scene tokens (B, 49, H) and text token (B, 1, H).
        """
        b = f_text.shape[0]
        scene_tok = self.scene_proj(f_dino)
        null_scene = self.null_scene.expand(b, SCENE_PATCHES, -1)
        scene_tok = torch.where(scene_dropped.view(b, 1, 1), null_scene, scene_tok)
        text_tok = self.text_proj(f_text).unsqueeze(1)
        null_text = self.null_text.expand(b, 1, -1)
        text_tok = torch.where(text_dropped.view(b, 1, 1), null_text, text_tok)
        return scene_tok, text_tok

    def forward(self, token_ids, f_text, f_dino, text_dropped=None, scene_dropped=None):
        """Logits for next-token prediction at every motion position.

        token_ids: (B, T) starting with BOS, T <= max_tokens + 1.
        Returns (B, T, K_vocab).
        """
        b, t = token_ids.shape
        if t > self.cfg.max_tokens + 1:
            raise ContextOverflow(f"{t} motion positions > {self.cfg.max_tokens + 1}")
        if f_text.shape != (b, TEXT_DIM) or f_dino.shape != (b, SCENE_PATCHES, SCENE_DIM):
            raise ShapeMismatch("conditioning tensor shapes are wrong")
        if text_dropped is None:
            text_dropped = torch.zeros(b, dtype=torch.bool)
        if scene_dropped is None:
            scene_dropped = torch.zeros(b, dtype=torch.bool)

        scene_tok, text_tok = self._cond_embeddings(f_text, f_dino, text_dropped, scene_dropped)
        tok = self.token_emb(token_ids)
        if self.cfg.conditioning == "prefix":
            x = torch.cat([scene_tok, text_tok, tok], dim=1)
        else:
            pooled = scene_tok.mean(dim=1, keepdim=True) + text_tok
            x = tok + pooled
        seq_len = x.shape[1]
        x = x + self.pos_emb.weight[:seq_len][None]

        mask = torch.triu(torch.full((seq_len, seq_len), float("-inf")), diagonal=1)
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_f(x)
        logits = self.head(x)
        return logits[:, -t:]  # motion-token positions only


def plan_logits(model, prefix_ids, cond):
    """Logits (T, K_vocab) for a single token prefix and conditioning bundle."""
    ids = torch.as_tensor(np.asarray(prefix_ids), dtype=torch.long)[None]
    f_text = torch.as_tensor(cond.f_text, dtype=torch.float32)[None]
    f_dino = torch.as_tensor(cond.f_dino, dtype=torch.float32)[None]
    with torch.no_grad():
        logits = model(
            ids,
            f_text,
            f_dino,
            text_dropped=torch.tensor([cond.text_dropped]),
            scene_dropped=torch.tensor([cond.scene_dropped]),
        )
    return logits[0]


def planner_loss(model, token_ids, f_text, f_dino, drop_rng=None, cond_drop_prob=None):
    """Teacher-forced mean cross-entropy over non-PAD positions.

    token_ids: (B, n_tokens) ground-truth motion tokens (no BOS). Each sample
    independently drops text and scene conditions for CFG training.
    """
    cfg = model.cfg
    b, t = token_ids.shape
    p = cfg.cond_drop_prob if cond_drop_prob is None else cond_drop_prob
    if drop_rng is not None and p > 0:
        text_dropped = torch.as_tensor(drop_rng.random(b) < p)
        scene_dropped = torch.as_tensor(drop_rng.random(b) < p)
    else:
        text_dropped = torch.zeros(b, dtype=torch.bool)
        scene_dropped = torch.zeros(b, dtype=torch.bool)

    bos = torch.full((b, 1), cfg.bos_id, dtype=torch.long)
    inputs = torch.cat([bos, token_ids[:, :-1]], dim=1)
    logits = model(inputs, f_text, f_dino, text_dropped, scene_dropped)
    valid = token_ids != cfg.pad_id
    loss = F.cross_entropy(
        logits.reshape(-1, cfg.k_vocab), token_ids.reshape(-1), reduction="none"
    )
    return (loss * valid.reshape(-1)).sum() / valid.sum().clamp(min=1)


def _guided_logits(model, ids, cond, scale):
    cond_logits = model(
        ids,
        cond["f_text"],
        cond["f_dino"],
        text_dropped=cond["text_dropped"],
        scene_dropped=cond["scene_dropped"],
    )[:, -1]
    if scale == 1.0:
        return cond_logits
    uncond_logits = model(
        ids,
        cond["f_text"],
        cond["f_dino"],
        text_dropped=torch.ones(ids.shape[0], dtype=torch.bool),
        scene_dropped=torch.ones(ids.shape[0], dtype=torch.bool),
    )[:, -1]
    if scale == 0.0:
        return uncond_logits
    return uncond_logits + scale * (cond_logits - uncond_logits)


@torch.no_grad()
def sample_plan(model, cond_bundle, n_tokens=None, mode="greedy", temperature=1.0,
                guidance_scale=None, seed=0):
    """Autoregressive decoding with classifier-free guidance.

    Returns an (n_tokens,) int array of codebook indices; BOS/PAD are never
    emitted.
    """
    cfg = model.cfg
    n_tokens = cfg.max_tokens if n_tokens is None else n_tokens
    if n_tokens > cfg.max_tokens:
        raise ContextOverflow(f"{n_tokens} tokens > max_tokens={cfg.max_tokens}")
    scale = cfg.guidance_scale if guidance_scale is None else guidance_scale
    cond = {
        "f_text": torch.as_tensor(cond_bundle.f_text, dtype=torch.float32)[None],
        "f_dino": torch.as_tensor(cond_bundle.f_dino, dtype=torch.float32)[None],
        "text_dropped": torch.tensor([cond_bundle.text_dropped]),
        "scene_dropped": torch.tensor([cond_bundle.scene_dropped]),
    }
    gen = torch.Generator().manual_seed(seed)
    ids = torch.full((1, 1), cfg.bos_id, dtype=torch.long)
    out = []
    for _ in range(n_tokens):
        logits = _guided_logits(model, ids, cond, scale).clone()
        logits[:, cfg.bos_id] = float("-inf")
        logits[:, cfg.pad_id] = float("-inf")
        if mode == "greedy":
            nxt = logits.argmax(dim=-1)
        elif mode == "categorical":
            probs = F.softmax(logits / max(temperature, 1e-8), dim=-1)
            nxt = torch.multinomial(probs, 1, generator=gen)[:, 0]
        else:
            raise ValueError(f"unknown sampling mode {mode!r}")
        out.append(int(nxt.item()))
        ids = torch.cat([ids, nxt[:, None]], dim=1)
    return np.array(out, dtype=np.int64)


def save_token_dataset(path, tokens, records):
    """TOKS1 file: u32 count, u32 n_tokens, count x n_tokens u16 indices.

    A JSON sidecar (path + '.json') links each row to its scene/prompt ids.
    """
    arr = np.ascontiguousarray(tokens, dtype="<u2")
    if arr.ndim != 2:
        raise ShapeMismatch("tokens must be (count, n_tokens)")
    with open(path, "wb") as fh:
        fh.write(_TOKS_MAGIC)
        fh.write(struct.pack("<II", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())
    with open(str(path) + ".json", "w") as fh:
        json.dump(records, fh, indent=2)


def load_token_dataset(path):
    with open(path, "rb") as fh:
        if fh.read(5) != _TOKS_MAGIC:
            raise FileCorrupt(f"bad magic in {path}")
        count, n_tokens = struct.unpack("<II", fh.read(8))
        payload = fh.read(count * n_tokens * 2)
        if len(payload) != count * n_tokens * 2:
            raise FileCorrupt(f"truncated payload in {path}")
    tokens = np.frombuffer(payload, dtype="<u2").reshape(count, n_tokens).astype(np.int64)
    with open(str(path) + ".json") as fh:
        records = json.load(fh)
    return tokens, records
