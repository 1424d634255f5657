"""Training loops, checkpointing, the cyclic inference loop, and evaluation.

A run directory accumulates three checkpoints (tokenizer, planner, refiner),
training logs, token datasets, and evaluation reports. Everything is
deterministic given the experiment config and seeds.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import (
    DatasetMissing,
    IncompatibleCheckpoints,
    NaNLoss,
    SpawnInvalid,
)
from .features import ConditioningBundle, scene_features, text_features
from .metrics import (
    MetricReport,
    contact_score,
    diversity,
    fid,
    footskate,
    goal_accuracy,
    mpjpe,
    mpjve,
    penetration,
    pfc,
)
from .motion import (
    FeatureLayout,
    MotionSequence,
    NormStats,
    RigidTransform,
    apply_rigid,
    denormalize,
    load_motion,
    normalize,
    root_positions,
)
from .planner import (
    MotionPlanner,
    PlannerConfig,
    planner_loss,
    sample_plan,
    save_token_dataset,
)
from .refiner import (
    RefinerConfig,
    TrajectoryRefiner,
    apply_refinement,
    local_features,
    root_velocity_columns,
    traj_loss,
)
from .rotations import rot6d_to_matrix_batch, rot_z, yaw_of
from .scene import extract_heightmap, load_scene, render_bev, surface_height
from .skeleton import default_skeleton
from .synth import (
    ROOT_HEIGHT,
    TARGET_SPECS,
    DatasetManifest,
    TaskSpec,
    generate_motion,
    window_sequences,
)
from .tokenizer import Codebook, LatentSequence, MotionTokenizer, TokenizerConfig, ema_update, vq_loss

LAYOUT = FeatureLayout(22)


# --------------------------------------------------------------------------
# Dataset access


def load_manifest(data_dir):
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DatasetMissing(f"no manifest.json under {data_dir}")
    manifest = DatasetManifest.from_json(path.read_text())
    stats_raw = json.loads((Path(data_dir) / manifest.norm_stats_file).read_text())
    stats = NormStats(mean=stats_raw["mean"], std=stats_raw["std"])
    return manifest, stats


def _world_yaws(seq):
    r6 = seq.frames[:, LAYOUT.j_r].astype(np.float64).reshape(seq.n_frames, 22, 6)
    mats = rot6d_to_matrix_batch(r6[:, 0])
    return np.array([yaw_of(m) for m in mats])


@dataclass
class WindowRecord:
    scene_id: str
    prompt: str
    kind: str
    canon: MotionSequence  # unnormalized canonical window
    transform: RigidTransform
    start: int
    pose_xy: np.ndarray  # world root xy at the window's first frame
    pose_yaw: float
    hm_poses: list  # per-token (xy, yaw) world pose for heightmap extraction


def collect_windows(data_dir, manifest, split, downsample=4):
    """Canonical windows of a split with the world poses needed to pair each
    token with its local heightmap (the pose of the last frame of the
    previous token; the window-start pose for token 0)."""
    data_dir = Path(data_dir)
    scenes = {}
    windows = []
    for rec in manifest.records:
        if rec["split"] != split:
            continue
        sid = rec["scene_id"]
        if sid not in scenes:
            scenes[sid] = load_scene(data_dir / "scenes" / f"{sid}.json")
        seq = load_motion(data_dir / rec["motion_file"])
        roots = root_positions(seq)
        yaws = _world_yaws(seq)
        n_tokens = manifest.window // downsample
        for canon, transform, s in window_sequences(seq, manifest.window, manifest.stride):
            hm_poses = []
            for j in range(n_tokens):
                f = s + max(j * downsample - 1, 0)
                hm_poses.append((roots[f, :2].copy(), float(yaws[f])))
            windows.append(
                WindowRecord(
                    scene_id=sid,
                    prompt=rec["prompt"],
                    kind=rec["kind"],
                    canon=canon,
                    transform=transform,
                    start=s,
                    pose_xy=roots[s, :2].copy(),
                    pose_yaw=float(yaws[s]),
                    hm_poses=hm_poses,
                )
            )
    if not windows:
        raise DatasetMissing(f"split {split!r} has no windows")
    return windows, scenes


def window_heightmaps(scene, record, g, radius):
    return np.stack(
        [extract_heightmap(scene, xy, yaw, g=g, radius=radius).grid for xy, yaw in record.hm_poses]
    )


def _split_tensors(windows, scenes, stats, tok_cfg):
    frames = np.stack([normalize(w.canon, stats).frames for w in windows])
    hms = np.stack(
        [
            window_heightmaps(scenes[w.scene_id], w, tok_cfg.heightmap_g, tok_cfg.heightmap_radius)
            for w in windows
        ]
    )
    return (
        torch.as_tensor(frames, dtype=torch.float32),
        torch.as_tensor(hms, dtype=torch.float32),
    )


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, kind, payload):
    torch.save({"kind": kind, **payload}, path)


def load_checkpoint(path, kind):
    path = Path(path)
    if not path.exists():
        raise IncompatibleCheckpoints(f"missing checkpoint {path}")
    data = torch.load(path, weights_only=False)
    if data.get("kind") != kind:
        raise IncompatibleCheckpoints(f"{path} holds {data.get('kind')!r}, wanted {kind!r}")
    return data


def _write_log(run_dir, name, log):
    with open(Path(run_dir) / f"{name}_log.json", "w") as fh:
        json.dump(log, fh, indent=2)


def _nan_dump(run_dir, name, step, indices):
    dump = {"model": name, "step": step, "batch_indices": [int(i) for i in indices]}
    with open(Path(run_dir) / f"{name}_nan_batch.json", "w") as fh:
        json.dump(dump, fh, indent=2)
    raise NaNLoss(f"{name} loss became non-finite at step {step}; batch dumped")


# --------------------------------------------------------------------------
# Tokenizer training


def _tokenizer_val_loss(model, frames, hms):
    with torch.no_grad():
        z = model.encode_batch(frames)
        zq, _ = model.quantize_batch(z)
        x_hat = model.decode_batch(zq, hms if model.cfg.scene_conditioning else None)
        loss, _ = vq_loss(frames, x_hat, z, zq, model.cfg)
    return float(loss)


def _record_run_info(run_dir, cfg, data_dir):
    info = {"data_dir": str(Path(data_dir).resolve()), "config_hash": cfg.config_hash()}
    with open(Path(run_dir) / "run.json", "w") as fh:
        json.dump(info, fh, indent=2)


def run_data_dir(run_dir):
    path = Path(run_dir) / "run.json"
    if not path.exists():
        raise DatasetMissing(f"{run_dir} has no run.json; train a model first")
    return json.loads(path.read_text())["data_dir"]


def train_tokenizer(cfg, data_dir, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    _record_run_info(run_dir, cfg, data_dir)
    manifest, stats = load_manifest(data_dir)
    tok_cfg = cfg.tokenizer
    ts = cfg.tokenizer_train

    train_w, train_scenes = collect_windows(data_dir, manifest, "train", tok_cfg.downsample)
    val_w, val_scenes = collect_windows(data_dir, manifest, "val", tok_cfg.downsample)
    x_train, hm_train = _split_tensors(train_w, train_scenes, stats, tok_cfg)
    x_val, hm_val = _split_tensors(val_w, val_scenes, stats, tok_cfg)

    model = MotionTokenizer(tok_cfg, seed=ts.seed)
    params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    if model.hm_encoder is not None:
        params += list(model.hm_encoder.parameters())
    opt = torch.optim.Adam(params, lr=ts.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=ts.steps)
    rng = np.random.default_rng(ts.seed)
    torch.manual_seed(ts.seed)

    log = []
    n = x_train.shape[0]
    for step in range(ts.steps):
        idx = rng.integers(0, n, size=min(ts.batch_size, n))
        x = x_train[idx]
        z = model.encode_batch(x)
        zq, assign = model.quantize_batch(z)
        x_hat = model.decode_batch(zq, hm_train[idx] if tok_cfg.scene_conditioning else None)
        loss, comps = vq_loss(x, x_hat, z, zq, tok_cfg)
        if not torch.isfinite(loss):
            _nan_dump(run_dir, "tokenizer", step, idx)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        ema_update(
            model.codebook,
            assign.numpy().ravel(),
            z.detach().numpy().reshape(-1, tok_cfg.D_z),
            tok_cfg,
            reset_rng=model._reset_rng,
        )
        if step % ts.log_every == 0 or step == ts.steps - 1:
            log.append(
                {
                    "step": step,
                    "loss": float(loss.detach()),
                    **{k: float(v.detach()) for k, v in comps.items() if k != "total"},
                }
            )

    val_loss = _tokenizer_val_loss(model, x_val, hm_val)
    with torch.no_grad():
        train_assign = model.quantize_batch(model.encode_batch(x_train))[1].numpy()
    usage = model.codebook.usage_histogram(train_assign)
    usage_frac = float((usage > 0).mean())

    save_checkpoint(
        run_dir / "tokenizer.pt",
        "tokenizer",
        {
            "state": model.state_dict(),
            "codebook": {
                "entries": model.codebook.entries,
                "ema_cluster_size": model.codebook.ema_cluster_size,
                "ema_embed_sum": model.codebook.ema_embed_sum,
                "usage_age": model.codebook.usage_age,
            },
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "norm_mean": stats.mean,
            "norm_std": stats.std,
            "val_loss": val_loss,
            "usage_counts": usage,
            "usage_fraction": usage_frac,
        },
    )
    _write_log(run_dir, "tokenizer", log)
    return {"val_loss": val_loss, "usage_fraction": usage_frac, "log": log}


def load_tokenizer(run_dir):
    data = load_checkpoint(Path(run_dir) / "tokenizer.pt", "tokenizer")
    tok_cfg = TokenizerConfig(**data["config"]["tokenizer"])
    model = MotionTokenizer(tok_cfg, seed=0)
    model.load_state_dict(data["state"])
    model.codebook = Codebook(**data["codebook"])
    model.eval()
    stats = NormStats(mean=data["norm_mean"], std=data["norm_std"])
    return model, stats, data


# --------------------------------------------------------------------------
# Planner training


def tokenize_windows(tokenizer, windows, scenes, stats):
    """(W, n_tokens) code indices for a list of window records."""
    frames, _ = _split_tensors(windows, scenes, stats, tokenizer.cfg)
    with torch.no_grad():
        z = tokenizer.encode_batch(frames)
        _, idx = tokenizer.quantize_batch(z)
    return idx.numpy().astype(np.int64)


def _window_conditioning(windows, scenes, feature_seed):
    texts, scenes_f = [], []
    text_cache = {}
    for w in windows:
        if w.prompt not in text_cache:
            text_cache[w.prompt] = text_features(w.prompt, seed=feature_seed)
        texts.append(text_cache[w.prompt])
        bev = render_bev(scenes[w.scene_id], center_xy=w.pose_xy, yaw=w.pose_yaw)
        scenes_f.append(scene_features(bev, seed=feature_seed))
    return np.stack(texts), np.stack(scenes_f)


def _token_records(windows):
    return [
        {
            "scene_id": w.scene_id,
            "prompt": w.prompt,
            "kind": w.kind,
            "window_start": w.start,
            "pose": [float(w.pose_xy[0]), float(w.pose_xy[1]), w.pose_yaw],
        }
        for w in windows
    ]


def token_accuracy(model, tokens, f_text, f_dino):
    """Teacher-forced next-token argmax accuracy."""
    cfg = model.cfg
    bos = torch.full((tokens.shape[0], 1), cfg.bos_id, dtype=torch.long)
    inputs = torch.cat([bos, tokens[:, :-1]], dim=1)
    with torch.no_grad():
        logits = model(inputs, f_text, f_dino)
    return float((logits.argmax(dim=-1) == tokens).float().mean())


def greedy_recovery(model, tokens, f_text, f_dino):
    """Fraction of rows whose full greedy rollout matches the target string."""
    hits = 0
    for i in range(tokens.shape[0]):
        bundle = ConditioningBundle(f_text=f_text[i].numpy(), f_dino=f_dino[i].numpy())
        out = sample_plan(model, bundle, n_tokens=tokens.shape[1], mode="greedy")
        hits += int(np.array_equal(out, tokens[i].numpy()))
    return hits / tokens.shape[0]


def train_planner(cfg, data_dir, run_dir):
    run_dir = Path(run_dir)
    manifest, stats = load_manifest(data_dir)
    tokenizer, tok_stats, tok_data = load_tokenizer(run_dir)
    if tok_data["config_hash"] != cfg.config_hash():
        raise IncompatibleCheckpoints("tokenizer checkpoint was trained under a different config")
    ps = cfg.planner_train

    data = {}
    for split in ("train", "val"):
        windows, scenes = collect_windows(data_dir, manifest, split, tokenizer.cfg.downsample)
        tokens = tokenize_windows(tokenizer, windows, scenes, stats)
        f_text, f_dino = _window_conditioning(windows, scenes, cfg.feature_seed)
        save_token_dataset(run_dir / f"tokens_{split}.toks", tokens, _token_records(windows))
        data[split] = (
            torch.as_tensor(tokens),
            torch.as_tensor(f_text),
            torch.as_tensor(f_dino),
        )

    model = MotionPlanner(cfg.planner, seed=ps.seed)
    opt = torch.optim.AdamW(model.parameters(), lr=ps.lr, weight_decay=ps.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=ps.steps)
    rng = np.random.default_rng(ps.seed)
    drop_rng = np.random.default_rng(ps.seed + 1)
    torch.manual_seed(ps.seed)

    tokens, f_text, f_dino = data["train"]
    n = tokens.shape[0]
    log = []
    for step in range(ps.steps):
        idx = rng.integers(0, n, size=min(ps.batch_size, n))
        loss = planner_loss(model, tokens[idx], f_text[idx], f_dino[idx], drop_rng=drop_rng)
        if not torch.isfinite(loss):
            _nan_dump(run_dir, "planner", step, idx)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % ps.log_every == 0 or step == ps.steps - 1:
            log.append({"step": step, "loss": float(loss.detach())})

    model.eval()
    v_tokens, v_text, v_dino = data["val"]
    with torch.no_grad():
        val_loss = float(planner_loss(model, v_tokens, v_text, v_dino))
    val_acc = token_accuracy(model, v_tokens, v_text, v_dino)

    save_checkpoint(
        run_dir / "planner.pt",
        "planner",
        {
            "state": model.state_dict(),
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "val_loss": val_loss,
            "val_token_accuracy": val_acc,
        },
    )
    _write_log(run_dir, "planner", log)
    return {"val_loss": val_loss, "val_token_accuracy": val_acc, "log": log}


def load_planner(run_dir):
    data = load_checkpoint(Path(run_dir) / "planner.pt", "planner")
    model = MotionPlanner(PlannerConfig(**data["config"]["planner"]), seed=0)
    model.load_state_dict(data["state"])
    model.eval()
    return model, data


# --------------------------------------------------------------------------
# Token-grammar probe

# Prompt phrasings per task kind. Within one scene every phrasing of a kind
# maps to the same token string, so the pairing (scene, phrasing) -> string
# forms a grammar whose compositional structure a planner can be probed on:
# holding out one phrasing of a scene tests whether it binds phrasing -> kind
# and scene -> string independently rather than memorizing whole pairs.
GRAMMAR_PROMPTS = {
    "walk_to": (
        "walk to the {label}",
        "go to the {label}",
        "approach the {label}",
    ),
    "sit_on": (
        "sit on the {label}",
        "sit down on the {label}",
        "take a seat on the {label}",
    ),
    "step_onto": (
        "step onto the {label}",
        "step up onto the {label}",
        "climb onto the {label}",
    ),
}


def _grammar_window(scene, scene_id, kind, task_seed, window, stride, downsample):
    """First canonical window of a deterministic task, as a WindowRecord."""
    label = scene.target_box.label
    seq, prompt = generate_motion(scene, TaskSpec(kind=kind, target_label=label, seed=task_seed))
    roots = root_positions(seq)
    yaws = _world_yaws(seq)
    canon, transform, s = window_sequences(seq, window, stride)[0]
    n_tokens = window // downsample
    hm_poses = []
    for j in range(n_tokens):
        f = s + max(j * downsample - 1, 0)
        hm_poses.append((roots[f, :2].copy(), float(yaws[f])))
    return WindowRecord(
        scene_id=scene_id,
        prompt=prompt,
        kind=kind,
        canon=canon,
        transform=transform,
        start=s,
        pose_xy=roots[s, :2].copy(),
        pose_yaw=float(yaws[s]),
        hm_poses=hm_poses,
    )


def grammar_experiment(
    run_dir,
    data_dir=None,
    holdout_frac=0.2,
    steps=3000,
    batch_size=32,
    lr=3e-4,
    seed=0,
):
    """Train a fresh planner on a scene/prompt -> token-string grammar and
    score it on held-out (scene, phrasing) pairs.

    For every training-split scene, one deterministic motion per compatible
    task kind is tokenized with the run's tokenizer; its first-window string
    is paired with each phrasing in GRAMMAR_PROMPTS. A fraction of scene/kind
    groups each hold out one phrasing: its string was seen for that scene
    under sibling phrasings, and the phrasing was seen on other scenes, so
    recovering it requires composing the two. Returns teacher-forced accuracy
    and full-string greedy recovery on the held-out pairs.
    """
    run_dir = Path(run_dir)
    tokenizer, stats, tok_data = load_tokenizer(run_dir)
    cfg_dict = tok_data["config"]
    feature_seed = int(cfg_dict.get("feature_seed", 0))
    if data_dir is None:
        data_dir = run_data_dir(run_dir)
    data_dir = Path(data_dir)
    manifest, _ = load_manifest(data_dir)

    windows = []  # one per (scene, kind)
    scenes = {}
    for i, sid in enumerate(manifest.splits["train"]):
        scene = load_scene(data_dir / "scenes" / f"{sid}.json")
        scenes[sid] = scene
        for kind in TARGET_SPECS[scene.target_box.label][2]:
            windows.append(
                _grammar_window(
                    scene,
                    sid,
                    kind,
                    task_seed=100_000 + i,
                    window=manifest.window,
                    stride=manifest.stride,
                    downsample=tokenizer.cfg.downsample,
                )
            )

    strings = tokenize_windows(tokenizer, windows, scenes, stats)
    scene_feats = {}
    for w in windows:
        key = (w.scene_id, w.kind)
        bev = render_bev(scenes[w.scene_id], center_xy=w.pose_xy, yaw=w.pose_yaw)
        scene_feats[key] = scene_features(bev, seed=feature_seed)

    rng = np.random.default_rng(seed)
    held_group = rng.random(len(windows)) < holdout_frac
    if not held_group.any():
        held_group[0] = True
    rows = {"train": [], "held": []}
    text_cache = {}
    for gi, w in enumerate(windows):
        variants = GRAMMAR_PROMPTS[w.kind]
        held_idx = int(rng.integers(0, len(variants))) if held_group[gi] else -1
        for vi, template in enumerate(variants):
            prompt = template.format(label=scenes[w.scene_id].target_box.label)
            if prompt not in text_cache:
                text_cache[prompt] = text_features(prompt, seed=feature_seed)
            dest = "held" if vi == held_idx else "train"
            rows[dest].append(
                (strings[gi], text_cache[prompt], scene_feats[(w.scene_id, w.kind)])
            )

    def _tensors(items):
        toks = torch.as_tensor(np.stack([r[0] for r in items]))
        f_text = torch.as_tensor(np.stack([r[1] for r in items]), dtype=torch.float32)
        f_dino = torch.as_tensor(np.stack([r[2] for r in items]), dtype=torch.float32)
        return toks, f_text, f_dino

    tokens, f_text, f_dino = _tensors(rows["train"])
    h_tokens, h_text, h_dino = _tensors(rows["held"])

    plan_cfg = PlannerConfig(**cfg_dict["planner"])
    model = MotionPlanner(plan_cfg, seed=seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    batch_rng = np.random.default_rng(seed)
    drop_rng = np.random.default_rng(seed + 1)
    torch.manual_seed(seed)

    n = tokens.shape[0]
    for step in range(steps):
        idx = batch_rng.integers(0, n, size=min(batch_size, n))
        loss = planner_loss(model, tokens[idx], f_text[idx], f_dino[idx], drop_rng=drop_rng)
        if not torch.isfinite(loss):
            raise NaNLoss(f"grammar planner loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()

    model.eval()
    return {
        "token_accuracy": token_accuracy(model, h_tokens, h_text, h_dino),
        "greedy_recovery": greedy_recovery(model, h_tokens, h_text, h_dino),
        "train_pairs": int(n),
        "held_pairs": int(h_tokens.shape[0]),
        "unique_strings": int(len({tuple(s) for s in strings})),
        "groups": int(len(windows)),
    }


# --------------------------------------------------------------------------
# Refiner training


def corrupt_root_drift(frames, rng, sigma):
    """Add a smooth root-velocity drift to t_delta and all world velocities.

    frames: (W, N, D) unnormalized; sigma: scalar or per-window (W,) levels.
    Returns (corrupted, clean_t_delta).
    """
    w, n, _ = frames.shape
    sigma = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (w,))
    noise = rng.standard_normal((w, n + 8, 3)) * sigma[:, None, None]
    kernel = np.ones(9) / 9.0
    drift = np.stack(
        [
            np.stack([np.convolve(noise[i, :, k], kernel, mode="valid") for k in range(3)], axis=-1)
            for i in range(w)
        ]
    )
    out = frames.copy()
    clean = frames[:, :, LAYOUT.t_delta].copy()
    out[:, :, LAYOUT.t_delta] += drift
    j_v = out[:, :, LAYOUT.j_v].reshape(w, n, 22, 3)
    j_v += drift[:, :, None, :]
    out[:, :, LAYOUT.j_v] = j_v.reshape(w, n, 66)
    return out, clean


def train_refiner(cfg, data_dir, run_dir):
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest, stats = load_manifest(data_dir)
    rs = cfg.refiner_train

    windows, _ = collect_windows(data_dir, manifest, "train")
    frames = np.stack([w.canon.frames for w in windows]).astype(np.float64)
    rng = np.random.default_rng(rs.seed)
    # mixed corruption levels (down to none) keep the trained refiner close
    # to the identity on already-clean trajectories
    sigmas = rng.uniform(0.0, 1.5 * cfg.corruption_sigma, size=frames.shape[0])
    corrupted, clean = corrupt_root_drift(frames, rng, sigmas)

    local_mean = stats.mean[3:].astype(np.float64)
    local_std = stats.std[3:].astype(np.float64)
    local_raw = local_features(corrupted)
    local = (local_raw - local_mean) / local_std
    local_t = torch.as_tensor(local, dtype=torch.float32)
    clean_t = torch.as_tensor(clean, dtype=torch.float32)
    # the model corrects the root's own (corrupted) velocity column
    base_t = torch.as_tensor(
        local_raw[..., root_velocity_columns(cfg.refiner.feature_dim)],
        dtype=torch.float32,
    )

    model = TrajectoryRefiner(cfg.refiner, seed=rs.seed)
    opt = torch.optim.Adam(model.parameters(), lr=rs.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=rs.steps)
    torch.manual_seed(rs.seed)

    n = local_t.shape[0]
    log = []
    for step in range(rs.steps):
        idx = rng.integers(0, n, size=min(rs.batch_size, n))
        pred = model(local_t[idx]) + base_t[idx]
        loss = traj_loss(clean_t[idx], pred, cfg.refiner.lambda_r, cfg.refiner.lambda_v)
        if not torch.isfinite(loss):
            _nan_dump(run_dir, "refiner", step, idx)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % rs.log_every == 0 or step == rs.steps - 1:
            log.append({"step": step, "loss": float(loss.detach())})

    model.eval()
    with torch.no_grad():
        val_loss = float(
            traj_loss(clean_t, model(local_t) + base_t, cfg.refiner.lambda_r, cfg.refiner.lambda_v)
        )

    save_checkpoint(
        run_dir / "refiner.pt",
        "refiner",
        {
            "state": model.state_dict(),
            "config": cfg.to_dict(),
            "config_hash": cfg.config_hash(),
            "input_mean": local_mean.astype(np.float32),
            "input_std": local_std.astype(np.float32),
            "val_loss": val_loss,
        },
    )
    _write_log(run_dir, "refiner", log)
    return {"val_loss": val_loss, "log": log}


def load_refiner(run_dir):
    data = load_checkpoint(Path(run_dir) / "refiner.pt", "refiner")
    model = TrajectoryRefiner(RefinerConfig(**data["config"]["refiner"]), seed=0)
    model.load_state_dict(data["state"])
    model.eval()
    return model, (data["input_mean"], data["input_std"]), data


# --------------------------------------------------------------------------
# Generation


@dataclass
class GenerationRequest:
    scene: object
    prompt: str
    start: tuple  # (x, y, yaw)
    cycles: int = 3
    guidance_scale: float = 2.0
    mode: str = "greedy"
    seed: int = 0
    refine: bool = True


@dataclass
class LoadedRun:
    tokenizer: MotionTokenizer
    planner: MotionPlanner
    refiner: TrajectoryRefiner
    refiner_stats: tuple
    stats: NormStats
    feature_seed: int
    use_refiner: bool


@dataclass
class GenerationResult:
    motion: MotionSequence  # refined (or pre-refinement if refine disabled)
    pre_refined: MotionSequence
    cycles: list  # per cycle: tokens, heightmaps, transform, heightmap poses


def load_run(run_dir):
    tokenizer, stats, tok_data = load_tokenizer(run_dir)
    planner, plan_data = load_planner(run_dir)
    if plan_data["config_hash"] != tok_data["config_hash"]:
        raise IncompatibleCheckpoints("tokenizer and planner come from different configs")
    if planner.cfg.K != tokenizer.cfg.K:
        raise IncompatibleCheckpoints("tokenizer and planner disagree on K")
    cfg_dict = tok_data["config"]
    use_refiner = bool(cfg_dict.get("use_refiner", True))
    refiner, refiner_stats = None, None
    if use_refiner and (Path(run_dir) / "refiner.pt").exists():
        refiner, refiner_stats, ref_data = load_refiner(run_dir)
        if ref_data["config_hash"] != tok_data["config_hash"]:
            raise IncompatibleCheckpoints("refiner comes from a different config")
    return LoadedRun(
        tokenizer=tokenizer,
        planner=planner,
        refiner=refiner,
        refiner_stats=refiner_stats,
        stats=stats,
        feature_seed=int(cfg_dict.get("feature_seed", 0)),
        use_refiner=use_refiner and refiner is not None,
    )


def _decoded_pose(norm_frames, stats, root, yaw, upto):
    """World (xy, yaw) of decoded frame `upto` given the cycle's start pose.

    norm_frames: normalized canonical frames covering at least upto + 1 rows.
    """
    frames = norm_frames[: upto + 1].astype(np.float64) * stats.std.astype(np.float64) + stats.mean.astype(np.float64)
    deltas = frames[:upto, LAYOUT.t_delta] @ rot_z(yaw).T
    xy = np.asarray(root[:2], dtype=np.float64) + deltas[:, :2].sum(axis=0)
    r6 = frames[upto, LAYOUT.j_r].reshape(22, 6)
    frame_yaw = yaw + yaw_of(rot6d_to_matrix_batch(r6[:1])[0])
    return xy, float(frame_yaw)


def _decode_cycle(run, scene, tokens, root, yaw):
    """Incremental causal decode of one cycle; heightmap for token j comes
    from the pose of the last decoded frame of token j - 1 (the cycle start
    pose for j = 0). Returns (normalized frames, heightmaps, hm poses)."""
    tok = run.tokenizer
    d = tok.cfg.downsample
    codes = tok.codes_from_indices(tokens)
    hms, poses = [], []
    norm_frames = None
    for j in range(len(tokens)):
        if j == 0:
            hxy, hyaw = np.asarray(root[:2], dtype=np.float64), float(yaw)
        else:
            hxy, hyaw = _decoded_pose(norm_frames, run.stats, root, yaw, j * d - 1)
        poses.append((hxy, hyaw))
        hms.append(
            extract_heightmap(
                scene, hxy, hyaw, g=tok.cfg.heightmap_g, radius=tok.cfg.heightmap_radius
            ).grid
        )
        latent = LatentSequence(z=codes[: j + 1], quantized=True, indices=tokens[: j + 1])
        norm_frames = tok.decode(latent, np.stack(hms))
    return norm_frames, np.stack(hms), poses


def generate(request, run):
    """Cyclic inference: per cycle refresh conditioning at the current pose,
    sample a token plan, decode incrementally with per-token heightmaps, and
    seed the next cycle from the final pose. Refinement is applied last."""
    scene = request.scene
    x, y, yaw = request.start
    if surface_height(scene, x, y) > scene.floor_z + 1e-9:
        raise SpawnInvalid(f"start ({x:.2f}, {y:.2f}) is on top of scene geometry")
    if request.cycles < 1:
        raise ValueError("cycles must be >= 1")

    stats = run.stats
    n_tok = run.tokenizer.cfg.n_tokens
    root = np.array([x, y, scene.floor_z + ROOT_HEIGHT], dtype=np.float64)
    cur_yaw = float(yaw)
    start_root, start_yaw = root.copy(), cur_yaw

    all_frames = []
    cycle_logs = []
    f_text = None
    for c in range(request.cycles):
        f_text = text_features(request.prompt, seed=run.feature_seed)
        bev = render_bev(scene, center_xy=root[:2], yaw=cur_yaw)
        f_dino = scene_features(bev, seed=run.feature_seed)
        bundle = ConditioningBundle(f_text=f_text, f_dino=f_dino)
        tokens = sample_plan(
            run.planner,
            bundle,
            n_tokens=n_tok,
            mode=request.mode,
            guidance_scale=request.guidance_scale,
            seed=request.seed * 1009 + c,
        )
        norm_frames, hms, hm_poses = _decode_cycle(run, scene, tokens, root, cur_yaw)
        canon = MotionSequence(frames=norm_frames, normalized=True)
        transform = RigidTransform(translation=root.copy(), yaw=cur_yaw)
        world = apply_rigid(denormalize(canon, stats), transform)
        all_frames.append(world.frames)
        cycle_logs.append(
            {
                "tokens": tokens,
                "heightmaps": hms,
                "root": root.copy(),
                "yaw": cur_yaw,
                "hm_poses": [(xy.copy(), hyaw) for xy, hyaw in hm_poses],
            }
        )
        roots = root_positions(world)
        last_delta = world.frames[-1, LAYOUT.t_delta].astype(np.float64)
        root = roots[-1] + last_delta
        _, cur_yaw = _decoded_pose(norm_frames, stats, cycle_logs[-1]["root"], cycle_logs[-1]["yaw"], norm_frames.shape[0] - 1)

    pre = MotionSequence(
        frames=np.concatenate(all_frames),
        root_start=start_root,
        yaw_start=start_yaw,
        normalized=False,
    )
    motion = pre
    if request.refine and run.use_refiner:
        motion = apply_refinement(pre, run.refiner, input_stats=run.refiner_stats)
    return GenerationResult(motion=motion, pre_refined=pre, cycles=cycle_logs)


def replay(run, cycle_logs):
    """Re-decode logged tokens + heightmaps; reproduces the pre-refinement
    motion bit-exactly."""
    stats = run.stats
    tok = run.tokenizer
    all_frames = []
    first = cycle_logs[0]
    for log in cycle_logs:
        tokens = np.asarray(log["tokens"])
        latent = LatentSequence(
            z=tok.codes_from_indices(tokens), quantized=True, indices=tokens
        )
        norm_frames = tok.decode(latent, np.asarray(log["heightmaps"]))
        canon = MotionSequence(frames=norm_frames, normalized=True)
        transform = RigidTransform(translation=np.asarray(log["root"]), yaw=log["yaw"])
        all_frames.append(apply_rigid(denormalize(canon, stats), transform).frames)
    return MotionSequence(
        frames=np.concatenate(all_frames),
        root_start=np.asarray(first["root"]),
        yaw_start=float(first["yaw"]),
        normalized=False,
    )


# --------------------------------------------------------------------------
# Evaluation


def reconstruct_windows(tokenizer, windows, scenes, stats):
    """Tokenizer round trips of canonical windows; returns unnormalized
    reconstructions aligned with each record's canonical ground truth."""
    frames, hms = _split_tensors(windows, scenes, stats, tokenizer.cfg)
    with torch.no_grad():
        z = tokenizer.encode_batch(frames)
        zq, _ = tokenizer.quantize_batch(z)
        x_hat = tokenizer.decode_batch(zq, hms if tokenizer.cfg.scene_conditioning else None)
    out = []
    for i in range(x_hat.shape[0]):
        recon = MotionSequence(frames=x_hat[i].numpy(), normalized=True)
        out.append(denormalize(recon, stats))
    return out


def evaluate_run(run_dir, data_dir, split="test", out_dir=None, cycles=3, limit=None):
    """Generate one sequence per (scene, prompt) of the split and score it
    against held-out ground truth. Writes metrics.json/.csv and the raw
    trajectories when out_dir is given."""
    run = load_run(run_dir)
    manifest, stats = load_manifest(data_dir)
    skeleton = default_skeleton()
    data_dir = Path(data_dir)

    records = [r for r in manifest.records if r["split"] == split]
    if limit is not None:
        records = records[:limit]
    if not records:
        raise DatasetMissing(f"split {split!r} is empty")

    scenes = {}
    gt_motions = []
    generated = []
    pairs = []
    traj_rows = []
    for i, rec in enumerate(records):
        sid = rec["scene_id"]
        if sid not in scenes:
            scenes[sid] = load_scene(data_dir / "scenes" / f"{sid}.json")
        scene = scenes[sid]
        gt = load_motion(data_dir / rec["motion_file"])
        gt_motions.append(gt)
        request = GenerationRequest(
            scene=scene,
            prompt=rec["prompt"],
            start=(float(gt.root_start[0]), float(gt.root_start[1]), float(gt.yaw_start)),
            cycles=cycles,
            seed=i,
        )
        result = generate(request, run)
        generated.append(result.motion)
        pairs.append((result.motion, scene))
        path = root_positions(result.motion)[:, :2]
        traj_rows.append(
            {
                "scene_id": sid,
                "prompt": rec["prompt"],
                "kind": rec["kind"],
                "path": np.round(path, 4).tolist(),
                "target": [float(v) for v in scene.target_box.center_xy],
                "boxes": [
                    {"min": list(b.min[:2]), "max": list(b.max[:2]), "target": b.target}
                    for b in scene.boxes
                ],
            }
        )

    contact_vals, pen_means, pen_maxes, pfc_vals, skate_vals = [], [], [], [], []
    for motion, scene in pairs:
        contact_vals.append(contact_score(motion, scene, skeleton))
        m, x = penetration(motion, scene, skeleton)
        pen_means.append(m)
        pen_maxes.append(x)
        pfc_vals.append(pfc(motion, skeleton))
        skate_vals.append(footskate(motion, skeleton))

    windows, win_scenes = collect_windows(data_dir, manifest, split, run.tokenizer.cfg.downsample)
    recons = reconstruct_windows(run.tokenizer, windows, win_scenes, stats)
    mpjpe_vals = [mpjpe(r, w.canon, skeleton) for r, w in zip(recons, windows)]
    mpjve_vals = [mpjve(r, w.canon, skeleton) for r, w in zip(recons, windows)]

    report = MetricReport(
        mpjpe_mm=float(np.mean(mpjpe_vals)),
        mpjve_mm=float(np.mean(mpjve_vals)),
        contact=float(np.mean(contact_vals)),
        penetration_mean_mm=float(np.mean(pen_means)),
        penetration_max_mm=float(np.max(pen_maxes)),
        pfc=float(np.mean(pfc_vals)),
        footskate_m=float(np.mean(skate_vals)),
        fid=fid(gt_motions, generated, skeleton),
        diversity=diversity(generated, skeleton),
        goal_accuracy=goal_accuracy(pairs),
        sample_count=len(records),
    )

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w") as fh:
            json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        with open(out / "metrics.csv", "w") as fh:
            fh.write("metric,value\n")
            for key, value in sorted(report.as_dict().items()):
                fh.write(f"{key},{value:.10g}\n")
        with open(out / "trajectories.json", "w") as fh:
            json.dump(traj_rows, fh)
    return report
