import numpy as np
import pytest

from scemos.errors import PathNotFound
from scemos.motion import (
    FeatureLayout,
    load_motion,
    root_positions,
    world_joint_positions,
)
from scemos.scene import load_scene, surface_height
from scemos.skeleton import default_skeleton
from scemos.synth import (
    TARGET_SPECS,
    DatasetManifest,
    TaskSpec,
    _leg_ik,
    astar,
    build_dataset,
    cell_center,
    count_windows,
    generate_motion,
    generate_scene,
    nearest_free_cell,
    occupancy_grid,
    point_cell,
    window_sequences,
)


def first_task(scene, seed=1):
    label = scene.target_box.label
    return TaskSpec(kind=TARGET_SPECS[label][2][0], target_label=label, seed=seed)


def test_generate_scene_deterministic():
    a = generate_scene(7)
    b = generate_scene(7)
    assert a.to_json() == b.to_json()


def test_scene_boxes_inside_bounds_and_disjoint():
    for seed in range(30):
        scene = generate_scene(seed)
        (x0, y0), (x1, y1) = scene.bounds
        boxes = scene.boxes
        assert 3 <= len(boxes) <= 8
        assert sum(b.target for b in boxes) == 1
        for b in boxes:
            assert x0 <= b.min[0] and b.max[0] <= x1
            assert y0 <= b.min[1] and b.max[1] <= y1
        # brute-force pairwise AABB overlap check on footprints
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                a, b = boxes[i], boxes[j]
                overlap = (
                    a.min[0] < b.max[0]
                    and a.max[0] > b.min[0]
                    and a.min[1] < b.max[1]
                    and a.max[1] > b.min[1]
                )
                assert not overlap


def test_reachability_100_seeds():
    hits = 0
    for seed in range(100):
        scene = generate_scene(seed)
        blocked = occupancy_grid(scene)
        goal = nearest_free_cell(blocked, point_cell(scene, scene.target_box.center_xy))
        free = np.argwhere(~blocked)
        rng = np.random.default_rng(seed)
        start = tuple(free[rng.integers(0, len(free))])
        path = astar(blocked, start, goal)
        assert path[0] == start and path[-1] == goal
        hits += 1
    assert hits == 100


def test_astar_optimal_on_open_grid():
    blocked = np.zeros((9, 9), dtype=bool)
    path = astar(blocked, (0, 0), (8, 8))
    # pure diagonal: 8 sqrt(2) steps
    assert len(path) == 9
    cost = sum(
        np.hypot(a[0] - b[0], a[1] - b[1]) for a, b in zip(path, path[1:])
    )
    assert abs(cost - 8 * np.sqrt(2)) < 1e-9


def test_astar_routes_around_wall():
    blocked = np.zeros((9, 9), dtype=bool)
    blocked[4, :8] = True
    path = astar(blocked, (0, 0), (8, 0))
    assert all(not blocked[c] for c in path)
    assert any(c[1] == 8 for c in path)  # forced around the gap


def test_astar_raises_when_sealed():
    blocked = np.zeros((5, 5), dtype=bool)
    blocked[2, :] = True
    with pytest.raises(PathNotFound):
        astar(blocked, (0, 0), (4, 4))


def test_leg_ik_reaches_heel_target():
    rng = np.random.default_rng(0)
    from scemos.skeleton import SHANK_LEN, THIGH_LEN

    for _ in range(200):
        hip = rng.uniform(-1, 1, 3) + [0, 0, 1.0]
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        reach = rng.uniform(abs(THIGH_LEN - SHANK_LEN) + 0.01, THIGH_LEN + SHANK_LEN - 0.01)
        target = hip + reach * direction
        fwd = rng.standard_normal(3)
        fwd /= np.linalg.norm(fwd)
        r_hip, r_knee = _leg_ik(hip, target, fwd)
        # FK down the chain: thigh then shank
        knee = hip + r_hip @ np.array([0.0, 0.0, -THIGH_LEN])
        heel = knee + r_knee @ np.array([0.0, 0.0, -SHANK_LEN])
        np.testing.assert_allclose(heel, target, atol=1e-9)
        for r in (r_hip, r_knee):
            np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
            assert np.linalg.det(r) > 0


def test_generate_motion_deterministic():
    scene = generate_scene(3)
    task = first_task(scene)
    a, pa = generate_motion(scene, task)
    b, pb = generate_motion(scene, task)
    assert pa == pb
    np.testing.assert_array_equal(a.frames, b.frames)
    np.testing.assert_array_equal(a.root_start, b.root_start)


def test_generate_motion_rejects_incompatible_task():
    scene = generate_scene(3)
    wrong = "step_onto" if scene.target_box.label != "platform" else "sit_on"
    with pytest.raises(ValueError):
        generate_motion(scene, TaskSpec(kind=wrong, target_label=scene.target_box.label, seed=0))


def test_generated_motion_physical_consistency():
    skeleton = default_skeleton()
    layout = FeatureLayout(22)
    for seed in (0, 1, 2, 3):
        scene = generate_scene(seed)
        label = scene.target_box.label
        for kind in TARGET_SPECS[label][2]:
            task = TaskSpec(kind=kind, target_label=label, seed=seed + 11)
            seq, prompt = generate_motion(scene, task, skeleton)
            assert prompt == f"{kind.replace('_', ' ')} the {label}"
            pos = world_joint_positions(seq, skeleton)
            # zero penetration against the surface oracle
            worst = -1.0
            for i in range(0, seq.n_frames, 2):
                for j in range(skeleton.joint_count):
                    s = surface_height(scene, pos[i, j, 0], pos[i, j, 1])
                    worst = max(worst, s - pos[i, j, 2] - 0.01)
            assert worst <= 0.0
            # final root near the target
            goal = np.linalg.norm(root_positions(seq)[-1][:2] - scene.target_box.center_xy)
            assert goal <= 0.5
            # >= 95% of labeled contact frames are genuinely static
            cf = seq.frames[:, layout.c_f]
            foot = pos[:, list(skeleton.foot_joint_ids)]
            speed = np.linalg.norm(np.diff(foot, axis=0), axis=-1)
            labeled = cf[:-1] > 0.5
            assert labeled.any()
            assert (speed[labeled] < 0.005).mean() >= 0.95
            # every frame keeps at least one foot in contact
            assert (cf.sum(axis=1) > 0).mean() >= 0.95


def test_window_count_arithmetic():
    assert count_windows(80) == 1
    assert count_windows(79) == 0
    assert count_windows(120) == 2
    assert count_windows(160) == 3
    assert count_windows(200) == 4
    for n in (80, 123, 200, 317):
        assert count_windows(n) == max(0, (n - 80) // 40 + 1)


def test_window_sequences_canonical():
    scene = generate_scene(5)
    seq, _ = generate_motion(scene, first_task(scene))
    layout = FeatureLayout(22)
    wins = window_sequences(seq)
    assert len(wins) == count_windows(seq.n_frames)
    roots = root_positions(seq)
    for canon, transform, start in wins:
        assert canon.n_frames == 80
        np.testing.assert_allclose(canon.root_start, 0.0, atol=1e-6)
        r6 = canon.frames[0, layout.j_r].reshape(22, 6)
        from scemos.rotations import rot6d_to_matrix, yaw_of

        assert abs(yaw_of(rot6d_to_matrix(r6[0]))) < 1e-6
        # transform maps the canonical window back to its world placement
        np.testing.assert_allclose(
            transform.apply_point(canon.root_start), roots[start], atol=1e-5
        )


def test_build_dataset_small(tmp_path):
    manifest = build_dataset(tmp_path, n_scenes=(2, 1, 1), tasks_per_scene=2, seed=9)
    assert set(manifest.splits) == {"train", "val", "test"}
    ids = [sid for split in manifest.splits.values() for sid in split]
    assert len(ids) == len(set(ids)) == 4
    assert len(manifest.records) == 8
    # reload everything bit-exactly
    text = (tmp_path / "manifest.json").read_text()
    back = DatasetManifest.from_json(text)
    assert back.records == manifest.records
    for rec in manifest.records:
        seq = load_motion(tmp_path / rec["motion_file"])
        assert seq.n_frames >= 80
        scene = load_scene(tmp_path / "scenes" / f"{rec['scene_id']}.json")
        assert scene.target_box.label == rec["target_label"]
    import json

    stats = json.loads((tmp_path / manifest.norm_stats_file).read_text())
    assert len(stats["mean"]) == 268 and len(stats["std"]) == 268
    assert min(stats["std"]) > 0


def test_build_dataset_deterministic(tmp_path):
    m1 = build_dataset(tmp_path / "a", n_scenes=(1, 1, 1), tasks_per_scene=1, seed=4)
    m2 = build_dataset(tmp_path / "b", n_scenes=(1, 1, 1), tasks_per_scene=1, seed=4)
    assert m1.to_json() == m2.to_json()
    for rec in m1.records:
        a = (tmp_path / "a" / rec["motion_file"]).read_bytes()
        b = (tmp_path / "b" / rec["motion_file"]).read_bytes()
        assert a == b


def test_cell_round_trips():
    scene = generate_scene(0)
    for cell in [(0, 0), (5, 7), (31, 31)]:
        xy = cell_center(scene, cell)
        assert point_cell(scene, xy) == cell
