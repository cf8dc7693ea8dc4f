"""Reward semantics, border statistics, and coordinator features.

Geometric pieces are checked against independent brute-force oracles: dense
segment sampling for the pass predicate and per-cell distance scans for the
occupancy ring.
"""
import numpy as np
import pytest

from seekgrasp.config import DataError, RewardConfig, WorldConfig, make_rng
from seekgrasp.qfunc import QMaps, argmax_action, valid_mask
from seekgrasp.rewardlab import (BorderStats, GraspHistory, border_occupancy,
                                 crop_heightmap, extract_domain_features,
                                 push_passes_target, reward_explore,
                                 reward_grasp, reward_push, target_moved)
from seekgrasp.world import (ObjectInstance, PushCommand, SceneState,
                             ShapeSpec, StepOutcome, apply_push, footprint,
                             visible_count)

CFG = WorldConfig()


def _rect(oid, dims, height, x, y, theta=0.0, layer=0):
    return ObjectInstance(id=oid, shape=ShapeSpec("rectangle", dims, height),
                          pose=(x, y, theta), layer=layer)


def _push_outcome(start, end, moved=()):
    return StepOutcome(kind="push", push_start=start, push_end=end,
                       moved_ids=list(moved))


def _grasp_outcome(success, grasped=None):
    return StepOutcome(kind="grasp", grasp_success=success, grasped_id=grasped)


# ---------------------------------------------------------------------------
# pass predicate vs dense sampling oracle


def _oracle_passes(start, end, mask, half_width, samples=4000):
    """Min distance from each cell to densely sampled segment points."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0 or start == end:
        return False
    t = np.linspace(0.0, 1.0, samples)
    sx = start[0] + t * (end[0] - start[0])
    sy = start[1] + t * (end[1] - start[1])
    for r, c in zip(rows, cols):
        d = np.hypot(sx - c, sy - r).min()
        if d <= half_width:
            return True
    return False


def test_push_passes_target_matches_dense_sampling():
    rng = make_rng("pass-oracle", 0)
    mask = np.zeros((64, 64), dtype=bool)
    mask[28:33, 30:36] = True
    half = CFG.push_width / 2.0
    checked = 0
    for _ in range(120):
        x0, y0 = rng.uniform(0, 63, size=2)
        ang = rng.uniform(0, 2 * np.pi)
        end = (x0 + 10 * np.cos(ang), y0 + 10 * np.sin(ang))
        out = _push_outcome((x0, y0), end)
        # skip knife-edge geometry where a sampling oracle cannot decide
        rows, cols = np.nonzero(mask)
        pts = np.stack([cols, rows], axis=1).astype(float)
        t = np.linspace(0, 1, 4000)
        seg = np.stack([x0 + t * (end[0] - x0), y0 + t * (end[1] - y0)], axis=1)
        dmin = min(np.hypot(seg[:, 0] - p[0], seg[:, 1] - p[1]).min() for p in pts)
        if abs(dmin - half) < 0.02:
            continue
        checked += 1
        assert push_passes_target(out, mask) == _oracle_passes(
            (x0, y0), end, mask, half)
    assert checked > 80


def test_push_passes_zero_travel_is_false():
    mask = np.zeros((64, 64), dtype=bool)
    mask[30:34, 30:34] = True
    out = _push_outcome((31.0, 31.0), (31.0, 31.0))
    assert not push_passes_target(out, mask)  # starts inside, but never moved


def test_push_passes_empty_mask_is_false():
    out = _push_outcome((10.0, 10.0), (20.0, 10.0))
    assert not push_passes_target(out, np.zeros((64, 64), dtype=bool))


def test_push_predicate_rejects_grasp_outcome():
    with pytest.raises(DataError):
        push_passes_target(_grasp_outcome(False), np.ones((8, 8), dtype=bool))


# ---------------------------------------------------------------------------
# border occupancy vs per-cell scan oracle


def _oracle_border(depth, tgt, ring_r):
    h, w = tgt.shape
    rows, cols = np.nonzero(tgt)
    ring = np.zeros_like(tgt)
    for r in range(h):
        for c in range(w):
            if tgt[r, c]:
                continue
            d2 = ((rows - r) ** 2 + (cols - c) ** 2).min()
            if d2 <= ring_r * ring_r:
                ring[r, c] = True
    occ = ring & (depth > 1e-9)
    perim = 0
    for r, c in zip(rows, cols):
        nbrs = [(r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)]
        if any(not (0 <= rr < h and 0 <= cc < w) or not tgt[rr, cc]
               for rr, cc in nbrs):
            perim += 1
    o_b = occ.sum() / ring.sum() if ring.any() else 0.0
    r_b = min(occ.sum() / perim, 1.0) if perim else 0.0
    n_b = float(depth[occ].mean()) if occ.any() else 0.0
    return BorderStats(o_b=o_b, r_b=r_b, n_b=n_b)


def test_border_occupancy_matches_scan_oracle():
    rng = make_rng("ring-oracle", 0)
    for trial in range(12):
        tgt = np.zeros((24, 24), dtype=bool)
        r0, c0 = rng.integers(2, 14, size=2)
        tgt[r0:r0 + int(rng.integers(2, 7)), c0:c0 + int(rng.integers(2, 7))] = True
        depth = np.where(rng.random((24, 24)) < 0.35,
                         rng.uniform(0.5, 3.0, (24, 24)), 0.0)
        got = border_occupancy(depth, tgt, ring_r=3)
        want = _oracle_border(depth, tgt, 3)
        assert got.o_b == pytest.approx(want.o_b, abs=1e-12)
        assert got.r_b == pytest.approx(want.r_b, abs=1e-12)
        assert got.n_b == pytest.approx(want.n_b, abs=1e-12)


def test_border_occupancy_empty_footprint_raises():
    with pytest.raises(DataError):
        border_occupancy(np.zeros((8, 8)), np.zeros((8, 8), dtype=bool))


def test_border_occupancy_clean_ring_is_zero():
    tgt = np.zeros((16, 16), dtype=bool)
    tgt[6:10, 6:10] = True
    depth = np.zeros((16, 16))
    depth[tgt] = 1.0  # target itself does not count as ring occupancy
    got = border_occupancy(depth, tgt, ring_r=3)
    assert got.o_b == 0.0 and got.r_b == 0.0 and got.n_b == 0.0


# ---------------------------------------------------------------------------
# small pieces


def test_grasp_history_counts_consecutive_failures():
    h = GraspHistory()
    h.record(_grasp_outcome(False))
    h.record(_grasp_outcome(False))
    assert h.c_g == 2
    h.record(_push_outcome((0, 0), (1, 0)))
    assert h.c_g == 0
    h.record(_grasp_outcome(False))
    h.record(_grasp_outcome(True, grasped=3))
    assert h.c_g == 0
    with pytest.raises(DataError):
        h.record(StepOutcome(kind="poke"))


def test_target_moved_threshold():
    pre = np.zeros((16, 16), dtype=bool)
    pre[4:6, 4:9] = True  # 10 cells
    same = pre.copy()
    assert not target_moved(pre, same)
    shifted = np.roll(pre, 1, axis=1)  # overlap 8 < 0.9 * 10
    assert target_moved(pre, shifted)
    gone = np.zeros_like(pre)
    assert target_moved(pre, gone)
    assert not target_moved(gone, gone)  # empty pre never counts as moved


def test_crop_heightmap_center_and_padding():
    rng = make_rng("crop", 0)
    depth = rng.uniform(0, 3, size=(32, 32))
    crop = crop_heightmap(depth, (16, 16), r_c=4)
    assert crop.shape == (9, 9)
    assert np.array_equal(crop, depth[12:21, 12:21])
    corner = crop_heightmap(depth, (0, 0), r_c=4)
    assert corner.shape == (9, 9)
    assert np.all(corner[:4, :] == 0.0) and np.all(corner[:, :4] == 0.0)
    assert np.array_equal(corner[4:, 4:], depth[0:5, 0:5])


# ---------------------------------------------------------------------------
# exploration reward


def _covered_scene():
    """Target at layer 0 fully under a wider coverer."""
    tgt = _rect(0, (5, 4), 1.0, 32.0, 32.0)
    cover = _rect(1, (9, 8), 1.0, 32.0, 32.0, layer=1)
    return SceneState(objects=[tgt, cover], target_id=0)


def test_reward_explore_pays_for_area_gain():
    pre = _covered_scene()
    post = pre.clone()
    post.get(1).pose = (45.0, 32.0, 0.0)  # coverer slid fully off
    post.get(1).layer = 0
    out = _push_outcome((50.0, 50.0), (60.0, 50.0), moved=(1,))
    assert visible_count(pre, 0) == 0
    assert reward_explore(pre, post, out) == 0.5


def test_reward_explore_pays_for_contacting_pass():
    pre = _covered_scene()
    post = pre.clone()
    post.get(0).pose = (36.0, 32.0, 0.0)  # dragged along, still hidden
    out = _push_outcome((26.0, 32.0), (36.0, 32.0), moved=(0,))
    assert reward_explore(pre, post, out) == 0.5


def test_reward_explore_ignores_pass_without_contact():
    pre = _covered_scene()
    post = pre.clone()  # nothing moved
    out = _push_outcome((26.0, 32.0), (36.0, 32.0), moved=())
    assert reward_explore(pre, post, out) == 0.0


def test_reward_explore_ignores_zero_travel_push():
    pre = _covered_scene()
    out = _push_outcome((32.0, 32.0), (32.0, 32.0), moved=())
    assert reward_explore(pre, pre.clone(), out) == 0.0


def test_reward_explore_pays_for_uncovering_layer():
    # two coverers above; one leaves, target still hidden by the other
    tgt = _rect(0, (4, 4), 1.0, 32.0, 32.0)
    a = _rect(1, (8, 8), 1.0, 32.0, 32.0, layer=1)
    b = _rect(2, (4, 4), 1.0, 34.0, 32.0, layer=2)
    pre = SceneState(objects=[tgt, a, b], target_id=0)
    post = pre.clone()
    post.get(2).pose = (50.0, 50.0, 0.0)
    post.get(2).layer = 0
    out = _push_outcome((10.0, 10.0), (12.0, 10.0), moved=(2,))
    assert reward_explore(pre, post, out) == 0.25


def test_reward_explore_zero_when_target_lost():
    pre = _covered_scene()
    post = pre.clone()
    post.get(0).removed = True
    out = _push_outcome((26.0, 32.0), (36.0, 32.0), moved=(0,))
    assert reward_explore(pre, post, out) == 0.0


def test_reward_explore_rejects_grasp_outcome():
    pre = _covered_scene()
    with pytest.raises(DataError):
        reward_explore(pre, pre.clone(), _grasp_outcome(False))


# ---------------------------------------------------------------------------
# coordination push reward


def test_reward_push_pays_for_border_declutter():
    tgt = _rect(0, (4, 4), 1.0, 32.0, 32.0)
    wall = _rect(1, (2, 6), 2.0, 36.0, 32.0)
    pre = SceneState(objects=[tgt, wall], target_id=0)
    post = pre.clone()
    post.get(1).pose = (50.0, 50.0, 0.0)
    out = _push_outcome((36.0, 40.0), (50.0, 50.0), moved=(1,))
    assert reward_push(pre, post, out) == 0.5


def test_reward_push_pays_for_moving_target():
    tgt = _rect(0, (4, 4), 1.0, 32.0, 32.0)
    pre = SceneState(objects=[tgt], target_id=0)
    post = pre.clone()
    post.get(0).pose = (38.0, 32.0, 0.0)
    out = _push_outcome((26.0, 32.0), (36.0, 32.0), moved=(0,))
    assert reward_push(pre, post, out) == 0.25


def test_reward_push_zero_cases():
    tgt = _rect(0, (4, 4), 1.0, 32.0, 32.0)
    pre = SceneState(objects=[tgt], target_id=0)
    # no change at all
    out = _push_outcome((10.0, 10.0), (20.0, 10.0))
    assert reward_push(pre, pre.clone(), out) == 0.0
    # target lost entirely
    lost = pre.clone()
    lost.get(0).removed = True
    out = _push_outcome((26.0, 32.0), (36.0, 32.0), moved=(0,))
    assert reward_push(pre, lost, out) == 0.0


# ---------------------------------------------------------------------------
# grasp reward


def test_reward_grasp_tiers():
    mask = np.zeros((64, 64), dtype=bool)
    mask[30:34, 30:34] = True
    assert reward_grasp(_grasp_outcome(True, grasped=0), 0, mask, (31, 31)) == 1.0
    # wrong object lifted, but the attempt closed on visible target cells
    assert reward_grasp(_grasp_outcome(True, grasped=5), 0, mask, (31, 31)) == 0.5
    assert reward_grasp(_grasp_outcome(False), 0, mask, (31, 31)) == 0.5
    assert reward_grasp(_grasp_outcome(False), 0, mask, (10, 10)) == 0.0
    assert reward_grasp(_grasp_outcome(False), 0, mask, (-3, 31)) == 0.0
    with pytest.raises(DataError):
        reward_grasp(_push_outcome((0, 0), (1, 1)), 0, mask, (31, 31))


# ---------------------------------------------------------------------------
# executed pushes feed the same functions


def test_rewards_on_executed_push_transition():
    state = SceneState(objects=[_rect(0, (5, 4), 1.0, 32.0, 32.0),
                                _rect(1, (9, 8), 1.0, 32.0, 32.0, layer=1)],
                       target_id=0)
    cmd = PushCommand(pixel=(32, 24), rotation_index=0)  # eastward, hits target
    post, out = apply_push(state, cmd, CFG)
    assert 0 in out.moved_ids
    r = reward_explore(state, post, out, RewardConfig())
    assert r == 0.5  # contacting pass, whether or not it broke cover


def test_domain_features_compose_pieces():
    rng = make_rng("feat", 0)
    push = rng.normal(size=(4, 32, 32))
    grasp = rng.normal(size=(4, 32, 32))
    qm = QMaps(push=push, grasp=grasp, valid=valid_mask((32, 32), 3))
    depth = rng.uniform(0, 3, size=(32, 32))
    tgt = np.zeros((32, 32), dtype=bool)
    tgt[10:14, 10:14] = True
    hist = GraspHistory()
    hist.c_g = 2
    feats = extract_domain_features(qm, depth, tgt, hist, RewardConfig())
    gpix, _, gval = argmax_action(qm, "grasp")
    _, _, pval = argmax_action(qm, "push")
    assert feats.q_g == gval and feats.q_p == pval
    assert feats.c_g == 2
    assert np.array_equal(feats.m_t, crop_heightmap(depth, gpix, RewardConfig().crop_r))
    ring = border_occupancy(depth, tgt, RewardConfig().ring_r)
    assert feats.r_b == ring.r_b and feats.n_b == ring.n_b
    assert feats.scalars().shape == (5,)
