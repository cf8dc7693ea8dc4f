"""Step rewards, border-occupancy statistics, and coordination features.

Rewards are pure functions of (pre_state, post_state, outcome); the only
stateful piece is the consecutive-failed-grasp counter, which the episode
runner owns via GraspHistory.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import DataError, RewardConfig, WorldConfig
from .percept import render_projections
from .qfunc import argmax_action
from .world import count_objects_above, footprint, visible_count


@dataclass(frozen=True)
class BorderStats:
    """Occupancy of the ring around the target footprint.

    o_b: fraction of ring cells holding any non-target object, in [0, 1].
    r_b: occupied ring cells over target perimeter cells, in [0, 1].
    n_b: mean height of the occupied ring cells, in cell-height units.
    """

    o_b: float
    r_b: float
    n_b: float


@dataclass(frozen=True)
class DomainFeatures:
    """Inputs to the coordinator: Q summaries, clutter stats, grasp history,
    and the depth crop around the best grasp pixel."""

    q_g: float
    q_p: float
    r_b: float
    n_b: float
    c_g: int
    m_t: np.ndarray

    def scalars(self) -> np.ndarray:
        return np.array([self.q_g, self.q_p, self.r_b, self.n_b, float(self.c_g)])


class GraspHistory:
    """Counts consecutive failed grasps; any push or successful grasp resets."""

    def __init__(self):
        self.c_g = 0

    def record(self, outcome) -> None:
        if outcome.kind == "push":
            self.c_g = 0
        elif outcome.kind == "grasp":
            self.c_g = 0 if outcome.grasp_success else self.c_g + 1
        else:
            raise DataError(f"unknown outcome kind {outcome.kind!r}")


# ---------------------------------------------------------------------------
# geometric predicates

def _segment_distance(points, a, b):
    """Euclidean distance from each (x, y) point to segment a-b."""
    ab = np.subtract(b, a, dtype=float)
    denom = float(ab @ ab)
    rel = points - np.asarray(a, dtype=float)
    if denom == 0.0:
        return np.hypot(rel[:, 0], rel[:, 1])
    t = np.clip(rel @ ab / denom, 0.0, 1.0)
    off = rel - t[:, None] * ab
    return np.hypot(off[:, 0], off[:, 1])


def push_passes_target(outcome, target_mask: np.ndarray,
                       cfg: WorldConfig | None = None) -> bool:
    """True iff the push segment, widened to the blade half-width, crosses
    the target's ground-truth footprint."""
    if outcome.kind != "push":
        raise DataError("push predicate on a non-push outcome")
    cfg = cfg or WorldConfig()
    if outcome.push_end == outcome.push_start:
        return False  # zero travel: the blade never entered the workspace
    rows, cols = np.nonzero(target_mask)
    if rows.size == 0:
        return False
    pts = np.stack([cols.astype(float), rows.astype(float)], axis=1)
    d = _segment_distance(pts, outcome.push_start, outcome.push_end)
    return bool(np.any(d <= cfg.push_width / 2.0))


def target_moved(pre_mask: np.ndarray, post_mask: np.ndarray,
                 cfg: RewardConfig | None = None) -> bool:
    """True iff the footprints overlap on fewer than moved_overlap_frac of
    the pre-push cells."""
    cfg = cfg or RewardConfig()
    pre = int(pre_mask.sum())
    if pre == 0:
        return False
    overlap = int(np.logical_and(pre_mask, post_mask).sum())
    return overlap < cfg.moved_overlap_frac * pre


# ---------------------------------------------------------------------------
# border occupancy

_FOUR = ndimage.generate_binary_structure(2, 1)


def border_occupancy(depth: np.ndarray, target_footprint: np.ndarray,
                     ring_r: int = 3) -> BorderStats:
    """Occupancy statistics on the ring of cells within Euclidean distance
    ring_r of the target footprint (footprint itself excluded)."""
    tgt = np.asarray(target_footprint, dtype=bool)
    if not tgt.any():
        raise DataError("border occupancy of an empty footprint")
    dist = ndimage.distance_transform_edt(~tgt)
    ring = (dist > 0.0) & (dist <= ring_r)
    occupied = ring & (depth > 1e-9)

    n_ring = int(ring.sum())
    n_occ = int(occupied.sum())
    o_b = n_occ / n_ring if n_ring else 0.0

    interior = ndimage.binary_erosion(tgt, structure=_FOUR, border_value=0)
    n_perim = int((tgt & ~interior).sum())
    r_b = min(n_occ / n_perim, 1.0) if n_perim else 0.0

    n_b = float(depth[occupied].mean()) if n_occ else 0.0
    return BorderStats(o_b=o_b, r_b=r_b, n_b=n_b)


def crop_heightmap(depth: np.ndarray, q_b, r_c: int = 9) -> np.ndarray:
    """(2*r_c+1)-square depth crop centered on q_b, zero-padded off-grid."""
    h, w = depth.shape
    row, col = int(q_b[0]), int(q_b[1])
    side = 2 * r_c + 1
    out = np.zeros((side, side), dtype=depth.dtype)
    r0, r1 = max(0, row - r_c), min(h, row + r_c + 1)
    c0, c1 = max(0, col - r_c), min(w, col + r_c + 1)
    out[r0 - row + r_c:r1 - row + r_c, c0 - col + r_c:c1 - col + r_c] = \
        depth[r0:r1, c0:c1]
    return out


# ---------------------------------------------------------------------------
# step rewards

def reward_explore(pre_state, post_state, outcome,
                   cfg: RewardConfig | None = None) -> float:
    """Exploration pushes: 0.5 for exposing the target (a large area gain, or
    a push crossing the target that makes any headway), 0.25 for removing a
    coverer, else 0.

    The crossing bonus is gated on headway (visibility up or cover count
    down): in a deterministic world an unconditional crossing bonus makes
    shuffling the whole pile a better return than uncovering the target.
    """
    if outcome.kind != "push":
        raise DataError("exploration reward on a non-push outcome")
    cfg = cfg or RewardConfig()
    tid = pre_state.target_id
    if post_state.get(tid).removed:
        return 0.0  # losing the target earns nothing
    gain = visible_count(post_state, tid) - visible_count(pre_state, tid)
    uncovered = count_objects_above(post_state, tid) < count_objects_above(pre_state, tid)
    tgt_mask = footprint(pre_state, pre_state.target())
    if gain >= cfg.area_increase_px or (push_passes_target(outcome, tgt_mask)
                                        and (gain > 0 or uncovered)):
        return 0.5
    if uncovered:
        return 0.25
    return 0.0


def reward_push(pre_state, post_state, outcome,
                cfg: RewardConfig | None = None) -> float:
    """Coordination pushes: 0.5 for decluttering the target border, 0.25 for
    a push that crosses and moves the target, else 0."""
    if outcome.kind != "push":
        raise DataError("push reward on a non-push outcome")
    cfg = cfg or RewardConfig()
    pre_mask = footprint(pre_state, pre_state.target())
    post_obj = post_state.get(pre_state.target_id)
    if post_obj.removed:  # a failed restack can drop the target entirely
        return 0.0
    post_mask = footprint(post_state, post_obj)
    if post_mask.any():
        pre_b = border_occupancy(render_projections(pre_state).depth, pre_mask, cfg.ring_r)
        post_b = border_occupancy(render_projections(post_state).depth, post_mask, cfg.ring_r)
        if pre_b.o_b - post_b.o_b >= cfg.o_b_drop:
            return 0.5
    if push_passes_target(outcome, pre_mask) and target_moved(pre_mask, post_mask, cfg):
        return 0.25
    return 0.0


def reward_grasp(outcome, target_id: int, target_mask: np.ndarray, q_b) -> float:
    """Grasps: 1 for lifting the target, 0.5 for closing on the target's
    visible cells without lifting it, else 0."""
    if outcome.kind != "grasp":
        raise DataError("grasp reward on a non-grasp outcome")
    if outcome.grasp_success and outcome.grasped_id == target_id:
        return 1.0
    row, col = int(q_b[0]), int(q_b[1])
    if 0 <= row < target_mask.shape[0] and 0 <= col < target_mask.shape[1] \
            and target_mask[row, col]:
        return 0.5
    return 0.0


# ---------------------------------------------------------------------------
# coordinator features

def extract_domain_features(qmaps, depth: np.ndarray,
                            target_footprint: np.ndarray,
                            history: GraspHistory,
                            cfg: RewardConfig | None = None) -> DomainFeatures:
    cfg = cfg or RewardConfig()
    q_b, _, q_g = argmax_action(qmaps, "grasp")
    _, _, q_p = argmax_action(qmaps, "push")
    stats = border_occupancy(depth, target_footprint, cfg.ring_r)
    m_t = crop_heightmap(depth, q_b, cfg.crop_r)
    return DomainFeatures(q_g=float(q_g), q_p=float(q_p), r_b=stats.r_b,
                          n_b=stats.n_b, c_g=history.c_g, m_t=m_t)
