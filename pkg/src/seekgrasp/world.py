"""Deterministic top-down tabletop world.

Objects live on a discrete cell grid with integer stacking layers. Pushing is
quasi-static (a gripper-wide blade sweeps a straight corridor; contacted base
objects translate until collision; stacked riders are carried or dropped), and
grasping is geometric (opening plus finger clearance). Everything is seeded
and noise-free, so identical inputs give identical states.

Coordinates: x = column, y = row. A motion direction for rotation index i is
theta = i * 2*pi/k with the y component pointing down the rows.
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, asdict

import numpy as np

from .config import WorldConfig, ConfigError, DataError, make_rng, canonical_json, stable_seed

log = logging.getLogger(__name__)

SHAPE_KINDS = ("rectangle", "disc", "lshape")


@dataclass
class Appearance:
    color: tuple  # (r, g, b) in [0, 1]
    tex_kind: int = 0  # 0 flat, 1 stripes, 2 checker
    tex_period: float = 4.0
    tex_phase: float = 0.0
    tex_amp: float = 0.0

    def to_dict(self):
        return {"color": list(self.color), "tex_kind": self.tex_kind,
                "tex_period": self.tex_period, "tex_phase": self.tex_phase,
                "tex_amp": self.tex_amp}

    @classmethod
    def from_dict(cls, d):
        return cls(color=tuple(d["color"]), tex_kind=int(d["tex_kind"]),
                   tex_period=float(d["tex_period"]), tex_phase=float(d["tex_phase"]),
                   tex_amp=float(d["tex_amp"]))


@dataclass
class ShapeSpec:
    kind: str  # rectangle | disc | lshape
    dims: tuple  # rectangle: (length, width); disc: (radius,); lshape: (length, width, thickness)
    height: float  # cell-height units

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ConfigError(f"unknown shape kind: {self.kind!r}")
        if any(d < 1 for d in self.dims):
            raise ConfigError("all shape dims must be >= 1 cell")
        if self.height <= 0:
            raise ConfigError("shape height must be positive")

    def to_dict(self):
        return {"kind": self.kind, "dims": list(self.dims), "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], dims=tuple(d["dims"]), height=float(d["height"]))


@dataclass
class ObjectInstance:
    id: int
    shape: ShapeSpec
    pose: tuple  # (x, y, theta)
    layer: int = 0
    appearance: Appearance = field(default_factory=lambda: Appearance((0.5, 0.5, 0.5)))
    category: int = 0
    removed: bool = False

    def to_dict(self):
        return {"id": self.id, "shape": self.shape.to_dict(), "pose": list(self.pose),
                "layer": self.layer, "appearance": self.appearance.to_dict(),
                "category": self.category, "removed": self.removed}

    @classmethod
    def from_dict(cls, d):
        return cls(id=int(d["id"]), shape=ShapeSpec.from_dict(d["shape"]),
                   pose=tuple(d["pose"]), layer=int(d["layer"]),
                   appearance=Appearance.from_dict(d["appearance"]),
                   category=int(d["category"]), removed=bool(d["removed"]))


@dataclass
class SceneState:
    grid_w: int = 64
    grid_h: int = 64
    cell_size: float = 0.007
    objects: list = field(default_factory=list)
    target_id: int = 0
    rng_seed: int = 0
    step_count: int = 0
    case_name: str = ""

    def live_objects(self):
        return [o for o in self.objects if not o.removed]

    def get(self, oid) -> ObjectInstance:
        for o in self.objects:
            if o.id == oid:
                return o
        raise DataError(f"no object with id {oid}")

    def target(self) -> ObjectInstance:
        t = self.get(self.target_id)
        if t.removed:
            raise DataError("target has been removed from the scene")
        return t

    def clone(self) -> "SceneState":
        return SceneState.from_dict(self.to_dict())

    def to_dict(self):
        return {"grid": [self.grid_h, self.grid_w], "cell_size": self.cell_size,
                "objects": [o.to_dict() for o in self.objects],
                "target_id": self.target_id, "rng_seed": self.rng_seed,
                "step_count": self.step_count, "case_name": self.case_name}

    @classmethod
    def from_dict(cls, d):
        gh, gw = d["grid"]
        return cls(grid_w=int(gw), grid_h=int(gh), cell_size=float(d["cell_size"]),
                   objects=[ObjectInstance.from_dict(o) for o in d["objects"]],
                   target_id=int(d["target_id"]), rng_seed=int(d.get("rng_seed", 0)),
                   step_count=int(d.get("step_count", 0)), case_name=d.get("case_name", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SceneState":
        return cls.from_dict(json.loads(text))


@dataclass
class PushCommand:
    pixel: tuple  # (row, col)
    rotation_index: int
    k: int = 16

    @property
    def theta(self) -> float:
        return self.rotation_index * 2.0 * math.pi / self.k


@dataclass
class GraspCommand:
    pixel: tuple  # (row, col)
    rotation_index: int
    k: int = 16

    @property
    def theta(self) -> float:
        return self.rotation_index * 2.0 * math.pi / self.k


@dataclass
class StepOutcome:
    kind: str  # "push" | "grasp"
    moved_ids: list = field(default_factory=list)
    grasped_id: int | None = None
    grasp_success: bool = False
    pre_visible: int = 0
    post_visible: int = 0
    pre_above: int = 0
    post_above: int = 0
    push_start: tuple | None = None  # (x, y)
    push_end: tuple | None = None

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# rasterization

def _grid_xy(h, w):
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float), indexing="xy")
    return xs, ys


def object_frame(shape_pose, h, w):
    """Per-cell object-frame coordinates (qx, qy) for pose (x, y, theta)."""
    x, y, theta = shape_pose
    xs, ys = _grid_xy(h, w)
    dx = xs - x
    dy = ys - y
    c, s = math.cos(theta), math.sin(theta)
    qx = c * dx + s * dy
    qy = -s * dx + c * dy
    return qx, qy


def footprint_at(shape: ShapeSpec, pose, h, w) -> np.ndarray:
    """Boolean coverage mask of the shape at the given pose."""
    qx, qy = object_frame(pose, h, w)
    if shape.kind == "rectangle":
        length, width = shape.dims
        return (qx >= -length / 2) & (qx < length / 2) & (qy >= -width / 2) & (qy < width / 2)
    if shape.kind == "disc":
        (radius,) = shape.dims
        return qx * qx + qy * qy <= radius * radius
    length, width, thick = shape.dims  # lshape: two arms sharing a corner
    arm_a = (qx >= -length / 2) & (qx < length / 2) & (qy >= -width / 2) & (qy < -width / 2 + thick)
    arm_b = (qx >= -length / 2) & (qx < -length / 2 + thick) & (qy >= -width / 2) & (qy < width / 2)
    return arm_a | arm_b


def footprint(state: SceneState, obj: ObjectInstance) -> np.ndarray:
    return footprint_at(obj.shape, obj.pose, state.grid_h, state.grid_w)


def _unclipped_area(shape: ShapeSpec, pose, h, w, pad=16) -> int:
    """Footprint cell count on a grid padded so nothing clips."""
    x, y, theta = pose
    return int(footprint_at(shape, (x + pad, y + pad, theta), h + 2 * pad, w + 2 * pad).sum())


def topmost_map(state: SceneState) -> np.ndarray:
    """Per-cell id of the top (highest-layer) covering object, -1 on background."""
    top = np.full((state.grid_h, state.grid_w), -1, dtype=int)
    best = np.full((state.grid_h, state.grid_w), -1, dtype=int)
    for obj in state.live_objects():
        mask = footprint(state, obj)
        take = mask & (obj.layer > best)
        top[take] = obj.id
        best[take] = obj.layer
    return top


def visible_count(state: SceneState, oid: int) -> int:
    return int((topmost_map(state) == oid).sum())


def z_extents(state: SceneState) -> dict:
    """Vertical interval [z0, z1) of each live object, derived from layers."""
    out = {}
    masks = {}
    for obj in sorted(state.live_objects(), key=lambda o: (o.layer, o.id)):
        mask = footprint(state, obj)
        masks[obj.id] = mask
        z0 = 0.0
        if obj.layer > 0:
            for other in state.live_objects():
                if other.layer == obj.layer - 1 and other.id in out:
                    if (mask & masks[other.id]).any():
                        z0 = max(z0, out[other.id][1])
        out[obj.id] = (z0, z0 + obj.shape.height)
    return out


def count_objects_above(state: SceneState, target_id: int) -> int:
    """Distinct objects overlapping the target footprint at strictly higher layers."""
    target = state.get(target_id)
    if target.removed:
        raise DataError("target removed; nothing to count above")
    tmask = footprint(state, target)
    n = 0
    for obj in state.live_objects():
        if obj.id == target_id or obj.layer <= target.layer:
            continue
        if (footprint(state, obj) & tmask).any():
            n += 1
    return n


# ---------------------------------------------------------------------------
# stacking

def _nudge_offsets(radius: int):
    offs = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx == 0 and dy == 0:
                continue
            d2 = dx * dx + dy * dy
            if d2 <= radius * radius:
                offs.append((d2, dy, dx))
    offs.sort()
    return [(dx, dy) for (_, dy, dx) in offs]


def resolve_stacking(state: SceneState, cfg: WorldConfig | None = None) -> SceneState:
    """Settle every object at the lowest collision-free, supported layer.

    Objects are processed in (provisional layer, id) order. An object needing
    support keeps a layer only if >= min_support of its footprint overlaps the
    union of objects one layer below. Unplaceable objects try a deterministic
    layer-0 nudge within nudge_radius cells, else are removed with a warning.
    """
    cfg = cfg or WorldConfig()
    order = sorted(state.live_objects(), key=lambda o: (o.layer, o.id))
    placed = []  # (obj, mask) with final layers
    for obj in order:
        mask = footprint(state, obj)
        area = int(mask.sum())
        full_area = _unclipped_area(obj.shape, obj.pose, state.grid_h, state.grid_w)
        if area == 0 or area < full_area:
            log.debug("object %d clips the workspace; removing", obj.id)
            obj.removed = True
            continue
        max_layer = max((o.layer for o, _ in placed), default=-1) + 1
        assigned = None
        for lay in range(0, max_layer + 1):
            if any(o.layer == lay and (m & mask).any() for o, m in placed):
                continue
            if lay == 0:
                assigned = 0
                break
            below = np.zeros_like(mask)
            for o, m in placed:
                if o.layer == lay - 1:
                    below |= m
            if (mask & below).sum() >= cfg.min_support * area:
                assigned = lay
            break  # first collision-free layer decides; higher layers have no support
        if assigned is None:
            nudged = False
            for dx, dy in _nudge_offsets(cfg.nudge_radius):
                pose = (obj.pose[0] + dx, obj.pose[1] + dy, obj.pose[2])
                nmask = footprint_at(obj.shape, pose, state.grid_h, state.grid_w)
                if int(nmask.sum()) < full_area:
                    continue  # would clip
                if any(o.layer == 0 and (m & nmask).any() for o, m in placed):
                    continue
                obj.pose = pose
                obj.layer = 0
                placed.append((obj, nmask))
                nudged = True
                break
            if not nudged:
                log.debug("object %d has no resting place; removing", obj.id)
                obj.removed = True
            continue
        obj.layer = assigned
        placed.append((obj, mask))
    return state


def validate_state(state: SceneState, cfg: WorldConfig | None = None) -> None:
    """Assert the structural invariants; raises DataError on violation."""
    cfg = cfg or WorldConfig()
    live = state.live_objects()
    masks = {o.id: footprint(state, o) for o in live}
    for i, a in enumerate(live):
        x, y, _ = a.pose
        if not (0 <= x < state.grid_w and 0 <= y < state.grid_h):
            raise DataError(f"object {a.id} pose outside workspace")
        for b in live[i + 1:]:
            if a.layer == b.layer and (masks[a.id] & masks[b.id]).any():
                raise DataError(f"objects {a.id} and {b.id} overlap on layer {a.layer}")
    for obj in live:
        if obj.layer > 0:
            below = np.zeros_like(masks[obj.id])
            for other in live:
                if other.layer == obj.layer - 1:
                    below |= masks[other.id]
            frac = (masks[obj.id] & below).sum() / masks[obj.id].sum()
            if frac < cfg.min_support - 1e-9:
                raise DataError(f"object {obj.id} under-supported at layer {obj.layer}")
    targets = [o for o in state.objects if o.id == state.target_id]
    if len(targets) != 1:
        raise DataError("scene must contain exactly one target id")


# ---------------------------------------------------------------------------
# motion primitives

def _corridor_mask(state, x0, y0, dvec, length, width):
    xs, ys = _grid_xy(state.grid_h, state.grid_w)
    rx = xs - x0
    ry = ys - y0
    t = rx * dvec[0] + ry * dvec[1]
    s = -rx * dvec[1] + ry * dvec[0]
    return (t >= 0.0) & (t <= length) & (np.abs(s) <= width / 2.0)


def apply_push(state: SceneState, cmd: PushCommand, cfg: WorldConfig | None = None):
    """Sweep the push blade from cmd.pixel along theta; returns (state, outcome).

    Contacted base objects (z_bottom below the blade) translate with the blade
    until it stops or they hit an uncontacted obstacle or the wall. Riders are
    carried when they keep min_support over their supporters, otherwise they
    stay in place and restack. Starting inside an object taller than the blade
    is a no-op. The input state is left untouched.
    """
    cfg = cfg or WorldConfig()
    state = state.clone()
    row, col = cmd.pixel
    x0, y0 = float(col), float(row)
    theta = cmd.rotation_index * 2.0 * math.pi / cfg.k_rotations
    dvec = (math.cos(theta), math.sin(theta))

    pre_visible = visible_count(state, state.target_id)
    pre_above = count_objects_above(state, state.target_id)
    end = (x0 + cfg.push_len * dvec[0], y0 + cfg.push_len * dvec[1])
    outcome = StepOutcome(kind="push", pre_visible=pre_visible, pre_above=pre_above,
                          post_visible=pre_visible, post_above=pre_above,
                          push_start=(x0, y0), push_end=end)

    z = z_extents(state)
    top = topmost_map(state)
    start_id = int(top[row, col])
    if start_id >= 0 and z[start_id][1] > cfg.blade_height:
        outcome.push_end = (x0, y0)  # zero travel: the blade never entered
        state.step_count += 1
        return state, outcome  # wasted motion: blade cannot enter here

    pre_pose = {o.id: o.pose for o in state.live_objects()}
    pre_layer = {o.id: o.layer for o in state.live_objects()}
    corridor = _corridor_mask(state, x0, y0, dvec, cfg.push_len, cfg.push_width)
    masks = {o.id: footprint(state, o) for o in state.live_objects()}
    movers = []
    for obj in state.live_objects():
        if z[obj.id][0] < cfg.blade_height and (masks[obj.id] & corridor).any():
            movers.append(obj)
    # blade reaches an object after traveling to its nearest corridor cell
    xs, ys = _grid_xy(state.grid_h, state.grid_w)
    tproj = (xs - x0) * dvec[0] + (ys - y0) * dvec[1]
    entry = {o.id: float(tproj[masks[o.id] & corridor].min()) for o in movers}
    movers.sort(key=lambda o: (-entry[o.id], o.id))  # front-most first

    area = {o.id: int(masks[o.id].sum()) for o in state.live_objects()}
    moved = {o.id: 0.0 for o in movers}
    stopped = {o.id: False for o in movers}
    mover_ids = {o.id for o in movers}

    def collides(obj, new_mask):
        z_obj = z[obj.id]
        if int(new_mask.sum()) < area[obj.id]:
            return True  # wall
        for other in state.live_objects():
            if other.id == obj.id:
                continue
            if other.id in mover_ids and not stopped[other.id]:
                continue  # moving along together; front-first order keeps spacing
            zo = z[other.id]
            if z_obj[0] < zo[1] and zo[0] < z_obj[1]:
                if (new_mask & masks[other.id]).any():
                    return True
        return False

    n_sub = int(math.ceil(cfg.push_len / cfg.push_substep))
    for step in range(1, n_sub + 1):
        blade = min(cfg.push_len, step * cfg.push_substep)
        for obj in movers:
            if stopped[obj.id]:
                continue
            limit = max(0.0, min(blade - max(0.0, entry[obj.id]), cfg.push_len - max(0.0, entry[obj.id])))
            want = limit - moved[obj.id]
            if want <= 1e-12:
                continue
            inc = min(cfg.push_substep, want)
            cand = moved[obj.id] + inc
            pose = (pre_pose[obj.id][0] + cand * dvec[0],
                    pre_pose[obj.id][1] + cand * dvec[1], pre_pose[obj.id][2])
            nmask = footprint_at(obj.shape, pose, state.grid_h, state.grid_w)
            if collides(obj, nmask):
                stopped[obj.id] = True
                continue
            moved[obj.id] = cand
            obj.pose = pose
            masks[obj.id] = nmask

    # riders: carried with their primary supporter when support persists
    riders = sorted((o for o in state.live_objects()
                     if o.layer > 0 and o.id not in mover_ids), key=lambda o: (o.layer, o.id))
    disp = {oid: moved.get(oid, 0.0) for oid in pre_pose}
    for rider in riders:
        rmask = footprint(state, rider)
        below = [o for o in state.live_objects()
                 if o.layer == rider.layer - 1 and
                 (footprint_at(o.shape, pre_pose[o.id], state.grid_h, state.grid_w) & rmask).any()]
        if not below:
            continue
        prim = max(below, key=lambda o: int(
            (footprint_at(o.shape, pre_pose[o.id], state.grid_h, state.grid_w) & rmask).sum()))
        d = disp.get(prim.id, 0.0)
        if d <= 1e-12:
            disp[rider.id] = 0.0
            continue
        pose = (rider.pose[0] + d * dvec[0], rider.pose[1] + d * dvec[1], rider.pose[2])
        nmask = footprint_at(rider.shape, pose, state.grid_h, state.grid_w)
        support = np.zeros_like(nmask)
        for o in state.live_objects():
            if o.layer == rider.layer - 1:
                support |= masks.get(o.id, footprint(state, o))
        ok = int(nmask.sum()) == _unclipped_area(rider.shape, pose, state.grid_h, state.grid_w)
        ok = ok and (nmask & support).sum() >= cfg.min_support * max(1, int(nmask.sum()))
        ok = ok and not any((nmask & masks[o.id]).any()
                            for o in state.live_objects()
                            if o.id != rider.id and o.layer == rider.layer)
        if ok:
            rider.pose = pose
            masks[rider.id] = nmask
            disp[rider.id] = d
        else:
            disp[rider.id] = 0.0  # dropped in place; restack settles it

    resolve_stacking(state, cfg)
    outcome.moved_ids = sorted(oid for oid in pre_pose
                               if (oid in [o.id for o in state.live_objects()] and
                                   (state.get(oid).pose != pre_pose[oid] or
                                    state.get(oid).layer != pre_layer[oid])))
    try:
        outcome.post_visible = visible_count(state, state.target_id)
        outcome.post_above = count_objects_above(state, state.target_id)
    except DataError:
        outcome.post_visible = 0
        outcome.post_above = 0
    state.step_count += 1
    return state, outcome


def apply_grasp(state: SceneState, cmd: GraspCommand, cfg: WorldConfig | None = None):
    """Top-down parallel-jaw grasp at cmd.pixel along theta; returns (state, outcome).

    Succeeds iff a topmost object covers the pixel, the object's extent along
    the grasp axis fits the opening, and neither finger rectangle lands on
    material higher than the object's top minus the clearance. Success removes
    the object and restacks. The input state is left untouched.
    """
    cfg = cfg or WorldConfig()
    state = state.clone()
    row, col = cmd.pixel
    x0, y0 = float(col), float(row)
    theta = cmd.rotation_index * 2.0 * math.pi / cfg.k_rotations
    dvec = (math.cos(theta), math.sin(theta))

    pre_visible = visible_count(state, state.target_id)
    pre_above = count_objects_above(state, state.target_id)
    outcome = StepOutcome(kind="grasp", pre_visible=pre_visible, pre_above=pre_above,
                          post_visible=pre_visible, post_above=pre_above)

    top = topmost_map(state)
    oid = int(top[row, col])
    success = False
    if oid >= 0:
        obj = state.get(oid)
        z = z_extents(state)
        mask = footprint(state, obj)
        xs, ys = _grid_xy(state.grid_h, state.grid_w)
        t = (xs - x0) * dvec[0] + (ys - y0) * dvec[1]
        tvals = t[mask]
        extent = float(tvals.max() - tvals.min()) + 1.0
        if extent <= cfg.grasp_open:
            s = -(xs - x0) * dvec[1] + (ys - y0) * dvec[0]
            blocked = False
            depth_other = np.zeros((state.grid_h, state.grid_w))
            for other in state.live_objects():
                if other.id == oid:
                    continue
                m = footprint(state, other)
                depth_other[m] = np.maximum(depth_other[m], z[other.id][1])
            for sign in (1.0, -1.0):
                center = sign * cfg.grasp_open / 2.0
                finger = ((t >= center - cfg.finger_len / 2) & (t < center + cfg.finger_len / 2)
                          & (s >= -cfg.finger_width / 2) & (s < cfg.finger_width / 2))
                if (depth_other[finger] > z[oid][1] - cfg.grasp_clearance + 1e-9).any():
                    blocked = True
                    break
            if not blocked:
                success = True
                obj.removed = True
                resolve_stacking(state, cfg)
    outcome.grasp_success = success
    outcome.grasped_id = oid if success else None
    try:
        outcome.post_visible = visible_count(state, state.target_id)
        outcome.post_above = count_objects_above(state, state.target_id)
    except DataError:
        outcome.post_visible = 0
        outcome.post_above = 0
    state.step_count += 1
    return state, outcome


def snapshot_hash(state: SceneState) -> int:
    """Stable 64-bit digest of the canonicalized state."""
    return stable_seed(canonical_json(state.to_dict()))
