"""Scripted evaluation scenarios and the procedural scene generators.

Base layouts for the named cases are committed as JSON under data/cases/ (one
file per case) so results stay stable across releases; generate_scenario loads
a template, applies seeded jitter, and validates the case's promise (hidden
target for exploration cases, look-alike distractors for confusing cases).
random(m, n) scenes are fully procedural.
"""
from __future__ import annotations

import json
import math
import re
from importlib import resources

import numpy as np

from .config import WorldConfig, ConfigError, DataError, make_rng
from .world import (Appearance, ObjectInstance, SceneState, ShapeSpec,
                    resolve_stacking, validate_state, visible_count)

EXPLORATION_CASES = tuple(f"exploration-{i}" for i in range(1, 5))
COORDINATION_CASES = tuple(f"coordination-{i}" for i in range(1, 9))
CONFUSING_CASES = tuple(f"confusing-{i}" for i in range(1, 5))
_RANDOM_RE = re.compile(r"^random\((\d+),\s*(\d+)\)$")

# clusters per exploration case; drives the motion budget 2n-1
N_CLUSTERS = {"exploration-1": 2, "exploration-2": 2, "exploration-3": 3, "exploration-4": 3}


def suite_cases(suite: str):
    if suite == "exploration":
        return list(EXPLORATION_CASES)
    if suite == "coordination":
        return list(COORDINATION_CASES)
    if suite == "confusing":
        return list(CONFUSING_CASES)
    if suite == "full":
        return ["random(3,7)"]
    raise ConfigError(f"unknown suite: {suite!r}")


def case_info(case: str) -> dict:
    """Suite membership and cluster count for a case name."""
    if case in N_CLUSTERS:
        return {"suite": "exploration", "n_cluster": N_CLUSTERS[case]}
    if case in COORDINATION_CASES:
        return {"suite": "coordination", "n_cluster": 1}
    if case in CONFUSING_CASES:
        return {"suite": "confusing", "n_cluster": 1}
    if _RANDOM_RE.match(case) or case.startswith("hidden("):
        return {"suite": "full", "n_cluster": 1}
    raise ConfigError(f"unknown case name: {case!r}")


def _hue_rgb(h, s=0.85, v=0.9):
    """Small hsv->rgb helper; h in [0,1)."""
    h = h % 1.0
    i = int(h * 6.0)
    f = h * 6.0 - i
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i % 6]


def _obj(oid, kind, dims, height, x, y, theta=0.0, hue=0.0, sat=0.85, val=0.9,
         tex=0, period=4.0, phase=0.0, amp=0.0, category=0):
    return ObjectInstance(
        id=oid, shape=ShapeSpec(kind, tuple(dims), height), pose=(float(x), float(y), float(theta)),
        layer=0, appearance=Appearance(_hue_rgb(hue, sat, val), tex, period, phase, amp),
        category=category)


# ---------------------------------------------------------------------------
# base layout builders (the committed templates come from these)

def _bridge(objs, oid, cx, cy, axis, hue, category, hidden_target=True,
            pillar_off=5.5, target_dims=(5, 4)):
    """Plate-on-two-pillars pile; optionally a loose target in the lane under it.

    The lane between the pillars is one blade width, so a push along the lane
    slides the target out while the plate stays on the pillars (each pillar
    overlaps the plate more than the target does, so the plate is never
    carried with the target). Decoy bridges (hidden_target=False) sit with a
    slightly narrower gap so a lane push still clips a pillar and changes the
    scene instead of sweeping pure air.
    """
    target_id = None
    if hidden_target:
        dims = target_dims if axis == "y" else (target_dims[1], target_dims[0])
        objs.append(_obj(oid, "rectangle", dims, 1.0, cx, cy, hue=hue, tex=1, amp=0.3,
                         category=category))
        target_id = oid
        oid += 1
    if axis == "y":
        pil_dims, cover_dims = (4, 6), (15, 6)
        offs = [(pillar_off, 0.0), (-pillar_off, 0.0)]
    else:
        pil_dims, cover_dims = (6, 4), (6, 15)
        offs = [(0.0, pillar_off), (0.0, -pillar_off)]
    for j, (dx, dy) in enumerate(offs):
        objs.append(_obj(oid, "rectangle", pil_dims, 1.0, cx + dx, cy + dy,
                         hue=(hue + 0.33 + 0.08 * j) % 1.0, category=category + 60 + j))
        oid += 1
    objs.append(_obj(oid, "rectangle", cover_dims, 1.0, cx, cy,
                     hue=(hue + 0.52) % 1.0, category=category + 62))
    objs[-1].layer = 1
    return target_id, oid + 1


def _build_exploration(idx: int) -> SceneState:
    objs = []
    anchors = {
        1: [(20, 18, "y"), (44, 44, "y")],
        2: [(44, 18, "x"), (18, 44, "x")],
        3: [(18, 18, "y"), (46, 20, "y"), (30, 46, "x")],
        4: [(46, 44, "x"), (16, 20, "y"), (44, 14, "x")],
    }[idx]
    cx, cy, axis = anchors[0]
    target_id, oid = _bridge(objs, 0, cx, cy, axis, hue=0.02 + 0.2 * idx, category=idx)
    for ci, (cx, cy, axis) in enumerate(anchors[1:]):
        _, oid = _bridge(objs, oid, cx, cy, axis, hue=(0.5 + 0.17 * ci + 0.07 * idx) % 1.0,
                         category=70 + 10 * ci, hidden_target=False, pillar_off=4.8)
    return SceneState(objects=objs, target_id=target_id, case_name=f"exploration-{idx}")


def _ring(objs, oid, cx, cy, n, radius, dims, height, hue0):
    for a in range(n):
        ang = 2 * math.pi * a / n
        x = cx + radius * math.cos(ang)
        y = cy + radius * math.sin(ang)
        objs.append(_obj(oid, "rectangle", dims, height, x, y, hue=(hue0 + 0.07 * a) % 1.0,
                         category=100 + oid))
        oid += 1
    return oid


def _build_coordination(idx: int) -> SceneState:
    objs = []
    cx, cy = 32, 32
    t_hue = 0.93
    if idx == 1:  # short target sealed by a tight ring: pushing is required
        objs.append(_obj(0, "rectangle", (5, 4), 1.0, cx, cy, hue=t_hue, tex=1, amp=0.3, category=1))
        _ring(objs, 1, cx, cy, 8, 5.2, (3, 3), 1.0, 0.12)
    elif idx == 2:  # tall target in the same ring: graspable over the clutter
        objs.append(_obj(0, "rectangle", (5, 4), 2.0, cx, cy, hue=t_hue, tex=1, amp=0.3, category=1))
        _ring(objs, 1, cx, cy, 8, 5.2, (3, 3), 1.0, 0.3)
    elif idx == 3:  # corner of two tall walls plus seal blocks
        objs.append(_obj(0, "rectangle", (5, 4), 1.0, 28, 28, hue=t_hue, tex=1, amp=0.3, category=1))
        objs.append(_obj(1, "rectangle", (14, 2), 2.0, 30, 23.5, hue=0.55, category=101))
        objs.append(_obj(2, "rectangle", (2, 14), 2.0, 23.5, 30, hue=0.6, category=102))
        objs.append(_obj(3, "rectangle", (4, 3), 1.0, 33, 32, hue=0.15, category=103))
        objs.append(_obj(4, "rectangle", (3, 4), 1.0, 28, 34.5, hue=0.2, category=104))
        objs.append(_obj(5, "rectangle", (3, 3), 1.0, 34, 27, hue=0.25, category=105))
    elif idx == 4:  # tall target pocketed in short clutter
        objs.append(_obj(0, "rectangle", (4, 4), 2.0, cx, cy, hue=t_hue, tex=1, amp=0.3, category=1))
        for j, (dx, dy, dims) in enumerate([(-5, 0, (5, 4)), (5, 0, (5, 4)), (0, -4.5, (4, 4)),
                                            (0, 4.5, (4, 4)), (-4, -5, (3, 3))]):
            objs.append(_obj(1 + j, "rectangle", dims, 1.0, cx + dx, cy + dy,
                             hue=(0.3 + 0.08 * j) % 1.0, category=110 + j))
    elif idx == 5:  # capped channel between two medium walls
        objs.append(_obj(0, "rectangle", (5, 4), 1.0, cx, cy, hue=t_hue, tex=1, amp=0.3, category=1))
        objs.append(_obj(1, "rectangle", (14, 2), 1.5, cx, cy - 4.0, hue=0.5, category=120))
        objs.append(_obj(2, "rectangle", (14, 2), 1.5, cx, cy + 4.0, hue=0.55, category=121))
        objs.append(_obj(3, "rectangle", (3, 4), 1.0, cx - 6, cy, hue=0.2, category=122))
        objs.append(_obj(4, "rectangle", (3, 4), 1.0, cx + 6, cy, hue=0.25, category=123))
    elif idx == 6:  # tall target inside a mixed heap
        objs.append(_obj(0, "rectangle", (4, 4), 2.5, cx, cy, hue=t_hue, tex=1, amp=0.3, category=1))
        heap = [(-4.5, -1, (4, 5), 1.0), (4.5, 1, (4, 5), 1.5), (-1, -5, (5, 4), 1.0),
                (1, 5, (5, 4), 1.5), (-5, 5, (3, 3), 1.0), (5, -5, (3, 3), 1.0)]
        for j, (dx, dy, dims, h) in enumerate(heap):
            objs.append(_obj(1 + j, "rectangle", dims, h, cx + dx, cy + dy,
                             hue=(0.35 + 0.07 * j) % 1.0, category=130 + j))
    elif idx == 7:  # two l-shapes hugging the target, gap sealed
        objs.append(_obj(0, "rectangle", (5, 4), 1.0, cx, cy, hue=t_hue, tex=1, amp=0.3, category=1))
        objs.append(_obj(1, "lshape", (10, 10, 3), 1.5, cx - 3.2, cy - 3.2, 0.0, hue=0.45,
                         category=140))
        objs.append(_obj(2, "lshape", (10, 10, 3), 1.5, cx + 3.2, cy + 3.2, math.pi, hue=0.5,
                         category=141))
        objs.append(_obj(3, "rectangle", (3, 3), 1.0, cx + 5.5, cy - 5.0, hue=0.2, category=142))
        objs.append(_obj(4, "rectangle", (3, 3), 1.0, cx - 5.5, cy + 5.0, hue=0.25, category=143))
    else:  # 8: tall disc target ringed by short discs
        objs.append(_obj(0, "disc", (2.6,), 2.0, cx, cy, hue=t_hue, tex=2, amp=0.3, category=1))
        for a in range(6):
            ang = 2 * math.pi * a / 6
            objs.append(_obj(1 + a, "disc", (2.0,), 1.0, cx + 5.0 * math.cos(ang),
                             cy + 5.0 * math.sin(ang), hue=(0.4 + 0.08 * a) % 1.0,
                             category=150 + a))
    return SceneState(objects=objs, target_id=0, case_name=f"coordination-{idx}")


def _build_confusing(idx: int) -> SceneState:
    base = {1: 1, 2: 3, 3: 2, 4: 5}[idx]
    state = _build_coordination(base)
    state.case_name = f"confusing-{idx}"
    target = state.get(state.target_id)
    oid = max(o.id for o in state.objects) + 1
    spots = [(14, 50), (50, 14), (50, 50), (13, 13)]
    for j in range(2 if idx < 4 else 3):
        twin = ObjectInstance(
            id=oid + j, shape=ShapeSpec(target.shape.kind, target.shape.dims, target.shape.height),
            pose=(float(spots[j][0]), float(spots[j][1]), 0.0),
            appearance=Appearance(tuple(target.appearance.color), target.appearance.tex_kind,
                                  target.appearance.tex_period, target.appearance.tex_phase,
                                  target.appearance.tex_amp),
            category=target.category)
        state.objects.append(twin)
    return state


def build_template(case: str) -> SceneState:
    """Nominal (unjittered) layout for a named case, stacking resolved."""
    if case in EXPLORATION_CASES:
        state = _build_exploration(int(case.split("-")[1]))
    elif case in COORDINATION_CASES:
        state = _build_coordination(int(case.split("-")[1]))
    elif case in CONFUSING_CASES:
        state = _build_confusing(int(case.split("-")[1]))
    else:
        raise ConfigError(f"no template for case {case!r}")
    resolve_stacking(state)
    validate_state(state)
    return state


def load_template(case: str) -> SceneState:
    """Committed template JSON for a named case."""
    try:
        text = resources.files("seekgrasp").joinpath(f"data/cases/{case}.json").read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"no committed template for case {case!r}") from exc
    return SceneState.from_json(text)


# ---------------------------------------------------------------------------
# jitter + validation

def _clusters_of(state: SceneState, link_dist=13.0):
    """Group objects into spatial clusters (union by center distance)."""
    objs = state.live_objects()
    parent = list(range(len(objs)))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(len(objs)):
        for j in range(i + 1, len(objs)):
            dx = objs[i].pose[0] - objs[j].pose[0]
            dy = objs[i].pose[1] - objs[j].pose[1]
            if math.hypot(dx, dy) <= link_dist:
                parent[find(i)] = find(j)
    groups = {}
    for i, o in enumerate(objs):
        groups.setdefault(find(i), []).append(o)
    return list(groups.values())


def _jitter_template(state: SceneState, rng) -> SceneState:
    """Shift whole clusters, jitter appearance; keeps tight packings intact."""
    for group in _clusters_of(state):
        dx = int(rng.integers(-2, 3))
        dy = int(rng.integers(-2, 3))
        for o in group:
            x = min(max(o.pose[0] + dx, 6.0), state.grid_w - 7.0)
            y = min(max(o.pose[1] + dy, 6.0), state.grid_h - 7.0)
            # keep the group's internal offsets: only apply the clamp-adjusted shift
            o.pose = (o.pose[0] + (x - o.pose[0] if abs(x - o.pose[0]) <= 2 else dx),
                      o.pose[1] + (y - o.pose[1] if abs(y - o.pose[1]) <= 2 else dy),
                      o.pose[2])
    for o in state.objects:
        r, g, b = o.appearance.color
        shift = rng.uniform(-0.03, 0.03)
        o.appearance.color = (min(1.0, max(0.0, r + shift)),
                              min(1.0, max(0.0, g + shift)),
                              min(1.0, max(0.0, b + shift)))
        o.appearance.tex_phase = float(o.appearance.tex_phase + rng.uniform(0, 0.25))
    return state


def random_scene(m: int, n: int, seed: int, cfg: WorldConfig, hide_target=False) -> SceneState:
    """m obstacles + n candidate targets dropped at random; one candidate is the target."""
    for attempt in range(60):
        rng = make_rng("random-scene", m, n, seed, attempt, hide_target)
        objs = []
        oid = 0
        for _ in range(m):
            kind = ["rectangle", "disc"][int(rng.integers(0, 2))]
            if kind == "rectangle":
                dims = (int(rng.integers(5, 10)), int(rng.integers(4, 8)))
            else:
                dims = (float(rng.uniform(2.5, 4.5)),)
            h = float(rng.choice([1.0, 1.5, 2.0]))
            objs.append(_obj(oid, kind, dims, h, rng.uniform(9, 55), rng.uniform(9, 55),
                             rng.uniform(0, 2 * math.pi), hue=float(rng.uniform(0, 1)),
                             tex=int(rng.integers(0, 3)), phase=float(rng.uniform(0, 1)),
                             amp=float(rng.uniform(0.0, 0.35)), category=200 + oid))
            oid += 1
        cand_ids = []
        bridge_target = None
        for j in range(n):
            if hide_target and j == 0:
                # the hidden target goes under a bridge placed after the drop
                cx = float(rng.uniform(14, 50))
                cy = float(rng.uniform(14, 50))
                axis = "y" if rng.integers(0, 2) == 0 else "x"
                dims = (int(rng.integers(4, 6)), 4)
                bridge_target, oid = _bridge(objs, oid, cx, cy, axis,
                                             hue=float(rng.uniform(0, 1)), category=300,
                                             target_dims=dims)
                cand_ids.append(bridge_target)
                continue
            kind = ["rectangle", "disc", "lshape"][int(rng.integers(0, 3))]
            if kind == "rectangle":
                dims = (int(rng.integers(3, 7)), int(rng.integers(3, 6)))
            elif kind == "disc":
                dims = (float(rng.uniform(1.5, 3.0)),)
            else:
                dims = (int(rng.integers(5, 8)), int(rng.integers(5, 8)), 2)
            h = float(rng.choice([1.0, 1.0, 1.5, 2.0]))
            objs.append(_obj(oid, kind, dims, h, rng.uniform(9, 55), rng.uniform(9, 55),
                             rng.uniform(0, 2 * math.pi), hue=float(rng.uniform(0, 1)),
                             tex=int(rng.integers(0, 3)), phase=float(rng.uniform(0, 1)),
                             amp=float(rng.uniform(0.0, 0.35)), category=300 + oid))
            cand_ids.append(oid)
            oid += 1
        target_id = bridge_target if hide_target else int(rng.choice(cand_ids))
        state = SceneState(objects=objs, target_id=target_id, rng_seed=seed,
                           case_name=f"random({m},{n})")
        resolve_stacking(state, cfg)
        alive = {o.id for o in state.live_objects()}
        if target_id not in alive or len(alive) < m + n - 2:
            continue
        if hide_target:
            state.case_name = f"hidden({m},{n})"
            if state.get(target_id).layer != 0:
                continue
            if visible_count(state, target_id) != 0:
                continue
        try:
            validate_state(state, cfg)
        except DataError:
            continue
        return state
    raise DataError(f"could not build random({m},{n}) scene for seed {seed}")


def generate_scenario(case: str, seed: int, cfg: WorldConfig | None = None) -> SceneState:
    """Deterministic scene for a case name; same (case, seed) gives the same scene."""
    cfg = cfg or WorldConfig()
    match = _RANDOM_RE.match(case)
    if match:
        return random_scene(int(match.group(1)), int(match.group(2)), seed, cfg)
    hid = re.match(r"^hidden\((\d+),\s*(\d+)\)$", case)
    if hid:
        return random_scene(int(hid.group(1)), int(hid.group(2)), seed, cfg, hide_target=True)
    info = case_info(case)  # raises ConfigError for unknown names
    for attempt in range(40):
        rng = make_rng("scenario", case, seed, attempt)
        state = _jitter_template(load_template(case), rng)
        state.rng_seed = seed
        resolve_stacking(state, cfg)
        if state.target_id not in {o.id for o in state.live_objects()}:
            continue
        try:
            validate_state(state, cfg)
        except DataError:
            continue
        if info["suite"] == "exploration" and visible_count(state, state.target_id) != 0:
            continue
        if info["suite"] in ("coordination", "confusing") and \
                visible_count(state, state.target_id) < 12:
            continue
        if info["suite"] == "confusing":
            target = state.get(state.target_id)
            twins = [o for o in state.live_objects()
                     if o.id != target.id and o.category == target.category]
            if len(twins) < 2:
                continue
        return state
    raise DataError(f"could not instantiate case {case!r} for seed {seed}")


def write_templates(out_dir) -> list:
    """Regenerate the committed case templates; returns written paths."""
    import pathlib
    out = pathlib.Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for case in (*EXPLORATION_CASES, *COORDINATION_CASES, *CONFUSING_CASES):
        path = out / f"{case}.json"
        path.write_text(build_template(case).to_json())
        written.append(path)
    return written
