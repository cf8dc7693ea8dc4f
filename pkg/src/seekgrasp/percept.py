"""Top-down perception: projections, instance masks, descriptors.

Renders the color and depth views of a scene, splits them into per-instance
masks (optionally corrupted by seeded segmentation noise), and turns masks
into fixed-length appearance descriptors. The similarity map paints each
mask with a learned relation score against a rendered reference view.
"""
from __future__ import annotations

import colorsys
import math
import re
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .config import ConfigError, DataError, WorldConfig, make_rng
from .world import SceneState, footprint, footprint_at, object_frame, z_extents

DESCRIPTOR_DIM = 16
FEATURE_MODES = ("full", "depth_ablated", "color_only", "no_crop")
_FOUR = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class Projections:
    rgb: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) top-surface height, 0 on empty table


@dataclass
class SegmentSet:
    masks: list = field(default_factory=list)  # boolean (H, W) arrays, disjoint
    source_ids: list = field(default_factory=list)  # object id per mask
    noise_kind: str = "none"
    changed_fraction: float = 0.0  # fraction of mask cells relabeled by noise

    def total_cells(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks))


def _texture_factor(obj, h, w):
    app = obj.appearance
    if app.tex_kind == 0 or app.tex_amp <= 0.0:
        return None
    qx, qy = object_frame(obj.pose, h, w)
    p = max(app.tex_period, 1e-6)
    if app.tex_kind == 1:
        pattern = np.floor(qx / p + app.tex_phase) % 2
    else:
        pattern = (np.floor(qx / p + app.tex_phase) + np.floor(qy / p + app.tex_phase)) % 2
    return 1.0 - app.tex_amp * pattern


def render_projections(state: SceneState, table_gray: float = 0.82) -> Projections:
    """Color from the topmost covering object, depth from the highest surface."""
    h, w = state.grid_h, state.grid_w
    rgb = np.full((h, w, 3), table_gray, dtype=np.float64)
    depth = np.zeros((h, w), dtype=np.float64)
    best_layer = np.full((h, w), -1, dtype=int)
    z = z_extents(state)
    for obj in sorted(state.live_objects(), key=lambda o: o.id):
        mask = footprint(state, obj)
        depth[mask] = np.maximum(depth[mask], z[obj.id][1])
        take = mask & (obj.layer > best_layer)
        if take.any():
            color = np.asarray(obj.appearance.color, dtype=np.float64)
            tex = _texture_factor(obj, h, w)
            if tex is None:
                rgb[take] = color
            else:
                rgb[take] = np.clip(color[None, :] * tex[take, None], 0.0, 1.0)
            best_layer[take] = obj.layer
    return Projections(rgb=rgb, depth=depth)


def segment_instances(proj: Projections, state: SceneState) -> SegmentSet:
    """One mask per 4-connected visible patch of each live object."""
    h, w = state.grid_h, state.grid_w
    best_layer = np.full((h, w), -1, dtype=int)
    owner = np.full((h, w), -1, dtype=int)
    for obj in state.live_objects():
        mask = footprint(state, obj)
        take = mask & (obj.layer > best_layer)
        owner[take] = obj.id
        best_layer[take] = obj.layer
    segs = SegmentSet()
    for obj in sorted(state.live_objects(), key=lambda o: o.id):
        vis = owner == obj.id
        if not vis.any():
            continue
        labels, n = ndimage.label(vis, structure=_FOUR)
        for comp in range(1, n + 1):
            segs.masks.append(labels == comp)
            segs.source_ids.append(obj.id)
    return segs


_NOISE_RE = re.compile(r"^(merge|split|erode):([0-9.]+)$")


def parse_noise(spec: str):
    """'none' or 'kind:param' -> (kind, param)."""
    if spec == "none":
        return ("none", 0.0)
    m = _NOISE_RE.match(spec)
    if not m:
        raise ConfigError(f"bad noise spec: {spec!r}")
    kind, param = m.group(1), float(m.group(2))
    if kind in ("merge", "split") and not 0.0 <= param <= 1.0:
        raise ConfigError(f"{kind} probability must be in [0, 1], got {param}")
    if kind == "erode" and not 1.0 <= param <= 4.0:
        raise ConfigError(f"erode radius must be in [1, 4], got {param}")
    return (kind, param)


def _adjacent(a: np.ndarray, b: np.ndarray) -> bool:
    return bool((ndimage.binary_dilation(a, structure=_FOUR) & b).any())


def perturb_segmentation(segs: SegmentSet, noise, seed) -> SegmentSet:
    """Apply seeded segmentation noise; the input set is never modified.

    merge p: each adjacent mask pair merges with probability p (union-find,
    the surviving label is the larger member's). split p: each mask splits
    along a random line with probability p. erode r: every mask shrinks by an
    r-cell 4-connected erosion; masks eroded to nothing are dropped.
    """
    if isinstance(noise, str):
        noise = parse_noise(noise)
    kind, param = noise
    total = max(1, segs.total_cells())
    if kind == "none":
        return SegmentSet(masks=[m.copy() for m in segs.masks],
                          source_ids=list(segs.source_ids))
    rng = make_rng("segnoise", kind, f"{param:.6f}", seed)
    changed = 0
    out = SegmentSet(noise_kind=kind)
    if kind == "merge":
        if not 0.0 <= param <= 1.0:
            raise ConfigError(f"merge probability out of range: {param}")
        n = len(segs.masks)
        parent = list(range(n))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        for i in range(n):
            for j in range(i + 1, n):
                if _adjacent(segs.masks[i], segs.masks[j]) and rng.random() < param:
                    parent[find(i)] = find(j)
        groups = {}
        for i in range(n):
            groups.setdefault(find(i), []).append(i)
        for root in sorted(groups, key=lambda r: min(groups[r])):
            members = groups[root]
            union = np.zeros_like(segs.masks[0])
            for i in members:
                union |= segs.masks[i]
            big = max(members, key=lambda i: (int(segs.masks[i].sum()), -i))
            out.masks.append(union)
            out.source_ids.append(segs.source_ids[big])
            changed += sum(int(segs.masks[i].sum()) for i in members if i != big)
    elif kind == "split":
        if not 0.0 <= param <= 1.0:
            raise ConfigError(f"split probability out of range: {param}")
        for mask, sid in zip(segs.masks, segs.source_ids):
            if int(mask.sum()) >= 8 and rng.random() < param:
                rows, cols = np.nonzero(mask)
                cy, cx = rows.mean(), cols.mean()
                phi = rng.uniform(0.0, math.pi)
                side = (cols - cx) * math.cos(phi) + (rows - cy) * math.sin(phi) >= 0.0
                if side.all() or not side.any():
                    out.masks.append(mask.copy())
                    out.source_ids.append(sid)
                    continue
                for sel in (side, ~side):
                    part = np.zeros_like(mask)
                    part[rows[sel], cols[sel]] = True
                    labels, ncomp = ndimage.label(part, structure=_FOUR)
                    for comp in range(1, ncomp + 1):
                        out.masks.append(labels == comp)
                        out.source_ids.append(sid)
                changed += int(min(side.sum(), (~side).sum()))
            else:
                out.masks.append(mask.copy())
                out.source_ids.append(sid)
    elif kind == "erode":
        iters = max(1, int(round(param)))
        for mask, sid in zip(segs.masks, segs.source_ids):
            shrunk = ndimage.binary_erosion(mask, structure=_FOUR, iterations=iters)
            changed += int(mask.sum() - shrunk.sum())
            if shrunk.any():
                out.masks.append(shrunk)
                out.source_ids.append(sid)
    else:
        raise ConfigError(f"unknown noise kind: {kind!r}")
    out.changed_fraction = changed / total
    return out


# ---------------------------------------------------------------------------
# descriptors

def _hue(rgb_pixels: np.ndarray) -> np.ndarray:
    r, g, b = rgb_pixels[:, 0], rgb_pixels[:, 1], rgb_pixels[:, 2]
    mx = rgb_pixels.max(axis=1)
    mn = rgb_pixels.min(axis=1)
    d = mx - mn
    hue = np.zeros(len(rgb_pixels))
    nz = d > 1e-12
    rm = nz & (mx == r)
    gm = nz & (mx == g) & ~rm
    bm = nz & ~rm & ~gm
    hue[rm] = ((g[rm] - b[rm]) / d[rm]) % 6.0
    hue[gm] = (b[gm] - r[gm]) / d[gm] + 2.0
    hue[bm] = (r[bm] - g[bm]) / d[bm] + 4.0
    return hue / 6.0


def _hu_features(mask: np.ndarray) -> np.ndarray:
    """First four Hu-style invariants, range-compressed to O(1) scales."""
    rows, cols = np.nonzero(mask)
    area = float(len(rows))
    cy, cx = rows.mean(), cols.mean()
    dy, dx = rows - cy, cols - cx

    def mu(p, q):
        return float((dx ** p * dy ** q).sum())

    def eta(p, q):
        return mu(p, q) / area ** (1.0 + (p + q) / 2.0)

    e20, e02, e11 = eta(2, 0), eta(0, 2), eta(1, 1)
    e30, e03, e21, e12 = eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2)
    h1 = e20 + e02
    h2 = (e20 - e02) ** 2 + 4.0 * e11 ** 2
    h3 = (e30 - 3.0 * e12) ** 2 + (3.0 * e21 - e03) ** 2
    h4 = (e30 + e12) ** 2 + (e21 + e03) ** 2
    return np.array([h1 * 2.0, math.sqrt(max(h2, 0.0)) * 4.0,
                     np.cbrt(h3) * 4.0, np.cbrt(h4) * 4.0])


def _grid_moments(mask: np.ndarray) -> np.ndarray:
    """Grid-frame moments; translation-sensitive by construction."""
    h, w = mask.shape
    rows, cols = np.nonzero(mask)
    ny = (rows - h / 2.0) / (h / 2.0)
    nx = (cols - w / 2.0) / (w / 2.0)
    return np.array([float((nx * nx + ny * ny).mean()) * 2.0,
                     float((nx * ny).mean()) * 4.0,
                     float(nx.mean()) * 2.0,
                     float(ny.mean()) * 2.0])


def compute_descriptor(proj: Projections, mask: np.ndarray, mode: str = "full") -> np.ndarray:
    """16-dim appearance vector for one visible patch.

    Layout: [0:8] hue histogram, [8:12] shape moments, [12] area,
    [13] mean surface height, [14:16] texture statistics. Ablation modes zero
    the parts they remove; no_crop swaps the crop-normalized moments for
    grid-frame ones.
    """
    if mode not in FEATURE_MODES:
        raise ConfigError(f"unknown feature mode: {mode!r}")
    if not mask.any():
        raise DataError("cannot describe an empty mask")
    px = proj.rgb[mask]
    hist = np.histogram(_hue(px), bins=8, range=(0.0, 1.0))[0]
    hist = hist / hist.sum()

    moments = _grid_moments(mask) if mode == "no_crop" else _hu_features(mask)
    area = math.sqrt(float(mask.sum())) / 16.0
    height = float(proj.depth[mask].mean()) / 4.0

    lum = proj.rgb.mean(axis=2)
    spread = float(lum[mask].std()) * 4.0
    edges = 0.0
    npairs = 0
    for dr, dc in ((0, 1), (1, 0)):
        a = mask[: mask.shape[0] - dr, : mask.shape[1] - dc]
        b = mask[dr:, dc:]
        both = a & b
        n = int(both.sum())
        if n:
            la = lum[: mask.shape[0] - dr, : mask.shape[1] - dc][both]
            lb = lum[dr:, dc:][both]
            edges += float(np.abs(la - lb).sum())
            npairs += n
    grad = (edges / npairs if npairs else 0.0) * 4.0

    vec = np.concatenate([hist, moments, [area, height, spread, grad]])
    if mode == "depth_ablated":
        vec[13] = 0.0
    elif mode == "color_only":
        vec[8:14] = 0.0
    return vec


def render_reference(state: SceneState, target_id: int, jitter: float = 0.0,
                     mode: str = "full", salt: int = 0) -> np.ndarray:
    """Descriptor of the target rendered alone at a canonical pose.

    A small seeded hue perturbation (jitter) keeps the reference from being
    bitwise equal to any in-scene descriptor. Raises DataError if the target
    has been removed.
    """
    src = state.get(target_id)
    if src.removed:
        raise DataError("target has been removed; no reference to render")
    solo = SceneState(grid_w=state.grid_w, grid_h=state.grid_h, cell_size=state.cell_size,
                      objects=[], target_id=target_id, rng_seed=state.rng_seed)
    obj = src.__class__.from_dict(src.to_dict())
    obj.layer = 0
    obj.removed = False
    obj.pose = (state.grid_w // 2, state.grid_h // 2, 0.0)
    if jitter > 0.0:
        rng = make_rng("reference", state.rng_seed, target_id, salt)
        hsv = colorsys.rgb_to_hsv(*obj.appearance.color)
        hue = (hsv[0] + rng.uniform(-jitter, jitter)) % 1.0
        obj.appearance.color = colorsys.hsv_to_rgb(hue, hsv[1], hsv[2])
    solo.objects.append(obj)
    proj = render_projections(solo)
    mask = footprint(solo, obj)
    return compute_descriptor(proj, mask, mode)


def build_similarity_map(segs: SegmentSet, reference: np.ndarray, scorer,
                         proj: Projections, mode: str = "full") -> np.ndarray:
    """Paint each mask with scorer(reference, descriptor); background stays 0."""
    smap = np.zeros(proj.depth.shape, dtype=np.float64)
    for mask in segs.masks:
        desc = compute_descriptor(proj, mask, mode)
        smap[mask] = float(scorer(reference, desc))
    return smap


def visible_target_pixels(segs: SegmentSet, state: SceneState) -> int:
    """Ground-truth visible cell count of the target across its patches."""
    return int(sum(int(m.sum()) for m, sid in zip(segs.masks, segs.source_ids)
                   if sid == state.target_id))


# ---------------------------------------------------------------------------
# image files

def write_rgb_png(rgb: np.ndarray, path) -> None:
    from PIL import Image
    arr = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(str(path))


def write_depth_pgm(depth: np.ndarray, path) -> None:
    """16-bit binary PGM; value = height * 256, exact for quarter-cell heights."""
    h, w = depth.shape
    vals = np.round(depth * 256.0)
    if (vals < 0).any() or (vals > 65535).any():
        raise DataError("depth out of range for 16-bit PGM")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(vals.astype(">u2").tobytes())


def read_depth_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise DataError("not a binary PGM file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 65535:
        raise DataError("expected 16-bit PGM")
    vals = np.frombuffer(data[pos : pos + 2 * w * h], dtype=">u2")
    if vals.size != w * h:
        raise DataError("truncated PGM payload")
    return vals.reshape(h, w).astype(np.float64) / 256.0
