"""One-shot target matching: descriptor encoder plus relation scorer.

A small encoder maps 16-dim segment descriptors into an embedding space; the
relation head scores reference/candidate embedding pairs in (0, 1). Training
is episodic: binary cross-entropy on relation scores plus a hardest-in-episode
triplet margin on the embeddings. Synthetic category banks for training and
few-shot evaluation are built by rendering single objects with jittered poses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, DataError, TsnConfig, make_rng
from .nets import Adam, Linear, ReLU, Sequential, Sigmoid, bce_loss
from .percept import DESCRIPTOR_DIM, compute_descriptor, render_projections
from .world import Appearance, ObjectInstance, SceneState, ShapeSpec, footprint


@dataclass
class TsnParams:
    encoder: Sequential
    relation: Sequential
    embed_dim: int

    @property
    def params(self):
        return self.encoder.params + self.relation.params

    @property
    def grads(self):
        return self.encoder.grads + self.relation.grads

    def zero_grads(self):
        self.encoder.zero_grads()
        self.relation.zero_grads()


def build_tsn(cfg: TsnConfig, rng) -> TsnParams:
    enc = Sequential(
        Linear(rng, DESCRIPTOR_DIM, cfg.hidden),
        ReLU(),
        Linear(rng, cfg.hidden, cfg.embed_dim),
    )
    rel = Sequential(
        Linear(rng, 2 * cfg.embed_dim, cfg.hidden),
        ReLU(),
        Linear(rng, cfg.hidden, 1),
        Sigmoid(),
    )
    return TsnParams(encoder=enc, relation=rel, embed_dim=cfg.embed_dim)


def embed(params: TsnParams, desc: np.ndarray) -> np.ndarray:
    """Embedding of one descriptor (d,) or a batch (n, d)."""
    single = desc.ndim == 1
    out = params.encoder.forward(np.atleast_2d(np.asarray(desc, dtype=np.float64)))
    return out[0] if single else out


def relation_score(params: TsnParams, ref_emb: np.ndarray, cand_emb: np.ndarray) -> float:
    pair = np.concatenate([ref_emb, cand_emb])[None, :]
    return float(params.relation.forward(pair)[0, 0])


def make_scorer(params: TsnParams):
    """Descriptor-level callable for similarity-map construction."""
    def scorer(ref_desc, cand_desc):
        return relation_score(params, embed(params, ref_desc), embed(params, cand_desc))
    return scorer


@dataclass
class Episode:
    reference: np.ndarray  # (d,)
    candidates: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) bool


def episode_loss(params: TsnParams, ep: Episode, cfg: TsnConfig):
    """Loss for one episode; gradients accumulate into params.

    Returns (total_loss, parts). BCE is averaged over candidates; the triplet
    term uses the hardest positive (farthest) and hardest negative (closest)
    embeddings in the episode.
    """
    labels = np.asarray(ep.labels, dtype=bool)
    if not labels.any() or labels.all():
        raise DataError("episode needs at least one positive and one negative")
    n = len(labels)
    stacked = np.vstack([ep.reference[None, :], ep.candidates]).astype(np.float64)
    emb = params.encoder.forward(stacked)
    e_ref, e_cand = emb[0], emb[1:]

    pair = np.concatenate([np.repeat(e_ref[None, :], n, axis=0), e_cand], axis=1)
    scores = params.relation.forward(pair)
    bce, dscores = bce_loss(scores, labels.astype(np.float64)[:, None])

    deltas = e_cand - e_ref[None, :]
    dists = np.sqrt((deltas ** 2).sum(axis=1) + 1e-12)
    pos_idx = np.nonzero(labels)[0]
    neg_idx = np.nonzero(~labels)[0]
    hp = pos_idx[np.argmax(dists[pos_idx])]
    hn = neg_idx[np.argmin(dists[neg_idx])]
    trip = max(0.0, cfg.margin + dists[hp] - dists[hn])

    dpair = params.relation.backward(cfg.bce_weight * dscores)
    demb = np.zeros_like(emb)
    demb[0] += dpair[:, : params.embed_dim].sum(axis=0)
    demb[1:] += dpair[:, params.embed_dim:]
    if trip > 0.0:
        up = deltas[hp] / dists[hp]
        un = deltas[hn] / dists[hn]
        demb[1 + hp] += cfg.triplet_weight * up
        demb[1 + hn] -= cfg.triplet_weight * un
        demb[0] += cfg.triplet_weight * (un - up)
    params.encoder.backward(demb)

    total = cfg.bce_weight * bce + cfg.triplet_weight * trip
    return total, {"bce": float(bce), "triplet": float(trip)}


# ---------------------------------------------------------------------------
# synthetic category banks

@dataclass
class CategoryBank:
    category: int
    instances: np.ndarray  # (n, d)
    refs: np.ndarray  # (m, d)


@dataclass
class DescriptorDataset:
    banks: list = field(default_factory=list)
    mode: str = "full"

    def __len__(self):
        return len(self.banks)


_HUE_PALETTE = [0.02, 0.09, 0.17, 0.33, 0.47, 0.58, 0.72, 0.86]


def _category_spec(ci: int, rng):
    """Deterministic category definition; categories come in height-split pairs.

    Pair members (2b, 2b+1) share hue, shape, and texture but differ in height,
    so depth-blind features cannot separate them. Bases reuse an 8-hue palette,
    so hue-only features collide across bases as well.
    """
    base, member = divmod(ci, 2)
    hue = _HUE_PALETTE[base % len(_HUE_PALETTE)]
    kind = ("rectangle", "disc", "lshape")[base % 3]
    if kind == "rectangle":
        dims = (float(rng.uniform(4.0, 9.0)), float(rng.uniform(3.0, 6.0)))
    elif kind == "disc":
        dims = (float(rng.uniform(2.0, 4.5)),)
    else:
        long = float(rng.uniform(6.0, 10.0))
        dims = (long, float(rng.uniform(5.0, long)), float(rng.uniform(2.0, 3.0)))
    lo, hi = (1.0, 2.0) if base % 2 == 0 else (1.25, 2.5)
    height = lo if member == 0 else hi
    tex_kind = base % 3 if base % 4 else 0
    tex = {"tex_kind": tex_kind, "tex_period": float(rng.uniform(2.5, 5.0)),
           "tex_amp": float(rng.uniform(0.2, 0.4)) if tex_kind else 0.0}
    return {"hue": hue, "kind": kind, "dims": dims, "height": height, **tex}


def _render_instance(spec, rng, mode, canonical=False, grid=64):
    import colorsys
    if canonical:
        x = y = grid // 2
        theta = 0.0
        dims = spec["dims"]
    else:
        x = float(rng.uniform(20, grid - 20))
        y = float(rng.uniform(20, grid - 20))
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        jit = rng.uniform(-0.4, 0.4, size=len(spec["dims"]))
        dims = tuple(max(1.2, d + j) for d, j in zip(spec["dims"], jit))
    hue = (spec["hue"] + rng.uniform(-0.015, 0.015)) % 1.0
    color = colorsys.hsv_to_rgb(hue, 0.85, 0.9)
    obj = ObjectInstance(
        id=0, shape=ShapeSpec(spec["kind"], dims, spec["height"]),
        pose=(x, y, theta), layer=0,
        appearance=Appearance(color, spec["tex_kind"], spec["tex_period"],
                              float(rng.uniform(0.0, 1.0)), spec["tex_amp"]))
    state = SceneState(objects=[obj], target_id=0)
    proj = render_projections(state)
    return compute_descriptor(proj, footprint(state, obj), mode)


def build_descriptor_dataset(n_categories: int, n_instances: int, seed: int,
                             mode: str = "full", n_refs: int = 5) -> DescriptorDataset:
    """Rendered descriptor banks for n_categories synthetic categories."""
    if n_categories < 2:
        raise ConfigError("need at least 2 categories")
    ds = DescriptorDataset(mode=mode)
    for ci in range(n_categories):
        spec_rng = make_rng("category-spec", seed, ci)
        spec = _category_spec(ci, spec_rng)
        inst_rng = make_rng("category-instances", seed, ci)
        inst = np.stack([_render_instance(spec, inst_rng, mode) for _ in range(n_instances)])
        ref_rng = make_rng("category-refs", seed, ci)
        refs = np.stack([_render_instance(spec, ref_rng, mode, canonical=True)
                         for _ in range(n_refs)])
        ds.banks.append(CategoryBank(category=ci, instances=inst, refs=refs))
    return ds


def split_dataset(ds: DescriptorDataset, n_train: int):
    """Category-disjoint split keeping height-pair members together."""
    if n_train % 2 or n_train >= len(ds.banks):
        raise ConfigError("n_train must be even and smaller than the bank count")
    train = DescriptorDataset(banks=ds.banks[:n_train], mode=ds.mode)
    held = DescriptorDataset(banks=ds.banks[n_train:], mode=ds.mode)
    return train, held


def sample_episode(ds: DescriptorDataset, rng, n_pos=2, n_neg_cats=3, n_per_neg=2) -> Episode:
    if len(ds.banks) < 2:
        raise DataError("episode sampling needs >= 2 categories")
    ci = int(rng.integers(0, len(ds.banks)))
    bank = ds.banks[ci]
    ref = bank.refs[int(rng.integers(0, len(bank.refs)))]
    pos = bank.instances[rng.choice(len(bank.instances), size=n_pos, replace=False)]
    cands = [pos]
    labels = [np.ones(n_pos, dtype=bool)]
    others = [i for i in range(len(ds.banks)) if i != ci]
    for oi in rng.choice(others, size=min(n_neg_cats, len(others)), replace=False):
        neg_bank = ds.banks[int(oi)]
        neg = neg_bank.instances[rng.choice(len(neg_bank.instances), size=n_per_neg,
                                            replace=False)]
        cands.append(neg)
        labels.append(np.zeros(n_per_neg, dtype=bool))
    return Episode(reference=ref, candidates=np.concatenate(cands),
                   labels=np.concatenate(labels))


def train_tsn(dataset: DescriptorDataset, cfg: TsnConfig, seed: int = 0):
    """Episodic training; returns (params, loss_curve)."""
    if len(dataset.banks) < 2:
        raise DataError("training requires at least 2 categories")
    rng = make_rng("tsn-train", seed)
    params = build_tsn(cfg, make_rng("tsn-init", seed))
    adam = Adam(params.params, lr=cfg.lr)
    curve = []
    for _ in range(cfg.episodes):
        ep = sample_episode(dataset, rng)
        params.zero_grads()
        loss, _ = episode_loss(params, ep, cfg)
        adam.step(params.grads)
        curve.append(float(loss))
    return params, curve


def evaluate_fewshot(params: TsnParams, dataset: DescriptorDataset, n_way: int = 5,
                     k_shot: int = 1, episodes: int = 600, seed: int = 0) -> float:
    """n-way k-shot accuracy; the query matches the support with the top mean score."""
    if len(dataset.banks) < n_way:
        raise DataError(f"need >= {n_way} categories for {n_way}-way evaluation")
    rng = make_rng("fewshot", seed, n_way, k_shot)
    correct = 0
    for _ in range(episodes):
        ways = rng.choice(len(dataset.banks), size=n_way, replace=False)
        true_way = int(rng.integers(0, n_way))
        support_emb = []
        query_emb = None
        for w, ci in enumerate(ways):
            bank = dataset.banks[int(ci)]
            take = k_shot + (1 if w == true_way else 0)
            idx = rng.choice(len(bank.instances), size=take, replace=False)
            emb_rows = embed(params, bank.instances[idx])
            if w == true_way:
                query_emb = emb_rows[-1]
                emb_rows = emb_rows[:-1]
            support_emb.append(emb_rows)
        scores = [float(np.mean([relation_score(params, s, query_emb) for s in rows]))
                  for rows in support_emb]
        if int(np.argmax(scores)) == true_way:
            correct += 1
    return correct / episodes
