"""Hierarchical decision making: subtask classifier, explorer, coordinator
with its grasp-confidence head and ROC-fitted threshold, and the
Bayesian-product exploration baseline maps."""

from dataclasses import dataclass, field

import numpy as np

from .config import DataError, PolicyConfig, make_rng
from .nets import (Adam, AvgPool2d, Conv2d, GlobalAvgPool, LayerNorm, Linear,
                   ReLU, Sequential, Sigmoid, bce_loss)
from .qfunc import DEPTH_SCALE, QMaps, argmax_action
from .world import GraspCommand, PushCommand

EXPLORATION = "exploration"
COORDINATION = "coordination"

# fixed input conditioning so branch activations start on comparable scales
_N_B_SCALE = 4.0
_C_G_SCALE = 5.0
_POOL_SCALE = 32.0


@dataclass
class PolicyDecision:
    subtask: str
    motion: str  # "push" | "grasp"
    pixel: tuple
    rotation_index: int
    command: object
    p_c: float | None = None
    q_g: float = 0.0
    q_p: float = 0.0


# ---------------------------------------------------------------------------
# high-level subtask classifier

def pooled_stats(smap: np.ndarray) -> np.ndarray:
    """Similarity-map summary: peak score, plateau areas, total mass."""
    s = np.asarray(smap, dtype=float)
    return np.array([
        float(s.max(initial=0.0)),
        float((s >= 0.5).sum()) / _POOL_SCALE,
        float((s >= 0.25).sum()) / _POOL_SCALE,
        float(s.sum()) / _POOL_SCALE,
    ])


@dataclass
class HighLevelParams:
    net: Sequential | None = None
    mode: str = "learned"  # learned | heuristic
    s_vis: float = 0.5
    a_vis: int = 16
    train_curve: list = field(default_factory=list)


def build_highlevel(cfg: PolicyConfig, rng) -> HighLevelParams:
    net = Sequential(Linear(rng, 4, cfg.subtask_hidden), ReLU(),
                     Linear(rng, cfg.subtask_hidden, 1), Sigmoid())
    return HighLevelParams(net=net, mode=cfg.subtask_mode,
                           s_vis=cfg.s_vis, a_vis=cfg.a_vis)


def classify_subtask(params: HighLevelParams, smap: np.ndarray) -> str:
    if params.mode == "learned" and params.net is not None:
        score = float(params.net.forward(pooled_stats(smap))[0])
        return COORDINATION if score >= 0.5 else EXPLORATION
    plateau = int((smap >= params.s_vis).sum())
    if float(smap.max(initial=0.0)) >= params.s_vis and plateau >= params.a_vis:
        return COORDINATION
    return EXPLORATION


def train_subtask_classifier(dataset, cfg: PolicyConfig | None = None,
                             seed: int = 0, epochs: int = 300,
                             lr: float = 1e-2) -> HighLevelParams:
    """Fit the pooled-stats classifier on (similarity map, coordination label)
    pairs with class-balanced BCE; labels come from ground-truth exposure.

    Exposure frames are a small minority of on-policy data, so each class is
    reweighted to contribute half of the loss."""
    cfg = cfg or PolicyConfig()
    labels = np.array([bool(y) for _, y in dataset])
    if labels.all() or not labels.any():
        raise DataError("subtask training set needs both labels")
    feats = np.stack([pooled_stats(s) for s, _ in dataset])
    y = labels.astype(float)[:, None]
    pos = labels.mean()
    w = np.where(y > 0.5, 0.5 / pos, 0.5 / (1.0 - pos))

    params = build_highlevel(cfg, make_rng("subtask-init", seed))
    opt = Adam(params.net.params, lr=lr)
    eps = 1e-12
    for _ in range(epochs):
        params.net.zero_grads()
        p = np.clip(params.net.forward(feats), eps, 1.0 - eps)
        loss = float((-w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))).mean())
        dp = w * (p - y) / (p * (1.0 - p)) / p.size
        params.net.backward(dp)
        opt.step(params.net.grads)
        params.train_curve.append(loss)
    return params


# ---------------------------------------------------------------------------
# coordinator

@dataclass
class CoordinatorParams:
    scalar: Sequential
    crop: Sequential | None
    fusion: Sequential
    tau: float = 0.80

    @property
    def params(self):
        crop = self.crop.params if self.crop is not None else []
        return self.scalar.params + crop + self.fusion.params

    @property
    def grads(self):
        crop = self.crop.grads if self.crop is not None else []
        return self.scalar.grads + crop + self.fusion.grads

    def zero_grads(self):
        self.scalar.zero_grads()
        if self.crop is not None:
            self.crop.zero_grads()
        self.fusion.zero_grads()


def build_coordinator(cfg: PolicyConfig, rng, use_crop: bool = True) -> CoordinatorParams:
    h = cfg.scalar_hidden
    scalar = Sequential(Linear(rng, 5, h), LayerNorm(h), ReLU(),
                        Linear(rng, h, h), ReLU())
    crop = None
    crop_out = 0
    if use_crop:
        c = cfg.crop_channels
        crop = Sequential(Conv2d(rng, 1, c), ReLU(), AvgPool2d(),
                          Conv2d(rng, c, 2 * c), ReLU(), GlobalAvgPool())
        crop_out = 2 * c
    fusion = Sequential(Linear(rng, h + crop_out, cfg.fusion_hidden), ReLU(),
                        Linear(rng, cfg.fusion_hidden, 1), Sigmoid())
    return CoordinatorParams(scalar=scalar, crop=crop, fusion=fusion, tau=cfg.tau)


def _scaled_inputs(features):
    vec = np.array([features.q_g, features.q_p, features.r_b,
                    features.n_b / _N_B_SCALE, features.c_g / _C_G_SCALE])
    crop = np.asarray(features.m_t, dtype=float)[None] / DEPTH_SCALE
    return vec, crop


def _coordinator_forward(params: CoordinatorParams, features):
    vec, crop = _scaled_inputs(features)
    parts = [params.scalar.forward(vec)]
    if params.crop is not None:
        parts.append(params.crop.forward(crop))
    return params.fusion.forward(np.concatenate(parts))


def coordinator_confidence(params: CoordinatorParams, features) -> float:
    return float(_coordinator_forward(params, features)[0])


def coordinator_loss(params: CoordinatorParams, features, label) -> float:
    """BCE of the grasp-confidence head on one sample; grads accumulate."""
    p = _coordinator_forward(params, features)
    loss, dp = bce_loss(p, np.array([float(label)]))
    dcat = params.fusion.backward(dp)
    n_s = len(params.scalar.layers[-2].b)
    params.scalar.backward(dcat[:n_s])
    if params.crop is not None:
        params.crop.backward(dcat[n_s:])
    return float(loss)


def train_coordinator(samples, cfg: PolicyConfig | None = None, seed: int = 0,
                      use_crop: bool = True, epochs: int = 30,
                      lr: float = 1e-2, batch_size: int = 16):
    """Fit the grasp-confidence head on (DomainFeatures, grasp_success) pairs.

    Returns (params, per-epoch mean losses)."""
    cfg = cfg or PolicyConfig()
    labels = np.array([bool(y) for _, y in samples])
    if labels.all() or not labels.any():
        raise DataError("coordinator training set needs both grasp outcomes")
    rng = make_rng("coordinator-train", seed, use_crop)
    params = build_coordinator(cfg, make_rng("coordinator-init", seed, use_crop),
                               use_crop=use_crop)
    opt = Adam(params.params, lr=lr)
    losses = []
    idx = np.arange(len(samples))
    for _ in range(epochs):
        rng.shuffle(idx)
        total = 0.0
        for lo in range(0, len(idx), batch_size):
            chunk = idx[lo:lo + batch_size]
            params.zero_grads()
            for i in chunk:
                feats, y = samples[i]
                total += coordinator_loss(params, feats, y)
            for g in params.grads:
                g /= len(chunk)
            opt.step(params.grads)
        losses.append(total / len(idx))
    return params, losses


# ---------------------------------------------------------------------------
# action selection

def _decision(subtask, motion, qmaps, p_c=None):
    q_pix, q_rot, val = argmax_action(qmaps, motion)
    g_val = argmax_action(qmaps, "grasp")[2]
    p_val = argmax_action(qmaps, "push")[2]
    cmd_cls = PushCommand if motion == "push" else GraspCommand
    k = qmaps.push.shape[0]
    return PolicyDecision(subtask=subtask, motion=motion, pixel=q_pix,
                          rotation_index=q_rot,
                          command=cmd_cls(pixel=q_pix, rotation_index=q_rot, k=k),
                          p_c=p_c, q_g=float(g_val), q_p=float(p_val))


def select_action_explorer(qmaps: QMaps) -> PolicyDecision:
    """Exploration always pushes, at the global push-Q argmax."""
    return _decision(EXPLORATION, "push", qmaps)


def select_action_coordinator(params: CoordinatorParams, qmaps: QMaps,
                              features, tau: float | None = None) -> PolicyDecision:
    """Grasp at the grasp-Q argmax iff p_c >= tau, else push."""
    tau = params.tau if tau is None else tau
    p_c = coordinator_confidence(params, features)
    motion = "grasp" if p_c >= tau else "push"
    return _decision(COORDINATION, motion, qmaps, p_c=p_c)


# ---------------------------------------------------------------------------
# ROC threshold fitting

@dataclass
class RocResult:
    thresholds: np.ndarray  # descending; leading +inf anchors (0, 0)
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    tau: float


def fit_threshold_roc(samples) -> RocResult:
    """Threshold sweep over the distinct scores; AUC by trapezoid, tau by
    Youden's J with ties resolved to the larger threshold."""
    scores = np.array([float(s) for s, _ in samples])
    labels = np.array([bool(y) for _, y in samples])
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs both outcome classes")

    thr = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    pred = scores[None, :] >= thr[:, None]
    tpr = (pred & labels[None, :]).sum(axis=1) / n_pos
    fpr = (pred & ~labels[None, :]).sum(axis=1) / n_neg
    auc = float(np.trapezoid(tpr, fpr))

    j = tpr[1:] - fpr[1:]  # tau must be an attainable score
    best = np.flatnonzero(j == j.max())[0]  # thresholds descend: first = largest
    return RocResult(thresholds=thr, tpr=tpr, fpr=fpr, auc=auc,
                     tau=float(thr[1 + best]))


# ---------------------------------------------------------------------------
# Bayesian-product exploration baseline

@dataclass
class BayesMaps:
    c_p: np.ndarray
    f_p: np.ndarray


def make_bayes_maps(shape, cfg: PolicyConfig | None = None) -> BayesMaps:
    cfg = cfg or PolicyConfig()
    return BayesMaps(c_p=np.full(shape, cfg.cp_floor), f_p=np.ones(shape))


def clutter_prior(depth: np.ndarray, shift: int = 2, h_min: float = 1.0,
                  floor: float = 0.1) -> np.ndarray:
    """1 where any compass shift of the depth map differs by >= h_min, else
    a small floor so Hadamard products never hard-zero."""
    h, w = depth.shape
    acc = np.zeros_like(depth)
    for dr in (-shift, 0, shift):
        for dc in (-shift, 0, shift):
            if dr == 0 and dc == 0:
                continue
            shifted = np.zeros_like(depth)
            r0, r1 = max(0, dr), min(h, h + dr)
            c0, c1 = max(0, dc), min(w, w + dc)
            shifted[r0:r1, c0:c1] = depth[r0 - dr:r1 - dr, c0 - dc:c1 - dc]
            np.maximum(acc, np.abs(shifted - depth), out=acc)
    return np.where(acc >= h_min, 1.0, floor)


def update_failure_map(f_p: np.ndarray, pixel, sigma: float = 4.0,
                       beta: float = 0.8, floor: float = 0.01) -> np.ndarray:
    """Multiplicative Gaussian suppression around a failed push pixel."""
    h, w = f_p.shape
    rr, cc = np.mgrid[0:h, 0:w]
    d2 = (rr - pixel[0]) ** 2.0 + (cc - pixel[1]) ** 2.0
    out = f_p * (1.0 - beta * np.exp(-d2 / (2.0 * sigma * sigma)))
    return np.clip(out, floor, None)


def decay_failure_map(f_p: np.ndarray, rate: float = 1.1) -> np.ndarray:
    """Relax suppression back toward 1 by a constant factor per step."""
    return np.minimum(f_p * rate, 1.0)


def gti_explore_map(qmaps: QMaps, depth: np.ndarray, bayes: BayesMaps,
                    cfg: PolicyConfig | None = None) -> PolicyDecision:
    """Push at the argmax of Q_p x C_p x F_p; refreshes bayes.c_p from the
    current depth (F_p is episode memory maintained by the runner)."""
    cfg = cfg or PolicyConfig()
    bayes.c_p = clutter_prior(depth, cfg.cp_shift, cfg.cp_hmin, cfg.cp_floor)
    product = qmaps.push * bayes.c_p[None] * bayes.f_p[None]
    prod_maps = QMaps(push=product, grasp=qmaps.grasp, valid=qmaps.valid)
    return _decision(EXPLORATION, "push", prod_maps)
