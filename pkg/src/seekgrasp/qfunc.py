"""Pixel-wise push and grasp value maps over rotation-stacked scene tensors.

The scene (similarity map, color, depth) is stacked k times, each stack
counter-rotated so motion direction i becomes the canonical +x axis. One
shared network scores every stack; un-rotating its outputs yields per-pixel,
per-direction value maps whose joint argmax is the greedy action. Training is
single-step temporal difference on a Huber error at the executed action only,
from a small reward-weighted replay buffer.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError, DataError, QFuncConfig
from .nets import Adam, Conv2d, Layer, ReLU, Sequential
from .rotation import rotate_k, source_maps

DEPTH_SCALE = 4.0  # height units mapped into [0, ~1] for network input


@dataclass
class StateTensor:
    stacks: np.ndarray  # (k, 5, H, W) float64
    k: int


def base_channels(smap: np.ndarray, rgb: np.ndarray, depth: np.ndarray) -> np.ndarray:
    if smap.shape != depth.shape or rgb.shape != smap.shape + (3,):
        raise ConfigError(f"channel shape mismatch: S {smap.shape}, I {rgb.shape}, "
                          f"D {depth.shape}")
    return np.stack([smap, rgb[..., 0], rgb[..., 1], rgb[..., 2], depth / DEPTH_SCALE])


def single_stack(smap, rgb, depth, rotation_index: int, k: int) -> np.ndarray:
    """One counter-rotated 5-channel stack for the given motion direction."""
    base = base_channels(smap, rgb, depth)
    j = (k - rotation_index) % k
    return np.stack([rotate_k(c, j, k) for c in base])


def assemble_state(smap: np.ndarray, rgb: np.ndarray, depth: np.ndarray,
                   k: int = 16) -> StateTensor:
    base = base_channels(smap, rgb, depth)
    stacks = np.empty((k, base.shape[0]) + smap.shape, dtype=np.float64)
    for i in range(k):
        j = (k - i) % k
        for c in range(base.shape[0]):
            stacks[i, c] = rotate_k(base[c], j, k)
    return StateTensor(stacks=stacks, k=k)


class QNetConv:
    """Shared conv encoder with one 1-channel head per motion primitive.

    Five 3x3 encoder convolutions plus the head give a 6-cell half receptive
    field, enough to see both finger landing zones of a canonical grasp.
    """

    kind = "conv"

    def __init__(self, rng, channels: int = 8):
        self.channels = channels
        self.encoder = Sequential(
            Conv2d(rng, 5, channels), ReLU(),
            Conv2d(rng, channels, channels), ReLU(),
            Conv2d(rng, channels, channels), ReLU(),
            Conv2d(rng, channels, channels), ReLU(),
            Conv2d(rng, channels, channels), ReLU(),
        )
        self.head_push = Conv2d(rng, channels, 1)
        self.head_grasp = Conv2d(rng, channels, 1)

    @property
    def params(self):
        return self.encoder.params + self.head_push.params + self.head_grasp.params

    @property
    def grads(self):
        return self.encoder.grads + self.head_push.grads + self.head_grasp.grads

    def zero_grads(self):
        self.encoder.zero_grads()
        self.head_push.zero_grads()
        self.head_grasp.zero_grads()

    def forward(self, stack: np.ndarray) -> np.ndarray:
        feat = self.encoder.forward(stack)
        return np.concatenate([self.head_push.forward(feat),
                               self.head_grasp.forward(feat)], axis=0)

    def backward(self, dout: np.ndarray) -> None:
        dfeat = self.head_push.backward(dout[0:1]) + self.head_grasp.backward(dout[1:2])
        self.encoder.backward(dfeat)


class _BoxMean(Layer):
    """Fixed 3x3 box-mean over each channel; self-adjoint, no parameters."""

    def _apply(self, x):
        c, h, w = x.shape
        pad = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
        pad[:, 1:-1, 1:-1] = x
        out = np.zeros_like(x)
        for dr in range(3):
            for dc in range(3):
                out += pad[:, dr : dr + h, dc : dc + w]
        return out / 9.0

    def forward(self, x):
        return self._apply(np.asarray(x, dtype=float))

    def backward(self, dy):
        return self._apply(dy)


class QNetLinear:
    """Per-pixel affine baseline over raw channels plus 3x3 box means."""

    kind = "linear"

    def __init__(self, rng, channels: int = 8):
        self.channels = channels
        self.box = _BoxMean()
        self.trunk = Sequential(
            Conv2d(rng, 10, channels, ksize=1), ReLU(),
            Conv2d(rng, channels, 2, ksize=1),
        )

    @property
    def params(self):
        return self.trunk.params

    @property
    def grads(self):
        return self.trunk.grads

    def zero_grads(self):
        self.trunk.zero_grads()

    def forward(self, stack: np.ndarray) -> np.ndarray:
        feats = np.concatenate([stack, self.box.forward(stack)], axis=0)
        return self.trunk.forward(feats)

    def backward(self, dout: np.ndarray) -> None:
        # input gradients are never consumed upstream, so the box path needs
        # no adjoint pass; trunk.backward fills all parameter grads
        self.trunk.backward(dout)


def build_qnet(cfg: QFuncConfig, rng):
    if cfg.kind == "conv":
        return QNetConv(rng, cfg.channels)
    if cfg.kind == "linear":
        return QNetLinear(rng, cfg.channels)
    raise ConfigError(f"unknown qfunc kind: {cfg.kind!r}")


@dataclass
class QMaps:
    push: np.ndarray  # (k, H, W)
    grasp: np.ndarray  # (k, H, W)
    valid: np.ndarray  # (H, W) bool


def valid_mask(shape, margin: int) -> np.ndarray:
    v = np.zeros(shape, dtype=bool)
    if margin * 2 < min(shape):
        v[margin : shape[0] - margin, margin : shape[1] - margin] = True
    return v


def infer_qmaps(qnet, st: StateTensor, valid_margin: int = 3) -> QMaps:
    k = st.k
    h, w = st.stacks.shape[2:]
    push = np.empty((k, h, w), dtype=np.float64)
    grasp = np.empty((k, h, w), dtype=np.float64)
    for i in range(k):
        out = qnet.forward(st.stacks[i])
        push[i] = rotate_k(out[0], i, k)
        grasp[i] = rotate_k(out[1], i, k)
    return QMaps(push=push, grasp=grasp, valid=valid_mask((h, w), valid_margin))


def argmax_action(qmaps: QMaps, motion: str):
    """Greedy ((row, col), rotation_index, value); ties resolve to the lowest
    (rotation, row, col) triple."""
    if motion == "push":
        arr = qmaps.push
    elif motion == "grasp":
        arr = qmaps.grasp
    else:
        raise ConfigError(f"unknown motion type: {motion!r}")
    masked = np.where(qmaps.valid[None, :, :], arr, -np.inf)
    flat = int(np.argmax(masked))
    rot, rc = divmod(flat, arr.shape[1] * arr.shape[2])
    r, c = divmod(rc, arr.shape[2])
    return (r, c), rot, float(arr[rot, r, c])


def best_value(qmaps: QMaps) -> float:
    """Max valid value across both heads; the TD bootstrap term."""
    masked_p = np.where(qmaps.valid[None], qmaps.push, -np.inf)
    masked_g = np.where(qmaps.valid[None], qmaps.grasp, -np.inf)
    return float(max(masked_p.max(), masked_g.max()))


def huber_loss(pred: float, target: float, delta: float = 1.0):
    e = pred - target
    if abs(e) <= delta:
        return 0.5 * e * e, e
    return delta * (abs(e) - 0.5 * delta), delta * (1.0 if e > 0 else -1.0)


# ---------------------------------------------------------------------------
# replay

HEADS = ("push", "grasp")


@dataclass
class Transition:
    state_id: int
    head: str  # push | grasp
    rotation: int
    pixel: tuple  # (row, col)
    reward: float
    next_state_id: int | None  # None when terminal
    terminal: bool


class ReplayBuffer:
    """Bounded transition store holding compact float32 base channels."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = capacity
        self.items: deque = deque()
        self._states = {}
        self._refs = {}
        self._next_sid = 0

    def __len__(self):
        return len(self.items)

    def add_state(self, smap, rgb, depth) -> int:
        sid = self._next_sid
        self._next_sid += 1
        self._states[sid] = (np.asarray(smap, dtype=np.float32),
                             np.asarray(rgb, dtype=np.float32),
                             np.asarray(depth, dtype=np.float32))
        self._refs[sid] = 0
        return sid

    def state(self, sid: int):
        s, rgb, d = self._states[sid]
        return s.astype(np.float64), rgb.astype(np.float64), d.astype(np.float64)

    def _incref(self, sid):
        if sid is not None:
            self._refs[sid] += 1

    def _decref(self, sid):
        if sid is None:
            return
        self._refs[sid] -= 1
        if self._refs[sid] <= 0:
            del self._refs[sid]
            del self._states[sid]

    def add(self, tr: Transition) -> None:
        if tr.head not in HEADS:
            raise ConfigError(f"unknown head: {tr.head!r}")
        self._incref(tr.state_id)
        self._incref(tr.next_state_id)
        self.items.append(tr)
        while len(self.items) > self.capacity:
            old = self.items.popleft()
            self._decref(old.state_id)
            self._decref(old.next_state_id)


def sample_replay(buffer: ReplayBuffer, batch_size: int, rng) -> list:
    """Reward-biased sample without replacement: weight 1 + reward."""
    n = len(buffer.items)
    if n == 0:
        raise DataError("replay buffer is empty")
    take = min(batch_size, n)
    weights = np.array([1.0 + tr.reward for tr in buffer.items], dtype=np.float64)
    probs = weights / weights.sum()
    idx = rng.choice(n, size=take, replace=False, p=probs)
    items = list(buffer.items)
    return [items[int(i)] for i in idx]


def td_update(qnet, optimizer: Adam, batch: list, buffer: ReplayBuffer,
              cfg: QFuncConfig, k: int = 16) -> float:
    """One semi-gradient step on the mean Huber TD error of a batch.

    The bootstrap target is reward plus gamma times the best valid value of
    either head in the next state (zero when terminal); the prediction is the
    executed (head, rotation, pixel) entry only.
    """
    if not batch:
        raise DataError("empty td batch")
    qnet.zero_grads()
    total = 0.0
    for tr in batch:
        target = tr.reward
        if not tr.terminal and tr.next_state_id is not None:
            sn, rgbn, dn = buffer.state(tr.next_state_id)
            nxt = infer_qmaps(qnet, assemble_state(sn, rgbn, dn, k), cfg.valid_margin)
            target += cfg.gamma * best_value(nxt)
        s, rgb, d = buffer.state(tr.state_id)
        stack = single_stack(s, rgb, d, tr.rotation, k)
        out = qnet.forward(stack)
        si, sj, inside = source_maps(s.shape, tr.rotation, k)
        r, c = tr.pixel
        head_idx = HEADS.index(tr.head)
        if inside[r, c]:
            pred = float(out[head_idx, si[r, c], sj[r, c]])
        else:
            pred = 0.0
        loss, dpred = huber_loss(pred, target)
        total += loss
        if inside[r, c]:
            dout = np.zeros_like(out)
            dout[head_idx, si[r, c], sj[r, c]] = dpred / len(batch)
            qnet.backward(dout)
    optimizer.step(qnet.grads)
    return total / len(batch)
