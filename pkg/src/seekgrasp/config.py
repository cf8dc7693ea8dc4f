"""Configuration dataclasses, JSON round-trip, digests, and seeded RNG helpers."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Bad configuration input; maps to CLI exit code 2."""


class DataError(ValueError):
    """Bad or insufficient data; maps to CLI exit code 3."""


def stable_seed(*parts) -> int:
    """Collapse arbitrary key parts into a stable 64-bit seed."""
    text = "/".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def make_rng(*parts) -> np.random.Generator:
    """Deterministic PCG64 generator keyed by the given parts."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(stable_seed(*parts))))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass
class WorldConfig:
    grid_w: int = 64
    grid_h: int = 64
    cell_size: float = 0.007
    k_rotations: int = 16
    push_len: float = 10.0
    push_width: float = 6.0
    blade_height: float = 1.0
    push_substep: float = 0.5
    grasp_open: float = 10.0
    finger_len: float = 2.0
    finger_width: float = 6.0
    grasp_clearance: float = 1.0
    min_support: float = 0.25
    nudge_radius: int = 3


@dataclass
class RewardConfig:
    area_increase_px: int = 4
    o_b_drop: float = 0.1
    moved_overlap_frac: float = 0.9
    exposure_min: int = 16
    ring_r: int = 3
    crop_r: int = 9


@dataclass
class TsnConfig:
    lr: float = 5e-4
    margin: float = 0.5
    bce_weight: float = 1.0
    triplet_weight: float = 1.0
    hidden: int = 32
    embed_dim: int = 16
    episodes: int = 4000
    n_positives: int = 2
    n_negatives: int = 4
    feature_mode: str = "full"  # full | depth_ablated | color_only | no_crop
    seed: int = 7


@dataclass
class QFuncConfig:
    kind: str = "conv"  # conv | linear
    channels: int = 8
    gamma: float = 0.5
    lr: float = 1e-3
    capacity: int = 2000
    batch_size: int = 4
    valid_margin: int = 3


@dataclass
class PolicyConfig:
    tau: float = 0.80
    s_vis: float = 0.5
    a_vis: int = 16
    subtask_mode: str = "learned"  # learned | heuristic
    cp_shift: int = 2
    cp_hmin: float = 1.0
    cp_floor: float = 0.1
    fp_sigma: float = 4.0
    fp_beta: float = 0.8
    fp_floor: float = 0.01
    fp_decay: float = 1.1
    scalar_hidden: int = 16
    crop_channels: int = 4
    fusion_hidden: int = 16
    subtask_hidden: int = 8


@dataclass
class CurriculumConfig:
    s1_iters: int = 500
    s1_switch: int = 250  # iteration at which obstacle count goes 3 -> 8
    s2_iters: int = 500
    s3_iters: int = 1000
    s4_iters: int = 1000
    eps_start: float = 0.5
    eps_end: float = 0.1
    refit_every: int = 200
    probe_episodes: int = 60
    rolling_window: int = 200
    seed: int = 0


@dataclass
class EvalConfig:
    episodes_per_case: int = 50
    noise_kind: str = "none"  # none | merge | split | erode
    noise_param: float = 0.0
    ref_jitter: float = 0.02


@dataclass
class SimConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    tsn: TsnConfig = field(default_factory=TsnConfig)
    qfunc: QFuncConfig = field(default_factory=QFuncConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=indent)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        kwargs = {}
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in sections:
                raise ConfigError(f"unknown config section: {key!r}")
            sub_cls = _SECTION_TYPES[key]
            known = {f.name for f in dataclasses.fields(sub_cls)}
            bad = set(value) - known
            if bad:
                raise ConfigError(f"unknown keys in section {key!r}: {sorted(bad)}")
            kwargs[key] = sub_cls(**value)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "SimConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def validate(self) -> None:
        w = self.world
        if w.grid_w < 8 or w.grid_h < 8:
            raise ConfigError("workspace grid must be at least 8x8")
        if w.k_rotations < 4 or w.k_rotations % 4 != 0:
            raise ConfigError("k_rotations must be a positive multiple of 4")
        if w.min_support <= 0 or w.min_support > 1:
            raise ConfigError("min_support must lie in (0, 1]")
        if self.tsn.feature_mode not in ("full", "depth_ablated", "color_only", "no_crop"):
            raise ConfigError(f"unknown feature_mode: {self.tsn.feature_mode!r}")
        if self.qfunc.kind not in ("conv", "linear"):
            raise ConfigError(f"unknown qfunc kind: {self.qfunc.kind!r}")
        if not 0 < self.policy.tau < 1:
            raise ConfigError("tau must lie in (0, 1)")
        if self.policy.subtask_mode not in ("learned", "heuristic"):
            raise ConfigError(f"unknown subtask_mode: {self.policy.subtask_mode!r}")
        if self.eval.noise_kind not in ("none", "merge", "split", "erode"):
            raise ConfigError(f"unknown noise_kind: {self.eval.noise_kind!r}")
        for name in ("area_increase_px", "o_b_drop", "moved_overlap_frac", "exposure_min"):
            if getattr(self.reward, name) <= 0:
                raise ConfigError(f"reward.{name} must be positive")
        if self.qfunc.capacity < 1:
            raise ConfigError("replay capacity must be >= 1")


_SECTION_TYPES = {
    "world": WorldConfig,
    "reward": RewardConfig,
    "tsn": TsnConfig,
    "qfunc": QFuncConfig,
    "policy": PolicyConfig,
    "curriculum": CurriculumConfig,
    "eval": EvalConfig,
}


def default_config() -> SimConfig:
    return SimConfig()
