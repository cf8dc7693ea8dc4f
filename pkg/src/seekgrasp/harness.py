"""Episode runner, four-stage training curriculum, evaluation suites with
selectable baselines, and versioned binary checkpoints.

Baseline decision rules (the checkpoint supplies the parameters; pairing the
rule with a particular stage checkpoint reproduces the published variants):
  iosg              learned subtask split; explorer pushes at the push-Q
                    argmax; coordinator uses the full confidence head.
  gti_bayes         heuristic subtask split; exploration pushes at the argmax
                    of the target-agnostic push Q (similarity channel zeroed)
                    times clutter prior times failure map; coordination uses
                    the scalars-only confidence head.
  coordinator_only  iosg rules; meant to run with the post-s3 checkpoint,
                    whose Q function never saw exploration training.
  bayes             iosg rules, but exploration pushes at the argmax of the
                    similarity-conditioned push Q times the Bayesian maps.
  hard_thresh       iosg rules over a similarity map with sub-0.5 scores
                    zeroed; scalars-only confidence head.
  normalized_thresh iosg rules over a best-segment-0.99 / rest-0.01 map;
                    scalars-only confidence head.
  prob_map          iosg rules over the raw similarity map; scalars-only
                    confidence head.
"""

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cases import case_info, generate_scenario, random_scene, suite_cases
from .config import (ConfigError, DataError, SimConfig, canonical_json,
                     make_rng, stable_seed)
from .nets import Adam
from .percept import (build_similarity_map, perturb_segmentation,
                      render_projections, render_reference, segment_instances)
from .policy import (COORDINATION, EXPLORATION, CoordinatorParams,
                     HighLevelParams, build_coordinator, build_highlevel,
                     classify_subtask, coordinator_confidence,
                     decay_failure_map, fit_threshold_roc, gti_explore_map,
                     make_bayes_maps, select_action_coordinator,
                     select_action_explorer, train_coordinator,
                     train_subtask_classifier, update_failure_map)
from .qfunc import (ReplayBuffer, Transition, argmax_action, assemble_state,
                    build_qnet, infer_qmaps, sample_replay, td_update)
from .rewardlab import (GraspHistory, extract_domain_features, reward_explore,
                        reward_grasp, reward_push)
from .tsn import TsnParams, build_descriptor_dataset, build_tsn, make_scorer, train_tsn
from .world import apply_grasp, apply_push, topmost_map, visible_count

SUITES = ("exploration", "coordination", "confusing", "full")
BASELINES = ("iosg", "gti_bayes", "coordinator_only", "bayes",
             "hard_thresh", "normalized_thresh", "prob_map")
_SCALARS_ONLY = ("gti_bayes", "hard_thresh", "normalized_thresh", "prob_map")
STAGES = ("s1", "s2", "s3", "s4")

_MAGIC = b"SGC1"
_FORMAT_VERSION = 1


def motion_budget(suite: str, n_cluster: int | None = None) -> int:
    """Per-episode motion cap; exploration scales with scene cluster count."""
    if suite == "exploration":
        return 2 * (n_cluster if n_cluster else 3) - 1
    if suite in ("coordination", "confusing"):
        return 5
    if suite == "full":
        return 15
    raise ConfigError(f"unknown suite: {suite!r}")


def ablation_transform(smap: np.ndarray, mode: str) -> np.ndarray:
    """Similarity-map surgeries used by the threshold ablation baselines."""
    if mode == "identity":
        return smap
    if mode == "hard_thresh":
        return np.where(smap >= 0.5, smap, 0.0)
    if mode == "normalized_thresh":
        out = np.zeros_like(smap)
        pos = smap > 0.0
        if pos.any():
            out[pos] = 0.01
            out[smap == smap.max()] = 0.99
        return out
    raise ConfigError(f"unknown ablation mode: {mode!r}")


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    config_digest: str
    seed: int
    iteration: int
    stage: str
    feature_mode: str
    qnet: object
    qnet_kind: str
    qnet_channels: int
    tsn: TsnParams
    coordinator: CoordinatorParams
    coordinator_scalar: CoordinatorParams
    highlevel: HighLevelParams
    version: int = _FORMAT_VERSION


def _net_arrays(prefix, net):
    return {f"{prefix}_{i}": p for i, p in enumerate(net.params)}


def _load_net_arrays(prefix, net, data):
    for i, p in enumerate(net.params):
        key = f"{prefix}_{i}"
        if key not in data:
            raise DataError(f"checkpoint missing array {key}")
        arr = data[key]
        if arr.shape != p.shape:
            raise DataError(f"checkpoint array {key} has shape {arr.shape}, "
                            f"expected {p.shape}")
        p[...] = arr


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "version": ckpt.version,
        "config_digest": ckpt.config_digest,
        "seed": ckpt.seed,
        "iteration": ckpt.iteration,
        "stage": ckpt.stage,
        "feature_mode": ckpt.feature_mode,
        "qnet_kind": ckpt.qnet_kind,
        "qnet_channels": ckpt.qnet_channels,
        "tsn_hidden": len(ckpt.tsn.encoder.layers[0].b),
        "tsn_embed": ckpt.tsn.embed_dim,
        "scalar_hidden": len(ckpt.coordinator.scalar.layers[0].b),
        "crop_channels": len(ckpt.coordinator.crop.layers[0].b),
        "fusion_hidden": len(ckpt.coordinator.fusion.layers[0].b),
        "subtask_hidden": len(ckpt.highlevel.net.layers[0].b),
        "tau": ckpt.coordinator.tau,
        "tau_scalar": ckpt.coordinator_scalar.tau,
        "hl_mode": ckpt.highlevel.mode,
        "s_vis": ckpt.highlevel.s_vis,
        "a_vis": ckpt.highlevel.a_vis,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    arrays.update(_net_arrays("q", ckpt.qnet))
    arrays.update(_net_arrays("te", ckpt.tsn.encoder))
    arrays.update(_net_arrays("tr", ckpt.tsn.relation))
    arrays.update(_net_arrays("cs", ckpt.coordinator.scalar))
    arrays.update(_net_arrays("cc", ckpt.coordinator.crop))
    arrays.update(_net_arrays("cf", ckpt.coordinator.fusion))
    arrays.update(_net_arrays("ss", ckpt.coordinator_scalar.scalar))
    arrays.update(_net_arrays("sf", ckpt.coordinator_scalar.fusion))
    arrays.update(_net_arrays("hl", ckpt.highlevel.net))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    return _MAGIC + struct.pack("<I", _FORMAT_VERSION) + digest + payload


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(_MAGIC) + 4 + 32 or blob[:len(_MAGIC)] != _MAGIC:
        raise DataError("not a checkpoint file")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != _FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    digest, payload = blob[8:40], blob[40:]
    if hashlib.sha256(payload).digest() != digest:
        raise DataError("checkpoint digest mismatch; file is corrupt")
    data = np.load(io.BytesIO(payload))
    meta = json.loads(bytes(data["meta"]).decode())

    from .config import PolicyConfig, QFuncConfig, TsnConfig
    rng = make_rng("checkpoint-rebuild")
    qcfg = QFuncConfig(kind=meta["qnet_kind"], channels=meta["qnet_channels"])
    qnet = build_qnet(qcfg, rng)
    tcfg = TsnConfig(hidden=meta["tsn_hidden"], embed_dim=meta["tsn_embed"])
    tsn = build_tsn(tcfg, rng)
    pcfg = PolicyConfig(scalar_hidden=meta["scalar_hidden"],
                        crop_channels=meta["crop_channels"],
                        fusion_hidden=meta["fusion_hidden"],
                        subtask_hidden=meta["subtask_hidden"])
    coord = build_coordinator(pcfg, rng, use_crop=True)
    coord_s = build_coordinator(pcfg, rng, use_crop=False)
    hl = build_highlevel(pcfg, rng)

    _load_net_arrays("q", qnet, data)
    _load_net_arrays("te", tsn.encoder, data)
    _load_net_arrays("tr", tsn.relation, data)
    _load_net_arrays("cs", coord.scalar, data)
    _load_net_arrays("cc", coord.crop, data)
    _load_net_arrays("cf", coord.fusion, data)
    _load_net_arrays("ss", coord_s.scalar, data)
    _load_net_arrays("sf", coord_s.fusion, data)
    _load_net_arrays("hl", hl.net, data)
    coord.tau = float(meta["tau"])
    coord_s.tau = float(meta["tau_scalar"])
    hl.mode = meta["hl_mode"]
    hl.s_vis = float(meta["s_vis"])
    hl.a_vis = int(meta["a_vis"])
    return Checkpoint(config_digest=meta["config_digest"], seed=meta["seed"],
                      iteration=meta["iteration"], stage=meta["stage"],
                      feature_mode=meta["feature_mode"], qnet=qnet,
                      qnet_kind=meta["qnet_kind"],
                      qnet_channels=meta["qnet_channels"], tsn=tsn,
                      coordinator=coord, coordinator_scalar=coord_s,
                      highlevel=hl, version=meta["version"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return checkpoint_from_bytes(Path(path).read_bytes())


def _snapshot(ckpt: Checkpoint) -> Checkpoint:
    """Deep copy through the serializer so later training never aliases."""
    return checkpoint_from_bytes(checkpoint_bytes(ckpt))


# ---------------------------------------------------------------------------
# episode records

@dataclass
class EpisodeRecord:
    case: str
    seed: int
    baseline: str
    suite: str
    steps: list
    success: bool
    motions: int
    reason: str  # exposed | grasped | budget | target_lost | no_action

    def to_dict(self):
        return {"case": self.case, "seed": self.seed, "baseline": self.baseline,
                "suite": self.suite, "steps": self.steps, "success": self.success,
                "motions": self.motions, "reason": self.reason}

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def _target_segment_mask(segs, smap):
    """Visible mask of the best-matching segment, or None when nothing scored."""
    if smap.max(initial=0.0) <= 0.0:
        return None
    pix = np.unravel_index(int(np.argmax(smap)), smap.shape)
    for mask in segs.masks:
        if mask[pix]:
            return mask
    return None


class _Perceiver:
    """Per-episode perception pipeline: projections, segments, similarity,
    and Q maps, with optional segmentation noise and ablation transforms."""

    def __init__(self, ckpt, cfg, reference, noise=None, noise_salt=0,
                 transform="identity"):
        self.qnet = ckpt.qnet
        self.scorer = make_scorer(ckpt.tsn)
        self.mode = ckpt.feature_mode
        self.k = cfg.world.k_rotations
        self.margin = cfg.qfunc.valid_margin
        self.reference = reference
        self.noise = noise if noise and noise[0] != "none" else None
        self.noise_salt = noise_salt
        self.transform = transform
        self.step = 0

    def perceive(self, state):
        proj = render_projections(state)
        segs = segment_instances(proj, state)
        if self.noise is not None:
            segs = perturb_segmentation(
                segs, self.noise,
                seed=stable_seed("segnoise-ep", state.rng_seed, self.noise_salt, self.step))
        self.step += 1
        smap = build_similarity_map(segs, self.reference, self.scorer, proj, self.mode)
        smap = ablation_transform(smap, self.transform)
        return proj, segs, smap

    def qmaps_for(self, smap, proj):
        st = assemble_state(smap, proj.rgb, proj.depth, self.k)
        return infer_qmaps(self.qnet, st, self.margin)


def _suppress_dead_ends(qmaps, dead_ends):
    """Mask actions this episode already proved to be no-ops. The world and
    the nets are deterministic, so an unchanged scene reproduces the same
    greedy pick; without the mask one null action would eat the budget."""
    for motion, pixel, rot in dead_ends:
        arr = qmaps.push if motion == "push" else qmaps.grasp
        arr[rot, pixel[0], pixel[1]] = -np.inf


def run_episode(ckpt: Checkpoint, scene, suite: str, cfg: SimConfig | None = None,
                baseline: str = "iosg", salt: int = 0) -> EpisodeRecord:
    """Play one episode of the hierarchical policy; fully seeded."""
    if baseline not in BASELINES:
        raise ConfigError(f"unknown baseline: {baseline!r}")
    if suite not in SUITES:
        raise ConfigError(f"unknown suite: {suite!r}")
    if ckpt.version != _FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {ckpt.version}")
    cfg = cfg or SimConfig()
    wcfg, rcfg, pcfg, ecfg = cfg.world, cfg.reward, cfg.policy, cfg.eval

    state = scene.clone()
    tid = state.target_id
    info = case_info(state.case_name)
    budget = motion_budget(suite, info.get("n_cluster"))

    reference = render_reference(state, tid, jitter=ecfg.ref_jitter,
                                 mode=ckpt.feature_mode, salt=salt)
    transform = baseline if baseline in ("hard_thresh", "normalized_thresh") else "identity"
    noise = (ecfg.noise_kind, ecfg.noise_param)
    percept = _Perceiver(ckpt, cfg, reference, noise=noise, noise_salt=salt,
                         transform=transform)

    coord = ckpt.coordinator_scalar if baseline in _SCALARS_ONLY else ckpt.coordinator
    if baseline == "gti_bayes":
        hl = HighLevelParams(net=None, mode="heuristic", s_vis=pcfg.s_vis, a_vis=pcfg.a_vis)
    else:
        hl = ckpt.highlevel
    bayes = make_bayes_maps((wcfg.grid_h, wcfg.grid_w), pcfg) \
        if baseline in ("gti_bayes", "bayes") else None

    history = GraspHistory()
    dead_ends = set()
    steps = []
    success, reason = False, "budget"
    while True:
        if suite == "exploration" and visible_count(state, tid) >= rcfg.exposure_min:
            success, reason = True, "exposed"
            break
        if len(steps) >= budget:
            break
        proj, segs, smap = percept.perceive(state)
        subtask = classify_subtask(hl, smap)

        if subtask == EXPLORATION:
            s_for_q = np.zeros_like(smap) if baseline == "gti_bayes" else smap
            qmaps = percept.qmaps_for(s_for_q, proj)
            _suppress_dead_ends(qmaps, dead_ends)
            if bayes is not None:
                decision = gti_explore_map(qmaps, proj.depth, bayes, pcfg)
            else:
                decision = select_action_explorer(qmaps)
        else:
            qmaps = percept.qmaps_for(smap, proj)
            _suppress_dead_ends(qmaps, dead_ends)
            pred_mask = _target_segment_mask(segs, smap)
            if pred_mask is None:
                decision = select_action_explorer(qmaps)
                subtask = EXPLORATION
            else:
                feats = extract_domain_features(qmaps, proj.depth, pred_mask,
                                                history, rcfg)
                decision = select_action_coordinator(coord, qmaps, feats)

        if decision.motion == "push":
            nstate, outcome = apply_push(state, decision.command, wcfg)
            if subtask == EXPLORATION:
                rew = reward_explore(state, nstate, outcome, rcfg)
            else:
                rew = reward_push(state, nstate, outcome, rcfg)
        else:
            pre_visible = topmost_map(state) == tid
            nstate, outcome = apply_grasp(state, decision.command, wcfg)
            rew = reward_grasp(outcome, tid, pre_visible, decision.pixel)

        if bayes is not None:
            bayes.f_p = decay_failure_map(bayes.f_p, pcfg.fp_decay)
            if decision.motion == "push" and rew == 0.0:
                bayes.f_p = update_failure_map(bayes.f_p, decision.pixel,
                                               pcfg.fp_sigma, pcfg.fp_beta,
                                               pcfg.fp_floor)

        history.record(outcome)
        steps.append({"subtask": subtask, "motion": decision.motion,
                      "pixel": [int(decision.pixel[0]), int(decision.pixel[1])],
                      "rotation": int(decision.rotation_index),
                      "reward": float(rew),
                      "p_c": None if decision.p_c is None else float(decision.p_c),
                      "q_g": float(decision.q_g), "q_p": float(decision.q_p)})
        state = nstate
        if decision.motion == "grasp" and outcome.grasp_success \
                and outcome.grasped_id == tid and suite != "exploration":
            success, reason = True, "grasped"
            break
        if state.get(tid).removed:
            reason = "target_lost"
            break

    return EpisodeRecord(case=scene.case_name, seed=scene.rng_seed,
                         baseline=baseline, suite=suite, steps=steps,
                         success=success, motions=len(steps), reason=reason)


# ---------------------------------------------------------------------------
# evaluation suites

def wilson_interval(successes: int, n: int, z: float = 1.96):
    if n == 0:
        return 0.0, 1.0
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return max(0.0, center - half), min(1.0, center + half)


@dataclass
class SuiteReport:
    suite: str
    baseline: str
    per_case: dict
    aggregate: dict
    records: list = field(default_factory=list)

    def to_dict(self):
        return {"suite": self.suite, "baseline": self.baseline,
                "per_case": self.per_case, "aggregate": self.aggregate}


def _case_stats(records, budget):
    n = len(records)
    wins = sum(r.success for r in records)
    lo, hi = wilson_interval(wins, n)
    motions_all = [r.motions if r.success else budget for r in records]
    motions_win = [r.motions for r in records if r.success]
    return {"episodes": n, "successes": wins,
            "success_rate": wins / n if n else 0.0,
            "ci_low": lo, "ci_high": hi,
            "avg_motions_all": float(np.mean(motions_all)) if motions_all else 0.0,
            "avg_motions_success": float(np.mean(motions_win)) if motions_win else None}


def evaluate_suite(ckpt: Checkpoint, suite: str, episodes_per_case: int = 50,
                   seeds=None, baseline: str = "iosg",
                   cfg: SimConfig | None = None) -> SuiteReport:
    """Replay every case of a suite under one decision rule; deterministic
    given the seed list (defaults to 0..episodes_per_case-1)."""
    if suite not in SUITES:
        raise ConfigError(f"unknown suite: {suite!r}")
    if baseline not in BASELINES:
        raise ConfigError(f"unknown baseline: {baseline!r}")
    cfg = cfg or SimConfig()
    if seeds is None:
        seeds = list(range(episodes_per_case))
    if len(seeds) < episodes_per_case:
        raise DataError("fewer seeds than episodes requested")

    per_case = {}
    records = []
    for case in suite_cases(suite):
        case_records = []
        for i in range(episodes_per_case):
            scene = generate_scenario(case, seed=int(seeds[i]), cfg=cfg.world)
            rec = run_episode(ckpt, scene, suite, cfg, baseline=baseline,
                              salt=int(seeds[i]))
            case_records.append(rec)
        budget = motion_budget(suite, case_info(case).get("n_cluster"))
        per_case[case] = _case_stats(case_records, budget)
        records.extend(case_records)

    agg_budget = {c: motion_budget(suite, case_info(c).get("n_cluster"))
                  for c in per_case}
    wins = sum(r.success for r in records)
    n = len(records)
    lo, hi = wilson_interval(wins, n)
    motions_all = [r.motions if r.success else agg_budget[r.case] for r in records]
    motions_win = [r.motions for r in records if r.success]
    aggregate = {"episodes": n, "successes": wins,
                 "success_rate": wins / n if n else 0.0,
                 "ci_low": lo, "ci_high": hi,
                 "avg_motions_all": float(np.mean(motions_all)) if motions_all else 0.0,
                 "avg_motions_success": float(np.mean(motions_win)) if motions_win else None}
    return SuiteReport(suite=suite, baseline=baseline, per_case=per_case,
                       aggregate=aggregate, records=records)


# ---------------------------------------------------------------------------
# curriculum

def _greedy_decision(qmaps):
    """Best action across both heads; the pre-coordinator exploitation rule."""
    gp = argmax_action(qmaps, "push")
    gg = argmax_action(qmaps, "grasp")
    if gg[2] >= gp[2]:
        return _mk_decision("grasp", gg)
    return _mk_decision("push", gp)


def _mk_decision(motion, triple):
    from .policy import PolicyDecision
    from .world import GraspCommand, PushCommand
    pixel, rot, val = triple
    cls = PushCommand if motion == "push" else GraspCommand
    return PolicyDecision(subtask=COORDINATION, motion=motion, pixel=pixel,
                          rotation_index=rot,
                          command=cls(pixel=pixel, rotation_index=rot, k=16),
                          p_c=None, q_g=val if motion == "grasp" else 0.0,
                          q_p=val if motion == "push" else 0.0)


def _random_decision(rng, qmaps, motion=None):
    rows, cols = np.nonzero(qmaps.valid)
    i = int(rng.integers(0, len(rows)))
    pixel = (int(rows[i]), int(cols[i]))
    rot = int(rng.integers(0, qmaps.push.shape[0]))
    if motion is None:
        motion = "push" if rng.random() < 0.5 else "grasp"
    return _mk_decision(motion, (pixel, rot, 0.0))


def _masked_grasp_argmax(qmaps, mask):
    """Grasp argmax restricted to a pixel mask; same tie order as the global
    rule (rotation, then row, then column). None when the mask is empty."""
    allowed = qmaps.valid & mask
    if not allowed.any():
        return None
    q = np.where(allowed[None], qmaps.grasp, -np.inf)
    flat = int(np.argmax(q))
    rot, rest = divmod(flat, q.shape[1] * q.shape[2])
    row, col = divmod(rest, q.shape[2])
    return (int(row), int(col)), int(rot), float(q[rot, row, col])


class _TrainLoop:
    """Shared state for the four curriculum stages."""

    def __init__(self, cfg: SimConfig, tsn_params: TsnParams):
        self.cfg = cfg
        self.seed = cfg.curriculum.seed
        self.tsn = tsn_params
        self.scorer = make_scorer(tsn_params)
        self.mode = cfg.tsn.feature_mode
        self.k = cfg.world.k_rotations
        rng = make_rng("qnet-init", self.seed)
        self.qnet = build_qnet(cfg.qfunc, rng)
        self.optimizer = Adam(self.qnet.params, lr=cfg.qfunc.lr)
        self.replay = ReplayBuffer(cfg.qfunc.capacity)
        self.coordinator = None
        self.coordinator_scalar = None
        self.highlevel = HighLevelParams(net=None, mode="heuristic",
                                         s_vis=cfg.policy.s_vis,
                                         a_vis=cfg.policy.a_vis)
        self.fa_samples = []
        self.subtask_samples = []
        self.curves = {"eps": [], "td_loss": [], "grasp_attempts": [],
                       "explore_rewards": [], "probe": {}, "roc": {},
                       "stage_bounds": {}}
        self.iteration = 0
        # live episode state
        self.state = None
        self.reference = None
        self.history = GraspHistory()
        self.motions_in_episode = 0
        self.episode_counter = 0

    # -- episode plumbing

    def reset_scene(self, stage, m, n):
        seed = stable_seed("curriculum-scene", self.seed, stage, self.episode_counter)
        self.episode_counter += 1
        self._begin_episode(random_scene(m, n, seed, self.cfg.world))

    def reset_case_scene(self, stage, case):
        seed = stable_seed("curriculum-scene", self.seed, stage, self.episode_counter)
        self.episode_counter += 1
        self._begin_episode(generate_scenario(case, seed, self.cfg.world))

    def _begin_episode(self, state):
        self.state = state
        self.reference = render_reference(state, state.target_id,
                                          jitter=self.cfg.eval.ref_jitter,
                                          mode=self.mode, salt=0)
        self.history = GraspHistory()
        self.motions_in_episode = 0

    def perceive(self):
        proj = render_projections(self.state)
        segs = segment_instances(proj, self.state)
        smap = build_similarity_map(segs, self.reference, self.scorer, proj, self.mode)
        return proj, segs, smap

    def qmaps_for(self, smap, proj):
        st = assemble_state(smap, proj.rgb, proj.depth, self.k)
        return infer_qmaps(self.qnet, st, self.cfg.qfunc.valid_margin)

    def act(self, decision, subtask):
        """Step the world, compute the stage reward, log the transition."""
        state, cfg = self.state, self.cfg
        tid = state.target_id
        if decision.motion == "push":
            nstate, outcome = apply_push(state, decision.command, cfg.world)
            if subtask == EXPLORATION:
                rew = reward_explore(state, nstate, outcome, cfg.reward)
            else:
                rew = reward_push(state, nstate, outcome, cfg.reward)
        else:
            pre_visible = topmost_map(state) == tid
            nstate, outcome = apply_grasp(state, decision.command, cfg.world)
            rew = reward_grasp(outcome, tid, pre_visible, decision.pixel)
        self.history.record(outcome)
        self.state = nstate
        self.motions_in_episode += 1
        return outcome, rew

    def remember(self, smap, proj, decision, rew, terminal):
        sid = self.replay.add_state(smap, proj.rgb, proj.depth)
        nid = None
        if not terminal:
            nproj = render_projections(self.state)
            nsegs = segment_instances(nproj, self.state)
            nsmap = build_similarity_map(nsegs, self.reference, self.scorer,
                                         nproj, self.mode)
            nid = self.replay.add_state(nsmap, nproj.rgb, nproj.depth)
        self.replay.add(Transition(state_id=sid, head=decision.motion,
                                   rotation=decision.rotation_index,
                                   pixel=decision.pixel, reward=rew,
                                   next_state_id=nid, terminal=terminal))

    def learn(self):
        if len(self.replay) == 0:
            return
        rng = make_rng("replay-sample", self.seed, self.iteration)
        batch = sample_replay(self.replay, self.cfg.qfunc.batch_size, rng)
        loss = td_update(self.qnet, self.optimizer, batch, self.replay,
                         self.cfg.qfunc, self.k)
        self.curves["td_loss"].append(float(loss))

    def features_for(self, qmaps, proj, segs, smap):
        pred = _target_segment_mask(segs, smap)
        if pred is None:
            return None
        return extract_domain_features(qmaps, proj.depth, pred, self.history,
                                       self.cfg.reward)

    def fit_coordinator(self):
        labels = [y for _, y in self.fa_samples]
        if not any(labels) or all(labels):
            raise DataError("grasp attempts produced a single outcome class; "
                            "extend s2_iters to collect both")
        self.coordinator, _ = train_coordinator(self.fa_samples, self.cfg.policy,
                                                seed=self.seed, use_crop=True)
        self.coordinator_scalar, _ = train_coordinator(self.fa_samples,
                                                       self.cfg.policy,
                                                       seed=self.seed,
                                                       use_crop=False)
        roc = fit_threshold_roc(
            [(coordinator_confidence(self.coordinator, f), y)
             for f, y in self.fa_samples])
        roc_s = fit_threshold_roc(
            [(coordinator_confidence(self.coordinator_scalar, f), y)
             for f, y in self.fa_samples])
        self.coordinator.tau = roc.tau
        self.coordinator_scalar.tau = roc_s.tau
        self.curves["roc"] = {"auc": roc.auc, "tau": roc.tau,
                              "auc_scalar": roc_s.auc, "tau_scalar": roc_s.tau}

    def checkpoint(self, stage, config_digest) -> Checkpoint:
        pcfg = self.cfg.policy
        rng = make_rng("ckpt-fill", self.seed, stage)
        coord = self.coordinator or build_coordinator(pcfg, rng, use_crop=True)
        coord_s = self.coordinator_scalar or build_coordinator(pcfg, rng, use_crop=False)
        hl = self.highlevel
        if hl.net is None:
            hl = build_highlevel(pcfg, rng)
            hl.mode = "heuristic"
        ck = Checkpoint(config_digest=config_digest, seed=self.seed,
                        iteration=self.iteration, stage=stage,
                        feature_mode=self.mode, qnet=self.qnet,
                        qnet_kind=self.cfg.qfunc.kind,
                        qnet_channels=self.cfg.qfunc.channels, tsn=self.tsn,
                        coordinator=coord, coordinator_scalar=coord_s,
                        highlevel=hl)
        return _snapshot(ck)


def _probe_grasping(loop: _TrainLoop, use_coordinator: bool, episodes: int):
    """Fixed-seed grasp-success probe; identical scenes for every call."""
    cfg = loop.cfg
    wins = 0
    for e in range(episodes):
        seed = stable_seed("probe-scene", loop.seed, e)
        state = random_scene(5, 7, seed, cfg.world, hide_target=False)
        reference = render_reference(state, state.target_id,
                                     jitter=cfg.eval.ref_jitter,
                                     mode=loop.mode, salt=0)
        history = GraspHistory()
        for t in range(5):
            proj = render_projections(state)
            segs = segment_instances(proj, state)
            smap = build_similarity_map(segs, reference, loop.scorer, proj, loop.mode)
            qmaps = loop.qmaps_for(smap, proj)
            decision = None
            if use_coordinator and loop.coordinator is not None:
                pred = _target_segment_mask(segs, smap)
                if pred is not None:
                    feats = extract_domain_features(qmaps, proj.depth, pred,
                                                    history, cfg.reward)
                    decision = select_action_coordinator(loop.coordinator,
                                                         qmaps, feats)
            if decision is None:
                decision = _greedy_decision(qmaps)
            if decision.motion == "push":
                state, outcome = apply_push(state, decision.command, cfg.world)
            else:
                state, outcome = apply_grasp(state, decision.command, cfg.world)
            history.record(outcome)
            if outcome.kind == "grasp" and outcome.grasp_success \
                    and outcome.grasped_id == state.target_id:
                wins += 1
                break
            if state.get(state.target_id).removed:
                break
    return wins / episodes if episodes else 0.0


def run_curriculum(cfg: SimConfig | None = None, out_dir=None,
                   stages=STAGES, tsn_params: TsnParams | None = None):
    """Execute the staged training schedule; returns (checkpoints, curves).

    Stages must form a prefix of s1..s4: later stages depend on artifacts the
    earlier ones produce (s3 needs the confidence head fitted after s2; s4
    trains the explorer on the jointly trained Q function).
    """
    cfg = cfg or SimConfig()
    stages = tuple(stages)
    if stages != STAGES[:len(stages)] or not stages:
        raise ConfigError(f"stages must be a prefix of {STAGES}, got {stages}")
    ccfg = cfg.curriculum
    digest = cfg.digest()

    if tsn_params is None:
        ds = build_descriptor_dataset(24, 12, seed=cfg.tsn.seed,
                                      mode=cfg.tsn.feature_mode)
        tsn_params, _ = train_tsn(ds, cfg.tsn, seed=cfg.tsn.seed)

    loop = _TrainLoop(cfg, tsn_params)
    checkpoints = {}

    def save(stage):
        ck = loop.checkpoint(stage, digest)
        checkpoints[stage] = ck
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ck, out / f"{stage}.ckpt")
        loop.curves["stage_bounds"][stage] = loop.iteration

    # -- stage 1: epsilon-greedy on both heads over visible random clutter
    if "s1" in stages:
        for i in range(ccfg.s1_iters):
            frac = i / max(1, ccfg.s1_iters - 1)
            eps = ccfg.eps_start + (ccfg.eps_end - ccfg.eps_start) * frac
            loop.curves["eps"].append(eps)
            m = 3 if i < ccfg.s1_switch else 8
            if loop.state is None or i == ccfg.s1_switch \
                    or loop.motions_in_episode >= 8 \
                    or loop.state.get(loop.state.target_id).removed:
                loop.reset_scene("s1", m, 7)
            proj, segs, smap = loop.perceive()
            qmaps = loop.qmaps_for(smap, proj)
            rng = make_rng("eps-greedy", loop.seed, loop.iteration)
            if rng.random() < eps:
                decision = _random_decision(rng, qmaps)
            else:
                decision = _greedy_decision(qmaps)
            outcome, rew = loop.act(decision, COORDINATION)
            grasped_target = outcome.kind == "grasp" and outcome.grasp_success \
                and outcome.grasped_id == loop.state.target_id
            terminal = grasped_target or loop.state.get(loop.state.target_id).removed
            if outcome.kind == "grasp":
                loop.curves["grasp_attempts"].append(
                    ("s1", loop.iteration, bool(outcome.grasp_success)))
            loop.remember(smap, proj, decision, rew, terminal)
            loop.learn()
            if terminal:
                loop.state = None
            loop.iteration += 1
        loop.curves["probe"]["s1"] = _probe_grasping(loop, False, ccfg.probe_episodes)
        save("s1")

    # -- stage 2: grasp-only data collection for the confidence head
    if "s2" in stages:
        for i in range(ccfg.s2_iters):
            if loop.state is None or loop.motions_in_episode >= 8 \
                    or loop.state.get(loop.state.target_id).removed:
                loop.reset_scene("s2", 5, 7)
            proj, segs, smap = loop.perceive()
            qmaps = loop.qmaps_for(smap, proj)
            # grasp the predicted segment so the outcome labels the same
            # features the confidence head will see at decision time
            pred = _target_segment_mask(segs, smap)
            triple = _masked_grasp_argmax(qmaps, pred) if pred is not None else None
            if triple is None:
                triple = argmax_action(qmaps, "grasp")
            decision = _mk_decision("grasp", triple)
            feats = loop.features_for(qmaps, proj, segs, smap)
            outcome, rew = loop.act(decision, COORDINATION)
            if feats is not None:
                loop.fa_samples.append((feats, bool(outcome.grasp_success)))
            loop.curves["grasp_attempts"].append(
                ("s2", loop.iteration, bool(outcome.grasp_success)))
            grasped_target = outcome.grasp_success and outcome.grasped_id == loop.state.target_id
            terminal = grasped_target or loop.state.get(loop.state.target_id).removed
            loop.remember(smap, proj, decision, rew, terminal)
            loop.learn()
            if terminal:
                loop.state = None
            loop.iteration += 1
        loop.fit_coordinator()
        save("s2")

    # -- stage 3: coordinator-driven joint training with periodic refits
    if "s3" in stages:
        if loop.coordinator is None:
            raise DataError("stage s3 requires the confidence head fitted in s2")
        for i in range(ccfg.s3_iters):
            if loop.state is None or loop.motions_in_episode >= 8 \
                    or loop.state.get(loop.state.target_id).removed:
                loop.reset_scene("s3", 5, 7)
            proj, segs, smap = loop.perceive()
            qmaps = loop.qmaps_for(smap, proj)
            feats = loop.features_for(qmaps, proj, segs, smap)
            if feats is None:
                decision = _greedy_decision(qmaps)
            else:
                decision = select_action_coordinator(loop.coordinator, qmaps, feats)
            outcome, rew = loop.act(decision, COORDINATION)
            if outcome.kind == "grasp":
                if feats is not None:
                    loop.fa_samples.append((feats, bool(outcome.grasp_success)))
                loop.curves["grasp_attempts"].append(
                    ("s3", loop.iteration, bool(outcome.grasp_success)))
            grasped_target = outcome.kind == "grasp" and outcome.grasp_success \
                and outcome.grasped_id == loop.state.target_id
            terminal = grasped_target or loop.state.get(loop.state.target_id).removed
            loop.remember(smap, proj, decision, rew, terminal)
            loop.learn()
            if terminal:
                loop.state = None
            if (i + 1) % ccfg.refit_every == 0:
                loop.fit_coordinator()
            loop.iteration += 1
        loop.fit_coordinator()
        loop.curves["probe"]["s3"] = _probe_grasping(loop, True, ccfg.probe_episodes)
        save("s3")

    # -- stage 4: explorer training on the occlusion cases + subtask data
    if "s4" in stages:
        exposure_min = cfg.reward.exposure_min
        explore_cases = suite_cases("exploration")
        for i in range(ccfg.s4_iters):
            if loop.state is None or loop.motions_in_episode >= 6 \
                    or loop.state.get(loop.state.target_id).removed \
                    or visible_count(loop.state, loop.state.target_id) >= exposure_min:
                case = explore_cases[loop.episode_counter % len(explore_cases)]
                loop.reset_case_scene("s4", case)
            proj, segs, smap = loop.perceive()
            exposed = visible_count(loop.state, loop.state.target_id) >= exposure_min
            loop.subtask_samples.append((smap, exposed))
            qmaps = loop.qmaps_for(smap, proj)
            decision = select_action_explorer(qmaps)
            outcome, rew = loop.act(decision, EXPLORATION)
            loop.curves["explore_rewards"].append(float(rew))
            now_exposed = visible_count(loop.state, loop.state.target_id) >= exposure_min
            if now_exposed:
                nproj = render_projections(loop.state)
                nsegs = segment_instances(nproj, loop.state)
                nsmap = build_similarity_map(nsegs, loop.reference, loop.scorer,
                                             nproj, loop.mode)
                loop.subtask_samples.append((nsmap, True))
            terminal = now_exposed or loop.state.get(loop.state.target_id).removed
            loop.remember(smap, proj, decision, rew, terminal)
            loop.learn()
            if terminal:
                loop.state = None
            loop.iteration += 1
        loop.highlevel = train_subtask_classifier(loop.subtask_samples,
                                                  cfg.policy, seed=loop.seed)
        loop.highlevel.mode = cfg.policy.subtask_mode
        save("s4")

    window = ccfg.rolling_window
    rates = []
    ok_hist = []
    for stage, it, ok in loop.curves["grasp_attempts"]:
        ok_hist.append(float(ok))
        tail = ok_hist[-window:]
        rates.append((stage, it, sum(tail) / len(tail)))
    loop.curves["rolling"] = rates

    if out_dir is not None:
        curves_path = Path(out_dir) / "curves.json"
        serializable = dict(loop.curves)
        curves_path.write_text(json.dumps(serializable, default=float, indent=2))
    return checkpoints, loop.curves


def rolling_rate(attempts, stage: str, window: int = 200):
    """Success rate over the last `window` grasp attempts of a stage."""
    vals = [float(ok) for st, _, ok in attempts if st == stage]
    if not vals:
        return None
    tail = vals[-window:]
    return sum(tail) / len(tail)
