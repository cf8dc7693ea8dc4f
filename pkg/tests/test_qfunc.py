"""Q-map assembly, rotation equivariance, replay, and TD updates."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seekgrasp.config import ConfigError, DataError, QFuncConfig, make_rng
from seekgrasp.nets import Adam
from seekgrasp.qfunc import (DEPTH_SCALE, QMaps, ReplayBuffer, Transition,
                             argmax_action, assemble_state, base_channels,
                             best_value, build_qnet, huber_loss, infer_qmaps,
                             sample_replay, single_stack, td_update, valid_mask)
from seekgrasp.rotation import rotate_k


def _scene_arrays(seed, hw=16):
    rng = make_rng("qf-scene", seed)
    smap = rng.uniform(0.0, 1.0, size=(hw, hw))
    rgb = rng.uniform(0.0, 1.0, size=(hw, hw, 3))
    depth = rng.uniform(0.0, 4.0, size=(hw, hw))
    return smap, rgb, depth


def test_base_channels_layout():
    smap, rgb, depth = _scene_arrays(0)
    base = base_channels(smap, rgb, depth)
    assert base.shape == (5, 16, 16)
    assert np.array_equal(base[0], smap)
    for c in range(3):
        assert np.array_equal(base[1 + c], rgb[..., c])
    assert np.array_equal(base[4], depth / DEPTH_SCALE)


def test_base_channels_shape_mismatch_rejected():
    smap, rgb, depth = _scene_arrays(1)
    with pytest.raises(ConfigError):
        base_channels(smap[:8], rgb, depth)
    with pytest.raises(ConfigError):
        base_channels(smap, rgb[..., :2], depth)


def test_assemble_state_counter_rotates_each_stack():
    smap, rgb, depth = _scene_arrays(2)
    st_t = assemble_state(smap, rgb, depth, k=16)
    assert st_t.stacks.shape == (16, 5, 16, 16)
    base = base_channels(smap, rgb, depth)
    for i in (0, 3, 4, 9):
        j = (16 - i) % 16
        for c in range(5):
            assert np.array_equal(st_t.stacks[i, c], rotate_k(base[c], j, 16))
        assert np.array_equal(st_t.stacks[i],
                              single_stack(smap, rgb, depth, i, 16))


@pytest.mark.parametrize("kind", ["conv", "linear"])
def test_qnet_output_shape(kind):
    net = build_qnet(QFuncConfig(kind=kind, channels=4), make_rng("qf", 0))
    out = net.forward(make_rng("qf", 1).normal(size=(5, 12, 12)))
    assert out.shape == (2, 12, 12)


def test_build_qnet_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        build_qnet(QFuncConfig(kind="mlp"), make_rng("qf", 0))


def test_infer_qmaps_shapes_and_valid_margin():
    smap, rgb, depth = _scene_arrays(3)
    net = build_qnet(QFuncConfig(channels=4), make_rng("qf", 2))
    qm = infer_qmaps(net, assemble_state(smap, rgb, depth, k=16), valid_margin=3)
    assert qm.push.shape == (16, 16, 16)
    assert qm.grasp.shape == (16, 16, 16)
    assert qm.valid[3, 3] and not qm.valid[2, 3]
    assert qm.valid.sum() == 10 * 10


def test_valid_mask_degenerate_margin():
    assert not valid_mask((6, 6), 3).any()
    assert valid_mask((7, 7), 3).sum() == 1


def test_qmaps_equivariant_under_quarter_scene_rotation():
    """Rotating the scene by 90 degrees permutes and rotates the Q-maps
    bitwise: q'[i] == rot90(q[(i - 4) % k])."""
    smap, rgb, depth = _scene_arrays(4)
    net = build_qnet(QFuncConfig(channels=4), make_rng("qf", 3))
    qm = infer_qmaps(net, assemble_state(smap, rgb, depth, k=16))

    smap_r = np.rot90(smap, -1).copy()
    rgb_r = np.rot90(rgb, -1, axes=(0, 1)).copy()
    depth_r = np.rot90(depth, -1).copy()
    qm_r = infer_qmaps(net, assemble_state(smap_r, rgb_r, depth_r, k=16))

    for i in range(16):
        assert np.array_equal(qm_r.push[i], np.rot90(qm.push[(i - 4) % 16], -1))
        assert np.array_equal(qm_r.grasp[i], np.rot90(qm.grasp[(i - 4) % 16], -1))


def test_argmax_action_respects_valid_mask_and_ties():
    push = np.zeros((4, 8, 8))
    grasp = np.zeros((4, 8, 8))
    push[2, 0, 0] = 9.0  # outside the margin; must be ignored
    push[1, 4, 5] = 3.0
    push[3, 6, 6] = 3.0  # tie resolves to the lower rotation index
    qm = QMaps(push=push, grasp=grasp, valid=valid_mask((8, 8), 2))
    (r, c), rot, val = argmax_action(qm, "push")
    assert (r, c, rot, val) == (4, 5, 1, 3.0)
    with pytest.raises(ConfigError):
        argmax_action(qm, "pull")


def test_best_value_spans_both_heads():
    push = np.zeros((2, 8, 8))
    grasp = np.zeros((2, 8, 8))
    push[0, 3, 3] = 1.5
    grasp[1, 4, 4] = 2.5
    grasp[0, 0, 0] = 9.0  # invalid margin cell
    qm = QMaps(push=push, grasp=grasp, valid=valid_mask((8, 8), 2))
    assert best_value(qm) == 2.5


def test_huber_loss_regions():
    loss, grad = huber_loss(0.3, 0.0)
    assert loss == pytest.approx(0.045)
    assert grad == pytest.approx(0.3)
    loss, grad = huber_loss(3.0, 0.0)
    assert loss == pytest.approx(2.5)
    assert grad == 1.0
    loss, grad = huber_loss(-3.0, 0.0)
    assert loss == pytest.approx(2.5)
    assert grad == -1.0


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5))
def test_huber_gradient_matches_finite_difference(pred, target):
    h = 1e-6
    _, grad = huber_loss(pred, target)
    hi, _ = huber_loss(pred + h, target)
    lo, _ = huber_loss(pred - h, target)
    fd = (hi - lo) / (2 * h)
    if abs(abs(pred - target) - 1.0) > 1e-4:  # away from the kink
        assert grad == pytest.approx(fd, abs=1e-4)


# ---------------------------------------------------------------------------
# replay buffer


def _tr(sid, nsid=None, reward=0.0, head="push", terminal=False):
    return Transition(state_id=sid, head=head, rotation=0, pixel=(4, 4),
                      reward=reward, next_state_id=nsid, terminal=terminal)


def test_replay_eviction_frees_states():
    buf = ReplayBuffer(capacity=2)
    sids = []
    for i in range(4):
        smap, rgb, depth = _scene_arrays(i, hw=8)
        sids.append(buf.add_state(smap, rgb, depth))
    for i in range(3):
        buf.add(_tr(sids[i], sids[i + 1]))
    assert len(buf) == 2
    assert sids[0] not in buf._states  # evicted transition released its states
    assert sids[1] in buf._states  # still referenced by the second transition


def test_replay_state_roundtrip_is_float32_quantized():
    buf = ReplayBuffer(capacity=4)
    smap, rgb, depth = _scene_arrays(7, hw=8)
    sid = buf.add_state(smap, rgb, depth)
    s, r, d = buf.state(sid)
    assert s.dtype == np.float64
    assert np.allclose(s, smap, atol=1e-6)
    assert np.allclose(r, rgb, atol=1e-6)
    assert np.allclose(d, depth, atol=1e-6)


def test_replay_rejects_bad_head_and_capacity():
    with pytest.raises(ConfigError):
        ReplayBuffer(capacity=0)
    buf = ReplayBuffer(capacity=2)
    smap, rgb, depth = _scene_arrays(8, hw=8)
    sid = buf.add_state(smap, rgb, depth)
    with pytest.raises(ConfigError):
        buf.add(_tr(sid, head="poke"))


def test_sample_replay_empty_and_biased():
    buf = ReplayBuffer(capacity=50)
    rng = make_rng("replay", 0)
    with pytest.raises(DataError):
        sample_replay(buf, 4, rng)
    smap, rgb, depth = _scene_arrays(9, hw=8)
    sid = buf.add_state(smap, rgb, depth)
    for i in range(20):
        buf.add(_tr(sid, reward=0.0, terminal=True))
    buf.add(_tr(sid, reward=10.0, terminal=True))
    hits = 0
    for trial in range(50):
        batch = sample_replay(buf, 3, make_rng("replay", trial))
        hits += any(tr.reward == 10.0 for tr in batch)
    # weight 11 among 20 ones: expected inclusion rate well above uniform 3/21
    assert hits > 25
    assert len(sample_replay(buf, 99, rng)) == len(buf)


# ---------------------------------------------------------------------------
# TD updates


def test_td_update_rejects_empty_batch():
    net = build_qnet(QFuncConfig(channels=4), make_rng("qf", 5))
    buf = ReplayBuffer(capacity=4)
    with pytest.raises(DataError):
        td_update(net, Adam(net.params, lr=1e-3), [], buf, QFuncConfig())


def test_td_update_fits_terminal_reward():
    """Repeated updates on one terminal transition drive the executed entry
    toward its reward."""
    cfg = QFuncConfig(kind="linear", channels=4, lr=1e-2)
    net = build_qnet(cfg, make_rng("qf", 6))
    opt = Adam(net.params, lr=cfg.lr)
    buf = ReplayBuffer(capacity=4)
    smap, rgb, depth = _scene_arrays(10, hw=12)
    sid = buf.add_state(smap, rgb, depth)
    tr = Transition(state_id=sid, head="grasp", rotation=3, pixel=(6, 7),
                    reward=1.0, next_state_id=None, terminal=True)
    buf.add(tr)
    losses = [td_update(net, opt, [tr], buf, cfg, k=16) for _ in range(220)]
    assert losses[-1] < 0.002
    assert losses[-1] < losses[0]
    qm = infer_qmaps(net, assemble_state(smap, rgb, depth, k=16), cfg.valid_margin)
    assert qm.grasp[3, 6, 7] == pytest.approx(1.0, abs=0.1)


def test_td_update_bootstraps_next_state():
    """Non-terminal target includes gamma times the best next value."""
    cfg = QFuncConfig(kind="linear", channels=4, gamma=0.5)
    net = build_qnet(cfg, make_rng("qf", 7))
    buf = ReplayBuffer(capacity=4)
    smap, rgb, depth = _scene_arrays(11, hw=12)
    sid = buf.add_state(smap, rgb, depth)
    nsid = buf.add_state(*_scene_arrays(12, hw=12))
    tr = Transition(state_id=sid, head="push", rotation=0, pixel=(5, 5),
                    reward=0.25, next_state_id=nsid, terminal=False)
    buf.add(tr)

    sn, rgbn, dn = buf.state(nsid)
    nxt = infer_qmaps(net, assemble_state(sn, rgbn, dn, 16), cfg.valid_margin)
    target = 0.25 + cfg.gamma * best_value(nxt)
    cur = infer_qmaps(net, assemble_state(*buf.state(sid), 16), cfg.valid_margin)
    pred = cur.push[0, 5, 5]
    want_loss, _ = huber_loss(float(pred), float(target))

    opt = Adam(net.params, lr=1e-5)  # tiny step: loss reflects the pre-update net
    got = td_update(net, opt, [tr], buf, cfg, k=16)
    assert got == pytest.approx(want_loss, rel=1e-9)
