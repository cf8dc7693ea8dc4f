"""Scripted scenario templates, their committed JSON, and scene generators."""
import json
from importlib import resources

import numpy as np
import pytest

from seekgrasp.config import ConfigError, DataError, WorldConfig
from seekgrasp.cases import (CONFUSING_CASES, COORDINATION_CASES,
                             EXPLORATION_CASES, N_CLUSTERS, build_template,
                             case_info, generate_scenario, load_template,
                             random_scene, suite_cases, write_templates)
from seekgrasp.world import (GraspCommand, apply_grasp, topmost_map,
                             validate_state, visible_count)

CFG = WorldConfig()
ALL_CASES = (*EXPLORATION_CASES, *COORDINATION_CASES, *CONFUSING_CASES)


def test_suite_case_rosters():
    assert len(suite_cases("exploration")) == 4
    assert len(suite_cases("coordination")) == 8
    assert len(suite_cases("confusing")) == 4
    assert suite_cases("full") == ["random(3,7)"]
    with pytest.raises(ConfigError):
        suite_cases("warmup")


def test_case_info_fields():
    assert case_info("exploration-1") == {"suite": "exploration", "n_cluster": 2}
    assert case_info("exploration-3") == {"suite": "exploration", "n_cluster": 3}
    assert case_info("coordination-5")["suite"] == "coordination"
    assert case_info("confusing-2")["suite"] == "confusing"
    assert case_info("random(3,7)")["suite"] == "full"
    assert case_info("hidden(4,6)")["suite"] == "full"
    with pytest.raises(ConfigError):
        case_info("exploration-9")


@pytest.mark.parametrize("case", ALL_CASES)
def test_builders_match_committed_templates(case):
    built = build_template(case)
    committed = load_template(case)
    assert built.to_dict() == committed.to_dict()


@pytest.mark.parametrize("case", ALL_CASES)
def test_templates_are_valid_scenes(case):
    state = load_template(case)
    validate_state(state, CFG)


@pytest.mark.parametrize("case", EXPLORATION_CASES)
def test_exploration_templates_hide_target(case):
    state = load_template(case)
    assert visible_count(state, state.target_id) == 0


@pytest.mark.parametrize("case", (*COORDINATION_CASES, *CONFUSING_CASES))
def test_search_templates_show_target(case):
    state = load_template(case)
    assert visible_count(state, state.target_id) >= 12


def _center_grasp_rotations(state):
    vis = topmost_map(state) == state.target_id
    rows, cols = np.nonzero(vis)
    pixel = (int(rows.mean()), int(cols.mean()))
    return [rot for rot in range(16)
            if apply_grasp(state, GraspCommand(pixel=pixel, rotation_index=rot),
                           CFG)[1].grasp_success]


def test_odd_coordination_cases_block_direct_grasps():
    for case in COORDINATION_CASES[::2]:
        assert _center_grasp_rotations(load_template(case)) == [], case


def test_even_coordination_cases_allow_direct_grasps():
    for case in COORDINATION_CASES[1::2]:
        assert _center_grasp_rotations(load_template(case)), case


@pytest.mark.parametrize("case", CONFUSING_CASES)
def test_confusing_templates_have_lookalike_twins(case):
    state = load_template(case)
    target = state.get(state.target_id)
    twins = [o for o in state.live_objects()
             if o.id != target.id and o.category == target.category]
    assert len(twins) >= 2


def test_generate_scenario_is_deterministic():
    a = generate_scenario("coordination-3", 17)
    b = generate_scenario("coordination-3", 17)
    c = generate_scenario("coordination-3", 18)
    assert a.to_dict() == b.to_dict()
    assert c.to_dict() != a.to_dict()
    assert a.rng_seed == 17


@pytest.mark.parametrize("case", ALL_CASES)
def test_generated_scenes_keep_case_promises(case):
    info = case_info(case)
    for seed in (0, 5):
        state = generate_scenario(case, seed)
        validate_state(state, CFG)
        if info["suite"] == "exploration":
            assert visible_count(state, state.target_id) == 0
        else:
            assert visible_count(state, state.target_id) >= 12
        if info["suite"] == "confusing":
            target = state.get(state.target_id)
            twins = [o for o in state.live_objects()
                     if o.id != target.id and o.category == target.category]
            assert len(twins) >= 2


def test_generate_scenario_unknown_case():
    with pytest.raises(ConfigError):
        generate_scenario("exploration-99", 0)


def test_random_scene_layout():
    state = random_scene(3, 7, seed=4, cfg=CFG)
    validate_state(state, CFG)
    assert state.case_name == "random(3,7)"
    assert len(state.live_objects()) == 10
    assert visible_count(state, state.target_id) > 0
    again = random_scene(3, 7, seed=4, cfg=CFG)
    assert again.to_dict() == state.to_dict()


def test_random_scene_parsed_from_case_name():
    state = generate_scenario("random(2,5)", 9)
    assert len(state.live_objects()) == 7
    assert state.case_name == "random(2,5)"


def test_hidden_scene_buries_target():
    state = generate_scenario("hidden(3,6)", 2)
    assert visible_count(state, state.target_id) == 0
    assert state.case_name == "hidden(3,6)"


def test_write_templates_reproduces_committed_files(tmp_path):
    paths = write_templates(tmp_path)
    assert len(paths) == len(ALL_CASES)
    for path in paths:
        committed = resources.files("seekgrasp").joinpath(
            f"data/cases/{path.name}").read_text()
        assert json.loads(path.read_text()) == json.loads(committed)
