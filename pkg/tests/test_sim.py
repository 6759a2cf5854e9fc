from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clothfold.shape import EmptyMaskError, train_classifier, feature_vector
from clothfold.sim import (
    LABELS,
    ConfigError,
    EnvConfig,
    ExpertController,
    SubProcess,
    Task,
    classifier_dataset,
    cloth_mask,
    oblique_camera,
    render,
    reset,
    scripted_expert,
    step,
    success_check,
    top_camera,
)

CFG = EnvConfig()


def shoelace(p):
    x, y = p[:, 0], p[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1)))


@pytest.fixture(scope="module")
def demos():
    return {t: scripted_expert(t, CFG, frames=False) for t in ("left", "right", "mid")}


@pytest.fixture(scope="module")
def model():
    masks, labels = classifier_dataset(CFG, "left", 12, 0, top_camera(CFG.image_size, CFG))
    return train_classifier([feature_vector(m) for m in masks], labels, epochs=200, reg=1e-3)


# reset and step


@pytest.mark.parametrize("task", ["left", "right", "mid"])
def test_reset_flat_and_home(task):
    s = reset(CFG, task)
    assert np.all(s.flap_angles == 0)
    assert s.ee_position[2] == pytest.approx(0.5)
    t = reset(CFG, task, seed=3)
    assert np.array_equal(reset(CFG, task, 3).ee_position, t.ee_position)


def test_reset_invalid_config():
    with pytest.raises(ConfigError):
        reset(EnvConfig(capture_radius=0.0), "left")
    with pytest.raises(ConfigError):
        reset(EnvConfig(center_width=-1.0), "left")


def test_zero_action_unchanged():
    s = reset(CFG, "left")
    n = step(s, np.zeros(7), CFG)
    assert np.array_equal(n.flap_angles, s.flap_angles) and np.array_equal(n.ee_position, s.ee_position)
    assert np.array_equal(n.ee_quat, s.ee_quat) and np.array_equal(n.joint_angles, s.joint_angles)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_far_from_flaps_no_contact(seed):
    rng = np.random.default_rng(seed)
    s = reset(CFG, "left")
    for _ in range(5):
        a = np.concatenate([rng.uniform(-0.03, 0.03, 3), rng.normal(0, 0.1, 4)])
        s = step(s, a, CFG)
        assert np.all(s.flap_angles == 0) and not any(s.contact)
        assert abs(np.linalg.norm(s.ee_quat) - 1) < 1e-12


def test_step_rejects_bad_action():
    with pytest.raises(ValueError):
        step(reset(CFG, "left"), [np.nan] * 7, CFG)
    with pytest.raises(ValueError):
        step(reset(CFG, "left"), np.zeros(6), CFG)


def test_step_is_pure():
    s = reset(CFG, "left")
    before = (s.flap_angles.copy(), s.ee_position.copy(), s.ee_quat.copy())
    step(s, np.array([0.02, -0.01, 0.03, 0.1, 0, 0, 0]), CFG)
    assert all(np.array_equal(a, b) for a, b in zip(before, (s.flap_angles, s.ee_position, s.ee_quat)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_reversal_without_contact_returns_home(seed):
    rng = np.random.default_rng(seed)
    s0 = reset(CFG, "left")
    moves = rng.uniform(-0.03, 0.03, (8, 3))
    s = s0
    for d in moves:
        s = step(s, np.concatenate([d, np.zeros(4)]), CFG)
    for d in moves[::-1]:
        s = step(s, np.concatenate([-d, np.zeros(4)]), CFG)
    assert np.abs(s.ee_position - s0.ee_position).max() < 1e-9
    assert np.all(s.flap_angles == 0)


# expert


@pytest.mark.parametrize("task", ["left", "right", "mid"])
def test_expert_completes_fold(demos, task):
    d = demos[task]
    final = d.states[-1].flap_angles
    k = Task(task).flap
    assert final[k] == np.pi
    assert np.all(np.delete(final, k) == 0)


def test_expert_phase_order_and_monotone_push(demos):
    d = demos["left"]
    order = list(SubProcess)
    idx = [order.index(p) for p in d.phases]
    assert idx == sorted(idx) and set(idx) == {0, 1, 2, 3}
    push = [d.states[i + 1].flap_angles[0] for i, p in enumerate(d.phases) if p is SubProcess.PUSHING]
    assert np.all(np.diff(push) >= 0)


def test_expert_controller_past_horizon():
    ctrl = ExpertController("left", CFG)
    with pytest.raises(IndexError):
        ctrl.phase(ctrl.horizon)


# rendering


def test_render_deterministic():
    s = reset(CFG, "left")
    cam = oblique_camera(64, 0.1, cfg=CFG)
    a, b = render(s, CFG, cam), render(s, CFG, cam)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.labels, b.labels)


def test_render_camera_behind_errors():
    cam = oblique_camera(32, cfg=CFG)
    away = replace(cam, target=tuple(2 * np.asarray(cam.position) - np.asarray(cam.target)))
    with pytest.raises(ValueError):
        render(reset(CFG, "left"), CFG, away)


def test_flat_cloth_area_matches_projection():
    s = reset(CFG, "left")
    cam = top_camera(128, CFG)
    mask = cloth_mask(render(s, CFG, cam, effector=False).image)
    area = sum(shoelace(cam.project(p)) for p in s.cloth_extent(CFG) if len(p) >= 3)
    assert abs(mask.sum() - area) <= 0.02 * area


@pytest.mark.parametrize("angle", [0.0, 1.0, 2.5])
def test_world_map_reprojects(angle):
    s = replace(reset(CFG, "left"), flap_angles=np.array([angle, 0.3, 0.0]))
    for cam in (top_camera(96, CFG), oblique_camera(96, 0.2, cfg=CFG)):
        r = render(s, CFG, cam)
        rows, cols = np.nonzero(np.isin(r.labels, [LABELS[k] for k in ("center", "left", "right", "mid")]))
        px = cam.project(r.world[rows, cols])
        assert np.hypot(px[:, 0] - cols, px[:, 1] - rows).max() < 0.5


def test_push_renders_differ_only_on_moving_parts():
    d = scripted_expert("left", CFG, frames=False)
    cam = top_camera(96, CFG)
    i = [k for k, p in enumerate(d.phases) if p is SubProcess.PUSHING][4]
    a, b = render(d.states[i], CFG, cam), render(d.states[i + 1], CFG, cam)
    diff = np.any(a.image != b.image, axis=-1)
    assert diff.any()
    moving = [LABELS["left"], LABELS["cloth"], LABELS["effector"]]
    assert np.all(np.isin(a.labels, moving)[diff] | np.isin(b.labels, moving)[diff])


# success check


def test_success_check(model):
    d = scripted_expert("left", CFG, top_camera(CFG.image_size, CFG), effector=False)
    assert success_check(d.frames[-1], model, "left")
    assert not success_check(d.frames[0], model, "left")
    with pytest.raises(EmptyMaskError):
        success_check(np.zeros((64, 64, 3)), model, "left")
