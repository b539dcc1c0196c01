import json

import numpy as np
import pytest

from utils.config import FRAME_DT, PhysicsConfig
from utils.data_generator import RallyGenerator
from utils.datatypes import SpinLabel, Trajectory3D
from utils.errors import BallOutOfPlay, BelowTable, SchemaError
from utils.geometry import project_many
from utils.simulator import (BallState, RallyScript, ScriptedShot, bounce, load_scripts, render_detections,
                             render_scene, save_scripts, simulate_rally, step_flight)

NO_AIR = PhysicsConfig(drag_coefficient=0.0, magnus_coefficient=0.0)


def _serve(velocity=(0.0, 4.5, 1.0), position=(0.0, -1.6, 0.95), spin=(0.0, 0.0, 0.0)):
    return ScriptedShot(time=0.0, state=BallState(position=position, velocity=velocity, spin=spin))


def test_step_rejects_bad_dt():
    state = BallState(position=(0, 0, 1), velocity=(1, 0, 0))
    with pytest.raises(ValueError):
        step_flight(state, 0.0)
    with pytest.raises(ValueError):
        step_flight(state, 2 * FRAME_DT)


def test_step_stops_at_the_floor():
    state = BallState(position=(0.0, 0.0, 0.01), velocity=(0.0, 0.0, -3.0))
    after = step_flight(state, FRAME_DT)
    assert after.position[2] == 0.0
    assert 0.0 < after.time < FRAME_DT
    assert after.time == pytest.approx(0.01 / 3.0, rel=0.05)
    assert after.velocity[2] < -3.0

    resting = BallState(position=(0.0, 0.0, 0.0), velocity=(0.0, 0.0, -1.0))
    assert step_flight(resting, FRAME_DT).position[2] == 0.0


def test_free_flight_without_air_is_a_parabola():
    state = BallState(position=(0.1, -1.0, 1.0), velocity=(0.5, 3.0, 2.0), spin=(-200.0, 0.0, 0.0))
    after = step_flight(state, FRAME_DT, NO_AIR)
    t = FRAME_DT
    expected = np.array([0.1 + 0.5 * t, -1.0 + 3.0 * t, 1.0 + 2.0 * t - 0.5 * 9.8 * t ** 2])
    np.testing.assert_allclose(after.position, expected, atol=1e-12)
    np.testing.assert_allclose(after.velocity, [0.5, 3.0, 2.0 - 9.8 * t], atol=1e-12)


def test_one_second_without_air_matches_the_closed_form():
    state = BallState(position=(0.2, -1.0, 3.0), velocity=(0.5, 3.0, 4.0), spin=(-300.0, 50.0, 0.0))
    for _ in range(150):
        state = step_flight(state, FRAME_DT, NO_AIR)
    t = 150 * FRAME_DT
    assert state.time == pytest.approx(1.0)
    expected = np.array([0.2 + 0.5 * t, -1.0 + 3.0 * t, 3.0 + 4.0 * t - 0.5 * 9.8 * t ** 2])
    np.testing.assert_allclose(state.position, expected, rtol=0, atol=1e-9)
    np.testing.assert_allclose(state.velocity, [0.5, 3.0, 4.0 - 9.8 * t], rtol=0, atol=1e-9)


def test_drag_slows_the_ball():
    state = BallState(position=(0, 0, 1), velocity=(0.0, 10.0, 0.0))
    with_drag = step_flight(state, FRAME_DT, PhysicsConfig(magnus_coefficient=0.0))
    without = step_flight(state, FRAME_DT, NO_AIR)
    assert with_drag.velocity[1] < without.velocity[1]


def test_topspin_pushes_the_ball_down():
    # heading +y, topspin axis n x v_hat = -x
    plain = BallState(position=(0, 0, 1), velocity=(0.0, 8.0, 0.0))
    spun = BallState(position=(0, 0, 1), velocity=(0.0, 8.0, 0.0), spin=(-500.0, 0.0, 0.0))
    assert step_flight(spun, FRAME_DT).velocity[2] < step_flight(plain, FRAME_DT).velocity[2]


def test_bounce_restitution_and_friction(table):
    state = BallState(position=(0.0, 0.5, table.surface_height), velocity=(1.0, 4.0, -3.0))
    out = bounce(state, table)
    assert out.velocity[2] == pytest.approx(0.9 * 3.0)
    np.testing.assert_allclose(out.velocity[:2], [0.88, 3.52])


def test_bounce_topspin_kick(table):
    physics = PhysicsConfig()
    state = BallState(position=(0.0, 0.5, table.surface_height), velocity=(0.0, 4.0, -3.0), spin=(-400.0, 0.0, 0.0))
    out = bounce(state, table, physics)
    assert out.velocity[1] == pytest.approx(0.88 * 4.0 + physics.spin_coupling * 400.0)
    np.testing.assert_allclose(out.spin, [-400.0 * physics.spin_retention, 0.0, 0.0])


def test_bounce_below_table(table):
    state = BallState(position=(0.0, 0.5, table.surface_height - 0.01), velocity=(0.0, 4.0, -3.0))
    with pytest.raises(BelowTable):
        bounce(state, table)


def test_bounce_needs_downward_motion(table):
    state = BallState(position=(0.0, 0.5, table.surface_height), velocity=(0.0, 4.0, 1.0))
    with pytest.raises(ValueError):
        bounce(state, table)


def test_serve_bounce_is_tagged_at_the_surface(table):
    truth = simulate_rally(RallyScript(serve=_serve()), table)
    assert truth.source == "simulated"
    assert len(truth.bounces) >= 1
    first = truth.bounces[0]
    assert first.position[2] == pytest.approx(table.surface_height)
    assert abs(first.time - first.frame_index * FRAME_DT) <= FRAME_DT / 2
    assert first.post_velocity[2] == pytest.approx(-table.restitution_normal * first.pre_velocity[2])
    assert np.all(np.diff(truth.frame_index) == 1)


def test_scripted_hit_replaces_velocity(table):
    hit_state = BallState(position=(0.0, 1.6, 0.9), velocity=(0.0, -5.0, 1.0), spin=(0.0, -100.0, 0.0))
    hit = ScriptedShot(time=60 * FRAME_DT, state=hit_state, label=SpinLabel.LIGHT_TOPSPIN)
    truth = simulate_rally(RallyScript(serve=_serve(), hits=(hit,)), table)
    (event,) = truth.hits
    assert event.frame_index == 60
    assert event.label is SpinLabel.LIGHT_TOPSPIN
    np.testing.assert_array_equal(truth.velocities[truth.index_of(60)], [0.0, -5.0, 1.0])


def _near_event(frame, event_frames):
    return any(abs(frame - e) <= 1 for e in event_frames)


def test_energy_never_grows_between_events(generator, table):
    truth = simulate_rally(generator.generate_rally(n_hits=3), table)
    g = PhysicsConfig().gravity
    energy = 0.5 * np.sum(truth.velocities ** 2, axis=1) + g * truth.positions[:, 2]
    event_frames = [e.frame_index for e in truth.events]
    checked = 0
    for i in range(len(truth) - 1):
        a, b = int(truth.frame_index[i]), int(truth.frame_index[i + 1])
        if _near_event(a, event_frames) or _near_event(b, event_frames):
            continue
        assert energy[i + 1] <= energy[i] + 1e-9, f"energy grew between frames {a} and {b}"
        checked += 1
    assert checked > 100


def test_same_seed_gives_identical_rallies(templates, table):
    runs = []
    for _ in range(2):
        script = RallyGenerator(seed=21, templates=templates).generate_rally(rally_id=3, n_hits=4)
        runs.append(simulate_rally(script, table))
    a, b = runs
    np.testing.assert_array_equal(a.frame_index, b.frame_index)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.velocities, b.velocities)
    assert [(e.kind, e.frame_index, e.time) for e in a.events] == [(e.kind, e.frame_index, e.time) for e in b.events]


def test_every_scripted_hit_is_tagged(generator, table):
    script = generator.generate_rally(n_hits=10)
    truth = simulate_rally(script, table)
    assert len(truth.hits) == 10
    assert [h.frame_index for h in truth.hits] == [s.frame_index for s in script.hits]


def test_ball_leaving_play_before_a_scripted_hit(table):
    hit = ScriptedShot(time=200 * FRAME_DT, state=BallState(position=(0, 1.6, 0.9), velocity=(0, -5, 1)))
    script = RallyScript(serve=_serve(velocity=(0.0, 20.0, 0.5)), hits=(hit,))
    with pytest.raises(BallOutOfPlay):
        simulate_rally(script, table)


def test_script_validation():
    late = ScriptedShot(time=0.0, state=BallState(position=(0, 1.6, 0.9), velocity=(0, -5, 1)))
    with pytest.raises(ValueError):
        RallyScript(serve=_serve(), hits=(late,))
    with pytest.raises(ValueError):
        RallyScript(serve=ScriptedShot(time=0.0, state=_serve().state, label=SpinLabel.NO_CLUSTER))


def test_noise_free_rendering_matches_projection(rig, table):
    truth = simulate_rally(RallyScript(serve=_serve()), table)
    streams = render_detections(truth, rig, noise_sigma=0.0, dropout=0.0, rng_seed=0)
    for camera in rig:
        pixels, _ = project_many(truth.positions, camera)
        by_frame = {d.frame_index: d.pixel for d in streams[camera.camera_id]}
        assert by_frame
        for frame, pixel in by_frame.items():
            np.testing.assert_allclose(pixel, pixels[truth.index_of(frame)], atol=1e-9)


def test_rendering_is_deterministic(rig, table):
    truth = simulate_rally(RallyScript(serve=_serve()), table)
    a = render_detections(truth, rig, 0.5, 0.2, rng_seed=5)
    b = render_detections(truth, rig, 0.5, 0.2, rng_seed=5)
    assert a == b
    assert len(a["left"]) < len(truth)


def _slow_pass(n=3000):
    frames = np.arange(n)
    positions = np.column_stack([np.zeros(n), np.linspace(-0.8, 0.8, n), np.full(n, 1.0)])
    return Trajectory3D(frame_index=frames, positions=positions, source="simulated")


def test_dropout_rate_is_respected(rig):
    truth = _slow_pass()
    complete = render_detections(truth, rig, noise_sigma=0.0, dropout=0.0, rng_seed=3)
    assert all(len(stream) == len(truth) for stream in complete.values())
    thinned = render_detections(truth, rig, noise_sigma=0.0, dropout=0.1, rng_seed=3)
    for stream in thinned.values():
        assert 0.87 <= len(stream) / len(truth) <= 0.93


def test_pixel_noise_has_the_requested_spread(rig):
    truth = _slow_pass()
    clean = render_detections(truth, rig, noise_sigma=0.0, dropout=0.0, rng_seed=7)
    noisy = render_detections(truth, rig, noise_sigma=0.5, dropout=0.0, rng_seed=7)
    for camera in rig:
        exact = {d.frame_index: d.pixel for d in clean[camera.camera_id]}
        offsets = np.array([np.subtract(d.pixel, exact[d.frame_index]) for d in noisy[camera.camera_id]])
        assert len(offsets) > 0.99 * len(truth)
        assert np.std(offsets) == pytest.approx(0.5, rel=0.1)


def test_scene_merges_balls_in_frame_order(rig, table):
    truths = [simulate_rally(RallyScript(serve=_serve()), table),
              simulate_rally(RallyScript(serve=_serve(position=(0.3, -1.6, 1.0))), table)]
    streams = render_scene(truths, rig, 0.5, 0.0, rng_seed=1)
    frames = [d.frame_index for d in streams["left"]]
    assert frames == sorted(frames)
    assert frames.count(frames[0]) == 2


def test_scripts_save_and_load(tmp_path):
    script = RallyScript(serve=_serve(), rng_seed=9, rally_id=4)
    path = tmp_path / "scripts.json"
    save_scripts(str(path), [script])
    (loaded,) = load_scripts(str(path))
    assert loaded.to_dict() == script.to_dict()


def test_bad_script_is_a_schema_error(tmp_path):
    path = tmp_path / "scripts.json"
    path.write_text(json.dumps({"rallies": [{"serve": {"time": 0.0, "position": [0, 0]}}]}))
    with pytest.raises(SchemaError, match="rally 0"):
        load_scripts(str(path))
