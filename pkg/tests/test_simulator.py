"""Simulator oracles: exact kinematics, visibility, geometry, determinism."""

import math

import numpy as np
import pytest

from needlebench.simulator import (
    Action,
    InsertionScenario,
    Occluder,
    PhantomConfig,
    Simulator,
    TissueLayer,
    frame_to_u8,
    make_scenario,
    shaft_gain,
    u8_to_f64,
)
from needlebench.tensor import ConfigError


def plain_scenario(**kw):
    ph = PhantomConfig(occluders=kw.pop("occluders", ()),
                       draw_target_marker=kw.pop("draw_target_marker", False),
                       seed=kw.pop("seed", 0))
    return InsertionScenario(phantom=ph, **kw)


# -- kinematics ------------------------------------------------------------


def test_constant_speed_insertion_is_exact():
    r = np.random.default_rng(0)
    for _ in range(1000):
        v = float(r.uniform(0.1, 20.0))
        dt = float(r.uniform(0.005, 0.1))
        n = int(r.integers(1, 400))
        sim = Simulator(plain_scenario(), dt=dt)
        act = Action(theta_n_deg=45.0, v_n_mm_s=v)
        for _ in range(n):
            sim.advance(act)
        expected = v * (n * dt)
        assert sim.x_n_mm == expected  # closed form, bitwise
        assert sim.sim_time == n * dt


def test_piecewise_speed_matches_segment_sum():
    r = np.random.default_rng(1)
    for _ in range(200):
        dt = float(r.uniform(0.01, 0.05))
        sim = Simulator(plain_scenario(), dt=dt)
        total = 0.0
        for _seg in range(int(r.integers(1, 6))):
            v = float(r.uniform(0.0, 20.0))
            n = int(r.integers(1, 50))
            for _ in range(n):
                sim.advance(Action(v_n_mm_s=v))
            total += v * (n * dt)
        assert math.isclose(sim.x_n_mm, total, rel_tol=1e-12, abs_tol=1e-12)


def test_stop_zeroes_motion_permanently():
    sim = Simulator(plain_scenario(), dt=0.02)
    for _ in range(10):
        sim.advance(Action(v_n_mm_s=10.0))
    x = sim.x_n_mm
    sim.advance(Action(v_n_mm_s=10.0, stop=True))
    for _ in range(5):
        sim.advance(Action(v_n_mm_s=10.0))  # ignored once stopped
    assert sim.x_n_mm == x
    assert sim.stopped


def test_stop_action_normalizes_velocities():
    a = Action(v_n_mm_s=5.0, v_p_mm_s=(1.0, 0.0, 0.0), stop=True)
    assert a.v_n_mm_s == 0.0
    assert a.v_p_mm_s == (0.0, 0.0, 0.0)


def test_speed_clamped_to_limits():
    sim = Simulator(plain_scenario(), dt=0.1)
    sim.advance(Action(v_n_mm_s=500.0))
    assert sim.x_n_mm == pytest.approx(20.0 * 0.1)
    sim2 = Simulator(plain_scenario(), dt=0.1)
    sim2.advance(Action(v_n_mm_s=-5.0))
    assert sim2.x_n_mm == 0.0


def test_theta_slews_toward_command():
    sim = Simulator(plain_scenario(theta0_deg=30.0), dt=0.1)
    sim.advance(Action(theta_n_deg=75.0))
    assert sim.theta == pytest.approx(34.0)  # 40 deg/s * 0.1 s
    for _ in range(40):
        sim.advance(Action(theta_n_deg=75.0))
    assert sim.theta == pytest.approx(75.0)
    sim.advance(Action(theta_n_deg=100.0))  # clamped to 75
    assert sim.theta == pytest.approx(75.0)


def test_tip_geometry_45_degrees():
    sim = Simulator(plain_scenario(entry_px=(10.0, 90.0), theta0_deg=45.0), dt=0.05)
    for _ in range(20):
        sim.advance(Action(theta_n_deg=45.0, v_n_mm_s=10.0))
    # 10 mm/s * 1 s = 10 mm = 20 px along the 45-degree ray
    d = 20.0 / math.sqrt(2.0)
    tip = sim.tip_world_px()
    assert tip[0] == pytest.approx(10.0 + d, abs=1e-9)
    assert tip[1] == pytest.approx(90.0 + d, abs=1e-9)


def test_probe_translation_shifts_image_not_world():
    sim = Simulator(plain_scenario(mode="IPM"), dt=0.1)
    for _ in range(10):
        sim.advance(Action(v_p_mm_s=(5.0, 0.0, 0.0)))
    # 5 mm/s * 1 s = 5 mm = 10 px
    assert sim.probe_offset_px == pytest.approx(10.0)
    assert sim.tip_image_px()[0] == pytest.approx(sim.tip_world_px()[0] - 10.0)
    sim_ips = Simulator(plain_scenario(mode="IPS"), dt=0.1)
    sim_ips.advance(Action(v_p_mm_s=(5.0, 0.0, 0.0)))
    assert sim_ips.probe_offset_px == 0.0  # probe is held still in-plane static


# -- rendering and visibility ------------------------------------------------


def square(cx, cy, half):
    return ((cx - half, cy - half), (cx + half, cy - half),
            (cx + half, cy + half), (cx - half, cy + half))


def test_visibility_under_single_occluder_is_transmission():
    occ = Occluder(polygon=square(60.0, 100.0, 20.0), attenuation=0.8)
    scn = plain_scenario(entry_px=(56.0, 96.0), theta0_deg=45.0,
                         occluders=(occ,))
    sim = Simulator(scn, dt=0.05)
    f = sim.render()
    assert f.visibility == pytest.approx(0.2, abs=1e-12)


def test_visibility_stacks_multiplicatively():
    occs = (Occluder(polygon=square(60.0, 100.0, 20.0), attenuation=0.5),
            Occluder(polygon=square(62.0, 102.0, 20.0), attenuation=0.5))
    scn = plain_scenario(entry_px=(56.0, 96.0), occluders=occs)
    sim = Simulator(scn, dt=0.05)
    assert sim.render().visibility == pytest.approx(0.25, abs=1e-12)


def test_visibility_one_outside_occluders():
    occ = Occluder(polygon=square(200.0, 200.0, 10.0), attenuation=0.9)
    sim = Simulator(plain_scenario(occluders=(occ,)), dt=0.05)
    assert sim.render().visibility == 1.0


def test_oscillating_occluder_moves_and_returns():
    occ = Occluder(polygon=square(100.0, 100.0, 15.0), attenuation=0.8,
                   osc_amplitude_px=50.0, osc_period_s=2.0, osc_phase=0.0)
    assert occ.offset_x(0.0) == pytest.approx(0.0)
    assert occ.offset_x(0.5) == pytest.approx(50.0)
    assert occ.offset_x(1.0) == pytest.approx(0.0, abs=1e-9)
    assert occ.offset_x(1.5) == pytest.approx(-50.0)


def test_moving_shadow_modulates_tip_visibility_over_time():
    occ = Occluder(polygon=square(120.0, 110.0, 14.0), attenuation=0.8,
                   osc_amplitude_px=60.0, osc_period_s=2.0,
                   osc_phase=math.pi / 2.0)  # starts fully displaced
    scn = plain_scenario(entry_px=(116.0, 106.0), occluders=(occ,))
    sim = Simulator(scn, dt=0.1)
    vis = [sim.step(Action()).visibility for _ in range(20)]
    assert max(vis) == pytest.approx(1.0)
    assert min(vis) == pytest.approx(0.2, abs=1e-12)


def test_gt_box_is_12px_around_tip():
    sim = Simulator(plain_scenario(entry_px=(40.0, 80.0)), dt=0.05)
    f = sim.render()
    assert np.allclose(f.gt_box, [34.0, 74.0, 46.0, 86.0])
    assert f.gt_box[2] - f.gt_box[0] == pytest.approx(12.0)


def test_steeper_angle_renders_dimmer_shaft():
    gains = [shaft_gain(t) for t in np.linspace(15.0, 75.0, 13)]
    assert all(a > b for a, b in zip(gains, gains[1:]))

    def mean_shaft(theta):
        scn = plain_scenario(entry_px=(30.0, 60.0), theta0_deg=theta)
        sim = Simulator(scn, dt=0.05)
        for _ in range(40):
            sim.advance(Action(theta_n_deg=theta, v_n_mm_s=15.0))
        f = sim.render()
        rad = math.radians(theta)
        pts = [sim.entry + u * (f.tip_img - sim.entry) for u in np.linspace(0.1, 0.9, 9)]
        return np.mean([f.image[int(round(p[1])), int(round(p[0]))] for p in pts])

    assert mean_shaft(60.0) < mean_shaft(30.0)


def test_tip_blob_brighter_than_surroundings():
    sim = Simulator(plain_scenario(entry_px=(60.0, 120.0)), dt=0.05)
    for _ in range(20):
        sim.advance(Action(v_n_mm_s=10.0))
    f = sim.render()
    ti, tj = int(round(f.tip_img[1])), int(round(f.tip_img[0]))
    patch = f.image[ti - 2:ti + 3, tj - 2:tj + 3]
    ring = f.image[ti - 20:ti + 21, tj - 20:tj + 21]
    assert patch.mean() > ring.mean() + 0.1


def test_render_deterministic_per_seed_and_frame():
    scn = make_scenario(7, "IPS", occlusion="heavy")
    a = Simulator(scn, dt=0.05)
    b = Simulator(scn, dt=0.05)
    act = Action(theta_n_deg=40.0, v_n_mm_s=12.0)
    for _ in range(5):
        fa, fb = a.step(act), b.step(act)
    assert np.array_equal(fa.image, fb.image)
    assert np.array_equal(fa.gt_box, fb.gt_box)
    # different frames differ (speckle is per-frame)
    f5 = a.render()
    f6 = a.step(act)
    assert not np.array_equal(f5.image, f6.image)


def test_out_of_bounds_flagged_and_evented():
    scn = plain_scenario(entry_px=(240.0, 240.0), theta0_deg=45.0)
    sim = Simulator(scn, dt=0.1)
    flagged = False
    for _ in range(40):
        flagged = sim.step(Action(v_n_mm_s=20.0)).out_of_bounds or flagged
    assert flagged
    assert "tip_out_of_bounds" in sim.events
    assert sim.render().visibility == 0.0


def test_image_range_and_dtype_roundtrip():
    scn = make_scenario(3, "IPM", occlusion="light")
    sim = Simulator(scn, dt=0.05)
    f = sim.step(Action(v_n_mm_s=10.0))
    assert f.image.dtype == np.float64
    assert f.image.min() >= 0.0 and f.image.max() <= 1.0
    u8 = frame_to_u8(f.image)
    assert u8.dtype == np.uint8
    back = u8_to_f64(u8)
    assert np.abs(back - f.image).max() <= 0.5 / 255.0 + 1e-12


# -- config validation -------------------------------------------------------


def test_bad_configs_rejected():
    with pytest.raises(ConfigError):
        Occluder(polygon=square(10, 10, 5), attenuation=1.5)
    with pytest.raises(ConfigError):
        PhantomConfig(mm_per_px=0.0)
    with pytest.raises(ConfigError):
        PhantomConfig(target_px=(300.0, 10.0))
    with pytest.raises(ConfigError):
        InsertionScenario(phantom=PhantomConfig(), mode="sideways")
    with pytest.raises(ConfigError):
        Simulator(plain_scenario(), dt=0.0)


def test_make_scenario_reproducible_and_on_ray():
    a = make_scenario(5, "IPS", occlusion="heavy")
    b = make_scenario(5, "IPS", occlusion="heavy")
    assert a.phantom == b.phantom
    assert a.entry_px == b.entry_px and a.theta0_deg == b.theta0_deg
    # target lies on the initial insertion ray
    entry = np.asarray(a.entry_px)
    tgt = np.asarray(a.phantom.target_px)
    rad = math.radians(a.theta0_deg)
    ray = np.array([math.cos(rad), math.sin(rad)])
    d = tgt - entry
    cross = abs(d[0] * ray[1] - d[1] * ray[0])
    assert cross < 1e-9
    assert make_scenario(5, "IPS", occlusion="heavy").phantom.occluders
    assert any(o.osc_period_s > 0 for o in a.phantom.occluders)


def test_make_scenario_modes_and_levels():
    for seed in range(12):
        for mode in ("IPS", "IPM"):
            scn = make_scenario(seed, mode, occlusion="light")
            assert scn.mode == mode
            sim = Simulator(scn, dt=0.05)
            f = sim.render()
            assert f.image.shape == (256, 256)
    none = make_scenario(2, "IPS", occlusion="none")
    assert none.phantom.occluders == ()
    with pytest.raises(ConfigError):
        make_scenario(0, "IPS", occlusion="extreme")
