"""Policy oracles: expert control law, cloning on a synthetic rule, PAVA."""

import math

import numpy as np
import pytest

from needlebench import tensor as T
from needlebench.policy import (
    CloneConfig,
    ConstantVelocityConfig,
    DemoSet,
    ExpertConfig,
    IsotonicCalibration,
    PolicyInput,
    PolicyNet,
    PolicyNetConfig,
    behavior_clone,
    clone_eval,
    constant_velocity_action,
    expert_action,
    features,
    fit_isotonic,
    visibility_monotonicity,
)
from needlebench.tensor import ConfigError, Tensor


def make_pi(tip=(100.0, 100.0), target=(140.0, 130.0), vis=1.0, mode="IPS",
            reg=0, entry=None):
    # entry defaults to the tip so angle oracles below stay hand-computable
    return PolicyInput(tip_img=np.array(tip), target_img=np.array(target),
                       entry_img=np.array(entry if entry is not None else tip),
                       visibility=vis, mm_per_px=0.5, mode=mode,
                       pooled_register=np.zeros(reg))


# -- expert law ---------------------------------------------------------------


def test_expert_full_visibility_far_from_target():
    a = expert_action(make_pi(vis=1.0))  # dist = 25 mm
    assert a.v_n_mm_s == pytest.approx(20.0)
    assert a.theta_n_deg == pytest.approx(math.degrees(math.atan2(30, 40)))
    assert not a.stop


def test_expert_speed_is_quadratic_in_visibility():
    assert expert_action(make_pi(vis=0.5)).v_n_mm_s == pytest.approx(5.0)
    assert expert_action(make_pi(vis=0.8)).v_n_mm_s == pytest.approx(12.8)


def test_expert_pauses_below_visibility_floor():
    a = expert_action(make_pi(vis=0.19))
    assert a.v_n_mm_s == 0.0
    assert not a.stop  # paused, not finished
    assert expert_action(make_pi(vis=0.2)).v_n_mm_s == pytest.approx(0.8)


def test_expert_stops_inside_radius():
    # dist = hypot(3,0)*0.5 = 1.5 mm <= 2 mm
    a = expert_action(make_pi(tip=(100.0, 100.0), target=(103.0, 100.0)))
    assert a.stop and a.v_n_mm_s == 0.0


def test_expert_taper_caps_speed_near_target():
    # dist = 8 px * 0.5 = 4 mm, inside (2, 6): cap = 1 + 19*(4-2)/4 = 10.5
    a = expert_action(make_pi(tip=(100.0, 100.0), target=(100.0, 108.0), vis=1.0))
    assert a.v_n_mm_s == pytest.approx(10.5)
    # low visibility still wins inside the taper
    a2 = expert_action(make_pi(tip=(100.0, 100.0), target=(100.0, 108.0), vis=0.5))
    assert a2.v_n_mm_s == pytest.approx(5.0)
    # at 6 mm the cap has ramped back to v_max
    a3 = expert_action(make_pi(tip=(100.0, 100.0), target=(100.0, 112.0), vis=1.0))
    assert a3.v_n_mm_s == pytest.approx(20.0)


def test_expert_steering_clamped():
    # target up-left: raw atan2 is negative -> clamp to 15
    a = expert_action(make_pi(tip=(100.0, 100.0), target=(140.0, 90.0)))
    assert a.theta_n_deg == 15.0
    # target nearly straight down -> clamp to 75
    b = expert_action(make_pi(tip=(100.0, 100.0), target=(102.0, 180.0)))
    assert b.theta_n_deg == 75.0


def test_expert_probe_follow_only_in_ipm():
    ips = expert_action(make_pi(tip=(160.0, 100.0), target=(200.0, 130.0)))
    assert ips.v_p_mm_s == (0.0, 0.0, 0.0)
    ipm = expert_action(make_pi(tip=(160.0, 100.0), target=(200.0, 130.0),
                                mode="IPM"))
    # err 32 px -> 0.5 gain * 32 px * 0.5 mm/px = 8 mm/s toward centering
    assert ipm.v_p_mm_s[0] == pytest.approx(8.0)


def test_constant_velocity_ignores_visibility():
    lo = constant_velocity_action(make_pi(vis=0.01))
    hi = constant_velocity_action(make_pi(vis=1.0))
    assert lo.v_n_mm_s == hi.v_n_mm_s == 10.0
    near = constant_velocity_action(
        make_pi(tip=(100.0, 100.0), target=(103.0, 100.0), vis=0.0))
    assert near.stop


# -- features -----------------------------------------------------------------


def test_feature_vector_layout():
    x = features(make_pi(reg=3))
    assert x.shape == (12,)
    assert x[0] == pytest.approx(2.0)  # dx 20 mm / 10
    assert x[1] == pytest.approx(1.5)  # dy 15 mm / 10
    assert x[2] == pytest.approx(2.5)  # dist 25 mm / 10
    assert x[3] == 1.0
    assert x[5] == pytest.approx(x[4])  # entry == tip: aim angle == tip angle
    assert x[6] == 0.0  # tip sits on the entry->target line
    assert x[7] == 0.0
    assert np.all(x[9:] == 0.0)
    x_ipm = features(make_pi(mode="IPM"))
    assert x_ipm[7] == 1.0
    # tip displaced off the aim line: signed perpendicular offset in mm
    x_off = features(make_pi(tip=(100.0, 110.0), entry=(100.0, 100.0),
                             target=(120.0, 100.0)))
    assert x_off[6] == pytest.approx(10.0 * 0.5 / 10.0)
    reg = np.arange(4.0)
    pi = PolicyInput(tip_img=np.zeros(2), target_img=np.ones(2),
                     entry_img=np.zeros(2),
                     visibility=0.5, mm_per_px=0.5, mode="IPS",
                     pooled_register=reg)
    assert np.array_equal(features(pi)[-4:], reg)


# -- policy net ----------------------------------------------------------------


def test_untrained_policy_refuses_to_act():
    net = PolicyNet(PolicyNetConfig(in_dim=9, seed=0))
    with pytest.raises(ConfigError):
        net.act(make_pi())


def test_policy_heads_respect_ranges():
    net = PolicyNet(PolicyNetConfig(in_dim=9, seed=0))
    net.trained = True
    r = np.random.default_rng(0)
    for _ in range(50):
        pi = make_pi(tip=r.uniform(0, 255, 2), target=r.uniform(0, 255, 2),
                     vis=float(r.uniform()), mode="IPM" if r.uniform() < 0.5 else "IPS")
        a = net.act(pi)
        assert 0.0 <= a.v_n_mm_s <= 20.0
        assert 15.0 <= a.theta_n_deg <= 75.0
        assert abs(a.v_p_mm_s[0]) <= 10.0
        if pi.mode == "IPS":
            assert a.v_p_mm_s == (0.0, 0.0, 0.0)


def test_policy_stop_head_triggers_stop_action():
    net = PolicyNet(PolicyNetConfig(in_dim=9, seed=0))
    net.trained = True
    net.params["policy/w3"].data[:, 3] = 0.0
    net.params["policy/b3"].data[3] = 10.0  # sigmoid ~ 1
    a = net.act(make_pi())
    assert a.stop and a.v_n_mm_s == 0.0


def test_policy_feature_length_guard():
    net = PolicyNet(PolicyNetConfig(in_dim=9, seed=0))
    net.trained = True
    with pytest.raises(ConfigError):
        net.act(make_pi(reg=5))


def test_policy_load_state_marks_trained():
    net = PolicyNet(PolicyNetConfig(in_dim=9, seed=1))
    state = {k: p.data.copy() for k, p in net.parameters().items()}
    net2 = PolicyNet(PolicyNetConfig(in_dim=9, seed=2))
    net2.load_state(state)
    assert net2.trained
    assert np.array_equal(net2.params["policy/w1"].data, state["policy/w1"])
    with pytest.raises(ConfigError):
        net2.load_state({k: v for k, v in state.items() if "w1" not in k})


# -- behavior cloning on a synthetic rule ----------------------------------------


def synthetic_demos(n_trials=10, per_trial=60, seed=0):
    """Expert-like targets that are pure functions of the features."""
    r = np.random.default_rng(seed)
    parts = []
    for t in range(n_trials):
        dist = r.uniform(0.5, 40.0, size=per_trial)  # mm
        vis = r.uniform(0.0, 1.0, size=per_trial)
        ang = r.uniform(15.0, 75.0, size=per_trial)
        rad = np.radians(ang)
        tip = np.tile(np.array([100.0, 100.0]), (per_trial, 1))
        tgt = tip + (dist[:, None] / 0.5) * np.stack(
            [np.cos(rad), np.sin(rad)], axis=1)
        stop = (dist <= 2.0).astype(np.float64)
        v = np.where(vis >= 0.2, 20.0 * vis ** 2, 0.0)
        cap = 1.0 + 19.0 * (dist - 2.0) / 4.0
        v = np.where((dist > 2.0) & (dist < 6.0), np.minimum(v, cap), v)
        v = np.where(stop > 0.5, 0.0, v)
        x = np.stack([
            features(PolicyInput(tip_img=tip[i], target_img=tgt[i],
                                 entry_img=tip[i],
                                 visibility=float(vis[i]), mm_per_px=0.5,
                                 mode="IPS"))
            for i in range(per_trial)])
        parts.append(DemoSet(x=x, v=v, theta=ang, vp=np.zeros(per_trial),
                             stop=stop, trial_id=np.full(per_trial, t)))
    return DemoSet.concat(parts)


@pytest.fixture(scope="module")
def cloned():
    demos = synthetic_demos()
    net = PolicyNet(PolicyNetConfig(in_dim=9, hidden=48, seed=0))
    metrics = behavior_clone(net, demos, CloneConfig(epochs=40, seed=0))
    return net, metrics


def test_cloning_learns_the_rule(cloned):
    net, m = cloned
    assert net.trained
    assert m["v_rmse_mm_s"] < 2.0  # 10% of v_max on a clean synthetic rule
    assert m["stop_recall"] >= 0.9
    assert m["pearson_r"] > 0.9


def test_clone_loss_strictly_decreases_early(cloned):
    _, m = cloned
    losses = m["epoch_losses"]
    assert len(losses) == 40
    assert all(b < a for a, b in zip(losses[:10], losses[1:11]))


def test_cloned_policy_monotone_in_visibility(cloned):
    net, _ = cloned
    contexts = [make_pi(target=(100.0 + d / 0.5, 100.0)) for d in (10.0, 20.0, 35.0)]
    assert visibility_monotonicity(net, contexts) >= 0.9


def test_clone_eval_counts(cloned):
    net, m = cloned
    assert m["n_val"] > 0
    again = clone_eval(net, synthetic_demos(n_trials=2, seed=99))
    assert set(again) == {"v_rmse_mm_s", "stop_recall", "stop_precision",
                          "pearson_r", "n_val"}


def test_demoset_subset_and_concat():
    d = synthetic_demos(n_trials=3, per_trial=10)
    assert d.n == 30
    sub = d.subset(d.trial_id == 1)
    assert sub.n == 10 and np.all(sub.trial_id == 1)
    back = DemoSet.concat([d.subset(d.trial_id == t) for t in range(3)])
    assert back.n == 30
    assert np.array_equal(np.sort(back.v), np.sort(d.v))


# -- isotonic calibration ---------------------------------------------------------


def test_pava_pools_violators():
    cal = fit_isotonic(np.array([0.1, 0.2, 0.3, 0.4]),
                       np.array([0.0, 0.3, 0.2, 0.9]))
    # the 0.3/0.2 violator pair pools to 0.25 at x = 0.25
    assert cal(0.25) == pytest.approx(0.25)
    assert cal(0.1) == pytest.approx(0.0)
    assert cal(0.4) == pytest.approx(0.9)
    assert cal(0.0) == pytest.approx(0.0)  # clamps left
    assert cal(1.0) == pytest.approx(0.9)  # clamps right
    assert cal(0.175) == pytest.approx(0.125)


def test_pava_monotone_data_is_exact_at_knots():
    x = np.array([0.1, 0.3, 0.5, 0.9])
    y = np.array([0.05, 0.2, 0.6, 0.95])
    cal = fit_isotonic(x, y)
    for xi, yi in zip(x, y):
        assert cal(float(xi)) == pytest.approx(float(yi))


def test_calibration_output_monotone():
    r = np.random.default_rng(4)
    raw = r.uniform(0, 1, 400)
    vis = np.clip(raw ** 2 + r.normal(0, 0.05, 400), 0, 1)
    cal = fit_isotonic(raw, vis)
    grid = np.linspace(0, 1, 101)
    out = np.array([cal(g) for g in grid])
    assert np.all(np.diff(out) >= -1e-12)
    assert np.all((out >= 0) & (out <= 1))


def test_calibration_reduces_error_vs_identity():
    r = np.random.default_rng(7)
    vis = r.uniform(0, 1, 500)
    raw = 1.0 / (1.0 + np.exp(-4.0 * (vis - 0.5)))  # monotone distortion
    cal = fit_isotonic(raw[:400], vis[:400])
    held_raw, held_vis = raw[400:], vis[400:]
    mae_cal = np.mean([abs(cal(x) - v) for x, v in zip(held_raw, held_vis)])
    mae_raw = np.mean(np.abs(held_raw - held_vis))
    assert mae_cal < 0.05
    assert mae_cal < mae_raw


def test_calibration_state_roundtrip():
    cal = fit_isotonic(np.array([0.1, 0.5, 0.9]), np.array([0.2, 0.5, 0.8]))
    clone = IsotonicCalibration.from_state(cal.state())
    for g in np.linspace(0, 1, 11):
        assert clone(g) == cal(g)
    with pytest.raises(ConfigError):
        IsotonicCalibration(np.array([0.5, 0.1]), np.array([0.1, 0.5]))
    with pytest.raises(ConfigError):
        fit_isotonic(np.array([0.1]), np.array([0.1]))
