import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from myoskel.adaptation import (add_muscle, apply_rupture_mask, calibrate, check_controllable, detect_rupture,
                                expand_network, initial_state, masked_anomaly, masked_infer, masked_latent_control,
                                reset_ruptures, write_event_log)
from myoskel.allocation import AllocationProblem, allocate_exact
from myoskel.errors import InvalidInputError, UncontrollableJointError
from myoskel.fixtures import pin_antagonist
from myoskel.scenario import run_scenario
from myoskel.schema import (TrainParams, anomaly_residuals, forward_masked, infer, latent_control, static_layout,
                            static_schema)
from myoskel.sim import motor_side_length, sample_static_dataset

NOISE = {"l": 1e-5, "f": 0.05, "theta": 1e-3}


def noisy_stream(model, theta, ticks, rng):
    """Sensor records of the plant resting at theta with fresh Gaussian noise each tick."""
    th = np.array([theta])
    prob = AllocationProblem(model.muscle_jacobian(th), -model.gravity_torque(th, (0.0, -9.81, 0.0)),
                             np.full(model.n_muscles, 10.0), model.f_max)
    f = allocate_exact(prob).f
    rest = np.concatenate([th, f, motor_side_length(model, th, f)])
    sig = np.concatenate([[NOISE["theta"]], np.full(model.n_muscles, NOISE["f"]), np.full(model.n_muscles, NOISE["l"])])
    return rest + rng.normal(size=(ticks, rest.size)) * sig


def calibrated(values, mean=1.0, std=0.1):
    s = initial_state(len(values))
    return s.__class__(s.healthy, np.full(len(values), mean), np.full(len(values), std), s.streak)


# -- detection

def test_uncalibrated_detection_is_an_error():
    with pytest.raises(InvalidInputError):
        detect_rupture(np.zeros(3), initial_state(3))


def test_single_spike_is_not_flagged():
    s = calibrated([0, 0, 0])
    for k in range(30):
        s = detect_rupture(np.array([100.0 if k == 5 else 1.0, 1.0, 1.0]), s, tick=k)
    assert s.healthy.all()


def test_flag_after_consecutive_ticks_and_sticky():
    s = calibrated([0, 0])
    for k in range(9):
        s = detect_rupture(np.array([2.0, 1.0]), s, tick=k)
    assert s.healthy.all()
    s = detect_rupture(np.array([2.0, 1.0]), s, tick=9)
    assert list(s.healthy) == [False, True]
    assert s.events[0]["tick"] == 9 and s.events[0]["muscle"] == 0
    s = detect_rupture(np.array([0.0, 1.0]), s, tick=10)
    assert not s.healthy[0]
    assert reset_ruptures(s).healthy.all()


@given(st.lists(st.lists(st.floats(0, 5), min_size=3, max_size=3), min_size=1, max_size=40),
       st.lists(st.floats(0, 5), min_size=3, max_size=3))
def test_detection_monotone_in_residuals(stream, bump):
    low = high = calibrated([0, 0, 0], 1.0, 0.1)
    for scores in stream:
        s = np.array(scores)
        low = detect_rupture(s, low, consecutive_ticks=3)
        high = detect_rupture(s + np.array(bump), high, consecutive_ticks=3)
        assert np.all(high.healthy <= low.healthy)


def test_event_log(tmp_path):
    s = calibrated([0])
    for k in range(10):
        s = detect_rupture(np.array([5.0]), s, tick=k)
    write_event_log(tmp_path / "ev.json", s)
    ev = json.loads((tmp_path / "ev.json").read_text())
    assert set(ev[0]) == {"tick", "muscle", "residual", "threshold"}
    assert ev[0]["threshold"] == pytest.approx(1.5)


def test_healthy_noise_stream_raises_no_flags(rupture_net):
    net, model = rupture_net["net"], rupture_net["model"]
    rng = np.random.default_rng(11)
    flags = 0
    for theta in (0.0, 0.15, 0.3, -0.2, 0.45):  # 5 x 2000 = 10,000 healthy ticks
        state = calibrate(net, noisy_stream(model, theta, 500, rng))
        stream = anomaly_residuals(net, noisy_stream(model, theta, 2000, rng)).per_muscle
        for k, s in enumerate(stream):
            state = detect_rupture(s, state, tick=k)
        flags += int((~state.healthy).sum())
    assert flags == 0


def test_calibrated_stds_positive(rupture_net):
    s = calibrate(rupture_net["net"], rupture_net["train"][:200])
    assert np.all(s.residual_std > 0)


def test_rupture_flagged_within_50_ticks(rupture_net, tmp_path):
    path = tmp_path / "net.json"
    rupture_net["net"].save(path)
    sc = {"morphology": {"fixture": "pin_three_muscle", "args": {"mass": 0.1}}, "duration": 14.0, "dt": 2e-3,
          "noise": NOISE, "plant": {"damping": 0.2}, "theta0": [0.2],
          "controller": {"mode": "schema", "theta_ref": [0.2], "reflex": {"k_msc": 5000},
                         "schema": {"net": str(path), "w_f": 0.0}, "anomaly": {"calibrate_until": 5.0}},
          "timeline": [{"t": 10.0, "event": "rupture", "muscle": 0}]}
    s = run_scenario(sc).summary
    assert s["false_positives"] == 0
    assert [d["muscle"] for d in s["detections"]] == [0]
    assert 0 <= s["detection_latency_ticks"] <= 50


# -- masking

@given(st.lists(st.floats(-10, 10), min_size=7, max_size=7), st.lists(st.booleans(), min_size=3, max_size=3))
def test_masking_is_a_projection(x, healthy):
    lay = static_layout(1, 3)
    once = apply_rupture_mask(np.array(x), lay, healthy)
    assert np.array_equal(apply_rupture_mask(once, lay, healthy), once)
    assert np.array_equal(once[0], x[0])


def test_all_healthy_mask_matches_unmasked_bitwise(rupture_net):
    net = rupture_net["net"]
    x = rupture_net["train"][3]
    h = np.ones(3, dtype=bool)
    a = masked_infer(net, {"f": x[1:4], "l": x[4:]}, (0, 1, 1), h)
    b = infer(net, {"f": x[1:4], "l": x[4:]}, (0, 1, 1))
    assert np.array_equal(a.x, b.x)
    c = masked_latent_control(net, x, [0.3], h, iters=10)
    d = latent_control(net, x, [0.3], iters=10)
    assert np.array_equal(c.command, d.command)
    assert np.array_equal(masked_anomaly(net, x, h).per_muscle, anomaly_residuals(net, x).per_muscle)


def test_ruptured_inputs_do_not_matter(rupture_net):
    net = rupture_net["net"]
    x = rupture_net["train"][7]
    h = np.array([False, True, True])
    y = x.copy()
    y[[1, 4]] += [40.0, 0.05]
    a = masked_infer(net, {"f": x[1:4], "l": x[4:]}, (0, 1, 1), h)
    b = masked_infer(net, {"f": y[1:4], "l": y[4:]}, (0, 1, 1), h)
    assert np.array_equal(a.x, b.x)


def test_aggregate_uses_healthy_muscles_only(rupture_net):
    net = rupture_net["net"]
    x = rupture_net["train"][9]
    h = np.array([True, False, True])
    res = masked_anomaly(net, x, h)
    keep = [0, 1, 3, 4, 6]  # theta, f0, f2, l0, l2
    assert res.aggregate == pytest.approx(np.sqrt(np.mean(res.residual[keep] ** 2)), rel=1e-12)


def test_ruptured_muscle_commanded_slack(rupture_net):
    net = rupture_net["net"]
    x = rupture_net["train"][0]
    res = masked_latent_control(net, x, [0.2], np.array([True, False, True]), iters=5)
    assert res.command[1] == pytest.approx(net.data_max[5] + 0.05)


def test_joint_without_healthy_muscle_is_uncontrollable(rupture_net):
    G = np.array([[0.0], [0.0], [0.02]])  # only the third muscle moves the joint
    with pytest.raises(UncontrollableJointError):
        check_controllable([True, True, False], G)
    with pytest.raises(UncontrollableJointError):
        check_controllable([False, False, False])
    check_controllable([True, False, True], np.array([[0.02], [-0.02], [0.01]]))
    with pytest.raises(UncontrollableJointError):
        masked_latent_control(rupture_net["net"], rupture_net["train"][0], [0.2], np.zeros(3, dtype=bool))


# -- muscle addition

def test_expansion_preserves_old_outputs(static_pin):
    net = static_pin["net"]
    big = expand_network(net)
    X = static_pin["test"][:100]
    Xz = np.column_stack([X[:, :3], np.zeros(len(X)), X[:, 3:], np.zeros(len(X))])
    old_cols = [0, 1, 2, 4, 5]
    for m in net.mask_set:
        a = forward_masked(net, X, m)[1]
        b = forward_masked(big, Xz, m)[1][:, old_cols]
        assert np.max(np.abs(a - b)) <= 1e-6


def test_expansion_rejects_layout_mismatch(static_pin):
    with pytest.raises(InvalidInputError):
        add_muscle(static_pin["net"], pin_antagonist(), pin_antagonist(extra_flexor=True).muscles[2], np.zeros((4, 5)))
    with pytest.raises(InvalidInputError):
        add_muscle(static_schema(1, 3, hidden=(4, 4, 4)), pin_antagonist(), None, np.zeros((4, 9)))


def old_slice_error(net, X, cols):
    """Standardized reconstruction error of the given columns averaged over the mask set."""
    return np.mean([np.mean(((forward_masked(net, X, m)[1][:, cols] - X[:, cols]) / net.out_std[cols]) ** 2)
                    for m in net.mask_set])


@pytest.fixture(scope="module")
def added(static_pin):
    extended = pin_antagonist(extra_flexor=True)
    X = sample_static_dataset(extended, 2500, np.random.default_rng(1))
    res = add_muscle(static_pin["net"], static_pin["model"], extended.muscles[2], X[:2000],
                     TrainParams(epochs=100, lr=5e-2), finetune_epochs=500)
    return res, X[2000:]


def test_added_muscle_length_prediction(added):
    res, test = added
    _, out = forward_masked(res.net, test, (1, 1, 0))
    rmse = np.sqrt(np.mean((out[:, 4:] - test[:, 4:]) ** 2, axis=0))
    assert rmse[2] < 2 * max(rmse[0], rmse[1])
    assert res.model.n_muscles == 3


def test_old_slices_survive_fine_tune(added, static_pin):
    res, test = added
    before = old_slice_error(static_pin["net"], static_pin["test"], [0, 1, 2, 3, 4])
    after = old_slice_error(res.net, test, [0, 1, 2, 4, 5])
    assert after < 1.1 * before


def test_first_phase_touches_new_parameters_only(added, static_pin):
    res, _ = added
    old, p1 = res.frozen, res.phase1
    for k in range(1, len(old.weights) - 1):
        assert np.array_equal(old.weights[k], p1.weights[k])
    keep = [i for i in range(old.weights[0].shape[0]) if i not in (3, 6)]
    assert np.array_equal(old.weights[0][keep], p1.weights[0][keep])
    assert np.array_equal(old.weights[-1][:, [0, 1, 2, 4, 5]], p1.weights[-1][:, [0, 1, 2, 4, 5]])
