import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from myoskel.errors import InvalidInputError, TrainingError
from myoskel.fixtures import pin_antagonist
from myoskel.scenario import run_scenario
from myoskel.schema import (MaskedAutoencoder, ReplayBuffer, TrainParams, anomaly_residuals, anomaly_score,
                            dynamic_control, dynamic_predict, forward_masked, infer, latent_control, loss_and_grad,
                            online_update, read_dataset, static_layout, static_schema, train_static, write_dataset)
from myoskel.sim import sample_static_dataset

THETA_FROM_FL = (0, 1, 1)
L_FROM_THETA_F = (1, 1, 0)


def theta_rmse(net, X):
    _, out = forward_masked(net, X, THETA_FROM_FL)
    return float(np.sqrt(np.mean((out[:, 0] - X[:, 0]) ** 2)))


# -- forward pass

def test_zero_weight_net_outputs_biases():
    net = static_schema(1, 2, hidden=(8, 8, 8)).zero_weights()
    _, out = forward_masked(net, np.array([0.3, 5.0, 6.0, 0.2, 0.21]), (1, 1, 1))
    assert np.array_equal(out, np.zeros(5))


def test_forward_is_deterministic(static_pin):
    x = static_pin["test"][0]
    a = forward_masked(static_pin["net"], x, L_FROM_THETA_F)
    b = forward_masked(static_pin["net"], x, L_FROM_THETA_F)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_forward_rejects_wrong_dims():
    net = static_schema(1, 2, hidden=(8, 8, 8))
    with pytest.raises(InvalidInputError):
        forward_masked(net, np.zeros(4), (1, 1, 1))
    with pytest.raises(InvalidInputError):
        forward_masked(net, np.zeros(5), (1, 1))


def test_length_recovered_from_posture_and_tension(static_pin):
    X = static_pin["test"]
    _, out = forward_masked(static_pin["net"], X, L_FROM_THETA_F)
    rmse = np.sqrt(np.mean((out[:, 3:] - X[:, 3:]) ** 2))
    assert rmse < 1e-3  # m; the lengths span about 40 mm


@given(st.integers(0, 2), st.integers(0, 10_000))
def test_masked_slice_is_never_read(hidden, seed):
    net = static_schema(1, 2, hidden=(16, 16, 16), seed=seed % 7)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=5)
    m = [1, 1, 1]
    m[hidden] = 0
    y = x.copy()
    y[net.layout[net.layout.names[hidden]]] += rng.normal(size=net.layout.items[hidden][1]) * 10
    assert np.array_equal(forward_masked(net, x, m)[1], forward_masked(net, y, m)[1])


# -- gradients

def mlp_loss(weights, biases, a0, target):
    """Independent forward pass: tanh hidden layers, identity output, mean squared error."""
    a = a0
    for k, (W, b) in enumerate(zip(weights, biases)):
        a = a @ W + b
        if k < len(weights) - 1:
            a = np.tanh(a)
    return np.mean((a - target) ** 2)


@pytest.mark.parametrize("seed", range(5))
def test_backprop_matches_central_differences(seed):
    rng = np.random.default_rng(seed)
    n_j, n_m = rng.integers(1, 3), rng.integers(2, 4)
    hidden = tuple(int(h) for h in rng.integers(3, 9, 3))
    net = static_schema(int(n_j), int(n_m), hidden=hidden, seed=seed)
    for b in net.biases:
        b[...] = rng.normal(0, 0.3, b.shape)
    a0 = rng.normal(size=(6, net.in_dim))
    target = rng.normal(size=(6, net.out_layout.size))
    _, gW, gb = loss_and_grad(net, a0, target)
    h = 1e-6
    for analytic, params in ((gW, net.weights), (gb, net.biases)):
        for G, P in zip(analytic, params):
            fd = np.zeros_like(P)
            for idx in np.ndindex(P.shape):
                old = P[idx]
                P[idx] = old + h
                lp = mlp_loss(net.weights, net.biases, a0, target)
                P[idx] = old - h
                lm = mlp_loss(net.weights, net.biases, a0, target)
                P[idx] = old
                fd[idx] = (lp - lm) / (2 * h)
            assert np.linalg.norm(G - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


# -- training

def test_held_out_theta_rmse(static_pin):
    assert theta_rmse(static_pin["net"], static_pin["test"]) < 0.03


def test_single_repeated_sample_is_memorized():
    x = np.array([0.3, 5.0, 6.0, 0.2, 0.21])
    res = train_static(static_schema(1, 2, hidden=(16, 16, 16)), np.tile(x, (64, 1)),
                       TrainParams(epochs=1000, lr=1e-2))
    assert res.history[-1] < 1e-5
    assert res.history[-1] < 1e-4 * res.history[0]


def test_training_is_bit_reproducible():
    X = sample_static_dataset(pin_antagonist(), 200, np.random.default_rng(3))
    p = TrainParams(epochs=5, seed=11)
    a = train_static(static_schema(1, 2, hidden=(16, 16, 16), seed=2), X, p).net
    b = train_static(static_schema(1, 2, hidden=(16, 16, 16), seed=2), X, p).net
    for Wa, Wb in zip(a.weights + a.biases, b.weights + b.biases):
        assert np.array_equal(Wa, Wb)


def test_training_rejects_empty_and_misshaped_data():
    net = static_schema(1, 2, hidden=(8, 8, 8))
    with pytest.raises(InvalidInputError):
        train_static(net, np.zeros((0, 5)))
    with pytest.raises(InvalidInputError):
        train_static(net, np.zeros((3, 4)))


def test_non_finite_loss_aborts():
    X = sample_static_dataset(pin_antagonist(), 64, np.random.default_rng(0))
    with pytest.raises(TrainingError):
        train_static(static_schema(1, 2, hidden=(8, 8, 8)), X, TrainParams(epochs=50, lr=1e6))


# -- inference

def test_infer_recovers_theta_from_tension_and_length(static_pin):
    net = static_pin["net"]
    errs = []
    for x in static_pin["test"][:100]:
        res = infer(net, {"f": x[1:3], "l": x[3:]}, THETA_FROM_FL)
        assert res.status == "ok"
        errs.append(res.parts["theta"][0] - x[0])
    assert np.sqrt(np.mean(np.square(errs))) < 0.03


def test_full_mask_reconstruction_below_anomaly_threshold(static_pin):
    net, X = static_pin["net"], static_pin["train"]
    agg = anomaly_residuals(net, X).aggregate
    threshold = agg.mean() + 3 * agg.std()
    _, out = forward_masked(net, X, (1, 1, 1))
    rec = np.sqrt(np.mean(((out - X) / net.out_std) ** 2, axis=1))
    assert np.all(rec < threshold)


def test_unknown_mask_evaluates_with_warning(static_pin):
    x = static_pin["test"][0]
    res = infer(static_pin["net"], {"theta": x[:1]}, (1, 0, 0))
    assert res.status == "mask_not_in_set"
    assert np.all(np.isfinite(res.x))


def test_missing_known_slice_is_rejected(static_pin):
    with pytest.raises(InvalidInputError):
        infer(static_pin["net"], {"f": np.ones(2)}, THETA_FROM_FL)


def test_contradictory_knowns_raise_residual(static_pin):
    net, X = static_pin["net"], static_pin["test"]
    # tensions and lengths from postures at least 0.3 rad apart
    a, b = X[:200], X[200:400]
    far = np.abs(a[:, 0] - b[:, 0]) > 0.3
    mixed = np.hstack([a[:, :3], b[:, 3:]])[far]
    assert far.sum() > 20
    assert np.median(anomaly_score(net, mixed)) > 3 * np.median(anomaly_score(net, a[far]))


# -- anomaly scores

def test_training_samples_score_below_threshold(static_pin):
    net = static_pin["net"]
    train = anomaly_residuals(net, static_pin["train"]).aggregate
    threshold = train.mean() + 3 * train.std()
    held = anomaly_score(net, static_pin["test"])
    assert np.mean(held < threshold) >= 0.95


def test_zeroed_tension_singles_out_muscle(static_pin):
    net, X = static_pin["net"], static_pin["test"]
    base = anomaly_residuals(net, static_pin["train"]).per_muscle.mean(axis=0)
    for i in range(2):
        bad = X.copy()
        bad[:, 1 + i] = 0.0
        per = anomaly_residuals(net, bad).per_muscle
        assert np.median(per[:, i]) > 5 * base[i]


def test_score_zero_iff_perfect_reconstruction():
    net = static_schema(1, 2, hidden=(8, 8, 8)).zero_weights()
    net.out_mean = np.array([0.1, 4.0, 5.0, 0.2, 0.19])
    assert anomaly_score(net, net.out_mean.copy()) == 0.0
    off = net.out_mean.copy()
    off[2] += 1e-3
    assert anomaly_score(net, off) > 0.0


# -- latent control

def test_latent_control_holds_current_posture(static_pin):
    # posture term only: a tension penalty would legitimately relax co-contraction
    net = static_pin["net"]
    for x in static_pin["test"][:20]:
        res = latent_control(net, x, x[:1], w_f=0.0, iters=50)
        assert np.max(np.abs(res.command - x[3:])) < 1e-3


@given(st.floats(-0.9, 0.9), st.integers(0, 499))
def test_latent_objective_non_increasing(static_pin, theta_ref, row):
    res = latent_control(static_pin["net"], static_pin["test"][row], [theta_ref], iters=20)
    assert np.all(np.diff(res.objective) <= 0)


def test_latent_control_needs_an_iteration(static_pin):
    with pytest.raises(InvalidInputError):
        latent_control(static_pin["net"], static_pin["test"][0], [0.0], iters=0)


def test_latent_command_moves_plant_toward_target(static_pin, tmp_path):
    path = tmp_path / "net.json"
    static_pin["net"].save(path)
    sc = {"morphology": "pin_antagonist", "duration": 5.0, "theta0": [0.0],
          "controller": {"mode": "schema", "theta_ref": [0.3], "schema": {"net": str(path)}}}
    res = run_scenario(sc)
    theta = res.rows[-1][res.header.index("theta_0")]
    assert abs(theta - 0.3) < 0.1


# -- dynamic schema

def test_dynamic_predict_rejects_wrong_dims(contact_dynamics):
    with pytest.raises(InvalidInputError):
        dynamic_predict(contact_dynamics["net"], np.zeros(6), np.zeros(3))


def test_dynamic_one_step_theta_rmse(contact_dynamics):
    X, D, Y = contact_dynamics["test"]
    P = dynamic_predict(contact_dynamics["net"], X, D)
    assert np.sqrt(np.mean((P[:, 0] - Y[:, 0]) ** 2)) < 0.01


def test_dynamic_rollout_stays_bounded(contact_dynamics):
    net = contact_dynamics["net"]
    X, D, _ = contact_dynamics["test"]
    dt = contact_dynamics["schema_dt"]
    events = np.array(contact_dynamics["events"])
    errs = []
    for s in range(0, len(X) - 10, 5):
        # the contact angle is not part of the state, so skip windows that span a change
        if np.any((events >= (s - 1) * dt) & (events <= (s + 11) * dt)):
            continue
        x = X[s]
        step_errs = []
        for j in range(10):
            x = dynamic_predict(net, x, D[s + j])
            step_errs.append(abs(x[0] - X[s + j + 1][0]))
        errs.append(step_errs)
    errs = np.array(errs)
    assert len(errs) > 40
    assert errs.max() < 0.1
    assert errs[:, -1].mean() > errs[:, 0].mean()  # error grows with the horizon


def test_zero_command_at_equilibrium_stays_put(contact_dynamics):
    from trained import CONTACT_BASE, transitions
    sc = dict(CONTACT_BASE, duration=6.0, controller={"mode": "length", "theta_ref": [0.4], "excitation": {"sigma": 0.0}})
    X, D, _ = transitions(run_scenario(sc))
    X, D = X[-20:], D[-20:]
    assert np.all(D == 0)
    P = dynamic_predict(contact_dynamics["net"], X, D)
    assert np.max(np.abs(P[:, 0] - X[:, 0])) < 0.01
    assert np.max(np.abs(P[:, -1] - X[:, -1])) < 0.1


def test_dynamic_control_matched_target_needs_no_command(contact_dynamics):
    from trained import CONTACT_BASE, transitions
    sc = dict(CONTACT_BASE, duration=6.0, controller={"mode": "length", "theta_ref": [0.4], "excitation": {"sigma": 0.0}})
    X, _, _ = transitions(run_scenario(sc))
    net, x = contact_dynamics["net"], X[-1]
    free = [x]
    for _ in range(5):
        free.append(dynamic_predict(net, free[-1], np.zeros(2)))
    target = np.mean([s[-1] for s in free[1:]])
    res = dynamic_control(net, x, target, horizon=5, iters=20, dl_bound=5e-4)
    assert np.max(np.abs(res.command)) < 1e-3


@given(st.floats(0.0, 1.0), st.integers(0, 399))
def test_dynamic_objective_non_increasing(contact_dynamics, target, row):
    X = contact_dynamics["test"][0]
    res = dynamic_control(contact_dynamics["net"], X[row], target, horizon=4, iters=10, dl_bound=5e-4)
    assert np.all(np.diff(res.objective) <= 0)
    assert np.all(np.abs(res.command) <= 5e-4)


def test_dynamic_control_needs_a_horizon(contact_dynamics):
    with pytest.raises(InvalidInputError):
        dynamic_control(contact_dynamics["net"], np.zeros(6), 0.0, horizon=0)


# -- online update

def test_zero_rate_leaves_weights(static_pin):
    net = static_pin["net"]
    buf = ReplayBuffer(5)
    out = online_update(net, buf, static_pin["test"][0], 0.0, steps=3).net
    for a, b in zip(net.weights, out.weights):
        assert np.array_equal(a, b)
    assert len(buf) == 1


def test_online_stream_lowers_held_out_error():
    model = pin_antagonist()
    rng = np.random.default_rng(4)
    X = sample_static_dataset(model, 400, rng)
    net = train_static(static_schema(1, 2, seed=0), X[:200], TrainParams(epochs=5, lr=1e-3)).net
    stream = sample_static_dataset(model, 100, rng)
    buf = ReplayBuffer(5)
    errs = []
    urng = np.random.default_rng(0)
    for x in stream:
        net = online_update(net, buf, x, 1e-2, steps=1, rng=urng).net
        errs.append(theta_rmse(net, X[200:]))
    avg = np.convolve(errs, np.ones(10) / 10, mode="valid")
    assert avg[-1] < avg[0]
    assert np.mean(np.diff(avg) <= 1e-12) > 0.5


def test_online_update_recovers_from_moved_attachment(static_pin):
    net = static_pin["net"]
    rng = np.random.default_rng(5)
    moved = pin_antagonist(r=0.025)  # via-points 5 mm further from the axis
    original = theta_rmse(net, sample_static_dataset(pin_antagonist(), 300, rng))
    test = sample_static_dataset(moved, 300, rng)
    before = theta_rmse(net, test)
    buf = ReplayBuffer(5)
    urng = np.random.default_rng(0)
    for x in sample_static_dataset(moved, 500, rng):
        net = online_update(net, buf, x, 1e-2, steps=4, rng=urng).net
    after = theta_rmse(net, test)
    assert before > 2 * original
    assert after < 2 * original


def test_online_update_skips_non_finite_loss(static_pin):
    net = static_pin["net"]
    buf = ReplayBuffer(5)
    res = online_update(net, buf, np.full(5, np.nan), 1e-2)
    assert res.skipped and res.net is net


def test_replay_buffer_overwrites_oldest():
    buf = ReplayBuffer(1, capacity=40)
    for v in range(100):
        buf.append([v])
    assert len(buf) == 40
    assert sorted(buf.data[:, 0]) == list(range(60, 100))
    with pytest.raises(InvalidInputError):
        online_update(static_schema(1, 2, hidden=(4, 4, 4)), ReplayBuffer(5, capacity=8), np.zeros(5), 1e-2)


# -- files

def test_network_round_trip(static_pin, tmp_path):
    net = static_pin["net"]
    net.save(tmp_path / "n.json")
    back = MaskedAutoencoder.load(tmp_path / "n.json")
    X = static_pin["test"][:50]
    for m in net.mask_set:
        assert np.max(np.abs(forward_masked(net, X, m)[1] - forward_masked(back, X, m)[1])) <= 1e-12


def test_network_version_is_checked(static_pin, tmp_path):
    d = static_pin["net"].to_dict()
    d["version"] = 99
    (tmp_path / "n.json").write_text(json.dumps(d))
    with pytest.raises(InvalidInputError):
        MaskedAutoencoder.load(tmp_path / "n.json")


def test_dataset_round_trip(tmp_path):
    lay = static_layout(1, 2)
    X = np.random.default_rng(0).normal(size=(7, 5))
    write_dataset(tmp_path / "d.csv", lay, X)
    header, Y = read_dataset(tmp_path / "d.csv", lay)
    assert header == ["theta0", "f0", "f1", "l0", "l1"]
    assert np.array_equal(X, Y)
    with pytest.raises(InvalidInputError):
        read_dataset(tmp_path / "d.csv", static_layout(2, 2))
