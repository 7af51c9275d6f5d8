"""Rupture detection, rupture masking and muscle addition for a trained static schema."""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError, UncontrollableJointError
from .schema import (Layout, MaskedAutoencoder, TrainParams, _gd_loop, _static_batches,
                     anomaly_residuals, infer, latent_control)

ARM_EPS = 1e-4


@dataclass(frozen=True)
class AdaptationState:
    healthy: np.ndarray  # rupture mask r, True = healthy
    residual_mean: np.ndarray = None
    residual_std: np.ndarray = None
    streak: np.ndarray = None
    added_muscles: tuple = ()
    events: tuple = ()

    @property
    def calibrated(self):
        return self.residual_mean is not None

    @property
    def rupture_mask(self):
        return self.healthy.astype(int)


def initial_state(n_muscles):
    return AdaptationState(np.ones(n_muscles, dtype=bool), streak=np.zeros(n_muscles, dtype=int))


def calibrate(net, X, state=None):
    """Per-muscle residual statistics on healthy records (typically the training set)."""
    scores = anomaly_residuals(net, X).per_muscle
    mean = scores.mean(axis=0)
    std = scores.std(axis=0)
    std = np.where(std > 0, std, np.maximum(1e-12, 1e-6 * np.abs(mean)))
    state = state or initial_state(net.n_muscles)
    return replace(state, residual_mean=mean, residual_std=std)


def detect_rupture(scores, state, k_sigma=5.0, consecutive_ticks=10, tick=None):
    """Debounced threshold test; returns the updated state (flags are sticky).

    A muscle is flagged once its residual exceeds mean + k_sigma * std on
    ``consecutive_ticks`` successive calls.
    """
    if not state.calibrated:
        raise InvalidInputError("residual statistics are not calibrated")
    scores = np.asarray(scores, dtype=float)
    threshold = state.residual_mean + k_sigma * state.residual_std
    over = scores > threshold
    streak = np.where(over, state.streak + 1, 0)
    newly = state.healthy & (streak >= consecutive_ticks)
    events = state.events
    for i in np.flatnonzero(newly):
        events = events + ({"tick": tick, "muscle": int(i), "residual": float(scores[i]),
                            "threshold": float(threshold[i])},)
    return replace(state, healthy=state.healthy & ~newly, streak=streak, events=events)


def reset_ruptures(state):
    return replace(state, healthy=np.ones_like(state.healthy), streak=np.zeros_like(state.streak))


def write_event_log(path, state):
    with open(path, "w") as fh:
        json.dump(list(state.events), fh, indent=1)


# -- masking --------------------------------------------------------------------

def apply_rupture_mask(x, layout, healthy):
    """Zero the f and l entries of ruptured muscles (a projection: idempotent)."""
    x = np.array(x, dtype=float, copy=True)
    healthy = np.asarray(healthy, dtype=bool)
    for name in ("f", "l"):
        if name in layout:
            x[..., layout[name]] = np.where(healthy, x[..., layout[name]], 0.0)
    return x


def check_controllable(healthy, G=None, eps=ARM_EPS):
    """Every joint must keep at least one healthy muscle with a non-negligible arm."""
    healthy = np.asarray(healthy, dtype=bool)
    if not np.any(healthy):
        raise UncontrollableJointError("every muscle is ruptured")
    if G is None:
        return
    arms = np.abs(np.asarray(G))[healthy]
    bad = np.flatnonzero(~np.any(arms > eps, axis=0))
    if bad.size:
        raise UncontrollableJointError(f"joints {bad.tolist()} have no healthy muscle")


def masked_infer(net, known, m, healthy, G=None):
    check_controllable(healthy, G)
    healthy = np.asarray(healthy, dtype=bool)
    known = {k: (apply_rupture_mask(v, Layout([(k, len(v))]), healthy) if k in ("f", "l") else v)
             for k, v in known.items()}
    r = None if np.all(healthy) else healthy.astype(float)
    return infer(net, known, m, r)


def masked_latent_control(net, x_now, theta_ref, healthy, G=None, **kwargs):
    """latent_control that ignores ruptured muscles and commands them slack."""
    check_controllable(healthy, G)
    healthy = np.asarray(healthy, dtype=bool)
    if not np.all(healthy):
        x_now = apply_rupture_mask(x_now, net.layout, healthy)
    return latent_control(net, x_now, theta_ref, healthy=healthy, **kwargs)


def masked_anomaly(net, x, healthy):
    return anomaly_residuals(net, x, healthy)


# -- muscle addition --------------------------------------------------------------

NEW_WEIGHT_SCALE = 1e-3


def expand_network(net, seed=0, scale=NEW_WEIGHT_SCALE):
    """Copy a static schema into one with an extra muscle slot appended to f and l.

    Old weights are copied exactly; rows and columns touching the new muscle
    start at ``scale``.  The new slot's normalization is the identity, so a
    zero input for the new muscle leaves every old output unchanged.
    """
    lay = net.layout
    N = lay["theta"].stop - lay["theta"].start
    M = net.n_muscles
    new_layout = Layout([("theta", N), ("f", M + 1), ("l", M + 1)])
    out = MaskedAutoencoder(new_layout, net.mask_set, net.hidden, net.latent_index,
                            rupture_input=net.rupture_input, n_muscles=M + 1)
    rng = np.random.default_rng(seed)
    # input rows: theta | f (M) | l (M) | r (M)? | m  -> new entries at end of f, l and r
    at = [N + M, N + 2 * M]
    if net.rupture_input:
        at.append(N + 3 * M)
    W0n = net.weights[0]
    for shift, i in enumerate(at):
        W0n = np.insert(W0n, i + shift, rng.normal(0.0, scale, W0n.shape[1]), axis=0)
    out.weights = [w.copy() for w in net.weights]
    out.biases = [b.copy() for b in net.biases]
    out.weights[0] = W0n
    # output columns: theta | f (M) | l (M)
    WL = net.weights[-1]
    cols = [N + M, N + 2 * M]
    WLn = WL
    bLn = net.biases[-1]
    for shift, i in enumerate(cols):
        WLn = np.insert(WLn, i + shift, rng.normal(0.0, scale, WL.shape[0]), axis=1)
        bLn = np.insert(bLn, i + shift, 0.0)
    out.weights[-1] = WLn
    out.biases[-1] = bLn

    def grow(v, fill):
        return np.insert(np.insert(v, N + M, fill), N + 2 * M + 1, fill)

    out.in_mean, out.in_std = grow(net.in_mean, 0.0), grow(net.in_std, 1.0)
    out.out_mean, out.out_std = grow(net.out_mean, 0.0), grow(net.out_std, 1.0)
    out.data_min, out.data_max = grow(net.data_min, 0.0), grow(net.data_max, 0.0)
    return out


def new_parameter_mask(net_expanded):
    """Gradient masks selecting only the parameters created by expand_network."""
    lay = net_expanded.layout
    N = lay["theta"].stop
    M = net_expanded.n_muscles  # already includes the new muscle
    mW = [np.zeros_like(W) for W in net_expanded.weights]
    mb = [np.zeros_like(b) for b in net_expanded.biases]
    rows = [N + M - 1, N + 2 * M - 1]
    if net_expanded.rupture_input:
        rows.append(N + 3 * M - 1)
    mW[0][rows, :] = 1.0
    cols = [N + M - 1, N + 2 * M - 1]
    mW[-1][:, cols] = 1.0
    mb[-1][cols] = 1.0
    return mW, mb


@dataclass
class AddMuscleResult:
    frozen: MaskedAutoencoder  # expanded copy before any retraining
    net: MaskedAutoencoder
    phase1: MaskedAutoencoder = None  # after training the new parameters only
    model: object = None  # morphology including the new muscle
    history_new: list = field(default_factory=list)
    history_all: list = field(default_factory=list)


def add_muscle(net, model, new_muscle, retrain_data, params=None, finetune_epochs=None, seed=0):
    """Grow the schema by one muscle and retrain: new parameters first, then everything at lr/10.

    ``model`` is the morphology before the addition.  ``retrain_data`` holds
    records of the extended plant (new muscle last in f and l).  Old
    normalization is kept; the new slot's statistics come from the
    retraining data.
    """
    params = params or TrainParams()
    X = np.atleast_2d(np.asarray(retrain_data, dtype=float))
    if model is not None and model.n_muscles != net.n_muscles:
        raise InvalidInputError("model and network disagree on the muscle count")
    frozen = expand_network(net, seed)
    if X.shape[1] != frozen.layout.size:
        raise InvalidInputError(f"retraining data has {X.shape[1]} columns, expected {frozen.layout.size}")
    extended = None if model is None else model.with_muscles(list(model.muscles) + [new_muscle])
    work = frozen.copy()
    lay = work.layout
    for idx in (lay["f"].stop - 1, lay["l"].stop - 1):
        col = X[:, idx]
        work.in_mean[idx] = work.out_mean[idx] = col.mean()
        sd = col.std()
        work.in_std[idx] = work.out_std[idx] = sd if sd > 1e-12 else 1.0
        work.data_min[idx] = col.min()
        work.data_max[idx] = col.max()
    rng = np.random.default_rng(params.seed)
    h1 = _gd_loop(work, _static_batches(work, X, params, rng), params, new_parameter_mask(work))
    phase1 = work.copy()
    p2 = replace(params, lr=params.lr / 10, epochs=params.epochs if finetune_epochs is None else finetune_epochs)
    h2 = _gd_loop(work, _static_batches(work, X, p2, rng), p2)
    return AddMuscleResult(frozen, work, phase1, extended, h1, h2)

