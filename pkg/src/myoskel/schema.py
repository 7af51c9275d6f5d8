"""Learned body schemas: a masked autoencoder over sensor slices.

The static schema relates joint angles, tensions and lengths (theta, f, l).
Slices hidden by the mask ``m`` are zeroed after standardization and ``m``
itself is appended to the input, so one network serves every inference
direction (theta from (f, l), l from (theta, f), ...).  The dynamic schema
uses the same network class as a one-step model
x_{t+1} = h(x_t, dl_ref).

Everything is plain numpy with hand-written backpropagation; weights are
drawn from a seeded generator so training is reproducible bit for bit.
"""

import copy
import csv
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, TrainingError, UncontrollableJointError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
SLACK_MARGIN = 0.05  # m beyond the longest length seen in training


class Layout:
    """Named, contiguous slices of a flat vector."""

    def __init__(self, items):
        self.items = tuple((str(n), int(k)) for n, k in items)
        if any(k <= 0 for _, k in self.items):
            raise InvalidInputError("slice sizes must be positive")
        self._slices = {}
        start = 0
        for name, k in self.items:
            if name in self._slices:
                raise InvalidInputError(f"duplicate slice name {name!r}")
            self._slices[name] = slice(start, start + k)
            start += k
        self.size = start

    @property
    def names(self):
        return tuple(n for n, _ in self.items)

    def __getitem__(self, name):
        return self._slices[name]

    def __contains__(self, name):
        return name in self._slices

    def __eq__(self, other):
        return isinstance(other, Layout) and self.items == other.items

    def column_names(self):
        return [f"{n}{i}" for n, k in self.items for i in range(k)]

    def expand(self, m):
        """Per-element 0/1 vector (or rows, for a batch of masks) from a per-slice mask."""
        m = np.asarray(m, dtype=float)
        return np.repeat(m, [k for _, k in self.items], axis=-1)

    def split(self, x):
        return {n: x[..., self[n]] for n in self.names}

    def join(self, parts):
        return np.concatenate([np.asarray(parts[n], dtype=float) for n in self.names], axis=-1)


def static_layout(n_joints, n_muscles):
    return Layout([("theta", n_joints), ("f", n_muscles), ("l", n_muscles)])


STATIC_MASKS = ((1, 1, 0), (1, 0, 1), (0, 1, 1), (1, 1, 1))


class MaskedAutoencoder:
    """tanh MLP x_in (+ mask, + rupture bits) -> z -> x_out with stored standardization.

    ``latent_index`` picks which hidden layer is the latent code z; layers up
    to and including it form the encoder.  With ``residual`` the network
    predicts x_out - x_in[out slices] (used for one-step dynamics).
    """

    def __init__(self, layout, mask_set, hidden=(64, 64, 64), latent_index=1, out_layout=None,
                 rupture_input=False, residual=False, seed=0, n_muscles=None):
        self.layout = layout
        self.out_layout = out_layout or layout
        self.mask_set = tuple(tuple(int(v) for v in m) for m in mask_set)
        for m in self.mask_set:
            if len(m) != len(layout.items):
                raise InvalidInputError("mask length must equal the number of input slices")
        self.hidden = tuple(int(h) for h in hidden)
        self.latent_index = int(latent_index)
        if not 0 <= self.latent_index < len(self.hidden):
            raise InvalidInputError("latent_index must point at a hidden layer")
        self.rupture_input = bool(rupture_input)
        self.residual = bool(residual)
        if n_muscles is None:
            n_muscles = layout["f"].stop - layout["f"].start if "f" in layout else 0
        self.n_muscles = int(n_muscles)
        self.in_dim = layout.size + len(layout.items) + (self.n_muscles if self.rupture_input else 0)
        dims = (self.in_dim,) + self.hidden + (self.out_layout.size,)
        rng = np.random.default_rng(seed)
        self.weights = [rng.normal(0.0, np.sqrt(1.0 / a), (a, b)) for a, b in zip(dims[:-1], dims[1:])]
        self.biases = [np.zeros(b) for b in dims[1:]]
        self.in_mean = np.zeros(layout.size)
        self.in_std = np.ones(layout.size)
        self.out_mean = np.zeros(self.out_layout.size)
        self.out_std = np.ones(self.out_layout.size)
        self.data_min = np.zeros(layout.size)
        self.data_max = np.zeros(layout.size)

    @property
    def dims(self):
        return (self.in_dim,) + self.hidden + (self.out_layout.size,)

    def copy(self):
        return copy.deepcopy(self)

    def zero_weights(self):
        for W, b in zip(self.weights, self.biases):
            W[...] = 0.0
            b[...] = 0.0
        return self

    # -- normalization --------------------------------------------------------

    def fit_normalization(self, X_in, Y_out=None):
        X_in = np.atleast_2d(X_in)
        self.in_mean = X_in.mean(axis=0)
        self.in_std = _safe_std(X_in)
        self.data_min = X_in.min(axis=0)
        self.data_max = X_in.max(axis=0)
        if Y_out is None:
            Y_out = X_in[:, [i for n in self.out_layout.names for i in range(self.layout[n].start, self.layout[n].stop)]]
        Y_out = np.atleast_2d(Y_out)
        self.out_mean = Y_out.mean(axis=0)
        self.out_std = _safe_std(Y_out)

    # -- forward --------------------------------------------------------------

    def muscle_columns(self, name):
        """Flat input indices of a per-muscle slice."""
        s = self.layout[name]
        return np.arange(s.start, s.stop)

    def encode_input(self, x_in, m, r=None):
        """Standardize, zero masked slices and ruptured muscles, append r and m."""
        x_in = np.atleast_2d(np.asarray(x_in, dtype=float))
        if x_in.shape[-1] != self.layout.size:
            raise InvalidInputError(f"input has {x_in.shape[-1]} entries, layout needs {self.layout.size}")
        m = np.asarray(m, dtype=float)
        if m.shape[-1] != len(self.layout.items):
            raise InvalidInputError("mask length must equal the number of input slices")
        m = np.broadcast_to(m, x_in.shape[:-1] + (m.shape[-1],))
        xs = (x_in - self.in_mean) / self.in_std * self.layout.expand(m)
        parts = [xs]
        if self.rupture_input:
            r = np.ones(self.n_muscles) if r is None else np.asarray(r, dtype=float)
            r = np.broadcast_to(r, x_in.shape[:-1] + (self.n_muscles,))
            keep = np.ones_like(xs)
            for name in ("f", "l"):
                if name in self.layout:
                    keep[..., self.layout[name]] = r
            parts = [xs * keep, r]
        elif r is not None and np.any(np.asarray(r) == 0):
            r = np.broadcast_to(np.asarray(r, dtype=float), x_in.shape[:-1] + (self.n_muscles,))
            for name in ("f", "l"):
                if name in self.layout:
                    xs[..., self.layout[name]] *= r
        parts.append(m)
        return np.concatenate(parts, axis=-1)

    def forward_std(self, a0):
        """Activations of every layer for standardized network input a0 (batch, in_dim)."""
        acts = [a0]
        a = a0
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ W + b
            if k < last:
                a = np.tanh(a)
            acts.append(a)
        return acts

    def decode_output(self, y_std, x_in=None):
        y = y_std * self.out_std + self.out_mean
        if self.residual:
            y = y + self._carry(x_in)
        return y

    def _carry(self, x_in):
        x_in = np.atleast_2d(x_in)
        return np.concatenate([x_in[..., self.layout[n]] for n in self.out_layout.names], axis=-1)

    def decode_latent(self, z):
        """Run the decoder from latent codes z; returns standardized output and activations."""
        acts = [np.atleast_2d(z)]
        a = acts[0]
        last = len(self.weights) - 1
        for k in range(self.latent_index + 1, len(self.weights)):
            a = a @ self.weights[k] + self.biases[k]
            if k < last:
                a = np.tanh(a)
            acts.append(a)
        return acts

    # -- serialization ----------------------------------------------------------

    def to_dict(self):
        return {
            "version": FORMAT_VERSION,
            "layout": [list(it) for it in self.layout.items],
            "out_layout": [list(it) for it in self.out_layout.items],
            "mask_set": [list(m) for m in self.mask_set],
            "hidden": list(self.hidden),
            "latent_index": self.latent_index,
            "rupture_input": self.rupture_input,
            "residual": self.residual,
            "n_muscles": self.n_muscles,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "in_mean": self.in_mean.tolist(), "in_std": self.in_std.tolist(),
            "out_mean": self.out_mean.tolist(), "out_std": self.out_std.tolist(),
            "data_min": self.data_min.tolist(), "data_max": self.data_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("version") != FORMAT_VERSION:
            raise InvalidInputError(f"unsupported network format version {d.get('version')!r}")
        net = cls(Layout(d["layout"]), d["mask_set"], d["hidden"], d["latent_index"], Layout(d["out_layout"]),
                  d["rupture_input"], d["residual"], n_muscles=d["n_muscles"])
        net.weights = [np.array(W, dtype=float) for W in d["weights"]]
        net.biases = [np.array(b, dtype=float) for b in d["biases"]]
        for k in ("in_mean", "in_std", "out_mean", "out_std", "data_min", "data_max"):
            setattr(net, k, np.array(d[k], dtype=float))
        return net

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _safe_std(X):
    s = X.std(axis=0)
    return np.where(s > 1e-12, s, 1.0)


def static_schema(n_joints, n_muscles, hidden=(64, 64, 64), seed=0, rupture_input=False, mask_set=STATIC_MASKS):
    return MaskedAutoencoder(static_layout(n_joints, n_muscles), mask_set, hidden, seed=seed,
                             rupture_input=rupture_input, n_muscles=n_muscles)


def forward_masked(net, x_in, m, r=None):
    """Latent code z and de-standardized reconstruction for (batched) x_in under mask m."""
    acts = net.forward_std(net.encode_input(x_in, m, r))
    z = acts[net.latent_index + 1]
    x_out = net.decode_output(acts[-1], x_in)
    if np.ndim(x_in) == 1:
        return z[0], x_out[0]
    return z, x_out


# -- gradients -----------------------------------------------------------------

def backprop(net, acts, grad_out):
    """Parameter gradients (and input gradient) given d loss / d output for a forward pass."""
    gW = [None] * len(net.weights)
    gb = [None] * len(net.weights)
    delta = grad_out
    for k in range(len(net.weights) - 1, -1, -1):
        gW[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        delta = delta @ net.weights[k].T
        if k > 0:
            delta = delta * (1.0 - acts[k] ** 2)
    return gW, gb, delta


def loss_and_grad(net, a0, target_std, weight=None):
    """Mean squared error (per sample, averaged over output entries) and its gradients."""
    with np.errstate(over="ignore", invalid="ignore"):  # a blow-up surfaces as a non-finite loss
        acts = net.forward_std(a0)
        err = acts[-1] - target_std
        if weight is not None:
            err = err * weight
        B, D = err.shape
        loss = float(np.sum(err ** 2) / (B * D))
    g = 2.0 * err / (B * D)
    if weight is not None:
        g = g * weight
    gW, gb, _ = backprop(net, acts, g)
    return loss, gW, gb


def numerical_grad(net, a0, target_std, h=1e-6):
    """Central finite-difference gradients of loss_and_grad's loss (for checking)."""
    gW = []
    gb = []
    for params, out in ((net.weights, gW), (net.biases, gb)):
        for P in params:
            G = np.zeros_like(P)
            for idx in np.ndindex(P.shape):
                old = P[idx]
                P[idx] = old + h
                lp = loss_and_grad(net, a0, target_std)[0]
                P[idx] = old - h
                lm = loss_and_grad(net, a0, target_std)[0]
                P[idx] = old
                G[idx] = (lp - lm) / (2 * h)
            out.append(G)
    return gW, gb


# -- training ------------------------------------------------------------------

@dataclass
class TrainParams:
    epochs: int = 500
    lr: float = 1e-3
    batch: int = 32
    momentum: float = 0.9
    seed: int = 0
    rupture_dropout: float = 0.0  # probability a sample trains with one muscle marked ruptured
    fit_normalization: bool = True


@dataclass
class TrainResult:
    net: MaskedAutoencoder
    history: list = field(default_factory=list)

    @property
    def final_loss(self):
        return self.history[-1] if self.history else float("nan")


def _rupture_draw(net, rng, B, p):
    r = np.ones((B, net.n_muscles))
    if p <= 0 or net.n_muscles == 0:
        return r
    hit = rng.random(B) < p
    which = rng.integers(0, net.n_muscles, B)
    r[hit, which[hit]] = 0.0
    return r


def _loss_weight(net, r):
    """Zero the loss on a ruptured muscle's own output entries."""
    w = np.ones((r.shape[0], net.out_layout.size))
    for name in ("f", "l"):
        if name in net.out_layout:
            w[:, net.out_layout[name]] = r
    return w


def _gd_loop(net, batches, params, grad_mask=None, history=None):
    """Momentum gradient descent over an iterator of (a0, target, weight) batches."""
    vW = [np.zeros_like(W) for W in net.weights]
    vb = [np.zeros_like(b) for b in net.biases]
    history = [] if history is None else history
    for epoch_batches in batches:
        total, count = 0.0, 0
        for a0, target, weight in epoch_batches:
            loss, gW, gb = loss_and_grad(net, a0, target, weight)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss after {len(history)} epochs")
            for k in range(len(net.weights)):
                if grad_mask is not None:
                    gW[k] = gW[k] * grad_mask[0][k]
                    gb[k] = gb[k] * grad_mask[1][k]
                vW[k] = params.momentum * vW[k] - params.lr * gW[k]
                vb[k] = params.momentum * vb[k] - params.lr * gb[k]
                net.weights[k] += vW[k]
                net.biases[k] += vb[k]
            total += loss * len(a0)
            count += len(a0)
        history.append(total / max(count, 1))
    return history


def _static_batches(net, X, params, rng):
    n = len(X)
    Y = (net._carry(X) - net.out_mean) / net.out_std
    masks = np.array(net.mask_set, dtype=float)
    for _ in range(params.epochs):
        order = rng.permutation(n)

        def epoch(order=order):
            for s in range(0, n, params.batch):
                idx = order[s:s + params.batch]
                m = masks[rng.integers(len(masks))]
                r = _rupture_draw(net, rng, len(idx), params.rupture_dropout)
                a0 = net.encode_input(X[idx], m, r if net.rupture_input else None)
                w = _loss_weight(net, r) if params.rupture_dropout > 0 else None
                yield a0, Y[idx], w
        yield epoch()


def train_static(net, dataset, params=None, grad_mask=None):
    """Fit the static schema to full sensor records (rows of ``dataset``) and return a new net.

    Each minibatch draws one mask uniformly from the net's mask set and is
    trained to reconstruct the full record.
    """
    params = params or TrainParams()
    X = np.atleast_2d(np.asarray(dataset, dtype=float))
    if len(X) == 0:
        raise InvalidInputError("dataset is empty")
    if X.shape[1] != net.layout.size:
        raise InvalidInputError(f"dataset has {X.shape[1]} columns, layout needs {net.layout.size}")
    net = net.copy()
    if params.fit_normalization:
        net.fit_normalization(X)
    rng = np.random.default_rng(params.seed)
    history = _gd_loop(net, _static_batches(net, X, params, rng), params, grad_mask)
    return TrainResult(net, history)


def static_loss(net, dataset):
    """Standardized reconstruction error averaged over every mask in the mask set."""
    X = np.atleast_2d(np.asarray(dataset, dtype=float))
    if len(X) == 0:
        return float("nan")
    Y = (net._carry(X) - net.out_mean) / net.out_std
    total = 0.0
    for m in net.mask_set:
        r = np.ones((len(X), net.n_muscles)) if net.rupture_input else None
        out = net.forward_std(net.encode_input(X, np.asarray(m, dtype=float), r))[-1]
        total += float(np.mean((out - Y) ** 2))
    return total / len(net.mask_set)


def dynamic_loss(net, X_t, DL, X_next):
    """Standardized one-step prediction error on transitions."""
    X_in = _dyn_input(np.asarray(X_t, dtype=float), np.asarray(DL, dtype=float))
    if len(X_in) == 0:
        return float("nan")
    Y = (np.atleast_2d(np.asarray(X_next, dtype=float)) - net._carry(X_in) - net.out_mean) / net.out_std
    out = net.forward_std(net.encode_input(X_in, np.ones(len(net.layout.items))))[-1]
    return float(np.mean((out - Y) ** 2))


# -- inference -----------------------------------------------------------------

@dataclass
class Inference:
    x: np.ndarray
    parts: dict
    status: str = "ok"  # "mask_not_in_set" when evaluated with an untrained mask


def infer(net, known, m, r=None):
    """Fill a full record from the known slices (dict name -> values) under mask m."""
    m = tuple(int(v) for v in m)
    x = np.zeros(net.layout.size)
    for name, hidden in zip(net.layout.names, m):
        if hidden and name not in known:
            raise InvalidInputError(f"mask marks slice {name!r} known but no value was given")
        if name in known:
            v = np.asarray(known[name], dtype=float)
            if v.shape != (net.layout[name].stop - net.layout[name].start,):
                raise InvalidInputError(f"slice {name!r} has wrong size")
            x[net.layout[name]] = v
    status = "ok"
    if m not in net.mask_set:
        log.warning("mask %s was not in the training mask set", m)
        status = "mask_not_in_set"
    _, out = forward_masked(net, x, m, r)
    return Inference(out, net.out_layout.split(out), status)


# -- anomaly scoring -------------------------------------------------------------

@dataclass
class AnomalyScore:
    per_muscle: np.ndarray  # squared standardized residual of f_i and l_i
    aggregate: float  # root-mean residual over theta and healthy muscles
    residual: np.ndarray  # standardized residual per record entry


def _hiding_mask(net, name):
    """Training mask hiding exactly the named slice (all others known)."""
    want = tuple(0 if n == name else 1 for n in net.layout.names)
    if want in net.mask_set:
        return want
    raise InvalidInputError(f"no mask in the set hides only {name!r}")


def cross_reconstruction(net, x, r=None):
    """Predict every slice of x from the remaining slices, one hidden slice at a time."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    out = np.empty((len(x), net.out_layout.size))
    for name in net.out_layout.names:
        _, y = forward_masked(net, x, _hiding_mask(net, name), r)
        out[:, net.out_layout[name]] = y[:, net.out_layout[name]]
    return out


def anomaly_residuals(net, x, healthy=None):
    """Per-muscle and aggregate residual of x against its cross reconstruction."""
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    M = net.n_muscles
    healthy = np.ones(M, dtype=bool) if healthy is None else np.asarray(healthy, dtype=bool)
    r = healthy.astype(float) if not np.all(healthy) else None
    pred = cross_reconstruction(net, x, r)
    res = (net._carry(x) - pred) / net.out_std
    per = np.zeros((len(x), M))
    for name in ("f", "l"):
        per += res[:, net.out_layout[name]] ** 2
    keep = np.ones(net.out_layout.size, dtype=bool)
    for name in ("f", "l"):
        keep[net.out_layout[name]] = healthy
    agg = np.sqrt(np.mean(res[:, keep] ** 2, axis=1))
    if single:
        return AnomalyScore(per[0], float(agg[0]), res[0])
    return AnomalyScore(per, agg, res)


def anomaly_score(net, x, healthy=None):
    return anomaly_residuals(net, x, healthy).aggregate


# -- latent-space control ----------------------------------------------------------

@dataclass
class ControlResult:
    command: np.ndarray
    objective: list
    stalled: bool = False
    z: np.ndarray = None
    prediction: dict = None


def _latent_objective(net, z, theta_ref, w_theta, w_f, healthy):
    acts = net.decode_latent(z)
    y = net.decode_output(acts[-1])[0]
    parts = net.out_layout.split(y)
    e_th = theta_ref - parts["theta"]
    f = parts["f"] * healthy
    J = w_theta * float(e_th @ e_th) + w_f * float(f @ f)
    # d J / d y (raw), then to standardized output
    gy = np.zeros(net.out_layout.size)
    gy[net.out_layout["theta"]] = -2.0 * w_theta * e_th
    gy[net.out_layout["f"]] = 2.0 * w_f * f
    g = gy * net.out_std
    delta = g[None, :]
    k_last = len(net.weights) - 1
    for k in range(k_last, net.latent_index, -1):
        i = k - net.latent_index - 1
        delta = delta @ net.weights[k].T
        if i > 0:
            delta = delta * (1.0 - acts[i] ** 2)
    return J, delta[0], parts


def latent_control(net, x_now, theta_ref, w_theta=1.0, w_f=1e-4, iters=50, step=0.5, healthy=None):
    """Optimise the latent code for posture tracking with low tension; returns the decoded l.

    z starts from encoding the current record with every slice visible and
    moves by projected gradient descent (z stays in the tanh range [-1, 1]).
    Each step halves its length until the objective decreases, at most 20
    times; a step that cannot decrease ends the search.
    """
    if iters < 1:
        raise InvalidInputError("iters must be at least 1")
    M = net.n_muscles
    healthy = np.ones(M, dtype=bool) if healthy is None else np.asarray(healthy, dtype=bool)
    _check_healthy(healthy)
    theta_ref = np.asarray(theta_ref, dtype=float)
    full = tuple(1 for _ in net.layout.names)
    r = None if np.all(healthy) else healthy.astype(float)
    z, _ = forward_masked(net, x_now, full, r)
    hf = healthy.astype(float)
    J, g, parts = _latent_objective(net, z, theta_ref, w_theta, w_f, hf)
    history = [J]
    stalled = False
    for it in range(iters):
        alpha = step
        accepted = False
        for _ in range(21):
            z_new = np.clip(z - alpha * g, -1.0, 1.0)
            J_new, g_new, parts_new = _latent_objective(net, z_new, theta_ref, w_theta, w_f, hf)
            if J_new < J:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            stalled = it == 0
            break
        z, J, g, parts = z_new, J_new, g_new, parts_new
        history.append(J)
    l_cmd = parts["l"].copy()
    if not np.all(healthy):
        l_cmd[~healthy] = slack_length(net)[~healthy]
    return ControlResult(l_cmd, history, stalled, z, parts)


def slack_length(net):
    """Per-muscle length beyond anything seen in training: commands a wire slack."""
    s = net.layout["l"]
    return net.data_max[s] + SLACK_MARGIN


def _check_healthy(healthy):
    if not np.any(healthy):
        raise UncontrollableJointError("no healthy muscle left")


# -- dynamic schema ---------------------------------------------------------------

def dynamic_layout(n_joints, n_muscles, n_contact=1):
    state = [("theta", n_joints), ("f", n_muscles), ("l", n_muscles), ("contact", n_contact)]
    return Layout(state + [("dl_ref", n_muscles)]), Layout(state)


def dynamic_schema(n_joints, n_muscles, n_contact=1, hidden=(64, 64, 64), seed=0):
    lay_in, lay_out = dynamic_layout(n_joints, n_muscles, n_contact)
    return MaskedAutoencoder(lay_in, [tuple(1 for _ in lay_in.items)], hidden, out_layout=lay_out,
                             residual=True, seed=seed, n_muscles=n_muscles)


def _dyn_input(x_t, dl):
    return np.concatenate([np.atleast_2d(x_t), np.atleast_2d(dl)], axis=-1)


def train_dynamic(net, X_t, DL, X_next, params=None):
    """Fit the one-step model on transitions (x_t, dl_ref) -> x_{t+1}."""
    params = params or TrainParams()
    X_in = _dyn_input(np.asarray(X_t, dtype=float), np.asarray(DL, dtype=float))
    X_next = np.atleast_2d(np.asarray(X_next, dtype=float))
    if len(X_in) == 0:
        raise InvalidInputError("dataset is empty")
    net = net.copy()
    if params.fit_normalization:
        net.fit_normalization(X_in, X_next - net._carry(X_in))
    Y = (X_next - net._carry(X_in) - net.out_mean) / net.out_std
    rng = np.random.default_rng(params.seed)
    full = np.ones(len(net.layout.items))
    A = net.encode_input(X_in, full)
    n = len(A)

    def batches():
        for _ in range(params.epochs):
            order = rng.permutation(n)
            yield ((A[order[s:s + params.batch]], Y[order[s:s + params.batch]], None)
                   for s in range(0, n, params.batch))

    history = _gd_loop(net, batches(), params)
    return TrainResult(net, history)


def dynamic_predict(net, x_t, delta_l_ref):
    """One-step prediction x_{t+1}; feed the output back in to roll out."""
    x_in = _dyn_input(x_t, delta_l_ref)
    if x_in.shape[-1] != net.layout.size:
        raise InvalidInputError("state or command has the wrong size")
    _, y = forward_masked(net, x_in[0] if np.ndim(x_t) == 1 else x_in, np.ones(len(net.layout.items)))
    return y


def _rollout(net, x0, seq):
    """Chained predictions with cached activations for backpropagation through time."""
    full = np.ones(len(net.layout.items))
    xs = [np.asarray(x0, dtype=float)]
    caches = []
    for dl in seq:
        x_in = np.concatenate([xs[-1], dl])
        acts = net.forward_std(net.encode_input(x_in, full))
        caches.append(acts)
        xs.append(net.decode_output(acts[-1], x_in)[0])
    return xs, caches


def _dyn_objective(net, x0, seq, target_name, target):
    xs, caches = _rollout(net, x0, seq)
    sl = net.out_layout[target_name]
    J = 0.0
    for x in xs[1:]:
        e = x[sl] - target
        J += float(e @ e)
    # backward through time: gx is dJ/dx_t (raw) flowing into step t
    n_state = net.out_layout.size
    gx = np.zeros(n_state)
    gseq = np.zeros_like(seq)
    in_scale = 1.0 / net.in_std
    for t in range(len(seq) - 1, -1, -1):
        g_out = gx.copy()
        g_out[sl] += 2.0 * (xs[t + 1][sl] - target)
        _, _, d_in = backprop(net, caches[t], (g_out * net.out_std)[None, :])
        d_raw = d_in[0, :net.layout.size] * in_scale
        gseq[t] = d_raw[n_state:]
        gx = d_raw[:n_state] + g_out  # residual path carries x_t straight through
    return J, gseq, xs


def dynamic_control(net, x_t, target, horizon, iters=20, dl_bound=None, step=1e-3, target_name="contact"):
    """Optimise a dl_ref sequence so the predicted target slice tracks ``target``.

    Gradients flow back through the chained one-step predictions.  Each entry
    is clamped to +-dl_bound (ldot_max * dt).  Receding-horizon callers apply
    only the first element.
    """
    if horizon < 1:
        raise InvalidInputError("horizon must be at least 1")
    M = net.n_muscles
    bound = np.full(M, np.inf) if dl_bound is None else np.broadcast_to(np.asarray(dl_bound, dtype=float), (M,))
    target = np.atleast_1d(np.asarray(target, dtype=float))
    seq = np.zeros((horizon, M))
    J, g, _ = _dyn_objective(net, x_t, seq, target_name, target)
    history = [J]
    stalled = False
    for it in range(iters):
        alpha = step
        accepted = False
        for _ in range(21):
            cand = np.clip(seq - alpha * g, -bound, bound)
            J_new, g_new, _ = _dyn_objective(net, x_t, cand, target_name, target)
            if J_new < J:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            stalled = it == 0
            break
        seq, J, g = cand, J_new, g_new
        history.append(J)
    return ControlResult(seq, history, stalled)


# -- online adaptation ---------------------------------------------------------------

class ReplayBuffer:
    """Fixed-capacity ring buffer of records; the oldest entry is overwritten."""

    def __init__(self, width, capacity=1000):
        self.data = np.zeros((capacity, width))
        self.capacity = capacity
        self.count = 0
        self.head = 0

    def __len__(self):
        return min(self.count, self.capacity)

    def append(self, x):
        self.data[self.head] = x
        self.head = (self.head + 1) % self.capacity
        self.count += 1

    def sample(self, rng, n):
        return self.data[rng.integers(0, len(self), n)]


@dataclass
class OnlineResult:
    net: MaskedAutoencoder
    loss: float
    skipped: bool = False


def online_update(net, buffer, new_sample, rate, steps=1, batch=32, rng=None):
    """Append a record and take ``steps`` minibatch gradient steps on replayed data.

    Returns a new net (the caller swaps snapshots between ticks).  A non-finite
    loss leaves the weights unchanged and sets ``skipped``.
    """
    if buffer.capacity < batch:
        raise InvalidInputError("buffer capacity must be at least the batch size")
    buffer.append(np.asarray(new_sample, dtype=float))
    rng = np.random.default_rng(0) if rng is None else rng
    if rate == 0:
        return OnlineResult(net, float("nan"))
    out = net.copy()
    masks = np.array(net.mask_set, dtype=float)
    loss = float("nan")
    for _ in range(steps):
        X = buffer.sample(rng, min(batch, len(buffer)))
        m = masks[rng.integers(len(masks))]
        a0 = out.encode_input(X, m)
        Y = (out._carry(X) - out.out_mean) / out.out_std
        loss, gW, gb = loss_and_grad(out, a0, Y)
        if not np.isfinite(loss):
            return OnlineResult(net, loss, True)
        for k in range(len(out.weights)):
            out.weights[k] -= rate * gW[k]
            out.biases[k] -= rate * gb[k]
    return OnlineResult(out, loss)


# -- datasets -------------------------------------------------------------------

def write_dataset(path, layout, X):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(layout.column_names())
        for row in np.atleast_2d(X):
            w.writerow([repr(float(v)) for v in row])


def read_dataset(path, layout=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise InvalidInputError(f"{path}: empty dataset file")
    header, body = rows[0], rows[1:]
    if layout is not None and header != layout.column_names():
        raise InvalidInputError(f"{path}: header does not match layout {layout.column_names()}")
    X = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    return header, X
