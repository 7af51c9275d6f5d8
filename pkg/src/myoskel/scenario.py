"""Scripted closed-loop runs: plant, reflex stack, upper-layer controller and a timeline.

A scenario is a JSON object::

    {"name": "hold", "morphology": "pin_antagonist", "seed": 0,
     "duration": 5.0, "dt": 0.001, "control_dt": 0.01, "schema_dt": 0.1,
     "theta0": [0.0], "noise": {"l": 1e-5},
     "plant": {"damping": 0.2, "contact": {"joint": 0, "angle": 0.3, "stiffness": 2.0}},
     "controller": {"mode": "length", "theta_ref": [0.2], "reflex": {"k_msc": 2000}},
     "timeline": [{"t": 1.0, "event": "setpoint", "theta_ref": [0.4]},
                  {"t": 3.0, "event": "rupture", "muscle": 0}],
     "windows": {"settled": [2.0, 3.0]}}

Unknown keys anywhere are rejected before anything runs.  The reflex stack
ticks every ``control_dt``; the upper layer (latent-space control or
contact holding) every ``schema_dt``.  One telemetry row is logged per
reflex tick, starting with the initial frame.

Upper-layer modes:

* ``length``: l_ref from the target posture, with a gravity feedforward
  tension from allocation, so MSC holds the target at the allocated
  tensions.
* ``schema``: l_ref from latent-space control of a trained static schema
  (``controller.schema.net``); ruptured muscles are masked once detected.

Relative file paths are resolved against the scenario file's directory.
"""

import copy
import csv
import json
import logging
import math
import os
import re
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptation import detect_rupture, initial_state, masked_anomaly, masked_latent_control
from .allocation import AllocationProblem, allocate_exact, allocate_relaxed
from .errors import InvalidInputError, ScenarioError, UncontrollableJointError
from .estimation import EkfParams, EkfState, ekf_step, vision_correct
from .fixtures import FIXTURES, load_fixture
from .morphology import MusculoskeletalModel, muscle_from_dict
from .reflex import EC_TOL, MuscleCommandState, ReflexConfig, ReflexInputs, ReflexStack, ThermalParams, ec_plan
from .schema import MaskedAutoencoder, dynamic_control
from .sim import (ActuatorParams, ContactSpring, MuscleCommands, SimParams, Simulator, extension_for_tension,
                  marker_position, read_sensors)

log = logging.getLogger(__name__)

TELEMETRY_VERSION = 1
MUSCLE_COLUMNS = ("l", "f", "f_ref", "f_limit", "k_msc", "dl_src", "dl_mtc", "dl_mrc", "c1", "current_enabled", "healthy",
                  "anomaly")

TOP_KEYS = {"name", "morphology", "seed", "duration", "dt", "control_dt", "schema_dt", "theta0", "noise", "plant",
            "controller", "timeline", "windows"}
PLANT_KEYS = {"inertia", "damping", "gravity", "elastic_law", "actuator", "thermal", "contact", "theta_sensor"}
CONTROLLER_KEYS = {"mode", "theta_ref", "reflex", "feedforward", "feedforward_floor", "schema", "estimator", "anomaly", "contact_hold",
                   "excitation"}
SECTION_KEYS = {
    "schema": {"net", "w_theta", "w_f", "iters", "step"},
    "estimator": {"q", "r", "p0", "marker_period", "marker_sigma", "end_effector"},
    "anomaly": {"net", "k_sigma", "consecutive_ticks", "calibrate_until", "settle", "recalibrate"},
    "contact_hold": {"net", "enabled", "target", "horizon", "iters", "step", "dl_bound"},
    "excitation": {"sigma", "reversion", "dl_bound"},
}
EVENT_KEYS = {
    "setpoint": {"theta_ref", "ramp"},
    "rupture": {"muscle"},
    "contact_angle": {"angle"},
    "add_muscle": {"muscle", "net"},
    "ec_move": {"theta_end", "c_ic"},
    "l_offset": {"offset"},
    "reflex": {"set"},
}


# -- parsing ---------------------------------------------------------------------

def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(tree, overrides):
    """Set dotted keys in a nested dict, e.g. ``controller.reflex.k_msc=2000``.

    Values are parsed as JSON when possible, otherwise kept as strings.
    Returns a modified deep copy.
    """
    tree = copy.deepcopy(tree)
    for item in overrides or ():
        if isinstance(item, str):
            if "=" not in item:
                raise ScenarioError(f"override {item!r} is not key=value")
            key, text = item.split("=", 1)
            value = _parse_value(text)
        else:
            key, value = item
        parts = key.strip().split(".")
        if not all(parts):
            raise ScenarioError(f"override key {key!r} is malformed")
        node = tree
        for p in parts[:-1]:
            nxt = node.get(p)
            if nxt is None:
                nxt = node[p] = {}
            if not isinstance(nxt, dict):
                raise ScenarioError(f"override {key!r} descends into a non-object")
            node = nxt
        node[parts[-1]] = value
    return tree


def _reject(d, allowed, where):
    if not isinstance(d, dict):
        raise ScenarioError(f"{where}: expected an object")
    extra = set(d) - set(allowed)
    if extra:
        raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")


def _resolve(path, base):
    if base is None or os.path.isabs(path):
        return path
    return os.path.join(base, path)


def load_morphology(source, base=None):
    """Fixture name, JSON path, {"fixture": name, "args": {...}} or an inline model dict."""
    try:
        if isinstance(source, str):
            if source in FIXTURES:
                return load_fixture(source)
            path = _resolve(source, base)
            if not os.path.exists(path):
                raise ScenarioError(f"morphology {source!r} is neither a fixture nor an existing file")
            return MusculoskeletalModel.load(path)
        if isinstance(source, dict) and "fixture" in source:
            _reject(source, {"fixture", "args"}, "morphology")
            args = dict(source.get("args", {}))
            for k, v in args.items():
                if isinstance(v, list):
                    args[k] = tuple(v)
            return load_fixture(source["fixture"], **args)
        if isinstance(source, dict):
            return MusculoskeletalModel.from_dict(source)
    except (KeyError, TypeError, InvalidInputError) as exc:
        raise ScenarioError(f"morphology: {exc}") from exc
    raise ScenarioError("morphology must be a fixture name, a path or an object")


def _vec(x, n, what):
    v = np.asarray(x, dtype=float).ravel()
    if v.size == 1 and n > 1:
        v = np.full(n, float(v[0]))
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise ScenarioError(f"{what} must be {n} finite numbers")
    return v


@dataclass
class Scenario:
    name: str
    model: object
    seed: int
    duration: float
    dt: float
    control_dt: float
    schema_dt: float
    theta0: np.ndarray
    noise: dict
    plant: SimParams
    controller: dict
    reflex: ReflexConfig
    timeline: list
    windows: dict
    base_dir: str = None
    raw: dict = field(default_factory=dict)

    @property
    def n_ticks(self):
        return int(round(self.duration / self.control_dt))


def _plant_params(d):
    _reject(d, PLANT_KEYS, "plant")
    kw = {k: d[k] for k in ("inertia", "damping", "elastic_law", "theta_sensor") if k in d}
    if "gravity" in d:
        kw["gravity"] = tuple(float(g) for g in d["gravity"])
    try:
        if "actuator" in d:
            _reject(d["actuator"], {"pulley_radius", "gain", "backdrivable"}, "plant.actuator")
            kw["actuator"] = ActuatorParams(**d["actuator"])
        if "thermal" in d:
            _reject(d["thermal"], ThermalParams._fields, "plant.thermal")
            kw["thermal"] = ThermalParams(**d["thermal"])
        if "contact" in d:
            _reject(d["contact"], {"joint", "angle", "stiffness", "arm"}, "plant.contact")
            kw["contact"] = ContactSpring(**d["contact"])
        return SimParams(**kw)
    except (TypeError, InvalidInputError) as exc:
        raise ScenarioError(f"plant: {exc}") from exc


def parse_scenario(data, base_dir=None, seed=None, morphology=None):
    """Validate a scenario dict and build the run description.  Raises ScenarioError."""
    _reject(data, TOP_KEYS, "scenario")
    model = load_morphology(morphology if morphology is not None else data.get("morphology"), base_dir) \
        if (morphology is not None or "morphology" in data) else None
    if model is None:
        raise ScenarioError("scenario: 'morphology' is required")
    N, M = model.n_joints, model.n_muscles
    seed = data.get("seed", 0) if seed is None else seed
    if not isinstance(seed, int) or not 0 <= seed < 2 ** 64:
        raise ScenarioError("seed must be an unsigned 64-bit integer")

    timeline = []
    for k, ev in enumerate(data.get("timeline", [])):
        if not isinstance(ev, dict) or "event" not in ev or "t" not in ev:
            raise ScenarioError(f"timeline[{k}]: every event needs 't' and 'event'")
        kind = ev["event"]
        if kind not in EVENT_KEYS:
            raise ScenarioError(f"timeline[{k}]: unknown event {kind!r}")
        _reject(ev, EVENT_KEYS[kind] | {"t", "event"}, f"timeline[{k}]")
        if not isinstance(ev["t"], (int, float)) or ev["t"] < 0:
            raise ScenarioError(f"timeline[{k}]: t must be a non-negative number")
        timeline.append(dict(ev))
    timeline.sort(key=lambda e: e["t"])  # stable: ties keep file order

    dt = float(data.get("dt", 1e-3))
    control_dt = float(data.get("control_dt", 0.01))
    schema_dt = float(data.get("schema_dt", 0.1))
    if not 0 < dt <= 0.01:
        raise ScenarioError("dt must lie in (0, 0.01]")
    for name, big, small in (("control_dt", control_dt, dt), ("schema_dt", schema_dt, control_dt)):
        ratio = big / small
        if big <= 0 or abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ScenarioError(f"{name} must be a positive integer multiple of the faster rate")
    duration = data.get("duration", timeline[-1]["t"] if timeline else 0.0)
    if not isinstance(duration, (int, float)) or duration < 0:
        raise ScenarioError("duration must be a non-negative number")

    ctrl = data.get("controller", {})
    _reject(ctrl, CONTROLLER_KEYS, "controller")
    for sec, keys in SECTION_KEYS.items():
        if sec in ctrl:
            _reject(ctrl[sec], keys, f"controller.{sec}")
    mode = ctrl.get("mode", "length")
    if mode not in ("length", "schema"):
        raise ScenarioError(f"controller.mode must be 'length' or 'schema', got {mode!r}")
    if mode == "schema" and "net" not in ctrl.get("schema", {}):
        raise ScenarioError("controller.schema.net is required in schema mode")
    if "anomaly" in ctrl and not ("net" in ctrl["anomaly"] or "net" in ctrl.get("schema", {})):
        raise ScenarioError("controller.anomaly needs a network")
    if "anomaly" in ctrl and any(e["event"] == "add_muscle" for e in timeline):
        raise ScenarioError("rupture detection cannot follow a muscle addition in the same run")
    if mode == "schema" and any(e["event"] == "add_muscle" and "net" not in e for e in timeline):
        raise ScenarioError("add_muscle in schema mode must name the expanded network")
    ff = ctrl.get("feedforward", "allocation")
    if ff not in ("allocation", "none"):
        raise ScenarioError("controller.feedforward must be 'allocation' or 'none'")
    try:
        reflex = ReflexConfig.from_dict(ctrl.get("reflex", {}))
    except InvalidInputError as exc:
        raise ScenarioError(f"controller.reflex: {exc}") from exc
    reflex.dt = control_dt

    plant = _plant_params(data.get("plant", {}))
    if not plant.theta_sensor and "estimator" not in ctrl:
        raise ScenarioError("the joint-angle sensor is off: controller.estimator is required")
    if "contact_hold" in ctrl or "excitation" in ctrl:
        if plant.contact is None:
            raise ScenarioError("contact holding needs plant.contact")
        if "contact_hold" in ctrl and ctrl["contact_hold"].get("enabled", True) and "net" not in ctrl["contact_hold"]:
            raise ScenarioError("controller.contact_hold.net is required when enabled")
    noise = data.get("noise", {})
    _reject(noise, {"l", "l_path", "f", "c", "theta", "contact"}, "noise")
    windows = data.get("windows", {})
    if not isinstance(windows, dict) or any(not (isinstance(v, list) and len(v) == 2) for v in windows.values()):
        raise ScenarioError("windows must map names to [t_start, t_end]")
    theta0 = _vec(data.get("theta0", np.zeros(N)), N, "theta0")
    if "theta_ref" in ctrl:
        _vec(ctrl["theta_ref"], N, "controller.theta_ref")
    return Scenario(str(data.get("name", "scenario")), model, int(seed), float(duration), dt, control_dt, schema_dt,
                    theta0, dict(noise), plant, ctrl, reflex, timeline, dict(windows), base_dir, data)


def load_scenario(source, overrides=None, seed=None, morphology=None):
    """Path or dict -> validated Scenario (overrides are applied before validation)."""
    base = None
    if isinstance(source, (str, os.PathLike)):
        path = os.fspath(source)
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError as exc:
            raise ScenarioError(f"scenario file {path!r} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
        base = os.path.dirname(os.path.abspath(path))
    elif isinstance(source, dict):
        data = source
    else:
        raise ScenarioError("scenario must be a path or an object")
    data = apply_overrides(data, overrides)
    return parse_scenario(data, base, seed, morphology)


# -- running --------------------------------------------------------------------

@dataclass
class ScenarioResult:
    summary: dict
    header: list
    rows: list
    events: list
    transitions: list = field(default_factory=list)  # (x_t, dl_ref, x_next) at schema ticks


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    return repr(float(v))


class _Runner:
    def __init__(self, sc):
        self.sc = sc
        ss = np.random.SeedSequence(sc.seed)
        s_sensor, s_marker, s_excite = ss.spawn(3)
        self.rng_sensor = np.random.default_rng(s_sensor)
        self.rng_marker = np.random.default_rng(s_marker)
        self.rng_excite = np.random.default_rng(s_excite)
        self.sim = Simulator(sc.model, copy.deepcopy(sc.plant), sc.theta0, seed=sc.seed)
        self.model = self.sim.model
        self.ctrl = sc.controller
        self.n_sub = int(round(sc.control_dt / sc.dt))
        self.schema_every = int(round(sc.schema_dt / sc.control_dt))
        M = self.model.n_muscles
        self.M_total = M + sum(1 for e in sc.timeline if e["event"] == "add_muscle")
        self.theta_ref = _vec(self.ctrl.get("theta_ref", sc.theta0), self.model.n_joints, "theta_ref")
        self.user_offset = np.zeros(M)
        self.hold_offset = np.zeros(M)
        self.ec_offset = np.zeros(M)
        self.ec_until = -1
        self.ramp = None
        self.healthy = np.ones(M, dtype=bool)
        self.ruptures = []
        self.drift = 0.0
        self.max_c1 = float(np.max(self.sim.state.thermal.c1, initial=-np.inf))
        self.ec_moves = []
        self.transitions = []
        self.notes = []  # runner-level events besides detections
        self.uncontrollable = False
        self._base_cache = None
        self._schema_lref = None
        self.net = None
        if self.ctrl.get("mode", "length") == "schema":
            self.net = self._load_net(self.ctrl["schema"]["net"])
        self.stack = ReflexStack(self.model, sc.reflex)
        frame = read_sensors(self.sim, sc.noise, self.rng_sensor)
        self._init_estimator(frame)
        self._init_anomaly()
        self._init_hold()
        theta = self._theta(frame)
        self.rstate = self.stack.initial_state(self._l_ref(frame, theta, 0), theta)

    def _load_net(self, path):
        try:
            return MaskedAutoencoder.load(_resolve(path, self.sc.base_dir))
        except FileNotFoundError as exc:
            raise ScenarioError(f"network file {path!r} does not exist") from exc
        except (KeyError, ValueError) as exc:
            raise ScenarioError(f"network file {path!r} is invalid: {exc}") from exc

    # -- estimator ----------------------------------------------------------

    def _init_estimator(self, frame):
        est = self.ctrl.get("estimator")
        self.ekf = None
        if est is None:
            return
        N, M = self.model.n_joints, self.model.n_muscles
        self.ekf_params = EkfParams.default(N, M, est.get("q", 1e-6), est.get("r", 1e-6))
        self.ekf = EkfState(self.sc.theta0.copy(), est.get("p0", 1e-6) * np.eye(N))
        self.ekf_l = self._compensated_length(frame)

    def _compensated_length(self, frame):
        return frame.l + extension_for_tension(frame.f, self.model.k_n, self.sim.params.elastic_law)

    def _theta(self, frame):
        return frame.theta if self.ekf is None else self.ekf.theta_est

    def _estimate(self, frame, k):
        if self.ekf is None:
            return frame
        est = self.ctrl["estimator"]
        l_now = self._compensated_length(frame)
        self.ekf = ekf_step(self.ekf, self.ekf_l, l_now, self.model, self.ekf_params, self.healthy)
        self.ekf_l = l_now
        period = est.get("marker_period")
        if period and k > 0 and k % int(period) == 0:
            ee = est.get("end_effector", 0)
            p = marker_position(self.sim, ee, est.get("marker_sigma", 0.0), self.rng_marker)
            vc = vision_correct(self.ekf.theta_est, p, self.model, ee)
            self.ekf = replace(self.ekf, theta_est=vc.theta)
        return replace(frame, theta_est=self.ekf.theta_est.copy())

    # -- anomaly detection --------------------------------------------------

    def _init_anomaly(self):
        an = self.ctrl.get("anomaly")
        self.anet = None
        if an is None:
            return
        self.anet = self._load_net(an["net"]) if "net" in an else self.net
        if self.anet.n_muscles != self.model.n_muscles:
            raise ScenarioError("anomaly network and morphology disagree on the muscle count")
        self.astate = initial_state(self.model.n_muscles)
        self.calib_ticks = int(round(an.get("calibrate_until", 1.0) / self.sc.control_dt))
        self.settle_ticks = int(round(an.get("settle", 1.0) / self.sc.control_dt))
        self.recal_ticks = int(round(an.get("recalibrate", 2.0) / self.sc.control_dt))
        self.calib_start, self.calib_end = 0, self.calib_ticks
        self.calib_scores = []

    def _record(self, frame, theta):
        return np.concatenate([theta, frame.f, frame.l])

    def _anomaly(self, frame, theta, k):
        if self.anet is None:
            return None
        an = self.ctrl["anomaly"]
        scores = masked_anomaly(self.anet, self._record(frame, theta), self.astate.healthy).per_muscle
        # after each detection the residuals are re-baselined under the new mask
        if k < self.calib_start:
            return scores
        if k < self.calib_end:
            self.calib_scores.append(scores)
            return scores
        if self.calib_scores:
            S = np.array(self.calib_scores)
            if len(S) < 2:
                raise ScenarioError("anomaly calibration window is shorter than two ticks")
            std = S.std(axis=0)
            std = np.where(std > 0, std, 1e-12)
            self.astate = replace(self.astate, residual_mean=S.mean(axis=0), residual_std=std,
                                  streak=np.zeros_like(self.astate.streak))
            self.calib_scores = []
        before = self.astate.healthy
        self.astate = detect_rupture(scores, self.astate, an.get("k_sigma", 5.0), an.get("consecutive_ticks", 10), k)
        if np.any(before != self.astate.healthy):
            self.healthy = self.astate.healthy.copy()
            self._base_cache = None
            self._schema_lref = None
            for e in self.astate.events[len(self.astate.events) - int(np.sum(before != self.astate.healthy)):]:
                log.info("rupture detected on muscle %d at tick %d", e["muscle"], e["tick"])
            self.calib_start = k + 1 + self.settle_ticks
            self.calib_end = self.calib_start + max(self.recal_ticks, 2)
        return scores

    # -- contact holding ----------------------------------------------------

    def _init_hold(self):
        h = self.ctrl.get("contact_hold")
        self.hnet = None
        if h is not None and h.get("enabled", True):
            self.hnet = self._load_net(h["net"])
        self.prev_x = None
        self.prev_dl = None

    def _dyn_state(self, frame, theta):
        return np.concatenate([theta, frame.f, frame.l, [frame.contact]])

    def _upper_dynamic(self, frame, theta, k):
        h, ex = self.ctrl.get("contact_hold"), self.ctrl.get("excitation")
        if h is None and ex is None:
            return
        x = self._dyn_state(frame, theta)
        if self.prev_x is not None:
            self.transitions.append((self.prev_x, self.prev_dl, x))
        M = self.model.n_muscles
        dl = np.zeros(M)
        if self.hnet is not None:
            bound = h.get("dl_bound", self.model.ldot_max * self.sc.schema_dt)
            res = dynamic_control(self.hnet, x, h["target"], int(h.get("horizon", 5)), int(h.get("iters", 20)),
                                  bound, h.get("step", 1e-3))
            dl = res.command[0]
        elif ex is not None:
            bound = np.broadcast_to(ex.get("dl_bound", self.model.ldot_max * self.sc.schema_dt), (M,))
            dl = -ex.get("reversion", 0.2) * self.hold_offset + self.rng_excite.normal(0.0, ex["sigma"], M)
            dl = np.clip(dl, -bound, bound)
        self.hold_offset = self.hold_offset + dl
        self.prev_x, self.prev_dl = x, dl

    # -- reference lengths ----------------------------------------------------

    def _feedforward_tension(self):
        model, cfg = self.model, self.stack.config
        M = model.n_muscles
        fb = np.full(M, float(cfg.f_bias))
        if self.ctrl.get("feedforward", "allocation") == "none":
            return np.where(self.healthy, fb, 0.0)
        floor = np.maximum(fb, np.broadcast_to(np.asarray(self.ctrl.get("feedforward_floor", 0.0), dtype=float), (M,)))
        G = model.muscle_jacobian(self.theta_ref)
        tau_g = model.gravity_torque(self.theta_ref, self.sim.gravity) if self.sim._has_gravity \
            else np.zeros(model.n_joints)
        lo = np.where(self.healthy, np.minimum(floor, model.f_max), 0.0)
        hi = np.where(self.healthy, model.f_max, 0.0)
        prob = AllocationProblem(G, -tau_g, lo, hi)
        sol = allocate_exact(prob)
        return sol.f if sol.feasible else allocate_relaxed(prob).f

    def _length_base(self):
        if self._base_cache is None:
            model, cfg = self.model, self.stack.config
            f_ff = self._feedforward_tension()
            k = float(cfg.k_msc) if cfg.k_msc > 0 else 1.0
            l = model.muscle_lengths(self.theta_ref) - extension_for_tension(f_ff, model.k_n, self.sim.params.elastic_law)
            self._base_cache = l - np.maximum(f_ff - cfg.f_bias, 0.0) / k
        return self._base_cache

    def _schema_base(self, frame, theta, k):
        if self._schema_lref is None or k % self.schema_every == 0:
            cfg = self.ctrl.get("schema", {})
            try:
                res = masked_latent_control(self.net, self._record(frame, theta), self.theta_ref, self.healthy,
                                            w_theta=cfg.get("w_theta", 1.0), w_f=cfg.get("w_f", 1e-4),
                                            iters=int(cfg.get("iters", 50)), step=cfg.get("step", 0.5))
            except UncontrollableJointError as exc:
                if self._schema_lref is None:
                    raise
                if not self.uncontrollable:
                    log.warning("holding last length references: %s", exc)
                    self.notes.append({"tick": k, "kind": "uncontrollable", "reason": str(exc)})
                self.uncontrollable = True
                return self._schema_lref
            f_pred = np.maximum(res.prediction["f"], self.stack.config.f_bias)
            kk = float(self.stack.config.k_msc) if self.stack.config.k_msc > 0 else 1.0
            self._schema_lref = np.where(self.healthy, res.command - (f_pred - self.stack.config.f_bias) / kk,
                                         res.command)
        return self._schema_lref

    def _l_ref(self, frame, theta, k):
        base = self._schema_base(frame, theta, k) if self.net is not None else self._length_base()
        return base + self.user_offset + self.hold_offset

    # -- events -------------------------------------------------------------

    def _apply(self, ev, k, theta):
        kind = ev["event"]
        N = self.model.n_joints
        if kind == "setpoint":
            target = _vec(ev["theta_ref"], N, "setpoint theta_ref")
            ramp_ticks = int(round(float(ev.get("ramp", 0.0)) / self.sc.control_dt))
            if ramp_ticks > 0:
                self.ramp = (self.theta_ref.copy(), target, k, k + ramp_ticks)
            else:
                self.ramp = None
                self.theta_ref = target
        elif kind == "rupture":
            i = int(ev["muscle"])
            if not 0 <= i < self.model.n_muscles:
                raise ScenarioError(f"rupture: no muscle {i}")
            self.sim.rupture(i)
            self.ruptures.append({"muscle": i, "tick": k, "time": k * self.sc.control_dt})
        elif kind == "contact_angle":
            if self.sim.params.contact is None:
                raise ScenarioError("contact_angle event without plant.contact")
            self.sim.set_contact_angle(ev["angle"])
        elif kind == "l_offset":
            self.user_offset = _vec(ev["offset"], self.model.n_muscles, "l_offset")
        elif kind == "reflex":
            try:
                cfg = ReflexConfig.from_dict({**self.stack.config.to_dict(), **ev["set"]})
            except InvalidInputError as exc:
                raise ScenarioError(f"reflex event: {exc}") from exc
            cfg.dt = self.sc.control_dt
            self.stack = ReflexStack(self.model, cfg)
        elif kind == "add_muscle":
            self._add_muscle(ev)
        elif kind == "ec_move":
            self._ec_move(ev, k, theta)
        self._base_cache = None
        self._schema_lref = None

    def _add_muscle(self, ev):
        try:
            muscle = muscle_from_dict(ev["muscle"])
        except (KeyError, TypeError, InvalidInputError) as exc:
            raise ScenarioError(f"add_muscle: {exc}") from exc
        self.sim.add_muscle(muscle)
        self.model = self.sim.model
        self.stack = ReflexStack(self.model, self.stack.config)
        for name in ("user_offset", "hold_offset", "ec_offset"):
            setattr(self, name, np.append(getattr(self, name), 0.0))
        self.healthy = np.append(self.healthy, True)
        if "net" in ev:
            self.net = self._load_net(ev["net"])
        if self.ekf is not None:
            N, M = self.model.n_joints, self.model.n_muscles
            est = self.ctrl["estimator"]
            self.ekf_params = EkfParams.default(N, M, est.get("q", 1e-6), est.get("r", 1e-6))
            self.ekf_l = np.append(self.ekf_l, self.model.muscle_lengths(self.ekf.theta_est)[-1])
        self._base_cache = None
        l_new = self._length_base()[-1] if self.net is None else self.model.muscle_lengths(self.sim.state.theta)[-1]
        cfg = self.stack.config
        rs = self.rstate
        cmds = rs.cmds + (MuscleCommandState(float(l_new), float(cfg.k_msc), float(cfg.f_bias)),)
        self.rstate = replace(rs, cmds=cmds, f_prev=np.append(rs.f_prev, 0.0),
                              l_ref_prev=np.append(rs.l_ref_prev, l_new))

    def _ec_move(self, ev, k, theta):
        theta_end = _vec(ev["theta_end"], self.model.n_joints, "ec_move theta_end")
        plan = ec_plan(self.model, theta, theta_end, self.sc.control_dt, c_ic=ev.get("c_ic", 0.0))
        self.theta_ref = theta_end
        self.ec_offset = np.where(plan.mask == 0, plan.pre_elongation, 0.0)
        self.ec_until = k + plan.t_cost
        self.ec_moves.append({"tick": k, "time": k * self.sc.control_dt, "mask": plan.mask.tolist(),
                              "t_cost": int(plan.t_cost), "timeout": bool(plan.timeout),
                              "pre_elongation": plan.pre_elongation.tolist(), "theta_end": theta_end.tolist(),
                              "reached_tick": None})

    # -- main loop ----------------------------------------------------------

    def header(self):
        N = self.model.n_joints
        cols = ["t"] + [f"theta_{j}" for j in range(N)] + [f"theta_ref_{j}" for j in range(N)]
        cols += [f"theta_est_{j}" for j in range(N)] + ["contact"]
        for i in range(self.M_total):
            cols += [f"{c}_{i}" for c in MUSCLE_COLUMNS]
        return cols

    def _row(self, k, frame, theta_used, out, scores):
        s = self.sim.state
        row = [k * self.sc.control_dt] + list(s.theta) + list(self.theta_ref) + list(theta_used) + [frame.contact]
        for i in range(self.M_total):
            if i >= self.model.n_muscles:
                row += [None] * len(MUSCLE_COLUMNS)
                continue
            c = self.rstate.cmds[i]
            row += [frame.l[i], frame.f[i], out.f_ref[i], out.f_limit[i], c.k_msc, c.delta_l_src, c.delta_l_mtc, c.delta_l_mrc,
                    frame.c1[i], bool(out.current_enabled[i]), bool(self.healthy[i]),
                    None if scores is None else scores[i]]
        return row

    def run(self):
        sc = self.sc
        events = list(sc.timeline)
        rows = []
        for k in range(sc.n_ticks + 1):
            t = k * sc.control_dt
            frame = read_sensors(self.sim, sc.noise, self.rng_sensor)
            frame = self._estimate(frame, k)
            theta = self._theta(frame)
            while events and events[0]["t"] <= t + 1e-9:
                self._apply(events.pop(0), k, theta)
            if self.ramp is not None:
                start, end, k0, k1 = self.ramp
                a = min(1.0, (k - k0) / (k1 - k0))
                self.theta_ref = start + a * (end - start)
                self._base_cache = None
                if a >= 1.0:
                    self.ramp = None
            scores = self._anomaly(frame, theta, k)
            if k % self.schema_every == 0:
                self._upper_dynamic(frame, theta, k)
            l_ref = self._l_ref(frame, theta, k)
            ec_active = k < self.ec_until
            if self.ec_moves and not ec_active and np.any(self.ec_offset):
                self.ec_offset = np.zeros(self.model.n_muscles)
            for mv in self.ec_moves:
                if mv["reached_tick"] is None and k > mv["tick"] and \
                        np.max(np.abs(self.sim.state.theta - np.asarray(mv["theta_end"]))) < max(EC_TOL, 0.02):
                    mv["reached_tick"] = k
            tau_nec = None
            if self.stack.config.mrc_enabled:
                tau_nec = -self.model.gravity_torque(theta, self.sim.gravity) if self.sim._has_gravity \
                    else np.zeros(self.model.n_joints)
            inputs = ReflexInputs(l_ref, self.theta_ref, tau_nec, self.ec_offset)
            out, new_state = self.stack.tick(frame, self.rstate, inputs)
            if self.stack.config.mrc_enabled:
                self.drift = max(self.drift, float(np.linalg.norm(theta - new_state.theta_init)))
            self.rstate = new_state
            rows.append(self._row(k, frame, theta, out, scores))
            if k == sc.n_ticks:
                break
            # a muscle flagged as ruptured is switched off; the plant itself ignores the rest
            cmd = MuscleCommands(np.where(self.healthy, out.f_ref, 0.0), out.current_enabled & self.healthy)
            for _ in range(self.n_sub):
                st = self.sim.step(cmd, sc.dt)
                self.max_c1 = max(self.max_c1, float(np.max(st.thermal.c1, initial=-np.inf)))
        return rows


def _window_metrics(header, rows, t0, t1, n_joints, target):
    col = {c: i for i, c in enumerate(header)}
    sel = [r for r in rows if t0 - 1e-9 <= r[0] <= t1 + 1e-9]
    if not sel:
        return {"ticks": 0}
    th = np.array([[r[col[f"theta_{j}"]] for j in range(n_joints)] for r in sel])
    ref = np.array([[r[col[f"theta_ref_{j}"]] for j in range(n_joints)] for r in sel])
    fcols = [i for c, i in col.items() if re.fullmatch(r"f_\d+", c)]
    f = np.array([[0.0 if r[i] is None else r[i] for i in fcols] for r in sel])
    c1cols = [i for c, i in col.items() if re.fullmatch(r"c1_\d+", c)]
    c1 = np.array([[-np.inf if r[i] is None else r[i] for i in c1cols] for r in sel])
    out = {"ticks": len(sel), "tracking_rmse": float(np.sqrt(np.mean((th - ref) ** 2))),
           "mean_total_tension": float(np.mean(f.sum(axis=1))), "max_c1": float(np.max(c1)),
           "mean_contact": float(np.mean([r[col["contact"]] for r in sel]))}
    if target is not None:
        out["contact_abs_error"] = float(np.mean([abs(r[col["contact"]] - target) for r in sel]))
    return out


def run_scenario(scenario, out_dir=None, overrides=None, seed=None, morphology=None):
    """Run a scenario (path, dict or parsed Scenario); optionally write telemetry.csv,
    summary.json and events.json into ``out_dir``.  Returns a ScenarioResult."""
    sc = scenario if isinstance(scenario, Scenario) else load_scenario(scenario, overrides, seed, morphology)
    runner = _Runner(sc)
    rows = runner.run()
    header = runner.header()
    N = runner.model.n_joints
    col = {c: i for i, c in enumerate(header)}
    th = np.array([[r[col[f"theta_{j}"]] for j in range(N)] for r in rows])
    ref = np.array([[r[col[f"theta_ref_{j}"]] for j in range(N)] for r in rows])
    detections = list(runner.astate.events) if runner.anet is not None else []
    ruptured = {r["muscle"]: r["tick"] for r in runner.ruptures}
    latency = None
    false_pos = 0
    for d in detections:
        if d["muscle"] in ruptured and d["tick"] >= ruptured[d["muscle"]]:
            if latency is None:
                latency = d["tick"] - ruptured[d["muscle"]]
        else:
            false_pos += 1
    mrc_cols = [i for c, i in col.items() if re.fullmatch(r"dl_mrc_\d+", c)]
    hold = sc.controller.get("contact_hold", {})
    target = hold.get("target")
    summary = {
        "name": sc.name,
        "seed": sc.seed,
        "telemetry_version": TELEMETRY_VERSION,
        "ticks": len(rows),
        "duration": sc.n_ticks * sc.control_dt,
        "tracking_rmse": float(np.sqrt(np.mean((th - ref) ** 2))),
        "final_theta": th[-1].tolist(),
        "max_c1": runner.max_c1,  # over every plant step, not only logged ticks
        "c1_max": float(sc.plant.thermal.c1_max),
        "max_mrc_drift": float(runner.drift),
        "final_max_dl_mrc": float(max((abs(rows[-1][i]) for i in mrc_cols if rows[-1][i] is not None),
                                      default=0.0)),
        "ruptures": runner.ruptures,
        "detections": detections,
        "detection_latency_ticks": latency,
        "false_positives": false_pos,
        "ec_moves": runner.ec_moves,
        "uncontrollable": runner.uncontrollable,
        "t_cost": runner.ec_moves[-1]["t_cost"] if runner.ec_moves else None,
        "windows": {name: _window_metrics(header, rows, float(a), float(b), N, target)
                    for name, (a, b) in sorted(sc.windows.items())},
    }
    events = [dict(e, kind="rupture_detected") for e in detections] + runner.notes
    result = ScenarioResult(summary, header, rows, events, runner.transitions)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


def write_outputs(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "telemetry.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(result.header)
        for r in result.rows:
            w.writerow([_fmt(v) for v in r])
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(result.summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "events.json"), "w") as fh:
        json.dump(result.events, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_telemetry(path):
    """Parse telemetry.csv into (header, float array); blank cells become NaN.

    Raises InvalidInputError listing the malformed rows.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return [], np.zeros((0, 0))
    header, body = rows[0], rows[1:]
    if not header or header[0] != "t":
        raise InvalidInputError("telemetry header must start with 't'")
    bad, data = [], []
    for n, r in enumerate(body, start=2):
        if len(r) != len(header):
            bad.append(n)
            continue
        try:
            data.append([float(v) if v != "" else math.nan for v in r])
        except ValueError:
            bad.append(n)
    if bad:
        raise InvalidInputError(f"malformed telemetry rows (line numbers): {bad[:20]}")
    return header, np.array(data).reshape(len(data), len(header))
