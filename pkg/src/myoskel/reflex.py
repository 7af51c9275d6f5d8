"""Low-level reflex controllers acting on muscle stiffness control.

Every reflex works by editing one muscle's stiffness ``k_msc`` or shifting its
commanded length.  The shifts (stretch-reflex contraction, thermal
relaxation, relaxation-control offset) are summed into one effective
reference length, which muscle stiffness control turns into a tension
reference:

    f_ref = f_bias + max(0, k_msc * (l - l_eff))
    l_eff = l_ref - dl_src + dl_mtc + dl_mrc
"""

import itertools
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np

from .allocation import AllocationProblem, allocate_relaxed, solve_qp
from .errors import InvalidInputError

AIC_EPS = 1e-6
IC_EPS = 1e-9
EC_MAX_CANDIDATES = 12
EC_TOL = 1e-3
EC_MAX_TIME = 10.0


@dataclass(frozen=True)
class MuscleCommandState:
    l_ref: float
    k_msc: float
    f_bias: float
    delta_l_src: float = 0.0
    delta_l_mtc: float = 0.0
    delta_l_mrc: float = 0.0
    current_enabled: bool = True

    @property
    def l_eff(self):
        return self.l_ref - self.delta_l_src + self.delta_l_mtc + self.delta_l_mrc


def msc_tension(l, cmd):
    return cmd.f_bias + max(0.0, cmd.k_msc * (l - cmd.l_eff))


# -- stretch reflex ----------------------------------------------------------

@dataclass(frozen=True)
class SrcParams:
    c_src_prime: float
    delta_l_src: float
    delta_t_src: float

    def __post_init__(self):
        if min(self.c_src_prime, self.delta_l_src, self.delta_t_src) <= 0:
            raise InvalidInputError("stretch reflex parameters must be positive")


def src_ratio_threshold(k_n, c_src):
    """Tension-ratio threshold equivalent to an elastic-extension jump c_src for f = exp(k_n dn)."""
    return math.expm1(k_n * c_src)


def src_triggered(f_prev, f_now, c_src_prime):
    return f_now - f_prev > c_src_prime * f_prev


def src_step(f_prev, f_now, params, cmd, dt):
    if dt <= 0:
        raise InvalidInputError("dt must be positive")
    if src_triggered(f_prev, f_now, params.c_src_prime):
        return replace(cmd, delta_l_src=params.delta_l_src)
    rate = params.delta_l_src / params.delta_t_src
    return replace(cmd, delta_l_src=max(0.0, cmd.delta_l_src - rate * dt))


# -- antagonist inhibition -----------------------------------------------------

def aic_direction(model, theta, theta_ref):
    d = np.asarray(theta_ref, dtype=float) - np.asarray(theta, dtype=float)
    norm = np.linalg.norm(d)
    if norm <= AIC_EPS:
        return None
    return model.muscle_jacobian(theta) @ (d / norm)


def aic_gains(model, theta, theta_ref, k_ref, c_aic=0.0):
    """Zero the stiffness of muscles that would lengthen along the motion (s_i >= c_aic)."""
    k_ref = np.asarray(k_ref, dtype=float)
    s = aic_direction(model, theta, theta_ref)
    if s is None:
        return k_ref.copy()
    return np.where(s < c_aic, k_ref, 0.0)


# -- thermal model and control -------------------------------------------------

class ThermalState(NamedTuple):
    c1: float  # core
    c2: float  # housing


class ThermalParams(NamedTuple):
    C1: float = 2.0
    C2: float = 20.0
    R1: float = 2.0
    R2: float = 3.0
    K: float = 5e-4
    c_a: float = 25.0
    c1_max: float = 50.0


def thermal_predict(state, f, params, dt):
    """Explicit Euler step of the two-resistor core/housing model."""
    if not 0 < dt <= 1:
        raise InvalidInputError("thermal dt must lie in (0, 1] s")
    c1, c2 = state
    C1, C2, R1, R2, K, c_a, _ = params
    dc1 = K / C1 * f * f - (c1 - c2) / (R1 * C1)
    dc2 = (c1 - c2) / (R1 * C2) - (c2 - c_a) / (R2 * C2)
    return ThermalState(c1 + dt * dc1, c2 + dt * dc2)


def thermal_steady_state(f, params):
    heat = params.K * f * f
    c2 = params.c_a + params.R2 * heat
    return ThermalState(c2 + params.R1 * heat, c2)


@dataclass
class ThermalLimit:
    f_limit: np.ndarray
    over_temperature: bool = False


def _braking_safe(state, f, params, dt, f_min, smoothness, max_steps=100000):
    """True if applying f now and then ramping down to f_min keeps c1 <= c1_max."""
    s = thermal_predict(state, f, params, dt)
    if s.c1 > params.c1_max:
        return False
    g = f
    for _ in range(max_steps):
        if g <= f_min:
            # at the floor: safe once the core stops heating
            dc1 = params.K / params.C1 * g * g - (s.c1 - s.c2) / (params.R1 * params.C1)
            if dc1 <= 0:
                return True
        g = max(f_min, g - smoothness)
        s = thermal_predict(s, g, params, dt)
        if s.c1 > params.c1_max:
            return False
    return True


def thermal_tension_limit(state, params, horizon_steps, dt, f_bounds, smoothness=math.inf, f_prev=None,
                          f_tol=1e-9):
    """Largest tension sequence that drives c1 to c1_max as fast as possible without exceeding it.

    Each step bisects on f; a candidate is accepted if c1 stays below the
    limit both after the step and while tension is then ramped down to
    ``f_min`` at the smoothness rate.  Bisection stops when the bracket is
    narrower than ``f_tol`` newtons.
    """
    if horizon_steps < 1:
        raise InvalidInputError("horizon must be at least one step")
    f_min, f_max = f_bounds
    if state.c1 > params.c1_max:
        return ThermalLimit(np.full(horizon_steps, float(f_min)), True)
    out = np.empty(horizon_steps)
    s = ThermalState(*state)
    prev = f_prev
    flagged = False
    for t in range(horizon_steps):
        lo = f_min if prev is None else max(f_min, prev - smoothness)
        hi = f_max if prev is None else min(f_max, prev + smoothness)
        if _braking_safe(s, hi, params, dt, f_min, smoothness):
            f = hi
        elif not _braking_safe(s, lo, params, dt, f_min, smoothness):
            f = lo
            flagged = True
        else:
            a, b = lo, hi
            while b - a > f_tol:
                mid = 0.5 * (a + b)
                if _braking_safe(s, mid, params, dt, f_min, smoothness):
                    a = mid
                else:
                    b = mid
            f = a
        out[t] = f
        s = thermal_predict(s, f, params, dt)
        prev = f
    return ThermalLimit(out, flagged)


@dataclass(frozen=True)
class MtcGains:
    d_gain: float = 1e-3
    dl_plus: float = 1e-4
    dl_minus: float = 1e-4

    def __post_init__(self):
        if min(self.d_gain, self.dl_plus, self.dl_minus) <= 0:
            raise InvalidInputError("MTC gains must be positive")


def mtc_relax_step(f, f_limit, cmd, gains):
    d = abs(f - f_limit)
    dl = cmd.delta_l_mtc
    if f > f_limit:
        dl += min(gains.d_gain * d - dl, gains.dl_plus * d)
    else:
        dl += max(0.0 - dl, -gains.dl_minus * d)
    return replace(cmd, delta_l_mtc=max(0.0, dl))


# -- maximum speed control -----------------------------------------------------

def ic_current_mask(model, theta, theta_dot, ldot_max=None, c_ic=0.0):
    """True where motor current stays on; False for fast-lengthening antagonists."""
    theta_dot = np.asarray(theta_dot, dtype=float)
    n = np.linalg.norm(theta_dot)
    M = model.n_muscles
    if n <= IC_EPS:
        return np.ones(M, dtype=bool)
    ldot_max = model.ldot_max if ldot_max is None else np.asarray(ldot_max, dtype=float)
    r = model.muscle_jacobian(theta) @ (theta_dot / n)
    return ~(r / ldot_max > c_ic)


def ec_step(model, theta, theta_end, mask, dt, W3=None):
    """One step of the motion simulation: the joint displacement that gets closest to
    theta_end while the unmasked muscles stay within their velocity bounds."""
    theta = np.asarray(theta, dtype=float)
    N = len(theta)
    W3 = np.eye(N) if W3 is None else np.asarray(W3, dtype=float)
    G = model.muscle_jacobian(theta)
    rows = np.flatnonzero(np.asarray(mask, dtype=bool))
    k = rows.size
    H = np.zeros((N + k, N + k))
    H[:N, :N] = 2 * W3
    c = np.concatenate([-2 * W3 @ (np.asarray(theta_end) - theta), np.zeros(k)])
    lb = np.concatenate([np.full(N, -np.inf), model.ldot_min[rows] * dt])
    ub = np.concatenate([np.full(N, np.inf), model.ldot_max[rows] * dt])
    A = np.hstack([G[rows], -np.eye(k)])
    res = solve_qp(H, c, lb, ub, A, np.zeros(k), x0=np.zeros(N + k))
    return res.x[:N], G


@dataclass
class EcSimulation:
    steps: int
    reached: bool
    distance: float
    length_changes: np.ndarray  # (steps, M)


def ec_simulate(model, theta_start, theta_end, mask, dt, W3=None, tol=EC_TOL, max_time=EC_MAX_TIME):
    theta = np.asarray(theta_start, dtype=float).copy()
    theta_end = np.asarray(theta_end, dtype=float)
    max_steps = int(math.floor(max_time / dt + 1e-9))
    dls = []
    steps = 0
    while np.max(np.abs(theta_end - theta)) >= tol and steps < max_steps:
        step, G = ec_step(model, theta, theta_end, mask, dt, W3)
        dls.append(G @ step)
        theta = model.clamp(theta + step)
        steps += 1
    dist = float(np.max(np.abs(theta_end - theta)))
    return EcSimulation(steps, dist < tol, dist, np.array(dls).reshape(steps, model.n_muscles))


@dataclass
class EcPlan:
    mask: np.ndarray  # per muscle, 0 = pre-elongated
    t_cost: int
    elongation_profile: np.ndarray  # (t_cost, M) slack needed at each step
    pre_elongation: np.ndarray  # (M,) maximum of the profile
    timeout: bool = False
    candidates: tuple = ()


def ec_candidates(model, theta_start, theta_end, c_ic=0.0):
    """Antagonists whose normalised lengthening along the motion exceeds c_ic."""
    d = np.asarray(theta_end, dtype=float) - np.asarray(theta_start, dtype=float)
    enabled = ic_current_mask(model, theta_start, d, c_ic=c_ic)
    return tuple(int(i) for i in np.flatnonzero(~enabled))


def ec_plan(model, theta_start, theta_end, dt, candidates=None, c_ic=0.0, W3=None, max_time=EC_MAX_TIME):
    """Choose which antagonists to pre-elongate by enumerating every mask over the candidates."""
    if candidates is None:
        candidates = ec_candidates(model, theta_start, theta_end, c_ic)
    candidates = tuple(int(i) for i in candidates)
    if len(candidates) > EC_MAX_CANDIDATES:
        raise InvalidInputError(f"at most {EC_MAX_CANDIDATES} candidate muscles can be enumerated")
    M = model.n_muscles
    best = None
    # most-freed masks first: they finish soonest and tighten the step cap for the rest
    for bits in sorted(itertools.product((0, 1), repeat=len(candidates)), key=sum):
        mask = np.ones(M, dtype=int)
        mask[list(candidates)] = bits
        horizon = max_time
        if best is not None and best[2].reached:
            # a mask still short of the target after the best step count cannot win
            horizon = min(max_time, (best[2].steps + 0.5) * dt)
        sim = ec_simulate(model, theta_start, theta_end, mask, dt, W3, max_time=horizon)
        if horizon < max_time and not sim.reached:
            continue
        key = (0 if sim.reached else 1, sim.steps if sim.reached else sim.distance, len(bits) - sum(bits), bits)
        if best is None or key < best[0]:
            best = (key, mask, sim)
    _, mask, sim = best
    freed = mask == 0
    cum = np.cumsum(sim.length_changes, axis=0)
    allowed = np.arange(1, sim.steps + 1)[:, None] * model.ldot_max[None, :] * dt
    profile = np.where(freed[None, :], np.maximum(0.0, cum - allowed), 0.0)
    pre = profile.max(axis=0) if sim.steps else np.zeros(M)
    return EcPlan(mask, sim.steps, profile, pre, not sim.reached, candidates)


# -- muscle relaxation control ---------------------------------------------------

@dataclass(frozen=True)
class MrcParams:
    dl_plus: float = 2e-4
    dl_minus: float = 1e-3
    dl_max: float = 0.01
    f_min: float = 2.0
    dtheta_max: float = 0.02


def mrc_step(model, theta, theta_init, l_ref_moving, f_meas, cmd_states, params, tau_nec, W2=None):
    """One relaxation-control tick; returns the updated per-muscle command states."""
    cmds = list(cmd_states)
    G = model.muscle_jacobian(theta)
    problem = AllocationProblem(G, tau_nec, model.f_min, model.f_max, W2=W2)
    f_nec = allocate_relaxed(problem).f
    if l_ref_moving:
        for i in np.argsort(-f_nec, kind="stable"):
            if cmds[i].delta_l_mrc > 0:
                cmds[i] = replace(cmds[i], delta_l_mrc=max(cmds[i].delta_l_mrc - params.dl_minus, 0.0))
                break
        return cmds
    if np.linalg.norm(np.asarray(theta) - np.asarray(theta_init)) > params.dtheta_max:
        return cmds
    for i in np.argsort(f_nec, kind="stable"):
        if f_meas[i] <= params.f_min:
            continue
        if cmds[i].delta_l_mrc + params.dl_plus > params.dl_max:
            continue
        cmds[i] = replace(cmds[i], delta_l_mrc=min(cmds[i].delta_l_mrc + params.dl_plus, params.dl_max))
        break
    return cmds


# -- composed stack --------------------------------------------------------------

@dataclass
class ReflexConfig:
    """Enable flags and constants for each controller; round-trips through JSON."""

    src_enabled: bool = False
    src: dict = field(default_factory=lambda: {"c_src_prime": 0.5, "delta_l_src": 0.005, "delta_t_src": 0.5})
    aic_enabled: bool = False
    aic: dict = field(default_factory=lambda: {"c_aic": 0.0})
    mtc_enabled: bool = False
    mtc: dict = field(default_factory=lambda: {"d_gain": 1e-3, "dl_plus": 1e-4, "dl_minus": 1e-4,
                                               "smoothness": 5.0, "thermal": {}})
    ic_enabled: bool = False
    ic: dict = field(default_factory=lambda: {"c_ic": 0.0})
    mrc_enabled: bool = False
    mrc: dict = field(default_factory=lambda: asdict(MrcParams()))
    k_msc: float = 1000.0
    f_bias: float = 5.0
    dt: float = 0.01

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise InvalidInputError(f"unknown reflex config keys {sorted(extra)}")
        cfg = cls()
        for k, v in d.items():
            cur = getattr(cfg, k)
            if isinstance(cur, dict):
                bad = set(v) - set(cur)
                if bad:
                    raise InvalidInputError(f"unknown keys in reflex section {k!r}: {sorted(bad)}")
                merged = dict(cur)
                merged.update(v)
                setattr(cfg, k, merged)
            else:
                setattr(cfg, k, v)
        return cfg

    def to_dict(self):
        return asdict(self)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def thermal_params(self):
        return ThermalParams(**self.mtc.get("thermal", {}))


@dataclass(frozen=True)
class ReflexState:
    cmds: tuple
    f_prev: np.ndarray
    l_ref_prev: np.ndarray
    theta_init: np.ndarray


@dataclass(frozen=True)
class ReflexInputs:
    """Upper-layer commands for one tick."""

    l_ref: np.ndarray
    theta_ref: np.ndarray = None
    tau_nec: np.ndarray = None
    l_offset: np.ndarray = None  # e.g. elongation-control pre-elongation


@dataclass(frozen=True)
class ReflexOutput:
    f_ref: np.ndarray
    current_enabled: np.ndarray
    f_limit: np.ndarray


class ReflexStack:
    """Fixed-order reflex tick: SRC, AIC, MTC, IC, MRC, then MSC."""

    def __init__(self, model, config=None):
        self.model = model
        self.config = config or ReflexConfig()
        self.src_params = SrcParams(**self.config.src)
        self.mtc_gains = MtcGains(**{k: self.config.mtc[k] for k in ("d_gain", "dl_plus", "dl_minus")})
        self.thermal = self.config.thermal_params()
        self.mrc_params = MrcParams(**self.config.mrc)

    def initial_state(self, l_ref, theta, k_msc=None, f_bias=None):
        M = self.model.n_muscles
        k = np.broadcast_to(self.config.k_msc if k_msc is None else k_msc, (M,))
        fb = np.broadcast_to(self.config.f_bias if f_bias is None else f_bias, (M,))
        cmds = tuple(MuscleCommandState(float(l_ref[i]), float(k[i]), float(fb[i])) for i in range(M))
        return ReflexState(cmds, np.zeros(M), np.asarray(l_ref, dtype=float).copy(), np.asarray(theta, dtype=float).copy())

    def tick(self, frame, state, inputs):
        """Pure state transition: (frame, state, inputs) -> (output, new state)."""
        cfg = self.config
        model = self.model
        M = model.n_muscles
        dt = cfg.dt
        l = np.asarray(frame.l, dtype=float)
        f = np.asarray(frame.f, dtype=float)
        theta = np.asarray(frame.theta if frame.theta is not None else frame.theta_est, dtype=float)
        l_ref = np.asarray(inputs.l_ref, dtype=float)
        offset = np.zeros(M) if inputs.l_offset is None else np.asarray(inputs.l_offset, dtype=float)
        cmds = [replace(c, l_ref=float(l_ref[i] + offset[i])) for i, c in enumerate(state.cmds)]

        if cfg.src_enabled:
            cmds = [src_step(float(state.f_prev[i]), float(f[i]), self.src_params, c, dt) for i, c in enumerate(cmds)]

        k_base = np.full(M, float(cfg.k_msc))
        if cfg.aic_enabled and inputs.theta_ref is not None:
            k_base = aic_gains(model, theta, inputs.theta_ref, k_base, cfg.aic["c_aic"])
        cmds = [replace(c, k_msc=float(k_base[i])) for i, c in enumerate(cmds)]

        f_limit = np.full(M, np.inf)
        if cfg.mtc_enabled:
            for i in range(M):
                th = ThermalState(float(frame.c1[i]), float(frame.c2[i]))
                lim = thermal_tension_limit(th, self.thermal, 1, dt, (float(model.f_min[i]), float(model.f_max[i])),
                                            cfg.mtc["smoothness"])
                f_limit[i] = lim.f_limit[0]
                cmds[i] = mtc_relax_step(float(f[i]), f_limit[i], cmds[i], self.mtc_gains)

        enabled = np.ones(M, dtype=bool)
        if cfg.ic_enabled and getattr(frame, "theta_dot", None) is not None:
            enabled = ic_current_mask(model, theta, frame.theta_dot, c_ic=cfg.ic["c_ic"])
        cmds = [replace(c, current_enabled=bool(enabled[i])) for i, c in enumerate(cmds)]

        moving = bool(np.any(np.abs(l_ref - state.l_ref_prev) > 1e-12))
        theta_init = theta.copy() if moving else state.theta_init
        if cfg.mrc_enabled and inputs.tau_nec is not None:
            cmds = mrc_step(model, theta, theta_init, moving, f, cmds, self.mrc_params, inputs.tau_nec)

        f_ref = np.array([msc_tension(float(l[i]), c) for i, c in enumerate(cmds)])
        out = ReflexOutput(f_ref, enabled, f_limit)
        return out, ReflexState(tuple(cmds), f.copy(), l_ref.copy(), theta_init)
