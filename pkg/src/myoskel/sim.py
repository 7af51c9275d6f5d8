"""Desk-scale tendon-driven plant used as ground truth for every controller.

Each muscle is a wire wound on a motor and terminated by a nonlinear
elastic element.  With ``motor_pos`` the wound-in length and ``L0`` the path
length at the zero posture, the elastic extension is

    dn = g_m(theta) + motor_pos - L0      (slack when dn <= 0)
    f  = exp(k_n dn) - 1                  (shifted law, f(0) = 0)

Joints have diagonal inertia, viscous damping and gravity.  Integration is
semi-implicit Euler.  Motors track a tension reference with a proportional
loop on the extension error, limited by the muscle-velocity bounds.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInputError, SimulationDivergedError
from .reflex import ThermalParams, ThermalState, thermal_predict

MAX_DT = 0.01


@dataclass
class ActuatorParams:
    pulley_radius: float = 0.01  # m, informational: tension limits are set per muscle
    gain: float = 50.0  # 1/s on extension error
    backdrivable: bool = True

    def __post_init__(self):
        if self.pulley_radius <= 0 or self.gain <= 0:
            raise InvalidInputError("actuator radius and gain must be positive")


@dataclass
class ContactSpring:
    """One-sided torsional spring on a joint: pushes back once theta[joint] > angle."""

    joint: int
    angle: float
    stiffness: float  # N m / rad
    arm: float = 0.1  # m, converts the contact torque into a reported force

    def torque_and_force(self, theta):
        pen = theta[self.joint] - self.angle
        if pen <= 0:
            return 0.0, 0.0
        t = self.stiffness * pen
        return -t, t / self.arm


@dataclass
class SimParams:
    inertia: object = 0.01  # kg m^2, scalar or per joint
    damping: object = 0.05  # N m s / rad
    gravity: tuple = (0.0, -9.81, 0.0)
    elastic_law: str = "shifted"  # or "exponential": f = exp(k_n dn), unit pretension
    actuator: ActuatorParams = field(default_factory=ActuatorParams)
    thermal: ThermalParams = field(default_factory=ThermalParams)
    contact: ContactSpring = None
    theta_sensor: bool = True

    def __post_init__(self):
        if self.elastic_law not in ("shifted", "exponential"):
            raise InvalidInputError(f"unknown elastic law {self.elastic_law!r}")


@dataclass(frozen=True)
class SimState:
    theta: np.ndarray
    theta_dot: np.ndarray
    motor_pos: np.ndarray
    delta_n: np.ndarray  # elastic extension, 0 when slack
    f: np.ndarray  # tension at this state
    thermal: ThermalState  # per-muscle arrays (c1, c2)
    rupture_flags: np.ndarray
    time: float = 0.0


@dataclass(frozen=True)
class SensorFrame:
    time: float
    l: np.ndarray  # motor-side length L0 - motor_pos
    l_path: np.ndarray  # geometric path length g_m(theta)
    f: np.ndarray
    c1: np.ndarray
    c2: np.ndarray
    theta: np.ndarray = None  # None when the joint-angle channel is off
    theta_dot: np.ndarray = None
    contact: float = 0.0
    theta_est: np.ndarray = None


@dataclass(frozen=True)
class MuscleCommands:
    f_ref: np.ndarray
    current_enabled: np.ndarray = None


def elastic_tension(delta_n, k_n, law="shifted"):
    """Tension of the elastic element; zero for slack (delta_n <= 0) wires."""
    delta_n = np.asarray(delta_n, dtype=float)
    taut = delta_n > 0
    x = np.where(taut, delta_n, 0.0) * k_n
    with np.errstate(over="ignore"):  # overflow becomes inf and is caught as divergence
        f = np.expm1(x) if law == "shifted" else np.exp(x)
    return np.where(taut, f, 0.0)


def extension_for_tension(f, k_n, law="shifted"):
    f = np.asarray(f, dtype=float)
    if law == "shifted":
        return np.log1p(np.maximum(f, 0.0)) / k_n
    return np.log(np.maximum(f, 1.0)) / k_n


class Simulator:
    """Owns the plant state; advance with :meth:`step`, observe with :func:`read_sensors`."""

    def __init__(self, model, params=None, theta0=None, seed=0):
        self.model = model
        self.params = params or SimParams()
        N, M = model.n_joints, model.n_muscles
        self.inertia = np.broadcast_to(np.asarray(self.params.inertia, dtype=float), (N,)).copy()
        self.damping = np.broadcast_to(np.asarray(self.params.damping, dtype=float), (N,)).copy()
        if np.any(self.inertia <= 0) or np.any(self.damping < 0):
            raise InvalidInputError("inertia must be positive and damping non-negative")
        self.gravity = np.asarray(self.params.gravity, dtype=float)
        self._has_gravity = bool(np.any(self.gravity != 0) and np.any(getattr(model, "link_mass", np.zeros(1)) > 0))
        self.L0 = model.muscle_lengths(np.zeros(N))
        self.rng = np.random.default_rng(seed)
        theta = model.clamp(np.zeros(N) if theta0 is None else np.asarray(theta0, dtype=float))
        l_path = model.muscle_lengths(theta)
        motor = self.L0 - l_path  # every wire just taut, zero tension
        c_a = self.params.thermal.c_a
        self._cache(theta, motor, np.zeros(M, dtype=bool))
        self.state = SimState(theta, np.zeros(N), motor, self._dn, self._f,
                              ThermalState(np.full(M, float(c_a)), np.full(M, float(c_a))), np.zeros(M, dtype=bool))

    # -- internals ----------------------------------------------------------

    def _cache(self, theta, motor, rupture):
        if hasattr(self.model, "plant_terms"):
            g = self.gravity if self._has_gravity else None
            self._l_path, self._G, self._tau_g = self.model.plant_terms(theta, g)
        else:
            self._l_path, self._G = self.model.lengths_and_jacobian(theta)
            self._tau_g = np.zeros(self.model.n_joints)
        self._raw = self._l_path + motor - self.L0
        self._dn = np.maximum(self._raw, 0.0)
        f = elastic_tension(self._raw, self.model.k_n, self.params.elastic_law)
        self._f = np.where(rupture, 0.0, f)

    def joint_torque(self, state=None):
        """Net joint torque at the current state (muscles, gravity, damping, contact)."""
        s = self.state if state is None else state
        tau = -self._G.T @ self._f - self.damping * s.theta_dot + self._tau_g
        if self.params.contact is not None:
            tau = tau.copy()
            tau[self.params.contact.joint] += self.params.contact.torque_and_force(s.theta)[0]
        return tau

    def contact_force(self):
        if self.params.contact is None:
            return 0.0
        return self.params.contact.torque_and_force(self.state.theta)[1]

    def set_contact_angle(self, angle):
        if self.params.contact is None:
            raise InvalidInputError("this plant has no contact channel")
        self.params.contact = replace(self.params.contact, angle=float(angle))

    def rupture(self, muscle):
        flags = self.state.rupture_flags.copy()
        flags[muscle] = True
        self._f = np.where(flags, 0.0, self._f)
        self.state = replace(self.state, rupture_flags=flags, f=self._f)

    def energy(self):
        """Kinetic plus gravitational potential energy (no elastic term)."""
        s = self.state
        e = 0.5 * float(self.inertia @ s.theta_dot ** 2)
        if self._has_gravity:
            e += float(self.model.potential_energy(s.theta, self.gravity))
        return e

    # -- stepping -----------------------------------------------------------

    def step(self, commands, dt):
        if not 0 < dt <= MAX_DT:
            raise InvalidInputError(f"dt must lie in (0, {MAX_DT}] s")
        model, p = self.model, self.params
        s = self.state
        M = model.n_muscles
        f_ref = np.clip(np.asarray(commands.f_ref, dtype=float), 0.0, model.f_max)
        enabled = np.ones(M, dtype=bool) if commands.current_enabled is None else np.asarray(commands.current_enabled, dtype=bool)
        motor = s.motor_pos
        if p.actuator.backdrivable and np.any(~enabled & (self._raw > 0)):
            # unpowered motors pay out wire until the elastic element is unloaded
            motor = motor - np.where(~enabled, np.maximum(self._raw, 0.0), 0.0)
            self._raw = self._l_path + motor - self.L0
            self._dn = np.maximum(self._raw, 0.0)
            self._f = np.where(~enabled, 0.0, self._f)
        f = self._f
        tau = self.joint_torque(s)

        theta_dot = s.theta_dot + dt * tau / self.inertia
        theta = s.theta + dt * theta_dot
        clamped = model.clamp(theta)
        hit = clamped != theta
        theta_dot = np.where(hit, 0.0, theta_dot)
        theta = clamped

        target = extension_for_tension(f_ref, model.k_n, p.elastic_law)
        w = np.clip(p.actuator.gain * (target - self._raw), -model.ldot_max, -model.ldot_min)
        motor = motor + dt * np.where(enabled, w, 0.0)

        thermal = thermal_predict(s.thermal, f, p.thermal, dt)
        t = s.time + dt
        checks = (("theta", theta), ("theta_dot", theta_dot), ("motor_pos", motor), ("tension", f),
                  ("c1", thermal.c1))
        if not np.isfinite(sum(float(np.sum(v)) for _, v in checks)):
            for name, val in checks:
                if not np.all(np.isfinite(val)):
                    raise SimulationDivergedError(name, t)
        self._cache(theta, motor, s.rupture_flags)
        self.state = SimState(theta, theta_dot, motor, self._dn, self._f,
                              ThermalState(np.asarray(thermal.c1), np.asarray(thermal.c2)), s.rupture_flags, t)
        self.last_applied_tension = f
        return self.state

    # -- morphology changes -------------------------------------------------

    def add_muscle(self, muscle):
        """Attach a new muscle, initially just taut, to the running plant."""
        s = self.state
        self.model = self.model.with_muscles(list(self.model.muscles) + [muscle])
        N = self.model.n_joints
        self.L0 = self.model.muscle_lengths(np.zeros(N))
        l_new = self.model.muscle_lengths(s.theta)[-1]
        motor = np.append(s.motor_pos, self.L0[-1] - l_new)
        rupture = np.append(s.rupture_flags, False)
        c_a = self.params.thermal.c_a
        thermal = ThermalState(np.append(s.thermal.c1, c_a), np.append(s.thermal.c2, c_a))
        self._cache(s.theta, motor, rupture)
        self.state = SimState(s.theta, s.theta_dot, motor, self._dn, self._f, thermal, rupture, s.time)


NOISE_CHANNELS = ("l", "l_path", "f", "c", "theta", "contact")


def read_sensors(sim, noise=None, rng=None):
    """Measure the plant.  ``noise`` maps channel name to Gaussian sigma.

    Noise is drawn from ``rng`` (default: the simulator's seeded generator)
    in a fixed channel order, so a seed reproduces the whole stream.
    """
    noise = noise or {}
    bad = set(noise) - set(NOISE_CHANNELS)
    if bad:
        raise InvalidInputError(f"unknown noise channels {sorted(bad)}")
    rng = sim.rng if rng is None else rng
    s = sim.state

    def noisy(key, x):
        sigma = float(noise.get(key, 0.0))
        x = np.asarray(x, dtype=float)
        if sigma == 0:
            return x.copy()
        return x + rng.normal(0.0, sigma, x.shape)

    l = noisy("l", sim.L0 - s.motor_pos)
    l_path = noisy("l_path", sim._l_path)
    f = noisy("f", s.f)
    c1 = noisy("c", s.thermal.c1)
    c2 = noisy("c", s.thermal.c2)
    theta = theta_dot = None
    if sim.params.theta_sensor:
        theta = noisy("theta", s.theta)
        theta_dot = s.theta_dot.copy()
    contact = float(noisy("contact", sim.contact_force()))
    return SensorFrame(s.time, l, l_path, f, c1, c2, theta, theta_dot, contact)


def marker_position(sim, end_effector=0, sigma=0.0, rng=None):
    """Ground-truth end-effector position plus isotropic Gaussian noise."""
    p = sim.model.end_effector_position(sim.state.theta, end_effector)
    if sigma == 0:
        return p
    rng = sim.rng if rng is None else rng
    return p + rng.normal(0.0, sigma, 3)


def run_scenario(scenario, out_dir=None, overrides=None, seed=None, morphology=None):
    """Run a scenario file or dict; see :mod:`myoskel.scenario`."""
    from .scenario import run_scenario as _run
    return _run(scenario, out_dir, overrides=overrides, seed=seed, morphology=morphology)


def motor_side_length(model, theta, f, law="shifted"):
    """Length the motor encoder reads once the elastic element carries tension f."""
    return model.muscle_lengths(theta) - extension_for_tension(f, model.k_n, law)


def sample_static_dataset(model, n, rng, params=None, cocontraction=(2.0, 30.0), noise=None, margin=0.1):
    """Records (theta, f, l) of the plant at rest in random postures.

    Tensions balance gravity with a random per-muscle co-contraction floor
    drawn from ``cocontraction``; lengths follow from the elastic law, so
    every record is a state the plant can hold.
    """
    from .allocation import AllocationProblem, allocate_exact, allocate_relaxed
    from .fixtures import random_postures

    params = params or SimParams()
    thetas = random_postures(model, n, rng, margin)
    M = model.n_muscles
    rows = []
    has_g = np.any(np.asarray(params.gravity) != 0)
    for theta in thetas:
        lo = rng.uniform(cocontraction[0], cocontraction[1], M)
        G = model.muscle_jacobian(theta)
        tau_g = model.gravity_torque(theta, params.gravity) if has_g else np.zeros(model.n_joints)
        prob = AllocationProblem(G, -tau_g, np.minimum(lo, model.f_max), model.f_max)
        sol = allocate_exact(prob)
        f = sol.f if sol.feasible else allocate_relaxed(prob).f
        l = motor_side_length(model, theta, f, params.elastic_law)
        rows.append(np.concatenate([theta, f, l]))
    X = np.array(rows)
    if noise:
        N = model.n_joints
        sig = np.concatenate([np.full(N, noise.get("theta", 0.0)), np.full(M, noise.get("f", 0.0)),
                              np.full(M, noise.get("l", 0.0))])
        X = X + rng.normal(0.0, 1.0, X.shape) * sig
    return X
