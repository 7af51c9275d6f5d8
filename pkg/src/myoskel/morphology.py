"""Robot geometry and the kinematic maps between joint, muscle and task space.

A model is a tree of rigid links connected by revolute joints.  Muscles are
polylines through via-points fixed on links, so their moment arms change with
posture.  All Jacobians are central finite differences of the forward maps.
"""

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

log = logging.getLogger(__name__)

FD_STEP = 1e-6  # rad, central differences
IK_DAMPING = 1e-3


@dataclass(frozen=True)
class Link:
    name: str = ""
    mass: float = 0.0
    com: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class JointDef:
    parent_link: int
    child_link: int
    axis: tuple
    origin: tuple
    limits: tuple
    name: str = ""

    def __post_init__(self):
        axis = np.asarray(self.axis, dtype=float)
        if axis.shape != (3,) or abs(np.linalg.norm(axis) - 1.0) > 1e-9:
            raise InvalidInputError(f"joint {self.name!r}: axis must be a unit 3-vector, got {self.axis}")
        if np.asarray(self.origin, dtype=float).shape != (3,):
            raise InvalidInputError(f"joint {self.name!r}: origin must be a 3-vector")
        lo, hi = self.limits
        if not lo < hi:
            raise InvalidInputError(f"joint {self.name!r}: limits must satisfy min < max")


@dataclass(frozen=True)
class MusclePath:
    via_points: tuple  # ((link, (x, y, z)), ...)
    f_min: float = 0.0
    f_max: float = 200.0
    ldot_min: float = -0.1
    ldot_max: float = 0.1
    k_n: float = 500.0
    name: str = ""

    def __post_init__(self):
        if len(self.via_points) < 2:
            raise InvalidInputError(f"muscle {self.name!r}: needs at least two via-points")
        if self.f_min < 0 or not self.f_min < self.f_max:
            raise InvalidInputError(f"muscle {self.name!r}: require 0 <= f_min < f_max")
        if self.ldot_max <= 0:
            raise InvalidInputError(f"muscle {self.name!r}: ldot_max must be positive")
        if self.k_n <= 0:
            raise InvalidInputError(f"muscle {self.name!r}: k_n must be positive")


def _skew(axis):
    x, y, z = axis
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rotation(axis, angles):
    """Rodrigues rotation matrices about a fixed unit axis, batched over angles."""
    angles = np.asarray(angles, dtype=float)
    K = _skew(axis)
    s = np.sin(angles)[..., None, None]
    c = np.cos(angles)[..., None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


class MusculoskeletalModel:
    """Links, revolute joints, via-point muscles and end-effector points.

    Instances are treated as read-only once constructed.
    """

    def __init__(self, links, joints, muscles, end_effectors=()):
        self.links = tuple(links)
        self.joints = tuple(joints)
        self.muscles = tuple(muscles)
        self.end_effectors = tuple((int(k), tuple(float(v) for v in off)) for k, off in end_effectors)
        self._validate()
        self._build_tables()

    # -- construction -------------------------------------------------------

    @property
    def n_joints(self):
        return len(self.joints)

    @property
    def n_muscles(self):
        return len(self.muscles)

    def _validate(self):
        n_links = len(self.links)
        parent_joint = {}
        for j, jd in enumerate(self.joints):
            for k in (jd.parent_link, jd.child_link):
                if not 0 <= k < n_links:
                    raise InvalidInputError(f"joint {j} references missing link {k}")
            if jd.child_link in parent_joint:
                raise InvalidInputError(f"link {jd.child_link} has two parent joints")
            parent_joint[jd.child_link] = j
        # acyclic: walking up from any link must terminate
        for start in range(n_links):
            seen = set()
            k = start
            while k in parent_joint:
                if k in seen:
                    raise InvalidInputError("kinematic tree contains a cycle")
                seen.add(k)
                k = self.joints[parent_joint[k]].parent_link
        for i, m in enumerate(self.muscles):
            for link, off in m.via_points:
                if not 0 <= link < n_links:
                    raise InvalidInputError(f"muscle {i} references missing link {link}")
                if np.asarray(off, dtype=float).shape != (3,):
                    raise InvalidInputError(f"muscle {i}: via-point offsets must be 3-vectors")
        for k, _ in self.end_effectors:
            if not 0 <= k < n_links:
                raise InvalidInputError(f"end effector references missing link {k}")
        if self.muscles and self.n_muscles < self.n_joints:
            warnings.warn(f"model has fewer muscles ({self.n_muscles}) than joints ({self.n_joints})")
        self._parent_joint = parent_joint

    def _build_tables(self):
        # topological order of joints: parents before children
        depth = {}

        def link_depth(k):
            if k not in depth:
                j = self._parent_joint.get(k)
                depth[k] = 0 if j is None else link_depth(self.joints[j].parent_link) + 1
            return depth[k]

        self._joint_order = sorted(range(self.n_joints), key=lambda j: (link_depth(self.joints[j].child_link), j))
        self._axes = [np.asarray(jd.axis, dtype=float) for jd in self.joints]
        self._origins = [np.asarray(jd.origin, dtype=float) for jd in self.joints]
        self._skew = [_skew(a) for a in self._axes]
        self._skew2 = [K @ K for K in self._skew]
        self.lower = np.array([jd.limits[0] for jd in self.joints], dtype=float)
        self.upper = np.array([jd.limits[1] for jd in self.joints], dtype=float)

        links, offsets, seg_a, seg_b, seg_m = [], [], [], [], []
        for i, m in enumerate(self.muscles):
            base = len(links)
            for link, off in m.via_points:
                links.append(link)
                offsets.append(off)
            for s in range(len(m.via_points) - 1):
                seg_a.append(base + s)
                seg_b.append(base + s + 1)
                seg_m.append(i)
        self._via_links = np.array(links, dtype=int)
        self._via_offsets = np.array(offsets, dtype=float).reshape(-1, 3)
        self._seg_a = np.array(seg_a, dtype=int)
        self._seg_b = np.array(seg_b, dtype=int)
        self._seg_muscle = np.array(seg_m, dtype=int)
        self._seg_sum = np.zeros((len(seg_m), len(self.muscles)))
        self._seg_sum[np.arange(len(seg_m)), self._seg_muscle] = 1.0

        self.f_min = np.array([m.f_min for m in self.muscles], dtype=float)
        self.f_max = np.array([m.f_max for m in self.muscles], dtype=float)
        self.ldot_min = np.array([m.ldot_min for m in self.muscles], dtype=float)
        self.ldot_max = np.array([m.ldot_max for m in self.muscles], dtype=float)
        self.k_n = np.array([m.k_n for m in self.muscles], dtype=float)
        self.link_mass = np.array([lk.mass for lk in self.links], dtype=float)
        self.link_com = np.array([lk.com for lk in self.links], dtype=float).reshape(-1, 3)

        if self.muscles:
            seg = np.linalg.norm(self.via_world(np.zeros(self.n_joints))[self._seg_b]
                                 - self.via_world(np.zeros(self.n_joints))[self._seg_a], axis=-1)
            if np.any(seg <= 1e-12):
                raise InvalidInputError("a muscle has a zero-length segment at the zero posture")

    # -- kinematics ---------------------------------------------------------

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.n_joints:
            raise InvalidInputError(f"expected {self.n_joints} joint angles, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise InvalidInputError("joint angles must be finite")
        return theta

    def clamp(self, theta):
        return np.clip(theta, self.lower, self.upper)

    def link_frames(self, theta):
        """World rotation (..., L, 3, 3) and position (..., L, 3) of every link."""
        theta = self._check_theta(theta)
        batch = theta.shape[:-1]
        L = len(self.links)
        R = np.broadcast_to(np.eye(3), batch + (L, 3, 3)).copy()
        p = np.zeros(batch + (L, 3))
        for j in self._joint_order:
            jd = self.joints[j]
            Rp = R[..., jd.parent_link, :, :]
            p[..., jd.child_link, :] = p[..., jd.parent_link, :] + Rp @ self._origins[j]
            sn = np.sin(theta[..., j])[..., None, None]
            cs = np.cos(theta[..., j])[..., None, None]
            R[..., jd.child_link, :, :] = Rp @ (np.eye(3) + sn * self._skew[j] + (1.0 - cs) * self._skew2[j])
        return R, p

    def points_world(self, theta, links, offsets):
        R, p = self.link_frames(theta)
        return np.einsum("...kij,kj->...ki", R[..., links, :, :], offsets) + p[..., links, :]

    def via_world(self, theta):
        return self.points_world(theta, self._via_links, self._via_offsets)

    def muscle_lengths(self, theta):
        theta = self._check_theta(theta)
        pts = self.via_world(theta)
        seg = np.linalg.norm(pts[..., self._seg_b, :] - pts[..., self._seg_a, :], axis=-1)
        return seg @ self._seg_sum

    def _fd(self, fn, theta, h=FD_STEP):
        theta = self._check_theta(theta)
        E = np.eye(self.n_joints) * h
        vals = fn(np.concatenate([theta + E, theta - E]))
        n = self.n_joints
        return ((vals[:n] - vals[n:]) / (2 * h)).T

    def muscle_jacobian(self, theta):
        """G(theta) = d l / d theta, shape (M, N)."""
        return self._fd(self.muscle_lengths, theta)

    def plant_terms(self, theta, gravity=None):
        """Muscle lengths, G and gravity torque from one batched frame evaluation."""
        theta = self._check_theta(theta)
        n = self.n_joints
        E = np.eye(n) * FD_STEP
        R, p = self.link_frames(np.vstack([theta[None], theta + E, theta - E]))
        pts = np.einsum("bkij,kj->bki", R[:, self._via_links], self._via_offsets) + p[:, self._via_links]
        lens = np.linalg.norm(pts[:, self._seg_b] - pts[:, self._seg_a], axis=-1) @ self._seg_sum
        G = ((lens[1:n + 1] - lens[n + 1:]) / (2 * FD_STEP)).T
        if gravity is None:
            return lens[0], G, np.zeros(n)
        com = np.einsum("bkij,kj->bki", R, self.link_com) + p
        U = -(com @ np.asarray(gravity, dtype=float)) @ self.link_mass
        return lens[0], G, -(U[1:n + 1] - U[n + 1:]) / (2 * FD_STEP)

    def lengths_and_jacobian(self, theta):
        """muscle_lengths and muscle_jacobian from one batched evaluation."""
        theta = self._check_theta(theta)
        n = self.n_joints
        E = np.eye(n) * FD_STEP
        vals = self.muscle_lengths(np.vstack([theta[None], theta + E, theta - E]))
        return vals[0], ((vals[1:n + 1] - vals[n + 1:]) / (2 * FD_STEP)).T

    def tensions_to_torque(self, theta, f):
        f = np.asarray(f, dtype=float)
        if np.any(f < 0):
            raise InvalidInputError("muscle tensions must be non-negative")
        return -self.muscle_jacobian(theta).T @ f

    def end_effector_position(self, theta, end_effector=0):
        if not 0 <= end_effector < len(self.end_effectors):
            raise InvalidInputError(f"no end effector {end_effector}")
        link, off = self.end_effectors[end_effector]
        return self.points_world(theta, np.array([link]), np.array([off]))[..., 0, :]

    def forward_kinematics(self, theta, end_effector=0):
        """End-effector position and its 3xN joint Jacobian."""
        theta = self._check_theta(theta)
        pos = self.end_effector_position(theta, end_effector)
        J = self._fd(lambda th: self.end_effector_position(th, end_effector), theta)
        return pos, J

    def com_world(self, theta):
        links = np.arange(len(self.links))
        return self.points_world(theta, links, self.link_com)

    def potential_energy(self, theta, gravity=(0.0, 0.0, -9.81)):
        return -(self.com_world(theta) @ np.asarray(gravity, dtype=float)) @ self.link_mass

    def gravity_torque(self, theta, gravity=(0.0, 0.0, -9.81)):
        """Generalised gravity force -dU/dtheta."""
        return -self._fd(lambda th: self.potential_energy(th, gravity)[..., None], theta)[0]

    # -- derived models -----------------------------------------------------

    def with_muscles(self, muscles):
        return MusculoskeletalModel(self.links, self.joints, muscles, self.end_effectors)

    # -- serialization ------------------------------------------------------

    def to_dict(self):
        return {
            "links": [{"name": lk.name, "mass": lk.mass, "com": list(lk.com)} for lk in self.links],
            "joints": [{"name": j.name, "parent": j.parent_link, "child": j.child_link, "axis": list(j.axis),
                        "origin": list(j.origin), "limits": list(j.limits)} for j in self.joints],
            "muscles": [{"name": m.name, "via_points": [{"link": k, "offset": list(o)} for k, o in m.via_points],
                         "f_min": m.f_min, "f_max": m.f_max, "ldot_min": m.ldot_min, "ldot_max": m.ldot_max,
                         "k_n": m.k_n} for m in self.muscles],
            "end_effectors": [{"link": k, "offset": list(o)} for k, o in self.end_effectors],
        }

    @classmethod
    def from_dict(cls, data):
        _reject_unknown(data, {"links", "joints", "muscles", "end_effectors"}, "morphology")
        links = []
        for d in data.get("links", []):
            _reject_unknown(d, {"name", "mass", "com"}, "link")
            links.append(Link(d.get("name", ""), float(d.get("mass", 0.0)), tuple(d.get("com", (0.0, 0.0, 0.0)))))
        joints = []
        for d in data.get("joints", []):
            _reject_unknown(d, {"name", "parent", "child", "axis", "origin", "limits"}, "joint")
            joints.append(JointDef(int(d["parent"]), int(d["child"]), tuple(d["axis"]), tuple(d.get("origin", (0, 0, 0))),
                                   tuple(d["limits"]), d.get("name", "")))
        muscles = [muscle_from_dict(d) for d in data.get("muscles", [])]
        ees = []
        for d in data.get("end_effectors", []):
            _reject_unknown(d, {"link", "offset"}, "end_effector")
            ees.append((int(d["link"]), tuple(d.get("offset", (0, 0, 0)))))
        return cls(links, joints, muscles, ees)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def muscle_from_dict(d):
    _reject_unknown(d, {"name", "via_points", "f_min", "f_max", "ldot_min", "ldot_max", "k_n"}, "muscle")
    vps = []
    for v in d["via_points"]:
        _reject_unknown(v, {"link", "offset"}, "via_point")
        vps.append((int(v["link"]), tuple(float(x) for x in v["offset"])))
    kw = {k: float(d[k]) for k in ("f_min", "f_max", "ldot_min", "ldot_max", "k_n") if k in d}
    return MusclePath(tuple(vps), name=d.get("name", ""), **kw)


def _reject_unknown(d, allowed, what):
    if not isinstance(d, dict):
        raise InvalidInputError(f"{what}: expected an object")
    extra = set(d) - allowed
    if extra:
        raise InvalidInputError(f"{what}: unknown keys {sorted(extra)}")


class ConstantArmModel:
    """Muscle map with posture-independent moment arms, l = l0 + G theta.

    Useful where a closed-form answer is wanted (scalar Kalman filter, speed
    bounds).  Exposes the same methods the estimators and planners call.
    """

    def __init__(self, G, l0=None, ldot_min=None, ldot_max=None, f_min=None, f_max=None):
        self.G = np.atleast_2d(np.asarray(G, dtype=float))
        M, N = self.G.shape
        self.l0 = np.zeros(M) if l0 is None else np.asarray(l0, dtype=float)
        self.ldot_min = np.full(M, -0.1) if ldot_min is None else np.asarray(ldot_min, dtype=float)
        self.ldot_max = np.full(M, 0.1) if ldot_max is None else np.asarray(ldot_max, dtype=float)
        self.f_min = np.zeros(M) if f_min is None else np.asarray(f_min, dtype=float)
        self.f_max = np.full(M, 200.0) if f_max is None else np.asarray(f_max, dtype=float)
        self.lower = np.full(N, -np.inf)
        self.upper = np.full(N, np.inf)

    @property
    def n_joints(self):
        return self.G.shape[1]

    @property
    def n_muscles(self):
        return self.G.shape[0]

    def clamp(self, theta):
        return np.asarray(theta, dtype=float)

    def muscle_lengths(self, theta):
        return self.l0 + np.asarray(theta, dtype=float) @ self.G.T

    def muscle_jacobian(self, theta):
        return self.G.copy()

    def plant_terms(self, theta, gravity=None):
        return self.muscle_lengths(theta), self.G.copy(), np.zeros(self.n_joints)

    def lengths_and_jacobian(self, theta):
        return self.muscle_lengths(theta), self.G.copy()

    def tensions_to_torque(self, theta, f):
        f = np.asarray(f, dtype=float)
        if np.any(f < 0):
            raise InvalidInputError("muscle tensions must be non-negative")
        return -self.G.T @ f


# -- functional API ---------------------------------------------------------

def muscle_lengths(model, theta):
    return model.muscle_lengths(theta)


def muscle_jacobian(model, theta):
    return model.muscle_jacobian(theta)


def tensions_to_torque(model, theta, f):
    return model.tensions_to_torque(theta, f)


def forward_kinematics(model, theta, end_effector=0):
    return model.forward_kinematics(theta, end_effector)


@dataclass
class IKResult:
    theta: np.ndarray
    converged: bool
    residual: float
    iterations: int
    history: list = field(default_factory=list, repr=False)


def solve_ik(model, p_ref, theta_init, end_effector=0, tol=1e-5, max_iter=200, damping=IK_DAMPING):
    """Damped least-squares IK with backtracking; returns the best iterate.

    Each iteration also tries a steepest-descent step and keeps whichever
    candidate lowers the error more.

    ``converged`` is False when the tolerance is not reached, either because
    the error stopped improving (< 1e-12 for 20 iterations) or the iteration
    budget ran out.
    """
    p_ref = np.asarray(p_ref, dtype=float)
    if p_ref.shape != (3,) or not np.all(np.isfinite(p_ref)):
        raise InvalidInputError("p_ref must be a finite 3-vector")
    theta = model.clamp(model._check_theta(theta_init).copy())
    pos, J = model.forward_kinematics(theta, end_effector)
    err = float(np.linalg.norm(p_ref - pos))
    history = [err]
    stalled = 0
    it = 0
    lam2 = damping**2
    while it < max_iter and err >= tol and stalled < 20:
        it += 1
        e = p_ref - pos
        g = J.T @ e
        Jg = J @ g
        steps = [J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(3), e)]
        if Jg @ Jg > 0:
            # steepest-descent step; near a singularity the damped step is huge along the
            # singular direction and backtracking would stall the well-conditioned joints
            steps.append(g * (g @ g) / (Jg @ Jg))
        cand, cerr = theta, err
        for step in steps:
            alpha = 1.0
            for _ in range(20):
                c = model.clamp(theta + alpha * step)
                ce = float(np.linalg.norm(p_ref - model.end_effector_position(c, end_effector)))
                if ce < err:
                    break
                alpha *= 0.5
            if ce < cerr:
                cand, cerr = c, ce
        stalled = stalled + 1 if err - cerr < 1e-12 else 0
        if cerr < err:
            theta, err = cand, cerr
            pos, J = model.forward_kinematics(theta, end_effector)
        history.append(err)
    return IKResult(theta, err < tol, err, it, history)
