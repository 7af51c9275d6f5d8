"""Synthetic musculoskeletal models used by tests, demos and scenarios.

None of these replicate a real robot; they are small arms built so that
closed-form answers exist (constant or analytic moment arms, planar chains)
or so that grouping has a known answer.
"""

import numpy as np

from .morphology import JointDef, Link, MusclePath, MusculoskeletalModel

Z = (0.0, 0.0, 1.0)
X = (1.0, 0.0, 0.0)
Y = (0.0, 1.0, 0.0)


def _over_joint(d, y, z):
    return ((0, (-d, y, z)), (1, (0.0, y, z)), (1, (d, y, z)))


def pin_antagonist(r=0.02, d=0.1, length=0.3, mass=0.0, f_min=0.0, f_max=200.0, k_n=500.0,
                   ldot_min=-0.1, ldot_max=0.1, limits=(-1.2, 1.2), extra_flexor=False):
    """One revolute joint about z with a flexor/extensor pair of moment arm ``r``.

    Each muscle runs from a base point at (-d, +-r) over a child via-point
    directly above (flexor, +r) or below (extensor, -r) the joint axis, then
    along the link to x=+d.  The moment arm is exactly r at theta=0 and keeps
    its sign while tan(theta) < d/r.  With ``extra_flexor`` a second,
    weaker-arm flexor is added.
    """
    links = [Link("base"), Link("arm", mass, (length / 2, 0.0, 0.0))]
    joints = [JointDef(0, 1, Z, (0.0, 0.0, 0.0), limits, "pin")]
    common = dict(f_min=f_min, f_max=f_max, k_n=k_n, ldot_min=ldot_min, ldot_max=ldot_max)
    muscles = [
        MusclePath(_over_joint(d, r, 0.0), name="flexor", **common),
        MusclePath(_over_joint(d, -r, 0.0), name="extensor", **common),
    ]
    if extra_flexor:
        muscles.append(MusclePath(_over_joint(d, 0.6 * r, 0.01), name="flexor2", **common))
    return MusculoskeletalModel(links, joints, muscles, [(1, (length, 0.0, 0.0))])


def chord_pin(r=0.1):
    """Pin joint with one muscle between two points on a circle of radius r.

    Base point sits at angle 90 deg, child point at 0 deg, so the length is
    2 r sin((pi/2 - theta)/2).
    """
    links = [Link("base"), Link("arm")]
    joints = [JointDef(0, 1, Z, (0.0, 0.0, 0.0), (-1.5, 1.5), "pin")]
    muscles = [MusclePath(((0, (0.0, r, 0.0)), (1, (r, 0.0, 0.0))), name="chord")]
    return MusculoskeletalModel(links, joints, muscles, [(1, (r, 0.0, 0.0))])


def planar_two_link(L1=0.3, L2=0.25, r=0.02, masses=(0.0, 0.0), limits=(-2.5, 2.5), k_n=500.0):
    """Planar arm in the xy-plane with mono- and bi-articular antagonist pairs.

    Every muscle passes a via-point on the distal link directly above or below
    each joint it crosses, so its moment arm is exactly r (1.5 r for the
    bi-articular pair) at zero posture and keeps its sign within about
    +-1.1 rad.  Straight chords would instead lose the antagonist's moment arm
    after a few tenths of a radian and make co-contraction destabilizing.
    """
    links = [Link("base"), Link("upper", masses[0], (L1 / 2, 0, 0)), Link("fore", masses[1], (L2 / 2, 0, 0))]
    joints = [
        JointDef(0, 1, Z, (0.0, 0.0, 0.0), limits, "shoulder"),
        JointDef(1, 2, Z, (L1, 0.0, 0.0), limits, "elbow"),
    ]
    kw = dict(k_n=k_n)
    b = 1.5 * r
    muscles = [
        MusclePath(((0, (-0.08, r, 0.0)), (1, (0.0, r, 0.0)), (1, (0.08, r, 0.0))), name="shoulder_flexor", **kw),
        MusclePath(((0, (-0.08, -r, 0.0)), (1, (0.0, -r, 0.0)), (1, (0.08, -r, 0.0))), name="shoulder_extensor",
                   **kw),
        MusclePath(((1, (L1 - 0.08, r, 0.0)), (2, (0.0, r, 0.0)), (2, (0.08, r, 0.0))), name="elbow_flexor", **kw),
        MusclePath(((1, (L1 - 0.08, -r, 0.0)), (2, (0.0, -r, 0.0)), (2, (0.08, -r, 0.0))), name="elbow_extensor",
                   **kw),
        MusclePath(((0, (-0.06, b, 0.0)), (1, (0.0, b, 0.0)), (2, (0.0, b, 0.0)),
                    (2, (0.06, b, 0.0))), name="biarticular_flexor", **kw),
        MusclePath(((0, (-0.06, -b, 0.0)), (1, (0.0, -b, 0.0)), (2, (0.0, -b, 0.0)),
                    (2, (0.06, -b, 0.0))), name="biarticular_extensor", **kw),
    ]
    return MusculoskeletalModel(links, joints, muscles, [(2, (L2, 0.0, 0.0))])


def biarticular_chain():
    """Three-joint chain: A spans j0, B spans j0-j1, C spans j1-j2 (plus antagonists)."""
    links = [Link("l0"), Link("l1"), Link("l2"), Link("l3")]
    joints = [JointDef(k, k + 1, Z, (0.2 if k else 0.0, 0.0, 0.0), (-1.5, 1.5), f"j{k}") for k in range(3)]
    muscles = [
        MusclePath(((0, (-0.05, 0.02, 0.0)), (1, (0.05, 0.02, 0.0))), name="A"),
        MusclePath(((0, (-0.05, -0.03, 0.0)), (2, (0.05, -0.03, 0.0))), name="B"),
        MusclePath(((1, (0.1, 0.025, 0.0)), (3, (0.05, 0.025, 0.0))), name="C"),
        MusclePath(((2, (0.1, -0.02, 0.0)), (3, (0.05, -0.02, 0.0))), name="D"),
    ]
    return MusculoskeletalModel(links, joints, muscles, [(3, (0.2, 0.0, 0.0))])


def two_isolated_pairs():
    """Two joints on separate branches, each driven by its own antagonist pair."""
    links = [Link("base"), Link("a"), Link("b")]
    joints = [
        JointDef(0, 1, Z, (0.0, 0.0, 0.0), (-1.5, 1.5), "ja"),
        JointDef(0, 2, Z, (0.0, -1.0, 0.0), (-1.5, 1.5), "jb"),
    ]
    muscles = [
        MusclePath(((0, (-0.1, 0.02, 0.0)), (1, (0.1, 0.02, 0.0))), name="a_flex"),
        MusclePath(((0, (-0.1, -0.02, 0.0)), (1, (0.1, -0.02, 0.0))), name="a_ext"),
        MusclePath(((0, (-0.1, -0.98, 0.0)), (2, (0.1, 0.02, 0.0))), name="b_flex"),
        MusclePath(((0, (-0.1, -1.02, 0.0)), (2, (0.1, -0.02, 0.0))), name="b_ext"),
    ]
    return MusculoskeletalModel(links, joints, muscles, [(1, (0.3, 0, 0)), (2, (0.3, 0, 0))])


# link indices of the shoulder-shaped fixture
_PELVIS, _CHEST, _SCAP1, _SCAP2, _SH1, _SH2, _UPPER, _FORE, _FOREROT, _WRIST1, _HAND, _THIGH, _SHANK, _HEAD = range(14)

SHOULDER_TARGETS = (3, 4, 5)


def kengoro_shoulder():
    """Upper-body tree sized so that grouping the 3-DOF shoulder yields 10 muscles / 10 joints.

    Joints 0-9 form the spine-scapula-shoulder-arm chain, joints 3-5 are the
    shoulder.  A leg branch and a neck joint, each with their own muscles,
    sit outside the shoulder group.
    """
    links = [Link(n) for n in ("pelvis", "chest", "scap1", "scap2", "sh1", "sh2", "upper", "fore",
                               "forerot", "wrist1", "hand", "thigh", "shank", "head")]
    layout = [
        (_PELVIS, _CHEST, Z, (0.0, 0.0, 0.3), "spine"),
        (_CHEST, _SCAP1, Y, (0.0, 0.15, 0.2), "scap_elev"),
        (_SCAP1, _SCAP2, Z, (0.0, 0.05, 0.0), "scap_rot"),
        (_SCAP2, _SH1, X, (0.0, 0.05, 0.0), "sh_abd"),
        (_SH1, _SH2, Y, (0.0, 0.0, 0.0), "sh_flex"),
        (_SH2, _UPPER, Z, (0.0, 0.0, 0.0), "sh_rot"),
        (_UPPER, _FORE, Y, (0.0, 0.0, -0.28), "elbow"),
        (_FORE, _FOREROT, Z, (0.0, 0.0, -0.05), "pronation"),
        (_FOREROT, _WRIST1, Y, (0.0, 0.0, -0.2), "wrist_flex"),
        (_WRIST1, _HAND, X, (0.0, 0.0, 0.0), "wrist_dev"),
        (_PELVIS, _THIGH, Y, (0.0, 0.1, -0.05), "hip"),
        (_THIGH, _SHANK, Y, (0.0, 0.0, -0.4), "knee"),
        (_CHEST, _HEAD, X, (0.0, 0.0, 0.3), "neck"),
    ]
    joints = [JointDef(p, c, ax, o, (-1.2, 1.2), n) for p, c, ax, o, n in layout]

    def m(name, a, pa, b, pb):
        return MusclePath(((a, pa), (b, pb)), name=name)

    muscles = [
        # shoulder group: every one of these crosses the shoulder
        m("deltoid_ant", _SCAP2, (0.04, 0.06, 0.03), _UPPER, (0.03, 0.02, -0.1)),
        m("deltoid_post", _SCAP2, (-0.04, 0.06, 0.03), _UPPER, (-0.03, 0.02, -0.1)),
        m("supraspinatus", _SCAP2, (0.0, 0.02, 0.06), _UPPER, (0.01, 0.03, -0.02)),
        m("infraspinatus", _SCAP2, (-0.06, 0.0, -0.02), _UPPER, (-0.02, 0.01, -0.03)),
        m("teres_major", _SCAP2, (-0.05, -0.02, -0.08), _UPPER, (0.01, -0.02, -0.06)),
        m("pectoralis", _CHEST, (0.1, 0.05, 0.15), _UPPER, (0.02, -0.01, -0.07)),
        m("latissimus", _PELVIS, (-0.08, 0.08, 0.05), _UPPER, (-0.01, -0.02, -0.08)),
        m("triceps_long", _SCAP2, (-0.02, 0.03, -0.04), _FORE, (-0.03, 0.0, 0.03)),
        m("biceps", _SCAP2, (0.03, 0.04, 0.02), _FOREROT, (0.02, 0.01, -0.03)),
        m("forearm_long", _SCAP2, (0.02, -0.03, 0.01), _HAND, (0.02, 0.02, -0.05)),
        # outside the shoulder group
        m("brachialis", _UPPER, (0.02, 0.0, -0.18), _FORE, (0.02, 0.0, -0.03)),
        m("anconeus", _UPPER, (-0.02, 0.0, -0.2), _FORE, (-0.02, 0.0, -0.02)),
        m("wrist_flexor", _FORE, (0.015, 0.01, -0.1), _HAND, (0.015, 0.0, -0.03)),
        m("wrist_extensor", _FORE, (-0.015, 0.01, -0.1), _HAND, (-0.015, 0.0, -0.03)),
        m("trapezius", _CHEST, (-0.05, 0.05, 0.25), _SCAP2, (-0.02, 0.02, 0.02)),
        m("serratus", _CHEST, (0.05, 0.1, 0.05), _SCAP2, (0.02, -0.02, -0.03)),
        m("gluteus", _PELVIS, (-0.05, 0.1, 0.0), _THIGH, (-0.04, 0.0, -0.15)),
        m("iliopsoas", _PELVIS, (0.05, 0.1, 0.0), _THIGH, (0.04, 0.0, -0.15)),
        m("quadriceps", _THIGH, (0.04, 0.0, -0.2), _SHANK, (0.04, 0.0, -0.05)),
        m("hamstring", _THIGH, (-0.04, 0.0, -0.2), _SHANK, (-0.04, 0.0, -0.05)),
        m("neck_flex", _CHEST, (0.0, 0.04, 0.25), _HEAD, (0.0, 0.03, 0.05)),
        m("neck_ext", _CHEST, (0.0, -0.04, 0.25), _HEAD, (0.0, -0.03, 0.05)),
    ]
    return MusculoskeletalModel(links, joints, muscles, [(_HAND, (0.0, 0.0, -0.08))])


def random_postures(model, n, rng, margin=0.1):
    lo = np.where(np.isfinite(model.lower), model.lower + margin, -1.0)
    hi = np.where(np.isfinite(model.upper), model.upper - margin, 1.0)
    return rng.uniform(lo, hi, size=(n, model.n_joints))


FIXTURES = {
    "pin_antagonist": pin_antagonist,
    "pin_three_muscle": lambda **kw: pin_antagonist(extra_flexor=True, **kw),
    "pendulum": lambda **kw: pin_antagonist(**{"mass": 1.0, "limits": (-3.1, 3.1), **kw}),
    "planar_two_link": planar_two_link,
    "biarticular_chain": biarticular_chain,
    "two_isolated_pairs": two_isolated_pairs,
    "kengoro_shoulder": kengoro_shoulder,
}


def load_fixture(name, **kwargs):
    try:
        factory = FIXTURES[name]
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; known: {sorted(FIXTURES)}") from None
    return factory(**kwargs)
