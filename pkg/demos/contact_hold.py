"""Hold a contact force through a disturbance with a learned one-step dynamics model.

    python3 demos/contact_hold.py [out_dir]

A 100 s excitation run (random reference-length offsets, contact angle
redrawn every 5 s) provides transitions for the dynamic schema.  The hold
scenario then moves the contact surface at t = 3 s; with gradient-based
control through the learned model the contact reading returns toward its
target, without it the reading stays where the new geometry puts it.
"""

import os
import sys

import numpy as np

from myoskel.scenario import run_scenario
from myoskel.schema import TrainParams, dynamic_schema, train_dynamic

BASE = {"morphology": "pin_antagonist", "dt": 1e-3, "schema_dt": 0.05, "theta0": [0.3],
        "plant": {"damping": 0.2, "contact": {"joint": 0, "angle": 0.3, "stiffness": 2.0}},
        "noise": {"f": 0.01, "l": 1e-6, "theta": 1e-4, "contact": 0.01}}


def excitation(duration=100.0, seed=0):
    rng = np.random.default_rng(seed)
    timeline = [{"t": float(t), "event": "contact_angle", "angle": float(rng.uniform(0.2, 0.35))}
                for t in np.arange(5.0, duration, 5.0)]
    return dict(BASE, name="excite", seed=seed, duration=duration, timeline=timeline,
                controller={"mode": "length", "theta_ref": [0.4],
                            "excitation": {"sigma": 2e-4, "reversion": 0.1, "dl_bound": 5e-4}})


def hold(net_path, enabled):
    ctrl = {"net": net_path, "enabled": enabled, "target": 0.24, "horizon": 5, "iters": 20, "dl_bound": 5e-4}
    return dict(BASE, name="hold_on" if enabled else "hold_off", duration=8.0,
                controller={"mode": "length", "theta_ref": [0.4], "contact_hold": ctrl},
                timeline=[{"t": 3.0, "event": "contact_angle", "angle": 0.25}], windows={"after": [3.0, 8.0]})


def run(out):
    os.makedirs(out, exist_ok=True)
    T = run_scenario(excitation()).transitions
    X, D, Y = (np.array([t[i] for t in T]) for i in range(3))
    net = train_dynamic(dynamic_schema(1, 2, seed=0), X, D, Y, TrainParams(epochs=300, lr=1e-2)).net
    path = os.path.join(out, "dynamic_net.json")
    net.save(path)
    err = {}
    for enabled in (False, True):
        res = run_scenario(hold(path, enabled), os.path.join(out, "on" if enabled else "off"))
        err[enabled] = res.summary["windows"]["after"]["contact_abs_error"]
    print(f"mean |contact - target| after the disturbance: uncontrolled {err[False]:.4f}, "
          f"controlled {err[True]:.4f} ({100 * err[True] / err[False]:.0f}%)")


if __name__ == "__main__":
    run(sys.argv[1] if len(sys.argv) > 1 else "demo_out/contact")
