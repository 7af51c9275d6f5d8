"""Run the scripted reflex scenarios through the command line and build their reports.

    python3 demos/reflex_scenarios.py [out_dir]

* hold: stiffness control following two ramped setpoints.
* thermal: co-contraction far above the continuous rating; the thermal
  limiter keeps the motor core near its limit instead of past it.
* relaxation: relaxation control sheds internal force on a redundant pin and
  releases it again when the reference starts moving.
* ec_move: a two-link move with antagonist pre-elongation chosen by search.
* estimator: the joint-angle sensor is off; angles come from the length-based
  filter with periodic marker corrections.
"""

import json
import os
import sys

from myoskel.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))
NAMES = ["hold", "thermal", "relaxation", "ec_move", "estimator"]


def run(out):
    scenarios = [os.path.join(HERE, "scenarios", f"{n}.json") for n in NAMES]
    code = main(["run", "--scenario", *scenarios, "--out", out, "--jobs", str(min(len(NAMES), os.cpu_count() or 1))])
    if code:
        sys.exit(code)
    main(["report", out])
    for n in NAMES:
        with open(os.path.join(out, n, "summary.json")) as fh:
            s = json.load(fh)
        print(f"{n:11s} tracking RMSE {s['tracking_rmse']:.4f} rad, max c1 {s['max_c1']:.2f} degC "
              f"(limit {s['c1_max']:.1f})")
    with open(os.path.join(out, "relaxation", "summary.json")) as fh:
        w = json.load(fh)["windows"]
    cut = 1 - w["after"]["mean_total_tension"] / w["before"]["mean_total_tension"]
    print(f"relaxation removed {100 * cut:.0f}% of the summed tension")


if __name__ == "__main__":
    run(sys.argv[1] if len(sys.argv) > 1 else "demo_out/reflex")
