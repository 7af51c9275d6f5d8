"""Command-line entry points: ``run``, ``train`` and ``report``.

Exit codes: 0 success, 2 scenario / input error, 3 simulation diverged,
4 non-finite training loss, 1 anything unexpected.  Errors are reported as
one JSON object per line on stderr.
"""

import argparse
import json
import logging
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .errors import (InvalidInputError, ScenarioError, SimulationDivergedError, TrainingError,
                     UncontrollableJointError)

log = logging.getLogger("myoskel")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_DIVERGED, EXIT_TRAINING = 0, 1, 2, 3, 4
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CliError(Exception):
    def __init__(self, code, kind, message, **extra):
        super().__init__(message)
        self.code, self.kind, self.extra = code, kind, extra


def _classify(exc):
    if isinstance(exc, CliError):
        return exc
    if isinstance(exc, SimulationDivergedError):
        return CliError(EXIT_DIVERGED, "simulation_diverged", str(exc), quantity=exc.quantity, time=exc.time)
    if isinstance(exc, TrainingError):
        return CliError(EXIT_TRAINING, "non_finite_loss", str(exc))
    if isinstance(exc, (ScenarioError, InvalidInputError, UncontrollableJointError, FileNotFoundError,
                        json.JSONDecodeError)):
        return CliError(EXIT_INPUT, type(exc).__name__, str(exc))
    return CliError(EXIT_FAIL, type(exc).__name__, str(exc))


def _emit_error(err, **context):
    payload = {"error": err.kind, "message": str(err), "exit_code": err.code, **context, **err.extra}
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_INPUT, "usage", f"{self.prog}: {message}")


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed {text!r} is not an integer")
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed {text} is outside the unsigned 64-bit range")
    return v


def _setting(text):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    if not key:
        raise argparse.ArgumentTypeError(f"--set has an empty key in {text!r}")
    return key, value


def build_parser():
    p = _Parser(prog="myoskel", description="Musculoskeletal control stack: scenarios, schema training, reports.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--morphology", help="fixture name or morphology JSON (overrides the scenario's)")
        sp.add_argument("--seed", type=_u64, help="unsigned 64-bit seed; all randomness derives from it")
        sp.add_argument("--set", dest="overrides", type=_setting, action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override applied to the scenario before validation (repeatable)")

    r = sub.add_parser("run", help="run one or more scenarios and write telemetry")
    r.add_argument("--scenario", required=True, nargs="+", help="scenario JSON file(s)")
    r.add_argument("--out", default="out", help="output directory (one subdirectory per scenario when several)")
    r.add_argument("--jobs", type=int, default=1, help="worker processes for a sweep of several scenarios")
    common(r)

    t = sub.add_parser("train", help="train a static or dynamic schema")
    src = t.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset", help="CSV dataset (static: theta/f/l columns; dynamic: see README)")
    src.add_argument("--scenario", help="generate the dataset from this scenario")
    t.add_argument("--kind", choices=("static", "dynamic"), default="static")
    t.add_argument("--out", required=True, help="output network JSON")
    t.add_argument("--dataset-out", help="also write the generated dataset here")
    t.add_argument("--samples", type=int, default=2000, help="static records generated from a scenario")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--hidden", default="64,64,64", help="comma-separated hidden widths")
    t.add_argument("--held-out", type=float, default=0.2, help="fraction of records kept for evaluation")
    t.add_argument("--rupture-dropout", type=float, default=0.0,
                   help="static only: train with a rupture-mask input and this dropout rate")
    common(t)

    rep = sub.add_parser("report", help="metric tables and SVG plots from run directories")
    rep.add_argument("runs", nargs="+", help="run directories (or a parent directory of several)")
    rep.add_argument("--out", help="where to write the report (default: next to each run)")
    return p


def configure_logging():
    name = os.environ.get("MYO_LOG_LEVEL", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise CliError(EXIT_INPUT, "usage", f"MYO_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s",
                        force=True)


# -- run ------------------------------------------------------------------------------

def _run_one(job):
    path, out_dir, overrides, seed, morphology = job
    from .scenario import run_scenario
    try:
        res = run_scenario(path, out_dir, overrides=overrides, seed=seed, morphology=morphology)
    except Exception as exc:  # reported by the parent, per scenario
        err = _classify(exc)
        return {"scenario": path, "code": err.code, "kind": err.kind, "message": str(err), "extra": err.extra}
    s = res.summary
    return {"scenario": path, "code": EXIT_OK, "out": out_dir, "name": s["name"], "ticks": s["ticks"],
            "tracking_rmse": s["tracking_rmse"], "max_c1": s["max_c1"]}


def _check_morphology(value):
    if value is None:
        return None
    from .fixtures import FIXTURES
    if value in FIXTURES:
        return value
    if not os.path.exists(value):
        raise CliError(EXIT_INPUT, "ScenarioError", f"morphology {value!r} is neither a fixture nor an existing file")
    return os.path.abspath(value)


def cmd_run(args):
    morphology = _check_morphology(args.morphology)
    if args.jobs < 1:
        raise CliError(EXIT_INPUT, "usage", "--jobs must be at least 1")
    for path in args.scenario:
        if not os.path.exists(path):
            raise CliError(EXIT_INPUT, "ScenarioError", f"scenario file {path!r} does not exist")
    several = len(args.scenario) > 1
    jobs = []
    for path in args.scenario:
        out = os.path.join(args.out, os.path.splitext(os.path.basename(path))[0]) if several else args.out
        jobs.append((path, out, [f"{k}={v}" for k, v in args.overrides], args.seed, morphology))
    if several and args.jobs > 1:
        with ProcessPoolExecutor(max_workers=min(args.jobs, len(jobs))) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    code = EXIT_OK
    for res in results:
        if res["code"] == EXIT_OK:
            print(json.dumps(res, sort_keys=True))
        else:
            _emit_error(CliError(res["code"], res["kind"], res["message"], **res["extra"]), scenario=res["scenario"])
            code = code or res["code"]
    return code


# -- train ----------------------------------------------------------------------------

def _hidden(text):
    try:
        widths = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise CliError(EXIT_INPUT, "usage", f"--hidden must be comma-separated integers, got {text!r}")
    if not widths or min(widths) < 1:
        raise CliError(EXIT_INPUT, "usage", "--hidden needs at least one positive width")
    return widths


def dynamic_columns(layout_in, layout_out):
    """CSV header of a dynamic dataset: x_t, dl_ref, then next_-prefixed x_{t+1}."""
    return layout_in.column_names() + [f"next_{c}" for c in layout_out.column_names()]


def generate_dataset(scenario, kind, rng, samples=2000):
    """Records from a parsed scenario: static rest states or recorded (x_t, dl_ref, x_next) transitions."""
    from .scenario import run_scenario
    from .schema import dynamic_layout, static_layout
    from .sim import sample_static_dataset

    M, N = scenario.model.n_muscles, scenario.model.n_joints
    if kind == "static":
        X = sample_static_dataset(scenario.model, samples, rng, scenario.plant, noise=scenario.noise or None)
        return static_layout(N, M).column_names(), X
    res = run_scenario(scenario)
    if not res.transitions:
        raise ScenarioError("scenario records no transitions; add controller.excitation or controller.contact_hold")
    lay_in, lay_out = dynamic_layout(N, M)
    X = np.array([np.concatenate([a, b, c]) for a, b, c in res.transitions])
    return dynamic_columns(lay_in, lay_out), X


def cmd_train(args):
    from .schema import (TrainParams, dynamic_layout, dynamic_loss, dynamic_schema, read_dataset, static_layout,
                         static_loss, static_schema, train_dynamic, train_static)
    from .scenario import load_scenario

    hidden = _hidden(args.hidden)
    if args.epochs < 0 or args.batch < 1 or not 0.0 <= args.held_out < 1.0 or args.samples < 2:
        raise CliError(EXIT_INPUT, "usage", "epochs >= 0, batch >= 1, 0 <= held-out < 1 and samples >= 2 are required")
    seeds = np.random.SeedSequence(0 if args.seed is None else args.seed).spawn(3)
    data_rng, split_rng = (np.random.default_rng(s) for s in seeds[:2])
    net_seed, train_seed = (int(v) for v in seeds[2].generate_state(2, dtype=np.uint32))

    if args.scenario is not None:
        sc = load_scenario(args.scenario, [f"{k}={v}" for k, v in args.overrides], args.seed,
                           _check_morphology(args.morphology))
        header, X = generate_dataset(sc, args.kind, data_rng, args.samples)
        if args.dataset_out:
            _write_csv(args.dataset_out, header, X)
    else:
        if not os.path.exists(args.dataset):
            raise CliError(EXIT_INPUT, "InvalidInputError", f"dataset {args.dataset!r} does not exist")
        try:
            header, X = read_dataset(args.dataset)
        except ValueError as exc:
            raise CliError(EXIT_INPUT, "InvalidInputError", f"{args.dataset}: {exc}")
    N, M = _infer_sizes(header, args.kind)
    if args.kind == "static":
        expected = static_layout(N, M).column_names()
    else:
        expected = dynamic_columns(*dynamic_layout(N, M))
    if header != expected:
        raise CliError(EXIT_INPUT, "InvalidInputError", f"dataset columns {header} do not match {expected}")
    if len(X) < 2:
        raise CliError(EXIT_INPUT, "InvalidInputError", "dataset needs at least two records")

    order = split_rng.permutation(len(X))
    n_eval = int(round(args.held_out * len(X)))
    train, held = X[order[n_eval:]], X[order[:n_eval]]
    params = TrainParams(epochs=args.epochs, lr=args.lr, batch=args.batch, seed=train_seed,
                         rupture_dropout=args.rupture_dropout)
    if args.kind == "static":
        net = static_schema(N, M, hidden, seed=net_seed, rupture_input=args.rupture_dropout > 0)
        result = train_static(net, train, params)

        def loss(X_):
            return static_loss(result.net, X_)
    else:
        S = N + 2 * M + 1
        net = dynamic_schema(N, M, hidden=hidden, seed=net_seed)
        result = train_dynamic(net, train[:, :S], train[:, S:S + M], train[:, S + M:], params)

        def loss(X_):
            return dynamic_loss(result.net, X_[:, :S], X_[:, S:S + M], X_[:, S + M:])
    train_loss, held_loss = loss(train), (loss(held) if len(held) else None)
    if not np.isfinite(train_loss) or (held_loss is not None and not np.isfinite(held_loss)):
        raise TrainingError("non-finite loss on the final network")
    result.net.save(args.out)
    print(json.dumps({"out": args.out, "kind": args.kind, "epochs": args.epochs, "records": len(X),
                      "train_loss": train_loss, "held_out_loss": held_loss}, sort_keys=True))
    return EXIT_OK


def _infer_sizes(header, kind):
    N = sum(1 for c in header if re.fullmatch(r"theta\d+", c))
    M = sum(1 for c in header if re.fullmatch(r"f\d+", c))
    if N == 0 or M == 0:
        raise CliError(EXIT_INPUT, "InvalidInputError", f"cannot find theta/f columns in {kind} dataset header")
    return N, M


def _write_csv(path, header, X):
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.atleast_2d(X):
            w.writerow([repr(float(v)) for v in row])


# -- report ---------------------------------------------------------------------------

SCALAR_TYPES = (int, float, str, bool, type(None))


def report_metrics(summary):
    """Flat metric table taken verbatim from a summary (windows become window.<name>.<metric>)."""
    out = {k: v for k, v in sorted(summary.items()) if isinstance(v, SCALAR_TYPES)}
    for name, w in sorted(summary.get("windows", {}).items()):
        for k, v in sorted(w.items()):
            out[f"window.{name}.{k}"] = v
    return out


def _columns(header, prefix):
    return [(c, i) for i, c in enumerate(header) if re.fullmatch(rf"{prefix}_\d+", c)]


def _plots(header, data, c1_max):
    from .svg import line_plot
    if data.shape[0] == 0:
        return {}
    t = data[:, 0]
    col = {c: i for i, c in enumerate(header)}
    plots = {}
    N = len(_columns(header, "theta"))
    series = []
    for j in range(N):
        series += [(f"theta_{j}", data[:, col[f"theta_{j}"]]), (f"theta_ref_{j}", data[:, col[f"theta_ref_{j}"]])]
    plots["theta.svg"] = line_plot("joint angle tracking", t, series, ylabel="rad")
    plots["tension.svg"] = line_plot("tensions", t, [(c, data[:, i]) for c, i in _columns(header, "f")],
                                     ylabel="N")
    hl = [("c1_max", float(c1_max))] if c1_max is not None else []
    plots["thermal.svg"] = line_plot("motor core temperature", t, [(c, data[:, i]) for c, i in _columns(header, "c1")],
                                     ylabel="degC", hlines=hl)
    an = _columns(header, "anomaly")
    if an and np.any(np.isfinite(data[:, [i for _, i in an]])):
        plots["anomaly.svg"] = line_plot("anomaly scores", t, [(c, data[:, i]) for c, i in an], ylabel="residual")
    return plots


def _run_dirs(paths):
    dirs = []
    for p in paths:
        if not os.path.isdir(p):
            raise CliError(EXIT_INPUT, "InvalidInputError", f"{p!r} is not a directory")
        if os.path.exists(os.path.join(p, "telemetry.csv")):
            dirs.append(p)
            continue
        subs = sorted(os.path.join(p, d) for d in os.listdir(p)
                      if os.path.exists(os.path.join(p, d, "telemetry.csv")))
        if not subs:
            raise CliError(EXIT_INPUT, "InvalidInputError", f"no telemetry.csv under {p!r}")
        dirs += subs
    return dirs


def _table(rows):
    if not rows:
        return "(no metrics)\n"
    width = max(len(k) for k, _ in rows)
    return "".join(f"{k.ljust(width)}  {json.dumps(v)}\n" for k, v in rows)


def cmd_report(args):
    from .scenario import read_telemetry
    from .svg import write_svg

    for d in _run_dirs(args.runs):
        out = d if args.out is None else os.path.join(args.out, os.path.basename(os.path.normpath(d)))
        os.makedirs(out, exist_ok=True)
        try:
            header, data = read_telemetry(os.path.join(d, "telemetry.csv"))
        except InvalidInputError as exc:
            raise CliError(EXIT_INPUT, "InvalidInputError", f"{d}: {exc}")
        summary = {}
        if os.path.exists(os.path.join(d, "summary.json")):
            with open(os.path.join(d, "summary.json")) as fh:
                summary = json.load(fh)
        metrics = report_metrics(summary) if data.shape[0] else {}
        with open(os.path.join(out, "report.json"), "w") as fh:
            json.dump({"run": d, "metrics": metrics}, fh, indent=1, sort_keys=True)
            fh.write("\n")
        text = f"# {summary.get('name', os.path.basename(os.path.normpath(d)))}\n" + _table(list(metrics.items()))
        with open(os.path.join(out, "report.txt"), "w") as fh:
            fh.write(text)
        plots = _plots(header, data, summary.get("c1_max")) if header else {}
        for name, svg in plots.items():
            write_svg(os.path.join(out, name), svg)
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"run": cmd_run, "train": cmd_train, "report": cmd_report}


def main(argv=None):
    try:
        configure_logging()
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except SystemExit as exc:  # --help
        return exc.code if isinstance(exc.code, int) else EXIT_OK
    except Exception as exc:
        err = _classify(exc)
        if err.code == EXIT_FAIL:
            log.debug("unexpected failure", exc_info=True)
        _emit_error(err)
        return err.code


if __name__ == "__main__":
    sys.exit(main())
