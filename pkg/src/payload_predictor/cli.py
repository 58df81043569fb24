"""Command-line interface.

Exit codes: 0 success, 2 configuration or input error, 3 numerical
failure, 4 acceptance threshold missed (``compare --check``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import load_config
from .errors import ConfigError, NumericalError, SchemaError

log = logging.getLogger("payload_predictor")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_THRESHOLD = 0, 2, 3, 4


class ThresholdFailure(Exception):
    pass


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def _config(args):
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"ref.seed={args.seed}"]
    return load_config(args.config, overrides)


def _read_log(path):
    from .labeling import ingest_flight_log

    with open(path) as fh:
        return ingest_flight_log(fh)


def _read_labels(paths):
    from .labeling import LabeledSet

    return [LabeledSet.from_csv(p) for p in paths]


def _events(cfg):
    from .sim import LoopEvent

    return [LoopEvent(float(t), payload_mass=float(m))
            for t, m in zip(cfg.run.step_times, cfg.run.step_masses)]


def _write_flight(log_, path):
    """Flight CSV without wall-clock columns (outputs stay reproducible)."""
    from dataclasses import replace

    from .trajlog import write_log_csv

    extras = {k: v for k, v in log_.extras.items() if not k.endswith("_ms")}
    ref = log_.meta.get("reference")
    if ref is not None and len(ref) == len(log_):
        for i, c in enumerate(("px_ref", "py_ref", "pz_ref")):
            extras[c] = np.asarray(ref)[:, i]
    write_log_csv(replace(log_, extras=extras), path)


def _timing_line(log_):
    parts = []
    for key in ("solve_ms", "refit_ms"):
        if key in log_.extras and len(log_.extras[key]):
            parts.append(f"{key} median {np.median(log_.extras[key]):.2f}")
    return ", ".join(parts)


def _reduction(nominal, other):
    """Relative error reduction; a zero nominal error leaves nothing to reduce."""
    if nominal > 0:
        return 1.0 - other / nominal
    return 0.0 if other == 0 else -np.inf


def _closed_loop(cfg, model, kind):
    from .mpc import run_closed_loop

    return run_closed_loop(cfg.sim, cfg.mpc, model, kind, cfg.run.duration,
                           ref_params=cfg.ref_params(kind), events=_events(cfg),
                           refit=cfg.run.refit)


# ---------------------------------------------------------------- commands

def cmd_simulate(args):
    from .mpc import MpcController
    from .sim import collect_dataset

    cfg = _config(args)
    kind = args.kind or cfg.ref.kind
    duration = args.duration or cfg.run.duration
    ctrl = MpcController(cfg.sim.nominal(), cfg.mpc)
    flight = collect_dataset(ctrl, kind, duration, cfg.run.rate, cfg.sim, cfg.ref_params(kind),
                             events=_events(cfg))
    path = _out(args, f"{args.name or 'flight_' + kind}.csv")
    _write_flight(flight, path)
    print(f"wrote {path} ({len(flight)} rows)")
    if flight.failed:
        raise NumericalError(flight.meta.get("failure") or "closed loop diverged")


def cmd_label(args):
    from .labeling import label_log

    cfg = _config(args)
    for p in args.log:
        labels = label_log(_read_log(p), cfg.sim.nominal(), derivatives=cfg.run.derivatives)
        path = _out(args, f"labels_{_stem(p)}.csv")
        labels.to_csv(path)
        print(f"wrote {path} ({len(labels)} rows)")


def cmd_train(args):
    from .metrics import write_reports_csv
    from .trainer import evaluate, train

    cfg = _config(args)
    sets = _read_labels(args.labels)

    def progress(epoch, losses):
        log.info("epoch %d L=%.6g", epoch, losses.L)

    result = train(sets, cfg.train, callback=progress)
    model_path = _out(args, "model.json")
    result.model.save(model_path)
    result.loss_curve_csv(_out(args, "loss_curve.csv"))
    reports = []
    for p, s in zip(args.labels, sets):
        ev = evaluate(result.model, s, refit=cfg.run.refit)
        for r in (ev.one_step, ev.multi_step):
            r.label = f"{_stem(p)}:{r.label}"
            reports.append(r)
    write_reports_csv(_out(args, "train_report.csv"), reports)
    print(f"wrote {model_path}; spectral radius {result.model.spectral_radius():.6f}, "
          f"Lipschitz bound {result.lipschitz:.6g}")


def cmd_eval(args):
    from .lls import LiftedModel
    from .metrics import write_reports_csv
    from .trainer import evaluate
    from .trajlog import HAT_COLUMNS, WRENCH_COLUMNS, write_columns_csv

    cfg = _config(args)
    model = LiftedModel.load(args.model)
    reports = []
    for p, s in zip(args.labels, _read_labels(args.labels)):
        ev = evaluate(model, s, n_ahead=args.n_ahead, refit=cfg.run.refit)
        cols = {"t": ev.t_one}
        cols.update({c: ev.pred_one[:, i] for i, c in enumerate(HAT_COLUMNS)})
        cols.update({c: ev.truth_one[:, i] for i, c in enumerate(WRENCH_COLUMNS)})
        write_columns_csv(_out(args, f"predictions_{_stem(p)}.csv"), cols)
        for r in (ev.one_step, ev.multi_step):
            r.label = f"{_stem(p)}:{r.label}"
            reports.append(r)
            print(f"{r.label}: RMSE_F {r.composites['F']:.4f} RMSE_t {r.composites['t']:.5f}")
    write_reports_csv(_out(args, "eval_report.csv"), reports)


def cmd_certify(args):
    from .certificate import build_certificate, verify_global_bound, write_report_csv
    from .lls import LiftedModel

    _config(args)
    model = LiftedModel.load(args.model)
    held = _read_labels([args.heldout])[0]
    bound_set = _read_labels(args.labels) + [held]
    cert = build_certificate(model, bound_set, n_max=max(args.n))
    cert.save(_out(args, "certificate.json"))
    rows = verify_global_bound(model, cert, held, args.n)
    write_report_csv(_out(args, "bound_report.csv"), rows)
    for r in rows:
        print(f"n={r.n}: {r.violations} violations over {r.starts} starts, "
              f"max ratio {r.max_ratio:.3g}")


def cmd_mpc_run(args):
    from .lls import LiftedModel
    from .metrics import tracking_rmse

    cfg = _config(args)
    kind = args.kind or cfg.ref.kind
    model = LiftedModel.load(args.model) if args.model else None
    flight = _closed_loop(cfg, model, kind)
    name = "np" if model is not None else "nominal"
    _write_flight(flight, _out(args, f"mpc_{name}_{kind}.csv"))
    if len(flight):
        e_xy, e_z = tracking_rmse(flight.p, flight.meta["reference"][:, :3])
        print(f"{name} {kind}: E_xy {e_xy:.4f} E_z {e_z:.4f}; {_timing_line(flight)}")
    if flight.failed:
        raise NumericalError(flight.meta.get("failure") or "closed loop diverged")


def cmd_compare(args):
    from .lls import LiftedModel
    from .metrics import tracking_rmse
    from .trajlog import write_columns_csv

    cfg = _config(args)
    model = LiftedModel.load(args.model)
    rows = {k: [] for k in ("trajectory", "controller", "E_xy", "E_z", "reduction_xy",
                            "reduction_z", "failed")}
    worst = np.inf
    for kind in args.kinds:
        errs = {}
        for name, m in (("nominal", None), ("np", model)):
            flight = _closed_loop(cfg, m, kind)
            _write_flight(flight, _out(args, f"compare_{name}_{kind}.csv"))
            e = tracking_rmse(flight.p, flight.meta["reference"][:, :3]) if len(flight) \
                else (np.inf, np.inf)
            if flight.failed:
                e = (np.inf, np.inf)
            errs[name] = e
            red = (_reduction(errs["nominal"][0], e[0]), _reduction(errs["nominal"][1], e[1])) \
                if name == "np" else (0.0, 0.0)
            for k, v in zip(rows, (kind, name, e[0], e[1], red[0], red[1], float(flight.failed))):
                rows[k].append(v)
            print(f"{kind} {name}: E_xy {e[0]:.4f} E_z {e[1]:.4f}; {_timing_line(flight)}")
        worst = min(worst, rows["reduction_xy"][-1], rows["reduction_z"][-1])
    rows["trajectory"] = np.array(rows["trajectory"], dtype=object)
    rows["controller"] = np.array(rows["controller"], dtype=object)
    write_columns_csv(_out(args, "compare.csv"), rows)
    if args.check and not worst >= cfg.run.threshold:
        raise ThresholdFailure(f"smallest error reduction {worst:.3f} is below "
                               f"{cfg.run.threshold:.3f}")


def cmd_plot(args):
    from .plotting import emit_plotdata

    _config(args)
    logs = [_read_log(p) for p in args.log]
    labels = args.labels or [_stem(p) for p in args.log]
    if args.kind == "wrench":
        for p, lg in zip(args.log, logs):
            paths = emit_plotdata([lg], "wrench", args.out_dir, stem=f"wrench_{_stem(p)}")
            print("wrote " + ", ".join(paths))
    else:
        paths = emit_plotdata(logs, "xy", args.out_dir, stem="xy", labels=labels)
        print("wrote " + ", ".join(paths))


# ---------------------------------------------------------------- parser

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="seed for training and random references")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="payload-predictor",
                                     description="Learned wrench prediction and MPC for a "
                                                 "quadrotor with a suspended payload.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="fly a reference with nominal MPC")
    p.add_argument("--kind", help="reference kind (default ref.kind)")
    p.add_argument("--duration", type=float)
    p.add_argument("--name", help="output file stem")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("label", parents=[common], help="wrench labels from flight logs")
    p.add_argument("--log", nargs="+", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", parents=[common], help="train a lifted model")
    p.add_argument("--labels", nargs="+", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="one- and multi-step prediction RMSE")
    p.add_argument("--model", required=True)
    p.add_argument("--labels", nargs="+", required=True)
    p.add_argument("--n-ahead", type=int, default=10)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("certify", parents=[common], help="prediction-error certificate")
    p.add_argument("--model", required=True)
    p.add_argument("--labels", nargs="*", default=[], help="extra labels for the bound set")
    p.add_argument("--heldout", required=True, help="labels the bound is verified on")
    p.add_argument("--n", type=int, nargs="+", default=[1, 5, 10, 20, 40])
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("mpc-run", parents=[common], help="closed-loop MPC flight")
    p.add_argument("--model", help="lifted model JSON (omit for nominal MPC)")
    p.add_argument("--kind")
    p.set_defaults(func=cmd_mpc_run)

    p = sub.add_parser("compare", parents=[common], help="nominal vs learned-wrench MPC")
    p.add_argument("--model", required=True)
    p.add_argument("--kinds", nargs="+", default=["circle", "lemniscate"])
    p.add_argument("--check", action="store_true",
                   help="exit 4 unless both errors drop by run.threshold")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", parents=[common], help="SVG plots and their data")
    p.add_argument("--log", nargs="+", required=True)
    p.add_argument("--kind", choices=["wrench", "xy"], default="xy")
    p.add_argument("--labels", nargs="+")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ThresholdFailure as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
