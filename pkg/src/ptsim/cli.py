"""Command line entry point: ``ptsim run|calibrate|report|circ|tomo``."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import optics
from .emission import read_counts_csv
from .qstate import PhysicalityError, process_fidelity, state_fidelity, ket
from .tomography import counts_of, fit_visibility, qpt_mle, qst_mle, setting_from_id

EXIT_OK, EXIT_CONFIG, EXIT_NONCONV, EXIT_PHYSICALITY = 0, 2, 3, 4


def _print_json(obj):
    print(json.dumps(ex._jsonable(obj), sort_keys=True, indent=2))


def cmd_run(args):
    config = ex.load_config(args.config)
    if args.output_dir:
        config = replace(config, output_dir=args.output_dir)
    if args.workers:
        config = replace(config, workers=args.workers)
    report = ex.run(config)
    _print_json({"scenario": report.scenario, "scalars": report.scalars, "errors": report.errors,
                 "output_dir": config.output_dir})
    if report.scenario == "CALIBRATE" and not report.calibration["converged"]:
        return EXIT_NONCONV
    return EXIT_OK


def cmd_calibrate(args):
    config = ex.load_config(args.config)
    config = replace(config, scenario=ex.Scenario.CALIBRATE, target_fe=args.target_fe,
                     target_vis=args.target_vis,
                     **({"output_dir": args.output_dir} if args.output_dir else {}))
    if args.no_rate:
        config = replace(config, target_uu_rate=0.0)
    report = ex.run(config)
    _print_json(report.calibration)
    return EXIT_OK if report.calibration["converged"] else EXIT_NONCONV


def _emit_fig3a(report, path):
    rows = [r for r in report["counts"] if r["setting_id"].startswith("vis/")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "yerr"])
        for r in rows:
            w.writerow([r["setting_id"].split("/")[1], r["raw"], float(np.sqrt(r["raw"]))])


def _emit_fig4a(report, path):
    s, e = report["scalars"], report["errors"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "yerr"])
        for label in ("H", "V", "+", "-", "L", "R"):
            for tag in ("raw", "sub"):
                key = f"F_{label}_{tag}"
                if key in s:
                    w.writerow([f"{label}_{tag}", s[key], e.get(key, "")])


def cmd_report(args):
    out = Path(args.dir)
    path = out / "report.json"
    if not path.exists():
        raise ex.ConfigError(f"no report.json in {out}")
    report = json.loads(path.read_text(encoding="utf-8"))
    for name in args.emit or []:
        target = out / name
        if "3a" in name:
            _emit_fig3a(report, target)
        elif "4a" in name:
            _emit_fig4a(report, target)
        else:
            raise ex.ConfigError(f"unknown figure {name!r}; expected fig3a or fig4a")
        print(target)
    if not args.emit:
        _print_json({"scenario": report["scenario"], "scalars": report["scalars"],
                     "errors": report["errors"]})
    return EXIT_OK


def cmd_circ(args):
    try:
        circuit = optics.load_circuit(args.file)
    except optics.CircuitError as exc:
        print(f"{args.file}:{exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.action == "parse":
        print(optics.format_circuit(circuit), end="")
    elif args.dump_matrices:
        print(optics.dump_matrices(circuit))
    else:
        for t in optics.compile(circuit):
            print(", ".join(t.labels))
    return EXIT_OK


def _state_result(records, subtract):
    counts, clamped = counts_of(records, subtract)
    settings = [setting_from_id(r.setting_id) for r in records]
    dim = settings[0].povm.shape[0]
    res = qst_mle(counts, settings, dim)
    return res, clamped


def cmd_tomo(args):
    if args.action == "state":
        records = read_counts_csv(args.counts)
        res, clamped = _state_result(records, args.subtract_bg)
        _print_json({"estimate": res.estimate, "log_likelihood": res.log_likelihood,
                     "converged": res.converged, "iterations": res.iterations,
                     "clamped": clamped})
        return EXIT_OK if res.converged else EXIT_NONCONV
    if args.action == "process":
        pairs = []
        for f in sorted(Path(args.runs).glob("*.csv")):
            label = f.stem
            if label not in ("H", "V", "plus", "minus", "L", "R", "+", "-"):
                continue
            label = {"plus": "+", "minus": "-"}.get(label, label)
            res, _ = _state_result(read_counts_csv(f), args.subtract_bg)
            pairs.append((ket(label), res))
        res = qpt_mle(pairs)
        fp = process_fidelity(res.estimate)
        _print_json({"chi": res.estimate.chi, "F_p": fp, "converged": res.converged,
                     "per_state_F": {str(i): state_fidelity(k, r.estimate)
                                     for i, (k, r) in enumerate(pairs)},
                     **res.diagnostics})
        return EXIT_OK if res.converged else EXIT_NONCONV
    records = read_counts_csv(args.scan)
    angles = [float(r.setting_id.split("/")[1]) if r.setting_id.startswith("vis/") else r.analyzer["p2"]
              for r in records]
    counts, _ = counts_of(records, args.subtract_bg)
    fit = fit_visibility(angles, counts)
    _print_json(fit.__dict__)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ptsim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the scenario described by a TOML config")
    r.add_argument("config")
    r.add_argument("--output-dir")
    r.add_argument("--workers", type=int)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("calibrate", help="fit noise parameters to raw F_e and visibility")
    c.add_argument("config")
    c.add_argument("--target-fe", type=float, default=0.81)
    c.add_argument("--target-vis", type=float, default=0.746)
    c.add_argument("--no-rate", action="store_true", help="drop the UU coincidence-rate target")
    c.add_argument("--output-dir")
    c.set_defaults(func=cmd_calibrate)

    rep = sub.add_parser("report", help="summarize a report directory or emit plot CSVs")
    rep.add_argument("dir")
    rep.add_argument("--emit", nargs="+", metavar="FILE")
    rep.set_defaults(func=cmd_report)

    circ = sub.add_parser("circ", help="optical-table files")
    circ.add_argument("action", choices=["parse", "compile"])
    circ.add_argument("file")
    circ.add_argument("--dump-matrices", action="store_true")
    circ.set_defaults(func=cmd_circ)

    t = sub.add_parser("tomo", help="reconstruct from count tables")
    t.add_argument("action", choices=["state", "process", "visibility"])
    t.add_argument("--counts")
    t.add_argument("--runs")
    t.add_argument("--scan")
    t.add_argument("--subtract-bg", action="store_true")
    t.set_defaults(func=cmd_tomo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "tomo":
        need = {"state": "counts", "process": "runs", "visibility": "scan"}[args.action]
        if getattr(args, need) is None:
            parser.error(f"tomo {args.action} requires --{need}")
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ex.NonConvergence as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        return EXIT_NONCONV
    except PhysicalityError as exc:
        print(f"physicality violation: {exc}", file=sys.stderr)
        return EXIT_PHYSICALITY
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
