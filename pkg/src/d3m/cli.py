"""Command line: ``d3m <command> ...``.

Exit codes: 0 success, 1 usage or I/O error, 2 statistical gate failure,
3 integrity error (fingerprint or hyperparameter mismatch).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import queue
import socket
import sys
import threading
from dataclasses import asdict

import numpy as np

from . import datagen, oracle
from .calibrator import CalibrationConfig, calibrate, load_calibration, save_calibration
from .errors import ConfigMismatchError, D3MError, GateError, IntegrityError
from .experiment import (
    RunConfig,
    build_report,
    gate_document,
    run_experiment,
    write_json,
)
from .monitor import MonitorState, check_integrity, check_settings, validate_id_fpr
from .trainer import load_model, model_fingerprint, save_model, train

log = logging.getLogger("d3m")

EXIT_OK, EXIT_USAGE, EXIT_GATE, EXIT_INTEGRITY = 0, 1, 2, 3


def _setup_logging():
    level = os.environ.get("D3M_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _run_config(args) -> RunConfig:
    overrides = {"seed": getattr(args, "seed", None), "alpha": getattr(args, "alpha", None)}
    for key in ("m", "K", "tau", "T", "trials"):
        overrides[key] = getattr(args, key, None)
    if args.config:
        return RunConfig.from_file(args.config, **overrides)
    return RunConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_x(path, expect_labels=False):
    data = datagen.load_csv(path)
    if expect_labels and data.y is None:
        raise D3MError(f"{path}: a 'y' column is required")
    return data


def cmd_gen_blobs(args):
    cfg = _run_config(args)
    n = args.n if args.n is not None else cfg.n_train
    data = datagen.gen_blobs(n, cfg.d, cfg.separation, np.random.default_rng(cfg.seed))
    datagen.save_csv(data, args.out)
    return EXIT_OK


def cmd_gen_shift(args):
    cfg = _run_config(args)
    spec = datagen.BlobSpec(cfg.d, cfg.separation)
    batch, hidden = datagen.gen_shift(spec, args.kind, args.magnitude, args.rows,
                                      np.random.default_rng(cfg.seed))
    datagen.save_csv(datagen.Dataset(batch.x), args.out)
    if args.labels_out:
        # hidden labels go to a separate file so the monitor-facing batch stays unlabeled
        with open(args.labels_out, "w") as fh:
            fh.write("\n".join(str(int(v)) for v in hidden) + "\n")
    return EXIT_OK


def cmd_train(args):
    cfg = _run_config(args)
    data = _load_x(args.data, expect_labels=True)
    out = _out_dir(args)
    model = train(cfg.train_config(cfg.seed), data.x, data.y)
    fp = save_model(model, os.path.join(out, "model.json"))
    write_json(os.path.join(out, "config.json"), cfg.to_dict())
    print(json.dumps({"model": os.path.join(out, "model.json"), "fingerprint": fp}))
    return EXIT_OK


def cmd_calibrate(args):
    cfg = _run_config(args)
    model = load_model(args.model)
    pool = _load_x(args.heldout)
    out = _out_dir(args)
    record = calibrate(model, pool.x, cfg.calibration_config(cfg.seed), workers=args.workers)
    path = os.path.join(out, "calibration.json")
    save_calibration(record, path)
    print(json.dumps({"calibration": path, "phi_median": float(np.median(record.phi))}))
    return EXIT_OK


def cmd_validate(args):
    cfg = _run_config(args)
    model = load_model(args.model)
    record = load_calibration(args.calibration)
    pool = _load_x(args.validation)
    gate = validate_id_fpr(model, record, pool.x, cfg.alpha, cfg.trials, cfg.seed)
    out = args.out or os.path.dirname(os.path.abspath(args.calibration))
    os.makedirs(out, exist_ok=True)
    doc = gate_document(model, record, gate)
    write_json(os.path.join(out, "gate.json"), doc)
    print(json.dumps(doc, sort_keys=True))
    if not gate.passed:
        log.error("ID false-positive rate %.3f exceeds alpha %.3f", gate.fpr, gate.alpha)
        return EXIT_GATE
    return EXIT_OK


def _deployment_settings(args, record) -> CalibrationConfig:
    """Settings requested for deployment; unspecified ones default to the calibration's."""
    base = asdict(record.config)
    if args.config:
        with open(args.config) as fh:
            d = json.load(fh)
        for k in ("m", "K", "tau", "mode"):
            if k in d:
                base[k] = d[k]
    for k in ("m", "K", "tau"):
        v = getattr(args, k, None)
        if v is not None:
            base[k] = v
    return CalibrationConfig.from_dict(base)


def _require_gate(args, model, record, alpha):
    path = args.gate or os.path.join(os.path.dirname(os.path.abspath(args.calibration)), "gate.json")
    problem = None
    if not os.path.exists(path):
        problem = f"no gate report at {path} (run 'd3m validate')"
    else:
        with open(path) as fh:
            gate = json.load(fh)
        if gate.get("calibration_fingerprint") != record.fingerprint() or \
                gate.get("model_fingerprint") != model_fingerprint(model):
            raise IntegrityError(f"gate report {path} belongs to a different model or calibration")
        if not gate.get("passed"):
            problem = f"ID-FPR gate failed (fpr={gate.get('fpr')}, alpha={gate.get('alpha')})"
        elif abs(float(gate.get("alpha", -1)) - alpha) > 1e-12:
            problem = f"gate was validated at alpha={gate.get('alpha')}, not {alpha}"
    if problem is None:
        return
    if args.force:
        log.warning("!!! --force: proceeding despite: %s", problem)
        log.warning("!!! verdicts from an unvalidated monitor may not control the false-positive rate")
        return
    raise GateError(problem + "; pass --force to override")


def _open_monitor(args):
    alpha = args.alpha if args.alpha is not None else 0.10
    model = load_model(args.model)
    record = load_calibration(args.calibration)
    check_integrity(model, record)
    check_settings(record, _deployment_settings(args, record))
    _require_gate(args, model, record, alpha)
    return model, record, alpha


def cmd_monitor(args):
    model, record, alpha = _open_monitor(args)
    batch = _load_x(args.batch)
    m = record.config.m
    if len(batch) == 0 or len(batch) % m != 0:
        raise ConfigMismatchError(f"batch has {len(batch)} rows; expected a positive multiple of m={m}")
    state = MonitorState(model, record, alpha, seed=args.seed or 0)
    lines = []
    for row in batch.x:
        v = state.push(row)
        if v is not None:
            lines.append(v.to_json())
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return EXIT_OK


_EOF = object()


def serve_stream(state: MonitorState, reader, writer, max_queue=1024):
    """Read NDJSON ``{"x": [...]}`` lines, write one verdict line per completed window.

    A reader thread parses lines into a bounded queue (a full queue blocks the
    reader); this thread is the single writer. Malformed lines produce an
    ``{"error": ...}`` line and are skipped.
    """
    q: queue.Queue = queue.Queue(maxsize=max_queue)

    def read():
        try:
            for lineno, line in enumerate(reader, 1):
                if not line.strip():
                    continue
                try:
                    msg = json.loads(line)
                    x = np.asarray(msg["x"], dtype=np.float64)
                    q.put(("x", lineno, x))
                except (ValueError, KeyError, TypeError) as exc:
                    q.put(("error", lineno, f"malformed input: {exc}"))
        finally:
            q.put(_EOF)

    t = threading.Thread(target=read, daemon=True)
    t.start()
    emitted = 0
    while True:
        item = q.get()
        if item is _EOF:
            break
        kind, lineno, payload = item
        if kind == "error":
            out = json.dumps({"error": payload, "line": lineno})
        else:
            try:
                v = state.push(payload)
            except D3MError as exc:
                out = json.dumps({"error": str(exc), "line": lineno})
            else:
                if v is None:
                    continue
                out = v.to_json()
                emitted += 1
        writer.write(out + "\n")
        writer.flush()
    t.join()
    return emitted


def cmd_serve(args):
    model, record, alpha = _open_monitor(args)
    state = MonitorState(model, record, alpha, seed=args.seed or 0)
    transport = args.transport
    if transport == "stdio":
        serve_stream(state, sys.stdin, sys.stdout)
        return EXIT_OK
    if not transport.startswith("tcp:"):
        raise D3MError(f"unknown transport {transport!r} (use stdio or tcp:PORT)")
    port = int(transport.split(":", 1)[1])
    with socket.create_server(("127.0.0.1", port)) as srv:
        log.info("listening on 127.0.0.1:%d", srv.getsockname()[1])
        while True:
            conn, _ = srv.accept()
            # one connection at a time keeps the monitor state single-writer
            with conn, conn.makefile("r") as rf, conn.makefile("w") as wf:
                serve_stream(state, rf, wf)


def cmd_theory_check(args):
    instances = []
    if args.fixtures:
        with open(args.fixtures) as fh:
            data = json.load(fh)
        for d in data if isinstance(data, list) else [data]:
            instances.append(oracle.DiscreteInstance.from_dict(d))
    else:
        instances = [make() for make in oracle.FIXTURES.values()]
    rng = np.random.default_rng(args.seed or 0)
    for _ in range(args.random):
        instances.append(oracle.random_instance(rng))
    results, all_ok = [], True
    for inst in instances:
        report = oracle.compute_theory(inst)
        failures = report.check()
        all_ok &= not failures
        results.append({"name": inst.name, "report": report.to_dict(), "failures": failures,
                        "passed": not failures})
    doc = {"instances": results, "passed": all_ok, "count": len(results)}
    text = json.dumps(doc, sort_keys=True, indent=2)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return EXIT_OK if all_ok else EXIT_GATE


def cmd_experiment(args):
    cfg = _run_config(args)
    out = _out_dir(args)
    summary = run_experiment(cfg, out)
    if not summary["scenarios"]:
        print(json.dumps({"error": "no run passed the ID-FPR gate", "attempts": summary["attempts"]}))
        return EXIT_GATE
    build_report(out)
    print(json.dumps(summary["scenarios"], sort_keys=True, indent=2))
    return EXIT_OK


def cmd_report(args):
    report = build_report(args.run)
    print(json.dumps(report, sort_keys=True, indent=2))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="d3m", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, alpha=False):
        sp.add_argument("--config", help="flat JSON run config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        if alpha:
            sp.add_argument("--alpha", type=float, help="significance level (default 0.10)")
        return sp

    sp = common(sub.add_parser("gen-blobs", help="write a labeled two-blob CSV"))
    sp.add_argument("--n", type=int)
    sp.set_defaults(func=cmd_gen_blobs)

    sp = common(sub.add_parser("gen-shift", help="write a shifted, unlabeled batch CSV"))
    sp.add_argument("--kind", choices=datagen.SHIFT_KINDS, required=True)
    sp.add_argument("--magnitude", type=float, required=True)
    sp.add_argument("--rows", type=int, required=True)
    sp.add_argument("--labels-out", help="where to write hidden labels (evaluation only)")
    sp.set_defaults(func=cmd_gen_shift)

    sp = common(sub.add_parser("train", help="train a model from a labeled CSV"))
    sp.add_argument("--data", required=True)
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("calibrate", help="build the calibration record"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--heldout", required=True)
    sp.add_argument("--T", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--K", type=int)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_calibrate)

    sp = common(sub.add_parser("validate", help="ID false-positive gate"), alpha=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--calibration", required=True)
    sp.add_argument("--validation", required=True)
    sp.add_argument("--trials", type=int)
    sp.set_defaults(func=cmd_validate)

    for name, func, helptext in (("monitor", cmd_monitor, "score a batch file"),
                                 ("serve", cmd_serve, "stream verdicts over stdio or TCP")):
        sp = common(sub.add_parser(name, help=helptext), alpha=True)
        sp.add_argument("--model", required=True)
        sp.add_argument("--calibration", required=True)
        sp.add_argument("--gate", help="gate report (default: next to the calibration)")
        sp.add_argument("--force", action="store_true", help="run even without a passing gate")
        sp.add_argument("--m", type=int, help="deployment window size (must equal calibration)")
        sp.add_argument("--K", type=int)
        sp.add_argument("--tau", type=float)
        if name == "monitor":
            sp.add_argument("--batch", required=True)
        else:
            sp.add_argument("--transport", default="stdio", help="stdio or tcp:PORT")
        sp.set_defaults(func=func)

    sp = common(sub.add_parser("theory-check", help="verify theory relations on discrete instances"))
    sp.add_argument("--fixtures", help="JSON instance or list of instances")
    sp.add_argument("--random", type=int, default=0, help="also check N random instances")
    sp.set_defaults(func=cmd_theory_check)

    sp = common(sub.add_parser("experiment", help="gated end-to-end run with shift scenarios"), alpha=True)
    sp.set_defaults(func=cmd_experiment)

    sp = sub.add_parser("report", help="rebuild report.json/report.csv for a run directory")
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except IntegrityError as exc:
        log.error("integrity error: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except GateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (D3MError, OSError, ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
