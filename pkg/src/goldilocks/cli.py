"""Command-line entry points.

Subcommands bind a TOML config file (plus ``--set`` overrides and ``--seed``)
to the library: ``gen-data`` exports a dataset, ``run`` executes one arm,
``serve``/``client`` run the teacher/student as separate processes,
``compare`` runs both arms with compute-normalized step alignment and
renders the report, and ``report`` re-renders plots from existing CSVs.
Set ``GOLDILOCKS_LOG`` (debug/info/warning/error) to control verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys

from goldilocks import harness, protocol, report, students, teacher
from goldilocks.config import ConfigError, load_config

log = logging.getLogger("goldilocks")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="path to a TOML config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, default=None,
                   help="rebase all four seed streams from this value")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="goldilocks",
        description="Curriculum selection for group-relative policy "
                    "optimization, with synthetic students",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("gen-data", help="generate a dataset file")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="output dataset file (JSON lines)")

    p = sub.add_parser("run", help="run one experiment arm")
    _add_config_args(p)
    p.add_argument("--mode", choices=harness.MODES, required=True)
    p.add_argument("--out-csv", required=True, help="metrics CSV output path")
    p.add_argument("--save-teacher", default=None,
                   help="teacher checkpoint output path (goldilocks mode only)")

    p = sub.add_parser("serve", help="serve the teacher to student clients")
    _add_config_args(p)
    p.add_argument("--host", default=None, help="bind host (default from config)")
    p.add_argument("--port", type=int, default=None, help="bind port (default from config)")
    p.add_argument("--save-teacher", default=None,
                   help="write a teacher checkpoint after shutdown")

    p = sub.add_parser("client", help="run the student loop against a teacher server")
    _add_config_args(p)
    p.add_argument("--host", default=None, help="server host (default from config)")
    p.add_argument("--port", type=int, default=None, help="server port (default from config)")
    p.add_argument("--out-csv", required=True, help="metrics CSV output path")
    p.add_argument("--transcript", default=None,
                   help="record every protocol frame to this file")
    p.add_argument("--shutdown-server", action="store_true",
                   help="send a shutdown frame when the run completes")

    p = sub.add_parser("compare", help="run both arms and render the paired report")
    _add_config_args(p)
    p.add_argument("--out-dir", required=True, help="report output directory")

    p = sub.add_parser("report", help="render plots from existing metrics CSVs")
    p.add_argument("--goldilocks", required=True, help="curriculum-arm metrics CSV")
    p.add_argument("--baseline", required=True, help="baseline-arm metrics CSV")
    p.add_argument("--out-dir", required=True, help="report output directory")

    return parser


def _write_aligned_csv(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        columns = list(rows[0])
        fh.write(",".join(columns) + "\n")
        for row in rows:
            cells = []
            for col in columns:
                v = row[col]
                if isinstance(v, int):
                    cells.append(str(v))
                else:
                    cells.append("" if math.isnan(v) else repr(float(v)))
            fh.write(",".join(cells) + "\n")


def _cmd_gen_data(args, outputs) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    outputs.append(args.out)
    questions = cfg.train_questions()
    students.save_dataset(questions, args.out)
    log.info("wrote %d questions to %s", len(questions), args.out)
    return 0


def _cmd_run(args, outputs) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    if args.save_teacher and args.mode != "goldilocks":
        raise ConfigError("--save-teacher requires --mode goldilocks")
    if args.mode == "baseline":
        log.info("mode=baseline: teacher disabled, sampling uniformly")
    else:
        log.info("mode=goldilocks: teacher-driven selection enabled")
    outputs.append(args.out_csv)
    with harness.MetricsWriter(args.out_csv) as writer:
        result = harness.run_experiment(cfg, args.mode, on_step=writer.extend)
    log.info("wrote %d metric rows to %s", len(result.metrics), args.out_csv)
    if args.save_teacher:
        outputs.append(args.save_teacher)
        teacher.save_teacher(result.teacher, args.save_teacher)
    return 0


def _cmd_serve(args, outputs) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    host = args.host if args.host is not None else cfg.protocol.host
    port = args.port if args.port is not None else cfg.protocol.port
    dataset = cfg.train_questions()
    model = teacher.TeacherModel.initialize(
        cfg.dataset.feature_dim, embed_dim=cfg.teacher.embed_dim,
        positions=cfg.teacher.positions, pooling=cfg.teacher.pooling,
        seed=cfg.seeds.teacher,
    )
    server = protocol.serve(model, dataset, (host, port), cfg.teacher,
                            group_size=cfg.group_size,
                            selection_seed=cfg.seeds.selection,
                            update_seed=cfg.seeds.teacher)
    actual_host, actual_port = server.address
    print(f"serving on {actual_host}:{actual_port}", flush=True)
    try:
        while not server.wait(0.2):
            pass
    except KeyboardInterrupt:
        log.info("interrupted; shutting down")
    finally:
        server.close()
    if args.save_teacher:
        outputs.append(args.save_teacher)
        teacher.save_teacher(model, args.save_teacher)
    return 0


def _cmd_client(args, outputs) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    host = args.host if args.host is not None else cfg.protocol.host
    port = args.port if args.port is not None else cfg.protocol.port
    if args.transcript:
        outputs.append(args.transcript)
    outputs.append(args.out_csv)
    with harness.MetricsWriter(args.out_csv) as writer:
        result = harness.run_client_experiment(
            cfg, host, port, transcript_path=args.transcript,
            shutdown_server=args.shutdown_server, on_step=writer.extend,
        )
    log.info("wrote %d metric rows to %s", len(result.metrics), args.out_csv)
    return 0


def _cmd_compare(args, outputs) -> int:
    cfg = load_config(args.config, args.overrides, args.seed)
    log.info("running goldilocks arm: %d steps", cfg.total_steps)
    gold = harness.run_experiment(cfg, "goldilocks")
    baseline_cfg = dataclasses.replace(cfg, total_steps=cfg.baseline_steps())
    log.info("running baseline arm: %d steps (ratio %s)",
             baseline_cfg.total_steps, cfg.compute_ratio)
    base = harness.run_experiment(baseline_cfg, "baseline")

    os.makedirs(args.out_dir, exist_ok=True)
    paths = report.emit_report(gold.metrics, base.metrics, args.out_dir)
    outputs.extend(paths)
    aligned = harness.normalized_compare(gold.metrics, base.metrics, cfg.compute_ratio)
    aligned_path = os.path.join(args.out_dir, "aligned.csv")
    outputs.append(aligned_path)
    _write_aligned_csv(aligned, aligned_path)

    gold_acc = harness.final_accuracy(gold.metrics)
    base_acc = harness.final_accuracy(base.metrics)
    print(f"final accuracy (last-5 mean): goldilocks={gold_acc:.4f} "
          f"baseline={base_acc:.4f}", flush=True)
    return 0


def _cmd_report(args, outputs) -> int:
    gold = harness.read_metrics_csv(args.goldilocks)
    base = harness.read_metrics_csv(args.baseline)
    paths = report.emit_report(gold, base, args.out_dir)
    outputs.extend(paths)
    log.info("wrote %d report files to %s", len(paths), args.out_dir)
    return 0


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "run": _cmd_run,
    "serve": _cmd_serve,
    "client": _cmd_client,
    "compare": _cmd_compare,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("GOLDILOCKS_LOG", "info").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 2
    outputs: list[str] = []
    try:
        return COMMANDS[args.command](args, outputs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _remove_partial(outputs)
        return 2
    except (protocol.TransportError, protocol.ServerError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _remove_partial(outputs)
        return 1
    except Exception as exc:  # partial outputs must not survive
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        _remove_partial(outputs)
        return 1


def _remove_partial(outputs) -> None:
    for path in outputs:
        try:
            if os.path.exists(path):
                os.remove(path)
        except OSError:
            pass


if __name__ == "__main__":
    sys.exit(main())
