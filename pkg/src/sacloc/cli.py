"""``sacloc`` command-line entry point.

Subcommands: synth, train, eval, sinkhorn, gradcheck, ttest, experiment.
Exit status is 0 on success, 1 on usage or contract errors and 2 on I/O
errors.  Primary artifacts are byte-stable across re-runs; timestamps go
only to the run log.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import RunConfig, build_run_config, parse_assignment, read_config_file
from .errors import FormatError, SACError

log = logging.getLogger("sacloc")

EXIT_OK, EXIT_CONTRACT, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _emit(text: str, path: str | None) -> None:
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _setup_logging(verbose: bool, log_path: str | None) -> None:
    root = logging.getLogger("sacloc")
    root.handlers.clear()
    root.setLevel(logging.DEBUG)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(message)s"))
    root.addHandler(console)
    if log_path:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(log_path, mode="a", encoding="utf-8")
        fh.setLevel(logging.INFO)
        fh.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(fh)


# ----------------------------------------------------------------------
# config plumbing

def _load_config(args, flag_overrides: dict[str, str]) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = dict(parse_assignment(item) for item in args.set or [])
    overrides.update({k: str(v) for k, v in flag_overrides.items() if v is not None})
    return build_run_config(file_values, overrides)


def _flags(args, mapping: dict[str, str]) -> dict[str, str]:
    out = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            out[key] = ",".join(map(str, value)) if isinstance(value, (list, tuple)) else value
    return out


def _require(value: str, flag: str) -> str:
    if not value:
        raise UsageError(f"missing {flag} (or the matching paths.* config key)")
    return value


def _with_dataset_classes(cfg: RunConfig, data_dir, explicit: bool) -> RunConfig:
    from .datagen import load_synth_config
    from dataclasses import replace
    synth = load_synth_config(data_dir)
    if synth is not None and not explicit and synth.classes != cfg.train.classes:
        cfg.train = replace(cfg.train, classes=synth.classes)
    return cfg


def _explicit(args, key: str) -> bool:
    keys = {parse_assignment(s)[0] for s in args.set or []}
    if args.config:
        keys |= set(read_config_file(args.config))
    return key in keys


# ----------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    from .datagen import generate_dataset
    cfg = _load_config(args, _flags(args, {"seed": "synth.seed", "out": "paths.out",
                                           "train_videos": "synth.train_videos",
                                           "test_videos": "synth.test_videos"}))
    out = _require(cfg.paths.out, "--out")
    t0 = time.perf_counter()
    manifest = generate_dataset(cfg.synth, out)
    log.info("wrote %s in %.2fs", manifest, time.perf_counter() - t0)
    return EXIT_OK


def cmd_train(args) -> int:
    from .datagen import load_dataset
    from .localizer import save_run, train
    cfg = _load_config(args, _flags(args, {
        "data": "paths.data", "out": "paths.out", "mode": "train.attention_mode",
        "seed": "train.seed", "epochs": "train.epochs", "lr": "train.learning_rate"}))
    data = _require(cfg.paths.data, "--data")
    out = _require(cfg.paths.out, "--out")
    cfg = _with_dataset_classes(cfg, data, _explicit(args, "train.classes"))
    records = load_dataset(data, "train")
    log.info("training mode=%s seed=%d on %d videos", cfg.train.attention_mode, cfg.train.seed, len(records))
    t0 = time.perf_counter()
    params, history = train(records, cfg.train)
    save_run(out, params, cfg.train, history)
    log.info("trained in %.1fs; final loss %.6f", time.perf_counter() - t0, history[-1].loss if history else float("nan"))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .datagen import load_dataset
    from .experiment import detect, format_map, score_detections, write_detections, write_results_csv
    from .localizer import load_run, read_loss_log
    cfg = _load_config(args, _flags(args, {"data": "paths.data", "run": "paths.run", "out": "paths.out",
                                           "ap_mode": "eval.ap_mode", "iou": "eval.iou_thresholds"}))
    data = _require(cfg.paths.data, "--data")
    run = _require(cfg.paths.run, "--run")
    out = Path(cfg.paths.out or run)
    params, lconf = load_run(run)
    records = load_dataset(data, args.split)
    dets, _ = detect(params, records, lconf, threshold=args.threshold)
    maps = score_detections(dets, records, range(1, lconf.classes + 1), cfg.eval)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "detections.json", dets)
    rows = [(lconf.attention_mode, lconf.seed, f"{iou:g}", format_map(m)) for iou, m in maps.items()]
    write_results_csv(out / "results.csv", rows)
    if not args.no_figures:
        from .plotting import plot_loss_log, plot_map_curve
        plot_map_curve(maps, out / "map_vs_iou.png", label=lconf.attention_mode)
        loss_log = Path(run) / "loss_log.csv"
        if loss_log.exists():
            plot_loss_log(read_loss_log(loss_log), out / "loss_curve.png")
    for iou, m in maps.items():
        log.info("mAP@%g = %s", iou, format_map(m))
    return EXIT_OK


def cmd_sinkhorn(args) -> int:
    from .ot import AssignmentInstance, exact_oracle, sinkhorn_solve
    cfg = _load_config(args, _flags(args, {"epsilon": "sinkhorn.epsilon", "iterations": "sinkhorn.iterations"}))
    try:
        obj = json.loads(Path(args.instance).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{args.instance}: {exc}") from None
    instance = AssignmentInstance.from_json(obj)
    result = sinkhorn_solve(instance, cfg.sinkhorn)
    report = result.to_json(instance)
    report["config"] = {"epsilon": cfg.sinkhorn.epsilon, "gamma": cfg.sinkhorn.gamma,
                        "iterations": cfg.sinkhorn.iterations}
    if args.oracle:
        plan, loss = exact_oracle(instance)
        report["oracle"] = {"plan": plan.tolist(), "loss": loss}
    _emit(_dump_json(report), args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import REL_TOL, SUITES, run_suites
    names = tuple(SUITES) if args.suite == "all" else (args.suite,)
    results = run_suites(range(args.seeds), names)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status} {r.name} seed={r.seed} max_rel_err={r.max_rel_error:.3e} "
                     f"coords={r.coordinates} floor={r.floor:.1e} time={r.seconds:.2f}s")
    failed = [r for r in results if not r.passed]
    lines.append(f"{len(results) - len(failed)}/{len(results)} checks passed (tolerance {REL_TOL:g})")
    sys.stdout.write("\n".join(lines) + "\n")
    if args.out:
        report = [{"suite": r.name, "seed": int(r.seed), "max_rel_error": float(r.max_rel_error),
                   "coordinates": int(r.coordinates), "floor": float(r.floor), "passed": bool(r.passed)}
                  for r in results]
        _emit(_dump_json(report), args.out)
    return EXIT_CONTRACT if failed else EXIT_OK


def read_score_column(path, column: str | None = None, iou: float | None = None,
                      method: str | None = None) -> list[float]:
    """One numeric column of a CSV with a header row, optionally filtered."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise FormatError(f"{path}: no data rows")
    header = list(rows[0])
    if column is None:
        column = "map" if "map" in header else header[-1] if len(header) == 1 else None
        if column is None:
            raise FormatError(f"{path}: several columns {header}; pick one with --column")
    if column not in header:
        raise FormatError(f"{path}: no column {column!r} in {header}")
    if iou is not None:
        rows = [r for r in rows if "iou" in r and abs(float(r["iou"]) - iou) < 1e-9]
    if method is not None:
        rows = [r for r in rows if r.get("method") == method]
    try:
        return [float(r[column]) for r in rows]
    except ValueError as exc:
        raise FormatError(f"{path}: non-numeric value in column {column!r} ({exc})") from None


def cmd_ttest(args) -> int:
    from .metrics import students_t
    a = read_score_column(args.a, args.column, args.iou, args.method_a)
    b = read_score_column(args.b, args.column, args.iou, args.method_b)
    report = students_t(a, b)
    report.extra.update({"a": str(args.a), "b": str(args.b)})
    _emit(_dump_json(report.to_json()), args.out)
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiment import experiment_matrix
    cfg = _load_config(args, _flags(args, {"data": "paths.data", "out": "paths.out",
                                           "modes": "experiment.modes", "seeds": "experiment.seeds",
                                           "epochs": "train.epochs"}))
    data = _require(cfg.paths.data, "--data")
    out = Path(_require(cfg.paths.out, "--out"))
    cfg = _with_dataset_classes(cfg, data, _explicit(args, "train.classes"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    result = experiment_matrix(data, cfg.train, cfg.experiment.modes, cfg.experiment.seeds, out, cfg.eval,
                               baseline=cfg.experiment.baseline, treatment=cfg.experiment.treatment,
                               threads=args.threads, figures=cfg.experiment.figures and not args.no_figures)
    for iou, rep in result["ttests"].items():
        log.info("IoU %g: t=%.4f p=%.4g", iou, rep.t, rep.p)
    return EXIT_OK


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--log", help="run log path (timestamps live only here)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="sacloc", description="Structured attention composition toolkit.")
    p.add_argument("--version", action="version", version=f"sacloc {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic two-modality dataset")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--train-videos", type=int)
    s.add_argument("--test-videos", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a localizer; writes checkpoint and loss log")
    s.add_argument("--data")
    s.add_argument("--out", help="run directory")
    s.add_argument("--mode")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lr", type=float)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="detect on a split; writes detections, results CSV and figures")
    s.add_argument("--data")
    s.add_argument("--run", help="run directory from 'train'")
    s.add_argument("--out", help="output directory (default: the run directory)")
    s.add_argument("--split", default="test")
    s.add_argument("--threshold", type=float, default=0.5, help="frame probability threshold for decoding")
    s.add_argument("--ap-mode")
    s.add_argument("--iou", nargs="+", type=float, help="IoU thresholds")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sinkhorn", parents=[common], help="solve one assignment instance from JSON")
    s.add_argument("--instance", required=True, help="JSON with keys S, a_m, a_f")
    s.add_argument("--out", help="write the report here instead of stdout")
    s.add_argument("--epsilon", type=float)
    s.add_argument("--iterations", type=int)
    s.add_argument("--oracle", action="store_true", help="also report the exact LP solution")
    s.set_defaults(func=cmd_sinkhorn)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suites")
    s.add_argument("--suite", choices=("all", "ops", "ot", "sac"), default="all")
    s.add_argument("--seeds", type=int, default=20, help="number of random seeds per suite")
    s.add_argument("--out", help="also write a JSON report")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("ttest", parents=[common], help="Student's t-test between two score columns")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    s.add_argument("--column", help="score column (default: map, or the only column)")
    s.add_argument("--iou", type=float, help="keep only rows with this iou")
    s.add_argument("--method-a", help="keep only rows of --a with this method")
    s.add_argument("--method-b", help="keep only rows of --b with this method")
    s.add_argument("--out")
    s.set_defaults(func=cmd_ttest)

    s = sub.add_parser("experiment", parents=[common], help="train/evaluate a (mode, seed) matrix and t-test")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--modes", nargs="+")
    s.add_argument("--seeds", nargs="+", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--threads", type=int, help="parallel cells (default: SAC_THREADS or 1)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_experiment)
    return p


def _default_log(args) -> str | None:
    if getattr(args, "log", None):
        return args.log
    if args.command in ("train", "experiment") and getattr(args, "out", None):
        return str(Path(args.out) / "run.log")
    if args.command == "eval" and (getattr(args, "out", None) or getattr(args, "run", None)):
        return str(Path(args.out or args.run) / "run.log")
    return None


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONTRACT
    try:
        _setup_logging(args.verbose, _default_log(args))
        log.info("sacloc %s %s", __version__, " ".join(sys.argv[1:] if argv is None else argv))
        return args.func(args)
    except UsageError as exc:
        print(f"sacloc {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except FormatError as exc:
        print(f"sacloc {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except SACError as exc:
        print(f"sacloc {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except OSError as exc:
        print(f"sacloc {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        for h in list(logging.getLogger("sacloc").handlers):
            h.close()
            logging.getLogger("sacloc").removeHandler(h)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
