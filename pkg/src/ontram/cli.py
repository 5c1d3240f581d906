"""Command-line interface.

    ontram simulate --config cfg.json         synthetic trial -> cohort.csv, truth.csv, schema.json
    ontram cv       --config cfg.json         cross-validation -> report.json and plot data
    ontram evaluate --config cfg.json --params fold_1/clinical/params.json
    ontram report   out/report.json [other/report.json ...] --output-dir cmp/
    ontram describe --config cfg.json         descriptive cohort summary

Every command reads one JSON config document (see README). Scalar fields
can be overridden with ``--set dotted.key=value`` (value parsed as JSON when
possible); precedence is flag > config > default.

Exit codes: 0 success, 2 config/validation error, 3 data error,
4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DomainError, OntramError, OptimizationError, ShapeError
from .metrics import descriptive_summary, format_summary
from .pipeline import (
    CONFIG_VERSION,
    RunConfig,
    compare_reports,
    load_cohort,
    run_cv,
    run_evaluate,
    set_dotted,
)
from .preprocessing import write_cohort_csv
from .serialization import dump_json, load_json
from .synthetic import GeneratorSpec, generate_rct, write_truth_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
log = logging.getLogger("ontram")


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (OptimizationError, DomainError)):
        return EXIT_NUMERIC
    if isinstance(exc, (DataError, ShapeError, OntramError)):
        return EXIT_DATA
    return 1


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load_raw_config(args) -> dict:
    raw = load_json(args.config) if args.config else {"version": CONFIG_VERSION}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_dotted(raw, key.strip(), _parse_value(value))
    if getattr(args, "output_dir", None):
        set_dotted(raw, "paths.output_dir", args.output_dir)
    if getattr(args, "input_csv", None):
        set_dotted(raw, "paths.input_csv", args.input_csv)
    if getattr(args, "embeddings_csv", None):
        set_dotted(raw, "paths.embeddings_csv", args.embeddings_csv)
    return raw


def _run_config(args) -> RunConfig:
    return RunConfig.from_dict(_load_raw_config(args))


def cmd_simulate(args) -> int:
    raw = _load_raw_config(args)
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {raw.get('version')!r}")
    spec = GeneratorSpec.from_dict(raw.get("simulate", {}))
    out = Path((raw.get("paths") or {}).get("output_dir", "out"))
    cohort = generate_rct(spec)
    out.mkdir(parents=True, exist_ok=True)
    write_cohort_csv(out / "cohort.csv", cohort.table)
    write_truth_csv(out / "truth.csv", cohort)
    dump_json(cohort.table.schema.to_dict(), out / "schema.json")
    t = cohort.table
    counts = np.bincount(t.outcome, minlength=spec.scale.class_count)
    print(f"wrote {t.n_rows} patients to {out / 'cohort.csv'}")
    print(f"treated {int(t.treatment.sum())}, control {int((1 - t.treatment).sum())}")
    print("outcome counts " + " ".join(f"{k}:{c}" for k, c in enumerate(counts)))
    print(f"favorable rate treated {t.favorable[t.treatment == 1].mean():.4f}, "
          f"control {t.favorable[t.treatment == 0].mean():.4f}")
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = _run_config(args)
    report, first_error = run_cv(cfg)
    out = Path(cfg.output_dir)
    for model, entry in report["models"].items():
        if "pooled" not in entry:
            continue
        print(f"[{model}] n={entry['n_test']}")
        for metric, v in entry["pooled"].items():
            print(f"  {metric:20s} {v['point']:.4f} [{v['lower']:.4f}, {v['upper']:.4f}]")
    print(f"report written to {out / 'report.json'}")
    return EXIT_OK if first_error is None else exit_code_for(first_error)


def cmd_evaluate(args) -> int:
    cfg = _run_config(args)
    out = Path(args.output) if args.output else Path(cfg.output_dir) / "evaluation.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report = run_evaluate(cfg, args.params, out)
    for metric, v in report["models"]["evaluated"]["pooled"].items():
        print(f"{metric:20s} {v['point']:.4f} [{v['lower']:.4f}, {v['upper']:.4f}]")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = [(Path(p).parent.name or Path(p).stem, load_json(p)) for p in args.reports]
    names = [n for n, _ in reports]
    if len(set(names)) != len(names):
        reports = [(f"{n}#{j + 1}", r) for j, (n, r) in enumerate(reports)]
    text, forest = compare_reports(reports)
    out = Path(args.output_dir)
    (out / "plots").mkdir(parents=True, exist_ok=True)
    (out / "summary.tsv").write_text(text, encoding="utf-8")
    with (out / "plots" / "odds_ratio_forest.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "feature", "odds_ratio", "lower", "upper"])
        for row in forest:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in row])
    sys.stdout.write(text)
    return EXIT_OK


def cmd_describe(args) -> int:
    cfg = _run_config(args)
    header, rows = descriptive_summary(load_cohort(cfg))
    sys.stdout.write(format_summary(header, rows))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ontram", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="JSON config document")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. stages.clinical.epochs=500")
        p.add_argument("--output-dir")
        return p

    p = with_config(sub.add_parser("simulate", help="generate a synthetic trial"))
    p.set_defaults(func=cmd_simulate)

    p = with_config(sub.add_parser("cv", help="cross-validate and evaluate"))
    p.add_argument("--input-csv")
    p.add_argument("--embeddings-csv")
    p.set_defaults(func=cmd_cv)

    p = with_config(sub.add_parser("evaluate", help="score a cohort with a saved model"))
    p.add_argument("--params", required=True)
    p.add_argument("--input-csv")
    p.add_argument("--embeddings-csv")
    p.add_argument("--output", help="report path (default: <output_dir>/evaluation.json)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="compare report.json files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--output-dir", default="report")
    p.set_defaults(func=cmd_report)

    p = with_config(sub.add_parser("describe", help="descriptive cohort summary"))
    p.add_argument("--input-csv")
    p.add_argument("--embeddings-csv")
    p.set_defaults(func=cmd_describe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except OntramError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
