"""Command-line front end: dataset generation, training matrices, correlation
histograms and report summaries.

Exit codes are a stable contract for scripting: 0 success, 1 validation
error (bad flags, malformed experiment file, missing inputs), 2 runtime
failure. All output files are written atomically (temp file then rename)
and contain no timestamps, so reruns with identical flags are byte-identical.
``DECORRELAB_OUT_DIR`` supplies the default output directory when a command
is invoked without an explicit output path.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import (BiasSpec, DEFAULT_SIGNAL, IMAGE_SIZE, load_dataset, save_dataset,
                   synth_generate, write_manifest)
from .decorrelation import DecorreConfig
from .evaluation import (EvalReport, TrainConfig, histogram_of_correlations, hoc_rows,
                         kfold_split, records_csv_lines, records_from_csv_lines,
                         report_csv_lines, report_json, train_run)
from .models import save_state

ENV_OUT_DIR = "DECORRELAB_OUT_DIR"


class ValidationError(Exception):
    """User input is invalid; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are validation errors (exit 1)
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _default_out(filename: str, flag: str) -> Path:
    base = os.environ.get(ENV_OUT_DIR)
    if base is None:
        raise ValidationError(f"{flag} not given and {ENV_OUT_DIR} is not set")
    return Path(base) / filename


def _atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


# -- generate -------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.n < 1:
        raise ValidationError(f"--n must be >= 1, got {args.n}")
    if args.signal < 0:
        raise ValidationError(f"--signal must be >= 0, got {args.signal}")
    out = Path(args.out) if args.out else _default_out("dataset.crds", "--out")
    samples = synth_generate(args.n, args.seed, args.signal, args.size)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(out.name + ".tmp")
    save_dataset(samples, tmp, args.seed, args.signal)
    os.replace(tmp, out)
    manifest = out.with_suffix(".manifest.csv")
    folds = kfold_split(args.n, min(args.manifest_folds, args.n), args.seed)
    tmp = manifest.with_name(manifest.name + ".tmp")
    write_manifest(samples, tmp, folds)
    os.replace(tmp, manifest)
    print(f"wrote {args.n} samples to {out} (manifest: {manifest})")
    return 0


# -- experiment file ------------------------------------------------------------

_TRAIN_KEYS = {"epochs", "batch_size", "lr", "folds", "seed",
               "record_every", "record_batches", "augment"}
_DECORRE_KEYS = {"mode", "threshold", "low_factor", "midpoint", "floor",
                 "steepness", "guarantee", "eps", "filter_cr"}
_BIAS_KEYS = {"kind", "p_bias", "sigma_rel"}
_TOP_KEYS = {"dataset", "out_dir", "arch", "bias", "decorre",
             "insertion_points", "train", "conditions"}
_CONDITION_KEYS = {"name", "p_bias", "decorre"}


def _reject_unknown(obj: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise ValidationError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")


def load_experiment(path: Path) -> dict:
    """Parse and validate an experiment file; unknown keys are rejected."""
    try:
        text = path.read_text()
    except OSError as e:
        raise ValidationError(f"cannot read experiment file {path}: {e}") from e
    try:
        exp = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e
    if not isinstance(exp, dict):
        raise ValidationError(f"{path}: experiment must be a JSON object")
    _reject_unknown(exp, _TOP_KEYS, str(path))
    for key in ("dataset", "out_dir", "conditions"):
        if key not in exp:
            raise ValidationError(f"{path}: missing required key {key!r}")
    _reject_unknown(exp.get("train", {}), _TRAIN_KEYS, f"{path}: train")
    _reject_unknown(exp.get("decorre", {}), _DECORRE_KEYS, f"{path}: decorre")
    _reject_unknown(exp.get("bias", {}), _BIAS_KEYS, f"{path}: bias")
    if not isinstance(exp["conditions"], list) or not exp["conditions"]:
        raise ValidationError(f"{path}: conditions must be a non-empty list")
    names = set()
    for i, cond in enumerate(exp["conditions"]):
        where = f"{path}: conditions[{i}]"
        if not isinstance(cond, dict):
            raise ValidationError(f"{where}: must be an object")
        _reject_unknown(cond, _CONDITION_KEYS, where)
        if "name" not in cond:
            raise ValidationError(f"{where}: missing required key 'name'")
        if cond["name"] in names:
            raise ValidationError(f"{where}: duplicate condition name {cond['name']!r}")
        names.add(cond["name"])
    return exp


def experiment_configs(exp: dict) -> list[TrainConfig]:
    try:
        decorre_cfg = DecorreConfig(**exp.get("decorre", {}))
        base_bias = BiasSpec(**exp["bias"]) if "bias" in exp else None
        configs = []
        for cond in exp["conditions"]:
            bias = base_bias
            if bias is not None and "p_bias" in cond:
                bias = BiasSpec(bias.kind, cond["p_bias"], bias.sigma_rel)
            configs.append(TrainConfig(
                name=cond["name"],
                arch=exp.get("arch", "small"),
                bias=bias,
                decorre_enabled=bool(cond.get("decorre", False)),
                decorre_cfg=decorre_cfg,
                insertion_points=exp.get("insertion_points"),
                **exp.get("train", {}),
            ))
        return configs
    except (TypeError, ValueError) as e:
        raise ValidationError(f"experiment configuration invalid: {e}") from e


def write_run_outputs(out_dir: Path, report: EvalReport) -> None:
    run_dir = out_dir / report.name
    _atomic_write(run_dir / "report.csv", "\n".join(report_csv_lines(report)) + "\n")
    _atomic_write(run_dir / "report.json", report_json(report) + "\n")
    _atomic_write(run_dir / "records.csv", "\n".join(records_csv_lines(report.records)) + "\n")
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    for f, state in enumerate(report.fold_states):
        tmp = ckpt_dir / f"fold{f}.ckpt.tmp"
        save_state(state, tmp)
        os.replace(tmp, ckpt_dir / f"fold{f}.ckpt")


def cmd_train(args) -> int:
    exp = load_experiment(Path(args.experiment))
    dataset_path = Path(exp["dataset"])
    if not dataset_path.exists():
        raise ValidationError(f"dataset {dataset_path} does not exist; run 'generate' first")
    configs = experiment_configs(exp)
    samples, _meta = load_dataset(dataset_path)
    out_dir = Path(exp["out_dir"])
    for cfg in configs:
        print(f"training condition {cfg.name!r} "
              f"(bias={cfg.bias.kind + f'@{cfg.bias.p_bias}' if cfg.bias else 'none'}, "
              f"decorre={'on' if cfg.decorre_enabled else 'off'})", flush=True)
        report = train_run(cfg, samples)
        write_run_outputs(out_dir, report)
        for t in report.testsets:
            print(f"  {t}: mean AUC {report.mean_auc(t):.3f} (+/- {report.std_auc(t):.3f})")
    print(f"wrote {len(configs)} report(s) under {out_dir}")
    return 0


# -- hoc ---------------------------------------------------------------------


def _discover_record_files(records_dir: Path) -> dict[str, Path]:
    if not records_dir.exists():
        raise ValidationError(f"records directory {records_dir} does not exist")
    direct = records_dir / "records.csv"
    if direct.exists():
        return {records_dir.name: direct}
    found = {}
    for sub in sorted(records_dir.iterdir()):
        f = sub / "records.csv"
        if sub.is_dir() and f.exists():
            found[sub.name] = f
    if not found:
        raise ValidationError(f"no records.csv found under {records_dir}")
    return found


def cmd_hoc(args) -> int:
    if args.bins < 2:
        raise ValidationError(f"--bins must be >= 2, got {args.bins}")
    files = _discover_record_files(Path(args.records))
    by_condition = {}
    for cond, path in files.items():
        by_condition[cond] = records_from_csv_lines(path.read_text().splitlines())
    try:
        hoc = histogram_of_correlations(by_condition, args.bins, args.epoch)
    except ValueError as e:
        raise ValidationError(str(e)) from e
    out = Path(args.out) if args.out else _default_out("hoc.csv", "--out")
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["layer_id", "bin_left", "bin_right", "condition", "normalized_count"])
    for row in hoc_rows(hoc):
        writer.writerow([row[0], f"{row[1]:.10g}", f"{row[2]:.10g}", row[3], f"{row[4]:.10g}"])
    _atomic_write(out, buf.getvalue())
    print(f"wrote histogram of correlations for {len(files)} condition(s) to {out}")
    return 0


# -- report --------------------------------------------------------------------


def _parse_report_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    runs_dir = Path(args.runs)
    if not runs_dir.exists():
        raise ValidationError(f"runs directory {runs_dir} does not exist")
    report_files = sorted(runs_dir.glob("*/report.csv"))
    if (runs_dir / "report.csv").exists():
        report_files = [runs_dir / "report.csv"] + report_files
    if not report_files:
        raise ValidationError(f"no report.csv found under {runs_dir}")
    rows_out = []
    for path in report_files:
        rows = _parse_report_csv(path)
        by_testset: dict[str, list[float]] = {}
        condition = rows[0]["condition"] if rows else path.parent.name
        diverged_folds = {r["fold"] for r in rows if int(r["diverged"])}
        for r in rows:
            by_testset.setdefault(r["testset"], [])
            if not int(r["diverged"]):
                by_testset[r["testset"]].append(float(r["auc"]))
        n_div = len(diverged_folds)
        for t, vals in by_testset.items():
            mean = float(np.mean(vals)) if vals else float("nan")
            std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            rows_out.append((condition, t, mean, std, len(vals), n_div))
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["condition", "testset", "mean_auc", "std_auc", "folds_used", "folds_diverged"])
    for cond, t, mean, std, used, div in rows_out:
        writer.writerow([cond, t, f"{mean:.10g}", f"{std:.10g}", used, div])
    if args.out:
        _atomic_write(Path(args.out), buf.getvalue())
        print(f"wrote summary to {args.out}")
    else:
        sys.stdout.write(buf.getvalue())
    return 0


# -- entry point -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="decorrelab",
                     description="Synthetic debiasing laboratory: data generation, "
                                 "training matrices, and evaluation reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="generate a synthetic dataset")
    gen.add_argument("--n", type=int, required=True, help="number of samples")
    gen.add_argument("--seed", type=int, default=0, help="master seed")
    gen.add_argument("--signal", type=float, default=DEFAULT_SIGNAL,
                     help="class-signal blob amplitude")
    gen.add_argument("--size", type=int, default=IMAGE_SIZE, help="image side length")
    gen.add_argument("--out", default=None, help="dataset output path (.crds)")
    gen.add_argument("--manifest-folds", type=int, default=5,
                     help="fold count recorded in the manifest")
    gen.set_defaults(func=cmd_generate)

    tr = sub.add_parser("train", help="run a training/evaluation matrix from an experiment file")
    tr.add_argument("--experiment", required=True, help="experiment JSON file")
    tr.set_defaults(func=cmd_train)

    hoc = sub.add_parser("hoc", help="export histograms of correlations")
    hoc.add_argument("--records", required=True,
                     help="run directory (or parent of per-condition run directories)")
    hoc.add_argument("--bins", type=int, default=40, help="histogram bin count")
    hoc.add_argument("--epoch", type=int, default=None,
                     help="restrict to one snapshot epoch (default: pool all)")
    hoc.add_argument("--out", default=None, help="output CSV path")
    hoc.set_defaults(func=cmd_hoc)

    rep = sub.add_parser("report", help="summarize run reports into one comparison table")
    rep.add_argument("--runs", required=True, help="directory containing run reports")
    rep.add_argument("--out", default=None, help="output CSV path (default: stdout)")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # argparse exits for usage errors and --help
        return int(e.code or 0)
    try:
        return args.func(args)
    except ValidationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except BrokenPipeError:
        return 2
    except Exception as e:  # runtime failure contract
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
