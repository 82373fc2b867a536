"""Command-line surface: phantom generation, measurement, trials, consistency.

Every command is deterministic given its config: data outputs are
byte-identical across reruns and thread counts.  Timestamps go only to a
``run.log`` in the output directory, never into data files.

Exit codes: 0 success, 1 partial per-subject failure, 2 config/usage error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .composition import CompositionReport, measure_composition
from .io import load_labelmap, load_volume
from .metrics import (
    CohortMeasurements,
    cohort_consistency,
    collect_structure_measurements,
    paired_dice_stats,
)
from .phantom import generate_cohort, load_manifest
from .skeleton import measure_height
from .trial import (
    MeasuredSubject,
    TrialConfig,
    _distribution_from_dict,
    _map_ordered,
    run_full_vct,
    write_trial_outputs,
)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2
EXIT_IO = 3

MEASURE_CSV_HEADER = ["subject_id", "body_mass_kg", "fat_pct", "muscle_pct",
                      "bone_density_hu", "body_volume_l", "height_mm"]


class ConfigError(Exception):
    pass


def _setup_log(out_dir: Path) -> logging.Logger:
    out_dir.mkdir(parents=True, exist_ok=True)
    logger = logging.getLogger(f"vct.{out_dir}")
    logger.setLevel(logging.INFO)
    logger.handlers.clear()
    handler = logging.FileHandler(out_dir / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(handler)
    logger.propagate = False
    return logger


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON in {path}: {exc}") from exc


# --- phantom gen ------------------------------------------------------------


def cmd_phantom_gen(args) -> int:
    cfg = _load_json(args.config) if args.config else {}
    bad = set(cfg) - {"n", "seed", "spacing_mm", "distribution"}
    if bad:
        raise ConfigError(f"unknown phantom config keys: {sorted(bad)}")
    n = args.n if args.n is not None else cfg.get("n")
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if n is None or seed is None:
        raise ConfigError("phantom gen needs --n and --seed (flag or config)")
    if n < 1:
        raise ConfigError(f"cohort size must be positive, got {n}")
    spacing = args.spacing or cfg.get("spacing_mm") or (2.0, 2.0, 2.0)
    if len(spacing) != 3 or min(spacing) <= 0:
        raise ConfigError(f"spacing must be three positive numbers, got {spacing}")
    try:
        dist = _distribution_from_dict(cfg.get("distribution", {}))
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc

    out = Path(args.out)
    log = _setup_log(out)
    log.info("phantom gen n=%d seed=%d spacing=%s threads=%d",
             n, seed, tuple(spacing), args.threads)
    manifest = generate_cohort(n, dist, spacing, seed, out, threads=args.threads)
    log.info("wrote %d subjects to %s", len(manifest.subjects), out)
    print(f"generated {len(manifest.subjects)} phantoms -> {out / 'manifest.json'}")
    return EXIT_OK


# --- measure ----------------------------------------------------------------


def _measure_one(base: Path, record):
    vol = load_volume(base / record.image)
    tissue = load_labelmap(base / record.tissue, kind="tissue")
    rep = measure_composition(vol, tissue)
    if record.structure:
        structures = load_labelmap(base / record.structure, kind="structure")
        rep = replace(rep, height=measure_height(tissue, structures))
    return rep


def cmd_measure(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    if not manifest.subjects:
        raise ConfigError(f"manifest {manifest_path} lists no subjects")
    base = manifest_path.parent
    out = Path(args.out)
    log = _setup_log(out)
    reports_dir = out / "measurements"
    reports_dir.mkdir(parents=True, exist_ok=True)

    def build(record):
        try:
            return record.subject_id, _measure_one(base, record), None
        except Exception as exc:  # per-subject isolation: one bad file != a dead run
            return record.subject_id, None, exc

    results = _map_ordered(build, manifest.subjects, args.threads)
    failed = []
    with open(out / "measurements.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MEASURE_CSV_HEADER)
        for sid, rep, exc in results:
            if exc is not None:
                failed.append(sid)
                log.error("subject %s failed: %s", sid, exc)
                print(f"measure failed for subject {sid}: {exc}", file=sys.stderr)
                continue
            (reports_dir / f"{sid}.json").write_text(
                json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n",
                encoding="utf-8")
            height_mm = "" if rep.height is None else repr(rep.height.total_mm)
            writer.writerow([sid, repr(rep.body_mass_kg), repr(rep.fat_pct),
                             repr(rep.muscle_pct),
                             "" if rep.bone_density_hu is None else repr(rep.bone_density_hu),
                             repr(rep.body_volume_l), height_mm])
    ok = len(results) - len(failed)
    log.info("measured %d/%d subjects", ok, len(results))
    print(f"measured {ok}/{len(results)} subjects -> {out / 'measurements.csv'}")
    return EXIT_PARTIAL if failed else EXIT_OK


# --- trial ------------------------------------------------------------------


def _load_measured_cohort(cohort_dir: Path) -> list[MeasuredSubject]:
    manifest = load_manifest(cohort_dir / "manifest.json")
    measurements = cohort_dir / "measurements"
    subjects = []
    for record in manifest.subjects:
        path = measurements / f"{record.subject_id}.json"
        if not path.exists():
            raise FileNotFoundError(
                f"no measurement for subject {record.subject_id!r} under {measurements}")
        rep = CompositionReport.from_dict(
            json.loads(path.read_text(encoding="utf-8")))
        subjects.append(MeasuredSubject(record.subject_id, record.attributes, rep))
    return subjects


def cmd_trial_run(args) -> int:
    try:
        config = TrialConfig.from_dict(_load_json(args.config))
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"bad trial config: {exc}") from exc
    out = Path(args.out)
    log = _setup_log(out)
    cohort = None
    if args.cohort:
        cohort = _load_measured_cohort(Path(args.cohort))
        log.info("loaded %d measured subjects from %s", len(cohort), args.cohort)
    log.info("trial task=%s n=%d threads=%d", config.task,
             config.n_subjects if cohort is None else len(cohort), args.threads)
    report = run_full_vct(config, threads=args.threads, cohort=cohort)
    written = write_trial_outputs(report, out, config)
    log.info("wrote %s", ", ".join(str(p) for p in written))
    print(f"train |r({report.boundary.x_feature}, {report.task})| = "
          f"{abs(report.achieved_pearson):.3f}")
    for row in report.rows:
        if row.sample_type == "real":
            print(f"{row.population}: {row.verdict} (real MAE {row.mae:.2f})")
    return EXIT_OK


# --- consistency ------------------------------------------------------------


def _load_maps(base: Path, record):
    tissue = load_labelmap(base / record.tissue, kind="tissue")
    structures = load_labelmap(base / record.structure, kind="structure")
    return tissue, structures


def _collect_cohort(manifest_path: Path, threads: int):
    manifest = load_manifest(manifest_path)
    if not manifest.subjects:
        raise ConfigError(f"manifest {manifest_path} lists no subjects")
    base = manifest_path.parent

    def build(record):
        tissue, structures = _load_maps(base, record)
        return record.subject_id, collect_structure_measurements(structures, tissue)

    rows = _map_ordered(build, manifest.subjects, threads)
    cohort = CohortMeasurements()
    for _sid, per_class in rows:
        cohort.add_subject(per_class)
    return manifest, cohort


def cmd_consistency(args) -> int:
    out = Path(args.out)
    log = _setup_log(out)
    path_a, path_b = Path(args.a), Path(args.b)
    manifest_a, cohort_a = _collect_cohort(path_a, args.threads)
    manifest_b, cohort_b = _collect_cohort(path_b, args.threads)

    dice_stats = None
    if args.mode == "paired":
        ids_a = [s.subject_id for s in manifest_a.subjects]
        ids_b = {s.subject_id: s for s in manifest_b.subjects}
        if set(ids_a) != set(ids_b):
            raise ConfigError("paired mode requires identical subject ids "
                              f"(A has {len(ids_a)}, B has {len(ids_b)}, "
                              f"overlap {len(set(ids_a) & set(ids_b))})")
        by_id_a = {s.subject_id: s for s in manifest_a.subjects}

        def load_pair(sid):
            _, sa = _load_maps(path_a.parent, by_id_a[sid])
            _, sb = _load_maps(path_b.parent, ids_b[sid])
            if sa.grid != sb.grid:
                raise ConfigError(f"subject {sid!r}: grids differ between cohorts")
            return sa, sb

        pairs = _map_ordered(load_pair, ids_a, args.threads)
        dice_stats = paired_dice_stats(pairs)
        log.info("paired dice over %d subjects", len(pairs))

    table = cohort_consistency(cohort_a, cohort_b, dice_stats=dice_stats)
    table.write_csv(out / "consistency.csv")
    log.info("wrote %s", out / "consistency.csv")
    print(f"consistency table ({args.mode}) -> {out / 'consistency.csv'}")
    return EXIT_OK


# --- entry ------------------------------------------------------------------


def _spacing(text: str):
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("spacing must be X,Y,Z in mm")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vct",
                                     description="virtual clinical trials on CT phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="phantom cohort commands")
    psub = phantom.add_subparsers(dest="subcommand", required=True)
    gen = psub.add_parser("gen", help="generate a phantom cohort")
    gen.add_argument("--n", type=int, default=None)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--out", required=True)
    gen.add_argument("--config", default=None)
    gen.add_argument("--spacing", type=_spacing, default=None, metavar="X,Y,Z")
    gen.add_argument("--threads", type=int, default=1)
    gen.set_defaults(func=cmd_phantom_gen)

    measure = sub.add_parser("measure", help="measure body composition for a cohort")
    measure.add_argument("--manifest", required=True)
    measure.add_argument("--out", required=True)
    measure.add_argument("--threads", type=int, default=1)
    measure.set_defaults(func=cmd_measure)

    trial = sub.add_parser("trial", help="trial commands")
    tsub = trial.add_subparsers(dest="subcommand", required=True)
    run = tsub.add_parser("run", help="run a full virtual clinical trial")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--cohort", default=None,
                     help="directory with manifest.json and measurements/ "
                          "(skips in-memory generation)")
    run.add_argument("--threads", type=int, default=1)
    run.set_defaults(func=cmd_trial_run)

    consistency = sub.add_parser("consistency",
                                 help="anatomical consistency between two cohorts")
    consistency.add_argument("--a", required=True, metavar="MANIFEST_A")
    consistency.add_argument("--b", required=True, metavar="MANIFEST_B")
    consistency.add_argument("--out", required=True)
    mode = consistency.add_mutually_exclusive_group(required=True)
    mode.add_argument("--paired", dest="mode", action="store_const", const="paired")
    mode.add_argument("--cohort", dest="mode", action="store_const", const="cohort")
    consistency.add_argument("--threads", type=int, default=1)
    consistency.set_defaults(func=cmd_consistency)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
