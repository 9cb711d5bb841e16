"""Command-line entry point: ``gpdyn <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import Sequence

from .config import DEFAULTS, RunConfig, load_config_file, merge
from .data import Cohort, DataError, load_long_csv, preprocess, split, synth_generate
from .engine import ConfigError, evolve
from .evaluation import (
    CohortEvaluation,
    PatientEvaluation,
    compare_algorithms,
    evaluate_cohort,
    select_instance,
    table_from_patients,
    write_comparisons_csv,
)
from .fitness import CohortFitter
from .model import (
    ModelGenotype,
    ModelParseError,
    StateSchema,
    genotype_to_dict,
    load_genotype,
    parse,
    render,
    save_genotype,
)
from .moo import EvaluationError
from .presets import EMA_SCHEMA, RELAX_SCHEMA, relaxation_model, reported_model
from .simulator import SegmentTooShortError

log = logging.getLogger("gpdyn")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_MODEL = 5
EXIT_RUN = 6

EXIT_CODES_HELP = """\
exit status:
  0  success
  1  internal error (bug)
  2  usage error (unknown command, bad or missing flag such as --seed)
  3  invalid configuration (config file or option values)
  4  input error (missing file, malformed CSV/JSON, data or split error)
  5  model error (unparsable equations, unknown state, parameter index)
  6  run error (segment too short, evaluation failure)
"""

GENERATORS = {
    "fixture": (reported_model, EMA_SCHEMA),
    "relax": (relaxation_model, RELAX_SCHEMA),
}


class InputError(Exception):
    pass


# -- argument parsing ----------------------------------------------------------------


def _opt(parser, flag, section, key, type=None, help="", choices=None):
    default = DEFAULTS[section][key]
    shown = ",".join(map(str, default)) if isinstance(default, list) else default
    parser.add_argument(
        flag,
        dest=f"{section}.{key}",
        metavar=key.upper(),
        type=type,
        default=None,
        choices=choices,
        help=f"{help} (default: {shown})",
    )


def _list_of(kind):
    def parse_list(text: str):
        try:
            return [kind(part) for part in text.split(",") if part.strip()]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from exc

    return parse_list


def _common(parser, seed_required: bool):
    parser.add_argument("--config", type=Path, help="TOML config file with [gp] [nsga] [fitness] [data] [eval]")
    if seed_required:
        parser.add_argument("--seed", type=int, required=True, help="master seed (required)")
    parser.add_argument("--threads", type=int, default=1, help="maximum worker processes (default: 1)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")


def _fitness_flags(parser):
    _opt(parser, "--nsga-pop", "nsga", "pop", int, "NSGA-II population per fitness fit")
    _opt(parser, "--nsga-gen", "nsga", "gen", int, "NSGA-II generations per fitness fit")
    _opt(parser, "--r-max", "nsga", "r_max", int, "NSGA-II runs per patient in fitness")
    _opt(parser, "--horizons", "fitness", "horizons", _list_of(int), "forecast horizons, comma separated")
    _opt(
        parser,
        "--complexity-mode",
        "fitness",
        "complexity_mode",
        str,
        "complexity score",
        choices=["penalizing", "literal"],
    )


def _eval_flags(parser):
    _opt(parser, "--eval-pop", "eval", "nsga_pop", int, "NSGA-II population for the final per-patient fit")
    _opt(parser, "--eval-gen", "eval", "nsga_gen", int, "NSGA-II generations for the final per-patient fit")
    _opt(parser, "--repeats", "eval", "repeats", int, "NSGA-II runs per patient in the final fit")
    _opt(parser, "--horizons", "fitness", "horizons", _list_of(int), "forecast horizons, comma separated")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpdyn",
        description="Evolve, fit and evaluate difference-equation models of multivariate daily series.",
        epilog=EXIT_CODES_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("preprocess", help="long-format CSV to a split cohort JSON", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("csv", type=Path, help="CSV with header patient_id,date,variable,value")
    p.add_argument("--out", type=Path, default=Path("cohort.json"), help="output cohort (default: cohort.json)")
    _opt(p, "--schema", "data", "schema", str, "schema TOML; empty means the built-in 7-question diary schema")
    _opt(p, "--min-days", "data", "min_days", int, "minimum observed days per patient")
    _opt(p, "--fractions", "data", "fractions", _list_of(float), "train,validation,test fractions")
    p.add_argument("--strict-unknown", dest="data.strict_unknown", action="store_const", const=True, default=None,
                   help="fail on unknown variables instead of skipping them (default: skip)")
    _common(p, seed_required=False)

    p = sub.add_parser("synth", help="synthetic cohort plus ground truth", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--patients", type=int, default=20, help="number of patients (default: 20)")
    p.add_argument("--days", type=int, default=120, help="days per patient (default: 120)")
    p.add_argument("--noise", type=float, default=0.02, help="observation noise sigma (default: 0.02)")
    p.add_argument("--generator", choices=sorted(GENERATORS), default="fixture",
                   help="ground-truth model (default: fixture)")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory (default: .)")
    _opt(p, "--fractions", "data", "fractions", _list_of(float), "train,validation,test fractions")
    _common(p, seed_required=True)

    p = sub.add_parser("evolve", help="run genetic programming on a cohort", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--cohort", type=Path, default=Path("cohort.json"), help="cohort JSON (default: cohort.json)")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory (default: .)")
    _opt(p, "--pop-gp", "gp", "pop_gp", int, "GP population size")
    _opt(p, "--gen-gp", "gp", "gen_gp", int, "GP generations")
    _opt(p, "--p-op", "gp", "p_op", float, "probability of an operator node in random trees")
    _opt(p, "--tournament", "gp", "t_s", int, "tournament size")
    _opt(p, "--p-r", "gp", "p_r", float, "reproduction probability")
    _opt(p, "--phi", "gp", "phi", int, "merge attempts per tree in crossover")
    _opt(p, "--d-max", "gp", "d_max", int, "maximum tree depth")
    _opt(p, "--lambda-max", "gp", "lambda_max", int, "parameter pool size")
    _fitness_flags(p)
    _common(p, seed_required=True)

    p = sub.add_parser("fit", help="fit a model to every patient", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("model", type=Path, help="model file (.json, or equations text)")
    p.add_argument("--cohort", type=Path, default=Path("cohort.json"), help="cohort JSON (default: cohort.json)")
    p.add_argument("--out", type=Path, default=Path("instances.json"), help="output (default: instances.json)")
    _eval_flags(p)
    _common(p, seed_required=True)

    p = sub.add_parser("evaluate", help="test-set RMSE of a model and baselines", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("model", type=Path, help="model file (.json, or equations text)")
    p.add_argument("--cohort", type=Path, default=Path("cohort.json"),
                   help="in-sample cohort JSON (default: cohort.json)")
    p.add_argument("--out-cohort", type=Path, help="optional out-of-sample cohort JSON")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory (default: .)")
    _opt(p, "--baselines", "eval", "baselines", _list_of(str), "baselines: persistence, ar1")
    _opt(p, "--label", "eval", "label", str, "algorithm name of the model in the tables")
    _eval_flags(p)
    _common(p, seed_required=True)

    p = sub.add_parser("compare", help="rank-sum tests between algorithms", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("results", type=Path, nargs="+", help="per_patient.json files written by evaluate")
    p.add_argument("--reference", help="algorithm compared against all others (default: label of the first file)")
    p.add_argument("--out", type=Path, default=Path("comparisons.csv"), help="output (default: comparisons.csv)")
    _common(p, seed_required=False)

    p = sub.add_parser("render-model", help="print a model's equations", epilog=EXIT_CODES_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("model", type=Path, nargs="?", help="model file (.json, or equations text)")
    p.add_argument("--builtin", choices=sorted(GENERATORS), help="print a built-in model instead")
    p.add_argument("-v", "--verbose", action="store_true", help="log to standard error")
    return parser


def _run_config(args) -> RunConfig:
    flags: dict[str, dict] = {}
    for dest, value in vars(args).items():
        if "." in dest:
            section, key = dest.split(".", 1)
            flags.setdefault(section, {})[key] = value
    settings = merge(load_config_file(getattr(args, "config", None)), flags)
    threads = getattr(args, "threads", 1)
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    return RunConfig(settings, getattr(args, "seed", None), threads)


# -- helpers ----------------------------------------------------------------------------


_LHS_NAME = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*\(\s*t\s*\+\s*1\s*\)\s*=", re.MULTILINE)


def read_model(path: Path) -> ModelGenotype:
    if not path.exists():
        raise InputError(f"model file not found: {path}")
    if path.suffix == ".json":
        try:
            return load_genotype(path)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"malformed model file {path}: {exc}") from exc
    text = path.read_text()
    names = _LHS_NAME.findall(text)
    return parse(text, names)


def read_cohort(path: Path) -> Cohort:
    if not path.exists():
        raise InputError(f"cohort file not found: {path}")
    try:
        return Cohort.load(path)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise InputError(f"malformed cohort file {path}: {exc}") from exc


def _check_model(genotype: ModelGenotype, schema: StateSchema) -> None:
    if genotype.state_names != schema.names:
        raise ModelParseError(
            f"model states {list(genotype.state_names)} do not match cohort states {list(schema.names)}"
        )


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _out_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create output directory {path}: {exc}") from exc
    return path


# -- commands ------------------------------------------------------------------------------


def cmd_preprocess(args, cfg: RunConfig) -> None:
    data = cfg.settings["data"]
    schema = StateSchema.from_toml(data["schema"]) if data["schema"] else EMA_SCHEMA
    if not args.csv.exists():
        raise InputError(f"CSV file not found: {args.csv}")
    records = load_long_csv(args.csv, schema, strict_unknown=bool(data["strict_unknown"]))
    max_h = max(cfg.settings["fitness"]["horizons"])
    patients = preprocess(records, schema, min_days=int(data["min_days"]))
    patients = [split(p, tuple(data["fractions"]), max_h) for p in patients]
    Cohort(schema, patients, cfg.meta("preprocess")).save(args.out)
    log.info("wrote %d patients to %s", len(patients), args.out)


def cmd_synth(args, cfg: RunConfig) -> None:
    factory, schema = GENERATORS[args.generator]
    genotype = factory()
    max_h = max(cfg.settings["fitness"]["horizons"])
    patients = synth_generate(
        genotype,
        args.patients,
        args.days,
        args.noise,
        args.seed,
        fractions=tuple(cfg.settings["data"]["fractions"]),
        max_horizon=max_h,
    )
    meta = cfg.meta("synth")
    meta["synth"] = {"patients": args.patients, "days": args.days, "noise": args.noise, "generator": args.generator}
    out = _out_dir(args.out_dir)
    Cohort(schema, patients, meta).save(out / "cohort.json")
    _write_json(
        out / "ground_truth.json",
        {
            "meta": meta,
            "model": genotype_to_dict(genotype),
            "equations": render(genotype).splitlines(),
            "params": {p.patient_id: list(p.ground_truth) for p in patients},
        },
    )


def cmd_evolve(args, cfg: RunConfig) -> None:
    cohort = read_cohort(args.cohort)
    gp = cfg.gp()
    meta = cfg.meta("evolve")
    meta["cohort"] = args.cohort.name
    result = evolve(gp, cohort.patients, cohort.schema)
    out = _out_dir(args.out_dir)
    save_genotype(result.best, out / "best_model.json", {**meta, "fitness": result.report.to_dict()})
    (out / "best_model.txt").write_text(
        "# " + json.dumps(meta, sort_keys=True) + "\n" + render(result.best, cohort.schema) + "\n"
    )
    with open(out / "trace.jsonl", "w") as fh:
        fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
        for record in result.trace:
            fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    log.info("best fitness %.4f", result.report.total)


def cmd_fit(args, cfg: RunConfig) -> None:
    cohort = read_cohort(args.cohort)
    genotype = read_model(args.model)
    _check_model(genotype, cohort.schema)
    ev = cfg.evaluation()
    fits = CohortFitter(cohort.patients, cohort.schema.target_indices, ev.fitness_config()).fit(genotype, args.seed)
    instances = []
    for fit in fits:
        inst = select_instance(genotype, fit.runs, fit.validation_errors)
        pooled = [row for v in fit.validation_errors for row in v.tolist()]
        instances.append(
            {
                "patient_id": fit.patient_id,
                "params": list(inst.params),
                "named_params": inst.named_params(),
                "validation_error_sum": min(sum(row) for row in pooled),
                "front_size": sum(len(f) for f in fit.runs),
            }
        )
    _write_json(
        args.out,
        {"meta": cfg.meta("fit"), "model": genotype_to_dict(genotype), "instances": instances},
    )


def cmd_evaluate(args, cfg: RunConfig) -> None:
    cohort = read_cohort(args.cohort)
    genotype = read_model(args.model)
    _check_model(genotype, cohort.schema)
    out_patients = []
    if args.out_cohort is not None:
        other = read_cohort(args.out_cohort)
        if other.schema.names != cohort.schema.names:
            raise InputError("in- and out-of-sample cohorts use different schemas")
        out_patients = other.patients
    ev = cfg.evaluation()
    unknown = set(ev.baselines) - {"persistence", "ar1"}
    if unknown:
        raise ConfigError(f"unknown baseline(s): {sorted(unknown)}")
    result: CohortEvaluation = evaluate_cohort(
        genotype, cohort.patients, cohort.schema, out_patients, ev, args.seed
    )
    meta = cfg.meta("evaluate")
    out = _out_dir(args.out_dir)
    result.table.write_csv(out / "rmse_table.csv", meta)
    _write_json(
        out / "per_patient.json",
        {"meta": meta, "label": ev.label, "patients": [p.to_dict() for p in result.patients]},
    )


def cmd_compare(args, cfg: RunConfig) -> None:
    patients: list[PatientEvaluation] = []
    reference = args.reference
    seen = set()
    for path in args.results:
        if not path.exists():
            raise InputError(f"results file not found: {path}")
        try:
            data = json.loads(path.read_text())
            loaded = [PatientEvaluation.from_dict(p) for p in data["patients"]]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"malformed results file {path}: {exc}") from exc
        reference = reference or data.get("label")
        for p in loaded:
            for alg in p.rmse:
                key = (alg, p.sample, p.patient_id)
                if key in seen:
                    raise InputError(f"duplicate results for {key} in {path}")
                seen.add(key)
        patients.extend(loaded)
    table = table_from_patients(patients)
    if reference not in {key[0] for key in table.raw}:
        raise ConfigError(f"reference algorithm {reference!r} not found in results")
    meta = cfg.meta("compare")
    meta["inputs"] = [p.name for p in args.results]
    write_comparisons_csv(args.out, compare_algorithms(table, reference), meta)


def cmd_render(args) -> None:
    if args.builtin:
        factory, schema = GENERATORS[args.builtin]
        print(render(factory(), schema))
        return
    if args.model is None:
        raise InputError("give a model file or --builtin")
    print(render(read_model(args.model)))


COMMANDS = {
    "preprocess": cmd_preprocess,
    "synth": cmd_synth,
    "evolve": cmd_evolve,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
}


def run_command(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        if args.command == "render-model":
            cmd_render(args)
        else:
            COMMANDS[args.command](args, _run_config(args))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc)
    except ModelParseError as exc:
        return _fail(EXIT_MODEL, exc)
    except (SegmentTooShortError, EvaluationError) as exc:
        return _fail(EXIT_RUN, exc)
    except (InputError, DataError, OSError) as exc:
        return _fail(EXIT_INPUT, exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, exc)
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        return _fail(EXIT_INTERNAL, exc)
    return EXIT_OK


def _fail(code: int, exc: Exception) -> int:
    print(f"gpdyn: error: {exc}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
