"""Command-line entry point.

Subcommands share ``--config <path> --seed <u64> --out <dir>``. Exit codes:
0 on success, 2 on invalid input (configuration, dataset, mask
validation), 1 on any other runtime error.

Examples
--------
impedscope synth --config cohort.json --seed 7 --out data/raw
impedscope preprocess --config filter.json --dataset data/raw --out data/clean
impedscope masks validate
impedscope tune --config experiment.json --out runs/tune
impedscope report --config experiment.json --out runs/full --workers 4
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__

logger = logging.getLogger("impedscope")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


class UsageError(ValueError):
    pass


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None


def _experiment(args, stages=None):
    from .orchestrator import ExperimentConfig

    if not args.config:
        raise UsageError("--config is required")
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        d["workers"] = args.workers
    if getattr(args, "dataset", None):
        d["dataset"] = args.dataset
        d.pop("synthetic", None)
    if getattr(args, "winners", None):
        w = _read_json(args.winners)
        d["winners"] = w.get("winners", w)
    # relative dataset paths resolve against the config file
    if d.get("dataset") and not Path(d["dataset"]).is_absolute() and not getattr(args, "dataset", None):
        d["dataset"] = str(Path(args.config).parent / d["dataset"])
    return ExperimentConfig.from_dict(d)


def _out(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .data_model import save_dataset
    from .synth import generate_cohort, load_cohort_config, with_seed

    if not args.config:
        raise UsageError("--config is required")
    spec, models, names = load_cohort_config(_read_json(args.config))
    if args.seed is not None:
        spec = with_seed(spec, args.seed)
    ds = generate_cohort(spec, models, pathology=names)
    path = save_dataset(ds, _out(args))
    print(f"wrote {len(ds)} samples from {len(ds.patients)} patients to {path}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .data_model import load_dataset
    from .preprocessing import FilterConfig, prepare

    cfg = FilterConfig.from_dict(_read_json(args.config)) if args.config else FilterConfig()
    if not args.dataset:
        raise UsageError("--dataset is required")
    ds = load_dataset(args.dataset)
    out = _out(args)
    prepared = prepare(ds, cfg, out_dir=out)
    gated = sum(1 for c in prepared.completeness if 1 - c <= cfg.completeness_threshold + 1e-12)
    print(f"cleaned {len(prepared)} samples ({len(prepared.unusable)} unusable); "
          f"{gated} pass C_th={cfg.completeness_threshold:g}; wrote {out / 'manifest.json'}")
    return EXIT_OK


def cmd_masks(args) -> int:
    from .geometry import ElectrodeArray, load_mask_rules, validate_masks
    from .orchestrator import dump_json, format_mask_table, write_csv

    rules_path = args.config
    array = ElectrodeArray.load(args.geometry) if args.geometry else ElectrodeArray.default()
    rows = validate_masks(array, load_mask_rules(rules_path))
    print(format_mask_table(rows))
    if args.out:
        out = _out(args)
        dump_json(rows, out / "masks_validation.json")
        keys = ["mask", "expected", "actual", "ok", "ii_electrodes", "vv_electrodes", "mean_ii_mm",
                "mean_vv_mm", "ref_ii_mm", "ref_vv_mm", "error"]
        write_csv(out / "masks_validation.csv", keys, [[r.get(k) for k in keys] for r in rows])
    bad = [r["mask"] for r in rows if not r["ok"]]
    if bad:
        print(f"validation failed for: {', '.join(bad)}", file=sys.stderr)
        return EXIT_INVALID
    print(f"all {len(rows)} masks match their reference counts")
    return EXIT_OK


def _run(args, stages):
    from .orchestrator import run_pipeline

    cfg = _experiment(args)
    out = _out(args)
    pl = run_pipeline(cfg, out_dir=out, stages=stages)
    return pl, out


def cmd_rank_freqs(args) -> int:
    pl, out = _run(args, ("baseline", "frequency"))
    st = pl.results["frequency"]["stage"]
    print("composite ranking (1-based):", st["composite_ranking"]["composite"][:10], "...")
    print("best f_T:", st["best"], f"-> {out}")
    return EXIT_OK


def cmd_tune(args) -> int:
    pl, out = _run(args, ("baseline", "frequency", "iivv", "tuning"))
    st = pl.results["tuning"]["stage"]
    for m, w in sorted(st["winners"].items()):
        print(f"{m}: {w['pattern']} f_T={w['f_t']} N_input={w['n_input']} "
              f"{st['metric']}={w['score']:.4f} params={json.dumps(w['params'], sort_keys=True)}")
    print(f"winners -> {out / 'winners.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    pl, out = _run(args, ("final",))
    fin = pl.results["final"]
    for m, r in sorted(fin["models"].items()):
        p = r["pooled"]
        print(f"{m}: AUC={r['auc']:.4f} Acc={p['accuracy']:.4f} F1={p['f1']:.4f} "
              f"Recall={p['recall']:.4f} Precision={p['precision']:.4f}")
    print(f"report -> {out / 'final_report.json'}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .orchestrator import Pipeline, train_models

    cfg = _experiment(args)
    out = _out(args)
    summary = train_models(Pipeline(cfg), out)
    for m, s in sorted(summary.items()):
        print(f"{m}: {s['pattern']} frequencies={s['frequencies']} N_input={s['n_input']} "
              f"-> {out / f'model_{m}.imsm'}")
    return EXIT_OK


def cmd_report(args) -> int:
    from .orchestrator import STAGES

    stages = tuple(args.stages.split(",")) if args.stages else STAGES
    pl, out = _run(args, stages)
    print(f"stages {','.join(stages)} -> {out}")
    if "final" in pl.results:
        fin = pl.results["final"]
        print(f"best model: {fin['best_model']} (AUC {fin['models'][fin['best_model']]['auc']:.4f})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p, config_help="JSON configuration file"):
    p.add_argument("--config", help=config_help)
    p.add_argument("--seed", type=int, help="root seed (unsigned 64-bit); overrides the config")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="impedscope", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    _common(p, "cohort JSON ({cohort, models, pathology})")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter, average and gate a dataset")
    _common(p, "filter JSON")
    p.add_argument("--dataset", help="dataset manifest or directory")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("masks", help="mask registry tools")
    msub = p.add_subparsers(dest="masks_command", required=True)
    v = msub.add_parser("validate", help="compare masks with their reference table")
    _common(v, "mask-definition JSON (defaults to the shipped registry)")
    v.add_argument("--geometry", help="electrode geometry JSON")
    v.set_defaults(func=cmd_masks)

    for name, func, hlp in (
        ("rank-freqs", cmd_rank_freqs, "PCA frequency ranking and AUC-vs-f_T sweep"),
        ("train", cmd_train, "fit models on all samples and save them"),
        ("tune", cmd_tune, "baseline, both sweeps and combination tuning"),
        ("evaluate", cmd_evaluate, "final grouped cross-validated evaluation"),
        ("report", cmd_report, "run the whole schedule and write every report"),
    ):
        p = sub.add_parser(name, help=hlp)
        _common(p, "experiment JSON")
        p.add_argument("--dataset", help="dataset manifest or directory (overrides the config)")
        p.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
        if name in ("train", "evaluate"):
            p.add_argument("--winners", help="winners.json from a tuning run")
        if name == "report":
            p.add_argument("--stages", help="comma-separated subset of "
                                            "baseline,frequency,iivv,tuning,final")
        p.set_defaults(func=func)
    return ap


def main(argv=None) -> int:
    from .classifiers import ModelError
    from .data_model import DataError
    from .geometry import GeometryError, MaskValidationError
    from .orchestrator import ConfigError

    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2 ** 64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except (UsageError, ConfigError, DataError, GeometryError, MaskValidationError,
            ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        logger.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
