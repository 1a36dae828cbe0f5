"""Command-line entry points for every pipeline stage.

Exit codes: 0 success, 1 user/configuration error, 2 internal error.  Every
run writes a manifest next to its primary output (flags as resolved, derived
seeds, input fingerprints) so any result can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict


from . import __version__
from .bundle import BundleIntegrityError, BundleVersionError, load_bundle, save_bundle
from .dataset import (
    DEFAULT_MAPPING,
    Diagnostic,
    EmptyInputError,
    SchemaError,
    SyntheticSpec,
    SyntheticTruth,
    TargetKind,
    build_design_matrix,
    format_diagnostics,
    generate_synthetic,
    ingest_results_csv,
    load_column_mapping,
    read_canonical_csv,
    write_canonical_csv,
)
from .evaluation import compute_metrics, importance_to_csv, metrics_to_csv, permutation_importance
from .hpo import HpoError
from .pipeline import (
    PipelineConfig,
    PipelineError,
    child_seed,
    data_fingerprint,
    leaderboard_to_csv,
    predict_targets,
    prospective_experiment,
    run_training,
    select_best,
)
from .preprocess import FitError as PreprocessError
from .preprocess import apply_imputer, apply_scaler
from .split import SplitError, SplitScheme, random_server_split, time_series_split, write_split

TARGET_NAMES = {
    "power": TargetKind.POWER,
    "perf": TargetKind.PERF_TO_POWER,
    "throughput": TargetKind.MAX_THROUGHPUT,
}

USER_ERRORS = (
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
    SchemaError,
    EmptyInputError,
    SplitError,
    PipelineError,
    PreprocessError,
    BundleIntegrityError,
    BundleVersionError,
    HpoError,
    ValueError,
)


def _read_text(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _write_manifest(out_path: str, command: str, resolved: dict) -> None:
    manifest = {"tool": "serverlens", "version": __version__, "command": command, **resolved}
    _write_text(out_path + ".manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_records(path: str, mapping_path: str | None):
    text = _read_text(path)
    header = text.split("\n", 1)[0]
    if header.startswith("server_id,"):
        return read_canonical_csv(text)
    mapping = load_column_mapping(mapping_path) if mapping_path else DEFAULT_MAPPING
    return ingest_results_csv(text, mapping)


def _emit_diagnostics(diags: list[Diagnostic], path: str | None) -> None:
    if not diags:
        return
    text = format_diagnostics(diags) + "\n"
    if path:
        _write_text(path, text)
    else:
        sys.stderr.write(text)


def _target(name: str) -> TargetKind:
    return TARGET_NAMES[name]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    records, diags = _load_records(args.data, args.mapping)
    _write_text(args.out, write_canonical_csv(records))
    _emit_diagnostics(diags, args.diagnostics)
    _write_manifest(
        args.out,
        "ingest",
        {
            "data": args.data,
            "mapping": args.mapping,
            "records": len(records),
            "diagnostics": len(diags),
            "fingerprint": data_fingerprint(records),
        },
    )
    print(f"ingested {len(records)} server(s), {len(diags)} diagnostic(s) -> {args.out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    truth = SyntheticTruth(shift_year=args.shift_year) if args.shift_year else SyntheticTruth()
    spec = SyntheticSpec(
        n_servers=args.n,
        noise_sd=args.noise_sd,
        seed=args.seed,
        year_range=(args.year_from, args.year_to),
        missing_rate=args.missing_rate,
        linear_mode=args.linear,
        truth=truth,
    )
    records, _ = generate_synthetic(spec)
    _write_text(args.out, write_canonical_csv(records))
    _write_manifest(args.out, "synth", {"spec": asdict(spec), "fingerprint": data_fingerprint(records)})
    print(f"wrote {len(records)} synthetic server(s) -> {args.out}")
    return 0


def cmd_split(args: argparse.Namespace) -> int:
    records, diags = _load_records(args.data, args.mapping)
    matrix, mdiags = build_design_matrix(records, _target(args.target))
    if args.scheme == "random":
        split = random_server_split(matrix, args.seed)
    else:
        if args.baseline_year is None:
            raise SplitError("--baseline-year is required for the time scheme")
        split = time_series_split(matrix, args.baseline_year, args.horizon)
    _write_text(args.out, write_split(split, matrix))
    _emit_diagnostics(diags + mdiags, None)
    _write_manifest(
        args.out,
        "split",
        {
            "data": args.data,
            "target": args.target,
            "scheme": args.scheme,
            "seed": args.seed,
            "baseline_year": args.baseline_year,
            "horizon": args.horizon,
            "fingerprint": data_fingerprint(records),
        },
    )
    sizes = {k: len(v) for k, v in split.partition_of().items()}
    print(f"split rows: {sizes} -> {args.out}")
    return 0


def _config_from_args(args: argparse.Namespace, target: TargetKind) -> PipelineConfig:
    return PipelineConfig(
        target_kind=target,
        master_seed=args.seed,
        imputer_k=args.k,
        learners=tuple(args.learners.split(",")),
        profile=args.profile,
        bo_budget=args.budget,
        bo_n_init=args.n_init,
        select_on=args.select_on,
    )


def cmd_train(args: argparse.Namespace) -> int:
    records, diags = _load_records(args.data, args.mapping)
    config = _config_from_args(args, _target(args.target))
    leaderboard, bundle = run_training(records, config)
    checksum = save_bundle(bundle, args.out)
    if args.leaderboard:
        _write_text(args.leaderboard, leaderboard_to_csv(leaderboard, selected=bundle.learner_tag))
    _emit_diagnostics(diags, None)
    profile = config.resolved_profile()
    _write_manifest(
        args.out,
        "train",
        {
            "data": args.data,
            "target": args.target,
            "config": {
                "master_seed": config.master_seed,
                "imputer_k": config.imputer_k,
                "learners": list(config.learners),
                "profile": profile.name,
                "bo_budget": profile.bo_budget,
                "bo_n_init": profile.bo_n_init,
                "select_on": config.select_on,
            },
            "derived_seeds": {
                "split": child_seed(config.master_seed, "split"),
                "bo": {
                    tag: child_seed(config.master_seed, f"bo/{config.target_kind.value}/{tag}")
                    for tag in config.learners
                },
            },
            "fingerprint": data_fingerprint(records),
            "bundle_checksum": checksum,
            "winner": bundle.learner_tag,
        },
    )
    test = leaderboard.entry(bundle.learner_tag).metrics.get("test")
    maape_s = "n/a" if test is None or test.maape is None else f"{test.maape:.4f}"
    print(f"winner {bundle.learner_tag} (test MAAPE {maape_s}) -> {args.out}")
    return 0


def _bundle_partition_rows(bundle, records, partition: str):
    matrix, _ = build_design_matrix(records, bundle.target_kind)
    if partition == "all":
        return matrix.X, matrix.y
    if bundle.provenance.get("scheme") != SplitScheme.RANDOM_BY_SERVER.value:
        raise PipelineError("bundle was not trained with the random scheme; use --partition all")
    if bundle.provenance.get("data_fingerprint") != data_fingerprint(records):
        raise PipelineError("data fingerprint differs from the bundle's; use --partition all")
    seed = child_seed(int(bundle.provenance["master_seed"]), "split")
    split = random_server_split(matrix, seed)
    idx = split.partition_of()[partition]
    return matrix.X[idx], matrix.y[idx]


def cmd_evaluate(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    records, _ = _load_records(args.data, args.mapping)
    X, y = _bundle_partition_rows(bundle, records, args.partition)
    imputed, _ = apply_imputer(bundle.imputer, X)
    report = compute_metrics(y, bundle.model.predict(apply_scaler(bundle.scaler, imputed)))
    print(metrics_to_csv({args.partition: report}), end="")
    return 0


def cmd_importance(args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    records, _ = _load_records(args.data, args.mapping)
    X, y = _bundle_partition_rows(bundle, records, args.partition)
    imputed, _ = apply_imputer(bundle.imputer, X)
    scaled = apply_scaler(bundle.scaler, imputed)
    report = permutation_importance(
        bundle.model, scaled, y, repeats=args.repeats, seed=args.seed,
        feature_names=bundle.schema.names,
    )
    _write_text(args.out, importance_to_csv(report))
    _write_manifest(
        args.out,
        "importance",
        {
            "bundle": args.bundle,
            "data": args.data,
            "partition": args.partition,
            "repeats": args.repeats,
            "seed": args.seed,
            "fingerprint": data_fingerprint(records),
        },
    )
    print(f"importance ({args.partition} rows, r={args.repeats}) -> {args.out}")
    return 0


def cmd_prospective(args: argparse.Namespace) -> int:
    records, _ = _load_records(args.data, args.mapping)
    config = _config_from_args(args, _target(args.target))
    baselines = list(range(args.baseline_from, args.baseline_to + 1))
    horizons = [int(h) for h in args.horizons.split(",")]
    grid = prospective_experiment(records, config, baselines, horizons)
    _write_text(args.out, grid.to_csv())
    _write_manifest(
        args.out,
        "prospective",
        {
            "data": args.data,
            "target": args.target,
            "baselines": baselines,
            "horizons": horizons,
            "master_seed": config.master_seed,
            "profile": config.resolved_profile().name,
            "fingerprint": data_fingerprint(records),
            "winners": grid.winner_tags,
        },
    )
    means = {h: (None if v is None else round(v, 4)) for h, v in grid.horizon_means().items()}
    print(f"prospective grid ({len(grid.cells)} cells; horizon MAAPE means {means}) -> {args.out}")
    return 0


def _load_bundles(args: argparse.Namespace) -> dict:
    return {
        TargetKind.POWER: load_bundle(args.bundle_power),
        TargetKind.MAX_THROUGHPUT: load_bundle(args.bundle_throughput),
        TargetKind.PERF_TO_POWER: load_bundle(args.bundle_perf),
    }


def cmd_predict(args: argparse.Namespace) -> int:
    bundles = _load_bundles(args)
    config: dict = {}
    if args.config:
        config.update(json.loads(_read_text(args.config)))
    for item in args.set or []:
        key, _, value = item.partition("=")
        if not value:
            raise ValueError(f"--set expects key=value, got {item!r}")
        config[key] = value if key.upper() == "DDT" else float(value)
    config = {k.upper(): v for k, v in config.items()}
    curves = predict_targets(bundles, config)
    out = {
        "levels": list(curves.levels),
        "power_w": list(curves.power_curve),
        "perf_to_power": list(curves.perf_curve),
        "eq1_composed": list(curves.eq1_curve),
        "max_throughput": curves.max_throughput,
        "imputed_features": list(curves.imputed_features),
        "flags": list(curves.flags),
        "models": curves.learner_tags,
    }
    print(json.dumps(out, indent=2))
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .service import serve_http

    bundles = _load_bundles(args)
    serve_http(bundles, port=args.port)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serverlens",
        description="Server power / throughput / efficiency modeling toolkit",
    )
    parser.add_argument("--version", action="version", version=f"serverlens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_mapping(p):
        p.add_argument("--mapping", help="column-mapping config for raw exports")

    def add_train_opts(p):
        p.add_argument("--seed", type=int, default=0, help="master seed")
        p.add_argument("--profile", choices=("desk", "full"), default="desk")
        p.add_argument("--learners", default="elastic_net,elastic_net_poly,gp,gbt,rf,ffn")
        p.add_argument("--k", type=int, default=5, help="imputation neighbors")
        p.add_argument("--budget", type=int, default=None, help="BO trials (overrides profile)")
        p.add_argument("--n-init", type=int, default=None, help="BO random initial trials")
        p.add_argument("--select-on", choices=("test", "validation"), default="test")

    p = sub.add_parser("ingest", help="parse a raw benchmark export into canonical CSV")
    p.add_argument("--data", required=True)
    add_mapping(p)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="write diagnostics to this file instead of stderr")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic corpus with known ground truth")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise-sd", type=float, default=0.03)
    p.add_argument("--missing-rate", type=float, default=0.0)
    p.add_argument("--linear", action="store_true", help="exactly-linear power target")
    p.add_argument("--shift-year", type=int, default=None, help="inject a technology shift")
    p.add_argument("--year-from", type=int, default=2004)
    p.add_argument("--year-to", type=int, default=2023)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="write a server-atomic split audit file")
    p.add_argument("--data", required=True)
    add_mapping(p)
    p.add_argument("--target", choices=sorted(TARGET_NAMES), required=True)
    p.add_argument("--scheme", choices=("random", "time"), default="random")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--baseline-year", type=int, default=None)
    p.add_argument("--horizon", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="tune every learner and persist the winning bundle")
    p.add_argument("--data", required=True)
    add_mapping(p)
    p.add_argument("--target", choices=sorted(TARGET_NAMES), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--leaderboard", help="write per-learner metrics CSV here")
    add_train_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="print metrics of a bundle on a data partition")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    add_mapping(p)
    p.add_argument("--partition", choices=("train", "validation", "test", "all"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("importance", help="permutation feature importance for a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--data", required=True)
    add_mapping(p)
    p.add_argument("--partition", choices=("train", "validation", "test", "all"), default="test")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_importance)

    p = sub.add_parser("prospective", help="backtest over baseline years and horizons")
    p.add_argument("--data", required=True)
    add_mapping(p)
    p.add_argument("--target", choices=sorted(TARGET_NAMES), required=True)
    p.add_argument("--baseline-from", type=int, default=2010)
    p.add_argument("--baseline-to", type=int, default=2022)
    p.add_argument("--horizons", default="1,2,3,4,5")
    p.add_argument("--out", required=True)
    add_train_opts(p)
    p.set_defaults(func=cmd_prospective)

    def add_bundles(p):
        p.add_argument("--bundle-power", required=True)
        p.add_argument("--bundle-throughput", required=True)
        p.add_argument("--bundle-perf", required=True)

    p = sub.add_parser("predict", help="predict curves for one configuration")
    add_bundles(p)
    p.add_argument("--config", help="JSON file of feature values")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one feature")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("serve", help="run the HTTP prediction service")
    add_bundles(p)
    p.add_argument("--port", type=int, default=8100, help="SERVERLENS_PORT overrides")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; the contract reserves 1 for those
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # internal fault: keep the traceback for bug reports
        import traceback

        traceback.print_exc()
        sys.stderr.write(f"internal error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
