"""Command-line entry point: ``flowtransfer <command> [options]``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 data/contract, 5 file I/O.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import __version__, config as cfgmod, evaluation, lifecycle
from .data import (
    Normalizer,
    build_windows,
    fit_normalizer,
    generate_synthetic,
    manifest_path_for,
    parse_flow_csv,
    split_by_calendar,
    standard_ranges,
    write_flow_csv,
)
from .errors import ConfigError, ContractError, CorruptFileError, DataError, SpecificationError

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_IO = 5

log = logging.getLogger("flowtransfer")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _guard(paths, force: bool) -> None:
    for p in paths:
        p = Path(p)
        if p.exists() and not (p.is_dir() and not any(p.iterdir())) and not force:
            raise FileExistsError(f"{p} exists; pass --force to overwrite")


def _write_run_manifest(path, command: str, args, inputs, outputs) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "seed": args.seed,
        "scale_days": args.scale_days,
        "config": str(args.config) if args.config else None,
        "config_sha256": sha256_file(args.config) if args.config else None,
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {Path(p).name: sha256_file(p) for p in outputs},
        "argv": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in ("func", "force")},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _data_path(p) -> Path:
    p = Path(p)
    if p.is_dir():
        csvs = sorted(p.glob("*.csv"))
        if len(csvs) != 1:
            raise DataError(f"{p} must contain exactly one flow CSV, found {len(csvs)}")
        return csvs[0]
    return p


def _year_days(args, parser) -> int:
    if args.scale_days is not None:
        return args.scale_days
    if parser.has_section("scenario") and "year_days" in parser["scenario"]:
        return int(parser["scenario"]["year_days"])
    return 365


def _month_days(parser):
    if parser.has_section("scenario") and "month_days" in parser["scenario"]:
        return int(parser["scenario"]["month_days"])
    return None


def _windows_for(dataset, named_range, spec, normalizer):
    start, stop = named_range
    return normalizer.normalize_windows(build_windows(dataset, (max(start, spec.input_lags), stop), spec.input_lags))


def _named_range(dataset, year_days, month_days, name):
    ranges = standard_ranges(year_days, month_days)
    if name not in ranges:
        raise ConfigError(f"unknown range {name!r}; choose from {', '.join(ranges)}")
    return split_by_calendar(dataset, {name: ranges[name]})[name]


def _norm_path(model_path) -> Path:
    return Path(str(model_path) + ".norm.json")


def _untrained_loss(spec, windows, tcfg) -> float:
    probe = dataclasses.replace(tcfg, epochs=1, learning_rate=0.0)
    return lifecycle.fit_new(spec, windows, probe)[1][0]


def _print_epoch(epoch, loss):
    print(f"epoch {epoch + 1} loss {loss:.10g}", flush=True)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.config is None:
        raise ConfigError("generate needs --config")
    if args.out is None:
        raise ConfigError("generate needs --out")
    parser = cfgmod.load(args.config)
    syn = cfgmod.synthetic_config(parser)
    if args.seed is not None:
        syn.seed = args.seed
    out = Path(args.out)
    _guard([out], args.force)
    dataset = generate_synthetic(syn)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{dataset.road_name}.csv"
    write_flow_csv(dataset, csv_path)
    outputs = [csv_path, manifest_path_for(csv_path)]
    _write_run_manifest(out / "run_manifest.json", "generate", args, [], outputs)
    print(f"wrote {csv_path} ({dataset.n_slots} slots x 9 loops)")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.data is None or args.out is None:
        raise ConfigError("train needs --data and --out")
    parser = cfgmod.load(args.config)
    spec = cfgmod.network_spec(parser)
    tcfg = cfgmod.training_config(parser, "training")
    if args.seed is not None:
        tcfg.seed = args.seed
    out = Path(args.out)
    _guard([out, _norm_path(out)], args.force)
    data_path = _data_path(args.data)
    dataset = parse_flow_csv(data_path)
    rng = _named_range(dataset, _year_days(args, parser), _month_days(parser), tcfg.normalizer_source)
    norm = fit_normalizer(dataset, rng)
    windows = _windows_for(dataset, rng, spec, norm)
    initial = _untrained_loss(spec, windows, tcfg)
    model, trace = lifecycle.fit_new(spec, windows, tcfg, on_epoch=_print_epoch)
    print(f"initial loss {initial:.10g} final loss {trace[-1]:.10g}")
    out.parent.mkdir(parents=True, exist_ok=True)
    lifecycle.save_model(model, out)
    _norm_path(out).write_text(json.dumps(norm.to_dict(), sort_keys=True), encoding="utf-8")
    _write_run_manifest(Path(str(out) + ".run.json"), "train", args, [data_path], [out, _norm_path(out)])
    return EXIT_OK


def cmd_transfer(args) -> int:
    if args.model is None or args.out is None:
        raise ConfigError("transfer needs --model and --out")
    out = Path(args.out)
    _guard([out, _norm_path(out)], args.force)
    source = lifecycle.load_model(args.model)
    model = lifecycle.transfer(source)
    inputs = [Path(args.model)]
    norm_doc = None
    if args.data is not None:
        parser = cfgmod.load(args.config)
        rcfg = cfgmod.training_config(parser, "retrain")
        if args.seed is not None:
            rcfg.seed = args.seed
        data_path = _data_path(args.data)
        inputs.append(data_path)
        dataset = parse_flow_csv(data_path)
        rng = _named_range(dataset, _year_days(args, parser), _month_days(parser), rcfg.normalizer_source)
        norm = fit_normalizer(dataset, rng)
        windows = _windows_for(dataset, rng, model.spec, norm)
        model, trace = lifecycle.retrain(model, windows, rcfg, on_epoch=_print_epoch)
        norm_doc = norm.to_dict()
    elif _norm_path(args.model).exists():
        norm_doc = json.loads(_norm_path(args.model).read_text(encoding="utf-8"))
    out.parent.mkdir(parents=True, exist_ok=True)
    lifecycle.save_model(model, out)
    outputs = [out]
    if norm_doc is not None:
        _norm_path(out).write_text(json.dumps(norm_doc, sort_keys=True), encoding="utf-8")
        outputs.append(_norm_path(out))
    _write_run_manifest(Path(str(out) + ".run.json"), "transfer", args, inputs, outputs)
    return EXIT_OK


def cmd_run_scenarios(args) -> int:
    if not args.donor or args.target is None or args.out is None:
        raise ConfigError("run-scenarios needs --donor (repeatable), --target and --out")
    parser = cfgmod.load(args.config)
    scfg = cfgmod.scenario_config(parser, year_days=args.scale_days)
    if args.seed is not None:
        for t in (scfg.batch, scfg.retrain, scfg.scratch):
            t.seed = args.seed
    out = Path(args.out)
    _guard([out], args.force)
    donor_paths = [_data_path(p) for p in args.donor]
    target_path = _data_path(args.target)
    donors = [parse_flow_csv(p) for p in donor_paths]
    target = parse_flow_csv(target_path)
    reports = evaluation.run_scenarios(donors, target, scfg, progress=lambda m: print(m, flush=True))
    written = evaluation.export_report(reports, out)
    _write_run_manifest(out / "run_manifest.json", "run-scenarios", args, [*donor_paths, target_path], written)
    print(f"wrote {len(written) - 1} trace files and summary.csv to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.model is None or args.data is None or args.out is None:
        raise ConfigError("evaluate needs --model, --data and --out")
    parser = cfgmod.load(args.config)
    out = Path(args.out)
    _guard([out], args.force)
    model = lifecycle.load_model(args.model)
    norm_file = Path(args.normalizer) if args.normalizer else _norm_path(args.model)
    if not norm_file.exists():
        raise DataError(f"normalizer file {norm_file} not found")
    norm = Normalizer.from_dict(json.loads(norm_file.read_text(encoding="utf-8")))
    data_path = _data_path(args.data)
    dataset = parse_flow_csv(data_path)
    Y = _year_days(args, parser)
    start = args.from_slot if args.from_slot is not None else Y * 96
    windows = build_windows(dataset, (max(start, model.spec.input_lags), dataset.n_slots), model.spec.input_lags)
    window = int(parser["scenario"]["r2_window"]) if parser.has_section("scenario") and "r2_window" in parser["scenario"] else 672
    reports = []
    for setting in ("offline", "online") if args.online else ("offline",):
        if setting == "offline":
            trace = evaluation.run_offline(model, windows, norm, dataset.start)
        else:
            trace, _ = evaluation.run_online(model, windows, norm, cfgmod.online_config(parser), dataset.start)
        r2 = evaluation.r2_windowed(trace, window) if len(trace) >= window else None
        reports.append(evaluation.ScenarioReport("EVAL", setting, Path(args.model).stem, "evaluate", trace, r2, start))
        s = reports[-1].summary()
        print(f"{setting}: mean_r2 {s['mean_r2']:.6g} min_r2 {s['min_r2']:.6g} final_r2 {s['final_r2']:.6g}")
    written = evaluation.export_report(reports, out)
    _write_run_manifest(out / "run_manifest.json", "evaluate", args, [Path(args.model), norm_file, data_path], written)
    return EXIT_OK


# ---------------------------------------------------------------------------


def _global_flags(p: argparse.ArgumentParser, default) -> None:
    p.add_argument("--seed", type=int, default=default, help="override the configured seed")
    p.add_argument("--config", type=Path, default=default, help="key-value config file")
    p.add_argument("--out", type=Path, default=default, help="output file or directory")
    p.add_argument("--force", action="store_true", default=default, help="overwrite existing outputs")
    p.add_argument("--scale-days", type=int, default=default, help="days per scaled 'year'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowtransfer", description=__doc__.splitlines()[0])
    _global_flags(parser, None)
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, argparse.SUPPRESS)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic road as CSV + manifest")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common], help="batch-train a model on a road's year 1")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("transfer", parents=[common], help="copy a model, optionally retraining it")
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("run-scenarios", parents=[common], help="run the PS1/PS2/PS3 study")
    p.add_argument("--donor", action="append", default=[])
    p.add_argument("--target", required=True)
    p.set_defaults(func=cmd_run_scenarios)

    p = sub.add_parser("evaluate", parents=[common], help="test a saved model offline (and online)")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--normalizer")
    p.add_argument("--online", action="store_true")
    p.add_argument("--from-slot", type=int)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args.force = bool(args.force)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SpecificationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ContractError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (OSError, CorruptFileError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
