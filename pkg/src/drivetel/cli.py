"""Command-line driver: one subcommand per stage plus ``run`` for the whole pipeline.

Configuration precedence is flags > config file (JSON) > defaults. Every
failure exits with the error's code (2 config, 3 data integrity, 4 numerical)
and leaves a machine-readable record on stderr and, when possible, in
``<out>/error.json``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .align import align_trips, read_located, write_located
from .errors import ConfigError, DrivetelError, StageError
from .ingest import CsvFormat, build_trips, inventory_report, parse_can_log, parse_phone_log
from .mapmatch import load_network, read_matches, write_matches
from .pipeline import (
    FORMATS,
    AnalysisResult,
    PipelineConfig,
    _stage,
    acceleration_samples,
    analyze_samples,
    match_phone,
    run_pipeline,
    smooth_phone,
)
from .preprocess import read_trajectories, write_trajectories
from .report import emit_report, to_json
from .synth import SynthConfig, generate_dataset

log = logging.getLogger("drivetel")

LOG_ENV = "DRIVETEL_LOG_LEVEL"

# flag dest -> PipelineConfig field
_OVERRIDES = {
    "phone": "phone",
    "can": "can",
    "network": "network",
    "out": "out",
    "format": "formats",
    "seed": "seed",
    "threshold_quantile": "threshold_quantile",
    "return_period_s": "return_period_s",
    "min_segment_count": "min_segment_count",
}


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(d, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return d


def resolve_config(args) -> tuple[PipelineConfig, dict]:
    """Merge defaults, config file and flags; returns the config and each field's source."""
    raw = _read_config(args.config)
    file_opts = {k: v for k, v in raw.items() if k != "synth"}
    merged = dict(file_opts)
    source = {k: "file" for k in file_opts}
    for dest, name in _OVERRIDES.items():
        val = getattr(args, dest, None)
        if val is not None:
            merged[name] = val
            source[name] = "flag"
    cfg = PipelineConfig.from_dict(merged)
    for k, v in sorted(cfg.to_dict().items()):
        log.info("param %s = %r (%s)", k, v, source.get(k, "default"))
    return cfg, raw


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ConfigError(f"cannot create output directory {out}: {e}") from e
    return out


def _need(path, what, stage):
    with _stage(stage):
        if path is None:
            raise ConfigError(f"--{what} is required")
        if not Path(path).exists():
            raise ConfigError(f"{what} file {path} does not exist")
    return path


# --- subcommands ------------------------------------------------------------


def cmd_synth(args, cfg: PipelineConfig, raw: dict):
    opts = dict(raw.get("synth", {}))
    if cfg.seed is not None:
        opts["seed"] = cfg.seed
    with _stage("synth"):
        scfg = SynthConfig.from_dict(opts)
        for k, v in sorted(scfg.to_dict().items()):
            log.info("synth %s = %r", k, v)
        paths = generate_dataset(scfg, cfg.out)
    for name, p in paths.items():
        print(f"{name}: {p}")


def cmd_ingest(args, cfg: PipelineConfig, raw: dict):
    fmt = CsvFormat(cfg.delimiter)
    _need(cfg.phone, "phone", "ingest")
    with _stage("ingest"):
        recs = list(parse_phone_log(cfg.phone, fmt))
        unmapped = {}
        if cfg.can is not None:
            can, unmapped = parse_can_log(_need(cfg.can, "can", "ingest"), fmt)
            recs += can
        build_trips(recs)
        inv = inventory_report(recs, gap_threshold=cfg.gap_threshold)
        out = _out_dir(cfg)
        d = inv.to_dict()
        d["unmapped_channels"] = {k: v for k, v in sorted(unmapped.items())}
        (out / "inventory.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        (out / "inventory.txt").write_text(inv.to_table() + "\n")
    print(inv.to_table())


def cmd_clean(args, cfg: PipelineConfig, raw: dict):
    _need(cfg.phone, "phone", "ingest")
    with _stage("ingest"):
        phone = parse_phone_log(cfg.phone, CsvFormat(cfg.delimiter))
    with _stage("preprocess"):
        sm = smooth_phone(phone, cfg)
        out = _out_dir(cfg)
        write_trajectories(sm.speed + sm.acceleration, out / "smoothed.csv")
    print(json.dumps({"pieces": sm.n_pieces, "removed": sm.removals}, sort_keys=True))


def cmd_match(args, cfg: PipelineConfig, raw: dict):
    _need(cfg.phone, "phone", "ingest")
    with _stage("ingest"):
        phone = parse_phone_log(cfg.phone, CsvFormat(cfg.delimiter))
    _need(cfg.network, "network", "mapmatch")
    with _stage("mapmatch"):
        network = load_network(cfg.network)
        matches = match_phone(phone, network, cfg)
        write_matches(matches, _out_dir(cfg) / "matches.csv")
    n = sum(len(m) for m in matches)
    k = sum(int(m.matched.sum()) for m in matches)
    print(f"matched {k} of {n} fixes")


def cmd_align(args, cfg: PipelineConfig, raw: dict):
    fmt = CsvFormat(cfg.delimiter)
    _need(cfg.phone, "phone", "ingest")
    _need(cfg.can, "can", "ingest")
    with _stage("ingest"):
        phone = parse_phone_log(cfg.phone, fmt)
        can, _ = parse_can_log(cfg.can, fmt)
    with _stage("align"):
        located, unlocated = align_trips(can, phone, cfg.dtw_band_s)
        write_located(located, _out_dir(cfg) / "located.csv")
    print(f"located {len(located)} CAN records, {len(unlocated)} without a phone trip")


def _analysis_inputs(args, cfg: PipelineConfig):
    _need(args.smoothed, "smoothed", "analyze")
    _need(args.matches, "matches", "mapmatch")
    _need(cfg.network, "network", "mapmatch")
    with _stage("analyze"):
        accels = [t for t in read_trajectories(args.smoothed) if t.channel == "acceleration"]
    with _stage("mapmatch"):
        network = load_network(cfg.network)
        matches = read_matches(args.matches)
    located = None
    if getattr(args, "located", None):
        with _stage("align"):
            located = read_located(_need(args.located, "located", "align"))
    return acceleration_samples(accels, matches), network, matches, located


def cmd_analyze(args, cfg: PipelineConfig, raw: dict):
    acc, network, matches, located = _analysis_inputs(args, cfg)
    report, on, curves = analyze_samples(acc, network, cfg, located, matches)
    with _stage("report"):
        out = _out_dir(cfg)
        (out / "analysis.json").write_text(to_json({"schema_version": 1, "parameters": cfg.report_parameters(), **report}))
    s = report["summary"]
    print(f"mean positive acceleration reduction: {s['mean_reduction_pct']:.1f}%")
    print(f"acceleration return level reduction: {s['return_level_reduction_pct']:.1f}%")


def cmd_evt(args, cfg: PipelineConfig, raw: dict):
    acc, network, matches, _ = _analysis_inputs(args, cfg)
    report, on, curves = analyze_samples(acc, network, cfg)
    with _stage("report"):
        out = _out_dir(cfg)
        (out / "evt.json").write_text(to_json({"schema_version": 1, "parameters": cfg.report_parameters(),
                                               "evt": report["evt"]}))
    e = report["evt"]
    for tail in ("acceleration", "deceleration"):
        print(f"{tail}: active {e[tail]['return_level_active']:.2f}, "
              f"inactive {e[tail]['return_level_inactive']:.2f}")


def cmd_run(args, cfg: PipelineConfig, raw: dict):
    # check paths here so a missing file names the stage that needs it
    _need(cfg.phone, "phone", "ingest")
    if cfg.can is not None:
        _need(cfg.can, "can", "ingest")
    _need(cfg.network, "network", "mapmatch")
    result: AnalysisResult = run_pipeline(cfg)
    with _stage("report"):
        paths = emit_report(result, _out_dir(cfg), cfg.formats)
    for p in paths:
        print(p)


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic phone/CAN/network dataset"),
    "ingest": (cmd_ingest, "parse logs and print the data inventory"),
    "clean": (cmd_clean, "clean and Kalman-smooth phone speed; writes smoothed.csv"),
    "match": (cmd_match, "HMM map matching of phone fixes; writes matches.csv"),
    "align": (cmd_align, "DTW alignment of CAN to phone; writes located.csv"),
    "analyze": (cmd_analyze, "statistics and EVT from smoothed.csv + matches.csv"),
    "evt": (cmd_evt, "tail analysis only, from smoothed.csv + matches.csv"),
    "run": (cmd_run, "the full pipeline with report emission"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (pipeline options, optional 'synth' object)")
    common.add_argument("--phone", help="phone GPS log (CSV)")
    common.add_argument("--can", help="CAN log (CSV)")
    common.add_argument("--network", help="road network (GeoJSON)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--format", action="append", choices=FORMATS,
                        help="report format; repeat for several (default: all)")
    common.add_argument("--seed", type=int)
    common.add_argument("--threshold-quantile", type=float)
    common.add_argument("--return-period-s", type=float)
    common.add_argument("--min-segment-count", type=int)

    p = argparse.ArgumentParser(prog="drivetel", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name in ("analyze", "evt"):
            sp.add_argument("--smoothed", help="smoothed.csv from 'clean'")
            sp.add_argument("--matches", help="matches.csv from 'match'")
        if name == "analyze":
            sp.add_argument("--located", help="located.csv from 'align' (optional)")
    return p


def error_record(err: BaseException, command: str | None) -> dict:
    stage = getattr(err, "stage", None) or command
    cause = getattr(err, "cause", err)
    return {
        "error": type(cause).__name__,
        "stage": stage,
        "message": str(cause),
        "exit_code": getattr(err, "exit_code", 1),
    }


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    out = None
    try:
        try:
            cfg, raw = resolve_config(args)
        except ConfigError as e:
            raise StageError("config", e) from e
        out = cfg.out
        COMMANDS[args.command][0](args, cfg, raw)
        return 0
    except DrivetelError as e:
        rec = error_record(e, args.command)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        target = out if out is not None else args.out
        if target is not None:
            try:
                Path(target).mkdir(parents=True, exist_ok=True)
                (Path(target) / "error.json").write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")
            except OSError:
                pass
        return rec["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
