#!/usr/bin/env python3
"""
chorale-stems: generate, validate and summarize synthetic chorale stem datasets.

    chorale-stems generate --config run.yaml --workers 8
    chorale-stems validate chorale_stems_data
    chorale-stems stats chorale_stems_data --bin-width 0.01
    chorale-stems --print-default-config > run.yaml
"""

import argparse
import logging
import sys

from augment import ENSEMBLES
from pipeline import run_generate, run_stats, run_validate
from pipeline_config import ConfigError, default_config_yaml, load_config

logger = logging.getLogger("chorale_stems")

# ---------------- CONFIG ----------------
EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
LOG_FORMAT = "[%(levelname)s] %(message)s"
# ---------------------------------------


def configure_logging(verbose: bool = False, quiet: bool = False):
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def parse_ensembles(value: str) -> list:
    names = [v.strip() for v in value.split(",") if v.strip()]
    unknown = [n for n in names if n not in ENSEMBLES]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown ensemble(s) {unknown}; choose from {', '.join(ENSEMBLES)}")
    return names


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chorale-stems",
        description="Generate four-part chorale performances with aligned MIDI, expression, "
                    "synthesis-parameter and audio stems."
    )
    parser.add_argument(
        '--print-default-config',
        action='store_true',
        help='Print the full default YAML config and exit'
    )
    parser.add_argument('-v', '--verbose', action='store_true', help='Log debug messages')
    parser.add_argument('-q', '--quiet', action='store_true', help='Only log warnings and errors')
    sub = parser.add_subparsers(dest='command')

    gen = sub.add_parser('generate', help='Generate a corpus')
    gen.add_argument('-c', '--config', default=None, help='YAML config file (default: built-in defaults)')
    gen.add_argument('-o', '--out', default=None, help='Output root directory')
    gen.add_argument('--seed', type=int, default=None, help='Global seed')
    gen.add_argument('-w', '--workers', type=int, default=None, help='Worker processes')
    gen.add_argument('-n', '--num-tracks', type=int, default=None, help='Tracks per ensemble')
    gen.add_argument(
        '--ensembles',
        type=parse_ensembles,
        default=None,
        help=f"Comma-separated ensembles ({', '.join(ENSEMBLES)})"
    )
    gen.add_argument(
        '--overwrite',
        action='store_true',
        help='Regenerate tracks that already exist (default: skip them)'
    )
    gen.add_argument('--no-progress', action='store_true', help='Hide the progress bar')

    val = sub.add_parser('validate', help='Validate every track of a corpus')
    val.add_argument('root', help='Dataset root directory')
    val.add_argument('-c', '--config', default=None, help='Config whose loudness target to check against')

    stats = sub.add_parser('stats', help='f0 deviation histograms and per-ensemble totals')
    stats.add_argument('root', help='Dataset root directory')
    stats.add_argument('-c', '--config', default=None, help='Config providing the stats section')
    stats.add_argument('--bin-width', type=float, default=None, help='Histogram bin width in semitones')
    stats.add_argument('-o', '--out', default=None, help='Directory for the CSV files (default: <root>/stats)')
    return parser


def generation_overrides(args) -> dict:
    gen = {}
    if args.out is not None:
        gen['output_root'] = args.out
    if args.seed is not None:
        gen['seed'] = args.seed
    if args.workers is not None:
        gen['workers'] = args.workers
    if args.num_tracks is not None:
        gen['num_tracks'] = args.num_tracks
    if args.ensembles is not None:
        gen['ensembles'] = args.ensembles
    if args.overwrite:
        gen['overwrite'] = True
    return {'generation': gen} if gen else {}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)

    if args.print_default_config:
        sys.stdout.write(default_config_yaml())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG

    try:
        if args.command == 'generate':
            cfg = load_config(args.config, generation_overrides(args))
        else:
            cfg = load_config(args.config)
    except ConfigError as e:
        logger.error("Config error: %s", e)
        return EXIT_CONFIG

    if args.command == 'generate':
        summary = run_generate(cfg, progress=not args.no_progress)
        print(f"Written: {summary.written}")
        if summary.skipped:
            print(f"Skipped (existing track): {summary.skipped}")
        if summary.failed:
            print(f"Failed: {summary.failed}")
        return EXIT_OK if summary.ok else EXIT_FAILED

    if args.command == 'validate':
        summary = run_validate(args.root, cfg.target_lufs)
        print(f"Tracks: {summary.track_total} (manifest: {summary.manifest_total})")
        print(f"Violations: {summary.violations}")
        return EXIT_OK if summary.ok else EXIT_FAILED

    bin_width = args.bin_width if args.bin_width is not None else cfg.bin_width
    if bin_width <= 0:
        logger.error("Config error: --bin-width must be positive")
        return EXIT_CONFIG
    summary = run_stats(args.root, bin_width, cfg.max_deviation, args.out)
    print(f"Voiced frames: {summary.voiced_frames}")
    print(f"Mean |f0 deviation|: {summary.mean_abs_framewise:.4f} st (framewise), "
          f"{summary.mean_abs_note:.4f} st (note mean)")
    if summary.framewise_out_of_range or summary.note_out_of_range:
        print(f"Outside ±{cfg.max_deviation} st: {summary.framewise_out_of_range} frame(s), "
              f"{summary.note_out_of_range} note mean(s)")
    if summary.unreadable:
        print(f"Unreadable tracks: {len(summary.unreadable)}")
        return EXIT_FAILED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
