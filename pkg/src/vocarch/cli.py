"""Command-line entry point: ``vocarch <stage> [options]``.

Failures print one JSON object on stderr and exit with status 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import VocarchError
from .pipeline import STAGES, RunConfig, run_stages

COMMANDS = ("synth",) + STAGES + ("all",)
HELP = {
    "synth": "write a synthetic corpus with known effects",
    "extract": "pitch and formant tracks per segment",
    "filter": "consensus filtering and speaker-program admission",
    "features": "per-chunk base F0 and vocal tract length",
    "fit": "mixed-model fits and term deletion",
    "report": "tables and figure data",
    "all": "run every stage from extract to report",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--workdir", help="artifact directory (default: work)")
    p.add_argument("--manifest", help="corpus manifest (default: the synth stage output)")
    p.add_argument("--config", help="JSON file overriding defaults; flags override it")
    p.add_argument("--threads", type=int, help="worker threads (default: VOCARCH_THREADS or CPU count)")
    p.add_argument("--seed", type=int, help="seed of the synthetic corpus (default: 0)")
    p.add_argument("--f0-gross", type=float, dest="f0_gross",
                   help="largest relative F0 deviation from the median estimate (default: 0.2)")
    p.add_argument("--formant-gross", type=float, dest="formant_gross",
                   help="largest relative raw/separated formant gap (default: 0.2)")
    p.add_argument("--min-valid-s", type=float, dest="min_valid_s",
                   help="valid pitch seconds a speaker-program needs to be kept (default: 10)")
    p.add_argument("--telephone-ratio", type=float, dest="telephone_ratio",
                   help="energy share above 3.8 kHz below which a file counts as telephone (default: 0.005)")
    p.add_argument("--formant-preset", choices=("default", "alt"), dest="formant_preset",
                   help="formant ceiling and count per gender (default: default)")
    p.add_argument("--semitone-ref-hz", type=float, dest="semitone_ref_hz",
                   help="0 st reference frequency (default: 100)")
    p.add_argument("--alpha", type=float, help="significance level of term deletion (default: 0.05)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vocarch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=HELP[name])
        _common(p)
        if name == "synth":
            p.add_argument("--speakers-per-cell", type=int, dest="speakers_per_cell",
                           help="speakers per age x gender x period cell (default: 1)")
            p.add_argument("--programs-per-speaker", type=int, dest="programs_per_speaker", help="default: 2")
            p.add_argument("--chunks-per-program", type=int, dest="chunks_per_program", help="default: 2")
            p.add_argument("--chunk-s", type=float, dest="chunk_s", help="seconds of audio per chunk (default: 12.5)")
            p.add_argument("--snr-db", type=float, dest="snr_db", help="SNR of the noisy copy (default: 40)")
            p.add_argument("--telephone", action="store_true", default=None, help="band-limit the noisy copy")
            p.add_argument("--vibrato", action="store_true", default=None, help="add vibrato to the voices")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    opts = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = RunConfig.load(args.config, **opts)
        stages = STAGES if args.command == "all" else (args.command,)
        run_stages(cfg, stages)
    except VocarchError as exc:
        json.dump(exc.to_dict(), sys.stderr)
        sys.stderr.write("\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
