"""
Command-line entry point for the scene data engine.

    python cli.py synth --output data --seed 0
    python cli.py reconstruct --input data --output out --jobs 4
    python cli.py eval-vqa --output out --predictions preds.jsonl
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

import pipeline
from config import APP_NAME, APP_VERSION, load_pipeline_config, setup_logging
from exceptions import SceneEngineError
from metrics import format_report

logger = logging.getLogger(__name__)

STAGE_COMMANDS = {
    "reconstruct": pipeline.cmd_reconstruct,
    "segment": pipeline.cmd_segment,
    "scenegraph": pipeline.cmd_scenegraph,
    "gen-vqa": pipeline.cmd_gen_vqa,
    "gen-vln": pipeline.cmd_gen_vln,
    "curate": pipeline.cmd_curate,
    "run": pipeline.cmd_run,
    "synth": pipeline.cmd_synth,
}
EVAL_COMMANDS = {"eval-vln": "vln", "eval-vqa": "vqa", "eval-det": "det"}


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON pipeline configuration file")
    parser.add_argument("--input", dest="input_dir", help="Input directory (scene or dataset root)")
    parser.add_argument("--output", dest="output_dir", help="Output directory")
    parser.add_argument("--seed", type=int, help="Seed for generative stages")
    parser.add_argument("--jobs", type=int, help="Scenes processed in parallel")
    parser.add_argument("--log-level", help="Override LOG_LEVEL")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scene-engine",
                                     description=f"{APP_NAME} {APP_VERSION}: posed video to 3D training data")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        _add_common(subparsers.add_parser(name))
    for name in EVAL_COMMANDS:
        sub = subparsers.add_parser(name)
        _add_common(sub)
        sub.add_argument("--predictions", required=True, help="Predictions JSONL file")
        if name == "eval-det":
            sub.add_argument("--ground-truth", dest="ground_truth",
                             help="Ground-truth boxes JSONL (defaults to the input scene specs)")
    return parser


def _error_record(error: SceneEngineError) -> str:
    return json.dumps(error.to_record(), sort_keys=True)


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parse arguments, run one command and return the process exit code.

    Returns:
        0 on success, 2 on a pipeline error (one JSON record on stderr)
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        config = load_pipeline_config(args.config, input_dir=args.input_dir, output_dir=args.output_dir,
                                      seed=args.seed, jobs=args.jobs)
        if args.command in EVAL_COMMANDS:
            kind = EVAL_COMMANDS[args.command]
            report: Dict[str, Any] = pipeline.cmd_eval(config, args.predictions, kind,
                                                       getattr(args, "ground_truth", None))
            flat = {name: value for name, value in report.items() if not isinstance(value, dict)}
            flat.update({name: value["score"] for name, value in report.items() if isinstance(value, dict)})
            sys.stdout.write(format_report(flat, title=args.command))
        else:
            written = STAGE_COMMANDS[args.command](config)
            logger.info(f"{args.command}: wrote {len(written)} output(s)")
    except SceneEngineError as e:
        logger.error(f"{args.command} failed: {e.message}")
        sys.stderr.write(_error_record(e) + "\n")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
