"""Command-line entry point: ``ndmag simulate | analyze | report``.

Exit status: 0 success, 2 invalid input, 3 no usable results.
Log events go to stderr as one JSON object per line.
"""

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

from . import config as config_mod
from . import pipeline, report, simulate
from .errors import NdmagError
from .stack_io import load_stack, save_stack

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NO_RESULTS = 3

log = logging.getLogger("ndmag")


class _JsonLines(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        try:
            doc = json.loads(msg)
            if not isinstance(doc, dict):
                raise ValueError
        except ValueError:
            doc = {"event": "message", "message": msg}
        return json.dumps({"level": record.levelname.lower(), **doc}, sort_keys=True)


def _setup_logging(verbose):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLines())
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


def _event(level, event, **fields):
    log.log(level, json.dumps({"event": event, **fields}))


def _fail(event, exc, code=EXIT_INVALID):
    _event(logging.ERROR, event, error=f"{type(exc).__name__}: {exc}")
    return code


def _ensure_out_dir(path):
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise NotADirectoryError(f"{out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args):
    try:
        scene = simulate.load_scene(args.scene)
    except OSError as exc:
        return _fail("invalid_scene", exc)
    except NdmagError as exc:
        return _fail("invalid_scene", exc)
    try:
        out = _ensure_out_dir(args.out)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            stack, truth = simulate.render_stack(scene)
        for w in caught:
            _event(logging.WARNING, "render_warning", message=str(w.message))
        save_stack(stack, out)
        (out / "ground_truth.json").write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8", newline="\n")
    except OSError as exc:
        return _fail("write_failed", exc)
    _event(logging.INFO, "simulated", n_spots=len(scene.spots), n_frames=stack.manifest.n_frames)
    return EXIT_OK


def cmd_analyze(args):
    try:
        cfg = config_mod.build_config([args.config] if args.config else [], args.set)
        stack_dir = Path(args.stack)
        if not stack_dir.is_dir():
            raise FileNotFoundError(f"stack directory {stack_dir} not found")
        out = _ensure_out_dir(args.out)
        stack = load_stack(stack_dir, max_workers=cfg["runtime.threads"])
    except (OSError, NdmagError) as exc:
        return _fail("invalid_input", exc)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        result = pipeline.analyze_stack(stack, cfg)
    try:
        pipeline.write_outputs(result, out)
    except OSError as exc:
        return _fail("write_failed", exc)
    n_ok = len(result.succeeded)
    _event(logging.INFO, "analyzed", n_detected=len(result.spots), n_reconstructed=n_ok)
    if n_ok == 0:
        _event(logging.ERROR, "no_results", reason="no spot was reconstructed")
        return EXIT_NO_RESULTS
    return EXIT_OK


def cmd_report(args):
    in_dir = Path(args.in_dir)
    try:
        for name in ("fields.csv", "stats.csv", "run.json"):
            if not (in_dir / name).is_file():
                raise FileNotFoundError(f"{in_dir / name} not found; run analyze first")
        files = [in_dir / "config.json"] if (in_dir / "config.json").is_file() else []
        if args.config:
            files.append(args.config)
        cfg = config_mod.build_config(files, args.set)
        out = _ensure_out_dir(args.out)
    except (OSError, NdmagError) as exc:
        return _fail("invalid_input", exc)
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            written = report.write_report(in_dir, out, cfg)
        for w in caught:
            _event(logging.WARNING, "report_warning", message=str(w.message))
    except NdmagError as exc:
        return _fail("no_results", exc, EXIT_NO_RESULTS)
    except OSError as exc:
        return _fail("write_failed", exc)
    _event(logging.INFO, "reported", files=written)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="ndmag", description="Vector magnetometry from wide-field ODMR image stacks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress events, not only warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a synthetic stack from a scene description")
    p.add_argument("--scene", required=True, help="scene JSON file")
    p.add_argument("--out", required=True, help="output stack directory")
    p.set_defaults(func=cmd_simulate)

    for name, func, src, helptext in (
        ("analyze", cmd_analyze, "--stack", "detect, track, fit and reconstruct every spot of a stack"),
        ("report", cmd_report, "--in", "ensemble statistics and plot tables from analyze outputs"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument(src, required=True, dest="stack" if name == "analyze" else "in_dir")
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="JSON config file (nested or dotted keys)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    _setup_logging(args.verbose)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
