"""Command-line entry point: ``hallulrp <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or malformed inputs, too few positives), 3 numerical failure.
"""
import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from hallulrp import pipeline
from hallulrp.config import ConfigError, config_from_dict, load_config
from hallulrp.detector import MlpDivergedError
from hallulrp.model import TrainingDivergedError, WeightFileError
from hallulrp.perturb import InsufficientPositivesError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("hallulrp")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for data errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _split_map(args):
    if args.input:
        return {Path(args.input).name.split(".")[0]: Path(args.input)}
    return None


def cmd_make_corpus(ws, cfg, args):
    return pipeline.make_corpus(ws, cfg), []


def cmd_train_model(ws, cfg, args):
    return pipeline.train_model(ws, cfg), [ws.corpus]


def cmd_generate_data(ws, cfg, args):
    return pipeline.generate_data(ws, cfg), [ws.weights, ws.corpus]


def cmd_contributions(ws, cfg, args):
    modes = pipeline.MODES if args.mode == "both" else (args.mode,)
    inputs = _split_map(args)
    used = list(inputs.values()) if inputs else [ws.split(s) for s in pipeline.SPLITS]
    return pipeline.contributions(ws, cfg, inputs, modes), [ws.weights] + used


def cmd_analyze(ws, cfg, args):
    used = [ws.contrib(s, "features.jsonl") for s in pipeline.SPLITS]
    return pipeline.analyze(ws, cfg), used


def cmd_train_detector(ws, cfg, args):
    used = [ws.contrib(s, "features.jsonl") for s in ("train", "val")]
    return pipeline.train_detectors(ws, cfg), used


def cmd_detect(ws, cfg, args):
    dets = [Path(p) for p in args.detector] if args.detector else None
    inp = Path(args.input) if args.input else None
    out = pipeline.detect(ws, cfg, dets, inp)
    return out, (dets or pipeline.detector_files(ws)) + [inp or ws.contrib("test", "features.jsonl")]


def cmd_eval(ws, cfg, args):
    inp = Path(args.input) if args.input else None
    out = pipeline.evaluate(ws, cfg, inp, args.split)
    return out, pipeline.detector_files(ws) + [inp or ws.contrib(args.split, "features.jsonl")]


def cmd_stress(ws, cfg, args):
    if args.k is not None and args.k < 1:
        raise UsageError("--k must be >= 1")
    if args.rate is not None and not 0 < args.rate < 1:
        raise UsageError("--rate must be in (0, 1)")
    return pipeline.stress(ws, cfg, args.k, args.rate, args.size), [ws.weights] + pipeline.detector_files(ws)


def cmd_run_all(ws, cfg, args):
    out, used = [], []
    for name, fn in STEPS:
        o, u = fn(ws, cfg, args)
        pipeline.write_manifest(ws, cfg, name, u, o)
        out += o
    return out, used


STEPS = [
    ("train-model", cmd_train_model),
    ("generate-data", cmd_generate_data),
    ("contributions", cmd_contributions),
    ("analyze", cmd_analyze),
    ("train-detector", cmd_train_detector),
    ("eval", cmd_eval),
    ("stress", cmd_stress),
]

COMMANDS = {
    "make-corpus": (cmd_make_corpus, "write the toy parallel corpus"),
    "train-model": (cmd_train_model, "train the toy translation model (creates the corpus if absent)"),
    "generate-data": (cmd_generate_data, "perturb, translate and label contrastive pairs"),
    "contributions": (cmd_contributions, "compute relevance exports, heatmap grids and features"),
    "analyze": (cmd_analyze, "contrastive SMD analysis and contribution curves"),
    "train-detector": (cmd_train_detector, "train MLP detectors and tune baselines on val"),
    "detect": (cmd_detect, "apply detectors to a feature file"),
    "eval": (cmd_eval, "evaluate all detectors on a labelled split"),
    "stress": (cmd_stress, "score a fresh unlabelled corpus and list top-k candidates"),
    "run-all": (cmd_run_all, "run every stage from training to stress test"),
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config (default: packaged default)")
    common.add_argument("--seed", type=int, help="override the master seed")
    common.add_argument("--out", default="runs/default", help="working directory (default: %(default)s)")
    common.add_argument("--overwrite", action="store_true", help="allow replacing existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="hallulrp", description="Hallucination detection from token contribution patterns.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parsers = {}
    for name, (_, help_text) in COMMANDS.items():
        parsers[name] = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    for name in ("contributions", "run-all"):
        parsers[name].add_argument("--mode", choices=["lrp", "attention", "both"], default="both")
    parsers["contributions"].add_argument("--input", help="pairs JSONL (default: all splits)")
    parsers["detect"].add_argument("--detector", action="append", help="detector file (repeatable; default: all)")
    parsers["detect"].add_argument("--input", help="feature JSONL (default: test features)")
    parsers["eval"].add_argument("--input", help="feature JSONL (default: features of --split)")
    parsers["eval"].add_argument("--split", default="test", choices=list(pipeline.SPLITS))
    for name in ("stress", "run-all"):
        parsers[name].add_argument("--k", type=int, help="top-k list size (default: config eval.top_k)")
        parsers[name].add_argument("--rate", type=float, help="calibrated flag rate (default: config eval.rate)")
        parsers[name].add_argument("--size", type=int, help="stress corpus size (default: config)")
    parsers["run-all"].set_defaults(input=None, detector=None, split="test")
    return p


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        d = cfg.to_dict()
        d["seed"] = args.seed
        cfg = config_from_dict(d)
    return cfg


def _guard_outputs(ws, command, overwrite):
    manifest = ws.path("manifests", f"{command}.json")
    if manifest.exists() and not overwrite:
        raise UsageError(f"{manifest} exists; pass --overwrite to replace outputs")
    if command == "run-all" and overwrite and ws.root.exists():
        for child in ("data", "contrib", "analysis", "detectors", "detect", "eval", "stress", "manifests"):
            shutil.rmtree(ws.path(child), ignore_errors=True)
        for f in (ws.corpus, ws.weights, ws.train_log):
            f.unlink(missing_ok=True)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    fn = COMMANDS[args.command][0]
    try:
        cfg = _load(args)
        ws = pipeline.Workspace(args.out)
        _guard_outputs(ws, args.command, args.overwrite)
        outputs, inputs = fn(ws, cfg, args)
        if args.command != "run-all":
            pipeline.write_manifest(ws, cfg, args.command, inputs, outputs)
    except (UsageError, ConfigError) as e:
        print(f"hallulrp: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, MlpDivergedError, FloatingPointError, ArithmeticError) as e:
        print(f"hallulrp: numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except InsufficientPositivesError as e:
        print(f"hallulrp: data error: {e}; label counts {json.dumps(e.counts, sort_keys=True)}", file=sys.stderr)
        return EXIT_DATA
    except (FileNotFoundError, WeightFileError, ValueError, KeyError, json.JSONDecodeError) as e:
        msg = f"missing input {e.filename}" if isinstance(e, FileNotFoundError) and e.filename else str(e)
        if "non-finite" in msg:
            print(f"hallulrp: numerical error: {msg}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"hallulrp: data error: {msg}", file=sys.stderr)
        return EXIT_DATA
    for p in outputs:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
