"""Command-line entry point.

Exit codes: 0 success, 1 runtime/I-O failure, 2 configuration error.
Data (stats, reports, captions) goes to stdout, diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import __version__
from . import autodiff as ad
from .data import (DatasetFormatError, GeneratorConfig, VocabularyOverflowError, build_vocabulary,
                   dataset_stats, generate_dataset, read_dataset, write_dataset)
from .decoder import VocabularyError
from .gradcheck import run_gradcheck
from .metrics import evaluate_corpus, read_eval_corpus
from .training import (CheckpointError, ConfigError, TrainConfig, TrainingError, caption_sample,
                       check_stage_order, evaluate, load_checkpoint, run_pipeline, run_stage,
                       save_checkpoint)

log = logging.getLogger("ctrmcap")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class CliConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# config handling


def parse_value(text: str) -> Any:
    """JSON literal if it parses (numbers, lists, null, booleans), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CliConfigError(f"override {item!r} is not of the form key=value")
        out[key.strip()] = parse_value(value)
    return out


def load_json_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CliConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise CliConfigError(f"{path}: config must be a JSON object")
    return data


def _set_nested(config: dict, key: str, value: Any) -> None:
    # "loss_weights.lambda1=0" reaches into the nested weights object
    head, _, rest = key.partition(".")
    if rest:
        sub = config.setdefault(head, {})
        if not isinstance(sub, dict):
            raise CliConfigError(f"{head} is not a nested object")
        _set_nested(sub, rest, value)
    else:
        config[key] = value


def merged(base: Mapping, overrides: Mapping[str, Any]) -> dict:
    out = json.loads(json.dumps(base))
    for k, v in overrides.items():
        _set_nested(out, k, v)
    return out


def generator_from_dict(d: Mapping) -> tuple[GeneratorConfig, int]:
    d = dict(d)
    n = d.pop("n_samples", 100)
    names = {f.name for f in dataclasses.fields(GeneratorConfig)}
    unknown = set(d) - names
    if unknown:
        raise CliConfigError(f"unknown generator config keys {sorted(unknown)}")
    if isinstance(n, bool) or not isinstance(n, int) or n < 1:
        raise CliConfigError(f"n_samples must be a positive integer, got {n!r}")
    try:
        return GeneratorConfig(**d), n
    except (TypeError, ValueError) as exc:
        raise CliConfigError(str(exc)) from None


def train_config_from_dict(d: Mapping) -> TrainConfig:
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliConfigError(str(exc)) from None


def pipeline_configs(d: Mapping, overrides: Mapping[str, Any]) -> tuple[list[TrainConfig], dict]:
    """``{"common": {...}, "stages": [{...}, ...], "decoding": ...}`` plus overrides.

    ``key=v`` overrides apply to every stage; ``stages.<i>.key=v`` to one stage.
    """
    d = dict(d)
    unknown = set(d) - {"common", "stages", "decoding"}
    if unknown:
        raise CliConfigError(f"unknown pipeline config keys {sorted(unknown)}")
    common, per_stage = {}, {}
    for k, v in overrides.items():
        if k.startswith("stages."):
            _, idx, key = k.split(".", 2)
            per_stage.setdefault(int(idx), {})[key] = v
        elif k == "decoding":
            d["decoding"] = v
        else:
            common[k] = v
    stages = d.get("stages") or [{"stage": "pretrain"}]
    if not isinstance(stages, list):
        raise CliConfigError("stages must be a list of objects")
    effective_stages = []
    for i, stage in enumerate(stages):
        cfg = merged(merged(d.get("common", {}), stage), common)
        effective_stages.append(merged(cfg, per_stage.get(i, {})))
    configs = [train_config_from_dict(s) for s in effective_stages]
    try:
        check_stage_order(configs)
    except ConfigError as exc:
        raise CliConfigError(str(exc)) from None
    decoding = d.get("decoding", "greedy")
    if decoding not in ("greedy", "beam"):
        raise CliConfigError(f"decoding must be 'greedy' or 'beam', got {decoding!r}")
    effective = {"stages": [c.to_dict() for c in configs], "decoding": decoding}
    return configs, effective


def echo_config(effective: Mapping) -> None:
    print("effective config: " + json.dumps(effective, sort_keys=True), file=sys.stderr)


def emit(obj: Any, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    print(text)


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    effective = merged(load_json_config(args.config), parse_overrides(args.set))
    if args.n_samples is not None:
        effective["n_samples"] = args.n_samples
    if args.seed is not None:
        effective["seed"] = args.seed
    config, n = generator_from_dict(effective)
    echo_config({**dataclasses.asdict(config), "n_samples": n})
    samples = generate_dataset(config, n)
    write_dataset(samples, args.out)
    stats = dataset_stats(samples)
    print(f"samples={stats['n_samples']} vocab_size={stats['vocab_size']} "
          f"mean_caption_length={stats['mean_caption_length']:.4f} "
          f"causal_fraction={stats['causal_fraction']:.4f}")
    return EXIT_OK


def _vocab_for(*datasets):
    return build_vocabulary([s for d in datasets if d for s in d])


def cmd_train(args) -> int:
    config = train_config_from_dict(merged(load_json_config(args.config), parse_overrides(args.set)))
    echo_config(config.to_dict())
    data = read_dataset(args.data)
    init = load_checkpoint(args.init) if args.init else None
    vocab = None if init else _vocab_for(data, read_dataset(args.vocab_data) if args.vocab_data else None)
    result = run_stage(config, data, init, vocab)
    save_checkpoint(result.checkpoint, args.out)
    emit({"stage": config.stage, "config": config.to_dict(), "loss_log": result.loss_log,
          "checkpoint": str(args.out)}, args.report)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    configs, effective = pipeline_configs(load_json_config(args.config), parse_overrides(args.set))
    echo_config(effective)
    train = read_dataset(args.data)
    held_out = read_dataset(args.eval_data) if args.eval_data else None
    result = run_pipeline(configs, train, held_out, args.checkpoint_dir, _vocab_for(train, held_out),
                          effective["decoding"], stop_after_epochs=args.stop_after_epochs)
    if args.out and result.completed:
        save_checkpoint(result.checkpoint, args.out)
    emit(result.report, args.report)
    return EXIT_OK


def cmd_eval(args) -> int:
    echo_config({"checkpoint": args.checkpoint, "data": args.data, "corpus": args.corpus,
                 "decoding": args.decoding})
    if args.corpus:
        if args.checkpoint or args.data:
            raise CliConfigError("--corpus scores a hypothesis file; do not combine it with --checkpoint/--data")
        report = evaluate_corpus(read_eval_corpus(args.corpus), per_sample=args.per_sample)
        emit(report.to_dict(include_per_sample=args.per_sample), args.report)
        return EXIT_OK
    if not (args.checkpoint and args.data):
        raise CliConfigError("eval needs --corpus, or both --checkpoint and --data")
    result = evaluate(load_checkpoint(args.checkpoint), read_dataset(args.data), args.decoding)
    emit(result.to_dict(), args.report)
    return EXIT_OK


def cmd_caption(args) -> int:
    echo_config({"checkpoint": args.checkpoint, "data": args.data, "index": args.index,
                 "decoding": args.decoding})
    data = read_dataset(args.data)
    if not 0 <= args.index < len(data):
        raise CliConfigError(f"index {args.index} outside dataset of {len(data)} samples")
    tokens, log_probs = caption_sample(data[args.index], load_checkpoint(args.checkpoint), args.decoding)
    words = [t for t in tokens if t not in ("<bos>", "<eos>", "<pad>")]
    print(" ".join(words))
    for tok, lp in zip(tokens, log_probs):
        print(f"{tok}\t{lp:.6f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    effective = merged(load_json_config(args.config), parse_overrides(args.set))
    unknown = set(effective) - {"seeds", "base_seed", "step"}
    if unknown:
        raise CliConfigError(f"unknown grad-check config keys {sorted(unknown)}")
    echo_config(effective)
    if args.corrupt:
        ad.corrupt_gradient(args.corrupt)
    try:
        report = run_gradcheck(seeds=int(effective.get("seeds", 20)), base_seed=int(effective.get("base_seed", 0)),
                               h=float(effective.get("step", 1e-5)))
    finally:
        ad.clear_corruption()
    for line in report.lines():
        print(line)
    if not report.passed:
        print(f"gradient check failed for: {', '.join(report.failures)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctrmcap", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--vocab-data", help="extra dataset whose words join the vocabulary")
    p.add_argument("--report")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pipeline", help="run ordered stages with checkpoint hand-off")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--checkpoint-dir", help="per-epoch checkpoints; rerunning resumes from them")
    p.add_argument("--out", help="final checkpoint")
    p.add_argument("--report")
    p.add_argument("--stop-after-epochs", type=int, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset, or a hypothesis corpus")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--corpus", help="JSONL of {id, hypothesis, references}")
    p.add_argument("--decoding", choices=("greedy", "beam"), default="greedy")
    p.add_argument("--per-sample", action="store_true")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("caption", help="caption one sample and print per-token log-probabilities")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--decoding", choices=("greedy", "beam"), default="greedy")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    common(p)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)  # negative-control hook
    p.set_defaults(func=cmd_grad_check)
    return parser


CONFIG_ERRORS = (CliConfigError, ConfigError, VocabularyOverflowError)
RUNTIME_ERRORS = (OSError, DatasetFormatError, CheckpointError, TrainingError, VocabularyError, ValueError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
