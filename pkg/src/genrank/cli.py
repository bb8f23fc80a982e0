"""Command-line pipeline: synth, train, rank, eval, generate, gradcheck.

Each subcommand reads an optional flat key=value config file (--config) and
accepts trailing key=value overrides; explicit flags win over both. Runs
that produce artifacts also write a manifest.json recording the resolved
configuration, its hash, the seed, and library versions.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import SPLITS, QaDataset, SynthSpec, generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, GenrankError, InputError
from .gradcheck import run_suite
from .generation import SamplerConfig, sample_question
from .model import ModelConfig, init_params, load_checkpoint
from .ranking import SCORERS, evaluate, rank_questions, read_qrels, read_run, write_qrels, write_run
from .textcodec import Vocabulary, build_vocab
from .trainer import CHECKPOINT_NAME, TrainConfig, train

logger = logging.getLogger("genrank.cli")

VOCAB_NAME = "vocab.txt"
_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_SCORER_FLAG = {"q_given_a": "q_given_a", "a_given_q": "a_given_q_lennorm"}


def _parse_value(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def _load_overrides(config_path: str | None, pairs: list[str]) -> dict:
    out: dict = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise InputError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = _parse_value(value.strip())
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = _parse_value(value.strip())
    return out


def _split_namespace(overrides: dict, prefix: str) -> dict:
    taken = {}
    for key in list(overrides):
        if key.startswith(prefix + "."):
            taken[key[len(prefix) + 1:]] = overrides.pop(key)
    return taken


def _build_dataclass(cls, values: dict, label: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown {label} keys {unknown}; valid keys: {sorted(allowed)}")
    return cls(**values)


def _write_manifest(out_path: Path, command: str, config: dict, seed) -> None:
    """manifest.json beside the artifact: everything needed to rerun byte-for-byte."""
    flat = {k: config[k] for k in sorted(config)}
    canon = "\n".join(f"{k}={flat[k]}" for k in flat)
    manifest = {
        "command": command,
        "seed": seed,
        "config": flat,
        "config_hash": hashlib.sha256(canon.encode("utf-8")).hexdigest(),
        "versions": {"genrank": __version__, "python": platform.python_version(),
                     "numpy": np.__version__},
    }
    target = out_path / "manifest.json" if out_path.is_dir() else \
        out_path.with_name(out_path.name + ".manifest.json")
    target.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_model(checkpoint: str, dtype) -> tuple[ModelConfig, dict, Vocabulary]:
    path = Path(checkpoint)
    if path.is_dir():
        ckpt, vocab_path = path / CHECKPOINT_NAME, path / VOCAB_NAME
    else:
        ckpt, vocab_path = path, path.parent / VOCAB_NAME
    if not ckpt.exists():
        raise InputError(f"checkpoint not found: {ckpt}")
    if not vocab_path.exists():
        raise InputError(f"vocabulary not found next to checkpoint: {vocab_path}")
    config, params = load_checkpoint(ckpt, dtype=dtype)
    return config, params, Vocabulary.load(vocab_path)


def _groups_as_questions(dataset: QaDataset, split: str):
    groups = dataset.groups(split)
    if not groups:
        raise InputError(f"dataset has no questions in split {split!r}")
    return [(g.qid, g.text, [(c.pid, c.text) for c in g.candidates]) for g in groups]


# -- subcommands ---------------------------------------------------------------


def _cmd_synth(args) -> int:
    overrides = _load_overrides(args.config, args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    spec = _build_dataclass(SynthSpec, overrides, "synth")
    spec.validate()
    dataset = generate_synthetic(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out)
    dataset.log_stats()
    _write_manifest(out, "synth", dataclasses.asdict(spec), spec.seed)
    logger.info("wrote %s", out)
    return 0


def _cmd_train(args) -> int:
    overrides = _load_overrides(args.config, args.overrides)
    model_kv = _split_namespace(overrides, "model")
    vocab_kv = _split_namespace(overrides, "vocab")
    precision = overrides.pop("precision", "f32")
    if precision not in _PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(_PRECISIONS)}, got {precision!r}")
    if args.objective is not None:
        overrides["objective"] = args.objective
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    config = _build_dataclass(TrainConfig, overrides, "train")
    config.validate()

    dataset = load_dataset(args.data)
    vocab = build_vocab(dataset.texts("train"),
                        max_size=int(vocab_kv.pop("max_size", 50000)),
                        min_freq=int(vocab_kv.pop("min_freq", 1)))
    if vocab_kv:
        raise ConfigError(f"unknown vocab keys {sorted(vocab_kv)}; valid keys: "
                          f"['max_size', 'min_freq']")
    model_kv.setdefault("vocab_size", len(vocab))
    model_config = _build_dataclass(ModelConfig, model_kv, "model")
    params = init_params(model_config, seed=config.seed, dtype=_PRECISIONS[precision])

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / VOCAB_NAME)
    report = train(params, model_config, dataset, vocab, config, out_dir)
    manifest_cfg = dataclasses.asdict(config)
    manifest_cfg.update({f"model.{k}": v for k, v in dataclasses.asdict(model_config).items()})
    manifest_cfg["precision"] = precision
    manifest_cfg["data"] = str(args.data)
    _write_manifest(out_dir, "train", manifest_cfg, config.seed)
    logger.info("best_epoch=%d checkpoint=%s", report.best_epoch, report.checkpoint_path)
    return 0


def _cmd_rank(args) -> int:
    overrides = _load_overrides(args.config, args.overrides)
    precision = overrides.pop("precision", "f32")
    if precision not in _PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(_PRECISIONS)}, got {precision!r}")
    batch_size = int(overrides.pop("batch_size", 64))
    if overrides:
        raise ConfigError(f"unknown rank keys {sorted(overrides)}; valid keys: "
                          f"['batch_size', 'precision']")
    model_config, params, vocab = _load_model(args.checkpoint, _PRECISIONS[precision])
    dataset = load_dataset(args.data)
    questions = _groups_as_questions(dataset, args.split)
    scorer = _SCORER_FLAG[args.scorer]
    runs = rank_questions(params, model_config, vocab, questions, scorer=scorer,
                          batch_size=batch_size, workers=args.workers or 1)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_run(out, runs, tag=scorer)
    if args.qrels:
        write_qrels(args.qrels, dataset.to_qrels(args.split))
    _write_manifest(out, "rank", {"data": str(args.data), "checkpoint": str(args.checkpoint),
                                  "scorer": args.scorer, "split": args.split,
                                  "batch_size": batch_size, "precision": precision},
                    args.seed if args.seed is not None else 0)
    logger.info("wrote %s (%d queries)", out, len(runs))
    return 0


def _cmd_eval(args) -> int:
    runs = read_run(args.run)
    qrels = read_qrels(args.qrels)
    report = evaluate(runs, qrels)
    lines = [f"map={report.map:.6f}", f"mrr={report.mrr:.6f}", f"p_at_1={report.p_at_1:.6f}",
             f"evaluated={report.evaluated}", f"skipped={report.skipped}"]
    text = " ".join(lines)
    print(text)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        _write_manifest(out, "eval", {"run": str(args.run), "qrels": str(args.qrels)}, 0)
    return 0


def _cmd_generate(args) -> int:
    overrides = _load_overrides(args.config, args.overrides)
    precision = overrides.pop("precision", "f32")
    if precision not in _PRECISIONS:
        raise ConfigError(f"precision must be one of {sorted(_PRECISIONS)}, got {precision!r}")
    if args.seed is not None:
        overrides["seed"] = args.seed
    sampler = _build_dataclass(SamplerConfig, overrides, "sampler")
    sampler.validate()
    model_config, params, vocab = _load_model(args.checkpoint, _PRECISIONS[precision])
    outputs = []
    for i in range(args.n_samples):
        cfg = dataclasses.replace(sampler, seed=sampler.seed + i)
        outputs.append(sample_question(params, model_config, vocab, args.passage, cfg))
    for line in outputs:
        print(line)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("\n".join(outputs) + "\n", encoding="utf-8")
        _write_manifest(out, "generate", dataclasses.asdict(sampler), sampler.seed)
    return 0


def _cmd_gradcheck(args) -> int:
    reports = run_suite(seed=args.seed if args.seed is not None else 0,
                        max_entries=40 if args.fast else None)
    for report in reports:
        print(report.line())
    return 0 if all(r.ok for r in reports) else 1


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genrank",
                                     description="Ranking by generation: train a small causal "
                                                 "LM to score passages by question likelihood.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=False):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--workers", type=int, help="parallel scoring workers")
        p.add_argument("--out", required=out_required, help="output path")
        p.add_argument("overrides", nargs="*", metavar="key=value",
                       help="config overrides (highest precedence)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, out_required=True)

    p = sub.add_parser("train", help="fine-tune a model on a dataset")
    p.add_argument("--data", required=True, help="dataset file (jsonl or tsv)")
    p.add_argument("--objective", choices=["mle", "lul", "rll"], help="training objective")
    common(p, out_required=True)

    p = sub.add_parser("rank", help="write a TREC run file for a split")
    p.add_argument("--data", required=True, help="dataset file (jsonl or tsv)")
    p.add_argument("--checkpoint", required=True, help="training output dir or .grnk file")
    p.add_argument("--scorer", choices=sorted(_SCORER_FLAG), default="q_given_a",
                   help="q_given_a scores log p(question|passage); a_given_q scores "
                        "length-normalized log p(passage|question)")
    p.add_argument("--split", choices=list(SPLITS), default="test")
    p.add_argument("--qrels", help="also export qrels for the split to this path")
    common(p, out_required=True)

    p = sub.add_parser("eval", help="score a run file against qrels")
    p.add_argument("--run", required=True, help="TREC run file")
    p.add_argument("--qrels", required=True, help="TREC qrels file")
    common(p, out_required=False)

    p = sub.add_parser("generate", help="sample questions from a trained model")
    p.add_argument("--checkpoint", required=True, help="training output dir or .grnk file")
    p.add_argument("--passage", required=True, help="conditioning passage text")
    p.add_argument("--n-samples", type=int, default=1, help="samples (seeds derived per sample)")
    common(p, out_required=False)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--fast", action="store_true", help="subsample entries per tensor")
    common(p, out_required=False)

    return parser


_COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "rank": _cmd_rank,
             "eval": _cmd_eval, "generate": _cmd_generate, "gradcheck": _cmd_gradcheck}


def main(argv=None) -> int:
    level = os.environ.get("GENRANK_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except GenrankError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
