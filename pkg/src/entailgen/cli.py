"""Command line driver: prepare, train, generate, evaluate, analyze, design.

Every subcommand is a pure function of (inputs, config, seed): reruns with
identical arguments produce byte-identical output files. Settings may come
from a JSON config file (``--config``), with command-line flags taking
precedence; the effective configuration is echoed into run metadata and
hashed into every output file header.

Exit codes: 0 success, 2 configuration error, 3 data/format error,
4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from . import analysis, corpus, decode, evalharness, metrics, models
from .errors import (ConfigError, ContractError, DataError, DesignError,
                     EntailgenError, FormatError)

_DECODE_NORMALIZED = ("greedy", "beam")


def _config_hash(effective):
    blob = json.dumps(effective, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _header(effective):
    return f"entailgen {__version__} config={_config_hash(effective)}"


def _file_hash(path):
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def _require(path, what):
    if path is None:
        raise ConfigError(f"no path given for {what}")
    if not os.path.exists(path):
        raise DataError(f"missing {what}: {path}")
    return path


def _merge(defaults, config_path, cli_values):
    effective = dict(defaults)
    if config_path:
        try:
            loaded = json.loads(open(_require(config_path, "config file")).read())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"bad config file {config_path}: {exc}") from exc
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config settings: {', '.join(unknown)}")
        effective.update(loaded)
    for key, value in cli_values.items():
        if value is not None:
            effective[key] = value
    return effective


def _variant_name(flag_value):
    return flag_value.replace("-", "_")


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

_PREPARE_DEFAULTS = {"train_frac": 0.8, "dev_frac": 0.1, "test_frac": 0.1,
                     "seed": 0, "min_freq": 10}


def _cmd_prepare(args):
    eff = _merge(_PREPARE_DEFAULTS, args.config, {
        "train_frac": args.train_frac, "dev_frac": args.dev_frac,
        "test_frac": args.test_frac, "seed": args.seed, "min_freq": args.min_freq})
    triples = corpus.load_triples(_require(args.triples, "triples file"))
    store = corpus.load_image_features(_require(args.features, "features file"))
    missing = store.missing_ids(triples)
    if missing:
        raise DataError("unresolvable image_ids: " + ", ".join(missing))
    spec = corpus.SplitSpec(eff["train_frac"], eff["dev_frac"], eff["test_frac"],
                            eff["seed"])
    parts = corpus.group_and_split(triples, spec)
    vocab = corpus.build_vocab(parts["train"], min_frequency=eff["min_freq"])

    os.makedirs(args.out_dir, exist_ok=True)
    header = _header(eff)
    written = {}
    for name in ("train", "dev", "test"):
        path = os.path.join(args.out_dir, f"{name}.jsonl")
        corpus.save_triples(path, parts[name], header=header)
        written[f"{name}.jsonl"] = _file_hash(path)
    vocab_path = os.path.join(args.out_dir, "vocab.txt")
    corpus.save_vocab(vocab_path, vocab, header=header)
    written["vocab.txt"] = _file_hash(vocab_path)

    manifest = {"header": header, "config": eff,
                "counts": {name: len(parts[name]) for name in parts},
                "vocab_size": len(vocab),
                "inputs": {"triples": _file_hash(args.triples),
                           "features": _file_hash(args.features)},
                "outputs": written}
    with open(os.path.join(args.out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"prepare: {len(triples)} triples -> "
          + ", ".join(f"{name}={len(parts[name])}" for name in ("train", "dev", "test"))
          + f", vocab={len(vocab)}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_DEFAULTS = {"variant": "unimodal", "epochs": 30, "batch": 32,
                   "lr": 1e-4, "seed": 0, "init_scale": 0.08,
                   "embed_dim": 256, "hidden_dim": 256, "image_proj_dim": 256,
                   "max_len": 30}


def _load_split(data_dir, name):
    return corpus.load_triples(
        _require(os.path.join(data_dir, f"{name}.jsonl"), f"{name} split"))


def _cmd_train(args):
    eff = _merge(_TRAIN_DEFAULTS, args.config, {
        "variant": _variant_name(args.variant) if args.variant else None,
        "epochs": args.epochs, "batch": args.batch, "lr": args.lr,
        "seed": args.seed, "init_scale": args.init_scale,
        "embed_dim": args.embed_dim, "hidden_dim": args.hidden_dim,
        "image_proj_dim": args.image_proj_dim, "max_len": args.max_len})
    vocab = corpus.load_vocab(_require(os.path.join(args.data_dir, "vocab.txt"),
                                       "vocabulary"))
    train_triples = _load_split(args.data_dir, "train")
    dev_triples = _load_split(args.data_dir, "dev")

    features = None
    if eff["variant"] != "unimodal":
        store_path = _require(args.features, "features file (multimodal variant)")
        features = corpus.load_image_features(store_path)
    config = models.ModelConfig(
        variant=eff["variant"], vocab_size=len(vocab),
        embed_dim=eff["embed_dim"], hidden_dim=eff["hidden_dim"],
        image_dim=features.dimension if features else 4096,
        image_proj_dim=eff["image_proj_dim"], max_decode_len=eff["max_len"])
    schedule = models.TrainSchedule(epochs=eff["epochs"], batch_size=eff["batch"],
                                    lr=eff["lr"], seed=eff["seed"],
                                    init_scale=eff["init_scale"])
    params, log = models.train(corpus.encode_triples(train_triples, vocab),
                               corpus.encode_triples(dev_triples, vocab),
                               config, schedule, features)

    os.makedirs(args.out_dir, exist_ok=True)
    params.save(os.path.join(args.out_dir, "checkpoint.egck"))
    metadata = {"header": _header(eff), "effective_config": eff,
                "model_config": config.to_dict(), "run_log": log.to_dict(),
                "data_files": {
                    name: _file_hash(os.path.join(args.data_dir, f"{name}.jsonl"))
                    for name in ("train", "dev")}}
    with open(os.path.join(args.out_dir, "run_metadata.json"), "w", encoding="utf-8") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
    final = log.epochs[-1]
    print(f"train: {eff['variant']} {eff['epochs']} epochs; "
          f"final train ppl {final.train_ppl:.4f}, best dev ppl {log.best_dev_ppl:.4f} "
          f"(epoch {log.best_epoch})")
    return 0


def _load_model(model_dir):
    meta_path = _require(os.path.join(model_dir, "run_metadata.json"), "run metadata")
    meta = json.loads(open(meta_path, encoding="utf-8").read())
    config = models.ModelConfig(**meta["model_config"])
    ckpt = _require(os.path.join(model_dir, "checkpoint.egck"), "checkpoint")
    return models.ModelParams.load(ckpt, config), meta


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

_GENERATE_DEFAULTS = {"split": "test", "strategy": "greedy", "beam": 1,
                      "max_len": None}


def _cmd_generate(args):
    if args.greedy and args.beam and args.beam > 1:
        raise ConfigError("--greedy conflicts with --beam > 1")
    strategy = None
    beam = None
    if args.beam is not None:
        strategy, beam = ("greedy", 1) if args.beam == 1 else ("beam", args.beam)
    if args.greedy:
        strategy, beam = "greedy", 1
    eff = _merge(_GENERATE_DEFAULTS, args.config, {
        "split": args.split, "strategy": strategy, "beam": beam,
        "max_len": args.max_len})
    if eff["strategy"] not in _DECODE_NORMALIZED:
        raise ConfigError(f"unknown decode strategy {eff['strategy']!r}")
    if eff["beam"] == 1:
        eff["strategy"] = "greedy"  # degenerate beam is greedy; hash them alike

    params, _ = _load_model(args.model_dir)
    vocab = corpus.load_vocab(_require(os.path.join(args.data_dir, "vocab.txt"),
                                       "vocabulary"))
    triples = _load_split(args.data_dir, eff["split"])
    features = None
    if params.config.uses_image:
        features = corpus.load_image_features(
            _require(args.features, "features file (multimodal variant)"))
        missing = features.missing_ids(triples)
        if missing:
            raise DataError("missing image features for: " + ", ".join(missing))

    rows = []
    for triple in triples:
        prem, _ = corpus.encode_example(triple, vocab)
        image = features.get(triple.image_id) if params.config.uses_image else None
        src = models.encode_source(params, prem, image, pair_id=triple.pair_id)
        if eff["strategy"] == "greedy":
            result = decode.greedy_generate(src, params, eff["max_len"])
        else:
            result = decode.beam_generate(src, params, eff["beam"], eff["max_len"])
        rows.append((triple.pair_id, " ".join(vocab.decode(result.content)),
                     result.logprob))
    decode.write_generations(args.out, rows, header=_header(eff))
    print(f"generate: {len(rows)} hypotheses ({eff['strategy']}) -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

_EVALUATE_DEFAULTS = {"split": "test", "single_ref": False, "seed": 0}


def _aligned_instances(triples, generations):
    by_id = {pair_id: text for pair_id, text, _ in generations}
    missing = [t.pair_id for t in triples if t.pair_id not in by_id]
    if missing:
        raise DataError("generations missing for pairs: " + ", ".join(missing[:10]))
    return [metrics.EvalInstance(t.pair_id, corpus.tokenize(by_id[t.pair_id]),
                                 [corpus.tokenize(h) for h in t.hypotheses])
            for t in triples]


def _cmd_evaluate(args):
    eff = _merge(_EVALUATE_DEFAULTS, args.config, {
        "split": args.split, "single_ref": args.single_ref, "seed": args.seed})
    params, meta = _load_model(args.model_dir)
    vocab = corpus.load_vocab(_require(os.path.join(args.data_dir, "vocab.txt"),
                                       "vocabulary"))
    triples = _load_split(args.data_dir, eff["split"])
    generations = decode.load_generations(_require(args.generations, "generations file"))
    features = None
    if params.config.uses_image:
        features = corpus.load_image_features(
            _require(args.features, "features file (multimodal variant)"))
    instances = _aligned_instances(triples, generations)
    premises = {t.pair_id: corpus.tokenize(t.premise) for t in triples}
    report = metrics.evaluate_corpus(
        instances, premises=premises, params=params,
        encoded_pairs=corpus.encode_triples(triples, vocab), features=features,
        sample_seed=eff["seed"], single_ref=bool(eff["single_ref"]))
    report.config["variant"] = params.config.variant
    metrics.write_report(args.out, report, header=_header(eff))
    line = (f"evaluate[{params.config.variant}]: BLEU-1 {report.bleu1:.3f}, "
            f"METEOR {report.meteor:.3f}, CIDEr {report.cider:.3f}, "
            f"perplexity {report.perplexity:.3f}")
    if report.bleu1_single_ref_mean is not None:
        line += f", single-ref BLEU-1 {report.bleu1_single_ref_mean:.3f}"
    print(line)
    return 0


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------

_ANALYZE_DEFAULTS = {"split": "test", "dice_threshold": 0.3}


def _cmd_analyze(args):
    eff = _merge(_ANALYZE_DEFAULTS, args.config, {
        "split": args.split, "dice_threshold": args.dice_threshold})
    triples = _load_split(args.data_dir, eff["split"])
    generations = decode.load_generations(_require(args.generations, "generations file"))
    instances = _aligned_instances(triples, generations)
    premises = {t.pair_id: corpus.tokenize(t.premise) for t in triples}
    records = analysis.build_overlap_records(premises, instances)
    report = analysis.overlap_report(records, threshold=eff["dice_threshold"])
    analysis.write_overlap_report(args.out, report, header=_header(eff))
    if args.plot_data:
        analysis.write_plot_data(args.plot_data, report, header=_header(eff))
    print(f"analyze: threshold {report.threshold}; "
          f"low n={report.counts['low']}, high n={report.counts['high']}")
    return 0


# ---------------------------------------------------------------------------
# design
# ---------------------------------------------------------------------------

_DESIGN_DEFAULTS = {"items": 90, "participants": 3, "seed": 0,
                    "conditions": ",".join(evalharness.DEFAULT_CONDITIONS)}


def _cmd_design(args):
    eff = _merge(_DESIGN_DEFAULTS, args.config, {
        "items": args.items, "participants": args.participants,
        "seed": args.seed, "conditions": args.conditions})
    conditions = [c.strip() for c in eff["conditions"].split(",") if c.strip()]
    design_obj = evalharness.design(eff["items"], conditions,
                                    eff["participants"], eff["seed"])
    evalharness.export_design(args.out, design_obj, header=_header(eff))
    print(f"design: {len(design_obj.items)} items x {len(conditions)} conditions "
          f"x {len(design_obj.participants)} participants -> {args.out}")
    if args.responses:
        rows = evalharness.load_responses(_require(args.responses, "responses file"))
        report = evalharness.tally(rows, design_obj)
        if args.tally_out:
            evalharness.write_tally(args.tally_out, report, header=_header(eff))
        for condition in sorted(report.proportions):
            props = report.proportions[condition]
            print(f"tally[{condition}]: " + ", ".join(
                f"{cat}={props[cat]:.3f}" for cat in evalharness.RESPONSE_CATEGORIES))
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser():
    parser = argparse.ArgumentParser(
        prog="entailgen",
        description="Train and evaluate entailment-generation models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tokenize, split and build the vocabulary")
    p.add_argument("--triples", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--train-frac", type=float)
    p.add_argument("--dev-frac", type=float)
    p.add_argument("--test-frac", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--min-freq", type=int)
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--features")
    p.add_argument("--config")
    p.add_argument("--variant",
                   choices=["unimodal", "init-inject", "merge", "image-only"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--init-scale", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--image-proj-dim", type=int)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="decode hypotheses for a split")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features")
    p.add_argument("--config")
    p.add_argument("--split")
    p.add_argument("--beam", type=int)
    p.add_argument("--greedy", action="store_true", default=None)
    p.add_argument("--max-len", type=int)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="multi-reference metric report")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--model-dir", required=True)
    p.add_argument("--generations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features")
    p.add_argument("--config")
    p.add_argument("--split")
    p.add_argument("--single-ref", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("analyze", help="premise/reference overlap analysis")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--generations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--plot-data")
    p.add_argument("--config")
    p.add_argument("--split")
    p.add_argument("--dice-threshold", type=float)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("design", help="latin-square human-evaluation design")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--items", type=int)
    p.add_argument("--participants", type=int)
    p.add_argument("--conditions")
    p.add_argument("--seed", type=int)
    p.add_argument("--responses")
    p.add_argument("--tally-out")
    p.set_defaults(func=_cmd_design)
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DesignError) as exc:
        print(f"entailgen: configuration error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, FileNotFoundError) as exc:
        print(f"entailgen: data error: {exc}", file=sys.stderr)
        return 3
    except (ContractError, EntailgenError) as exc:
        print(f"entailgen: internal invariant violated: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
