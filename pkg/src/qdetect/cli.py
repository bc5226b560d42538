"""Command line entry point: synth, train, eval, predict, grid.

Every command takes declarative JSON config files for anything beyond its
flags. ``--seed`` drives all randomness of the command it is given to.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import (SynthConfig, filter_by_length, generate_synthetic, length_bucket,
                   load_dataset, materialize_features, split_dataset, write_corpus)
from .errors import QDetectError
from .experiments import (GridSpec, declarative_analysis, emit_table, prepare_data, run_grid,
                          write_tables)
from .models import CELLS, MODEL_ROWS, ModelConfig, build_model, load_model
from .training import TrainConfig, evaluate_f1, fit, score_examples

REG_FLAGS = {"none": "none", "dropout": "dropout", "d": "dropout", "bn": "batchnorm",
             "batchnorm": "batchnorm"}


def _read_json(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def cmd_synth(args):
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    config = SynthConfig.from_dict(d)
    examples = generate_synthetic(config)
    path = write_corpus(examples, args.out)
    counts = {}
    for ex in examples:
        counts[ex.meta["type"]] = counts.get(ex.meta["type"], 0) + 1
    print(f"wrote {len(examples)} examples to {path}")
    for k, v in sorted(counts.items()):
        print(f"  {k:<22} {v}")
    return 0


def _split_for(data, split, split_seed):
    examples = filter_by_length(load_dataset(data))
    if split == "all":
        return examples
    return getattr(split_dataset(examples, seed=split_seed), split)


def cmd_train(args):
    cfg = _read_json(args.config)
    split_seed = cfg.get("split_seed", 0)
    splits, vocab = prepare_data(args.data, split_seed)
    mcfg = ModelConfig.for_row(args.model, cell=args.cell, regularizer=REG_FLAGS[args.reg],
                               seed=args.seed, vocab_size=len(vocab), **cfg.get("model", {}))
    tcfg = TrainConfig(**dict(cfg.get("train", {}), seed=args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = build_model(mcfg, vocab)
    vocab.save(out / "vocab.txt")
    trainlog = fit(model, splits, tcfg, model_path=out / "model.npz",
                   log_path=out / "trainlog.jsonl")
    report = evaluate_f1(model, splits.test)
    print(f"{args.model} {args.cell} {mcfg.regularizer} seed {args.seed}: "
          f"best epoch {trainlog.best_epoch}, valid F1 {trainlog.best_valid_f1:.4f}, "
          f"test F1 {report.f1:.4f}")
    print(f"model written to {out / 'model.npz'}")
    return 0


def cmd_eval(args):
    model = load_model(args.model_file)
    examples = _split_for(args.data, args.split, args.split_seed)
    materialize_features(examples)
    report = evaluate_f1(model, examples, threshold=args.threshold)
    lines = report.summary().splitlines()
    print(lines[0] if not args.buckets else "\n".join(lines))
    if args.declarative:
        decl = [ex for ex in examples if ex.meta.get("type") == "declarative-question"]
        stm = [ex for ex in examples if ex.meta.get("type") == "statement"]
        table = declarative_analysis({model.config.row: model}, decl + stm)
        print(emit_table(table, "declarative", "text"), end="")
    out = Path(args.out) if args.out else Path(args.model_file).with_suffix(".eval.jsonl")
    with open(out, "w", encoding="utf-8") as fh:
        for ex in examples:
            s = report.scores[ex.id]
            fh.write(json.dumps({"id": ex.id, "label": ex.label, "score": s,
                                 "prediction": int(s >= args.threshold),
                                 "bucket": length_bucket(ex),
                                 "type": ex.meta.get("type")}) + "\n")
    print(f"per-example records written to {out}")
    return 0


def cmd_predict(args):
    model = load_model(args.model_file)
    examples = load_dataset(args.input, require_label=False)
    materialize_features(examples)
    scores = score_examples(model, examples)
    for ex in examples:
        s = scores[ex.id]
        print(json.dumps({"id": ex.id, "score": round(s, 6),
                          "prediction": int(s >= args.threshold)}))
    return 0


def cmd_grid(args):
    spec = GridSpec.load(args.spec)
    if args.seed is not None:
        spec.seeds = [args.seed]
    result = run_grid(spec, args.out, jobs=args.jobs, resume=args.resume)
    write_tables(result, args.out)
    n = len(result.records)
    print(f"{n} cells ({len(result.trained)} trained, {n - len(result.trained)} from cache, "
          f"{len(result.failures())} failed)")
    print(emit_table(result, "main", "text"), end="")
    return 0 if not result.failures() else 1


def build_parser():
    p = argparse.ArgumentParser(prog="qdetect", description="Question detection in transcribed "
                                "and recorded speech with recurrent networks.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus (WAVs + records)")
    s.add_argument("--config", help="JSON file with corpus settings")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one grid cell")
    t.add_argument("--model", required=True, choices=MODEL_ROWS)
    t.add_argument("--cell", required=True, choices=CELLS)
    t.add_argument("--reg", required=True, choices=sorted(REG_FLAGS))
    t.add_argument("--data", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON file with 'model', 'train' and 'split_seed' overrides")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a trained model")
    e.add_argument("--model-file", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--buckets", action="store_true", help="add per-length-bucket F1")
    e.add_argument("--declarative", action="store_true",
                   help="print scores for declarative questions and statements")
    e.add_argument("--split", default="all", choices=("all", "train", "valid", "test"))
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out", help="per-example records (default: next to the model file)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="score examples from a records file")
    r.add_argument("--model-file", required=True)
    r.add_argument("--input", required=True)
    r.add_argument("--threshold", type=float, default=0.5)
    r.set_defaults(func=cmd_predict)

    g = sub.add_parser("grid", help="run the 42-candidate grid and emit tables")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=int, default=1)
    g.add_argument("--resume", action="store_true")
    g.add_argument("--seed", type=int, help="run a single seed instead of the spec's list")
    g.set_defaults(func=cmd_grid)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except QDetectError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
