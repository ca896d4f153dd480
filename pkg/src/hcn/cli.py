"""``hcn`` command line: train, evaluate, ablate, export and serve."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import (Vocabulary, build_vocab, load_log, load_samples, make_samples,
                   sample_from_history, save_samples, synth_generate)
from .model import HCN, HcnConfig
from .serve import (ItemIndex, bench, case_study, export_items, format_case_study,
                    score_candidates, top_k)
from .train import ablation_suite, evaluate, format_report, train

log = logging.getLogger("hcn")

DATA_DEFAULTS = {"delimiter": "\t", "columns": ["user", "item", "category", "timestamp"],
                 "behavior_filter": None, "min_count": 1, "neg_ratio": 4,
                 "max_train_per_user": None}
TRAIN_DEFAULTS = {"epochs": 50, "lr": 1e-3, "batch_size": 256, "patience": 3}


def _read_config(path):
    raw = json.loads(Path(path).read_text()) if path else {}
    data = {**DATA_DEFAULTS, **raw.pop("data", {})}
    training = {**TRAIN_DEFAULTS, **raw.pop("train", {})}
    return raw, data, training


def _load_data(path, data):
    return load_log(path, delimiter=data["delimiter"], columns=data["columns"],
                    behavior_filter=data["behavior_filter"])


def _split(interactions, vocab, cfg: HcnConfig, data, seed):
    return make_samples(interactions, vocab, cfg.l_long, cfg.l_short, data["neg_ratio"],
                        rng_seed=seed, max_train_per_user=data["max_train_per_user"])


def _prepared(path) -> bool:
    return (Path(path) / "samples.hcns").is_file()


def _dataset(path, model_cfg: dict, data, seed):
    """Vocabulary, config and split from a raw log or a ``hcn data prepare`` directory."""
    if _prepared(path):
        split, meta = load_samples(Path(path) / "samples.hcns")
        vocab = Vocabulary.load(Path(path) / "vocab.json")
        for key in ("l_long", "l_short"):
            if key in model_cfg and model_cfg[key] != meta[key]:
                log.warning("%s=%s in the config, prepared samples use %s", key,
                            model_cfg[key], meta[key])
        model_cfg = {**model_cfg, "l_long": meta["l_long"], "l_short": meta["l_short"]}
    else:
        interactions = _load_data(path, data)
        vocab = build_vocab(interactions, data["min_count"])
        split = None
    cfg = HcnConfig.from_json({**model_cfg, "n_items": vocab.n_items,
                               "n_categories": vocab.n_categories})
    if split is None:
        split = _split(interactions, vocab, cfg, data, seed)
    return vocab, cfg, split


def _load_model(ckpt_dir):
    d = Path(ckpt_dir)
    cfg = HcnConfig.load(d / "config.json")
    vocab = Vocabulary.load(d / "vocab.json")
    model = HCN(cfg, vocab.item_category)
    model.params.load_state(checkpoint.load(d / "params.hcnp"))
    return model, vocab, json.loads((d / "run.json").read_text())


def _read_history(path, vocab: Vocabulary):
    items = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            items.append(vocab.item_index(line.split("\t")[0]))
    return items


def _parse_metrics(spec):
    want, ks = set(), set()
    for tok in spec.split(","):
        tok = tok.strip().lower()
        if "@" in tok:
            name, k = tok.split("@")
            want.add({"hr": "hr", "ndcg": "ndcg"}[name])
            ks.add(int(k))
        elif tok:
            want.add(tok)
    return sorted(want), sorted(ks)


def cmd_train(args):
    model_cfg, data, training = _read_config(args.config)
    vocab, cfg, split = _dataset(args.data, model_cfg, data, args.seed)
    run, model = train(split, cfg, vocab.item_category, seed=args.seed, **training)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    vocab.save(out / "vocab.json")
    checkpoint.save(out / "params.hcnp", model.params)
    summary = {**run.summary(), "data": data, "train": training}
    (out / "run.json").write_text(json.dumps(summary, indent=2))
    print(f"epochs\t{run.epochs}\nbest_epoch\t{run.best_epoch}\nbest_val_auc\t{run.best_val_auc:.6f}")


def cmd_eval(args):
    model, vocab, run = _load_model(args.checkpoint)
    if _prepared(args.data):
        split, _ = load_samples(Path(args.data) / "samples.hcns")
    else:
        interactions = _load_data(args.data, run["data"])
        split = _split(interactions, vocab, model.config, run["data"], run["seed"])
    want, ks = _parse_metrics(args.metrics)
    samples = getattr(split, args.split)
    rep = evaluate(model, samples, ks, want)
    rows = []
    if rep.auc is not None:
        rows.append(("auc", rep.auc))
    rows += [(f"hr@{k}", v) for k, v in rep.hit_rate.items()]
    rows += [(f"ndcg@{k}", v) for k, v in rep.ndcg.items()]
    if rep.pearson_mean is not None:
        rows.append(("pearson", rep.pearson_mean))
    print("metric\tvalue")
    for name, v in rows:
        print(f"{name}\t{v:.6f}")
    if args.json:
        Path(args.json).write_text(json.dumps(rep.to_json(), indent=2))


def cmd_ablate(args):
    model_cfg, data, training = _read_config(args.config)
    vocab, cfg, split = _dataset(args.data, model_cfg, data, args.seed)
    rows = ablation_suite(split, cfg, vocab.item_category, ks=(args.k,), seed=args.seed,
                          **training)
    text = format_report(rows, (args.k,))
    sys.stdout.write(text)
    if args.json:
        Path(args.json).write_text(json.dumps(
            [{"variant": r.name, "config": r.config.to_json(), "metrics": r.report.to_json(),
              "run": r.run.summary()} for r in rows], indent=2))


def cmd_export(args):
    model, vocab, _ = _load_model(args.checkpoint)
    index = export_items(model, vocab, args.out)
    print(f"wrote {len(index)} items x {index.dim} to {args.out}")


def cmd_score(args):
    model, vocab, _ = _load_model(args.checkpoint)
    index = ItemIndex.load(args.index, expected_hash=model.config.hash())
    sample = sample_from_history(_read_history(args.user_history, vocab),
                                 model.config.l_long, model.config.l_short,
                                 item_category=model.item_category)
    candidates = [c.strip() for c in Path(args.candidates).read_text().splitlines() if c.strip()]
    scored, rejected = score_candidates(sample, candidates, index, model, args.prob)
    for c in top_k(scored, args.k) if scored else []:
        print(f"{c.item_id}\t{c.score:.6f}\t{c.rank}")
    if rejected:
        print(f"rejected {len(rejected)} unknown candidates: {' '.join(rejected[:20])}",
              file=sys.stderr)


def cmd_case_study(args):
    model, vocab, _ = _load_model(args.checkpoint)
    index = ItemIndex.load(args.index, expected_hash=model.config.hash())
    sample = sample_from_history(_read_history(args.user_history, vocab),
                                 model.config.l_long, model.config.l_short,
                                 item_category=model.item_category)
    clusters = None
    if args.clusters:
        clusters = dict(line.split("\t")[:2] for line in
                        Path(args.clusters).read_text().splitlines() if line.strip())
    sys.stdout.write(format_case_study(case_study(sample, index, model, args.k, clusters)))


def cmd_bench(args):
    cfg = HcnConfig(n=args.n, h=args.heads, r=args.r, D=args.D, l_long=args.l_long,
                    l_short=args.l_short, n_items=args.candidates + 2, n_categories=10)
    rng = np.random.default_rng(0)
    cats = np.concatenate([[0], rng.integers(1, 10, args.candidates + 1)])
    model = HCN(cfg, cats, seed=0)
    vocab = Vocabulary(["<pad>", "<oov>"] + [f"i{i}" for i in range(args.candidates)],
                       [f"c{i}" for i in range(10)], ["<pad>", "<oov>"], cats)
    index = export_items(model, vocab)
    sample = sample_from_history(rng.integers(2, args.candidates + 2, cfg.l_long + cfg.l_short),
                                 cfg.l_long, cfg.l_short, item_category=cats)
    res = bench(model, index, sample)
    for k, v in res.items():
        print(f"{k}\t{v}")


def cmd_data_prepare(args):
    data = {**DATA_DEFAULTS, "delimiter": args.delimiter, "behavior_filter": args.behavior,
            "min_count": args.min_count, "neg_ratio": args.neg_ratio,
            "max_train_per_user": args.max_train_per_user}
    if args.columns:
        data["columns"] = args.columns.split(",")
    interactions = _load_data(args.input, data)
    vocab = build_vocab(interactions, data["min_count"])
    split = make_samples(interactions, vocab, args.ll, args.ls, args.neg_ratio, args.seed,
                         max_train_per_user=args.max_train_per_user)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.json")
    prep = {**data, "input": str(args.input), "l_long": args.ll, "l_short": args.ls,
            "seed": args.seed}
    digest = hashlib.sha256(json.dumps(prep, sort_keys=True).encode()).hexdigest()
    save_samples(split, out / "samples.hcns", {
        "n_items": vocab.n_items, "n_categories": vocab.n_categories, "n_users": len(vocab.users) - 2,
        "config_hash": digest, "prepare": prep})
    print(f"train\t{len(split.train)}\nvalidation\t{len(split.validation)}\n"
          f"test\t{len(split.test)}\nskipped_users\t{split.skipped_users}")


def cmd_data_synth(args):
    events, truth = synth_generate(args.users, args.items, args.k, args.seq_len,
                                   args.drift, args.seed)
    with open(args.out, "w") as fh:
        fh.write("user\titem\tcategory\ttimestamp\n")
        for e in events:
            fh.write(f"{e.user_id}\t{e.item_id}\t{e.category_id}\t{e.timestamp}\n")
    if args.clusters:
        Path(args.clusters).write_text(
            "".join(f"{item}\t{c}\n" for item, c in sorted(truth.item_cluster.items())))
    print(f"wrote {len(events)} interactions to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hcn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a model and write a checkpoint directory")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metrics", default="auc,hr@50,ndcg@50,pearson")
    s.add_argument("--split", choices=("train", "validation", "test"), default="test")
    s.add_argument("--json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="ablation table and n sweep")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--k", type=int, default=50)
    s.add_argument("--json")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("export-items", help="write the item index")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_export)

    for name, func, text in (("score", cmd_score, "rank candidates for one history"),
                             ("case-study", cmd_case_study, "nearest items per interest center")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--index", required=True)
        s.add_argument("--user-history", required=True,
                       help="item ids, one per line, oldest first")
        if name == "score":
            s.add_argument("--candidates", required=True, help="item ids, one per line")
            s.add_argument("--k", type=int, default=50)
            s.add_argument("--prob", action="store_true", help="report sigmoid(score)")
        else:
            s.add_argument("--k", type=int, default=4, help="items per center")
            s.add_argument("--clusters", help="TSV item_id<TAB>cluster for labelling")
        s.set_defaults(func=func)

    s = sub.add_parser("bench", help="time exhaustive candidate scoring")
    s.add_argument("--candidates", type=int, default=10_000)
    s.add_argument("--n", type=int, default=8)
    s.add_argument("--D", type=int, default=48)
    s.add_argument("--heads", type=int, default=4)
    s.add_argument("--r", type=int, default=4)
    s.add_argument("--l-long", type=int, default=120)
    s.add_argument("--l-short", type=int, default=30)
    s.set_defaults(func=cmd_bench)

    d = sub.add_parser("data", help="prepare samples or generate a synthetic log")
    dsub = d.add_subparsers(dest="data_command", required=True)
    s = dsub.add_parser("prepare", help="cut a log into persisted samples")
    s.add_argument("--input", required=True)
    s.add_argument("--ll", type=int, required=True, help="long window length")
    s.add_argument("--ls", type=int, required=True, help="short window length")
    s.add_argument("--neg-ratio", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--delimiter", default="\t")
    s.add_argument("--columns", help="comma-separated column roles, e.g. user,item,category,behavior,timestamp")
    s.add_argument("--behavior", help="keep only rows with this behavior type")
    s.add_argument("--min-count", type=int, default=1)
    s.add_argument("--max-train-per-user", type=int)
    s.set_defaults(func=cmd_data_prepare)

    s = dsub.add_parser("synth", help="write a planted multi-interest log")
    s.add_argument("--out", required=True)
    s.add_argument("--clusters")
    s.add_argument("--users", type=int, default=2000)
    s.add_argument("--items", type=int, default=400)
    s.add_argument("--k", type=int, default=4)
    s.add_argument("--seq-len", type=int, default=80)
    s.add_argument("--drift", type=float, default=0.2)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_data_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
