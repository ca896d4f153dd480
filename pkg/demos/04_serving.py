"""
Offline item index, online scoring
==================================

Item vectors depend on item inputs only, so they are computed once and
written to an index file.  A request runs the user tower once and scores
each candidate with the item-conditioned aggregation over the user's
interest vectors.
"""

import tempfile
from pathlib import Path

import numpy as np

from hcn.data import build_vocab, make_samples, sample_from_history, synth_generate
from hcn.model import HcnConfig
from hcn.serve import (ItemIndex, case_study, export_items, format_case_study,
                       score_candidates, top_k)
from hcn.train import train

log, truth = synth_generate(400, 80, 4, 30, rng_seed=1)
vocab = build_vocab(log)
split = make_samples(log, vocab, 12, 4, neg_ratio=4, rng_seed=1, max_train_per_user=4)
cfg = HcnConfig(n=4, h=2, r=2, D=16, l_long=12, l_short=4, n_items=vocab.n_items,
                n_categories=vocab.n_categories)
run, model = train(split, cfg, vocab.item_category, epochs=3, lr=3e-3)
print("best validation AUC:", round(run.best_val_auc, 4))

path = Path(tempfile.mkdtemp()) / "items.hcni"
export_items(model, vocab, path)
index = ItemIndex.load(path, expected_hash=cfg.hash())
print(f"index: {len(index)} items x {index.dim}, {path.stat().st_size} bytes")

# a request: the last few items a user touched, then every catalog item as a candidate
history = [vocab.item_index(e.item_id) for e in log if e.user_id == "u7"]
sample = sample_from_history(history, cfg.l_long, cfg.l_short, item_category=model.item_category)
scored, rejected = score_candidates(sample, list(index.item_ids), index, model)
for c in top_k(scored, 5):
    print(f"{c.rank}. {c.item_id}  score {c.score:+.3f}  cluster {truth.item_cluster[c.item_id]}")

# nearest items to each interest vector, labelled with the planted cluster
print(format_case_study(case_study(sample, index, model, 4, truth.item_cluster)))
print("clusters in u7's history:", np.bincount([truth.item_cluster[vocab.item_id(i)] for i in history]))
