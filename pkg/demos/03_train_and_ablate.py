"""
Training HCN and its ablations
==============================

A short run on a small synthetic log: the full model, the variants without
the co-interest and hierarchical parts, the mean-pooling baseline and a
single user vector.  Runs in about ten seconds on one core.
"""

from hcn.data import build_vocab, make_samples, synth_generate
from hcn.model import HcnConfig
from hcn.train import ablation_suite, format_report

log, _ = synth_generate(600, 120, 4, 40, drift_prob=0.2, rng_seed=0)
vocab = build_vocab(log)
split = make_samples(log, vocab, 20, 5, neg_ratio=4, rng_seed=0, max_train_per_user=4)

base = HcnConfig(n=4, h=2, r=2, D=16, l_long=20, l_short=5, n_items=vocab.n_items,
                 n_categories=vocab.n_categories, dtype="float32")
rows = ablation_suite(split, base, vocab.item_category, sweep=(1, 2, 4), ks=(20,),
                      epochs=4, lr=2e-3, seed=0)
print(format_report(rows, (20,)))
