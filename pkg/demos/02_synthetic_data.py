"""
Planted multi-interest data
===========================

Items fall into k clusters.  Each user has a long-term affinity over the
clusters plus a drifting "current" cluster.  We generate a log, cut it into
long/short windows and look at what a sample holds.
"""

import numpy as np

from hcn.data import build_vocab, make_samples, synth_generate

log, truth = synth_generate(n_users=200, n_items=80, k_interests=4, seq_len=30,
                            drift_prob=0.2, rng_seed=0)
print(len(log), "interactions;", "first:", log[0])

# how often an event came from the user's current cluster (should be ~0.8)
print("from current cluster:", truth.from_current.mean().round(3))

vocab = build_vocab(log)
split = make_samples(log, vocab, l_long=12, l_short=4, neg_ratio=4, rng_seed=0)
print("train / validation / test samples:",
      len(split.train), len(split.validation), len(split.test))

# one positive and its negatives share windows; only the candidate differs
s = split.test
first = s.take(np.flatnonzero(s.group == s.group[0]))
print("long window :", [vocab.item_id(i) for i in first.long_seq[0]])
print("short window:", [vocab.item_id(i) for i in first.short_seq[0]])
for cand, label in zip(first.candidate, first.label):
    print(f"  candidate {vocab.item_id(cand)}  cluster {truth.item_cluster[vocab.item_id(cand)]}"
          f"  label {label}")
