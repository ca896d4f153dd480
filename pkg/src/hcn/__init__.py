"""Hierarchical multi-interest co-network for coarse-grained ranking."""

from .data import (BehaviorSample, DatasetSplit, Interaction, SampleSet, Vocabulary,
                   build_vocab, load_log, make_samples, synth_generate)
from .metrics import auc, hit_rate_at_k, ndcg_at_k
from .model import HCN, HcnConfig
from .serve import ItemIndex, export_items, score_candidates, top_k
from .train import MetricReport, TrainRun, ablation_suite, evaluate, train

__version__ = "0.1.0"
