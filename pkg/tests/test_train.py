import math

import numpy as np
import pytest

from hcn.data import build_vocab, make_samples, synth_generate
from hcn.model import HCN, HcnConfig
from hcn.train import (ABLATIONS, SWEEP_N, TrainingDiverged, ablation_suite, evaluate,
                       format_report, iter_group_batches, predict, train)


@pytest.fixture(scope="module")
def tiny():
    log, truth = synth_generate(60, 40, 4, 24, rng_seed=0)
    vocab = build_vocab(log)
    split = make_samples(log, vocab, 8, 3, neg_ratio=2, rng_seed=0, max_train_per_user=2)
    cfg = HcnConfig(n=2, h=2, r=2, D=8, l_long=8, l_short=3, n_items=vocab.n_items,
                    n_categories=vocab.n_categories)
    return vocab, split, cfg


def test_zero_epochs_returns_initialisation(tiny):
    vocab, split, cfg = tiny
    run, model = train(split, cfg, vocab.item_category, epochs=0, seed=3)
    init = HCN(cfg, vocab.item_category, seed=3).params.state()
    assert run.epochs == 0 and run.best_epoch == 0
    for name, value in init.items():
        assert np.array_equal(model.params[name].data, value)


def test_200_samples_20_epochs_beat_chance(tiny):
    vocab, split, cfg = tiny
    small = split.train.take(np.arange(200))
    from hcn.data import DatasetSplit
    run, _ = train(DatasetSplit(small, split.validation, split.test), cfg, vocab.item_category,
                   epochs=20, lr=5e-3, batch_size=32, patience=20)
    assert run.epochs == 20
    assert run.train_loss[-1] < math.log(2)


def test_same_seed_same_run(tiny):
    vocab, split, cfg = tiny
    a, ma = train(split, cfg, vocab.item_category, epochs=2, seed=1)
    b, mb = train(split, cfg, vocab.item_category, epochs=2, seed=1)
    assert a.train_loss == b.train_loss and a.val_auc == b.val_auc
    assert evaluate(ma, split.test, (5,)) == evaluate(mb, split.test, (5,))


def test_early_stopping_keeps_best(tiny):
    vocab, split, cfg = tiny
    run, model = train(split, cfg, vocab.item_category, epochs=30, lr=3e-2, patience=1, seed=0)
    assert run.epochs < 30
    assert run.best_val_auc == max(run.val_auc)
    from hcn import metrics
    assert metrics.auc(predict(model, split.validation), split.validation.label) == run.best_val_auc


def test_divergence_is_reported(tiny):
    vocab, split, cfg = tiny
    with pytest.raises(TrainingDiverged, match="batch"):
        train(split, cfg, vocab.item_category, epochs=1, lr=float("nan"))


def test_empty_training_set(tiny):
    vocab, split, cfg = tiny
    from hcn.data import DatasetSplit
    with pytest.raises(ValueError):
        train(DatasetSplit(split.train.take(np.arange(0)), split.validation, split.test), cfg,
              vocab.item_category)


def test_group_batches_cover_each_sample_once(tiny):
    _, split, _ = tiny
    idx = np.concatenate(list(iter_group_batches(split.train, 37, np.random.default_rng(0))))
    assert np.array_equal(np.sort(idx), np.arange(len(split.train)))
    for batch in iter_group_batches(split.train, 37):
        groups = split.train.group[batch]
        for g in np.unique(groups):
            assert (groups == g).sum() == (split.train.group == g).sum()


def test_metric_report_ranges(tiny):
    vocab, split, cfg = tiny
    model = HCN(cfg, vocab.item_category, seed=0)
    rep = evaluate(model, split.test, (1, 5, 10_000))
    assert 0 <= rep.auc <= 1 and -1 <= rep.pearson_mean <= 1
    assert rep.hit_rate[10_000] == 1.0
    assert rep.n_samples == len(split.test)
    assert rep.n_users == len(np.unique(split.test.user))
    before = model.params.state()
    evaluate(model, split.test)
    for name, value in before.items():
        assert np.array_equal(model.params[name].data, value)


def test_ablation_suite_rows(tiny):
    vocab, split, cfg = tiny
    rows = ablation_suite(split, cfg, vocab.item_category, ks=(5,), epochs=1)
    assert len(rows) == len(ABLATIONS) + len(SWEEP_N) == 10
    by_name = {r.name: r for r in rows}
    assert by_name["n=1"].report.auc == by_name["single vector"].report.auc
    text = format_report(rows, (5,))
    assert len(text.strip().splitlines()) == 11
    assert text.splitlines()[0].split("\t")[:2] == ["variant", "n"]
