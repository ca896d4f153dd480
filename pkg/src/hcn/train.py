"""Training loop, evaluation reports and the ablation / n-sweep driver."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import metrics
from .data import DatasetSplit, SampleSet
from .model import HCN, HcnConfig, aggregate_scores_np
from .optim import Adam
from .tensor import Tape

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainRun:
    config_hash: str
    seed: int
    epochs: int = 0
    train_loss: list = field(default_factory=list)
    val_auc: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    best_epoch: int = 0  # 0 means the initialisation was never beaten
    best_val_auc: float = float("nan")
    checkpoint: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("checkpoint")
        return d


@dataclass
class MetricReport:
    auc: Optional[float] = None
    hit_rate: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    pearson_mean: Optional[float] = None
    pearson_skipped: int = 0
    n_samples: int = 0
    n_users: int = 0

    def to_json(self) -> dict:
        return {"auc": self.auc, "hit_rate": {str(k): v for k, v in self.hit_rate.items()},
                "ndcg": {str(k): v for k, v in self.ndcg.items()},
                "pearson_mean": self.pearson_mean, "pearson_skipped": self.pearson_skipped,
                "n_samples": self.n_samples, "n_users": self.n_users}


# --------------------------------------------------------------------------
# batching

def _group_index(samples: SampleSet):
    order = np.argsort(samples.group, kind="stable")
    groups, starts, counts = np.unique(samples.group[order], return_index=True,
                                       return_counts=True)
    return order, starts, counts


def iter_group_batches(samples: SampleSet, batch_size: int,
                       rng: Optional[np.random.Generator] = None):
    """Yield index arrays covering whole sample groups, about ``batch_size`` samples each."""
    order, starts, counts = _group_index(samples)
    g = np.arange(len(starts))
    if rng is not None:
        rng.shuffle(g)
    per_group = max(1, int(np.median(counts))) if len(counts) else 1
    step = max(1, batch_size // per_group)
    for i in range(0, len(g), step):
        sel = g[i:i + step]
        idx = np.concatenate([order[starts[j]:starts[j] + counts[j]] for j in sel])
        yield idx


def predict(model: HCN, samples: SampleSet, batch_size: int = 2048) -> np.ndarray:
    """Logits for every sample, in sample order (no tape is recorded)."""
    out = np.empty(len(samples))
    for idx in iter_group_batches(samples, batch_size):
        out[idx] = model.scores(samples.take(idx)).data[:, 0]
    return out


# --------------------------------------------------------------------------
# training

def train(split: DatasetSplit, config: HcnConfig, item_category: np.ndarray,
          epochs: int = 50, lr: float = 1e-3, batch_size: int = 256, seed: int = 0,
          patience: int = 3, log_every: int = 0) -> tuple[TrainRun, HCN]:
    """Minibatch Adam on the logistic loss with early stopping on validation AUC.

    The returned model holds the best-validation parameters (the
    initialisation when ``epochs == 0`` or nothing beats it).
    """
    if len(split.train) == 0:
        raise ValueError("empty training set")
    model = HCN(config, item_category, seed=seed)
    run = TrainRun(config.hash(), seed)
    run.checkpoint = model.params.state()
    opt = Adam(model.params, lr=lr)
    rng = np.random.default_rng(seed + 1_000_003)
    has_val = len(split.validation) > 0 and len(np.unique(split.validation.label)) == 2
    best, stale = -np.inf, 0

    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses, weights = [], []
        for step, idx in enumerate(iter_group_batches(split.train, batch_size, rng)):
            batch = split.train.take(idx)
            opt.zero_grad()
            with Tape() as tape:
                loss, _ = model.forward_loss(batch)
            value = float(loss.data.reshape(()))
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"loss became {value} at epoch {epoch}, batch {step} "
                    f"(users {np.unique(batch.user)[:10].tolist()}, {len(batch)} samples)")
            tape.backward(loss)
            opt.step()
            losses.append(value)
            weights.append(len(batch))
            if log_every and step % log_every == 0:
                logger.info("epoch %d step %d loss %.4f", epoch, step, value)
        run.train_loss.append(float(np.average(losses, weights=weights)))
        score = metrics.auc(predict(model, split.validation), split.validation.label) \
            if has_val else -run.train_loss[-1]
        run.val_auc.append(score if has_val else float("nan"))
        run.wall_clock.append(time.perf_counter() - t0)
        run.epochs = epoch
        logger.info("epoch %d: train loss %.4f, val auc %s (%.1fs)", epoch,
                    run.train_loss[-1], run.val_auc[-1], run.wall_clock[-1])
        if score > best:
            best, stale = score, 0
            run.best_epoch = epoch
            run.best_val_auc = score if has_val else float("nan")
            run.checkpoint = model.params.state()
        else:
            stale += 1
            if stale >= patience:
                break

    model.params.load_state(run.checkpoint)
    return run, model


# --------------------------------------------------------------------------
# evaluation

def catalog_ranks(model: HCN, positives: SampleSet, chunk: int = 512) -> np.ndarray:
    """1-based rank of each positive's item among all in-vocabulary items."""
    items = np.arange(2, model.config.n_items)
    item_mat = model.item_matrix(items)
    ranks = np.empty(len(positives), dtype=np.int64)
    for lo in range(0, len(positives), chunk):
        part = positives.take(np.arange(lo, min(lo + chunk, len(positives))))
        y = aggregate_scores_np(model.user_vectors(part), item_mat)
        for row, target in enumerate(part.candidate):
            ranks[lo + row] = metrics.rank_of(y[row], int(target) - 2)
    return ranks


def pearson_diversity(model: HCN, samples: SampleSet) -> tuple[float, int]:
    """Mean pairwise Pearson r of the user-side vectors, one sample per group."""
    if model.config.n_eff < 2:
        raise ValueError("pearson diversity needs n >= 2")
    _, first = np.unique(samples.group, return_index=True)
    s = samples.take(first)
    vecs = []
    for idx in np.array_split(np.arange(len(s)), max(1, len(s) // 512)):
        vecs.append(model.user_vectors(s.take(idx)))
    return metrics.mean_pairwise_pearson(np.concatenate(vecs))


def evaluate(model: HCN, samples: SampleSet, ks: Sequence[int] = (50,),
             want: Sequence[str] = ("auc", "hr", "ndcg", "pearson")) -> MetricReport:
    rep = MetricReport(n_samples=len(samples), n_users=len(np.unique(samples.user)))
    if "auc" in want and len(np.unique(samples.label)) == 2:
        rep.auc = metrics.auc(predict(model, samples), samples.label)
    if ("hr" in want or "ndcg" in want) and ks:
        ranks = catalog_ranks(model, samples.positives())
        for k in ks:
            if "hr" in want:
                rep.hit_rate[k] = metrics.hit_rate_from_ranks(ranks, k)
            if "ndcg" in want:
                rep.ndcg[k] = metrics.ndcg_from_ranks(ranks, k)
    if "pearson" in want and model.config.n_eff >= 2:
        rep.pearson_mean, rep.pearson_skipped = pearson_diversity(model, samples)
    return rep


# --------------------------------------------------------------------------
# ablations

ABLATIONS = (
    ("HCN", {}),
    ("w/o CIN", {"use_cin": False}),
    ("w/o HIN and CIN", {"use_cin": False, "use_hin": False}),
    ("mean pooling", {"tower": "mean_pool"}),
    ("single vector", {"single_vector": True}),
)
SWEEP_N = (1, 2, 4, 8, 16)


@dataclass
class AblationRow:
    name: str
    config: HcnConfig
    report: MetricReport
    run: TrainRun


def ablation_suite(split: DatasetSplit, base: HcnConfig, item_category: np.ndarray,
                   sweep: Sequence[int] = SWEEP_N, ks: Sequence[int] = (50,),
                   **train_kwargs) -> list[AblationRow]:
    """Train and evaluate every ablation plus the n sweep on the validation split."""
    rows = []
    variants = [(name, base.with_(**ch)) for name, ch in ABLATIONS]
    variants += [(f"n={n}", base.with_(n=n)) for n in sweep]
    for name, cfg in variants:
        run, model = train(split, cfg, item_category, **train_kwargs)
        rep = evaluate(model, split.validation, ks)
        logger.info("%s: auc %.4f", name, rep.auc)
        rows.append(AblationRow(name, cfg, rep, run))
    return rows


def format_report(rows: Sequence[AblationRow], ks: Sequence[int] = (50,)) -> str:
    head = ["variant", "n", "r", "use_hin", "use_cin", "tower", "auc"]
    head += [f"hr@{k}" for k in ks] + [f"ndcg@{k}" for k in ks] + ["pearson", "epochs"]
    lines = ["\t".join(head)]
    for row in rows:
        c, rep = row.config, row.report
        vals = [row.name, c.n_eff, c.r_eff, c.use_hin, c.use_cin, c.tower, _fmt(rep.auc)]
        vals += [_fmt(rep.hit_rate.get(k)) for k in ks] + [_fmt(rep.ndcg.get(k)) for k in ks]
        vals += [_fmt(rep.pearson_mean), row.run.epochs]
        lines.append("\t".join(str(v) for v in vals))
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.6f}"
