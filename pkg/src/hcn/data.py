"""Interaction logs, vocabularies, long/short behavior windows and samples.

Also hosts the planted multi-interest generator used by the synthetic
benchmarks.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0
OOV = 1
N_ACTIVITY_BUCKETS = 8
N_USER_FEATURES = 2  # activity bucket, top category


class MalformedLogError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    category_id: Optional[str]
    timestamp: int


def load_log(path, delimiter: str = "\t", has_header: Optional[bool] = None,
             columns: Sequence[str] = ("user", "item", "category", "timestamp"),
             behavior_filter: Optional[str] = None,
             max_malformed_frac: float = 0.01) -> list[Interaction]:
    """Read a delimited interaction log.

    ``columns`` names the fields in file order; recognised names are
    ``user``, ``item``, ``category``, ``timestamp`` and ``behavior`` (others
    are ignored).  With ``behavior_filter`` set, only rows whose behavior
    column equals it are kept, e.g. ``"pv"`` for the Taobao export which is
    laid out as ``user,item,category,behavior,timestamp``.

    Returns interactions grouped by user and sorted by time; ties keep file
    order.  Raises :class:`MalformedLogError` if more than
    ``max_malformed_frac`` of the rows cannot be parsed.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter=delimiter))
    if not rows:
        logger.warning("empty interaction log: %s", path)
        return []

    cols = {name: i for i, name in enumerate(columns)}
    for needed in ("user", "item", "timestamp"):
        if needed not in cols:
            raise ValueError(f"columns must include {needed!r}")
    if has_header is None:
        has_header = not rows[0][cols["timestamp"]].strip().lstrip("-").isdigit() \
            if len(rows[0]) > cols["timestamp"] else True
    if has_header:
        rows = rows[1:]

    need = 1 + max(i for k, i in cols.items() if k in ("user", "item", "timestamp", "behavior"))
    out: list[tuple[int, Interaction]] = []
    bad: list[tuple[int, list]] = []
    for lineno, row in enumerate(rows, start=2 if has_header else 1):
        if not row or all(not c.strip() for c in row):
            continue
        try:
            if len(row) < need:
                raise ValueError("short row")
            if behavior_filter is not None and row[cols["behavior"]].strip() != behavior_filter:
                continue
            cat = row[cols["category"]].strip() if "category" in cols and cols["category"] < len(row) else None
            inter = Interaction(row[cols["user"]].strip(), row[cols["item"]].strip(),
                                cat or None, int(row[cols["timestamp"]].strip()))
            if not inter.user_id or not inter.item_id:
                raise ValueError("empty id")
        except (ValueError, IndexError):
            bad.append((lineno, row))
            continue
        out.append((len(out), inter))

    total = len(out) + len(bad)
    if bad:
        logger.warning("%d malformed rows in %s", len(bad), path)
        if len(bad) > max_malformed_frac * total:
            sample = "; ".join(f"line {n}: {r!r}" for n, r in bad[:3])
            raise MalformedLogError(
                f"{len(bad)} of {total} rows malformed in {path} (e.g. {sample})")
    out.sort(key=lambda p: (p[1].user_id, p[1].timestamp, p[0]))
    return [inter for _, inter in out]


def group_by_user(log: Iterable[Interaction]) -> dict[str, list[Interaction]]:
    """User -> time-ordered interactions (stable for equal timestamps)."""
    users: dict[str, list[tuple[int, Interaction]]] = defaultdict(list)
    for i, inter in enumerate(log):
        users[inter.user_id].append((i, inter))
    return {u: [x for _, x in sorted(evs, key=lambda p: (p[1].timestamp, p[0]))]
            for u, evs in sorted(users.items())}


@dataclass
class Vocabulary:
    """Id <-> index maps.  Index 0 is padding, index 1 out-of-vocabulary."""

    items: list[str]
    categories: list[str]
    users: list[str]
    item_category: np.ndarray  # item index -> category index
    _item_index: dict = field(init=False, repr=False)
    _cat_index: dict = field(init=False, repr=False)
    _user_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.item_category = np.asarray(self.item_category, dtype=np.int64)
        self._item_index = {v: i for i, v in enumerate(self.items) if i >= 2}
        self._cat_index = {v: i for i, v in enumerate(self.categories) if i >= 2}
        self._user_index = {v: i for i, v in enumerate(self.users) if i >= 2}

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_categories(self) -> int:
        return len(self.categories)

    def item_index(self, item_id: str) -> int:
        return self._item_index.get(item_id, OOV)

    def category_index(self, category_id: Optional[str]) -> int:
        if category_id is None:
            return OOV
        return self._cat_index.get(category_id, OOV)

    def user_index(self, user_id: str) -> int:
        return self._user_index.get(user_id, OOV)

    def item_id(self, index: int) -> str:
        return self.items[index]

    def real_items(self) -> np.ndarray:
        """Indices of in-vocabulary items (everything but padding and OOV)."""
        return np.arange(2, self.n_items)

    def to_json(self) -> dict:
        return {"items": self.items, "categories": self.categories,
                "users": self.users, "item_category": self.item_category.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["items"], obj["categories"], obj["users"], obj["item_category"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def _ranked(counter: Counter, min_count: int) -> list[str]:
    keep = [k for k, c in counter.items() if c >= min_count]
    return sorted(keep, key=lambda k: (-counter[k], k))


def build_vocab(log: Sequence[Interaction], min_count: int = 1) -> Vocabulary:
    """Index items, categories and users by descending frequency, then id.

    Items seen fewer than ``min_count`` times are left out and therefore
    resolve to the OOV index.
    """
    item_counts = Counter(x.item_id for x in log)
    cat_counts = Counter(x.category_id for x in log if x.category_id is not None)
    user_counts = Counter(x.user_id for x in log)
    items = ["<pad>", "<oov>"] + _ranked(item_counts, min_count)
    cats = ["<pad>", "<oov>"] + _ranked(cat_counts, 1)
    users = ["<pad>", "<oov>"] + _ranked(user_counts, 1)
    cat_index = {c: i for i, c in enumerate(cats)}

    # an item's category is its most frequent one in the log
    seen: dict[str, Counter] = defaultdict(Counter)
    for x in log:
        if x.category_id is not None:
            seen[x.item_id][x.category_id] += 1
    item_category = np.full(len(items), OOV, dtype=np.int64)
    item_category[PAD] = PAD
    for i, it in enumerate(items[2:], start=2):
        if seen.get(it):
            best = sorted(seen[it].items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
            item_category[i] = cat_index[best]
    return Vocabulary(items, cats, users, item_category)


# --------------------------------------------------------------------------
# samples

@dataclass(frozen=True)
class BehaviorSample:
    user_index: int
    user_features: tuple
    long_seq: tuple
    short_seq: tuple
    candidate_item: int
    label: int


@dataclass
class SampleSet:
    """Column-oriented collection of behavior samples.

    Samples sharing a ``group`` id were cut at the same user event and share
    their sequences; only the candidate and label differ.
    """

    user: np.ndarray
    features: np.ndarray  # (N, F)
    long_seq: np.ndarray  # (N, l_L)
    short_seq: np.ndarray  # (N, l_S)
    candidate: np.ndarray
    label: np.ndarray
    group: np.ndarray
    timestamp: np.ndarray  # of the event the sample was cut at

    def __len__(self) -> int:
        return len(self.label)

    def __getitem__(self, i: int) -> BehaviorSample:
        return BehaviorSample(int(self.user[i]), tuple(int(v) for v in self.features[i]),
                              tuple(int(v) for v in self.long_seq[i]),
                              tuple(int(v) for v in self.short_seq[i]),
                              int(self.candidate[i]), int(self.label[i]))

    def take(self, idx) -> "SampleSet":
        idx = np.asarray(idx)
        return SampleSet(*(getattr(self, f)[idx] for f in _SAMPLE_FIELDS))

    @classmethod
    def empty(cls, l_long: int, l_short: int, n_features: int = 1) -> "SampleSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, np.zeros((0, n_features), np.int64), np.zeros((0, l_long), np.int64),
                   np.zeros((0, l_short), np.int64), z, z, z, z)

    @classmethod
    def from_samples(cls, samples: Sequence[BehaviorSample]) -> "SampleSet":
        """Build a set from individual samples; each becomes its own group."""
        n = len(samples)
        return cls(np.array([s.user_index for s in samples], dtype=np.int64),
                   np.array([s.user_features for s in samples], dtype=np.int64).reshape(n, -1),
                   np.array([s.long_seq for s in samples], dtype=np.int64).reshape(n, -1),
                   np.array([s.short_seq for s in samples], dtype=np.int64).reshape(n, -1),
                   np.array([s.candidate_item for s in samples], dtype=np.int64),
                   np.array([s.label for s in samples], dtype=np.int64),
                   np.arange(n, dtype=np.int64), np.zeros(n, dtype=np.int64))

    def positives(self) -> "SampleSet":
        return self.take(np.flatnonzero(self.label == 1))

    def concat(self, other: "SampleSet") -> "SampleSet":
        offset = self.group.max() + 1 if len(self) else 0
        parts = []
        for f in _SAMPLE_FIELDS:
            b = getattr(other, f)
            parts.append(np.concatenate([getattr(self, f), b + offset if f == "group" else b]))
        return SampleSet(*parts)


_SAMPLE_FIELDS = ("user", "features", "long_seq", "short_seq", "candidate", "label",
                  "group", "timestamp")


@dataclass
class DatasetSplit:
    train: SampleSet
    validation: SampleSet
    test: SampleSet
    mode: str = "leave-last-two"
    skipped_users: int = 0


def activity_bucket(n_prior_events: int) -> int:
    """Log2 bucket of how many events a user had before the sample."""
    return min(int(math.log2(1 + n_prior_events)), N_ACTIVITY_BUCKETS - 1)


def user_features(prior_items: Sequence[int], item_category: np.ndarray) -> tuple[int, int]:
    """``(activity bucket, most frequent category so far)`` from the prior events.

    Category ties go to the lower index; no prior events gives PAD.
    """
    prior = np.asarray(prior_items, dtype=np.int64)
    cats = item_category[prior[prior != PAD]]
    top = int(np.bincount(cats).argmax()) if len(cats) else PAD
    return activity_bucket(len(prior)), top


def _running_features(items: np.ndarray, item_category: np.ndarray) -> list[tuple[int, int]]:
    """``user_features(items[:t])`` for every t, in one pass."""
    counts: Counter = Counter()
    top, out = PAD, []
    for t, item in enumerate(items):
        out.append((activity_bucket(t), top))
        c = int(item_category[item])
        counts[c] += 1
        if top == PAD or counts[c] > counts[top] or (counts[c] == counts[top] and c < top):
            top = c
    return out


def _window(seq: np.ndarray, end: int, length: int) -> np.ndarray:
    """The ``length`` items before position ``end``, left-padded with PAD."""
    start = max(0, end - length)
    out = np.zeros(length, dtype=np.int64)
    chunk = seq[start:end]
    if len(chunk):
        out[length - len(chunk):] = chunk
    return out


def make_samples(log: Sequence[Interaction], vocab: Vocabulary, l_long: int, l_short: int,
                 neg_ratio: int = 4, rng_seed: int = 0,
                 max_train_per_user: Optional[int] = None,
                 popularity_negatives: bool = False) -> DatasetSplit:
    """Cut every user's history into labeled samples and split by time.

    A positive is emitted for each event with at least ``l_short`` earlier
    events: the short window is the ``l_short`` events right before it and
    the long window the ``l_long`` events before that (left padded).  Each
    positive gets ``neg_ratio`` negatives that reuse its windows and are
    drawn from items the user never interacted with.

    Per user the last positive goes to test, the one before to validation
    and the rest to train (optionally only the most recent
    ``max_train_per_user`` of them).  Users without a single positive are
    skipped and counted.
    """
    if not l_long >= l_short >= 1:
        raise ValueError(f"need l_long >= l_short >= 1, got {l_long}, {l_short}")
    rng = np.random.default_rng(rng_seed)
    real = vocab.real_items()
    if popularity_negatives:
        pop = Counter(vocab.item_index(x.item_id) for x in log)
        weights = np.array([pop.get(int(i), 0) for i in real], dtype=np.float64) + 1.0
    else:
        weights = None

    buckets: dict[str, list[list]] = {"train": [], "validation": [], "test": []}
    skipped = 0
    group = 0
    for user_id, events in group_by_user(log).items():
        items = np.array([vocab.item_index(e.item_id) for e in events], dtype=np.int64)
        stamps = [e.timestamp for e in events]
        positions = list(range(l_short, len(events)))
        if not positions:
            skipped += 1
            continue
        prior_feats = _running_features(items, vocab.item_category)
        history = set(items.tolist())
        pool = real[~np.isin(real, list(history))]
        if neg_ratio and len(pool) == 0:
            skipped += 1
            continue
        pool_p = None
        if weights is not None:
            pool_w = weights[~np.isin(real, list(history))]
            pool_p = pool_w / pool_w.sum()
        uidx = vocab.user_index(user_id)
        roles = ["train"] * len(positions)
        roles[-1] = "test"
        if len(positions) >= 2:
            roles[-2] = "validation"
        if max_train_per_user is not None:
            n_train = len(positions) - min(2, len(positions))
            for j in range(max(0, n_train - max_train_per_user)):
                roles[j] = None
        for t, role in zip(positions, roles):
            if role is None:
                continue
            short = _window(items, t, l_short)
            long = _window(items, t - l_short, l_long)
            feats = prior_feats[t]
            rows = buckets[role]
            rows.append((uidx, feats, long, short, int(items[t]), 1, group, stamps[t]))
            if neg_ratio:
                negs = rng.choice(pool, size=neg_ratio, replace=len(pool) < neg_ratio, p=pool_p)
                for neg in negs:
                    rows.append((uidx, feats, long, short, int(neg), 0, group, stamps[t]))
            group += 1

    if skipped:
        logger.info("skipped %d users with too few events", skipped)

    def build(rows):
        if not rows:
            return SampleSet.empty(l_long, l_short, N_USER_FEATURES)
        cols = list(zip(*rows))
        return SampleSet(np.array(cols[0], np.int64), np.array(cols[1], np.int64),
                         np.stack(cols[2]), np.stack(cols[3]), np.array(cols[4], np.int64),
                         np.array(cols[5], np.int64), np.array(cols[6], np.int64),
                         np.array(cols[7], np.int64))

    return DatasetSplit(build(buckets["train"]), build(buckets["validation"]),
                        build(buckets["test"]), "leave-last-two", skipped)


def user_histories(log: Sequence[Interaction], vocab: Vocabulary) -> dict[int, np.ndarray]:
    """User index -> time-ordered item indices."""
    return {vocab.user_index(u): np.array([vocab.item_index(e.item_id) for e in evs], np.int64)
            for u, evs in group_by_user(log).items()}


def sample_from_history(items: Sequence[int], l_long: int, l_short: int,
                        candidate: int = OOV, user_index: int = OOV,
                        item_category: Optional[np.ndarray] = None) -> BehaviorSample:
    """Request-time sample: the windows right after the last known event."""
    items = np.asarray(items, dtype=np.int64)
    end = len(items)
    feats = (activity_bucket(end), PAD) if item_category is None else \
        user_features(items, item_category)
    return BehaviorSample(user_index, feats,
                          tuple(_window(items, end - l_short, l_long).tolist()),
                          tuple(_window(items, end, l_short).tolist()), int(candidate), 0)


# --------------------------------------------------------------------------
# persisted samples
#
# Little-endian.  Header: b"HCNS", u32 version, u32 l_long, u32 l_short,
# u32 n_features, u32 record count.  Each record starts with a u32 byte count
# of what follows, then: u8 split (0 train, 1 validation, 2 test), u8 label,
# i64 user, i64 group, i64 timestamp, i64 candidate, n_features x i32,
# l_long x i32 long window, l_short x i32 short window.

SAMPLES_MAGIC = b"HCNS"
SAMPLES_VERSION = 1
_SPLITS = ("train", "validation", "test")


def _record_dtype(n_features: int, l_long: int, l_short: int) -> np.dtype:
    return np.dtype([("size", "<u4"), ("split", "u1"), ("label", "u1"), ("user", "<i8"),
                     ("group", "<i8"), ("timestamp", "<i8"), ("candidate", "<i8"),
                     ("features", "<i4", (n_features,)), ("long", "<i4", (l_long,)),
                     ("short", "<i4", (l_short,))])


def save_samples(split: DatasetSplit, path, sidecar: Optional[dict] = None) -> None:
    """Write all three parts to ``path`` and a JSON sidecar next to it (``.json``)."""
    parts = [getattr(split, name) for name in _SPLITS]
    l_long, l_short = parts[0].long_seq.shape[1], parts[0].short_seq.shape[1]
    n_feat = parts[0].features.shape[1]
    dt = _record_dtype(n_feat, l_long, l_short)
    recs = np.zeros(sum(len(x) for x in parts), dtype=dt)
    recs["size"] = dt.itemsize - 4
    lo = 0
    for code, part in enumerate(parts):
        sl = slice(lo, lo + len(part))
        recs["split"][sl] = code
        for field_name, col in (("label", part.label), ("user", part.user), ("group", part.group),
                                ("timestamp", part.timestamp), ("candidate", part.candidate),
                                ("features", part.features), ("long", part.long_seq),
                                ("short", part.short_seq)):
            recs[field_name][sl] = col
        lo += len(part)
    head = SAMPLES_MAGIC + np.array([SAMPLES_VERSION, l_long, l_short, n_feat, len(recs)],
                                    dtype="<u4").tobytes()
    path = Path(path)
    path.write_bytes(head + recs.tobytes())
    meta = {"mode": split.mode, "skipped_users": split.skipped_users,
            "counts": {name: len(part) for name, part in zip(_SPLITS, parts)},
            "l_long": l_long, "l_short": l_short, **(sidecar or {})}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_samples(path) -> tuple[DatasetSplit, dict]:
    """Inverse of :func:`save_samples`; returns the split and the sidecar dict."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != SAMPLES_MAGIC:
        raise ValueError(f"{path} is not an HCNS sample file (bad magic)")
    version, l_long, l_short, n_feat, count = np.frombuffer(blob, "<u4", 5, 4).tolist()
    if version != SAMPLES_VERSION:
        raise ValueError(f"unsupported sample file version {version}")
    dt = _record_dtype(n_feat, l_long, l_short)
    if len(blob) - 24 != count * dt.itemsize:
        raise ValueError(f"{path}: payload size does not match {count} records")
    recs = np.frombuffer(blob, dt, count, 24)
    if count and np.any(recs["size"] != dt.itemsize - 4):
        raise ValueError(f"{path}: inconsistent record length prefix")
    parts = []
    for code in range(3):
        r = recs[recs["split"] == code]
        parts.append(SampleSet(r["user"].astype(np.int64), r["features"].astype(np.int64),
                               r["long"].astype(np.int64), r["short"].astype(np.int64),
                               r["candidate"].astype(np.int64), r["label"].astype(np.int64),
                               r["group"].astype(np.int64), r["timestamp"].astype(np.int64)))
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return DatasetSplit(*parts, meta.get("mode", "leave-last-two"),
                        meta.get("skipped_users", 0)), meta


# --------------------------------------------------------------------------
# synthetic planted-interest data

@dataclass
class SyntheticTruth:
    item_cluster: dict  # item id -> cluster
    affinity: np.ndarray  # (n_users, k)
    current: np.ndarray  # (n_users, seq_len) current-interest cluster per event
    from_current: np.ndarray  # (n_users, seq_len) event drawn from current cluster


def synth_generate(n_users: int, n_items: int, k_interests: int, seq_len: int,
                   drift_prob: float = 0.2, rng_seed: int = 0, alpha: float = 0.5,
                   switch_prob: float = 0.1) -> tuple[list[Interaction], SyntheticTruth]:
    """Planted multi-interest log.

    Items ``i`` belong to cluster ``i // (n_items / k)``.  Each user draws a
    Dirichlet(``alpha``) affinity over clusters and a current cluster from
    it.  Every event, with probability ``1 - drift_prob`` the item comes from
    the current cluster, otherwise from a cluster drawn from the affinity;
    after each event the current cluster is redrawn with probability
    ``switch_prob`` (so it lives for a geometric number of events).
    """
    if k_interests < 2:
        raise ValueError("k_interests must be >= 2")
    if n_items % k_interests:
        raise ValueError("n_items must be divisible by k_interests")
    rng = np.random.default_rng(rng_seed)
    per = n_items // k_interests
    affinity = rng.dirichlet(np.full(k_interests, alpha), size=n_users)
    current = np.zeros((n_users, seq_len), dtype=np.int64)
    from_cur = np.zeros((n_users, seq_len), dtype=bool)
    log: list[Interaction] = []
    width = len(str(n_items - 1))
    for u in range(n_users):
        p = affinity[u]
        cur = rng.choice(k_interests, p=p)
        for t in range(seq_len):
            current[u, t] = cur
            if rng.random() >= drift_prob:
                cluster = cur
                from_cur[u, t] = True
            else:
                cluster = rng.choice(k_interests, p=p)
            item = cluster * per + int(rng.integers(per))
            log.append(Interaction(f"u{u}", f"i{item:0{width}d}", f"c{cluster}", t))
            if rng.random() < switch_prob:
                cur = rng.choice(k_interests, p=p)
    clusters = {f"i{i:0{width}d}": i // per for i in range(n_items)}
    return log, SyntheticTruth(clusters, affinity, current, from_cur)
