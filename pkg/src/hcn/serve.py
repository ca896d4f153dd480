"""Two-tower serving: offline item index, request-time user tower, top-k.

Item index file layout (little-endian)::

    b"HCNI"               magic
    u32 version           = 1
    u32 count             number of rows
    u32 dim               D
    32 bytes              SHA-256 of the model config
    count x (u32 len, UTF-8 item id)     row -> id table
    count x dim f32       item-tower outputs, row-major

Everything before the f32 block is the header.
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import BehaviorSample, Vocabulary
from .model import HCN, aggregate_scores_np
from .tensor import sigmoid

logger = logging.getLogger(__name__)

MAGIC = b"HCNI"
VERSION = 1


class IndexMismatchError(ValueError):
    pass


class ItemIndex:
    """Read-only matrix of precomputed item vectors plus the row -> id table."""

    def __init__(self, matrix: np.ndarray, item_ids: Sequence[str], config_hash: str,
                 vocab_index: Optional[np.ndarray] = None):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(item_ids):
            raise ValueError("matrix rows must match the id table")
        matrix.setflags(write=False)
        self._matrix = matrix
        self.item_ids = tuple(item_ids)
        self.config_hash = config_hash
        self.row_of = {item: i for i, item in enumerate(self.item_ids)}
        if vocab_index is None:
            vocab_index = np.arange(2, 2 + len(item_ids))
        self.vocab_index = np.asarray(vocab_index, dtype=np.int64)
        self.vocab_index.setflags(write=False)

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def dim(self) -> int:
        return self._matrix.shape[1]

    def __len__(self) -> int:
        return len(self.item_ids)

    def header_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<III", VERSION, len(self), self.dim),
                 bytes.fromhex(self.config_hash)]
        for item in self.item_ids:
            raw = item.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
        return b"".join(parts)

    def to_bytes(self) -> bytes:
        return self.header_bytes() + self._matrix.astype("<f4").tobytes()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes, expected_hash: Optional[str] = None) -> "ItemIndex":
        if blob[:4] != MAGIC:
            raise ValueError("not an HCNI item index (bad magic)")
        version, count, dim = struct.unpack_from("<III", blob, 4)
        if version != VERSION:
            raise ValueError(f"unsupported item index version {version}")
        config_hash = blob[16:48].hex()
        if expected_hash is not None and expected_hash != config_hash:
            raise IndexMismatchError(
                f"item index was built for config {config_hash}, model has {expected_hash}")
        pos = 48
        ids = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            ids.append(blob[pos + 4:pos + 4 + n].decode("utf-8"))
            pos += 4 + n
        if len(blob) - pos != 4 * count * dim:
            raise ValueError("item index payload has the wrong size")
        matrix = np.frombuffer(blob, dtype="<f4", count=count * dim, offset=pos)
        return cls(matrix.reshape(count, dim), ids, config_hash)

    @classmethod
    def load(cls, path, expected_hash: Optional[str] = None) -> "ItemIndex":
        return cls.from_bytes(Path(path).read_bytes(), expected_hash)


def export_items(model: HCN, vocab: Vocabulary, path=None) -> ItemIndex:
    """Run the item tower over every in-vocabulary item and (optionally) write the index."""
    if model.config.n_items != vocab.n_items:
        raise IndexMismatchError(
            f"model expects {model.config.n_items} items, vocabulary has {vocab.n_items}")
    rows = vocab.real_items()
    mat = model.item_matrix(rows).astype(np.float32)
    index = ItemIndex(mat, [vocab.item_id(i) for i in rows], model.config.hash(), rows)
    if path is not None:
        index.save(path)
    return index


@dataclass(frozen=True)
class ScoredCandidate:
    item_id: str
    score: float
    rank: int
    item_index: int = -1


@dataclass
class Ranking:
    items: list
    truncated: bool = False  # fewer than the requested k were available

    def __iter__(self):
        return iter(self.items)

    def __len__(self) -> int:
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


def _order(scores: np.ndarray, tie_key: np.ndarray) -> np.ndarray:
    return np.lexsort((tie_key, -scores))


def top_k_indices(scores: np.ndarray, k: int, tie_key: Optional[np.ndarray] = None) -> np.ndarray:
    """Positions of the ``k`` best scores, best first; ties go to the lower key.

    Uses a partial partition, then sorts only the selected block.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.asarray(scores, dtype=np.float64)
    m = len(scores)
    if tie_key is None:
        tie_key = np.arange(m)
    if k >= m:
        return _order(scores, tie_key)
    thr = np.partition(scores, m - k)[m - k]
    above = np.flatnonzero(scores > thr)
    tied = np.flatnonzero(scores == thr)
    need = k - len(above)
    tied = tied[np.argsort(tie_key[tied], kind="stable")[:need]]
    sel = np.concatenate([above, tied])
    return sel[_order(scores[sel], tie_key[sel])]


def top_k(scored: Sequence[ScoredCandidate], k: int) -> Ranking:
    """Best ``k`` candidates by descending score, ties by ascending item index."""
    if k < 1:
        raise ValueError("k must be >= 1")
    scores = np.array([c.score for c in scored], dtype=np.float64)
    keys = np.array([c.item_index for c in scored], dtype=np.int64)
    truncated = k > len(scored)
    if truncated:
        logger.warning("requested top-%d of only %d candidates", k, len(scored))
    if not len(scored):
        return Ranking([], truncated)
    pick = top_k_indices(scores, min(k, len(scored)), keys)
    return Ranking([ScoredCandidate(scored[i].item_id, scored[i].score, r + 1, scored[i].item_index)
                    for r, i in enumerate(pick)], truncated)


def user_vectors(model: HCN, sample: BehaviorSample) -> np.ndarray:
    """The request-time user forward: ``(n, D)``."""
    return model.user_vectors([sample])[0]


def score_candidates(sample: BehaviorSample, candidate_ids: Sequence[str], index: ItemIndex,
                     model: HCN, probability: bool = False):
    """Score candidates for one user against the precomputed index.

    Returns ``(ranked candidates, rejected ids)``.  Unknown ids are rejected;
    the rest are scored.  Scores are logits unless ``probability`` is set.
    """
    if index.config_hash != model.config.hash():
        raise IndexMismatchError(
            f"item index was built for config {index.config_hash}, "
            f"model has {model.config.hash()}")
    known = [c for c in candidate_ids if c in index.row_of]
    rejected = [c for c in candidate_ids if c not in index.row_of]
    if not known:
        return [], rejected
    rows = np.array([index.row_of[c] for c in known])
    u = user_vectors(model, sample)
    y = aggregate_scores_np(u, index.matrix[rows].astype(u.dtype))
    if probability:
        y = sigmoid(y)
    keys = index.vocab_index[rows]
    order = _order(y, keys)
    out = [ScoredCandidate(known[i], float(y[i]), r + 1, int(keys[i])) for r, i in enumerate(order)]
    return out, rejected


def case_study(sample: BehaviorSample, index: ItemIndex, model: HCN, per_center_k: int,
               cluster_of: Optional[dict] = None) -> list[list[tuple]]:
    """For each user-side vector, the items with the largest inner product.

    Each entry is ``(item_id, inner_product, cluster or None)``.
    """
    u = user_vectors(model, sample)
    out = []
    for center in u:
        if per_center_k <= 0:
            out.append([])
            continue
        sims = index.matrix.astype(u.dtype) @ center
        pick = top_k_indices(sims, per_center_k, index.vocab_index)
        out.append([(index.item_ids[i], float(sims[i]),
                     None if cluster_of is None else cluster_of.get(index.item_ids[i]))
                    for i in pick])
    return out


def format_case_study(lists: list[list[tuple]]) -> str:
    lines = []
    for c, items in enumerate(lists):
        lines.append(f"center {c}")
        for item, sim, cluster in items:
            extra = "" if cluster is None else f"\tcluster={cluster}"
            lines.append(f"  {item}\t{sim:.6f}{extra}")
    return "\n".join(lines) + "\n"


def bench(model: HCN, index: ItemIndex, sample: BehaviorSample, repeats: int = 5) -> dict:
    """Time one request: user forward plus scoring every indexed item."""
    ids = list(index.item_ids)
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        score_candidates(sample, ids, index, model)
        times.append(time.perf_counter() - t0)
    best = min(times)
    return {"candidates": len(ids), "n": model.config.n_eff, "D": model.config.D,
            "seconds": best, "candidates_per_second": len(ids) / best if best else float("inf")}
