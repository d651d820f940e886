"""All-ranking leave-one-out evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import stats

from .data import MultiBehaviorGraph
from .errors import EvaluationError


def rank_all(user_emb, item_embs, exclude=()) -> np.ndarray:
    """Item indices by descending inner product; ties go to the lower index.

    Items in ``exclude`` are left out of the returned order.
    """
    scores = np.asarray(item_embs, dtype=np.float64) @ np.asarray(user_emb, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if len(exclude):
        order = order[~np.isin(order, np.asarray(list(exclude)))]
    return order


def hr_at_k(rank, k: int):
    """1 when the held-out item sits at 1-based position ``rank <= k``."""
    r = np.asarray(rank)
    out = (r <= k).astype(np.float64)
    return float(out) if out.ndim == 0 else out


def ndcg_at_k(rank, k: int):
    """``1 / log2(rank + 1)`` inside the cutoff, else 0 (one relevant item)."""
    r = np.asarray(rank, dtype=np.float64)
    if np.any(r < 1):
        raise ValueError("ranks are 1-based")
    out = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


@dataclass
class TTestResult:
    t: float
    p: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.t, self.p))


def paired_t_test(samples_a, samples_b) -> TTestResult:
    """Two-sided paired t-test on ``a - b``."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples need equal 1-D shapes, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise ValueError("paired t-test needs at least two pairs")
    diff = a - b
    mean = diff.mean()
    sd = diff.std(ddof=1)
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0)
        # constant nonzero shift: the statistic is unbounded
        return TTestResult(math.copysign(math.inf, mean), 0.0, degenerate=True)
    t = mean / (sd / math.sqrt(len(diff)))
    p = 2.0 * stats.t.sf(abs(t), df=len(diff) - 1)
    return TTestResult(float(t), float(p))


def target_ranks(user_emb, item_emb, train: MultiBehaviorGraph, pairs, chunk: int = 512) -> np.ndarray:
    """1-based rank of each held-out item among items the user never bought in training.

    Rank is one plus the number of unmasked items that score higher, or score
    the same with a lower index.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    u_emb = torch.as_tensor(np.asarray(user_emb)).double()
    i_emb = torch.as_tensor(np.asarray(item_emb)).double()
    adj = train.adjacency[train.target]
    n = i_emb.shape[0]
    ranks = np.empty(len(pairs), dtype=np.int64)
    idx = torch.arange(n)
    for start in range(0, len(pairs), chunk):
        block = pairs[start:start + chunk]
        users = torch.from_numpy(block[:, 0])
        items = torch.from_numpy(block[:, 1])
        s = u_emb[users] @ i_emb.T
        st = s[torch.arange(len(block)), items].unsqueeze(1)
        beats = (s > st) | ((s == st) & (idx.unsqueeze(0) < items.unsqueeze(1)))
        sub = adj[block[:, 0]]
        mask = torch.zeros(len(block), n, dtype=torch.bool)
        rows = np.repeat(np.arange(len(block)), np.diff(sub.indptr))
        mask[torch.from_numpy(rows), torch.from_numpy(sub.indices.astype(np.int64))] = True
        beats &= ~mask
        ranks[start:start + len(block)] = beats.sum(1).numpy() + 1
    return ranks


@dataclass
class MetricsReport:
    hr_at_k: float
    ndcg_at_k: float
    k: int
    per_seed: list = field(default_factory=list)     # (seed, hr, ndcg)
    per_user: np.ndarray | None = None               # ranks of the last evaluated run

    def records(self, variant: str = "full") -> list[dict]:
        return [{"seed": s, "hr": h, "ndcg": g, "k": self.k, "variant": variant}
                for s, h, g in self.per_seed]


def evaluate_embeddings(user_emb, item_emb, train: MultiBehaviorGraph, pairs, k: int = 10):
    """Mean HR@k and NDCG@k over held-out pairs; returns ``(hr, ndcg, ranks)``."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if not len(pairs):
        raise EvaluationError("no held-out pairs to evaluate")
    ranks = target_ranks(user_emb, item_emb, train, pairs)
    return float(hr_at_k(ranks, k).mean()), float(ndcg_at_k(ranks, k).mean()), ranks


def evaluate(embed_fn, split, k: int = 10, seeds=(0,)) -> MetricsReport:
    """Run ``embed_fn(seed) -> (user_emb, item_emb)`` per seed and aggregate.

    Each seed contributes one ``(hr, ndcg)`` sample for significance tests.
    """
    if not len(split.test_pairs):
        raise EvaluationError("test set is empty")
    per_seed, ranks = [], None
    for seed in seeds:
        u, i = embed_fn(seed)
        hr, ndcg, ranks = evaluate_embeddings(u, i, split.train, split.test_pairs, k)
        per_seed.append((seed, hr, ndcg))
    return MetricsReport(float(np.mean([p[1] for p in per_seed])), float(np.mean([p[2] for p in per_seed])),
                         k, per_seed, ranks)
