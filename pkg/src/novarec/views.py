"""View-specific subgraphs used by false negative discovery.

Each view is an edge list ``(users, items, behaviors)`` of indices into the
parent training graph; no adjacency is copied.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import MultiBehaviorGraph


@dataclass(frozen=True, eq=False)
class EdgeView:
    users: np.ndarray
    items: np.ndarray
    behaviors: np.ndarray

    def __len__(self) -> int:
        return len(self.users)

    def triples(self) -> set[tuple[int, int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist(), self.behaviors.tolist()))

    def pairs(self) -> np.ndarray:
        """Distinct ``(u, i)`` pairs, sorted, as an ``(n, 2)`` array."""
        if not len(self):
            return np.zeros((0, 2), dtype=np.int64)
        return np.unique(np.stack([self.users, self.items], axis=1), axis=0)


@dataclass(frozen=True, eq=False)
class ViewSubgraphs:
    graph: MultiBehaviorGraph
    positive_context: EdgeView   # all behaviors on pairs that carry a target edge
    aux_positive: EdgeView       # auxiliary edges of the positive context
    aux_unlabeled: EdgeView      # auxiliary edges on pairs with no target edge

    @property
    def num_users(self) -> int:
        return self.graph.num_users

    @property
    def num_items(self) -> int:
        return self.graph.num_items

    @property
    def num_behaviors(self) -> int:
        return self.graph.num_behaviors

    def target_pairs(self) -> np.ndarray:
        us, its = self.graph.edges(self.graph.target)
        return np.stack([us, its], axis=1) if len(us) else np.zeros((0, 2), dtype=np.int64)


def _view(users, items, behaviors) -> EdgeView:
    arrays = [np.ascontiguousarray(a, dtype=np.int64) for a in (users, items, behaviors)]
    for a in arrays:
        a.setflags(write=False)
    return EdgeView(*arrays)


def build_views(train: MultiBehaviorGraph) -> ViewSubgraphs:
    t = train.target
    # pair keys u*N+i are unique and sortable; membership by binary search
    n = max(train.num_items, 1)
    tu, ti = train.edges(t)
    target_keys = np.sort(tu * n + ti)

    pos = [(tu, ti, np.full(len(tu), t, dtype=np.int64))]
    aux_pos, aux_unl = [], []
    for k in train.aux_indices:
        us, its = train.edges(k)
        keys = us * n + its
        j = np.searchsorted(target_keys, keys)
        hit = np.zeros(len(keys), dtype=bool)
        ok = j < len(target_keys)
        hit[ok] = target_keys[j[ok]] == keys[ok]
        kk = np.full(len(us), k, dtype=np.int64)
        aux_pos.append((us[hit], its[hit], kk[hit]))
        aux_unl.append((us[~hit], its[~hit], kk[~hit]))
        pos.append((us[hit], its[hit], kk[hit]))

    def cat(parts):
        if not parts:
            return _view(np.zeros(0), np.zeros(0), np.zeros(0))
        return _view(*(np.concatenate([p[c] for p in parts]) for c in range(3)))

    return ViewSubgraphs(train, cat(pos), cat(aux_pos), cat(aux_unl))


def dump_views(views: ViewSubgraphs, out_dir) -> None:
    """Write each edge set as ``user<TAB>item<TAB>behavior`` for inspection."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = views.graph.behaviors
    for fname, view in (("positive_context.tsv", views.positive_context),
                        ("aux_positive.tsv", views.aux_positive),
                        ("aux_unlabeled.tsv", views.aux_unlabeled)):
        with open(out / fname, "w", encoding="utf-8") as fh:
            for u, i, b in zip(view.users.tolist(), view.items.tolist(), view.behaviors.tolist()):
                fh.write(f"{u}\t{i}\t{names[b]}\n")
