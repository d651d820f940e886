"""Interaction logs, the multi-behavior graph, and leave-one-out splits."""
from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, FormatError, ParseError, SplitError
from .rng import numpy_stream

log = logging.getLogger(__name__)

GRAPH_MAGIC = b"NOVA0001"
MISSING_TS = -1


@dataclass(frozen=True)
class InteractionRecord:
    user: str
    item: str
    behavior: str
    timestamp: int | None = None


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class MultiBehaviorGraph:
    """Per-behavior binary user-item adjacency over a shared index space.

    ``timestamps[k]`` is aligned with ``adjacency[k].indices``; ``-1`` marks
    an interaction without a timestamp.
    """

    num_users: int
    num_items: int
    behaviors: tuple[str, ...]
    target: int
    adjacency: tuple[sp.csr_matrix, ...]
    timestamps: tuple[np.ndarray, ...]
    user_ids: tuple[str, ...] = ()
    item_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.behaviors:
            raise ConfigError("behavior set is empty")
        if not 0 <= self.target < len(self.behaviors):
            raise ConfigError(f"target index {self.target} outside 0..{len(self.behaviors) - 1}")
        if len(self.adjacency) != len(self.behaviors) or len(self.timestamps) != len(self.behaviors):
            raise ConfigError("one adjacency and one timestamp array per behavior required")

    @classmethod
    def from_edges(
        cls,
        num_users: int,
        num_items: int,
        behaviors: Sequence[str],
        target: int | str,
        edges: Sequence[Iterable],
        user_ids: Sequence[str] = (),
        item_ids: Sequence[str] = (),
    ) -> "MultiBehaviorGraph":
        """Build from ``edges[k]`` = iterable of ``(u, i)`` or ``(u, i, ts)``.

        Duplicates collapse to one edge keeping the latest timestamp.
        """
        behaviors = tuple(behaviors)
        if isinstance(target, str):
            if target not in behaviors:
                raise ConfigError(f"target behavior {target!r} not in {behaviors}")
            target = behaviors.index(target)
        adjs, tss = [], []
        for k in range(len(behaviors)):
            rows = list(edges[k]) if k < len(edges) else []
            if rows:
                arr = np.array([(r[0], r[1], r[2] if len(r) > 2 and r[2] is not None else MISSING_TS)
                                for r in rows], dtype=np.int64)
            else:
                arr = np.zeros((0, 3), dtype=np.int64)
            adj, ts = _csr_from_triples(arr[:, 0], arr[:, 1], arr[:, 2], num_users, num_items)
            adjs.append(adj)
            tss.append(ts)
        return cls(int(num_users), int(num_items), behaviors, int(target), tuple(adjs), tuple(tss),
                   tuple(user_ids), tuple(item_ids))

    @property
    def num_behaviors(self) -> int:
        return len(self.behaviors)

    @property
    def target_name(self) -> str:
        return self.behaviors[self.target]

    @property
    def aux_indices(self) -> list[int]:
        return [k for k in range(self.num_behaviors) if k != self.target]

    def user_degrees(self, k: int) -> np.ndarray:
        return np.diff(self.adjacency[k].indptr)

    def item_degrees(self, k: int) -> np.ndarray:
        return np.bincount(self.adjacency[k].indices, minlength=self.num_items)

    def edges(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Row-major ``(users, items)`` arrays of behavior ``k``."""
        a = self.adjacency[k]
        users = np.repeat(np.arange(self.num_users), np.diff(a.indptr))
        return users, a.indices.astype(np.int64)

    def num_edges(self, k: int) -> int:
        return int(self.adjacency[k].nnz)

    @property
    def total_interactions(self) -> int:
        return sum(a.nnz for a in self.adjacency)

    def has_edge(self, k: int, u: int, i: int) -> bool:
        a = self.adjacency[k]
        row = a.indices[a.indptr[u]:a.indptr[u + 1]]
        j = np.searchsorted(row, i)
        return bool(j < len(row) and row[j] == i)

    def triples(self) -> set[tuple[int, int, int]]:
        out = set()
        for k in range(self.num_behaviors):
            us, its = self.edges(k)
            out.update(zip(us.tolist(), its.tolist(), [k] * len(us)))
        return out

    def without_target_edges(self, pairs: Sequence[tuple[int, int]]) -> "MultiBehaviorGraph":
        """Copy with the given ``(u, i)`` pairs removed from the target behavior only."""
        drop = set(map(tuple, pairs))
        k = self.target
        us, its = self.edges(k)
        keep = np.array([(u, i) not in drop for u, i in zip(us.tolist(), its.tolist())], dtype=bool)
        ts = self.timestamps[k]
        adj, new_ts = _csr_from_triples(us[keep], its[keep], ts[keep], self.num_users, self.num_items)
        adjs = list(self.adjacency)
        tss = list(self.timestamps)
        adjs[k], tss[k] = adj, new_ts
        return MultiBehaviorGraph(self.num_users, self.num_items, self.behaviors, self.target,
                                  tuple(adjs), tuple(tss), self.user_ids, self.item_ids)


def _csr_from_triples(users, items, ts, m, n):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    ts = np.asarray(ts, dtype=np.int64)
    if len(users):
        if users.min() < 0 or users.max() >= m or items.min() < 0 or items.max() >= n:
            raise ConfigError("edge index outside the user/item universe")
    # sort by (u, i, ts) so the last of each run holds the latest timestamp
    order = np.lexsort((ts, items, users))
    users, items, ts = users[order], items[order], ts[order]
    if len(users):
        last = np.ones(len(users), dtype=bool)
        last[:-1] = (users[1:] != users[:-1]) | (items[1:] != items[:-1])
        users, items, ts = users[last], items[last], ts[last]
    indptr = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(np.bincount(users, minlength=m), out=indptr[1:])
    adj = sp.csr_matrix((np.ones(len(items), dtype=np.float64), items.astype(np.int32), indptr), shape=(m, n))
    for arr in (adj.data, adj.indices, adj.indptr):
        _freeze(arr)
    return adj, _freeze(ts.copy())


def parse_interactions(lines: Iterable[str], behavior_set: Sequence[str]) -> list[tuple[InteractionRecord, int]]:
    """Parse TSV lines into records paired with their 1-based line numbers."""
    allowed = set(behavior_set)
    out = []
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4) or not all(p.strip() for p in parts):
            raise ParseError(f"expected 3 or 4 non-empty tab-separated fields, got {len(parts)}", lineno)
        user, item, behavior = (p.strip() for p in parts[:3])
        if behavior not in allowed:
            raise ParseError(f"unknown behavior {behavior!r}", lineno)
        ts = None
        if len(parts) == 4:
            try:
                ts = int(parts[3])
            except ValueError:
                raise ParseError(f"timestamp {parts[3]!r} is not an integer", lineno) from None
            if ts < 0:
                raise ParseError(f"negative timestamp {ts}", lineno)
        out.append((InteractionRecord(user, item, behavior, ts), lineno))
    return out


def graph_from_records(records: Iterable[InteractionRecord], behavior_set: Sequence[str],
                       target: str) -> MultiBehaviorGraph:
    behaviors = tuple(behavior_set)
    if not behaviors:
        raise ConfigError("behavior set is empty")
    if len(set(behaviors)) != len(behaviors):
        raise ConfigError(f"duplicate behavior names in {behaviors}")
    if target not in behaviors:
        raise ConfigError(f"target behavior {target!r} not in {behaviors}")
    bidx = {b: k for k, b in enumerate(behaviors)}
    users: dict[str, int] = {}
    items: dict[str, int] = {}
    edges: list[list] = [[] for _ in behaviors]
    for rec in records:
        if rec.behavior not in bidx:
            raise ParseError(f"unknown behavior {rec.behavior!r}")
        u = users.setdefault(rec.user, len(users))
        i = items.setdefault(rec.item, len(items))
        edges[bidx[rec.behavior]].append((u, i, rec.timestamp))
    return MultiBehaviorGraph.from_edges(len(users), len(items), behaviors, target, edges,
                                         tuple(users), tuple(items))


def load_interactions(path, behavior_set: Sequence[str], target: str) -> MultiBehaviorGraph:
    """Read a ``user<TAB>item<TAB>behavior[<TAB>timestamp]`` log.

    Dense indices follow first appearance; duplicate ``(u, i, b)`` lines
    collapse to one edge.
    """
    if not behavior_set:
        raise ConfigError("behavior set is empty")
    if target not in behavior_set:
        raise ConfigError(f"target behavior {target!r} not in {tuple(behavior_set)}")
    with open(path, encoding="utf-8") as fh:
        parsed = parse_interactions(fh, behavior_set)
    graph = graph_from_records((r for r, _ in parsed), behavior_set, target)
    log.info("loaded %s: %d lines, %d users, %d items, %d distinct interactions",
             path, len(parsed), graph.num_users, graph.num_items, graph.total_interactions)
    return graph


def write_interactions(graph: MultiBehaviorGraph, path) -> None:
    """Write the graph back out in the TSV log format (row-major per behavior)."""
    uid = graph.user_ids or tuple(f"u{u}" for u in range(graph.num_users))
    iid = graph.item_ids or tuple(f"i{i}" for i in range(graph.num_items))
    with open(path, "w", encoding="utf-8") as fh:
        for k, name in enumerate(graph.behaviors):
            us, its = graph.edges(k)
            for u, i, t in zip(us.tolist(), its.tolist(), graph.timestamps[k].tolist()):
                if t == MISSING_TS:
                    fh.write(f"{uid[u]}\t{iid[i]}\t{name}\n")
                else:
                    fh.write(f"{uid[u]}\t{iid[i]}\t{name}\t{t}\n")


@dataclass(frozen=True, eq=False)
class LeaveOneOutSplit:
    train: MultiBehaviorGraph
    test_pairs: tuple[tuple[int, int], ...]
    excluded_users: tuple[int, ...]
    val_pairs: tuple[tuple[int, int], ...] = ()
    # test users left with no training interaction under any behavior
    cold_users: tuple[int, ...] = ()
    seed: int = 0


def _pick_latest(items: np.ndarray, ts: np.ndarray, rng: np.random.Generator) -> int:
    """Position of the latest timestamp; ties and missing values by uniform draw."""
    best = ts.max()
    cand = np.flatnonzero(ts == best)
    return int(cand[rng.integers(len(cand))]) if len(cand) > 1 else int(cand[0])


def split_leave_one_out(graph: MultiBehaviorGraph, seed: int, validation: bool = False) -> LeaveOneOutSplit:
    """Hold out each user's most recent target interaction.

    With ``validation=True`` a second target interaction is held out for
    early stopping, for users who keep at least one target training edge.
    """
    k = graph.target
    adj, ts = graph.adjacency[k], graph.timestamps[k]
    if adj.nnz == 0:
        raise SplitError(f"no {graph.target_name!r} interactions to hold out")
    rng = numpy_stream(seed, "split")
    test, val, excluded = [], [], []
    for u in range(graph.num_users):
        lo, hi = adj.indptr[u], adj.indptr[u + 1]
        if hi == lo:
            excluded.append(u)
            continue
        items = adj.indices[lo:hi]
        uts = ts[lo:hi]
        j = _pick_latest(items, uts, rng)
        test.append((u, int(items[j])))
        if validation and hi - lo >= 3:
            rest = np.delete(np.arange(hi - lo), j)
            j2 = rest[_pick_latest(items[rest], uts[rest], rng)]
            val.append((u, int(items[j2])))
    train = graph.without_target_edges(test + val)
    deg = sum(np.diff(a.indptr) for a in train.adjacency)
    cold = tuple(u for u, _ in test if deg[u] == 0)
    return LeaveOneOutSplit(train, tuple(test), tuple(excluded), tuple(val), cold, int(seed))


@dataclass
class GraphStats:
    num_users: int
    num_items: int
    total_interactions: int
    density: float
    per_behavior: dict = field(default_factory=dict)


_QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


def summarize(graph: MultiBehaviorGraph) -> GraphStats:
    m, n, kk = graph.num_users, graph.num_items, graph.num_behaviors
    cells = m * n
    per = {}
    for k, name in enumerate(graph.behaviors):
        nnz = graph.num_edges(k)
        udeg, ideg = graph.user_degrees(k), graph.item_degrees(k)
        per[name] = {
            "interactions": nnz,
            "density": nnz / cells if cells else 0.0,
            "user_degree_quantiles": [float(np.quantile(udeg, q)) if m else 0.0 for q in _QUANTILES],
            "item_degree_quantiles": [float(np.quantile(ideg, q)) if n else 0.0 for q in _QUANTILES],
        }
    total = graph.total_interactions
    return GraphStats(m, n, total, total / (cells * kk) if cells else 0.0, per)


# -- binary container -------------------------------------------------------

def graph_to_bytes(graph: MultiBehaviorGraph) -> bytes:
    header = json.dumps({
        "num_users": graph.num_users,
        "num_items": graph.num_items,
        "behaviors": list(graph.behaviors),
        "target": graph.target,
        "user_ids": list(graph.user_ids),
        "item_ids": list(graph.item_ids),
    }, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(GRAPH_MAGIC)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for adj, ts in zip(graph.adjacency, graph.timestamps):
        buf.write(struct.pack("<Q", adj.nnz))
        buf.write(np.asarray(adj.indptr, dtype="<u8").tobytes())
        buf.write(np.asarray(adj.indices, dtype="<u4").tobytes())
        buf.write(np.asarray(ts, dtype="<i8").tobytes())
    return buf.getvalue()


def graph_from_bytes(data: bytes) -> MultiBehaviorGraph:
    if data[:8] != GRAPH_MAGIC:
        raise FormatError("not a graph container (bad magic)")
    try:
        pos = 8
        (hlen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        m, n = int(header["num_users"]), int(header["num_items"])
        behaviors = tuple(header["behaviors"])
        adjs, tss = [], []
        for _ in behaviors:
            (nnz,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            indptr = np.frombuffer(data, dtype="<u8", count=m + 1, offset=pos).astype(np.int64)
            pos += 8 * (m + 1)
            indices = np.frombuffer(data, dtype="<u4", count=nnz, offset=pos).astype(np.int64)
            pos += 4 * nnz
            ts = np.frombuffer(data, dtype="<i8", count=nnz, offset=pos).astype(np.int64)
            pos += 8 * nnz
            if indptr[0] != 0 or indptr[-1] != nnz or np.any(np.diff(indptr) < 0):
                raise FormatError("inconsistent CSR row pointers")
            if nnz and indices.max() >= n:
                raise FormatError("column index outside item range")
            users = np.repeat(np.arange(m), np.diff(indptr))
            adj, t = _csr_from_triples(users, indices, ts, m, n)
            if adj.nnz != nnz:
                raise FormatError("duplicate edges in container")
            adjs.append(adj)
            tss.append(t)
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes")
        return MultiBehaviorGraph(m, n, behaviors, int(header["target"]), tuple(adjs), tuple(tss),
                                  tuple(header["user_ids"]), tuple(header["item_ids"]))
    except FormatError:
        raise
    except (struct.error, ValueError, KeyError, UnicodeDecodeError, ConfigError) as exc:
        raise FormatError(f"corrupt graph container: {exc}") from exc


def save_graph(graph: MultiBehaviorGraph, path) -> None:
    Path(path).write_bytes(graph_to_bytes(graph))


def load_graph(path) -> MultiBehaviorGraph:
    return graph_from_bytes(Path(path).read_bytes())


def split_manifest(split: LeaveOneOutSplit) -> str:
    lines = [f"# nova split v1 seed={split.seed}"]
    lines += [f"test\t{u}\t{i}" for u, i in split.test_pairs]
    lines += [f"val\t{u}\t{i}" for u, i in split.val_pairs]
    lines += [f"excluded\t{u}\t-" for u in split.excluded_users]
    lines += [f"cold\t{u}\t-" for u in split.cold_users]
    return "\n".join(lines) + "\n"


def save_split(split: LeaveOneOutSplit, graph_path, manifest_path) -> None:
    save_graph(split.train, graph_path)
    Path(manifest_path).write_text(split_manifest(split), encoding="utf-8")


def load_split(graph_path, manifest_path) -> LeaveOneOutSplit:
    train = load_graph(graph_path)
    test, val, excluded, cold = [], [], [], []
    seed = 0
    for lineno, line in enumerate(Path(manifest_path).read_text(encoding="utf-8").splitlines(), 1):
        if line.startswith("#"):
            if "seed=" in line:
                seed = int(line.rsplit("seed=", 1)[1])
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"split manifest line {lineno}: expected 3 fields")
        kind, u = parts[0], int(parts[1])
        if kind == "test":
            test.append((u, int(parts[2])))
        elif kind == "val":
            val.append((u, int(parts[2])))
        elif kind == "excluded":
            excluded.append(u)
        elif kind == "cold":
            cold.append(u)
        else:
            raise FormatError(f"split manifest line {lineno}: unknown record {kind!r}")
    return LeaveOneOutSplit(train, tuple(test), tuple(excluded), tuple(val), tuple(cold), seed)
