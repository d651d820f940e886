"""Behavior-aware LightGCN propagation and the embedding dump format."""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import FormatError

EMB_MAGIC = b"NOVAEMB1"
DENSE_ORACLE_MAX_NODES = 64


def xavier_param(*shape, generator=None, dtype=torch.float32) -> nn.Parameter:
    t = torch.empty(*shape, dtype=dtype)
    fan_in, fan_out = (shape[-1], shape[-2]) if len(shape) >= 2 else (shape[0], shape[0])
    bound = (6.0 / (fan_in + fan_out)) ** 0.5
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return nn.Parameter(t)


class MLP2(nn.Module):
    """Two affine maps with a ReLU in between."""

    def __init__(self, n_in, n_hidden, n_out, generator=None, dtype=torch.float32):
        super().__init__()
        self.w1 = xavier_param(n_hidden, n_in, generator=generator, dtype=dtype)
        self.b1 = nn.Parameter(torch.zeros(n_hidden, dtype=dtype))
        self.w2 = xavier_param(n_out, n_hidden, generator=generator, dtype=dtype)
        self.b2 = nn.Parameter(torch.zeros(n_out, dtype=dtype))

    def forward(self, x):
        return torch.relu(x @ self.w1.T + self.b1) @ self.w2.T + self.b2


class AlignmentNet(MLP2):
    """Maps the concatenated behavior embeddings to one weight vector per behavior."""

    def __init__(self, num_behaviors, dim, generator=None, dtype=torch.float32):
        super().__init__(num_behaviors * dim, 2 * dim, num_behaviors * dim, generator, dtype)
        self.num_behaviors = num_behaviors
        self.dim = dim


def behavior_weights(net: AlignmentNet, behavior_emb: torch.Tensor) -> torch.Tensor:
    """Return a ``(K, d)`` tensor whose row ``k`` modulates edges of behavior ``k``."""
    k, d = behavior_emb.shape
    if k != net.num_behaviors or d != net.dim:
        raise ValueError(f"behavior embeddings {tuple(behavior_emb.shape)} do not fit a "
                         f"net built for K={net.num_behaviors}, d={net.dim}")
    return net(behavior_emb.reshape(1, k * d)).reshape(k, d)


@dataclass
class EmbeddingState:
    user_layers: list
    item_layers: list
    behavior_emb: torch.Tensor | None = None

    @property
    def num_layers(self) -> int:
        return len(self.user_layers) - 1

    @property
    def user_emb(self) -> torch.Tensor:
        return torch.stack(self.user_layers).mean(0)

    @property
    def item_emb(self) -> torch.Tensor:
        return torch.stack(self.item_layers).mean(0)

    def summed(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.stack(self.user_layers).sum(0), torch.stack(self.item_layers).sum(0)


def _csr_pair(idx, val, rows, cols):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # CSR support is flagged beta
        a = torch.sparse_coo_tensor(idx, val, (rows, cols), check_invariants=False).coalesce()
        return a.to_sparse_csr(), a.t().coalesce().to_sparse_csr()


class PropagationGraph:
    """Symmetrically normalized bipartite adjacency, one sparse block per behavior.

    Degrees count every edge of the subgraph, so a pair linked under two
    behaviors contributes twice.
    """

    def __init__(self, users, items, behaviors, num_users, num_items, num_behaviors,
                 dtype=torch.float32):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        behaviors = np.asarray(behaviors, dtype=np.int64)
        self.num_users, self.num_items, self.num_behaviors = num_users, num_items, num_behaviors
        self.num_edges = len(users)
        self.user_deg = np.bincount(users, minlength=num_users)
        self.item_deg = np.bincount(items, minlength=num_items)
        if len(users):
            assert self.user_deg[users].min() > 0 and self.item_deg[items].min() > 0
        norm = 1.0 / np.sqrt(self.user_deg[users].astype(np.float64) * self.item_deg[items])
        self.blocks = []
        for k in range(num_behaviors):
            sel = behaviors == k
            if not sel.any():
                continue
            idx = torch.from_numpy(np.stack([users[sel], items[sel]]))
            val = torch.from_numpy(norm[sel]).to(dtype)
            self.blocks.append((k,) + _csr_pair(idx, val, num_users, num_items))

    @classmethod
    def from_view(cls, view, num_users, num_items, num_behaviors, dtype=torch.float32):
        return cls(view.users, view.items, view.behaviors, num_users, num_items, num_behaviors, dtype)

    def step(self, user_x, item_x, weights=None):
        """One propagation layer; ``weights`` is ``(K, d)`` or ``None`` for all-ones."""
        new_u = torch.zeros_like(user_x)
        new_i = torch.zeros_like(item_x)
        for k, a, at in self.blocks:
            if weights is None:
                new_u = new_u + a @ item_x
                new_i = new_i + at @ user_x
            else:
                new_u = new_u + a @ (item_x * weights[k])
                new_i = new_i + at @ (user_x * weights[k])
        return new_u, new_i


def propagate(graph: PropagationGraph, user_init, item_init, weights, num_layers: int) -> EmbeddingState:
    """Run ``num_layers`` rounds of weighted neighborhood aggregation.

    Each round sums ``w_b * e_neighbor / sqrt(|N_u| |N_i|)`` over incident
    edges; ``user_emb``/``item_emb`` of the result average layers 0..L.
    """
    if num_layers < 0:
        raise ValueError("num_layers must be >= 0")
    us, its = [user_init], [item_init]
    for _ in range(num_layers):
        u, i = graph.step(us[-1], its[-1], weights)
        us.append(u)
        its.append(i)
    return EmbeddingState(us, its)


def propagate_dense_oracle(users, items, behaviors, num_users, num_items, user_init, item_init,
                           weights, num_layers) -> tuple[list, list]:
    """Reference propagation with an explicit dense normalized adjacency.

    Works in float64 numpy; refuses graphs with more than 64 nodes.
    """
    n_nodes = num_users + num_items
    if n_nodes > DENSE_ORACLE_MAX_NODES:
        raise ValueError(f"dense oracle limited to {DENSE_ORACLE_MAX_NODES} nodes, got {n_nodes}")
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    behaviors = np.asarray(behaviors, dtype=np.int64)
    w = np.asarray(weights, dtype=np.float64)
    n_beh = w.shape[0]
    adj = np.zeros((n_beh, n_nodes, n_nodes))
    for u, i, b in zip(users, items, behaviors):
        adj[b, u, num_users + i] += 1.0
        adj[b, num_users + i, u] += 1.0
    deg = adj.sum(axis=(0, 2))
    inv = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    norm = inv[None, :, None] * adj * inv[None, None, :]
    x = np.concatenate([np.asarray(user_init, dtype=np.float64), np.asarray(item_init, dtype=np.float64)])
    layers = [x]
    for _ in range(num_layers):
        x = sum(norm[b] @ (layers[-1] * w[b]) for b in range(n_beh))
        layers.append(x)
    return [x[:num_users] for x in layers], [x[num_users:] for x in layers]


def write_embeddings(path, user_emb, item_emb) -> None:
    u = np.ascontiguousarray(np.asarray(user_emb, dtype="<f4"))
    i = np.ascontiguousarray(np.asarray(item_emb, dtype="<f4"))
    if u.ndim != 2 or i.ndim != 2 or u.shape[1] != i.shape[1]:
        raise ValueError("user and item embeddings must be 2-D with equal width")
    with open(path, "wb") as fh:
        fh.write(EMB_MAGIC)
        fh.write(struct.pack("<III", u.shape[0], i.shape[0], u.shape[1]))
        fh.write(u.tobytes())
        fh.write(i.tobytes())


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != EMB_MAGIC or len(data) < 20:
        raise FormatError("not an embedding dump (bad magic)")
    m, n, d = struct.unpack_from("<III", data, 8)
    expect = 20 + 4 * d * (m + n)
    if len(data) != expect:
        raise FormatError(f"embedding dump size {len(data)} != expected {expect}")
    arr = np.frombuffer(data, dtype="<f4", offset=20)
    return arr[:m * d].reshape(m, d).copy(), arr[m * d:].reshape(n, d).copy()
