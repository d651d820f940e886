"""Attention transfer of auxiliary item features into the target space.

Every auxiliary behavior is propagated on its own graph with plain LightGCN.
At each layer the target item update receives ``sum_k (m_k - delta_k)`` where
``m_k`` is an attention-weighted, similarity-gated copy of the behavior-k item
state and ``delta_k`` a bias vector estimated from centroid gaps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import MultiBehaviorGraph
from .encoder import PropagationGraph, xavier_param
from .rng import torch_stream


class FusionParams(nn.Module):
    """Per-head query/key/value maps and one transfer vector per auxiliary behavior."""

    def __init__(self, num_aux, dim, heads, generator=None, dtype=torch.float32):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim={dim} is not divisible by heads={heads}")
        self.num_aux, self.dim, self.heads = num_aux, dim, heads
        width = dim // heads
        self.w_q = xavier_param(heads, width, dim, generator=generator, dtype=dtype)
        self.w_k = xavier_param(heads, width, dim, generator=generator, dtype=dtype)
        self.w_v = xavier_param(heads, width, dim, generator=generator, dtype=dtype)
        self.transfer = xavier_param(num_aux, dim, generator=generator, dtype=dtype)


def attention_weights(item_aux, item_target, params: FusionParams):
    """Head-wise attention of each auxiliary behavior onto the target behavior.

    ``item_aux`` is ``(K_aux, n, d)``, ``item_target`` is ``(n, d)``. Returns
    ``beta`` of shape ``(H, K_aux, n)`` (a softmax over the behavior axis) and
    ``alpha`` of shape ``(K_aux, n, d)``, the concatenation over heads of
    ``beta^h * W_V^h e^k``.
    """
    heads, width, _ = params.w_q.shape
    q = torch.einsum("hcd,knd->hknc", params.w_q, item_aux)
    key = torch.einsum("hcd,nd->hnc", params.w_k, item_target)
    logits = (q * key.unsqueeze(1)).sum(-1) / math.sqrt(width)
    beta = torch.softmax(logits, dim=1)
    v = torch.einsum("hcd,knd->hknc", params.w_v, item_aux)
    alpha = (beta.unsqueeze(-1) * v).permute(1, 2, 0, 3)
    return beta, alpha.reshape(item_aux.shape[0], item_aux.shape[1], heads * width)


def transfer(alpha, item_aux, item_target, w_transfer):
    """``alpha * sigmoid(<e^k, e^target> * w)`` with the inner product taken per item.

    Shapes broadcast: ``alpha``/``item_aux`` are ``(..., n, d)`` and
    ``w_transfer`` is ``(..., d)``.
    """
    s = (item_aux * item_target).sum(-1, keepdim=True)
    return alpha * torch.sigmoid(s * w_transfer.unsqueeze(-2))


def estimate_bias(item_emb, overlap_idx, nonoverlap_idx):
    """Centroid of the overlap items minus centroid of the non-overlap items.

    Either side empty gives a zero vector.
    """
    item_emb = torch.as_tensor(item_emb)
    if len(overlap_idx) == 0 or len(nonoverlap_idx) == 0:
        return torch.zeros(item_emb.shape[-1], dtype=item_emb.dtype)
    pos = item_emb[torch.as_tensor(overlap_idx)].mean(0)
    neg = item_emb[torch.as_tensor(nonoverlap_idx)].mean(0)
    return pos - neg


def _unit_rows(x):
    norm = x.norm(dim=-1, keepdim=True)
    # zero rows stay zero, so their cosine with anything is 0
    return x / torch.where(norm > 0, norm, torch.ones_like(norm))


def mean_max_similarity(rows, candidates, chunk=1024, self_candidates=None) -> float:
    """Mean over ``rows`` of the best cosine similarity against ``candidates``.

    ``self_candidates`` optionally gives one extra candidate per row (or NaN
    rows to skip), compared only with its own row.
    """
    rows = torch.as_tensor(rows)
    if len(rows) == 0:
        return 0.0
    a = _unit_rows(rows)
    best = torch.full((len(rows),), -math.inf, dtype=rows.dtype)
    if candidates is not None and len(candidates):
        b = _unit_rows(torch.as_tensor(candidates))
        for start in range(0, len(b), chunk):
            best = torch.maximum(best, (a @ b[start:start + chunk].T).max(dim=1).values)
    if self_candidates is not None:
        sc = torch.as_tensor(self_candidates)
        ok = ~torch.isnan(sc).any(dim=1)
        own = (a * _unit_rows(torch.nan_to_num(sc))).sum(-1)
        best = torch.where(ok, torch.maximum(best, own), best)
    # rows with no candidate at all are treated as dissimilar
    best = torch.where(torch.isinf(best), torch.zeros_like(best), best)
    return float(best.mean())


def semantic_gate(mean_max_sim: float, delta0):
    """Scale ``delta0`` by ``clamp(1 - mean_max_sim, 0, 1)``; returns ``(gate, delta)``."""
    g = min(1.0, max(0.0, 1.0 - float(mean_max_sim)))
    return g, g * torch.as_tensor(delta0)


def aggregate_target(neighbor_sum, transfer_term):
    """Target item update: the normalized user aggregation plus the purified transfer."""
    return neighbor_sum + transfer_term


def final_embeddings(layers):
    """Element-wise sum over the per-layer snapshots."""
    return torch.stack(list(layers)).sum(0)


class FusionGraph:
    """Target and per-auxiliary propagation graphs plus the item sets the bias needs."""

    def __init__(self, train: MultiBehaviorGraph, dtype=torch.float32):
        m, n = train.num_users, train.num_items
        self.num_users, self.num_items = m, n
        self.target_index = train.target
        self.aux_indices = tuple(train.aux_indices)
        tu, ti = train.edges(train.target)
        self.target = PropagationGraph(tu, ti, np.zeros(len(tu), dtype=np.int64), m, n, 1, dtype)
        target_items = np.zeros(n, dtype=bool)
        target_items[ti] = True
        self.target_items = np.flatnonzero(target_items)
        self.aux, self.aux_masks, self.overlap, self.nonoverlap, self.aux_items = [], [], [], [], []
        for k in self.aux_indices:
            us, its = train.edges(k)
            self.aux.append(PropagationGraph(us, its, np.zeros(len(us), dtype=np.int64), m, n, 1, dtype))
            mask = np.zeros(n, dtype=bool)
            mask[its] = True
            self.aux_items.append(np.flatnonzero(mask))
            self.overlap.append(np.flatnonzero(mask & target_items))
            self.nonoverlap.append(np.flatnonzero(mask & ~target_items))
            self.aux_masks.append(torch.from_numpy(mask).to(dtype).unsqueeze(-1))
        self.is_target_item = target_items

    @property
    def num_aux(self) -> int:
        return len(self.aux_indices)


@dataclass
class FusedState:
    user_layers: list
    item_layers: list
    biases: torch.Tensor | None = None      # (L, K_aux, d) actually applied
    gates: torch.Tensor | None = None       # (L, K_aux) when estimated in this pass

    def final(self) -> tuple[torch.Tensor, torch.Tensor]:
        return final_embeddings(self.user_layers), final_embeddings(self.item_layers)


class BiasEstimator:
    """Computes ``delta`` for each layer from the states of the current pass."""

    def __init__(self, graph: FusionGraph, cap: int, rng: np.random.Generator):
        self.graph, self.cap, self.rng = graph, cap, rng

    def _sample(self, idx):
        if self.cap and len(idx) > self.cap:
            return np.sort(self.rng.choice(idx, size=self.cap, replace=False))
        return idx

    def __call__(self, k_pos: int, item_aux, item_target):
        g = self.graph
        delta0 = estimate_bias(item_aux, g.overlap[k_pos], g.nonoverlap[k_pos])
        rows = self._sample(g.aux_items[k_pos])
        cols = self._sample(g.target_items)
        # an auxiliary item that is also a target item may match itself
        own = item_target[torch.from_numpy(rows)].clone()
        own[torch.from_numpy(~g.is_target_item[rows])] = math.nan
        sim = mean_max_similarity(item_aux[torch.from_numpy(rows)], item_target[torch.from_numpy(cols)],
                                  self_candidates=own)
        return semantic_gate(sim, delta0)


class NovaModel(nn.Module):
    """Shared base embeddings, attention transfer parameters and the bias buffer.

    ``fusion=False`` drops the transfer term entirely, which turns the forward
    pass into LightGCN on the target graph (and into matrix factorization at
    ``num_layers=0``).
    """

    def __init__(self, num_users, num_items, num_aux, dim, num_layers, heads, seed=0,
                 fusion=True, dtype=torch.float32):
        super().__init__()
        g = torch_stream(seed, "init/model")
        self.num_layers, self.dim, self.heads = num_layers, dim, heads
        self.user_emb = xavier_param(num_users, dim, generator=g, dtype=dtype)
        self.item_emb = xavier_param(num_items, dim, generator=g, dtype=dtype)
        self.use_fusion = bool(fusion and num_aux)
        self.fusion = FusionParams(num_aux, dim, heads, generator=g, dtype=dtype) if self.use_fusion else None
        self.register_buffer("bias", torch.zeros(num_layers, max(num_aux, 0), dim, dtype=dtype))

    def forward(self, graph: FusionGraph, bias=None, estimator: BiasEstimator | None = None) -> FusedState:
        """Fused propagation.

        ``bias`` overrides the stored buffer; an ``estimator`` recomputes it
        layer by layer from this pass (used once per epoch, without grad).
        """
        bias = self.bias if bias is None else bias
        us, its = [self.user_emb], [self.item_emb]
        aux_u = [self.user_emb] * graph.num_aux
        aux_i = [self.item_emb] * graph.num_aux
        used, gates = [], []
        for layer in range(self.num_layers):
            nu, ni = graph.target.step(us[-1], its[-1])
            if self.use_fusion:
                stack = torch.stack(aux_i)
                _, alpha = attention_weights(stack, its[-1], self.fusion)
                m = transfer(alpha, stack, its[-1], self.fusion.transfer)
                if estimator is not None:
                    pairs = [estimator(k, aux_i[k], its[-1]) for k in range(graph.num_aux)]
                    gates.append(torch.tensor([p[0] for p in pairs], dtype=stack.dtype))
                    delta = torch.stack([p[1] for p in pairs]).to(stack.dtype)
                else:
                    delta = bias[layer]
                used.append(delta)
                masks = torch.stack(graph.aux_masks)
                t = (masks * (m - delta.unsqueeze(1))).sum(0)
                ni = aggregate_target(ni, t)
                for k, ag in enumerate(graph.aux):
                    aux_u[k], aux_i[k] = ag.step(aux_u[k], aux_i[k])
            us.append(nu)
            its.append(ni)
        st = FusedState(us, its)
        if used:
            st.biases = torch.stack(used)
        if gates:
            st.gates = torch.stack(gates)
        return st

    @torch.no_grad()
    def refresh_bias(self, graph: FusionGraph, estimator: BiasEstimator) -> torch.Tensor | None:
        """Re-estimate the per-layer bias from the current parameters."""
        if not self.use_fusion or self.num_layers == 0:
            return None
        st = self.forward(graph, estimator=estimator)
        self.bias.copy_(st.biases)
        return st.gates

    def scores(self, graph: FusionGraph, users, items) -> torch.Tensor:
        u, i = self.forward(graph).final()
        return (u[users] * i[items]).sum(-1)
