"""Adversarial view alignment, propensity scoring and latent positive discovery."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoder import AlignmentNet, EmbeddingState, MLP2, PropagationGraph, behavior_weights, propagate, xavier_param
from .errors import AlignmentError
from .rng import numpy_stream, torch_stream
from .views import ViewSubgraphs

log = logging.getLogger(__name__)


class Discriminator(MLP2):
    """``in -> hidden -> 1`` ReLU network with a logistic output."""

    def __init__(self, n_in, n_hidden, generator=None, dtype=torch.float32):
        super().__init__(n_in, n_hidden, 1, generator, dtype)

    def logits(self, x):
        return super().forward(x).squeeze(-1)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


class PropensityScorer(Discriminator):
    """Scores ``e_u || e_i`` with the probability of target conversion."""


def _check_open_unit(name, x):
    x = torch.as_tensor(x)
    if x.numel() and not bool(((x > 0) & (x < 1)).all()):
        raise ValueError(f"{name} must lie strictly inside (0, 1)")
    return x


def adv_loss(d_target, d_aux) -> torch.Tensor:
    """``mean log D(e+) + mean log(1 - D(e+_aux))``; the discriminator ascends this."""
    d_target = _check_open_unit("d_target", d_target)
    d_aux = _check_open_unit("d_aux", d_aux)
    return torch.log(d_target).mean() + torch.log1p(-d_aux).mean()


def adv_loss_from_logits(logit_target, logit_aux) -> torch.Tensor:
    # log(1 - sigmoid(x)) == logsigmoid(-x)
    return F.logsigmoid(logit_target).mean() + F.logsigmoid(-logit_aux).mean()


def score_loss(pos_scores, neg_scores) -> torch.Tensor:
    """Summed cross-entropy: auxiliary positives toward 1, unlabeled pairs toward 0."""
    pos = _check_open_unit("pos_scores", pos_scores)
    neg = _check_open_unit("neg_scores", neg_scores)
    return -torch.log(pos).sum() - torch.log1p(-neg).sum()


def score_loss_from_logits(logit_pos, logit_neg) -> torch.Tensor:
    return -F.logsigmoid(logit_pos).sum() - F.logsigmoid(-logit_neg).sum()


def propensity(scorer: PropensityScorer, user_emb, item_emb) -> torch.Tensor:
    y = scorer(torch.cat([user_emb, item_emb], dim=-1))
    # keep the logistic range open even where the float saturates
    eps = torch.finfo(y.dtype).eps
    return y.clamp(eps, 1 - eps)


@dataclass
class LatentPositiveSet:
    pairs: np.ndarray          # (n, 2) int64, distinct (user, item)
    scores: np.ndarray         # (n,) float64
    mu: float

    def __len__(self) -> int:
        return len(self.pairs)

    def as_set(self) -> set[tuple[int, int]]:
        return set(map(tuple, self.pairs.tolist()))

    def sorted(self) -> "LatentPositiveSet":
        """Score descending, then (user, item) ascending."""
        if not len(self):
            return self
        order = np.lexsort((self.pairs[:, 1], self.pairs[:, 0], -self.scores))
        return LatentPositiveSet(self.pairs[order], self.scores[order], self.mu)

    def write_tsv(self, path, user_ids=None, item_ids=None) -> None:
        s = self.sorted()
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("user\titem\tscore\n")
            for (u, i), y in zip(s.pairs.tolist(), s.scores.tolist()):
                uu = user_ids[u] if user_ids else u
                ii = item_ids[i] if item_ids else i
                fh.write(f"{uu}\t{ii}\t{y:.6f}\n")


def read_latent_tsv(path, user_index=None, item_index=None, mu=float("nan")) -> LatentPositiveSet:
    pairs, scores = [], []
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        if not line.strip():
            continue
        u, i, y = line.split("\t")
        pairs.append((user_index[u] if user_index else int(u), item_index[i] if item_index else int(i)))
        scores.append(float(y))
    arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    return LatentPositiveSet(arr, np.array(scores, dtype=np.float64), mu)


class AlignmentModel(nn.Module):
    """Encoder, alignment network, discriminator and propensity scorer.

    Parameters are independent of the recommendation model.
    """

    def __init__(self, num_users, num_items, num_behaviors, dim, num_layers, seed=0,
                 dtype=torch.float32):
        super().__init__()
        g = torch_stream(seed, "init/alignment")
        self.num_layers = num_layers
        self.user_emb = xavier_param(num_users, dim, generator=g, dtype=dtype)
        self.item_emb = xavier_param(num_items, dim, generator=g, dtype=dtype)
        self.behavior_emb = xavier_param(num_behaviors, dim, generator=g, dtype=dtype)
        self.align_net = AlignmentNet(num_behaviors, dim, generator=g, dtype=dtype)
        self.discriminator = Discriminator(2 * dim, dim, generator=g, dtype=dtype)
        self.scorer = PropensityScorer(2 * dim, dim, generator=g, dtype=dtype)

    def generator_parameters(self):
        for name, p in self.named_parameters():
            if not name.startswith("discriminator."):
                yield p

    def weights(self) -> torch.Tensor:
        return behavior_weights(self.align_net, self.behavior_emb)

    def encode(self, graph: PropagationGraph, weights=None) -> EmbeddingState:
        w = self.weights() if weights is None else weights
        st = propagate(graph, self.user_emb, self.item_emb, w, self.num_layers)
        st.behavior_emb = self.behavior_emb
        return st


class AlignmentGraphs:
    """Propagation structures and pair lists for the three views."""

    def __init__(self, views: ViewSubgraphs, dtype=torch.float32):
        m, n, k = views.num_users, views.num_items, views.num_behaviors
        self.views = views
        self.positive = PropagationGraph.from_view(views.positive_context, m, n, k, dtype)
        self.aux_positive = PropagationGraph.from_view(views.aux_positive, m, n, k, dtype)
        self.aux_unlabeled = PropagationGraph.from_view(views.aux_unlabeled, m, n, k, dtype)
        self.target_pairs = torch.from_numpy(views.target_pairs())
        self.aux_pos_pairs = torch.from_numpy(views.aux_positive.pairs())
        self.aux_unl_pairs = torch.from_numpy(views.aux_unlabeled.pairs())


def _pair_features(state: EmbeddingState, pairs: torch.Tensor) -> torch.Tensor:
    return torch.cat([state.user_emb[pairs[:, 0]], state.item_emb[pairs[:, 1]]], dim=-1)


@dataclass
class AlignBatch:
    target: torch.Tensor
    aux_pos: torch.Tensor
    aux_unl: torch.Tensor


def alignment_losses(model: AlignmentModel, graphs: AlignmentGraphs, batch: AlignBatch):
    """Forward pass of one alignment step.

    Returns ``(l_adv, l_score, gen_adv, logits)`` where ``gen_adv`` is the
    non-saturating surrogate ``-mean log D(e+_aux)`` and ``logits`` holds the
    discriminator inputs for a separate ascent step.
    """
    w = model.weights()
    st_pos = model.encode(graphs.positive, w)
    st_aux = model.encode(graphs.aux_positive, w)
    x_t = _pair_features(st_pos, batch.target)
    x_a = _pair_features(st_aux, batch.aux_pos)
    d_t = model.discriminator.logits(x_t)
    d_a = model.discriminator.logits(x_a)
    l_adv = adv_loss_from_logits(d_t, d_a)
    gen_adv = -F.logsigmoid(d_a).mean() if len(d_a) else d_a.sum()
    y_pos = model.scorer.logits(x_a)
    if len(batch.aux_unl):
        st_unl = model.encode(graphs.aux_unlabeled, w)
        y_neg = model.scorer.logits(_pair_features(st_unl, batch.aux_unl))
    else:
        y_neg = y_pos[:0]
    l_score = score_loss_from_logits(y_pos, y_neg)
    return l_adv, l_score, gen_adv, (x_t, x_a)


class AlignmentSampler:
    """Mini-batches of target pairs, auxiliary positive pairs and unlabeled pairs.

    Score-loss pairs are drawn from the union of auxiliary positive and
    unlabeled pairs, so each class enters the summed loss in proportion to
    its size.
    """

    def __init__(self, graphs: AlignmentGraphs, batch_size: int, rng: np.random.Generator):
        self.graphs = graphs
        self.batch_size = batch_size
        self.rng = rng
        self.n_pos = len(graphs.aux_pos_pairs)
        self.n_unl = len(graphs.aux_unl_pairs)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, math.ceil((self.n_pos + self.n_unl) / self.batch_size))

    def draw(self) -> AlignBatch:
        g, b, rng = self.graphs, self.batch_size, self.rng
        t_idx = rng.integers(len(g.target_pairs), size=min(b, len(g.target_pairs)))
        union = self.n_pos + self.n_unl
        pick = rng.choice(union, size=min(b, union), replace=False) if union else np.zeros(0, dtype=np.int64)
        pos_idx = pick[pick < self.n_pos]
        unl_idx = pick[pick >= self.n_pos] - self.n_pos
        aux_pos = g.aux_pos_pairs[torch.from_numpy(np.sort(pos_idx))]
        # the discriminator always needs auxiliary samples, even when the draw had none
        if not len(aux_pos) and self.n_pos:
            aux_pos = g.aux_pos_pairs[torch.from_numpy(rng.integers(self.n_pos, size=1))]
        return AlignBatch(g.target_pairs[torch.from_numpy(t_idx)], aux_pos,
                          g.aux_unl_pairs[torch.from_numpy(np.sort(unl_idx))])


def l2_norm(params) -> torch.Tensor:
    return sum((p * p).sum() for p in params)


@dataclass
class AlignmentResult:
    model: AlignmentModel
    history: list = field(default_factory=list)
    graphs: AlignmentGraphs | None = None

    def unlabeled_state(self) -> EmbeddingState:
        with torch.no_grad():
            return self.model.encode(self.graphs.aux_unlabeled)


class AlignmentTrainer:
    """Alternating optimizer: one discriminator ascent step, then one step on
    encoder, alignment network and scorer."""

    def __init__(self, model: AlignmentModel, graphs: AlignmentGraphs, lr: float, l2: float,
                 batch_size: int, rng: np.random.Generator, scale: float = 1.0):
        self.model, self.graphs, self.l2, self.scale = model, graphs, l2, scale
        self.sampler = AlignmentSampler(graphs, batch_size, rng)
        self.opt_d = torch.optim.Adam(model.discriminator.parameters(), lr=lr)
        self.opt_g = torch.optim.Adam(list(model.generator_parameters()), lr=lr)

    def step(self) -> dict:
        model = self.model
        batch = self.sampler.draw()
        l_adv, l_score, gen_adv, (x_t, x_a) = alignment_losses(model, self.graphs, batch)

        # discriminator ascent on detached features
        disc = model.discriminator
        d_obj = -adv_loss_from_logits(disc.logits(x_t.detach()), disc.logits(x_a.detach()))
        self.opt_d.zero_grad()
        (self.scale * (d_obj + self.l2 * l2_norm(disc.parameters()))).backward()
        self.opt_d.step()

        # generator side sees the updated discriminator
        gen_adv = -F.logsigmoid(disc.logits(x_a)).mean()
        gen_params = list(model.generator_parameters())
        g_obj = l_score + gen_adv + self.l2 * l2_norm(gen_params)
        self.opt_g.zero_grad()
        (self.scale * g_obj).backward()
        disc.zero_grad(set_to_none=True)
        self.opt_g.step()
        l_adv, l_score = l_adv.item(), l_score.item()
        return {"l_adv": l_adv, "l_score": l_score, "l_align": l_adv + l_score}


def train_alignment(views: ViewSubgraphs, cfg, seed: int = 0, dtype=torch.float32) -> AlignmentResult:
    """Fit the alignment phase on the training views.

    Runs up to ``cfg.align_epochs`` epochs and stops once the epoch-mean
    alignment loss fails to improve for ``cfg.patience`` epochs.
    """
    if len(views.positive_context) == 0:
        raise AlignmentError("positive context view is empty; nothing to align")
    graphs = AlignmentGraphs(views, dtype)
    model = AlignmentModel(views.num_users, views.num_items, views.num_behaviors, cfg.dim,
                           cfg.layers, seed=seed, dtype=dtype)
    result = AlignmentResult(model, [], graphs)
    if cfg.align_epochs <= 0 or len(graphs.aux_pos_pairs) == 0:
        return result
    trainer = AlignmentTrainer(model, graphs, cfg.align_lr, cfg.l2, cfg.align_batch_size,
                               numpy_stream(seed, "align/batches"))
    best, stale = math.inf, 0
    for epoch in range(cfg.align_epochs):
        recs = [trainer.step() for _ in range(trainer.sampler.steps_per_epoch)]
        mean_align = float(np.mean([r["l_align"] for r in recs]))
        rec = {"epoch": epoch, "l_adv": float(np.mean([r["l_adv"] for r in recs])),
               "l_score": float(np.mean([r["l_score"] for r in recs])), "l_align": mean_align}
        result.history.append(rec)
        log.debug("align epoch %d: %s", epoch, rec)
        if not math.isfinite(mean_align):
            raise AlignmentError(f"alignment loss became non-finite at epoch {epoch}")
        if mean_align < best - 1e-6:
            best, stale = mean_align, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return result


def score_unlabeled(result: AlignmentResult) -> tuple[np.ndarray, np.ndarray]:
    """Propensity of every distinct unlabeled auxiliary pair."""
    pairs = result.graphs.aux_unl_pairs
    if not len(pairs):
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    st = result.unlabeled_state()
    with torch.no_grad():
        y = propensity(result.model.scorer, st.user_emb[pairs[:, 0]], st.item_emb[pairs[:, 1]])
    return pairs.numpy(), y.double().numpy()


def discover(pairs: np.ndarray, scores: np.ndarray, mu: float) -> LatentPositiveSet:
    """Keep the unlabeled pairs whose propensity reaches ``mu``."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"threshold mu={mu} outside [0, 1]")
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    scores = np.asarray(scores, dtype=np.float64)
    keep = scores >= mu
    if mu >= 1.0:
        # logistic outputs never reach 1; float rounding must not say otherwise
        keep &= scores < 1.0
    return LatentPositiveSet(pairs[keep], scores[keep], float(mu)).sorted()


def discover_from(result: AlignmentResult, mu: float) -> LatentPositiveSet:
    pairs, scores = score_unlabeled(result)
    return discover(pairs, scores, mu)


def random_latent(views: ViewSubgraphs, count: int, seed: int) -> LatentPositiveSet:
    """Uniform draw of ``count`` distinct unlabeled pairs (the random-selection ablation)."""
    pairs = views.aux_unlabeled.pairs()
    count = min(count, len(pairs))
    rng = numpy_stream(seed, "discovery/random")
    pick = np.sort(rng.choice(len(pairs), size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
    return LatentPositiveSet(pairs[pick], np.full(count, np.nan), float("nan"))


def fit_discriminator(disc: Discriminator, x_target, x_aux, steps: int, lr: float = 1e-2,
                      batch_size: int | None = None, seed: int = 0) -> list[float]:
    """Train a discriminator alone on fixed feature samples (ascent on the adversarial loss)."""
    opt = torch.optim.Adam(disc.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(steps):
        if batch_size:
            xt = x_target[torch.from_numpy(rng.integers(len(x_target), size=batch_size))]
            xa = x_aux[torch.from_numpy(rng.integers(len(x_aux), size=batch_size))]
        else:
            xt, xa = x_target, x_aux
        obj = adv_loss_from_logits(disc.logits(xt), disc.logits(xa))
        opt.zero_grad()
        (-obj).backward()
        opt.step()
        out.append(obj.item())
    return out
