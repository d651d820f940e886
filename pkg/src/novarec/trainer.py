"""Joint training of the fused recommender, ablation variants and checkpoints."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import AlignmentResult, AlignmentTrainer, LatentPositiveSet, discover_from, l2_norm, \
    random_latent, train_alignment
from .config import ABLATIONS, TrainConfig
from .data import LeaveOneOutSplit, MultiBehaviorGraph
from .errors import ConfigError, DivergenceError, FormatError, SamplingError
from .evaluator import evaluate_embeddings
from .fusion import BiasEstimator, FusionGraph, NovaModel
from .rng import numpy_stream
from .views import ViewSubgraphs, build_views

log = logging.getLogger(__name__)

CKPT_MAGIC = b"NOVAPRM1"


@dataclass
class TrainingSet:
    """Confirmed target pairs (weight 1) followed by recovered pairs (weight beta)."""
    true_pairs: np.ndarray
    latent_pairs: np.ndarray
    beta: float

    @classmethod
    def build(cls, train: MultiBehaviorGraph, latent: LatentPositiveSet | None, beta: float) -> "TrainingSet":
        us, its = train.edges(train.target)
        true = np.stack([us, its], axis=1).astype(np.int64) if len(us) else np.zeros((0, 2), dtype=np.int64)
        lat = np.zeros((0, 2), dtype=np.int64)
        if latent is not None and len(latent):
            lat = np.asarray(latent.pairs, dtype=np.int64).reshape(-1, 2)
            n = max(train.num_items, 1)
            keep = ~np.isin(lat[:, 0] * n + lat[:, 1], true[:, 0] * n + true[:, 1])
            lat = np.unique(lat[keep], axis=0)
        return cls(true, lat, float(beta))

    def __len__(self) -> int:
        return len(self.true_pairs) + len(self.latent_pairs)

    @property
    def pairs(self) -> np.ndarray:
        return np.concatenate([self.true_pairs, self.latent_pairs])

    @property
    def weights(self) -> np.ndarray:
        return np.concatenate([np.ones(len(self.true_pairs)), np.full(len(self.latent_pairs), self.beta)])


def bpr_term(score_pos, score_neg, omega):
    """``omega * -log sigmoid(score_pos - score_neg)``, element-wise."""
    return omega * -F.logsigmoid(torch.as_tensor(score_pos) - torch.as_tensor(score_neg))


def total_loss(rec, align, l2, lambda1: float, lambda2: float):
    return rec + lambda1 * align + lambda2 * l2


class NegativeSampler:
    """Uniform items outside each user's training target history."""

    def __init__(self, train: MultiBehaviorGraph, rng: np.random.Generator):
        adj = train.adjacency[train.target]
        self.num_items = train.num_items
        self.counts = np.diff(adj.indptr)
        users = np.repeat(np.arange(train.num_users), self.counts)
        self.keys = np.sort(users.astype(np.int64) * self.num_items + adj.indices)
        self.rng = rng

    def _taken(self, users, items):
        keys = users * self.num_items + items
        j = np.searchsorted(self.keys, keys)
        hit = np.zeros(len(keys), dtype=bool)
        ok = j < len(self.keys)
        hit[ok] = self.keys[j[ok]] == keys[ok]
        return hit

    def sample(self, users) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        if len(users) and np.any(self.counts[users] >= self.num_items):
            bad = int(users[self.counts[users] >= self.num_items][0])
            raise SamplingError(f"user {bad} has a target edge with every item; no negative exists")
        items = self.rng.integers(self.num_items, size=len(users))
        todo = np.flatnonzero(self._taken(users, items))
        while len(todo):
            items[todo] = self.rng.integers(self.num_items, size=len(todo))
            todo = todo[self._taken(users[todo], items[todo])]
        return items


def sample_negative(user: int, train: MultiBehaviorGraph, rng: np.random.Generator) -> int:
    return int(NegativeSampler(train, rng).sample([user])[0])


def model_l2(model) -> torch.Tensor:
    return l2_norm(model.parameters())


@dataclass
class TrainResult:
    model: NovaModel
    graph: FusionGraph
    log: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("nan")
    training_set: TrainingSet | None = None

    @torch.no_grad()
    def embeddings(self) -> tuple[np.ndarray, np.ndarray]:
        u, i = self.model(self.graph).final()
        return u.numpy(), i.numpy()


def _snapshot(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(split: LeaveOneOutSplit, views: ViewSubgraphs | None, latent: LatentPositiveSet | None,
          cfg: TrainConfig, alignment: AlignmentResult | None = None, fusion: bool = True,
          filter_bias: bool = True, layers: int | None = None, log_path=None,
          dtype=torch.float32) -> TrainResult:
    """Train the recommender with Adam on ``(u, i, j, omega)`` mini-batches.

    ``alignment`` keeps updating the alignment networks with weight
    ``lambda1`` on fresh batches; it never touches recommender parameters.
    ``filter_bias=False`` keeps the bias at zero.
    """
    graph = split.train
    seed = cfg.seed
    num_layers = cfg.layers if layers is None else layers
    fg = FusionGraph(graph, dtype)
    model = NovaModel(graph.num_users, graph.num_items, fg.num_aux, cfg.dim, num_layers, cfg.heads,
                      seed=seed, fusion=fusion, dtype=dtype)
    data = TrainingSet.build(graph, latent, cfg.beta)
    result = TrainResult(model, fg, [], training_set=data)
    if cfg.epochs == 0 or not len(data):
        return result

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    order_rng = numpy_stream(seed, "train/order")
    sampler = NegativeSampler(graph, numpy_stream(seed, "train/negatives"))
    gate_rng = numpy_stream(seed, "train/gate")
    joint = None
    if alignment is not None and cfg.lambda1 > 0 and alignment.graphs is not None:
        # scale lambda1 on the whole alignment objective; its own L2 then carries lambda2
        joint = AlignmentTrainer(alignment.model, alignment.graphs, cfg.align_lr, cfg.l2 / cfg.lambda1,
                                 cfg.align_batch_size, numpy_stream(seed, "train/align"), scale=cfg.lambda1)
    pairs = torch.from_numpy(data.pairs)
    weights = torch.from_numpy(data.weights).to(dtype)
    val = np.asarray(split.val_pairs, dtype=np.int64).reshape(-1, 2)
    best_val, best_state, best_epoch, stale = -math.inf, None, -1, 0
    sink = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            if filter_bias:
                model.refresh_bias(fg, BiasEstimator(fg, cfg.gate_candidates, gate_rng))
            negs = torch.from_numpy(sampler.sample(data.pairs[:, 0]))
            perm = torch.from_numpy(order_rng.permutation(len(data)))
            rec_sum, align_sum, reg, nb = 0.0, 0.0, 0.0, 0
            for start in range(0, len(data), cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                u, i, j, w = pairs[idx, 0], pairs[idx, 1], negs[idx], weights[idx]
                ue, ie = model(fg).final()
                eu = ue[u]
                rec = bpr_term((eu * ie[i]).sum(-1), (eu * ie[j]).sum(-1), w).mean()
                l2 = model_l2(model)
                loss = total_loss(rec, 0.0, l2, cfg.lambda1, cfg.l2)
                if not torch.isfinite(loss):
                    raise DivergenceError(f"non-finite training loss at epoch {epoch}, batch {nb}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                if joint is not None:
                    align_sum += joint.step()["l_align"]
                rec_sum += rec.item()
                reg = l2.item()
                nb += 1
            rec_mean, align_mean = rec_sum / nb, align_sum / nb
            entry = {"epoch": epoch, "l_rec": rec_mean, "l_align": align_mean, "l2": reg,
                     "l_total": total_loss(rec_mean, align_mean, reg, cfg.lambda1, cfg.l2)}
            if not math.isfinite(entry["l_total"]):
                raise DivergenceError(f"non-finite alignment loss at epoch {epoch}")
            if len(val) and (epoch + 1) % cfg.eval_every == 0:
                with torch.no_grad():
                    ue, ie = model(fg).final()
                hr, _, _ = evaluate_embeddings(ue.numpy(), ie.numpy(), graph, val, cfg.eval_k)
                entry["val_hr"] = hr
                if hr > best_val:
                    best_val, best_state, best_epoch, stale = hr, _snapshot(model), epoch, 0
                else:
                    stale += 1
            entry["wall_time"] = time.perf_counter() - t0
            result.log.append(entry)
            log.info("epoch %d %s", epoch, entry)
            if sink:
                sink.write(json.dumps(entry, sort_keys=True) + "\n")
            if len(val) and stale >= cfg.patience:
                break
    finally:
        if sink:
            sink.close()
    if best_state is not None:
        model.load_state_dict(best_state)
        result.best_epoch, result.best_val = best_epoch, best_val
    return result


BASELINES = ("bpr-mf", "lightgcn-target")


def train_baseline(kind: str, split: LeaveOneOutSplit, cfg: TrainConfig, log_path=None,
                   dtype=torch.float32) -> TrainResult:
    """Single-behavior baselines on the target graph: matrix factorization or LightGCN."""
    if kind not in BASELINES:
        raise ConfigError(f"unknown baseline {kind!r}; expected one of {BASELINES}")
    layers = 0 if kind == "bpr-mf" else cfg.layers
    return train(split, None, None, cfg, fusion=False, filter_bias=False, layers=layers,
                 log_path=log_path, dtype=dtype)


@dataclass
class Discovery:
    views: ViewSubgraphs
    alignment: AlignmentResult
    latent: LatentPositiveSet


def run_discovery(split: LeaveOneOutSplit, cfg: TrainConfig, dtype=torch.float32) -> Discovery:
    """Alignment phase on the training views, then thresholding at ``cfg.mu``."""
    views = build_views(split.train)
    result = train_alignment(views, cfg, seed=cfg.seed, dtype=dtype)
    return Discovery(views, result, discover_from(result, cfg.mu))


def run_variant(split: LeaveOneOutSplit, cfg: TrainConfig, variant: str = "full",
                discovery: Discovery | None = None, force_zero_bias: bool = False, log_path=None,
                dtype=torch.float32) -> TrainResult:
    """Train one ablation variant.

    A precomputed ``discovery`` is copied, so several variants can share it.
    """
    if variant not in ABLATIONS:
        raise ConfigError(f"unknown ablation {variant!r}; expected one of {ABLATIONS}")
    if variant == "baseline-bpr":
        return train_baseline("bpr-mf", split, cfg, log_path, dtype)
    if variant == "baseline-lightgcn":
        return train_baseline("lightgcn-target", split, cfg, log_path, dtype)
    if variant == "no-align":
        return train(split, None, None, cfg, log_path=log_path, dtype=dtype)
    if discovery is None:
        discovery = run_discovery(split, cfg, dtype)
    # fresh copy of the networks; the sparse view graphs are shared read-only
    alignment = AlignmentResult(copy.deepcopy(discovery.alignment.model), list(discovery.alignment.history),
                                discovery.alignment.graphs)
    latent = discovery.latent
    if variant == "random-latent":
        latent = random_latent(discovery.views, len(latent), cfg.seed)
    filter_bias = variant != "no-filter" and not force_zero_bias
    return train(split, discovery.views, latent, cfg, alignment=alignment, filter_bias=filter_bias,
                 log_path=log_path, dtype=dtype)


def checkpoint_bytes(model: NovaModel, meta: dict | None = None) -> bytes:
    """Parameter container: magic, u32 manifest length, JSON manifest, raw little-endian tensors."""
    state = model.state_dict()
    entries, blobs = [], []
    for name, t in state.items():
        arr = t.detach().cpu().numpy()
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        blobs.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    info = {"num_users": model.user_emb.shape[0], "num_items": model.item_emb.shape[0],
            "num_aux": model.bias.shape[1], "dim": model.dim, "layers": model.num_layers,
            "heads": model.heads, "fusion": model.use_fusion}
    info.update(meta or {})
    header = json.dumps({"format": 1, "meta": info, "tensors": entries}, sort_keys=True).encode()
    return CKPT_MAGIC + struct.pack("<I", len(header)) + header + b"".join(blobs)


def save_checkpoint(model: NovaModel, path, meta: dict | None = None) -> str:
    data = checkpoint_bytes(model, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def checkpoint_hash(model: NovaModel) -> str:
    return hashlib.sha256(checkpoint_bytes(model)).hexdigest()


def load_checkpoint(path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC or len(data) < 12:
        raise FormatError("not a parameter checkpoint (bad magic)")
    (hlen,) = struct.unpack_from("<I", data, 8)
    try:
        header = json.loads(data[12:12 + hlen])
    except ValueError as exc:
        raise FormatError(f"corrupt checkpoint manifest: {exc}") from None
    off, tensors = 12 + hlen, {}
    for e in header["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        size = count * dt.itemsize
        if off + size > len(data):
            raise FormatError(f"checkpoint truncated inside tensor {e['name']}")
        tensors[e["name"]] = torch.from_numpy(np.frombuffer(data, dtype=dt, count=count, offset=off)
                                              .reshape(e["shape"]).copy())
        off += size
    if off != len(data):
        raise FormatError("trailing bytes after checkpoint tensors")
    return header["meta"], tensors


def model_from_checkpoint(path) -> NovaModel:
    meta, tensors = load_checkpoint(path)
    dtype = tensors["user_emb"].dtype
    model = NovaModel(meta["num_users"], meta["num_items"], meta["num_aux"], meta["dim"], meta["layers"],
                      meta["heads"], fusion=meta["fusion"], dtype=dtype)
    model.load_state_dict(tensors)
    return model
