"""Synthetic multi-behavior logs with planted latent positives.

Users and items get clustered latent factors. Each user's highest-scoring
items become target edges; the next-highest items are emitted only as
auxiliary actions (the planted latent positives). Uniform noise pairs drawn
outside both sets are added on top.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .alignment import LatentPositiveSet
from .data import MultiBehaviorGraph
from .errors import ConfigError, RecallUndefinedError
from .rng import numpy_stream

BEHAVIORS = ("view", "cart", "purchase")
TARGET = "purchase"


@dataclass(frozen=True)
class SynthConfig:
    num_users: int = 300
    num_items: int = 500
    d_true: int = 8
    # expected per-user edge counts are rate * num_items
    target_rate: float = 0.02
    aux_support_rate: float = 0.9
    planted_latent_rate: float = 0.006
    noise_rate: float = 0.006
    cart_rate: float = 0.3
    clusters: int = 10
    cluster_spread: float = 0.5
    popularity_scale: float = 0.5
    preference_noise: float = 0.3
    seed: int = 42

    def __post_init__(self):
        if self.num_users < 1 or self.num_items < 1 or self.d_true < 1 or self.clusters < 1:
            raise ConfigError("num_users, num_items, d_true and clusters must be >= 1")
        for name in ("target_rate", "aux_support_rate", "planted_latent_rate", "noise_rate", "cart_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.target_rate + self.planted_latent_rate + self.noise_rate > 1.0:
            raise ConfigError("target, planted and noise rates together exceed the item count")


# Documented benchmark configurations.
BENCHMARK = SynthConfig()
RETAIL_SURROGATE = SynthConfig(
    num_users=2174, num_items=30113, d_true=16,
    target_rate=1.5e-4, aux_support_rate=0.9, planted_latent_rate=1.5e-4, noise_rate=8e-4,
    clusters=40, seed=7,
)


@dataclass
class GroundTruth:
    planted_latent: set
    noise: set


def _counts(rng, n, rate, size, minimum=0):
    return np.maximum(rng.binomial(n, rate, size=size), minimum)


def generate(cfg: SynthConfig) -> tuple[MultiBehaviorGraph, GroundTruth]:
    m, n = cfg.num_users, cfg.num_items
    rng = numpy_stream(cfg.seed, "synth/factors")
    centers = rng.normal(size=(cfg.clusters, cfg.d_true))
    user_f = centers[rng.integers(cfg.clusters, size=m)] + cfg.cluster_spread * rng.normal(size=(m, cfg.d_true))
    item_f = centers[rng.integers(cfg.clusters, size=n)] + cfg.cluster_spread * rng.normal(size=(n, cfg.d_true))
    popularity = cfg.popularity_scale * rng.normal(size=n)

    crng = numpy_stream(cfg.seed, "synth/counts")
    n_target = _counts(crng, n, cfg.target_rate, m, minimum=1)
    n_planted = _counts(crng, n, cfg.planted_latent_rate, m)
    n_noise = _counts(crng, n, cfg.noise_rate, m)
    if np.any(n_target + n_planted + n_noise > n):
        raise ConfigError("drawn edge counts exceed the number of items for some user")

    prng = numpy_stream(cfg.seed, "synth/preference")
    nrng = numpy_stream(cfg.seed, "synth/noise")
    target, planted, noise = [], [], []
    scale = 1.0 / np.sqrt(cfg.d_true)
    for start in range(0, m, 256):
        stop = min(m, start + 256)
        pref = user_f[start:stop] @ item_f.T * scale + popularity
        pref += cfg.preference_noise * prng.gumbel(size=pref.shape)
        for r, u in enumerate(range(start, stop)):
            nt, npl = int(n_target[u]), int(n_planted[u])
            order = np.argsort(-pref[r], kind="stable")
            top = order[: nt + npl]
            target.extend((u, int(i)) for i in np.sort(order[:nt]))
            # the next-highest pairs are preferred but never converted
            planted.extend((u, int(i)) for i in np.sort(order[nt:nt + npl]))
            if n_noise[u]:
                free = np.setdiff1d(np.arange(n), top, assume_unique=True)
                pick = nrng.choice(free, size=int(n_noise[u]), replace=False)
                noise.extend((u, int(i)) for i in np.sort(pick))

    brng = numpy_stream(cfg.seed, "synth/behaviors")
    trng = numpy_stream(cfg.seed, "synth/timestamps")
    view, cart = [], []
    support = [p for p, keep in zip(target, brng.random(len(target)) < cfg.aux_support_rate) if keep]
    for u, i in support + planted + noise:
        ts = int(trng.integers(0, 1_000_000))
        view.append((u, i, ts))
        if brng.random() < cfg.cart_rate:
            cart.append((u, i, ts + 1))
    purchase = [(u, i, int(trng.integers(1_000_000, 2_000_000))) for u, i in target]
    graph = MultiBehaviorGraph.from_edges(
        m, n, BEHAVIORS, TARGET, [view, cart, purchase],
        tuple(f"u{u}" for u in range(m)), tuple(f"i{i}" for i in range(n)))
    return graph, GroundTruth(set(planted), set(noise))


@dataclass
class RecoveryMetrics:
    precision: float
    recall: float
    f1: float
    true_positives: int
    discovered: int
    planted: int
    zero_support: bool = False


def recovery_metrics(discovered, truth: GroundTruth) -> RecoveryMetrics:
    """Precision/recall of discovered pairs against the planted latent set."""
    found = discovered.as_set() if isinstance(discovered, LatentPositiveSet) else set(map(tuple, discovered))
    planted = truth.planted_latent
    if not planted:
        raise RecallUndefinedError("no planted latent positives; recall is undefined")
    tp = len(found & planted)
    zero = not found
    precision = 1.0 if zero else tp / len(found)
    recall = tp / len(planted)
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return RecoveryMetrics(precision, recall, f1, tp, len(found), len(planted), zero)


def random_baseline_precision(truth: GroundTruth, unlabeled_pairs) -> float:
    """Expected precision of picking unlabeled auxiliary pairs uniformly at random."""
    pairs = set(map(tuple, np.asarray(unlabeled_pairs).tolist()))
    if not pairs:
        return 0.0
    return len(pairs & truth.planted_latent) / len(pairs)


def write_ground_truth(truth: GroundTruth, path, user_ids=None, item_ids=None) -> None:
    rows = [(u, i, "latent") for u, i in truth.planted_latent] + [(u, i, "noise") for u, i in truth.noise]
    rows.sort()
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, kind in rows:
            fh.write(f"{user_ids[u] if user_ids else u}\t{item_ids[i] if item_ids else i}\t{kind}\n")


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)


def save_config(cfg: SynthConfig, path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in asdict(cfg).items()), encoding="utf-8")
