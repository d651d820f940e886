import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from novarec.alignment import LatentPositiveSet
from novarec.config import TrainConfig
from novarec.data import LeaveOneOutSplit, MultiBehaviorGraph, split_leave_one_out
from novarec.errors import ConfigError, FormatError, SamplingError
from novarec.fusion import NovaModel
from novarec.trainer import (NegativeSampler, TrainingSet, bpr_term, checkpoint_bytes, checkpoint_hash,
                             load_checkpoint, model_from_checkpoint, model_l2, run_variant, sample_negative,
                             save_checkpoint, total_loss, train, train_baseline)

from conftest import BEHAVIORS, random_graph

SMALL = TrainConfig(dim=8, layers=1, heads=2, epochs=3, batch_size=16, align_epochs=2, align_batch_size=32,
                    patience=100)


def test_bpr_values():
    assert bpr_term(0.0, 0.0, 1.0).item() == pytest.approx(0.6931, abs=1e-4)
    assert bpr_term(1.0, 0.0, 1.0).item() == pytest.approx(0.3133, abs=1e-4)
    assert bpr_term(0.0, 0.0, 0.5).item() == pytest.approx(0.3466, abs=1e-4)
    assert bpr_term(3.0, 1.0, 1.0).item() == pytest.approx(-math.log(1 / (1 + math.exp(-2))), rel=1e-6)


def test_total_loss_values():
    assert total_loss(1.5, 2.0, 3.0, 0.0, 0.0) == 1.5
    assert total_loss(1.0, 2.0, 3.0, 0.1, 1e-4) == pytest.approx(1.2003, abs=1e-12)


def test_l2_is_exact_sum_of_squares():
    m = NovaModel(3, 4, 2, 4, 1, heads=2, seed=0, dtype=torch.float64)
    expected = sum(float((p.detach().numpy() ** 2).sum()) for p in m.parameters())
    assert model_l2(m).item() == pytest.approx(expected, rel=1e-12)


def test_negative_sampling_forced_choice():
    g = MultiBehaviorGraph.from_edges(1, 4, BEHAVIORS, "purchase", [[], [], [(0, 0), (0, 1), (0, 3)]])
    rng = np.random.default_rng(0)
    assert {sample_negative(0, g, rng) for _ in range(50)} == {2}
    full = MultiBehaviorGraph.from_edges(1, 2, BEHAVIORS, "purchase", [[], [], [(0, 0), (0, 1)]])
    with pytest.raises(SamplingError):
        sample_negative(0, full, rng)


def test_negative_sampling_uniform_for_empty_history():
    g = MultiBehaviorGraph.from_edges(2, 5, BEHAVIORS, "purchase", [[], [], [(1, 0)]])
    draws = NegativeSampler(g, np.random.default_rng(1)).sample(np.zeros(5000, dtype=np.int64))
    counts = np.bincount(draws, minlength=5)
    assert stats.chisquare(counts).pvalue > 1e-3


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000))
def test_negatives_avoid_training_targets(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 5, 8, density=0.4)
    users = rng.integers(5, size=40)
    if np.any(g.user_degrees(g.target)[users] >= 8):
        return
    negs = NegativeSampler(g, rng).sample(users)
    assert not any(g.has_edge(g.target, u, j) for u, j in zip(users, negs))


def test_training_set_weights_take_two_values():
    g = MultiBehaviorGraph.from_edges(2, 3, BEHAVIORS, "purchase", [[(0, 1), (1, 2)], [], [(0, 0)]])
    latent = LatentPositiveSet(np.array([[0, 1], [1, 2], [0, 0]]), np.array([0.9, 0.8, 0.7]), 0.6)
    ts = TrainingSet.build(g, latent, 0.3)
    assert ts.pairs.tolist() == [[0, 0], [0, 1], [1, 2]]
    assert ts.weights.tolist() == [1.0, 0.3, 0.3]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100_000), st.floats(0.01, 0.99))
def test_omega_is_one_or_beta(seed, beta):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, 4, 6, density=0.3)
    cand = rng.integers(0, [4, 6], size=(int(rng.integers(0, 10)), 2))
    ts = TrainingSet.build(g, LatentPositiveSet(cand, np.ones(len(cand)), 0.5), beta)
    assert set(ts.weights.tolist()) <= {1.0, beta}
    for (u, i), w in zip(ts.pairs.tolist(), ts.weights.tolist()):
        assert w == (1.0 if g.has_edge(g.target, u, i) else beta)


def _split_of(g):
    return split_leave_one_out(g, 0, validation=False)


def test_zero_epochs_return_initialization():
    g = random_graph(np.random.default_rng(0), 5, 6, density=0.4)
    res = train(_split_of(g), None, None, SMALL.replace(epochs=0))
    fresh = NovaModel(5, 6, 2, 8, 1, heads=2, seed=SMALL.seed)
    assert checkpoint_hash(res.model) == checkpoint_hash(fresh)


def _identity_split():
    purchases = [(u, u) for u in range(5)]
    g = MultiBehaviorGraph.from_edges(5, 5, BEHAVIORS, "purchase", [[], [], purchases])
    return LeaveOneOutSplit(g, (), (), (), (), 0)


@pytest.mark.parametrize("kind", [None, "bpr-mf", "lightgcn-target"])
def test_separable_toy_memorized(kind):
    cfg = TrainConfig(dim=8, layers=1, heads=2, lr=0.05, epochs=200, batch_size=5, l2=0.0)
    split = _identity_split()
    res = train(split, None, None, cfg) if kind is None else train_baseline(kind, split, cfg)
    u, i = res.embeddings()
    assert ((u @ i.T).argmax(1) == np.arange(5)).all()


def test_lightgcn_at_zero_layers_is_matrix_factorization():
    g = random_graph(np.random.default_rng(4), 6, 8, density=0.3)
    split = _split_of(g)
    a = train_baseline("bpr-mf", split, SMALL)
    b = train(split, None, None, SMALL, fusion=False, filter_bias=False, layers=0)
    assert checkpoint_hash(a.model) == checkpoint_hash(b.model)
    with pytest.raises(ConfigError):
        train_baseline("ngcf", split, SMALL)


def test_same_seed_same_trajectory(tmp_path):
    g = random_graph(np.random.default_rng(5), 8, 10, density=0.3)
    split = split_leave_one_out(g, 0, validation=True)
    r1 = run_variant(split, SMALL.replace(mu=0.0), "full", log_path=tmp_path / "a.jsonl")
    r2 = run_variant(split, SMALL.replace(mu=0.0), "full", log_path=tmp_path / "b.jsonl")
    strip = lambda log: [{k: v for k, v in e.items() if k != "wall_time"} for e in log]
    assert strip(r1.log) == strip(r2.log)
    assert checkpoint_hash(r1.model) == checkpoint_hash(r2.model)
    assert all(e["l_align"] != 0.0 for e in r1.log)
    assert (tmp_path / "a.jsonl").read_text().count("\n") == len(r1.log)


@pytest.mark.parametrize("variant", ["no-align", "no-filter", "random-latent", "baseline-bpr", "baseline-lightgcn"])
def test_every_variant_trains(variant):
    g = random_graph(np.random.default_rng(6), 6, 9, density=0.3)
    res = run_variant(_split_of(g), SMALL.replace(mu=0.2), variant)
    assert len(res.log) == SMALL.epochs
    assert all(math.isfinite(e["l_total"]) for e in res.log)


def test_checkpoint_round_trip(tmp_path):
    m = NovaModel(3, 4, 2, 4, 2, heads=2, seed=1)
    with torch.no_grad():
        m.bias.normal_()
    digest = save_checkpoint(m, tmp_path / "m.ckpt", {"seed": 1})
    assert (tmp_path / "m.ckpt").read_bytes()[:8] == b"NOVAPRM1"
    meta, tensors = load_checkpoint(tmp_path / "m.ckpt")
    assert meta["seed"] == 1 and meta["layers"] == 2
    back = model_from_checkpoint(tmp_path / "m.ckpt")
    assert checkpoint_hash(back) == checkpoint_hash(m)
    assert len(digest) == 64
    data = checkpoint_bytes(m)
    (tmp_path / "bad.ckpt").write_bytes(data[:-2])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.ckpt")
