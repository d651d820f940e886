from dataclasses import replace

import numpy as np
import pytest

from novarec.alignment import LatentPositiveSet
from novarec.errors import ConfigError, RecallUndefinedError
from novarec.synthlab import (BENCHMARK, GroundTruth, SynthConfig, generate, random_baseline_precision,
                              recovery_metrics, save_config, write_ground_truth)
from novarec.views import build_views

SMALL = SynthConfig(num_users=40, num_items=60, target_rate=0.05, planted_latent_rate=0.03, noise_rate=0.03)


def test_no_planted_no_noise_gives_empty_unlabeled_view():
    g, truth = generate(replace(SMALL, planted_latent_rate=0.0, noise_rate=0.0))
    assert truth.planted_latent == set() and truth.noise == set()
    assert len(build_views(g).aux_unlabeled) == 0


def test_ground_truth_disjointness():
    g, truth = generate(SMALL)
    target = {(u, i) for u, i, k in g.triples() if k == g.target}
    assert truth.planted_latent and truth.noise
    assert not truth.planted_latent & target
    assert not truth.planted_latent & truth.noise
    aux_pairs = {(u, i) for u, i, k in g.triples() if k != g.target}
    assert truth.planted_latent <= aux_pairs and truth.noise <= aux_pairs


def test_unlabeled_view_is_planted_plus_noise():
    g, truth = generate(SMALL)
    unl = set(map(tuple, build_views(g).aux_unlabeled.pairs().tolist()))
    assert truth.planted_latent | truth.noise == unl


def test_fixed_seed_regenerates_identically():
    g1, t1 = generate(BENCHMARK)
    g2, t2 = generate(BENCHMARK)
    assert g1.triples() == g2.triples()
    assert t1.planted_latent == t2.planted_latent and t1.noise == t2.noise
    assert [g1.num_edges(k) for k in range(3)] == [g2.num_edges(k) for k in range(3)]
    g3, _ = generate(SynthConfig(seed=43))
    assert g3.triples() != g1.triples()


def test_benchmark_shape():
    g, truth = generate(BENCHMARK)
    assert (g.num_users, g.num_items) == (300, 500)
    assert len(truth.planted_latent) > 0


def test_config_validation():
    with pytest.raises(ConfigError):
        SynthConfig(target_rate=0.6, planted_latent_rate=0.3, noise_rate=0.2)
    with pytest.raises(ConfigError):
        SynthConfig(noise_rate=-0.1)
    with pytest.raises(ConfigError):
        SynthConfig(num_users=0)


def test_recovery_metric_examples():
    truth = GroundTruth({(0, 0), (0, 1), (1, 0), (1, 1)}, set())
    found = LatentPositiveSet(np.array([[0, 0], [0, 1], [5, 5]]), np.ones(3), 0.5)
    r = recovery_metrics(found, truth)
    assert r.precision == pytest.approx(2 / 3) and r.recall == pytest.approx(0.5)
    assert r.f1 == pytest.approx(2 * (2 / 3) * 0.5 / (2 / 3 + 0.5))
    same = recovery_metrics(list(truth.planted_latent), truth)
    assert same.precision == 1.0 and same.recall == 1.0
    assert recovery_metrics([(9, 9)], truth).precision == 0.0
    empty = recovery_metrics([], truth)
    assert empty.precision == 1.0 and empty.zero_support and empty.recall == 0.0
    with pytest.raises(RecallUndefinedError):
        recovery_metrics([(0, 0)], GroundTruth(set(), set()))


def test_random_baseline_precision():
    truth = GroundTruth({(0, 0)}, {(0, 1), (0, 2), (0, 3)})
    assert random_baseline_precision(truth, [(0, 0), (0, 1), (0, 2), (0, 3)]) == 0.25
    assert random_baseline_precision(truth, []) == 0.0


def test_sidecar_files(tmp_path):
    _, truth = generate(SMALL)
    write_ground_truth(truth, tmp_path / "truth.tsv")
    rows = [r.split("\t") for r in (tmp_path / "truth.tsv").read_text().splitlines()]
    assert {r[2] for r in rows} == {"latent", "noise"}
    assert len(rows) == len(truth.planted_latent) + len(truth.noise)
    save_config(SMALL, tmp_path / "cfg.txt")
    assert "num_users=40" in (tmp_path / "cfg.txt").read_text().splitlines()
