import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from novarec.data import (GRAPH_MAGIC, InteractionRecord, MultiBehaviorGraph, graph_from_bytes, graph_to_bytes,
                          load_interactions, load_split, parse_interactions, save_graph, save_split,
                          split_leave_one_out, summarize, write_interactions)
from novarec.errors import ConfigError, FormatError, ParseError, SplitError

from conftest import BEHAVIORS, random_graph


def write_log(tmp_path, lines, name="log.tsv"):
    p = tmp_path / name
    p.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return p


def test_load_assigns_first_appearance_order(tmp_path):
    p = write_log(tmp_path, ["# header", "bob\tx\tview\t5", "amy\ty\tpurchase\t7", "", "bob\ty\tcart"])
    g = load_interactions(p, BEHAVIORS, "purchase")
    assert g.user_ids == ("bob", "amy")
    assert g.item_ids == ("x", "y")
    assert (g.num_users, g.num_items, g.total_interactions) == (2, 2, 3)
    assert g.has_edge(0, 0, 0) and g.has_edge(1, 0, 1) and g.has_edge(2, 1, 1)
    assert g.timestamps[1][0] == -1


def test_duplicate_line_collapses(tmp_path):
    p = write_log(tmp_path, ["u0\ti0\tview\t1", "u0\ti0\tview\t1"])
    g = load_interactions(p, BEHAVIORS, "purchase")
    assert g.adjacency[0].nnz == 1
    assert set(g.adjacency[0].data.tolist()) == {1.0}


def test_empty_file_gives_empty_graph(tmp_path):
    g = load_interactions(write_log(tmp_path, []), BEHAVIORS, "purchase")
    assert g.num_users == 0 and g.num_items == 0
    assert all(a.nnz == 0 for a in g.adjacency)


@pytest.mark.parametrize("line,needle", [
    ("u\ti\tclick", "unknown behavior"),
    ("u\ti", "expected 3 or 4"),
    ("u\t\tview", "expected 3 or 4"),
    ("u\ti\tview\tsoon", "not an integer"),
    ("u\ti\tview\t-3", "negative"),
])
def test_parse_errors_carry_line_numbers(tmp_path, line, needle):
    p = write_log(tmp_path, ["a\tb\tview", line])
    with pytest.raises(ParseError) as exc:
        load_interactions(p, BEHAVIORS, "purchase")
    assert exc.value.line == 2
    assert needle in str(exc.value) and str(exc.value).startswith("line 2:")


def test_config_errors(tmp_path):
    p = write_log(tmp_path, ["a\tb\tview"])
    with pytest.raises(ConfigError):
        load_interactions(p, (), "purchase")
    with pytest.raises(ConfigError):
        load_interactions(p, BEHAVIORS, "fav")


def test_record_invariants():
    recs = [r for r, _ in parse_interactions(["u\ti\tview\t0"], BEHAVIORS)]
    assert recs == [InteractionRecord("u", "i", "view", 0)]


def test_degrees_match_adjacency_sums(toy_graph):
    for k in range(toy_graph.num_behaviors):
        a = toy_graph.adjacency[k]
        assert np.array_equal(toy_graph.user_degrees(k), np.asarray(a.sum(axis=1)).ravel())
        assert np.array_equal(toy_graph.item_degrees(k), np.asarray(a.sum(axis=0)).ravel())


def test_split_takes_latest_timestamp():
    g = MultiBehaviorGraph.from_edges(1, 4, BEHAVIORS, "purchase",
                                      [[(0, 3, 0)], [], [(0, 0, 1), (0, 1, 2), (0, 2, 3)]])
    s = split_leave_one_out(g, seed=0)
    assert s.test_pairs == ((0, 2),)
    assert not s.train.has_edge(2, 0, 2) and s.train.has_edge(2, 0, 0)


def test_split_single_target_edge_keeps_aux():
    g = MultiBehaviorGraph.from_edges(1, 2, BEHAVIORS, "purchase", [[(0, 1, 0)], [], [(0, 0, 4)]])
    s = split_leave_one_out(g, seed=3)
    assert s.test_pairs == ((0, 0),)
    assert s.train.num_edges(2) == 0 and s.train.num_edges(0) == 1
    assert s.cold_users == ()


def test_split_flags_cold_users():
    g = MultiBehaviorGraph.from_edges(2, 2, BEHAVIORS, "purchase", [[(1, 1)], [], [(0, 0, 1), (1, 0, 1)]])
    s = split_leave_one_out(g, seed=0)
    assert s.cold_users == (0,)


def test_split_matches_exhaustive_scan():
    # three users with two target edges each; the oracle scans every edge
    purchase = [(0, 0, 5), (0, 3, 9), (1, 1, 2), (1, 2, 1), (2, 4, 7), (2, 0, 8)]
    g = MultiBehaviorGraph.from_edges(3, 5, BEHAVIORS, "purchase", [[], [], purchase])
    expected = {}
    for u, i, t in purchase:
        if u not in expected or t > expected[u][1]:
            expected[u] = (i, t)
    s = split_leave_one_out(g, seed=11)
    assert set(s.test_pairs) == {(u, i) for u, (i, _) in expected.items()}


def test_split_missing_timestamps_are_seeded():
    purchase = [(0, i, None) for i in range(6)]
    g = MultiBehaviorGraph.from_edges(1, 6, BEHAVIORS, "purchase", [[], [], purchase])
    picks = {split_leave_one_out(g, seed=s).test_pairs for s in range(30)}
    assert len(picks) > 1
    assert split_leave_one_out(g, seed=4).test_pairs == split_leave_one_out(g, seed=4).test_pairs


def test_split_rejects_no_target_edges():
    g = MultiBehaviorGraph.from_edges(1, 1, BEHAVIORS, "purchase", [[(0, 0)], [], []])
    with pytest.raises(SplitError):
        split_leave_one_out(g, 0)


def test_validation_holdout_distinct_from_test():
    purchase = [(0, i, i) for i in range(4)] + [(1, 0, 1), (1, 1, 2)]
    g = MultiBehaviorGraph.from_edges(2, 4, BEHAVIORS, "purchase", [[], [], purchase])
    s = split_leave_one_out(g, 0, validation=True)
    assert s.test_pairs == ((0, 3), (1, 1))
    assert s.val_pairs == ((0, 2),)      # user 1 has only two target edges
    assert s.train.num_edges(2) == 3


def test_excluded_users_stay_in_training():
    g = MultiBehaviorGraph.from_edges(2, 2, BEHAVIORS, "purchase", [[(1, 1)], [], [(0, 0, 1)]])
    s = split_leave_one_out(g, 0)
    assert s.excluded_users == (1,)
    assert s.train.has_edge(0, 1, 1)


def test_summarize_counts_and_density():
    g = MultiBehaviorGraph.from_edges(2, 3, BEHAVIORS, "purchase", [[(0, 0), (1, 2)], [], [(0, 1)]])
    stats = summarize(g)
    assert stats.total_interactions == 3
    assert stats.density == pytest.approx(3 / (2 * 3 * 3))
    assert stats.per_behavior["view"]["interactions"] == 2
    assert stats.per_behavior["view"]["user_degree_quantiles"][-1] == 1.0


def test_summarize_empty():
    g = MultiBehaviorGraph.from_edges(0, 0, BEHAVIORS, "purchase", [[], [], []])
    stats = summarize(g)
    assert stats.total_interactions == 0 and stats.density == 0.0
    assert all(v["interactions"] == 0 for v in stats.per_behavior.values())


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 6), st.sampled_from(BEHAVIORS),
                          st.one_of(st.none(), st.integers(0, 100))), max_size=60))
def test_round_trip_counts_distinct_triples(tmp_path_factory, rows):
    lines = [f"u{u}\ti{i}\t{b}" + ("" if t is None else f"\t{t}") for u, i, b, t in rows]
    p = write_log(tmp_path_factory.mktemp("fuzz"), lines)
    g = load_interactions(p, BEHAVIORS, "purchase")
    assert summarize(g).total_interactions == len({(u, i, b) for u, i, b, _ in rows})


def test_container_round_trip_and_magic(tmp_path):
    g = random_graph(np.random.default_rng(1), 7, 9)
    data = graph_to_bytes(g)
    assert data[:8] == GRAPH_MAGIC
    back = graph_from_bytes(data)
    assert back.triples() == g.triples()
    assert all(np.array_equal(a, b) for a, b in zip(back.timestamps, g.timestamps))
    assert graph_to_bytes(back) == data


@pytest.mark.parametrize("mutate", [
    lambda d: b"NOVA0002" + d[8:],
    lambda d: d[:-3],
    lambda d: d + b"\x00",
    lambda d: d[:8] + b"\xff\xff\xff\x7f" + d[12:],
])
def test_container_rejects_corruption(mutate):
    g = random_graph(np.random.default_rng(2), 4, 4)
    with pytest.raises(FormatError):
        graph_from_bytes(mutate(graph_to_bytes(g)))


def test_deterministic_serialization(tmp_path):
    g = random_graph(np.random.default_rng(5), 6, 6)
    s1 = split_leave_one_out(g, 9, validation=True)
    s2 = split_leave_one_out(g, 9, validation=True)
    save_split(s1, tmp_path / "a.nova", tmp_path / "a.txt")
    save_split(s2, tmp_path / "b.nova", tmp_path / "b.txt")
    assert (tmp_path / "a.nova").read_bytes() == (tmp_path / "b.nova").read_bytes()
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    back = load_split(tmp_path / "a.nova", tmp_path / "a.txt")
    assert back.test_pairs == s1.test_pairs and back.val_pairs == s1.val_pairs and back.seed == 9


def test_write_then_load_preserves_triples(tmp_path, toy_graph):
    p = tmp_path / "out.tsv"
    write_interactions(toy_graph, p)
    back = load_interactions(p, BEHAVIORS, "purchase")
    named = lambda g: {(g.user_ids[u] if g.user_ids else f"u{u}", g.item_ids[i] if g.item_ids else f"i{i}", k)
                       for u, i, k in g.triples()}
    assert named(back) == named(toy_graph)
    save_graph(back, tmp_path / "g.nova")
    assert (tmp_path / "g.nova").read_bytes()[:8] == GRAPH_MAGIC


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_split_soundness_fuzz(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, int(rng.integers(1, 7)), int(rng.integers(1, 7)), density=0.5)
    if g.num_edges(g.target) == 0:
        return
    s = split_leave_one_out(g, seed, validation=bool(seed % 2))
    for u, i in s.test_pairs + s.val_pairs:
        assert g.has_edge(g.target, u, i) and not s.train.has_edge(g.target, u, i)
    assert len(set(s.test_pairs) & set(s.val_pairs)) == 0
    held = set(s.test_pairs) | set(s.val_pairs)
    assert s.train.triples() == {t for t in g.triples() if not (t[2] == g.target and t[:2] in held)}
