import numpy as np
import pytest

from gclbench import graphs
from gclbench.errors import ConfigError, ParseError
from gclbench.graphs import TEST, TRAIN, VAL


def write_tsv(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestLoad:
    def test_dedup_counted(self, tmp_path):
        p = write_tsv(tmp_path / "x.tsv", ["a\ti1", "a\ti1", "b\ti2"])
        g = graphs.load_interactions(p)
        assert g.num_edges == 2
        assert g.dedup_count == 1

    def test_minimal_one_by_one(self, tmp_path):
        p = write_tsv(tmp_path / "x.tsv", ["u\ti"])
        g = graphs.load_interactions(p)
        assert (g.num_users, g.num_items, g.num_edges) == (1, 1, 1)

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        p = write_tsv(tmp_path / "x.tsv", ["# header", "", "a\ti1", "b\ti2"])
        g = graphs.load_interactions(p)
        assert g.num_edges == 2

    def test_malformed_line_reports_number(self, tmp_path):
        p = write_tsv(tmp_path / "x.tsv", ["a\ti1", "not-a-pair"])
        with pytest.raises(ParseError, match="line 2"):
            graphs.load_interactions(p)

    def test_empty_file_errors(self, tmp_path):
        p = write_tsv(tmp_path / "x.tsv", ["# nothing here"])
        with pytest.raises(ParseError):
            graphs.load_interactions(p)

    def test_missing_file_errors(self, tmp_path):
        with pytest.raises(ConfigError):
            graphs.load_interactions(tmp_path / "absent.tsv")

    def test_extra_rating_column_ignored(self, tmp_path):
        p = write_tsv(tmp_path / "x.tsv", ["a\ti1\t5", "b\ti2\t3"])
        g = graphs.load_interactions(p)
        assert g.num_edges == 2

    def test_douban_shaped_counts(self, tmp_path):
        # same user/item/interaction counts as the densest public benchmark
        n_users, n_items, n_inter = 2831, 36821, 805611
        rng = np.random.default_rng(0)
        seen = set()
        lines = []
        # cover every user and item first, then fill uniformly
        for i in range(n_items):
            u = i % n_users
            seen.add((u, i))
            lines.append(f"u{u}\tm{i}")
        us = rng.integers(0, n_users, size=2 * n_inter)
        its = rng.integers(0, n_items, size=2 * n_inter)
        for u, i in zip(us, its):
            if len(lines) == n_inter:
                break
            if (u, i) not in seen:
                seen.add((u, i))
                lines.append(f"u{u}\tm{i}")
        assert len(lines) == n_inter
        p = tmp_path / "big.tsv"
        p.write_text("\n".join(lines) + "\n", encoding="utf-8")
        g = graphs.load_interactions(p)
        assert g.num_users == 2831
        assert g.num_items == 36821
        assert g.num_edges == 805611


def toy_graph(edges, num_users=None, num_items=None):
    u = np.array([e[0] for e in edges])
    i = np.array([e[1] for e in edges])
    return graphs.InteractionGraph(
        num_users=num_users or int(u.max()) + 1,
        num_items=num_items or int(i.max()) + 1,
        edges_u=u, edges_i=i,
        split=np.zeros(len(edges), dtype=np.uint8),
        user_ids=[f"u{k}" for k in range((num_users or int(u.max()) + 1))],
        item_ids=[f"i{k}" for k in range((num_items or int(i.max()) + 1))],
    )


class TestSplit:
    def test_exact_ratio_divisibility(self):
        g = toy_graph([(0, j) for j in range(10)])
        s = graphs.split(g, (0.7, 0.1, 0.2), seed=1)
        counts = [int((s.split == t).sum()) for t in (TRAIN, VAL, TEST)]
        assert counts == [7, 1, 2]

    def test_same_seed_same_partition(self):
        g = toy_graph([(u, j) for u in range(5) for j in range(7)])
        a = graphs.split(g, seed=3)
        b = graphs.split(g, seed=3)
        assert np.array_equal(a.split, b.split)

    def test_different_seed_differs(self):
        g = toy_graph([(u, j) for u in range(8) for j in range(9)])
        a = graphs.split(g, seed=3)
        b = graphs.split(g, seed=4)
        assert not np.array_equal(a.split, b.split)

    def test_single_edge_user_lands_in_train(self):
        # 2-user toy: enumerate the reassignment rule across many seeds,
        # including ratios whose largest remainder is not the train bucket
        g = toy_graph([(0, 0), (1, 1), (1, 2), (1, 3), (1, 4)], num_items=5)
        for seed in range(40):
            for ratios in [(0.7, 0.1, 0.2), (0.1, 0.1, 0.8)]:
                s = graphs.split(g, ratios, seed=seed)
                u0_tags = s.split[s.edges_u == 0]
                assert u0_tags.tolist() == [TRAIN]

    def test_split_is_partition(self):
        g = toy_graph([(u, j) for u in range(6) for j in range(11)])
        s = graphs.split(g, seed=9)
        counts = sum(int((s.split == t).sum()) for t in (TRAIN, VAL, TEST))
        assert counts == g.num_edges
        s.validate()

    def test_bad_ratios_rejected(self):
        g = toy_graph([(0, 0)])
        with pytest.raises(ConfigError):
            graphs.split(g, (0.5, 0.5, 0.5))
        with pytest.raises(ConfigError):
            graphs.split(g, (1.0, 0.0, 0.0))

    def test_global_split_mode(self):
        g = toy_graph([(u, j) for u in range(10) for j in range(10)])
        s = graphs.split(g, seed=2, per_user=False)
        counts = [int((s.split == t).sum()) for t in (TRAIN, VAL, TEST)]
        assert counts == [70, 10, 20]
        has_train = set(s.edges_u[s.split == TRAIN].tolist())
        assert has_train == set(range(10))


class TestNormalizedAdjacency:
    def test_single_edge_both_entries_one(self):
        g = toy_graph([(0, 0)])
        adj = graphs.normalized_adjacency(g)
        m = adj.matrix.toarray()
        assert m[0, 1] == pytest.approx(1.0)
        assert m[1, 0] == pytest.approx(1.0)
        assert np.count_nonzero(m) == 2

    def test_degree_two_user(self):
        g = toy_graph([(0, 0), (0, 1)])
        m = graphs.normalized_adjacency(g).matrix.toarray()
        assert m[0, 1] == pytest.approx(1 / np.sqrt(2))
        assert m[0, 2] == pytest.approx(1 / np.sqrt(2))

    def test_empty_train_errors(self):
        g = toy_graph([(0, 0)])
        g.split[:] = TEST
        with pytest.raises(ConfigError):
            graphs.normalized_adjacency(g)

    def test_symmetric_zero_diagonal(self):
        rng = np.random.default_rng(0)
        edges = list({(int(rng.integers(6)), int(rng.integers(9)))
                      for _ in range(30)})
        g = graphs.split(toy_graph(edges, num_users=6, num_items=9), seed=0)
        m = graphs.normalized_adjacency(g).matrix
        assert (m != m.T).nnz == 0
        assert np.all(m.diagonal() == 0)

    def test_isolated_node_zero_row(self):
        g = toy_graph([(0, 0)], num_users=2, num_items=1)
        adj = graphs.normalized_adjacency(g)
        assert adj.isolated_nodes == 1
        assert adj.matrix[1].nnz == 0


class TestTargets:
    def test_equal_popularity_pool_is_tiebreak_tail(self):
        g = toy_graph([(u, u) for u in range(10)])  # every item degree 1
        order = graphs.popularity_order(g)
        assert order.tolist() == list(range(10))
        ts = graphs.select_targets(g, 3, seed=0)
        pool = order[10 - 8:]
        assert set(ts.item_indices) <= set(pool.tolist())

    def test_exhaustive_draw(self):
        g = toy_graph([(u, u) for u in range(10)])
        ts = graphs.select_targets(g, 8, seed=5)
        assert sorted(ts.item_indices) == list(range(2, 10))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        edges = list({(int(rng.integers(20)), int(rng.integers(100)))
                      for _ in range(600)})
        g = toy_graph(edges, num_users=20, num_items=100)
        a = graphs.select_targets(g, 10, seed=7)
        b = graphs.select_targets(g, 10, seed=7)
        assert a.item_indices == b.item_indices

    def test_pool_too_small(self):
        g = toy_graph([(0, 0), (0, 1)], num_items=2)
        with pytest.raises(ConfigError):
            graphs.select_targets(g, 5, seed=0)

    def test_targets_drawn_from_cold_pool(self):
        # items 0..4 popular (degree 6), items 5..49 degree 1
        edges = [(u, i) for i in range(5) for u in range(6)]
        edges += [(0, i) for i in range(5, 50)]
        g = toy_graph(edges, num_users=6, num_items=50)
        pop = g.item_popularity()
        ts = graphs.select_targets(g, 10, seed=3)
        assert all(pop[t] == 1 for t in ts.item_indices)


class TestDegreeStats:
    def test_two_users(self):
        g = toy_graph([(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (1, 3)])
        mean, per_user = graphs.user_degree_stats(g)
        assert mean == pytest.approx(3.0)
        assert per_user.tolist() == [2, 4]

    def test_single_user(self):
        g = toy_graph([(0, 0), (0, 1), (0, 2)])
        mean, _ = graphs.user_degree_stats(g)
        assert mean == pytest.approx(3.0)

    def test_five_user_toy_matches_recount(self):
        rng = np.random.default_rng(3)
        edges = list({(int(rng.integers(5)), int(rng.integers(30)))
                      for _ in range(40)})
        g = toy_graph(edges, num_users=5, num_items=30)
        g = graphs.split(g, seed=1)
        mean, per_user = graphs.user_degree_stats(g)
        brute = [0] * 5
        for u, tag in zip(g.edges_u, g.split):
            if tag == TRAIN:
                brute[u] += 1
        assert per_user.tolist() == brute
        assert mean == pytest.approx(sum(brute) / 5)


class TestSnapshotRoundTrip:
    def test_round_trip_identical(self, tmp_path):
        rng = np.random.default_rng(4)
        edges = list({(int(rng.integers(12)), int(rng.integers(25)))
                      for _ in range(80)})
        g = toy_graph(edges, num_users=12, num_items=25)
        g = graphs.split(g, seed=11)
        graphs.save_snapshot(g, tmp_path / "snap")
        g2 = graphs.load_snapshot(tmp_path / "snap")
        assert g2.num_users == g.num_users
        assert g2.num_items == g.num_items

        def edge_set(gr):
            return {(gr.user_ids[u], gr.item_ids[i], int(t))
                    for u, i, t in zip(gr.edges_u, gr.edges_i, gr.split)}

        assert edge_set(g) == edge_set(g2)

    def test_reload_drops_trainless_users(self, tmp_path):
        g = toy_graph([(0, 0), (1, 1)])
        g.split[1] = TEST  # user 1 has no train edge
        graphs.save_snapshot(g, tmp_path / "snap")
        g2 = graphs.load_snapshot(tmp_path / "snap")
        assert g2.dropped_users == 1
        assert g2.num_edges == 1


class TestInjectProfiles:
    def test_appends_fake_users_as_train(self):
        from gclbench.attack import AttackBudget, MaliciousProfileSet

        g = toy_graph([(0, 0), (0, 1), (1, 2)])
        profiles = MaliciousProfileSet(
            fake_user_ids=["fake_0"], interactions=[[0, 2]],
            generator="random", seed=0,
            budget=AttackBudget(max_fake_users=1, per_user_quota=2))
        pg = graphs.inject_profiles(g, profiles)
        assert pg.num_users == g.num_users + 1
        assert pg.malicious_users == frozenset({2})
        u, i = pg.edges_of(TRAIN)
        assert (2, 0) in set(zip(u.tolist(), i.tolist()))
        assert len(pg.real_users) == g.num_users
