import os

import numpy as np
import pytest

from evofg.graph import (
    EGO_RADIUS,
    Graph,
    GraphFormatError,
    ego_graph,
    gen_synthetic,
    k_hop_set,
    load_graph,
    load_graph_dir,
    save_graph,
)
from helpers import complete_graph, path_graph, random_graph, star_graph


def write_graph_files(tmp_path, edge_text, feat_text, label_text):
    e = tmp_path / "edges.txt"
    f = tmp_path / "features.txt"
    l = tmp_path / "labels.txt"
    e.write_text(edge_text)
    f.write_text(feat_text)
    l.write_text(label_text)
    return str(e), str(f), str(l)


class TestLoading:
    def test_minimal_graph(self, tmp_path):
        paths = write_graph_files(
            tmp_path, "0\t1\n", "2 3\n1 2 3\n4 5 6\n", "0\n1\n"
        )
        g = load_graph(*paths, name="mini")
        assert g.num_nodes == 2
        assert list(g.neighbors(0)) == [1]
        assert list(g.neighbors(1)) == [0]
        assert g.labels.tolist() == [0, 1]
        assert g.features.shape == (2, 3)

    def test_directed_duplicates_symmetrized(self, tmp_path):
        paths = write_graph_files(
            tmp_path, "0\t1\n1\t0\n# comment\n", "2 1\n0\n1\n", "0\n1\n"
        )
        g = load_graph(*paths)
        assert g.num_edges == 1

    def test_out_of_range_edge_names_line(self, tmp_path):
        paths = write_graph_files(
            tmp_path, "0\t1\n0\t5\n", "3 1\n0\n1\n2\n", "0\n0\n1\n"
        )
        with pytest.raises(GraphFormatError, match=":2"):
            load_graph(*paths)

    def test_malformed_edge_line(self, tmp_path):
        paths = write_graph_files(tmp_path, "0 1 2\n", "2 1\n0\n1\n", "0\n1\n")
        with pytest.raises(GraphFormatError, match=":1"):
            load_graph(*paths)

    def test_feature_row_count_mismatch(self, tmp_path):
        paths = write_graph_files(tmp_path, "0\t1\n", "3 1\n0\n1\n", "0\n1\n0\n")
        with pytest.raises(GraphFormatError):
            load_graph(*paths)

    def test_self_loops_dropped_with_warning(self, tmp_path, caplog):
        paths = write_graph_files(
            tmp_path, "0\t0\n0\t1\n1\t1\n", "2 1\n0\n1\n", "0\n1\n"
        )
        with caplog.at_level("WARNING"):
            g = load_graph(*paths)
        assert g.num_edges == 1
        assert any("2 self-loop" in r.message for r in caplog.records)

    def test_labels_optional(self, tmp_path):
        e, f, _ = write_graph_files(tmp_path, "0\t1\n", "2 1\n0\n1\n", "0\n1\n")
        g = load_graph(e, f, None)
        assert g.labels is None

    def test_non_binary_label_rejected(self, tmp_path):
        paths = write_graph_files(tmp_path, "0\t1\n", "2 1\n0\n1\n", "0\n2\n")
        with pytest.raises(GraphFormatError):
            load_graph(*paths)


class TestNeighborhoods:
    def test_k_hop_on_path(self):
        g = path_graph(3)
        assert k_hop_set(g, 0, 2).tolist() == [2]

    def test_k_hop_triangle_empty_shell(self):
        g = complete_graph(3)
        assert k_hop_set(g, 0, 2).tolist() == []

    def test_k_hop_star_leaves(self):
        g = star_graph(4)
        assert k_hop_set(g, 0, 1).tolist() == [1, 2, 3, 4]

    def test_ego_isolated_node(self):
        g = Graph(3, [(0, 1)], np.zeros((3, 2)), None)
        sub, mapping = ego_graph(g, 2)
        assert sub.num_nodes == 1
        assert sub.num_edges == 0
        assert mapping == {2: 0}

    def test_ego_path_endpoint_reaches_radius(self):
        g = path_graph(10)
        sub, mapping = ego_graph(g, 0)
        assert sub.num_nodes == EGO_RADIUS + 1
        assert sub.num_edges == EGO_RADIUS
        assert mapping[0] == 0

    def test_ego_complete_graph_is_whole_graph(self):
        g = complete_graph(5)
        sub, _ = ego_graph(g, 2)
        assert sub.num_nodes == 5
        assert sub.num_edges == 10

    def test_shells_partition_ego(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            g = random_graph(rng, int(rng.integers(5, 25)), p=0.15)
            v = int(rng.integers(g.num_nodes))
            sub, mapping = ego_graph(g, v)
            shells = [set(k_hop_set(g, v, k).tolist()) for k in range(1, EGO_RADIUS + 1)]
            for i in range(len(shells)):
                for j in range(i + 1, len(shells)):
                    assert not (shells[i] & shells[j])
            union = {v} | set().union(*shells)
            assert union == set(mapping.keys())


class TestSynthetic:
    def test_deterministic_given_seed(self):
        a = gen_synthetic(50, 6, 0.1, structure_seed=9, planted_kind="mixed")
        b = gen_synthetic(50, 6, 0.1, structure_seed=9, planted_kind="mixed")
        assert a.equals(b)

    def test_anomaly_count_floor(self):
        g = gen_synthetic(400, 8, 0.05, structure_seed=3, planted_kind="attribute")
        assert int(g.labels.sum()) == 20

    def test_attribute_anomalies_have_larger_norm(self):
        g = gen_synthetic(300, 16, 0.08, structure_seed=4, planted_kind="attribute")
        anom = np.linalg.norm(g.features[g.labels == 1], axis=1).mean()
        norm = np.linalg.norm(g.features[g.labels == 0], axis=1).mean()
        assert anom > norm

    def test_invalid_rate_rejected(self):
        for rate in (0.0, 0.5, -0.1):
            with pytest.raises(ValueError):
                gen_synthetic(50, 4, rate, 0, "mixed")

    def test_structural_anomalies_have_low_degree(self):
        g = gen_synthetic(200, 8, 0.1, structure_seed=5, planted_kind="structural")
        assert g.degrees[g.labels == 1].mean() < g.degrees[g.labels == 0].mean()

    def test_label_invariants(self):
        g = gen_synthetic(100, 4, 0.2, structure_seed=6, planted_kind="mixed")
        assert 1 <= g.labels.sum() < g.num_nodes / 2


class TestRoundTrip:
    def test_save_load_identical(self, tmp_path):
        g = gen_synthetic(60, 5, 0.1, structure_seed=11, planted_kind="mixed")
        save_graph(g, str(tmp_path / "g"))
        g2 = load_graph_dir(str(tmp_path / "g"))
        assert g.equals(g2)

    def test_save_is_byte_deterministic(self, tmp_path):
        g = gen_synthetic(40, 3, 0.1, structure_seed=12, planted_kind="attribute")
        save_graph(g, str(tmp_path / "a"))
        save_graph(g, str(tmp_path / "b"))
        for fname in ("edges.txt", "features.txt", "labels.txt"):
            a = (tmp_path / "a" / fname).read_bytes()
            b = (tmp_path / "b" / fname).read_bytes()
            assert a == b

    def test_unlabeled_dir_load(self, tmp_path):
        g = gen_synthetic(30, 3, 0.1, structure_seed=13, planted_kind="mixed")
        save_graph(g, str(tmp_path / "g"))
        g2 = load_graph_dir(str(tmp_path / "g"), with_labels=False)
        assert g2.labels is None
        assert np.array_equal(g2.features, g.features)


def test_graph_arrays_immutable():
    g = path_graph(4)
    with pytest.raises(ValueError):
        g.features[0, 0] = 5.0
    with pytest.raises(ValueError):
        g.edges[0, 0] = 3
