import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scmmsb.network import (
    DynamicNetwork,
    MalformedInputError,
    load_snapshots,
    neighbors,
    write_snapshots,
)


def _write(tmp_path, text):
    path = tmp_path / "edges.tsv"
    path.write_text(text, encoding="utf-8")
    return path


def test_load_basic(tmp_path):
    net = load_snapshots(_write(tmp_path, "0 1 2\n1 0 1"), num_nodes=3, num_steps=2)
    assert net.snapshots == (frozenset({(1, 2)}), frozenset({(0, 1)}))


def test_load_normalizes_and_skips_comments(tmp_path):
    net = load_snapshots(_write(tmp_path, "# hdr\n\n0 2 1\n"), 3, 1)
    assert net.snapshots[0] == {(1, 2)}


def test_self_loop_rejected(tmp_path):
    with pytest.raises(MalformedInputError, match="line 1.*self-loop"):
        load_snapshots(_write(tmp_path, "0 5 5"), 6, 1)


def test_time_out_of_range(tmp_path):
    with pytest.raises(MalformedInputError, match="line 1: time 3"):
        load_snapshots(_write(tmp_path, "3 0 1"), 3, 2)


def test_node_out_of_range(tmp_path):
    with pytest.raises(MalformedInputError, match="line 2"):
        load_snapshots(_write(tmp_path, "0 0 1\n0 0 9\n"), 3, 1)


@pytest.mark.parametrize("text", ["0 1 2\n0 1 2\n", "0 1 2\n0 2 1\n"])
def test_duplicates_rejected(tmp_path, text):
    with pytest.raises(MalformedInputError, match="line 2: duplicate"):
        load_snapshots(_write(tmp_path, text), 3, 1)


def test_garbage_line(tmp_path):
    with pytest.raises(MalformedInputError, match="line 1"):
        load_snapshots(_write(tmp_path, "0 1 x\n"), 3, 1)


def test_neighbors_examples():
    net = DynamicNetwork.from_edges(4, [[(0, 1), (1, 2)], [(0, 1), (0, 2), (1, 2)]])
    assert neighbors(net, 1, 0) == {0, 2}
    assert neighbors(net, 3, 0) == set()
    assert neighbors(net, 0, 1) == {1, 2}
    with pytest.raises(IndexError):
        neighbors(net, 0, 2)


def test_invariants_enforced():
    with pytest.raises(MalformedInputError):
        DynamicNetwork(1, (frozenset(),))
    with pytest.raises(MalformedInputError):
        DynamicNetwork(3, ())
    with pytest.raises(MalformedInputError):
        DynamicNetwork(3, (frozenset({(2, 1)}),))


def test_mean_operator_rows():
    net = DynamicNetwork.from_edges(3, [[(0, 1), (0, 2)]])
    W = net.mean_operator(0).toarray()
    np.testing.assert_allclose(W, [[0, 0.5, 0.5], [1, 0, 0], [1, 0, 0]])


def test_labels_follow_pair_order():
    net = DynamicNetwork.from_edges(4, [[(2, 3), (0, 2)]])
    iu, ju = net.pair_index
    linked = {(int(a), int(b)) for a, b, y in zip(iu, ju, net.labels[0]) if y}
    assert linked == {(2, 3), (0, 2)}


networks = st.integers(2, 9).flatmap(
    lambda n: st.lists(
        st.sets(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))
                .filter(lambda e: e[0] != e[1]).map(lambda e: (min(e), max(e))), max_size=20),
        min_size=1, max_size=4,
    ).map(lambda snaps: DynamicNetwork.from_edges(n, snaps))
)


@given(networks)
def test_neighbors_symmetric(net):
    for t in range(net.num_steps):
        for p in range(net.num_nodes):
            for q in neighbors(net, p, t):
                assert p in neighbors(net, q, t)


@given(networks)
def test_degree_sum(net):
    for t in range(net.num_steps):
        assert sum(len(neighbors(net, p, t)) for p in range(net.num_nodes)) == 2 * len(net.snapshots[t])
        assert net.degrees[t].sum() == 2 * len(net.snapshots[t])


@settings(max_examples=50)
@given(networks)
def test_round_trip(tmp_path_factory, net):
    path = tmp_path_factory.mktemp("rt") / "net.tsv"
    write_snapshots(net, path, header="round trip")
    assert load_snapshots(path, net.num_nodes, net.num_steps) == net
