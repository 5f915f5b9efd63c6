import numpy as np
import pytest
from hypothesis import given, strategies as st

from symbridge.errors import ConfigError, DomainError
from symbridge.grid import DensityOnGrid, Grid, GridFunction, Partition, values_of


def test_grid_nodes_are_interior_and_uniform():
    g = Grid.box(0.0, 1.0, 4)
    np.testing.assert_allclose(g.points[:, 0], [0.2, 0.4, 0.6, 0.8])
    assert g.cell_volume == pytest.approx(0.2)


def test_grid_row_major_order():
    g = Grid.box([0, 0], [1, 2], [2, 3])
    pts = g.points
    assert pts.shape == (6, 2)
    # last axis varies fastest
    np.testing.assert_allclose(pts[:3, 0], pts[0, 0])
    np.testing.assert_allclose(pts[:3, 1], [0.5, 1.0, 1.5])


@pytest.mark.parametrize("kwargs", [
    dict(lo=1.0, hi=0.0, n=3),
    dict(lo=0.0, hi=1.0, n=0),
    dict(lo=[0, 0, 0, 0], hi=[1, 1, 1, 1], n=2),
])
def test_grid_rejects_bad_boxes(kwargs):
    with pytest.raises(ConfigError):
        Grid.box(**kwargs)


@given(st.integers(1, 30), st.floats(0.1, 5.0))
def test_node_index_recovers_nodes(n, length):
    g = Grid.box(0.0, length, n)
    np.testing.assert_array_equal(g.node_index(g.points), np.arange(n))
    assert g.node_index([[0.0]])[0] == 0
    assert g.node_index([[length]])[0] == n - 1
    assert g.node_index([[-0.1]])[0] == -1


def test_grid_dict_round_trip():
    g = Grid.box([0, -1], [2, 1], [5, 7])
    assert Grid.from_dict(g.to_dict()) == g


def test_grid_function_save_load(tmp_path):
    g = Grid.box(0.0, 1.0, 9)
    f = GridFunction.from_callable(g, np.cos)
    f.save(tmp_path / "f.json")
    back = GridFunction.load(tmp_path / "f.json")
    assert back.grid == g
    np.testing.assert_array_equal(back.values, f.values)


def test_ground_state_density_integrates_to_one():
    g = Grid.box([0, 0], [1, 2], [30, 40])
    p = DensityOnGrid.ground_state(g)
    assert p.integral() == pytest.approx(1.0, abs=1e-12)


def test_density_validation():
    g = Grid.box(0.0, 1.0, 10)
    with pytest.raises(DomainError):
        DensityOnGrid(g, np.ones(10))
    with pytest.raises(DomainError):
        DensityOnGrid.normalized(g, np.zeros(10))


def test_values_of_checks_size():
    g = Grid.box(0.0, 1.0, 10)
    assert values_of(2.0, g).shape == (10,)
    with pytest.raises(ConfigError):
        values_of(np.ones(3), g)


@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=50), st.integers(1, 6))
def test_partition_labels_cover_box(xs, k):
    part = Partition.uniform(0.0, 1.0, k)
    labels = part.labels(np.array(xs)[:, None])
    assert np.all((labels >= 0) & (labels < k))
    lo = np.array([part.bounds(r)[0][0] for r in labels])
    hi = np.array([part.bounds(r)[1][0] for r in labels])
    assert np.all((lo <= xs) & (np.array(xs) <= hi))


def test_partition_edges_and_outside():
    part = Partition.uniform(0.0, 1.0, 2)
    np.testing.assert_array_equal(part.labels(np.array([[0.0], [0.5], [1.0], [1.5]])), [0, 1, 1, -1])


def test_partition_from_grid_owns_every_node_once():
    g = Grid.box([0, 0], [1, 1], [7, 5])
    part = Partition.from_grid(g, 2)
    labels = part.grid_labels(g)
    assert np.all(labels >= 0)
    np.testing.assert_allclose(part.volumes.sum(), 1.0)
    np.testing.assert_allclose(part.weights.sum(), 1.0)


def test_partition_rejects_zero_weight():
    with pytest.raises(ConfigError):
        Partition.uniform(0.0, 1.0, 2, weights=[1.0, 0.0])


def test_partition_dict_round_trip():
    part = Partition.uniform([0, 0], [1, 2], [2, 3], weights=np.arange(1, 7))
    back = Partition.from_dict(part.to_dict())
    np.testing.assert_allclose(back.weights, part.weights)
    for a, b in zip(back.edges, part.edges):
        np.testing.assert_allclose(a, b)
