import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtnet import gradcheck
from dtnet.errors import DimensionError
from dtnet.samplers import (
    ScatterResult,
    fill_holes,
    gather_backward,
    gather_forward,
    scatter_backward,
    scatter_forward,
)
from oracles import grid, pixel_grid, tent_weight_matrix


# gather

def test_gather_identity():
    u = np.random.default_rng(0).normal(size=(4, 5, 3))
    np.testing.assert_array_equal(gather_forward(u, grid(pixel_grid(4, 5), 4, 5, 4, 5)), u)


def test_gather_cell_center():
    u = np.array([[1.0, 2.0], [3.0, 4.0]])[..., None]
    assert gather_forward(u, grid([[0.5, 0.5]], 1, 1, 2, 2))[0, 0, 0] == pytest.approx(2.5)


def test_gather_far_outside_is_zero():
    u = np.ones((2, 2, 1))
    assert gather_forward(u, grid([[-3.0, -3.0]], 1, 1, 2, 2))[0, 0, 0] == 0.0


def test_gather_extent_mismatch():
    with pytest.raises(DimensionError):
        gather_forward(np.ones((3, 3, 1)), grid([[0.0, 0.0]], 1, 1, 2, 2))


def test_gather_backward_identity():
    u = np.zeros((3, 3, 2))
    d_u, _ = gather_backward(u, grid(pixel_grid(3, 3), 3, 3, 3, 3), np.ones((3, 3, 2)))
    np.testing.assert_array_equal(d_u, np.ones((3, 3, 2)))


def test_gather_backward_cell_center():
    u = np.zeros((2, 2, 1))
    d_u, _ = gather_backward(u, grid([[0.5, 0.5]], 1, 1, 2, 2), np.ones((1, 1, 1)))
    np.testing.assert_allclose(d_u[..., 0], 0.25)


def test_gather_gradcheck():
    for r in gradcheck.check_gather(np.random.default_rng(11)):
        assert r.passed, (r.name, r.error)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gather_partition_of_unity(seed):
    coords = np.random.default_rng(seed).uniform(0.0, 5.0, size=(20, 2))
    v = gather_forward(np.ones((6, 6, 1)), grid(coords, 1, 20, 6, 6))
    np.testing.assert_allclose(v, 1.0, atol=1e-12)


# scatter

def test_scatter_single_node():
    v = np.array([[[7.0]]])
    res = scatter_forward(v, grid([[2.0, 1.0]], 1, 1, 3, 4), 3, 4)
    assert res.s[1, 2] == 1.0 and res.out[1, 2, 0] == 7.0
    expect_holes = np.ones((3, 4), dtype=bool)
    expect_holes[1, 2] = False
    np.testing.assert_array_equal(res.holes, expect_holes)


def test_scatter_cell_center():
    res = scatter_forward(np.array([[[4.0]]]), grid([[0.5, 0.5]], 1, 1, 2, 2), 2, 2)
    np.testing.assert_allclose(res.s, 0.25)
    np.testing.assert_allclose(res.out[..., 0], 4.0)
    assert not res.holes.any()


def test_scatter_two_points_on_node():
    v = np.array([[[1.0], [3.0]]])
    res = scatter_forward(v, grid([[0.0, 0.0], [0.0, 0.0]], 1, 2, 2, 2), 2, 2)
    assert res.s[0, 0] == 2.0
    assert res.out[0, 0, 0] == 2.0


def test_scatter_out_of_bounds_contributes_nothing():
    res = scatter_forward(np.ones((1, 1, 1)), grid([[5.0, -4.0]], 1, 1, 2, 2), 2, 2)
    assert res.holes.all() and np.all(res.s == 0)


def test_scatter_extent_mismatch():
    with pytest.raises(DimensionError):
        scatter_forward(np.ones((2, 2, 1)), grid(pixel_grid(3, 3), 3, 3, 3, 3), 3, 3)
    with pytest.raises(DimensionError):
        scatter_forward(np.ones((3, 3, 1)), grid(pixel_grid(3, 3), 3, 3, 3, 3), 4, 4)


def test_scatter_backward_single_node():
    v = np.array([[[7.0]]])
    g = grid([[1.0, 1.0]], 1, 1, 3, 3)
    res = scatter_forward(v, g, 3, 3)
    d_u = np.zeros((3, 3, 1))
    d_u[1, 1, 0] = 1.0
    d_v, d_coords = scatter_backward(v, g, res, d_u)
    assert d_v[0, 0, 0] == 1.0
    np.testing.assert_array_equal(d_coords, [[0.0, 0.0]])


def test_scatter_single_source_cell_has_zero_coord_gradient():
    # off a node the single point is still the only source of its four cells,
    # so U == V there and moving it changes nothing: central differences agree
    v = np.array([[[3.0]]])
    coords = np.array([[1.3, 0.6]])
    d_u = np.random.default_rng(0).normal(size=(3, 3, 1))

    def loss():
        return float(np.sum(d_u * scatter_forward(v, grid(coords, 1, 1, 3, 3), 3, 3).out))

    res = scatter_forward(v, grid(coords, 1, 1, 3, 3), 3, 3)
    _, d_coords = scatter_backward(v, grid(coords, 1, 1, 3, 3), res, d_u)
    np.testing.assert_allclose(d_coords, 0.0, atol=1e-12)
    np.testing.assert_allclose(gradcheck.numeric_grad(loss, coords), 0.0, atol=1e-9)


def test_scatter_backward_ignores_holes():
    v = np.array([[[2.0]]])
    g = grid([[0.0, 0.0]], 1, 1, 2, 2)
    res = scatter_forward(v, g, 2, 2)
    d_u = np.zeros((2, 2, 1))
    d_u[1, 1, 0] = 100.0
    d_v, d_coords = scatter_backward(v, g, res, d_u)
    assert d_v[0, 0, 0] == 0.0
    np.testing.assert_array_equal(d_coords, 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_scatter_gradcheck(seed):
    for r in gradcheck.check_scatter(np.random.default_rng(seed)):
        assert r.passed, (r.name, r.error)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), c=st.floats(-100, 100))
def test_scatter_constant_preservation(seed, c):
    coords = np.random.default_rng(seed).uniform(-1.0, 5.0, size=(16, 2))
    res = scatter_forward(np.full((4, 4, 2), c), grid(coords, 4, 4, 5, 5), 5, 5)
    keep = ~res.holes
    np.testing.assert_allclose(res.out[keep], c, atol=1e-12, rtol=0)
    np.testing.assert_array_equal(res.out[res.holes], 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_adjointness_with_brute_force_weights(seed):
    rng = np.random.default_rng(seed)
    coords = rng.uniform(-0.5, 2.5, size=(9, 2))
    w = tent_weight_matrix(coords, 3, 3)
    u = rng.normal(size=(3, 3, 2))
    v = rng.normal(size=(3, 3, 2))
    g = grid(coords, 3, 3, 3, 3)
    np.testing.assert_allclose(gather_forward(u, g).reshape(9, 2), w @ u.reshape(9, 2), atol=1e-10, rtol=0)
    res = scatter_forward(v, g, 3, 3)
    s = w.T @ np.ones(9)
    num = w.T @ v.reshape(9, 2)
    np.testing.assert_allclose(res.s.ravel(), s, atol=1e-10, rtol=0)
    np.testing.assert_allclose((res.out.reshape(9, 2) * res.s.reshape(9, 1)), num, atol=1e-10, rtol=0)


def test_identity_round_trip():
    rng = np.random.default_rng(4)
    u = rng.normal(size=(5, 6, 3))
    g = grid(pixel_grid(5, 6), 5, 6, 5, 6)
    res = scatter_forward(u, g, 5, 6)
    assert not res.holes.any()
    np.testing.assert_array_equal(res.out, u)
    np.testing.assert_array_equal(scatter_forward(gather_forward(u, g), g, 5, 6).out, u)


# hole filling

def _result(out, s):
    out = np.asarray(out, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    return ScatterResult(out[..., None], s, s < 1e-12)


def test_fill_no_holes_passthrough():
    res = _result(np.arange(9.0).reshape(3, 3), np.ones((3, 3)))
    np.testing.assert_array_equal(fill_holes(res), res.out)


def test_fill_constant_neighbours():
    out = np.full((3, 3), 5.0)
    s = np.ones((3, 3))
    out[1, 1], s[1, 1] = 0.0, 0.0
    assert fill_holes(_result(out, s))[1, 1, 0] == 5.0


def test_fill_weighted_mean():
    out = np.array([[2.0, 0.0, 6.0]])
    s = np.array([[1.0, 0.0, 3.0]])
    filled = fill_holes(_result(out, s))
    assert filled[0, 1, 0] == pytest.approx(5.0)
    assert filled[0, 0, 0] == 2.0 and filled[0, 2, 0] == 6.0


def test_fill_expands_over_passes():
    out = np.zeros((1, 6))
    s = np.zeros((1, 6))
    out[0, 0], s[0, 0] = 3.0, 1.0
    filled = fill_holes(_result(out, s))
    np.testing.assert_allclose(filled[0, :, 0], 3.0)


def test_fill_all_holes_zero():
    filled = fill_holes(_result(np.zeros((3, 3)), np.zeros((3, 3))))
    np.testing.assert_array_equal(filled, 0.0)
