import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fatalnowcast.basis import (
    BasisError,
    BasisKind,
    BasisSpec,
    DesignBlock,
    bspline_design,
    raw_bspline,
    tensor_design,
)

TENSOR = BasisSpec(kind=BasisKind.TENSOR_2D, num_basis=6)


def grid_points(n=12, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(6, 15, n * n), rng.uniform(47, 55, n * n)])


def is_psd(S):
    w = np.linalg.eigvalsh(S)
    return w.min() >= -1e-10 * max(w.max(), 1.0)


def test_partition_of_unity():
    x = np.linspace(0, 1, 101)
    B = raw_bspline(x, 0.0, 1.0, 10)
    assert np.allclose(B.sum(axis=1), 1.0, atol=1e-12)


def test_constant_reproduced():
    x = np.linspace(0, 10, 60)
    block = bspline_design(x, BasisSpec(num_basis=10))
    X = np.hstack([np.ones((60, 1)), block.X])
    y = np.full(60, 3.7)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    assert np.allclose(X @ coef, 3.7, atol=1e-10)


def test_linear_in_penalty_null_space():
    x = np.linspace(0, 10, 200)
    B = raw_bspline(x, 0.0, 10.0, 10)
    v, *_ = np.linalg.lstsq(B, 2.0 * x - 1.0, rcond=None)
    block = bspline_design(x, BasisSpec(num_basis=10))
    assert v @ block.raw_penalty @ v < 1e-8


def test_bilinear_in_tensor_penalty_null_space():
    s = grid_points()
    block = tensor_design(s, TENSOR)
    B = block.raw(s)
    v, *_ = np.linalg.lstsq(B, 0.3 * s[:, 0] - 0.2 * s[:, 1] + 0.05 * s[:, 0] * s[:, 1], rcond=None)
    assert v @ block.raw_penalty @ v < 1e-8


def test_tensor_constant_surface():
    s = grid_points()
    block = tensor_design(s, TENSOR)
    X = np.hstack([np.ones((len(s), 1)), block.X])
    coef, *_ = np.linalg.lstsq(X, np.full(len(s), -1.5), rcond=None)
    assert np.allclose(X @ coef, -1.5, atol=1e-10)


def test_same_centroid_same_row():
    s = grid_points()
    block = tensor_design(s, TENSOR)
    rows = block.evaluate(np.vstack([s[3], s[3]]))
    assert np.array_equal(rows[0], rows[1])


@pytest.mark.parametrize("kind", ["1d", "2d"])
def test_penalty_symmetric_psd(kind):
    block = bspline_design(np.linspace(0, 1, 50), BasisSpec()) if kind == "1d" else tensor_design(grid_points(), TENSOR)
    assert np.allclose(block.S, block.S.T, atol=0)
    assert is_psd(block.S)
    assert block.X.shape[1] == block.S.shape[0] == block.ncols


@given(st.integers(0, 2**32 - 1))
def test_sum_to_zero_any_beta(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 5, 80)
    for block in (bspline_design(x, BasisSpec(num_basis=8)), tensor_design(grid_points(9, seed % 7), TENSOR)):
        beta = rng.normal(size=block.ncols)
        f = block.X @ beta
        assert abs(f.sum()) <= 1e-8 * max(1.0, np.abs(f).sum())


@given(st.integers(0, 2**32 - 1))
def test_penalty_invariant_under_reparametrization(seed):
    rng = np.random.default_rng(seed)
    block = bspline_design(rng.uniform(0, 1, 40), BasisSpec(num_basis=9))
    beta = rng.normal(size=block.ncols)
    raw = block.constraint @ beta
    a = beta @ block.S @ beta
    b = raw @ block.raw_penalty @ raw
    assert abs(a - b) <= 1e-10 * max(abs(b), 1e-300)


def test_prediction_uses_fit_knots():
    x = np.linspace(0, 10, 40)
    block = bspline_design(x, BasisSpec(num_basis=10))
    assert np.allclose(block.evaluate(x), block.X, atol=1e-14)
    back = DesignBlock.from_dict(block.to_dict(), x=x)
    assert np.allclose(back.X, block.X, atol=1e-14)


def test_outside_domain_rejected():
    block = bspline_design(np.linspace(0, 1, 20), BasisSpec())
    with pytest.raises(BasisError):
        block.evaluate(np.array([1.5]))


def test_k_too_small():
    with pytest.raises(BasisError):
        BasisSpec(num_basis=3, degree=3)


def test_too_few_locations():
    s = grid_points()[:4]
    with pytest.raises(BasisError, match="distinct"):
        tensor_design(s, TENSOR)


def test_collinear_locations():
    t = np.linspace(0, 1, 30)
    with pytest.raises(BasisError, match="collinear"):
        tensor_design(np.column_stack([t, 2 * t]), TENSOR)
