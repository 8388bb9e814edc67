import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tumorscope import harness as H


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-10, 10)))
@settings(max_examples=50)
def test_finite_diff_sum_is_ones(x):
    np.testing.assert_allclose(H.finite_diff(lambda v: v.sum(), x.copy()), np.ones_like(x), atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_finite_diff_half_square_norm(seed):
    x = np.random.default_rng(seed).normal(size=(3, 4))
    np.testing.assert_allclose(H.finite_diff(lambda v: 0.5 * (v ** 2).sum(), x.copy()), x, atol=1e-8)


def test_finite_diff_restores_input():
    x = np.random.default_rng(0).normal(size=5)
    before = x.copy()
    H.finite_diff(lambda v: (v ** 3).sum(), x)
    assert np.array_equal(x, before)


def test_finite_diff_errors():
    with pytest.raises(ValueError):
        H.finite_diff(np.sum, np.ones(2), eps=0)
    with pytest.raises(TypeError):
        H.finite_diff(np.sum, np.ones(2, np.float32))
    with pytest.raises(FloatingPointError):
        H.finite_diff(lambda v: np.inf, np.ones(2))


def test_rel_error():
    assert H.rel_error(np.zeros(3), np.zeros(3)) == 0.0
    assert H.rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.2])) == pytest.approx(0.2 / 2.2)


def test_oracle_report_pass_iff_within_tolerance():
    assert H.OracleReport("op", 1e-5, 1e-4, 0).passed
    assert H.OracleReport("op", 1e-4, 1e-4, 0).passed
    assert not H.OracleReport("op", 2e-4, 1e-4, 0).passed
    assert str(H.OracleReport("conv", 1e-9, 1e-4, 3)).startswith("[PASS] conv")


def test_blob_iou_mask_as_heatmap():
    mask = np.zeros((10, 10), bool)
    mask[2:6, 3:8] = True   # 20 pixels, area ratio 0.2
    assert H.blob_iou(mask.astype(float), mask, 0.2) == 1.0
    assert H.blob_iou(mask.astype(float), mask, 0.4) == pytest.approx(0.5)


def test_blob_iou_disjoint():
    heat = np.zeros((10, 10))
    heat[:2] = 1.0
    mask = np.zeros((10, 10), bool)
    mask[8:] = True
    assert H.blob_iou(heat, mask, 0.2) == 0.0


def test_blob_iou_errors():
    with pytest.raises(ValueError):
        H.blob_iou(np.zeros((3, 3)), np.zeros((3, 4)))
    with pytest.raises(ValueError):
        H.blob_iou(np.zeros((3, 3)), np.zeros((3, 3)), 1.0)


def test_top_fraction_mask_count():
    heat = np.random.default_rng(0).random((32, 32))
    m = H.top_fraction_mask(heat, 0.2)
    assert m.sum() == round(0.2 * 1024)
    assert heat[m].min() >= heat[~m].max()


def test_count_confusion():
    assert H.count_confusion([1, 1, 0, 0], [1, 0, 1, 0]) == {"tp": 1, "tn": 1, "fp": 1, "fn": 1}


def test_gini_bruteforce_perfect_split():
    score, feature, threshold = H.gini_split_bruteforce([[0.0, 5.0], [1.0, 5.0], [2.0, 5.0], [3.0, 5.0]],
                                                       [0, 0, 1, 1])
    assert (score, feature, threshold) == (0.0, 0, 1.5)


def test_harness_has_no_engine_dependency():
    import ast
    import inspect

    tree = ast.parse(inspect.getsource(H))
    imported = {n.module for n in ast.walk(tree) if isinstance(n, ast.ImportFrom) and n.module}
    imported |= {a.name for n in ast.walk(tree) if isinstance(n, ast.Import) for a in n.names}
    assert not any("engine" in m or "classifiers" in m or "metrics" in m for m in imported)
