"""ROC sweep, the five AUC statistics, and the Mann-Whitney oracle."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hutd import evaluate
from hutd.evaluate import (
    EvalError,
    auc,
    auc_oa,
    auc_oracle_check,
    auc_snpr,
    mann_whitney_auc,
    roc,
)
from hutd.scene import GroundTruth


def _gt(mask_flat, shape):
    return GroundTruth(np.array(mask_flat, dtype=bool).reshape(shape))


def test_roc_enumerated_small_case():
    # one target at 0.7, background at 0.4 and 0.9: thresholds inf, .9, .7, .4
    scores = np.array([[0.7, 0.4, 0.9]])
    gt = _gt([1, 0, 0], (1, 3))
    data = roc(scores, gt)
    points = list(zip(data.pf.tolist(), data.pd.tolist()))
    assert points == [(0.0, 0.0), (0.5, 0.0), (0.5, 1.0), (1.0, 1.0)]
    assert data.auc_pd_pf == 0.5
    assert data.auc_pd_pf == mann_whitney_auc(scores, gt)


def test_roc_perfect_separation():
    scores = np.array([[0.9, 0.8, 0.1, 0.2]])
    gt = _gt([1, 1, 0, 0], (1, 4))
    data = roc(scores, gt)
    assert any(f == 0.0 and d == 1.0 for f, d in zip(data.pf, data.pd))
    assert data.auc_pd_pf == 1.0


def test_roc_all_tied_scores():
    scores = np.full((2, 3), 0.42)
    gt = _gt([1, 0, 0, 0, 1, 0], (2, 3))
    data = roc(scores, gt)
    assert len(data.thresholds) == 2  # +inf sentinel plus the single value
    assert data.auc_pd_pf == 0.5
    assert data.auc_pd_tau == 1.0 and data.auc_pf_tau == 1.0


def test_roc_tied_scores_share_threshold():
    scores = np.array([[0.5, 0.5, 0.2, 0.8]])
    gt = _gt([1, 0, 0, 0], (1, 4))
    data = roc(scores, gt)
    assert len(data.thresholds) == 4  # inf, 0.8, 0.5, 0.2


def test_roc_degenerate_masks():
    scores = np.ones((1, 3))
    with pytest.raises(EvalError):
        roc(scores, _gt([1, 1, 1], (1, 3)))
    with pytest.raises(EvalError):
        roc(scores, _gt([0, 0, 0], (1, 3)))


def test_auc_hand_geometry():
    assert auc([0.0, 0.0, 1.0], [0.0, 1.0, 1.0]) == 1.0  # unit step
    assert auc([0.0, 1.0], [0.0, 1.0]) == 0.5  # diagonal
    assert auc([0.0, 0.5, 1.0], [0.0, 1.0, 1.0]) == 0.75  # trapezoid
    with pytest.raises(EvalError):
        auc([0.0], [1.0])
    with pytest.raises(EvalError):
        auc([1.0, 0.0], [0.0, 1.0])


def test_auc_oa_values():
    np.testing.assert_allclose(auc_oa(0.671, 0.258, 0.250), 0.679)
    assert auc_oa(1.0, 1.0, 0.0) == 2.0
    assert auc_oa(0.5, 0.0, 0.0) == 0.5


def test_auc_snpr_values():
    np.testing.assert_allclose(auc_snpr(0.710, 0.209), 3.397129186602871)
    np.testing.assert_allclose(auc_snpr(0.258, 0.250), 1.032)
    assert auc_snpr(0.0, 0.5) == 0.0
    assert auc_snpr(0.3, 0.0) == math.inf


def test_oracle_agreement_random_sets():
    for trial in range(50):
        rng = np.random.default_rng([5, trial])
        n = 200
        mask = rng.random(n) < 0.3
        if mask.all() or not mask.any():
            continue
        scores = rng.normal(size=n)
        if trial % 2:  # tie-heavy variant
            scores = np.round(scores * 3) / 3
        trap, pair = auc_oracle_check(scores.reshape(4, 50), _gt(mask, (4, 50)))
        assert abs(trap - pair) < 1e-9


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), slope=st.floats(0.1, 5.0), cube=st.booleans())
def test_monotone_transform_invariance(seed, slope, cube):
    rng = np.random.default_rng(seed)
    n = 60
    mask = np.zeros(n, bool)
    mask[: n // 4] = True
    scores = rng.normal(size=n)
    gt = _gt(mask, (6, 10))
    base = roc(scores.reshape(6, 10), gt)
    transformed = slope * scores + 1.0
    if cube:
        transformed = transformed**3  # odd power: strictly increasing
    after = roc(transformed.reshape(6, 10), gt)
    assert np.array_equal(base.pd, after.pd)
    assert np.array_equal(base.pf, after.pf)
    assert base.auc_pd_pf == after.auc_pd_pf


def test_report_emission(tmp_path):
    rng = np.random.default_rng(7)
    gt = _gt(rng.random(24) < 0.25, (4, 6))
    maps = {
        "sam": rng.normal(size=(4, 6)),
        "cem-raw": rng.normal(size=(4, 6)),
    }
    paths = evaluate.report(maps, gt, tmp_path)
    text = (tmp_path / "auc_report.csv").read_text().splitlines()
    assert text[0] == evaluate.REPORT_HEADER
    assert len(text) == 3
    assert text[1].startswith("sam,")
    roc_text = (tmp_path / "roc_sam.csv").read_text().splitlines()
    assert roc_text[0] == "threshold,pd,pf"

    again = tmp_path / "again"
    evaluate.report(maps, gt, again)
    assert (again / "auc_report.csv").read_bytes() == (tmp_path / "auc_report.csv").read_bytes()

    with pytest.raises(EvalError):
        evaluate.report({}, gt, tmp_path)


def test_report_dimension_mismatch(tmp_path):
    gt = _gt([1, 0, 0, 0], (2, 2))
    with pytest.raises(EvalError):
        evaluate.report({"sam": np.ones((3, 3))}, gt, tmp_path)
