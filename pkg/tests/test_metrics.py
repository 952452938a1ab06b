import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, strategies as st

from fusionseg.errors import EmptyMatrix, LabelOutOfRange
from fusionseg.metrics import (CLOUDS, REPORT_SCHEMA, SNOW, ConfusionMatrix, compare_with_published, confusion_matrix,
                               f1, fixture_name, format_report, harmonic, load_fixture, micro_f1, overall_accuracy, pair_discrimination,
                               precision_recall, published_matrix, report)


def test_convention_rows_predicted():
    cm = confusion_matrix(np.array([0]), np.array([1]))
    assert cm.counts[0, 1] == 1 and cm.total == 1


def test_diagonal_class_two():
    cm = confusion_matrix(np.full(100, 2), np.full(100, 2))
    expect = np.zeros((4, 4), int)
    expect[2, 2] = 100
    np.testing.assert_array_equal(cm.counts, expect)
    assert overall_accuracy(cm) == 1.0


@given(st.lists(st.integers(0, 3), min_size=1, max_size=60), st.integers(0, 59))
def test_accumulate_is_additive(labels, cut):
    ref = np.array(labels)
    pred = ref[::-1].copy()
    cut = min(cut, len(ref))
    a = confusion_matrix(pred[:cut], ref[:cut]) if cut else ConfusionMatrix()
    b = confusion_matrix(pred[cut:], ref[cut:]) if cut < len(ref) else ConfusionMatrix()
    np.testing.assert_array_equal(a.merge(b).counts, confusion_matrix(pred, ref).counts)


def test_ignore_and_range():
    cm = confusion_matrix(np.array([0, 1, 2]), np.array([0, 255, 2]))
    assert cm.total == 2
    with pytest.raises(LabelOutOfRange):
        confusion_matrix(np.array([4]), np.array([0]))


def test_absent_class_gives_none():
    cm = confusion_matrix(np.array([0, 1]), np.array([0, 1]))
    assert precision_recall(cm, 3) == (None, None)
    assert f1(cm, 3) is None
    with pytest.raises(EmptyMatrix):
        overall_accuracy(ConfusionMatrix())


@given(st.floats(0.01, 1.0))
def test_harmonic_fixed_point(p):
    assert harmonic(p, p) == pytest.approx(p)


def test_perfect_snow_clouds_micro():
    cm = confusion_matrix(np.array([0, 0, 1]), np.array([0, 0, 1]))
    assert micro_f1(cm) == (1.0, 1.0, 1.0)


def test_micro_pools_counts_by_hand():
    C = np.array([[50, 10, 0, 5], [20, 30, 0, 0], [0, 0, 9, 1], [0, 5, 1, 9]])
    cm = ConfusionMatrix(C)
    p, r, af = micro_f1(cm)
    assert p == pytest.approx(80 / 115)
    assert r == pytest.approx(80 / 115)
    assert af == pytest.approx(80 / 115)


def test_pair_discrimination_chance():
    # predict everything as clouds: accuracy equals the cloud share, chance likewise
    cm = ConfusionMatrix(np.array([[70, 30, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]))
    acc, chance = pair_discrimination(cm, CLOUDS, SNOW)
    assert acc == pytest.approx(0.7) and chance == pytest.approx(0.7)


@pytest.mark.parametrize("clf,oa", [("cloudsnet", 0.9431), ("rf", 0.6102)])
def test_published_oa(clf, oa):
    assert overall_accuracy(published_matrix(clf)) == pytest.approx(oa, abs=5e-4)


@pytest.mark.parametrize("clf", ["cloudsnet", "fcn_vnir", "fcn_swir", "rf"])
def test_rebuilt_counts_keep_column_totals(clf):
    # rounding each cell can move a column total by at most a couple of pixels
    cm = published_matrix(clf)
    totals = load_fixture(fixture_name(clf))
    assert np.abs(cm.counts.sum(axis=0) - totals["column_totals"]).max() <= 2


def test_published_cloudsnet_scores():
    cm = published_matrix("cloudsnet")
    p, r = precision_recall(cm, CLOUDS)
    assert p == pytest.approx(0.9845, abs=5e-4)
    assert r == pytest.approx(0.9690, abs=5e-4)
    assert f1(cm, CLOUDS) == pytest.approx(0.9767, abs=5e-4)
    assert f1(cm, SNOW) == pytest.approx(0.9251, abs=5e-4)
    pm, rm, af = micro_f1(cm)
    assert (pm, rm, af) == pytest.approx((0.9733, 0.9490, 0.9610), abs=5e-4)


def test_published_other_scores():
    assert precision_recall(published_matrix("fcn_vnir"), CLOUDS)[1] == pytest.approx(0.8285, abs=5e-4)
    assert micro_f1(published_matrix("fcn_swir"))[2] == pytest.approx(0.9356, abs=5e-4)


def test_every_published_score_reproduced():
    rows = compare_with_published(0.05)
    assert len(rows) == 64
    bad = [r for r in rows if not r[4]]
    assert not bad, bad


def test_column_percentages_match_fixture():
    fx = load_fixture("confusion_cloudsnet")
    cm = published_matrix("cloudsnet")
    np.testing.assert_allclose(cm.column_percentages(), fx["column_percentages"], atol=0.01)


def test_report_schema_and_json_roundtrip():
    rep = report(published_matrix("cloudsnet"))
    jsonschema.validate(rep, REPORT_SCHEMA)
    back = json.loads(json.dumps(rep))
    jsonschema.validate(back, REPORT_SCHEMA)
    assert back == rep
    for name in ("clouds", "snow", "shadows", "rest"):
        assert set(back["per_class"][name]) == {"precision", "recall", "f1"}
    assert "94.31" in format_report(rep)


def test_empty_report():
    rep = report(ConfusionMatrix())
    jsonschema.validate(rep, REPORT_SCHEMA)
    assert rep["overall_accuracy"] is None
    assert all(v is None for pc in rep["per_class"].values() for v in pc.values())
    assert all(v is None for v in rep["clouds_and_snow"].values())
    format_report(rep)
