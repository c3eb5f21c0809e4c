import json
import math

import pytest

from geounify.errors import DatasetError, MetricInvariantError
from geounify.metrics import (
    INF,
    EvalReport,
    GeoTag,
    GroundTruthLabel,
    assert_invariants,
    build_report,
    hit_rate,
    localization_recall,
    mean_median,
    meter_error,
    recall_at_k,
)


def _labels():
    return {
        "q1": GroundTruthLabel("q1", ("a",), ("b",), (10, 10)),
        "q2": GroundTruthLabel("q2", ("c",), (), (10, 10)),
        "q3": GroundTruthLabel("q3", ("d",), ("a", "b", "c"), (10, 10)),
    }


RANKINGS = {"q1": ["b", "a", "c"], "q2": ["c", "a", "b"], "q3": ["a", "b", "d"]}


# ---------------- retrieval ----------------
def test_recall_at_k():
    labels = _labels()
    assert recall_at_k(RANKINGS, labels, 1) == pytest.approx(1 / 3)
    assert recall_at_k(RANKINGS, labels, 2) == pytest.approx(2 / 3)
    assert recall_at_k(RANKINGS, labels, 3) == pytest.approx(1.0)


def test_hit_rate_counts_semi_positives():
    assert hit_rate(RANKINGS, _labels()) == pytest.approx(1.0)


def test_hit_rate_never_below_r1():
    labels = _labels()
    assert hit_rate(RANKINGS, labels) >= recall_at_k(RANKINGS, labels, 1)


def test_rankings_and_labels_must_agree():
    with pytest.raises(DatasetError):
        recall_at_k({"q9": ["a"]}, _labels(), 1)


def test_label_allows_at_most_three_semi_positives():
    with pytest.raises(DatasetError):
        GroundTruthLabel("q", ("a",), ("b", "c", "d", "e"), (0, 0))
    with pytest.raises(DatasetError):
        GroundTruthLabel("q", (), (), (0, 0))


# ---------------- localization ----------------
def test_pixel_to_frame_and_meter_error():
    tag = GeoTag(100.0, 50.0, 0.5, 96)
    assert tag.pixel_to_frame(48, 48) == (100.0, 50.0)
    assert tag.pixel_to_frame(58, 38) == (105.0, 55.0)
    assert meter_error((51, 52), (48, 48), tag, tag) == pytest.approx(2.5)


def test_meter_error_across_tiles():
    a = GeoTag(48.0, -48.0, 1.0, 96)
    b = GeoTag(96.0, -48.0, 1.0, 96)
    # pixel 72 in a and pixel 24 in b are the same east coordinate
    assert meter_error((24, 30), (72, 30), b, a) == pytest.approx(0.0)


def test_covers_matches_pixel_range():
    tag = GeoTag(0.0, 0.0, 1.0, 10)
    assert tag.covers(*tag.pixel_to_frame(0, 0))
    assert tag.covers(*tag.pixel_to_frame(9, 9))
    assert not tag.covers(*tag.pixel_to_frame(10, 5))
    assert not tag.covers(*tag.pixel_to_frame(5, 10))
    assert tag.covers(-5.0, 5.0)
    assert not tag.covers(5.0, 0.0)


def test_localization_recall_counts_inf_as_miss():
    r = localization_recall([0.5, 3.0, INF, 12.0], (1.0, 10.0))
    assert r == {1.0: 0.25, 10.0: 0.5}


def test_median_is_lower_middle():
    assert mean_median([4.0, 1.0, 3.0, 2.0]) == (2.5, 2.0)
    assert mean_median([5.0]) == (5.0, 5.0)
    with pytest.raises(MetricInvariantError):
        mean_median([])


# ---------------- report ----------------
def test_report_excludes_inf_from_mean_and_counts_it_failed():
    errors = {"q1": 2.0, "q2": INF, "q3": 4.0}
    rep = build_report(RANKINGS, _labels(), errors, recall_ks=(1, 5), thresholds=(1.0, 10.0))
    assert rep.mean_error_m == pytest.approx(3.0)
    assert rep.median_error_m == pytest.approx(2.0)
    assert rep.counts == {"queries": 3, "localized": 2, "failed": 1}
    assert rep.recall_at_meters[10.0] == pytest.approx(2 / 3)


def test_report_with_no_finite_errors():
    rep = build_report(RANKINGS, _labels(), {}, recall_ks=(1,))
    assert rep.mean_error_m is None and rep.median_error_m is None
    assert rep.counts["failed"] == 3
    assert "-" in rep.to_text()


def test_report_serialisation_is_deterministic():
    errors = {"q1": 2.0, "q2": INF, "q3": 4.0}
    a = build_report(RANKINGS, _labels(), errors, extra={"z": 1.0, "a": 0.5})
    b = build_report(dict(reversed(list(RANKINGS.items()))), _labels(), errors, extra={"a": 0.5, "z": 1.0})
    assert a.to_json() == b.to_json()
    assert a.to_text() == b.to_text()
    doc = json.loads(a.to_json())
    assert set(doc["recall_at_k"]) == {"1", "5", "10"}
    assert "R@1" in a.to_text() and "Median(m)" in a.to_text()


def test_report_write(tmp_path):
    rep = build_report(RANKINGS, _labels(), {"q1": 1.0})
    pj, pt = rep.write(tmp_path)
    assert json.loads(pj.read_text())["counts"]["localized"] == 1
    assert pt.read_text() == rep.to_text()


def test_invariant_violation_raises():
    bad = EvalReport({1: 0.8, 5: 0.5}, 0.9, {1.0: 0.1}, None, None, {"queries": 1, "localized": 0, "failed": 1})
    with pytest.raises(MetricInvariantError, match="R@1 > R@5"):
        assert_invariants(bad)
    low_hit = EvalReport({1: 0.8}, 0.5, {1.0: 0.1}, None, None, {"queries": 1, "localized": 0, "failed": 1})
    with pytest.raises(MetricInvariantError):
        assert_invariants(low_hit)
    assert math.isinf(INF)
