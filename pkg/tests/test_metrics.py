import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regnn.metrics import (MetricsReport, accuracy, aggregate, group_labels, headline, is_better,
                           longtail_class_report, mae, render_table, roc_auc, value_bucket_report)


def pair_auc(scores, labels):
    """Pair-counting oracle: P(score_pos > score_neg) + 0.5 P(tie)."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def test_accuracy_basic():
    assert accuracy([0, 1, 1, 2], [0, 1, 0, 2]) == 0.75


def test_roc_perfect_and_inverted():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5


def test_roc_requires_both_classes():
    with pytest.raises(ValueError, match="both classes"):
        roc_auc([0.1, 0.2], [1, 1])


labelled_scores = st.integers(2, 30).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 6).map(lambda x: x / 6), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n)).filter(lambda t: 0 < sum(t[1]) < n))


@settings(max_examples=100, deadline=None)
@given(labelled_scores)
def test_roc_matches_pair_counting(data):
    scores, labels = data
    assert roc_auc(scores, labels) == pytest.approx(pair_auc(scores, labels), abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(labelled_scores)
def test_roc_flip_identity_and_monotone_invariance(data):
    scores, labels = data
    flipped = [1 - y for y in labels]
    assert roc_auc(scores, labels) + roc_auc(scores, flipped) == pytest.approx(1.0, abs=1e-12)
    warped = np.exp(3 * np.asarray(scores))
    assert roc_auc(warped, labels) == pytest.approx(roc_auc(scores, labels), abs=1e-12)


def test_mae_and_headline():
    assert mae([1.0, 2.0], [3.0, 2.0]) == 1.0
    assert headline("mae", [0.0], [2.5]) == 2.5
    with pytest.raises(ValueError, match="equal length"):
        mae([1.0], [1.0, 2.0])


def test_is_better_direction():
    assert is_better("accuracy", 0.6, 0.5) and not is_better("accuracy", 0.5, 0.5)
    assert is_better("mae", 1.0, 2.0) and not is_better("mae", 2.0, 1.0)
    assert is_better("roc_auc", 0.1, None)


def test_group_labels():
    assert group_labels((100, 500, 1000, 5000)) == ["<100", "100-500", "500-1000", "1000-5000", ">=5000"]


def test_longtail_report_groups():
    counts = {0: 5, 1: 200, 2: 6000}
    preds = [0, 1, 1, 1, 2]
    labels = [0, 0, 1, 1, 2]
    rep = longtail_class_report(preds, labels, counts)
    assert rep.value == 0.8
    assert rep.group("<100").count == 2 and rep.group("<100").value == 0.5
    assert rep.group("100-500").value == 1.0
    assert rep.group("500-1000").count == 0 and rep.group("500-1000").value is None
    assert rep.group(">=5000").value == 1.0


def test_longtail_boundary_inclusive_lower():
    rep = longtail_class_report([0], [0], {0: 100})
    assert rep.group("100-500").count == 1


def test_longtail_rejects_bad_input():
    with pytest.raises(ValueError, match="strictly increasing"):
        longtail_class_report([0], [0], {0: 1}, boundaries=(10, 5))
    with pytest.raises(ValueError, match="no training count"):
        longtail_class_report([0], [3], {0: 1})


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 45), st.floats(-5, 45)), min_size=1, max_size=40))
def test_bucket_report_recombines(rows):
    preds, targets = map(np.array, zip(*rows))
    rep = value_bucket_report(preds, targets)
    assert sum(g.count for g in rep.groups) == len(rows)
    weighted = sum(g.count * g.value for g in rep.groups if g.count) / len(rows)
    assert weighted == pytest.approx(rep.value, abs=1e-12)
    assert (rep.groups[0].label == "<0") == bool(np.any(targets < 0))


def test_bucket_labels_and_values():
    rep = value_bucket_report([1.0, 12.0, 40.0], [2.0, 10.0, 35.0])
    assert [g.label for g in rep.groups] == ["[0,10)", "[10,20)", "[20,30)", "[30,inf)"]
    assert rep.group("[0,10)").value == 1.0
    assert rep.group("[10,20)").value == 2.0
    assert rep.group("[20,30)").value is None
    assert rep.group("[30,inf)").value == 5.0


def test_aggregate_and_json_round_trip():
    a = longtail_class_report([0, 1], [0, 1], {0: 5, 1: 200})
    b = longtail_class_report([1, 1], [0, 1], {0: 5, 1: 200})
    agg = aggregate([a, b])
    assert agg.seeds == 2 and agg.mean == 0.75 and agg.std == pytest.approx(0.25)
    assert agg.group("<100").value == 0.5
    assert MetricsReport.from_json(agg.to_json()) == agg
    text = render_table(agg)
    assert "mean over 2 seeds" in text and "<100" in text
