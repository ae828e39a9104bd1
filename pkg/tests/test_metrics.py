import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtnet.errors import DataError, DimensionError, UndefinedMetricError
from dtnet.metrics import MetricsWriter, mean_iou, pixel_accuracy, read_metrics, roc_auc


def pairwise_auc(scores, truth):
    """P(score_pos > score_neg) + 0.5 P(tie), by enumerating every pair."""
    pos = scores[truth == 1]
    neg = scores[truth == 0]
    diff = pos[:, None] - neg[None, :]
    return (np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size


def test_accuracy():
    t = np.array([[0, 1], [1, 0]])
    assert pixel_accuracy(t, t) == 1.0
    assert pixel_accuracy(1 - t, t) == 0.0
    assert pixel_accuracy(np.array([[0, 1], [1, 1]]), t) == 0.75
    with pytest.raises(DimensionError):
        pixel_accuracy(t, t[:1])


def test_mean_iou_cases():
    t = np.array([[0, 0], [1, 1]])
    assert mean_iou(t, t, 2) == 1.0
    assert mean_iou(np.zeros_like(t), t, 2) == pytest.approx(0.25)
    z = np.zeros((2, 2), dtype=int)
    assert mean_iou(z, z, 2) == 1.0
    with pytest.raises(DataError):
        mean_iou(t + 1, t, 2)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mean_iou_permutation_and_bounds(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 3, size=50)
    truth = rng.integers(0, 3, size=50)
    perm = rng.permutation(50)
    m = mean_iou(pred, truth, 3)
    assert m == mean_iou(pred[perm], truth[perm], 3)
    assert 0.0 <= m <= 1.0
    for c in range(3):
        inter = np.sum((pred == c) & (truth == c))
        union = np.sum((pred == c) | (truth == c))
        if (truth == c).any():
            # the union contains every true-c pixel, so IoU never exceeds per-class accuracy
            assert inter / union <= np.mean(pred[truth == c] == c)


def test_auc_perfect_and_inverted():
    truth = np.array([0, 1, 1, 0, 1])
    assert roc_auc(truth.astype(float), truth)[1] == 1.0
    assert roc_auc(1.0 - truth, truth)[1] == 0.0


def test_auc_random_near_half():
    rng = np.random.default_rng(0)
    truth = rng.integers(0, 2, size=20000)
    auc = roc_auc(rng.uniform(size=20000), truth)[1]
    assert abs(auc - 0.5) <= 0.05


def test_auc_single_class():
    with pytest.raises(UndefinedMetricError):
        roc_auc(np.array([0.1, 0.2]), np.array([1, 1]))


def test_roc_curve_endpoints():
    (fpr, tpr), _ = roc_auc(np.array([0.9, 0.2, 0.2, 0.6]), np.array([1, 0, 1, 0]))
    assert fpr[0] == 0 and tpr[0] == 0 and fpr[-1] == 1 and tpr[-1] == 1
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), levels=st.integers(2, 30))
def test_auc_matches_pairwise_count(seed, levels):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, size=60)
    truth[:2] = [0, 1]
    scores = rng.integers(0, levels, size=60) / levels  # plenty of ties
    assert roc_auc(scores, truth)[1] == pytest.approx(pairwise_auc(scores, truth), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_auc_monotone_invariance(seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 2, size=80)
    truth[:2] = [0, 1]
    scores = rng.uniform(size=80)
    base = roc_auc(scores, truth)[1]
    assert roc_auc(np.exp(3 * scores) - 7, truth)[1] == pytest.approx(base, abs=1e-12)
    assert roc_auc(scores ** 3, truth)[1] == pytest.approx(base, abs=1e-12)


def test_csv_schema(tmp_path):
    with MetricsWriter(tmp_path / "m.csv") as w:
        w.write("run", 10, 0.5, 0.9, 0.7, float("nan"))
    rows = read_metrics(tmp_path / "m.csv")
    assert list(rows[0]) == ["run_id", "step", "loss", "accuracy", "mean_iou", "auc"]
    assert rows[0]["step"] == "10" and rows[0]["auc"] == "nan"
