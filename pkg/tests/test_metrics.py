import numpy as np
import pytest

from anofuse.errors import UndefinedMetricError
from anofuse.metrics import MetricsReport, auroc, average_precision, gate_entropy


def auroc_pairs_oracle(scores, labels):
    """All positive/negative pairs: wins count 1, ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def ap_sweep_oracle(scores, labels):
    """Exhaustive threshold sweep, descending, recomputing TP/FP per step."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    thresholds = np.unique(scores)[::-1]
    ap = 0.0
    prev_tp = 0
    for t in thresholds:
        sel = scores >= t
        tp = int(labels[sel].sum())
        if tp > prev_tp:
            ap += ((tp - prev_tp) / n_pos) * (tp / int(sel.sum()))
        prev_tp = tp
    return ap


def test_auroc_perfect_separation():
    assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auroc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_auroc_all_ties_is_half():
    assert auroc([0.3] * 6, [0, 1, 0, 1, 0, 1]) == 0.5


def test_auroc_hand_case():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auroc_single_class_rejected():
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auroc([0.1, 0.2], [0, 0])


def test_ap_all_positives_first():
    assert average_precision([0.9, 0.8, 0.1, 0.05], [1, 1, 0, 0]) == 1.0


def test_ap_single_positive_ranked_last():
    for n in (3, 5, 8):
        scores = np.linspace(1.0, 0.1, n)
        labels = np.zeros(n, dtype=int)
        labels[-1] = 1
        assert average_precision(scores, labels) == 1.0 / n


def test_ap_hand_case_matches_sweep():
    scores = [0.1, 0.4, 0.35, 0.8]
    labels = [0, 0, 1, 1]
    assert average_precision(scores, labels) == ap_sweep_oracle(scores, labels)


def test_ap_needs_positives():
    with pytest.raises(UndefinedMetricError):
        average_precision([0.5, 0.2], [0, 0])


def test_metrics_match_brute_force_with_ties():
    rng = np.random.default_rng(0)
    for trial in range(300):
        n = int(rng.integers(2, 200))
        # discrete score grids create plenty of ties
        grid = int(rng.integers(2, 12))
        scores = rng.integers(0, grid, n).astype(np.float64) / grid
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        assert auroc(scores, labels) == auroc_pairs_oracle(scores, labels)
        assert average_precision(scores, labels) == ap_sweep_oracle(scores, labels)


def test_metrics_match_brute_force_continuous():
    rng = np.random.default_rng(1)
    for trial in range(100):
        n = int(rng.integers(2, 120))
        scores = rng.normal(size=n)
        labels = rng.integers(0, 2, n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        assert auroc(scores, labels) == auroc_pairs_oracle(scores, labels)
        assert average_precision(scores, labels) == ap_sweep_oracle(scores, labels)


def test_near_oracle_scores_hit_ceiling():
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 2, 400)
    labels[0], labels[1] = 0, 1
    scores = labels + rng.normal(0, 1e-3, 400)
    assert auroc(scores, labels) > 0.99
    assert average_precision(scores, labels) > 0.99


def test_gate_entropy_uniform_is_log_n():
    w = np.full((10, 4), 0.25)
    assert abs(gate_entropy(w) - np.log(4)) < 1e-12
    one_hot = np.zeros((5, 4))
    one_hot[:, 2] = 1.0
    assert gate_entropy(one_hot) < 1e-9


def test_report_csv_shape():
    rep = MetricsReport(0.91234, 0.5, 0.75, 0.8, 10, 10240, 5, 600,
                        level_entropy={(0, "normal"): 1.0986})
    lines = rep.csv_lines()
    assert len(lines) == 2
    header = lines[0].split(",")
    row = lines[1].split(",")
    assert len(header) == len(row) == 9
    assert row[0] == "0.9123"
