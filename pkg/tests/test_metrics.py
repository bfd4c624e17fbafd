import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trackplan import metrics
from trackplan.metrics import MetricConfig, MetricReport
from trackplan.nn.layers import ShapeMismatch


def offset_tracks(offset, p=12, H=5, seed=0):
    g = np.random.default_rng(seed)
    gt = g.uniform(0, 256, size=(p, H, 2))
    ang = g.uniform(0, 2 * np.pi, size=(p, H))
    d = np.stack([np.cos(ang), np.sin(ang)], -1) * offset
    return gt + d, gt


def test_perfect_prediction():
    _, gt = offset_tracks(0.0)
    for x in range(1, 11):
        for t in range(5):
            assert metrics.delta_x_t(gt, gt, x, t) == 1.0
    assert metrics.delta_auc(gt, gt) == 1.0


def test_uniform_5_5_offset():
    pred, gt = offset_tracks(5.5)
    for t in range(5):
        assert [metrics.delta_x_t(pred, gt, x, t) for x in range(1, 11)] == [0.0] * 5 + [1.0] * 5
    assert metrics.delta_auc(pred, gt) == 0.5


def test_half_far():
    pred, gt = offset_tracks(100.0, p=10)
    pred[:5] = gt[:5]
    assert all(metrics.delta_x_t(pred, gt, x, 2) == 0.5 for x in range(1, 11))


def test_zero_motion_lower_bound():
    gt = np.zeros((8, 6, 2))
    gt[:, :, 0] = np.arange(6) * 20.0  # every point moves > 10 px each step after t=0
    gt[:, 0, 0] = -15.0
    pred = metrics.zero_motion(gt)
    assert metrics.delta_table(pred, gt)[:, 1:].max() == 0.0
    # t=0 is exact, so only that column counts
    assert metrics.delta_auc(pred, gt) == pytest.approx(1 / 6)
    assert metrics.delta_auc(pred[:, 1:], gt[:, 1:]) == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        metrics.delta_auc(np.zeros((3, 4, 2)), np.zeros((3, 5, 2)))
    with pytest.raises(ShapeMismatch):
        metrics.delta_auc(np.zeros((3, 4, 2)), np.zeros((3, 4, 2)), valid=np.ones((3, 5), bool))
    with pytest.raises(ValueError):
        MetricConfig(0)


def test_valid_mask_excludes_points():
    pred, gt = offset_tracks(0.0, p=4)
    pred[0] += 50
    valid = np.ones(gt.shape[:2], bool)
    valid[0] = False
    assert metrics.delta_auc(pred, gt, valid=valid) == 1.0
    assert metrics.delta_auc(pred, gt) == 0.75


def test_delta_one_iff_within_one_px():
    gt = np.round(offset_tracks(0.0)[1])
    pred = gt.copy()
    pred[..., 0] += 1.0
    assert metrics.delta_auc(pred, gt) == 1.0
    pred[0, 0, 1] += 1e-6
    assert metrics.delta_auc(pred, gt) < 1.0


def test_monotone_in_perturbation_scale():
    g = np.random.default_rng(0)
    _, gt = offset_tracks(0.0, p=30, H=6)
    noise = g.normal(size=gt.shape) * 4
    for _ in range(1000):
        a, b = np.sort(g.uniform(0, 5, 2))
        assert metrics.delta_auc(gt + a * noise, gt) >= metrics.delta_auc(gt + b * noise, gt)


@settings(max_examples=50)
@given(st.integers(0, 10**6), st.floats(0, 20))
def test_table_monotone_in_x_and_permutation(seed, scale):
    g = np.random.default_rng(seed)
    gt = g.uniform(0, 256, size=(15, 4, 2))
    pred = gt + scale * g.normal(size=gt.shape)
    table = metrics.delta_table(pred, gt)
    assert (np.diff(table, axis=0) >= 0).all()
    auc = metrics.delta_auc(pred, gt)
    assert 0.0 <= auc <= 1.0
    perm = g.permutation(15)
    assert metrics.delta_auc(pred[perm], gt[perm]) == auc


def test_report_roundtrip_and_summary():
    rows = [
        {"split": "MG", "episode_id": "MG-0", "delta_auc": 0.5, "open_loop_success": True,
         "closed_loop_success": True, "fit_residual": 0.1},
        {"split": "MG", "episode_id": "MG-1", "delta_auc": 0.7, "open_loop_success": False,
         "closed_loop_success": True, "fit_residual": 0.3},
        {"split": "G", "episode_id": "G-0", "delta_auc": 0.2},
    ]
    rep = MetricReport(rows, {"seed": 1})
    s = rep.summary()
    assert s["MG"]["delta_auc"] == pytest.approx(0.6)
    assert s["MG"]["open_loop_success"] == 0.5
    assert s["G"]["episodes"] == 1
    again = MetricReport.from_dict(rep.to_dict())
    assert again.to_csv() == rep.to_csv()
    assert rep.to_csv().splitlines()[0] == "split,episode_id,delta_auc,open_loop_success,closed_loop_success,fit_residual"
    assert "MG" in rep.to_text()
