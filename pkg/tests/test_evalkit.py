import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hsrdc import evalkit as ek
from hsrdc.errors import ContractError


def test_accuracy_examples():
    y = np.array([1, 2, 2, 1])
    assert ek.accuracy(y, y) == 1.0
    assert ek.accuracy(3 - y, y) == 0.0
    lab = np.array([1] * 90 + [2] * 10)
    pred = np.ones(100, dtype=int)
    assert ek.accuracy(pred, lab) == pytest.approx(0.9)
    assert ek.accuracy(pred, lab, per_class_mean=True) == pytest.approx(0.5)


def test_accuracy_errors():
    with pytest.raises(ContractError):
        ek.accuracy([], [])
    with pytest.raises(ContractError):
        ek.accuracy([1, 2], [1])


def test_per_class_mean_equals_overall_on_balanced_data():
    rng = np.random.default_rng(0)
    lab = np.repeat([1, 2, 3], 30)
    pred = rng.integers(1, 4, 90)
    # per-class mean equals overall accuracy when classes are equally sized
    assert ek.accuracy(pred, lab, True) == pytest.approx(ek.accuracy(pred, lab))


def test_iou_examples():
    g = np.array([[1, 2], [2, 1]])
    ious, miou = ek.iou_per_class(g, g, 2)
    assert np.all(ious == 1) and miou == 1
    ious, miou = ek.iou_per_class(3 - g, g, 2)
    assert np.all(ious == 0)
    # stripes: label left half class 1, prediction left quarter plus a shifted half
    label = np.array([[1, 1, 2, 2]] * 2)
    pred = np.array([[2, 1, 1, 2]] * 2)
    ious, _ = ek.iou_per_class(pred, label, 2)
    assert ious[0] == pytest.approx(1 / 3) and ious[1] == pytest.approx(1 / 3)


def test_iou_absent_class_excluded():
    ious, miou = ek.iou_per_class(np.ones((2, 2)), np.ones((2, 2)), 3)
    assert math.isnan(ious[1]) and math.isnan(ious[2]) and miou == 1.0


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_miou_between_min_and_max(seed):
    rng = np.random.default_rng(seed)
    ious, miou = ek.iou_per_class(rng.integers(1, 4, (5, 5)), rng.integers(1, 4, (5, 5)), 3)
    present = ious[~np.isnan(ious)]
    assert present.min() - 1e-12 <= miou <= present.max() + 1e-12


def test_cluster_size_entropy():
    assert ek.cluster_size_entropy(np.array([1, 2, 1, 2]), 2) == pytest.approx(math.log(2))
    assert ek.cluster_size_entropy(np.array([1, 1, 1]), 3) == 0.0


def test_diagnostics_zero_at_centroids():
    C = np.array([[0.0, 3.0], [0.0, 4.0]])
    Z = C[:, [0, 1, 1]]
    y = np.array([1, 2, 2])
    d = ek.compute_diagnostics(Z, y, Z, y, C)
    assert d.src_instance_to_centroid == 0 and d.tgt_instance_to_centroid == 0


def test_diagnostics_single_class_distance_r():
    C = np.zeros((2, 1))
    Z = np.array([[3.0, 0.0], [4.0, 5.0]])
    d = ek.compute_diagnostics(Z, np.ones(2, int), Z, np.ones(2, int), C)
    assert d.src_instance_to_centroid == pytest.approx(5.0)


def test_diagnostics_hand_configuration():
    # source class 1 at (0,0),(2,0); class 2 at (0,4); target class 1 at (1,1); class 2 at (0,6),(0,8)
    Zs = np.array([[0.0, 2.0, 0.0], [0.0, 0.0, 4.0]])
    ys = np.array([1, 1, 2])
    Zt = np.array([[1.0, 0.0, 0.0], [1.0, 6.0, 8.0]])
    yt = np.array([1, 2, 2])
    C = np.array([[1.0, 0.0], [0.0, 5.0]])
    d = ek.compute_diagnostics(Zs, ys, Zt, yt, C)
    assert d.src_instance_to_centroid == pytest.approx((1 + 1 + 1) / 3)
    assert d.tgt_instance_to_centroid == pytest.approx((1 + 1 + 3) / 3)
    assert d.src_insmean_to_centroid == pytest.approx((0 + 1) / 2)
    assert d.tgt_insmean_to_centroid == pytest.approx((1 + 2) / 2)
    assert d.src_instance_to_insmean == pytest.approx((1 + 1 + 0) / 3)
    assert d.srcinsmean_to_tgtinsmean == pytest.approx((1 + 3) / 2)
    # centers: class 1 mean of (0,0),(2,0),(1,1) = (1,1/3); class 2 mean of (0,4),(0,6),(0,8) = (0,6)
    c1 = np.array([1.0, 1 / 3])
    expected = (np.linalg.norm([-1, -1 / 3]) + np.linalg.norm([1, -1 / 3]) + 2.0) / 3
    assert d.src_instance_to_center == pytest.approx(expected)
    assert d.tgt_insmean_to_center == pytest.approx((np.linalg.norm(np.array([1, 1]) - c1) + 1.0) / 2)


def test_diagnostics_empty_class_skipped_with_warning(caplog):
    Z = np.array([[0.0, 1.0]])
    with caplog.at_level("WARNING"):
        d = ek.compute_diagnostics(Z, np.array([1, 1]), Z, np.array([1, 1]), np.zeros((1, 2)))
    assert "class 2" in caplog.text
    assert np.isfinite(d.src_instance_to_centroid)


def test_diagnostics_orthogonal_invariance():
    rng = np.random.default_rng(1)
    Zs, Zt, C = rng.standard_normal((3, 10)), rng.standard_normal((3, 12)), rng.standard_normal((3, 2))
    ys, yt = rng.integers(1, 3, 10), rng.integers(1, 3, 12)
    R, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    a = ek.compute_diagnostics(Zs, ys, Zt, yt, C).as_dict()
    b = ek.compute_diagnostics(R @ Zs, ys, R @ Zt, yt, R @ C).as_dict()
    for key in a:
        assert a[key] == pytest.approx(b[key], abs=1e-10)


def test_diagnostics_without_centroids():
    Z = np.array([[0.0, 1.0, 5.0]])
    d = ek.compute_diagnostics(Z, np.array([1, 1, 2]), Z, np.array([1, 1, 2]), k=2)
    assert math.isnan(d.src_instance_to_centroid) and np.isfinite(d.src_instance_to_center)
    with pytest.raises(ContractError):
        ek.compute_diagnostics(Z, np.array([1, 1, 2]), Z, np.array([1, 1, 2]))


def test_emit_one_epoch_and_round_trip(tmp_path):
    rows = [{"epoch": 1, "L_total": 0.123456789, "lambda": 0.0, "lr": 0.01, "target_test_acc": 0.5}]
    files = ek.emit(rows, tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[0] == "epoch,L_total,lambda,lr,target_test_acc"
    back = ek.read_csv(tmp_path / "metrics.csv")
    assert back[0]["L_total"] == pytest.approx(0.123456789, rel=1e-5)
    svgs = [f for f in files if f.suffix == ".svg"]
    assert {f.name for f in svgs} == {"metrics_losses.svg", "metrics_schedule.svg", "metrics_accuracy.svg"}
    for f in svgs:
        ET.parse(f)


def test_emit_requires_rows(tmp_path):
    with pytest.raises(ContractError):
        ek.emit([], tmp_path)


def test_emit_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        ek.emit([{"epoch": 1}], blocker / "sub")


def test_format_value_is_fixed():
    assert ek.format_value(1 / 3) == "0.333333"
    assert ek.format_value(True) == "1" and ek.format_value(float("nan")) == "nan"
