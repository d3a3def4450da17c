import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from npsemiseg.errors import CoverageError, FormatError, MetricUndefinedError
from npsemiseg.evalkit import (ConfusionMatrix, PavpuConfig, miou, pavpu, read_csv, sliding_eval,
                               window_starts, write_csv)
from npsemiseg.head import PredictionBundle


def pavpu_brute_force(pred, truth, unc, w, u, a, ignore=255):
    """Enumerate patches one by one with plain Python loops."""
    h, wd = truth.shape
    n_ac = n_iu = n = 0
    for y0 in range(0, h, w):
        for x0 in range(0, wd, w):
            valid = correct = 0
            unc_sum = 0.0
            for y in range(y0, min(y0 + w, h)):
                for x in range(x0, min(x0 + w, wd)):
                    if truth[y, x] == ignore:
                        continue
                    valid += 1
                    correct += int(pred[y, x] == truth[y, x])
                    unc_sum += float(unc[y, x])
            if valid == 0:
                continue
            n += 1
            accurate = correct >= a * valid
            certain = unc_sum / valid < u
            n_ac += accurate and certain
            n_iu += (not accurate) and (not certain)
    return (n_ac + n_iu) / n


def test_miou_examples():
    truth = np.array([[0, 0], [1, 1]])
    assert miou(ConfusionMatrix(2).add(truth, truth)) == 1.0
    assert miou(ConfusionMatrix(2).add(1 - truth, truth)) == 0.0
    got = miou(ConfusionMatrix(2).add(np.array([[0, 1], [1, 1]]), truth))
    assert abs(got - 7 / 12) <= 1e-12


def test_confusion_ignores_label_and_counts_total():
    cm = ConfusionMatrix(3).add(np.array([0, 1, 2, 2]), np.array([0, 255, 2, 1]))
    assert cm.total == 3 and cm.counts.min() >= 0


def test_miou_excludes_empty_classes_and_undefined():
    cm = ConfusionMatrix(4).add(np.array([0, 1]), np.array([0, 1]))
    assert miou(cm) == 1.0
    with pytest.raises(MetricUndefinedError):
        miou(ConfusionMatrix(3))


def test_pavpu_extremes():
    truth = np.zeros((4, 4), int)
    assert pavpu(truth, truth, np.zeros((4, 4)), PavpuConfig(2)) == 1.0
    assert pavpu(truth, truth, np.ones((4, 4)), PavpuConfig(2)) == 0.0


def test_pavpu_hand_patches():
    truth = np.zeros((4, 4), int)
    pred = np.zeros((4, 4), int)
    unc = np.zeros((4, 4))
    pred[0:2, 2:4] = 1        # top-right inaccurate ...
    unc[0:2, 2:4] = 0.9       # ... and uncertain
    unc[2:4, 2:4] = 0.9       # bottom-right accurate but uncertain
    assert pavpu(pred, truth, unc, PavpuConfig(2)) == 0.75


def test_pavpu_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(100):
        truth = rng.integers(0, 3, (8, 8))
        truth[rng.random((8, 8)) < 0.1] = 255
        pred = np.where(rng.random((8, 8)) < 0.6, truth, rng.integers(0, 3, (8, 8)))
        unc = rng.random((8, 8))
        assert pavpu(pred, truth, unc, PavpuConfig(2)) == pavpu_brute_force(pred, truth, unc, 2, 0.4, 0.5)


def test_pavpu_pads_ragged_edges():
    rng = np.random.default_rng(3)
    truth = rng.integers(0, 2, (5, 7))
    pred = rng.integers(0, 2, (5, 7))
    unc = rng.random((5, 7))
    assert pavpu(pred, truth, unc, PavpuConfig(2)) == pavpu_brute_force(pred, truth, unc, 2, 0.4, 0.5)


def test_pavpu_normalises_nats_by_log_classes():
    truth = np.zeros((2, 2), int)
    unc = np.full((2, 2), 0.5 * math.log(4))       # 0.5 after normalisation
    assert pavpu(truth, truth, unc, PavpuConfig(2), n_class=4) == 0.0
    assert pavpu(truth, truth, unc, PavpuConfig(2, uncertainty_threshold=0.6), n_class=4) == 1.0


@given(st.integers(0, 2**31))
def test_metrics_invariant_to_consistent_relabelling(seed):
    rng = np.random.default_rng(seed)
    truth, pred = rng.integers(0, 4, (2, 8, 8))
    unc = rng.random((8, 8))
    perm = rng.permutation(4)
    base = miou(ConfusionMatrix(4).add(pred, truth))
    assert abs(miou(ConfusionMatrix(4).add(perm[pred], perm[truth])) - base) <= 1e-12
    assert pavpu(perm[pred], perm[truth], unc, PavpuConfig(2)) == pavpu(pred, truth, unc, PavpuConfig(2))


def test_pavpu_config_validation():
    for bad in (dict(window=0), dict(uncertainty_threshold=-1), dict(accuracy_fraction=0),
                dict(accuracy_fraction=1.5)):
        with pytest.raises(ValueError):
            PavpuConfig(**bad)


# sliding evaluation ----------------------------------------------------------

class PixelModel:
    """Deterministic per-window model: softmax of the window's own pixels."""

    def __init__(self):
        self.calls = 0

    def __call__(self, image):
        self.calls += 1
        logits = np.stack([image[0], -image[0], image[1]]) * 3
        p = np.exp(logits) / np.exp(logits).sum(axis=0)
        local = p * (1 + 0.1 * np.linspace(0, 1, image.shape[2]))     # window-dependent
        local /= local.sum(axis=0)
        return PredictionBundle.from_samples(np.stack([local, p]))


def test_window_counts():
    assert window_starts(8, 4, 2) == [0, 2, 4]
    assert len(window_starts(10, 4, 3)) == math.ceil((10 - 4) / 3) + 1
    assert window_starts(10, 4, 3)[-1] == 6
    with pytest.raises(CoverageError):
        window_starts(8, 4, 5)
    with pytest.raises(CoverageError):
        window_starts(4, 8, 2)


def test_sliding_full_crop_equals_single_forward():
    img = np.random.default_rng(0).random((3, 6, 6)).astype(np.float32)
    model = PixelModel()
    one = model(img)
    slid = sliding_eval(model, img, 6, 3)
    np.testing.assert_allclose(slid.avg_probs, one.avg_probs, atol=1e-6)
    np.testing.assert_allclose(slid.uncertainty, one.uncertainty, atol=1e-6)


@given(st.integers(4, 12), st.integers(4, 12), st.integers(2, 4), st.integers(1, 4), st.integers(0, 99))
def test_sliding_covers_and_stays_on_simplex(h, w, crop, stride, seed):
    stride = min(stride, crop)
    img = np.random.default_rng(seed).random((3, h, w)).astype(np.float32)
    model = PixelModel()
    out = sliding_eval(model, img, crop, stride)
    assert model.calls == len(window_starts(h, crop, stride)) * len(window_starts(w, crop, stride))
    assert np.abs(out.avg_probs.sum(axis=0) - 1).max() <= 1e-5 and out.avg_probs.min() >= 0
    assert out.uncertainty.shape == (h, w)


def test_sliding_rejects_bad_stride():
    with pytest.raises(CoverageError):
        sliding_eval(PixelModel(), np.zeros((3, 8, 8), np.float32), 4, 6)


# CSV -------------------------------------------------------------------------

def test_csv_round_trip_and_version_check(tmp_path):
    path = tmp_path / "m.csv"
    row = {"run_id": "a", "split": "val", "miou": 0.5, "pavpu": 0.75, "wall_ms_np": 1.5,
           "wall_ms_mc": "", "T": 5}
    write_csv(path, "metrics", [row])
    back = read_csv(path, "metrics")
    assert back == [{k: str(v) for k, v in row.items()}]
    text = path.read_text().replace("#schema,metrics,1", "#schema,metrics,9")
    path.write_text(text)
    with pytest.raises(FormatError):
        read_csv(path, "metrics")
    with pytest.raises(FormatError):
        write_csv(tmp_path / "b.csv", "benchmark", [])
        read_csv(tmp_path / "b.csv", "metrics")
