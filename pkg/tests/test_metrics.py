import math

import numpy as np
import pytest
from scipy import ndimage

from picanet.errors import DataError
from picanet.metrics import (BETA2, THRESHOLDS, MetricReport, aggregate, evaluate_model,
                             evaluate_predictions, f_measure, gaussian_kernel, image_metrics, mae,
                             pr_curve, precision_recall_at, weighted_f_measure)

EPS = np.finfo(np.float64).eps


# --- oracles --------------------------------------------------------------------


def recount_pr(pred, gt, t):
    tp = fp = fn = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        hit = p >= t
        tp += hit and g == 1
        fp += hit and g == 0
        fn += (not hit) and g == 1
    precision = tp / (tp + fp) if tp + fp else 1.0
    return precision, tp / (tp + fn)


def naive_weighted_f(pred, gt, beta2=1.0):
    """Loop-by-loop weighted F-measure (explicit distances, explicit Gaussian)."""
    H, W = gt.shape
    fg = [(r, c) for r in range(H) for c in range(W) if gt[r, c]]
    err = np.abs(pred - gt)
    # scipy's tie choice is used only as a pointer and checked to be a true nearest pixel
    _, (ri, ci) = ndimage.distance_transform_edt(gt == 0, return_indices=True)
    err_t = err.copy()
    dist = np.zeros((H, W))
    for r in range(H):
        for c in range(W):
            if gt[r, c]:
                continue
            d2 = [(r - a) ** 2 + (c - b) ** 2 for a, b in fg]
            best = min(d2)
            chosen = (int(ri[r, c]), int(ci[r, c]))
            assert (r - chosen[0]) ** 2 + (c - chosen[1]) ** 2 == best
            dist[r, c] = math.sqrt(best)
            err_t[r, c] = err[chosen]
    k = np.zeros((7, 7))
    for a in range(7):
        for b in range(7):
            k[a, b] = math.exp(-((a - 3) ** 2 + (b - 3) ** 2) / (2 * 5.0 ** 2))
    k /= k.sum()
    err_a = np.zeros((H, W))
    for r in range(H):
        for c in range(W):
            s = 0.0
            for a in range(7):
                for b in range(7):
                    rr, cc = r + a - 3, c + b - 3
                    if 0 <= rr < H and 0 <= cc < W:
                        s += k[a, b] * err_t[rr, cc]
            err_a[r, c] = s
    ew = np.zeros((H, W))
    for r in range(H):
        for c in range(W):
            if gt[r, c]:
                ew[r, c] = min(err[r, c], err_a[r, c])
            else:
                ew[r, c] = err[r, c] * (2 - math.exp(math.log(0.5) / 5 * dist[r, c]))
    tp = sum(1 - ew[p] for p in fg)
    fp = sum(ew[r, c] for r in range(H) for c in range(W) if not gt[r, c])
    recall = 1 - sum(ew[p] for p in fg) / len(fg)
    precision = tp / (EPS + tp + fp)
    return (1 + beta2) * recall * precision / (EPS + recall + beta2 * precision)


def random_pair(rng, shape=(8, 8), p=0.4):
    gt = (rng.uniform(size=shape) < p).astype(float)
    gt[shape[0] // 2, shape[1] // 2] = 1
    return rng.uniform(size=shape), gt


# --- PR curve -------------------------------------------------------------------


def test_thresholds():
    assert THRESHOLDS.size == 256 and THRESHOLDS[0] == 0 and THRESHOLDS[-1] == 1
    assert THRESHOLDS[128] == pytest.approx(128 / 255)


def test_pr_perfect_binary_prediction(rng):
    _, gt = random_pair(rng)
    p, r = pr_curve(gt, gt)
    np.testing.assert_array_equal(p[1:], 1)
    np.testing.assert_array_equal(r, 1)


def test_pr_inverted_prediction(rng):
    _, gt = random_pair(rng)
    _, r = pr_curve(1 - gt, gt)
    np.testing.assert_array_equal(r[1:], 0)


def test_pr_two_by_two_hand_count():
    pred = np.array([[0.2, 0.8], [0.6, 0.1]])
    gt = np.array([[0, 1], [1, 0]])
    assert precision_recall_at(pred, gt, 0.5) == (1.0, 1.0)
    assert precision_recall_at(pred, gt, 0.7) == (1.0, 0.5)
    p, r = pr_curve(pred, gt)
    k = int(np.searchsorted(THRESHOLDS, 0.7))
    assert (p[k], r[k]) == (1.0, 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_pr_curve_matches_recount(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_pair(rng, (6, 7))
    pred[0, 0] = 128 / 255  # exact threshold hit
    p, r = pr_curve(pred, gt)
    for k in range(0, 256, 17):
        assert (p[k], r[k]) == pytest.approx(recount_pr(pred, gt, THRESHOLDS[k]), abs=1e-12)
    assert np.all(np.diff(r) <= 0)
    assert p.min() >= 0 and p.max() <= 1


def test_empty_prediction_precision_one():
    gt = np.array([[1, 0], [0, 0]])
    p, r = precision_recall_at(np.zeros((2, 2)), gt, 0.5)
    assert (p, r) == (1.0, 0.0)


@pytest.mark.parametrize("gt", [np.zeros((3, 3)), np.full((3, 3), 0.5)])
def test_bad_ground_truth_rejected(gt):
    with pytest.raises(DataError):
        pr_curve(np.zeros((3, 3)), gt)


def test_shape_mismatch_rejected():
    with pytest.raises(DataError):
        pr_curve(np.zeros((3, 3)), np.ones((3, 4)))
    with pytest.raises(DataError):
        mae(np.zeros((3, 3)), np.ones((3, 4)))


# --- F-measure ------------------------------------------------------------------


@pytest.mark.parametrize("p", [0.1, 0.37, 0.5, 0.99, 1.0])
def test_f_equal_pr_is_identity(p):
    assert f_measure(p, p) == pytest.approx(p, abs=1e-12)


def test_f_examples():
    assert BETA2 == 0.3
    assert f_measure(1.0, 0.0) == 0.0
    assert f_measure(0.0, 0.0) == 0.0
    assert f_measure(0.8, 0.5) == pytest.approx(0.52 / 0.74, abs=1e-12)
    assert f_measure(0.8, 0.5) == pytest.approx(0.70270, abs=1e-5)


def test_f_vectorized():
    out = f_measure(np.array([0.8, 0.0]), np.array([0.5, 0.0]))
    np.testing.assert_allclose(out, [0.52 / 0.74, 0.0])


# --- MAE ------------------------------------------------------------------------


def test_mae_examples(rng):
    _, gt = random_pair(rng)
    assert mae(gt, gt) == 0
    assert mae(np.ones((4, 4)), np.zeros((4, 4))) == 1
    gt = np.zeros(10)
    gt[:4] = 1
    assert mae(np.full(10, 0.25), gt) == pytest.approx(0.45, abs=1e-12)


# --- weighted F -----------------------------------------------------------------


def test_gaussian_kernel():
    k = gaussian_kernel(7, 5.0)
    assert k.shape == (7, 7) and k.sum() == pytest.approx(1.0)
    assert k[3, 3] == k.max()
    np.testing.assert_allclose(k, k.T)


def test_weighted_f_perfect(rng):
    _, gt = random_pair(rng)
    assert weighted_f_measure(gt, gt) == pytest.approx(1.0, abs=1e-12)


def test_weighted_f_all_zero_prediction():
    gt = np.zeros((8, 8))
    gt[3:5, 3:5] = 1
    assert weighted_f_measure(np.zeros((8, 8)), gt) == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(6))
def test_weighted_f_matches_naive_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    pred, gt = random_pair(rng, p=0.3 + 0.05 * seed)
    assert weighted_f_measure(pred, gt) == pytest.approx(naive_weighted_f(pred, gt), abs=1e-6)


def test_weighted_f_matches_oracle_on_soft_blob():
    yy, xx = np.mgrid[0:8, 0:8]
    gt = ((yy - 3.5) ** 2 + (xx - 3) ** 2 < 6).astype(float)
    pred = np.clip(gt * 0.8 + 0.1 * np.sin(xx + yy), 0, 1)
    assert weighted_f_measure(pred, gt) == pytest.approx(naive_weighted_f(pred, gt), abs=1e-6)


def test_weighted_f_prefers_better_prediction(rng):
    _, gt = random_pair(rng, (16, 16))
    good = np.clip(gt + rng.normal(0, 0.1, gt.shape), 0, 1)
    bad = np.clip(gt + rng.normal(0, 0.4, gt.shape), 0, 1)
    assert weighted_f_measure(good, gt) > weighted_f_measure(bad, gt)


# --- aggregation ----------------------------------------------------------------


def test_single_perfect_prediction_saturates(rng):
    _, gt = random_pair(rng)
    rep = evaluate_predictions([gt], [gt])
    assert rep.f_beta_max == pytest.approx(1.0)
    assert rep.f_beta_adaptive == pytest.approx(1.0)
    assert rep.f_beta_weighted == pytest.approx(1.0)
    assert rep.mae == 0.0 and rep.count == 1


def test_two_image_mae_is_mean(rng):
    pairs = [random_pair(rng) for _ in range(2)]
    rep = evaluate_predictions([p for p, _ in pairs], [g for _, g in pairs])
    assert rep.mae == pytest.approx(np.mean([mae(p, g) for p, g in pairs]), abs=1e-15)


def test_aggregation_matches_recount():
    rng = np.random.default_rng(5)
    pairs = [random_pair(rng, (6, 6)) for _ in range(5)]
    rep = evaluate_predictions([p for p, _ in pairs], [g for _, g in pairs])
    for k in (0, 51, 128, 200, 255):
        counts = [recount_pr(p, g, THRESHOLDS[k]) for p, g in pairs]
        assert rep.precision[k] == pytest.approx(np.mean([c[0] for c in counts]), abs=1e-12)
        assert rep.recall[k] == pytest.approx(np.mean([c[1] for c in counts]), abs=1e-12)
    f_curve = [f_measure(rep.precision[k], rep.recall[k]) for k in range(256)]
    assert rep.f_beta_max == pytest.approx(max(f_curve), abs=1e-12)
    adaptive = []
    for p, g in pairs:
        t = min(1.0, 2 * p.mean())
        adaptive.append(f_measure(*recount_pr(p, g, t)))
    assert rep.f_beta_adaptive == pytest.approx(np.mean(adaptive), abs=1e-12)
    assert 0 <= rep.f_beta_adaptive <= 1 and 0 <= rep.f_beta_max <= 1


def test_thread_count_does_not_change_results(monkeypatch):
    rng = np.random.default_rng(9)
    pairs = [random_pair(rng, (12, 12)) for _ in range(12)]
    preds, gts = [p for p, _ in pairs], [g for _, g in pairs]
    one = evaluate_predictions(preds, gts, threads=1)
    four = evaluate_predictions(preds, gts, threads=4)
    monkeypatch.setenv("PICANET_THREADS", "3")
    env = evaluate_predictions(preds, gts)
    rev = aggregate([image_metrics(p, g) for p, g in zip(preds[::-1], gts[::-1])])
    for other in (four, env, rev):
        for key, value in one.summary().items():
            assert abs(other.summary()[key] - value) <= 1e-9
        assert np.max(np.abs(other.precision - one.precision)) <= 1e-9


def test_aggregate_rejects_empty_and_mismatch():
    with pytest.raises(DataError):
        aggregate([])
    with pytest.raises(DataError):
        evaluate_predictions([np.zeros((2, 2))], [])


def test_report_serializes(rng):
    pred, gt = random_pair(rng)
    rep = evaluate_predictions([pred], [gt])
    d = rep.to_dict()
    assert len(d["precision"]) == 256 and isinstance(d["precision"][0], float)
    assert set(rep.summary()) == {"f_beta_max", "f_beta_adaptive", "f_beta_weighted", "mae", "count"}
    assert isinstance(rep, MetricReport)


class _EchoModel:
    """Predicts the stored masks of the samples it is given."""

    def __init__(self, lookup):
        self.lookup = lookup

    def predict(self, images):
        return np.stack([self.lookup[img.tobytes()] for img in images])


def test_evaluate_model_batches(rng):
    from picanet.data import synth_dataset

    samples = synth_dataset(3, 5, size=16)
    model = _EchoModel({s.image.tobytes(): s.mask for s in samples})
    rep = evaluate_model(model, samples, batch=2)
    assert rep.count == 5 and rep.mae == 0.0 and rep.f_beta_max == pytest.approx(1.0)
    with pytest.raises(DataError):
        evaluate_model(model, [])
