import math

import numpy as np
import pytest

from shortcutseg.dataio import Dataset
from shortcutseg.errors import DomainError, UsageError
from shortcutseg.metrics import dice, recall
from shortcutseg.phantom import SceneSpec, generate_scene
from shortcutseg.probes import (
    BandSpec,
    PairedEvalReport,
    StabilitySummary,
    aggregate_stability,
    band_index_map,
    banded_dice,
    centroid_distribution,
    frame_stability,
    marker_saliency_ratio,
    paired_shortcut_eval,
    saliency_map,
    translation_sweep,
)
from shortcutseg.segnet import PaddingMode, UNetConfig, init_unet, output_geometry


class AllForeground:
    def predict(self, X):
        X = np.asarray(X)
        return np.ones((X.shape[0],) + X.shape[-2:], dtype=bool)


class Threshold:
    def __init__(self, t=0.5):
        self.t = t

    def predict(self, X):
        return np.asarray(X)[:, 0] > self.t


def passthrough_valid(threshold):
    """Depth-1 valid U-Net whose logit is (input - threshold) via the skip path."""
    m = init_unet(UNetConfig(1, 1, 2, PaddingMode.VALID), 0)
    for t in m.params.values():
        t.data[...] = 0
    p = m.params
    p["enc0.conv1.weight"].data[0, 0, 1, 1] = 1
    p["enc0.conv2.weight"].data[0, 0, 1, 1] = 1
    p["dec0.conv1.weight"].data[0, 4, 1, 1] = 1   # skip channel 0 follows the 4 upsampled channels
    p["dec0.conv2.weight"].data[0, 0, 1, 1] = 1
    p["head.weight"].data[0, 0] = 1
    p["head.bias"].data[0] = -threshold
    return m


# ------------------------------------------------------------------ dice

def test_dice_examples():
    a = np.zeros((3, 3), bool)
    a[0, :3] = True
    b = np.zeros((3, 3), bool)
    b[0, 2] = b[1, 2] = True
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(a, b) == pytest.approx(0.4)
    assert dice(np.zeros(4, bool), np.zeros(4, bool)) == 1.0
    with pytest.raises(DomainError):
        dice(a, np.zeros((2, 2), bool))


def test_dice_symmetric_and_permutation_invariant():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a, b = rng.random(20) < 0.4, rng.random(20) < 0.4
        perm = rng.permutation(20)
        assert dice(a, b) == dice(b, a) == dice(a[perm], b[perm])
        assert (dice(a, b) == 1.0) == bool(np.array_equal(a, b))


def test_recall_empty_gt_is_nan():
    assert math.isnan(recall(np.ones(3, bool), np.zeros(3, bool)))


# ----------------------------------------------------------------- bands

def test_band_map_4x4_two_bands():
    expect = np.ones((4, 4), int)
    expect[1:3, 1:3] = 0
    np.testing.assert_array_equal(band_index_map(4, 4, BandSpec(2)), expect)


def test_band_map_single_band_and_symmetry():
    assert not band_index_map(7, 9, BandSpec(1)).any()
    b = band_index_map(10, 14, BandSpec(5))
    np.testing.assert_array_equal(b, b[::-1])
    np.testing.assert_array_equal(b, b[:, ::-1])
    assert np.bincount(b.ravel()).sum() == 140


def test_band_map_64_counts():
    counts = np.bincount(band_index_map(64, 64, BandSpec(5)).ravel())
    # pixel half-offsets 0.5, 1.5, ... below 6.4, 12.8, 19.2, 25.6 px: nested squares of side 12, 26, 38, 52, 64
    assert counts.tolist() == [144, 676 - 144, 1444 - 676, 2704 - 1444, 4096 - 2704]


def test_banded_perfect_prediction():
    gts = np.stack([generate_scene(SceneSpec(size=32), s).mask for s in range(4)])
    rep = banded_dice(gts, gts)
    for ok, m in zip(rep.defined, rep.band_mean):
        assert not ok or m == 1.0


def test_banded_pred_restricted_to_band0():
    gt = np.ones((10, 10), bool)
    bands = band_index_map(10, 10, BandSpec(5))
    rep = banded_dice((gt & (bands == 0))[None], gt[None])
    assert rep.band_mean == [1.0, 0.0, 0.0, 0.0, 0.0]


def test_banded_matches_bruteforce():
    rng = np.random.default_rng(7)
    preds = rng.random((6, 8, 8)) < 0.5
    gts = rng.random((6, 8, 8)) < 0.3
    n = 4
    rep = banded_dice(preds, gts, BandSpec(n))
    for b in range(n):
        scores = []
        for p, g in zip(preds, gts):
            cells = [(y, x) for y in range(8) for x in range(8)
                     if int(n * max(abs(2 * x + 1 - 8), abs(2 * y + 1 - 8)) / 8) == b]
            G = {c for c in cells if g[c]}
            P = {c for c in cells if p[c]}
            if G:
                scores.append(2 * len(P & G) / (len(P) + len(G)))
        assert rep.n_images[b] == len(scores)
        if scores:
            assert rep.band_mean[b] == pytest.approx(np.mean(scores), abs=1e-12)


def test_banded_single_band_equals_dice():
    rng = np.random.default_rng(1)
    preds, gts = rng.random((5, 6, 6)) < 0.5, rng.random((5, 6, 6)) < 0.5
    rep = banded_dice(preds, gts, BandSpec(1))
    assert [r[0] for r in rep.per_image] == [dice(p, g) for p, g in zip(preds, gts)]


def test_banded_undefined_band_is_nan():
    gt = np.zeros((1, 10, 10), bool)
    gt[0, 4:6, 4:6] = True
    rep = banded_dice(gt, gt)
    assert rep.defined == [True, False, False, False, False]
    assert math.isnan(rep.band_mean[4]) and rep.n_images[4] == 0
    assert math.isfinite(rep.spread)


def test_banded_errors():
    with pytest.raises(UsageError):
        banded_dice(np.zeros((0, 4, 4)), np.zeros((0, 4, 4)))
    with pytest.raises(DomainError):
        banded_dice(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


# ------------------------------------------------------------- centroids

def test_centroid_centered_disks():
    y, x = np.mgrid[0:32, 0:32]
    disk = (x - 15.5) ** 2 + (y - 15.5) ** 2 < 25
    assert centroid_distribution([disk] * 5).central_fraction == 1.0


def test_centroid_corner_pixel_and_empty():
    m = np.zeros((16, 16), bool)
    m[0, 0] = True
    rep = centroid_distribution([m, np.zeros((16, 16), bool)], bins=8)
    assert rep.histogram[0, 0] == 1 and rep.histogram.sum() == 1
    assert rep.n_empty == 1


def test_centroid_all_empty():
    with pytest.raises(UsageError):
        centroid_distribution([np.zeros((4, 4), bool)])


def test_centroid_uniform_generator():
    spec = SceneSpec(placement="uniform")
    masks = [generate_scene(spec, i).mask for i in range(600)]
    assert abs(centroid_distribution(masks).central_fraction - 0.25) <= 0.10


# ---------------------------------------------------------------- paired

def toy_set(ids, images, masks):
    return Dataset(images, masks, list(ids))


def test_paired_identical_sets_zero_delta():
    rng = np.random.default_rng(0)
    im = rng.random((4, 1, 8, 8)).astype(np.float32)
    gt = im[:, 0] > 0.4
    ds = toy_set("abcd", im, gt)
    rep = paired_shortcut_eval(Threshold(), ds, ds)
    assert rep.deltas == [0.0] * 4 and rep.mean_delta == 0.0


def test_paired_matches_by_id():
    rng = np.random.default_rng(1)
    im = rng.random((3, 1, 8, 8)).astype(np.float32)
    gt = im[:, 0] > 0.5
    marked = toy_set("xyz", im, gt)
    clean = toy_set("zxy", im[[2, 0, 1]], gt[[2, 0, 1]])
    rep = paired_shortcut_eval(Threshold(), marked, clean)
    assert rep.ids == ["x", "y", "z"] and rep.deltas == [0.0] * 3


def test_paired_unpaired_ids():
    im = np.zeros((2, 1, 4, 4), np.float32)
    m = np.zeros((2, 4, 4), bool)
    with pytest.raises(UsageError):
        paired_shortcut_eval(Threshold(), toy_set("ab", im, m), toy_set("ac", im, m))


def test_paired_report_with_published_values():
    # published-scale numbers in percent: the annotated test set scores higher
    marked = [(76.97, 5.10), (82.06, 6.60), (93.82, 1.79), (76.29, 4.05)]
    clean = [(70.85, 8.24), (78.85, 7.72), (91.84, 4.87), (71.81, 4.86)]
    for (mm, ms), (cm, cs) in zip(marked, clean):
        rep = PairedEvalReport(mm, ms, cm, cs)
        assert rep.mean_delta > 0
        assert set(rep.to_dict()) == {"marked_mean", "marked_std", "clean_mean", "clean_std", "mean_delta"}


# ------------------------------------------------------------- stability

def test_stability_identical_frames():
    frames = np.repeat(np.random.default_rng(0).random((1, 1, 8, 8)), 5, axis=0)
    rep = frame_stability(Threshold(), frames)
    assert rep.curve == [1.0] * 5 and rep.endpoint == 1.0


def test_stability_last_point_is_one_and_gt_curve():
    rng = np.random.default_rng(2)
    frames = rng.random((4, 1, 8, 8))
    gt = frames[0, 0] > 0.5
    rep = frame_stability(Threshold(), frames, gt_mask=gt)
    assert rep.curve[-1] == 1.0 and rep.gt_curve[0] == 1.0


def test_stability_ignoring_markers():
    frames = np.zeros((3, 1, 8, 8), np.float32)
    frames[:, 0, 2:5, 2:5] = 0.8
    frames[1:, 0, 7, 7] = 0.3   # "marker" below the threshold
    assert frame_stability(Threshold(), frames).endpoint == 1.0


def test_stability_needs_two_frames():
    with pytest.raises(UsageError):
        frame_stability(Threshold(), np.zeros((1, 1, 4, 4)))


def test_stability_summary_with_published_values():
    # published-scale numbers: mitigation is higher and tighter in every column
    base = [(89.07, 14.9), (94.75, 12.6), (91.51, 19.6), (82.42, 10.1)]
    mit = [(98.39, 1.3), (98.53, 1.9), (95.38, 8.9), (97.00, 1.2)]
    for (bm, bs), (mm, ms) in zip(base, mit):
        b, m = StabilitySummary(bm, bs, []), StabilitySummary(mm, ms, [])
        assert m.mean > b.mean and m.std < b.std


def test_aggregate_stability():
    reps = [frame_stability(Threshold(), np.stack([np.full((1, 2, 2), v), np.full((1, 2, 2), w)]))
            for v, w in ((0.9, 0.9), (0.1, 0.9))]
    s = aggregate_stability(reps)
    assert s.endpoints == [1.0, 0.0] and s.mean == 0.5 and s.std == 0.5


# ----------------------------------------------------------------- sweep

def test_sweep_all_foreground_recall_one():
    rep = translation_sweep(AllForeground(), SceneSpec(), n_steps=5)
    assert rep.recall == [1.0] * 5
    assert rep.offsets[0] == 0.0 and rep.offsets[-1] == pytest.approx(31.5)
    assert rep.centers[-1] == (63.0, 31.5)


def test_sweep_ray_angle():
    rep = translation_sweep(AllForeground(), SceneSpec(size=32), n_steps=3, angle=math.pi / 2)
    assert rep.centers[-1] == pytest.approx((15.5, 31.0))


def test_sweep_valid_model_is_position_independent():
    spec = SceneSpec(noise_amplitude=0.0, base_range=(0.3, 0.3), contrast_range=(0.4, 0.4))
    m = passthrough_valid(0.5)
    oh, _, top, _ = output_geometry(m.config, 64, 64)
    rep = translation_sweep(m, spec, n_steps=7, seed=1, max_offset=oh / 2 - 20)
    assert rep.recall_spread < 0.02
    assert min(rep.recall) > 0.98


def test_sweep_needs_two_steps():
    with pytest.raises(UsageError):
        translation_sweep(AllForeground(), SceneSpec(), n_steps=1)


# -------------------------------------------------------------- saliency

def test_saliency_zero_first_layer():
    m = init_unet(UNetConfig(3, 2, 4), 0)
    m.params["enc0.conv1.weight"].data[...] = 0
    im = np.random.default_rng(0).random((3, 16, 16)).astype(np.float32)
    assert not saliency_map(m, im).any()


def test_saliency_nonnegative_and_shaped():
    m = init_unet(UNetConfig(1, 2, 4), 1)
    im = np.random.default_rng(0).random((1, 16, 16)).astype(np.float32)
    for method in ("gradient", "gradcam"):
        s = saliency_map(m, im, method=method)
        assert s.shape == (16, 16) and (s >= 0).all()


def test_saliency_passthrough_is_local():
    m = passthrough_valid(0.0)
    im = np.full((1, 64, 64), 0.5, np.float32)
    s = saliency_map(m, im)
    _, _, top, _ = output_geometry(m.config, 64, 64)
    # logit = input pixel, so the gradient is 1 exactly on the footprint
    assert s[top:64 - top, top:64 - top].min() == 1.0
    assert s.sum() == (64 - 2 * top) ** 2


def test_saliency_errors():
    m = passthrough_valid(0.0)
    with pytest.raises(UsageError):
        saliency_map(m, np.zeros((1, 64, 64), np.float32), method="gradcam")
    with pytest.raises(UsageError):
        saliency_map(init_unet(UNetConfig(1, 1, 2), 0), np.zeros((1, 8, 8)), method="lime")


def test_marker_ratio():
    sal = np.ones((8, 8))
    marker = np.zeros((8, 8), bool)
    marker[0, :4] = True
    sal[marker] = 3.0
    lesion = np.zeros((8, 8), bool)
    lesion[4:, 4:] = True
    sal[lesion] = 100.0  # excluded from the background pool
    assert marker_saliency_ratio(sal, marker, lesion, np.random.default_rng(0)) == 3.0
    with pytest.raises(UsageError):
        marker_saliency_ratio(sal, np.zeros((8, 8), bool), lesion, np.random.default_rng(0))
