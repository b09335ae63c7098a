import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from shortcutseg.errors import DomainError, UsageError
from shortcutseg.estimators import MarkerInpainter, UNetSegmenter, check_images, check_masks
from shortcutseg.segnet import UNetConfig, init_unet


def disks(n=8, size=16, r=4):
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (xx - (size - 1) / 2) ** 2 + (yy - (size - 1) / 2) ** 2 <= r * r
    rng = np.random.default_rng(0)
    X = np.stack([(0.1 + 0.8 * mask + 0.05 * rng.random((size, size)))[None] for _ in range(n)])
    return X.astype(np.float32), np.repeat(mask[None], n, axis=0)


def test_check_images():
    assert check_images(np.zeros((2, 4, 4))).shape == (2, 1, 4, 4)
    assert check_images(np.zeros((2, 3, 4, 4), np.uint8)).dtype == np.float32
    for bad in (np.zeros((4, 4)), np.zeros((0, 1, 4, 4)), np.array([["a"]])):
        with pytest.raises(UsageError):
            check_images(bad)
    with pytest.raises(UsageError):
        check_images(np.zeros((1, 3, 4, 4)), channels=1)
    with pytest.raises(DomainError):
        check_images(np.full((1, 1, 2, 2), np.nan))


def test_check_masks():
    assert check_masks(np.ones((2, 1, 3, 3))).dtype == bool
    with pytest.raises(DomainError):
        check_masks(np.full((1, 3, 3), 0.5))
    with pytest.raises(UsageError):
        check_masks(np.zeros((2, 3, 3)), np.zeros((3, 1, 3, 3)))


def test_params_and_clone():
    est = UNetSegmenter(depth=2, base_channels=4, epochs=3)
    assert est.get_params()["depth"] == 2
    c = clone(est)
    assert c.get_params() == est.get_params() and not hasattr(c, "model_")


def test_unfitted_predict():
    with pytest.raises(NotFittedError):
        UNetSegmenter().predict(np.zeros((1, 1, 8, 8)))


def test_fit_predict_score():
    X, y = disks()
    est = UNetSegmenter(depth=2, base_channels=4, epochs=30, batch_size=4, learning_rate=1e-2,
                        validation_fraction=0.25, random_state=1).fit(X, y)
    assert len(est.history_.val_dice) == 30
    assert est.predict(X).shape == y.shape
    assert est.predict_proba(X).shape == y.shape
    assert est.score(X, y) > 0.9


def test_fit_deterministic():
    X, y = disks()
    a = UNetSegmenter(depth=1, base_channels=2, epochs=2, random_state=4).fit(X, y)
    b = UNetSegmenter(depth=1, base_channels=2, epochs=2, random_state=4).fit(X, y)
    np.testing.assert_array_equal(a.predict_proba(X), b.predict_proba(X))


def test_from_model_wraps_segmodel():
    m = init_unet(UNetConfig(3, 1, 2), 0)
    est = UNetSegmenter.from_model(m, threshold=0.3)
    assert est.depth == 1 and est.threshold == 0.3
    assert est.predict(np.zeros((2, 3, 8, 8))).shape == (2, 8, 8)
    with pytest.raises(UsageError):
        est.predict(np.zeros((2, 1, 8, 8)))


def test_inpainter_removes_markers_and_pipelines():
    X = np.full((2, 3, 12, 12), 0.3, np.float32)
    X[:, :, 5:7, 5:7] = np.array([1.0, 0.85, 0.1], np.float32)[:, None, None]
    inp = MarkerInpainter().fit(X)
    assert inp.detect(X)[0].sum() == 16  # 2x2 block grown by one pixel
    np.testing.assert_allclose(inp.transform(X), 0.3, atol=1e-6)
    pipe = make_pipeline(MarkerInpainter(), UNetSegmenter.from_model(init_unet(UNetConfig(3, 1, 2), 0)))
    assert pipe.predict(X).shape == (2, 12, 12)


def test_inpainter_bad_tolerance():
    with pytest.raises(UsageError):
        MarkerInpainter(tolerance=0.7).fit(np.zeros((1, 3, 4, 4)))
