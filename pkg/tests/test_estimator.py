import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from scribblevc import ScribbleVCSegmenter
from scribblevc.dataset import GeneratorConfig, make_arrays

TINY = dict(base_channels=4, num_heads=(1, 1, 2, 2), epochs=1, batch_size=2)


@pytest.fixture(scope="module")
def data():
    return make_arrays(3, GeneratorConfig(32, 32, num_classes=3), seed=2)


@pytest.fixture(scope="module")
def fitted(data):
    images, masks, scribbles = data
    return ScribbleVCSegmenter(**TINY).fit(images, scribbles, validation_data=(images, masks))


def test_get_params_and_clone():
    est = ScribbleVCSegmenter(lr=5e-4, epochs=3)
    params = est.get_params()
    assert params["lr"] == 5e-4 and params["epochs"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(policy="cnn")
    assert est.policy == "cnn"


def test_unfitted_predict_raises(data):
    with pytest.raises(NotFittedError):
        ScribbleVCSegmenter().predict(data[0])


def test_fit_infers_classes(fitted):
    assert fitted.n_classes_ == 3
    assert fitted.classes_.tolist() == [0, 1, 2]
    assert fitted.image_size_ == 32
    assert len(fitted.history_) == 1 and fitted.history_[0]["val_dice_mean"] is not None


def test_predict_shapes(fitted, data):
    images = data[0]
    proba = fitted.predict_proba(images)
    assert proba.shape == (3, 3, 32, 32)
    assert np.allclose(proba.sum(1), 1, atol=1e-5)
    pred = fitted.predict(images)
    assert pred.shape == (3, 32, 32) and pred.max() < 3
    assert fitted.predict(images[0]).shape == (1, 32, 32)


def test_score_is_validation_dice(fitted, data):
    images, masks, _ = data
    assert fitted.score(images, masks) == pytest.approx(fitted.history_[-1]["val_dice_mean"])


def test_input_validation(data):
    images, masks, scribbles = data
    est = ScribbleVCSegmenter(**TINY)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        est.fit(images * 2, scribbles)
    with pytest.raises(ValueError, match="do not match"):
        est.fit(images, scribbles[:, :16])
    with pytest.raises(ValueError, match="no labeled"):
        est.fit(images, np.full_like(scribbles, 3))
    with pytest.raises(ValueError, match="0..2"):
        ScribbleVCSegmenter(num_classes=2, **TINY).fit(images, scribbles)
    with pytest.raises(ValueError, match="square"):
        est.fit(images[:, :, :16], scribbles[:, :, :16])
    with pytest.raises(ValueError, match="policy"):
        ScribbleVCSegmenter(policy="max", **TINY).fit(images, scribbles)


def test_predict_rejects_other_size(fitted):
    with pytest.raises(ValueError, match="32x32"):
        fitted.predict(np.zeros((1, 64, 64)))


def test_fit_is_reproducible(data):
    images, _, scribbles = data
    a = ScribbleVCSegmenter(**TINY).fit(images, scribbles).predict_proba(images)
    b = ScribbleVCSegmenter(**TINY).fit(images, scribbles).predict_proba(images)
    assert np.array_equal(a, b)
