import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from relaynet import data
from relaynet.estimator import ReLayNetSegmenter, check_images, check_label_maps


@pytest.fixture(scope="module")
def xy():
    scans = [data.generate_phantom(data.PhantomSpec(height=64, width=32, seed=i)) for i in range(3)]
    X = np.stack([s.image[0, 0] for s in scans])
    y = np.stack([s.labels for s in scans])
    return X, y


def tiny(**kw):
    base = dict(depth=2, channels=4, batch_size=4, slice_width=16, epochs=2, random_state=0)
    base.update(kw)
    return ReLayNetSegmenter(**base)


def test_params_roundtrip():
    est = tiny(omega1=3.0)
    params = est.get_params()
    assert params["omega1"] == 3.0 and params["depth"] == 2
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(channels=6)
    assert est.channels == 6


def test_fit_predict_shapes(xy):
    X, y = xy
    est = tiny().fit(X, y)
    assert est.predict(X).shape == y.shape
    proba = est.predict_proba(X[:1])
    assert proba.shape == (1, 10, 64, 32)
    assert np.allclose(proba.sum(axis=1), 1, atol=1e-5)
    assert 0 <= est.score(X, y) <= 1
    assert len(est.history_) == est.run_config_.epochs * 2
    assert list(est.classes_) == list(range(10))


def test_fit_is_deterministic(xy):
    X, y = xy
    a, b = tiny().fit(X, y), tiny().fit(X, y)
    assert all(np.array_equal(a.params_[k], b.params_[k]) for k in a.params_)


def test_preset_overrides(xy):
    est = tiny(preset="BL-1", depth=3)
    cfg = est._run_config()
    assert cfg.skip_mode == "none" and cfg.depth == 3


def test_unfitted_raises(xy):
    with pytest.raises(NotFittedError):
        tiny().predict(xy[0])


def test_checkpoint_roundtrip(tmp_path, xy):
    X, y = xy
    est = tiny(epochs=1).fit(X, y)
    est.save(tmp_path / "ck")
    back = ReLayNetSegmenter.from_checkpoint(tmp_path / "ck")
    assert np.array_equal(back.predict_proba(X), est.predict_proba(X))


def test_input_validation():
    with pytest.raises(ValueError):
        check_images(np.zeros((2, 3, 4, 4)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 4, 4), np.nan))
    X = check_images(np.zeros((2, 4, 4)))
    assert X.shape == (2, 1, 4, 4)
    with pytest.raises(ValueError):
        check_label_maps(np.zeros((2, 4, 5)), X)
    with pytest.raises(ValueError):
        check_label_maps(np.full((2, 4, 4), 10), X)
    with pytest.raises(ValueError):
        check_label_maps(np.full((2, 4, 4), 0.5), X)
    assert check_label_maps(np.ones((2, 4, 4)), X).dtype == np.int64


def test_bad_hyperparameters(xy):
    with pytest.raises(ValueError):
        tiny(preset="BL-42").fit(*xy)
    with pytest.raises(ValueError):
        tiny(random_state=np.random.RandomState(0)).fit(*xy)
    with pytest.raises(ValueError):
        tiny(slice_width=10).fit(*xy)
