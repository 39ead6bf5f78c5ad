import numpy as np
import pytest

from relaynet import data, model, training
from relaynet.config import resolve
from relaynet.optim import NumericError


@pytest.fixture(scope="module")
def phantoms():
    return [data.generate_phantom(data.PhantomSpec(height=64, width=64, seed=i)) for i in range(2)]


def small_cfg(**kw):
    base = dict(depth=2, channels=4, batch_size=3, slice_width=16, epochs=1, seed=0)
    base.update(kw)
    return resolve(**base)


def test_one_epoch_step_count(phantoms):
    cfg = small_cfg()
    result = training.fit(phantoms, cfg)
    slices = sum(64 // 16 for _ in phantoms)
    assert result.steps == -(-slices // 3) == data.count_batches(phantoms, 16, 3)
    assert len(result.epoch_losses) == 1
    assert all(np.isfinite(r.loss) for r in result.history)


def test_max_steps_cap(phantoms):
    result = training.fit(phantoms, small_cfg(epochs=50, max_steps=5))
    assert result.steps == 5


def test_lr_follows_schedule(phantoms):
    result = training.fit(phantoms, small_cfg(epochs=3, decay_every=1, batch_size=8))
    assert [r.lr for r in result.history] == pytest.approx([0.1, 0.01, 0.001])


def test_same_seed_same_weights(phantoms):
    a = training.fit(phantoms, small_cfg(max_steps=3))
    b = training.fit(phantoms, small_cfg(max_steps=3))
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = training.fit(phantoms, small_cfg(max_steps=3, seed=1))
    assert not np.array_equal(a.params["enc1.conv.weight"], c.params["enc1.conv.weight"])


def test_loss_decreases(phantoms):
    result = training.fit(phantoms, small_cfg(epochs=100, max_steps=40, channels=8, batch_size=4))
    first = np.mean([r.loss for r in result.history[:5]])
    last = np.mean([r.loss for r in result.history[-5:]])
    assert last < first


def test_nan_loss_aborts_with_last_good_params(phantoms):
    cfg = small_cfg(epochs=3)
    params = model.init_params(cfg.model_config(), 0)
    calls = []

    def poison(epoch, result):
        calls.append(epoch)
        params["classifier.bias"][0] = np.nan

    with pytest.raises(NumericError) as info:
        training.fit(phantoms, cfg, params=params, on_epoch_end=poison)
    assert calls == [0]
    assert info.value.result.steps == data.count_batches(phantoms, 16, 3)
