import pytest

from relaynet import gradcheck


@pytest.fixture(scope="module")
def results():
    return gradcheck.run_all(seed=0)


def test_every_component_passes(results):
    failed = [r.line() for r in results if not r.passed]
    assert not failed


def test_covers_every_op(results):
    names = {r.name.split(".")[0].split("[")[0] for r in results}
    for op in ("conv2d", "batchnorm", "relu", "maxpool", "unpool", "concat", "softmax",
               "logistic", "dice", "combined", "network"):
        assert op in names


def test_tolerances(results):
    for r in results:
        if r.name == "network.kink_exclusions":
            continue
        assert r.tolerance == (gradcheck.NETWORK_TOL if r.name.startswith("network") else gradcheck.LAYER_TOL)


@pytest.mark.parametrize("target", ["conv2d.weight", "softmax", "dice", "network.enc1"])
def test_corrupted_gradient_is_reported(target):
    if target.startswith("network"):
        results = gradcheck.check_network(seed=0, corrupt=target)
    elif target == "dice":
        results = gradcheck.check_losses(seed=0, corrupt=target)
    else:
        results = gradcheck.check_layers(seed=0, corrupt=target)
    bad = [r for r in results if not r.passed]
    assert bad and all(r.name.startswith(target) or r.name.startswith("network.enc1") for r in bad)


def test_relative_error_floor():
    assert gradcheck.relative_error([0.0], [1e-9]) < 1e-2
    assert gradcheck.relative_error([1.0], [1.1]) == pytest.approx(0.1 / 1.1)
