"""Session-wide artifacts: one small trained network, its images and vulnerability lists."""

import pytest

from decoy.engine import generate_dataset, quantize, train, with_backend
from decoy.image import build_image
from decoy.search import rank_vulnerable_weights, search_code_vulnerabilities
from decoy.vm import load_kernel

SPEC = [16, 32, 32, 4]
STEP_BUDGET = 20_000


@pytest.fixture(scope="session")
def dataset():
    return generate_dataset(7, 30, 4, 16)


@pytest.fixture(scope="session")
def float_net(dataset):
    return train(SPEC, dataset, epochs=40, lr=0.1, seed=11)


@pytest.fixture(scope="session")
def net(float_net):
    return quantize(float_net)


@pytest.fixture(scope="session")
def vm_net(net):
    return with_backend(net, [-1])


@pytest.fixture(scope="session")
def kernel():
    return load_kernel()


@pytest.fixture(scope="session")
def image(net):
    return build_image(net)


@pytest.fixture(scope="session")
def vm_image(vm_net, kernel):
    return build_image(vm_net, kernel)


@pytest.fixture(scope="session")
def model_vulns(net, dataset):
    return rank_vulnerable_weights(net, dataset, 20)


@pytest.fixture(scope="session")
def code_vulns(vm_image, dataset):
    return search_code_vulnerabilities(vm_image, dataset, step_budget=STEP_BUDGET)
