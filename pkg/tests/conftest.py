import numpy as np
import pytest
import torch

from latte.backend import ToyBackendSpec, train_toy_backend
from latte.data import synth_real_image, synth_toy_dataset


def make_images(count, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return torch.stack(
        [torch.from_numpy(synth_real_image(rng, size)).permute(2, 0, 1) for _ in range(count)]
    ).float()


@pytest.fixture(scope="session")
def toy_images():
    return make_images(160)


@pytest.fixture(scope="session")
def toy_backend(toy_images):
    spec = ToyBackendSpec(ae_epochs=4, denoiser_epochs=5, seed=1)
    return train_toy_backend(spec, toy_images)


@pytest.fixture(scope="session")
def toy_manifest(toy_backend, tmp_path_factory):
    root = tmp_path_factory.mktemp("toy-dataset")
    return synth_toy_dataset(root, count=80, image_size=32, seed=5, backend=toy_backend)
