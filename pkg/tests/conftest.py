"""Shared fixtures: a tiny model config and a small three-site dataset."""

from __future__ import annotations

import numpy as np
import pytest

from roi_cae.config import ExperimentConfig
from roi_cae.model import CaeConfig
from roi_cae.phantom import SiteProfile, generate_dataset, load_samples
from roi_cae.trainer import TrainConfig

TINY_CANVAS = (48, 32)
PER_SITE = 20


def numeric_grad(func, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of ``array``."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        index = it.multi_index
        saved = array[index]
        array[index] = saved + eps
        plus = func(array)
        array[index] = saved - eps
        minus = func(array)
        array[index] = saved
        grad[index] = (plus - minus) / (2.0 * eps)
    return grad


@pytest.fixture(scope="session")
def tiny_config() -> CaeConfig:
    return CaeConfig(
        input_height=TINY_CANVAS[1],
        input_width=TINY_CANVAS[0],
        channels=(2, 4, 4, 8),
        bottleneck_channels=8,
        latent_dim=8,
    )


@pytest.fixture(scope="session")
def tiny_profiles() -> list[SiteProfile]:
    return [
        SiteProfile("site_a", 1.0, 1.0, 0.10, 1.5, 0.10, 0.00, (60, 40)),
        SiteProfile("site_b", 0.9, 1.05, 0.15, 1.5, 0.15, 0.05, (64, 42)),
        SiteProfile("site_c", 0.6, 1.3, 0.30, 2.0, 0.30, 0.10, (72, 44)),
    ]


@pytest.fixture(scope="session")
def tiny_train_config() -> TrainConfig:
    return TrainConfig(
        batch_size=4,
        max_epochs_p1=2,
        max_epochs_p2=2,
        seeds=(3,),
        ablation_horizon=1,
    )


@pytest.fixture(scope="session")
def experiment_config(tiny_config, tiny_profiles, tiny_train_config) -> ExperimentConfig:
    return ExperimentConfig(
        train=tiny_train_config, model=tiny_config, sites=list(tiny_profiles)
    )


@pytest.fixture(scope="session")
def dataset(tmp_path_factory, tiny_profiles):
    root = tmp_path_factory.mktemp("dataset")
    return generate_dataset(PER_SITE, tiny_profiles, TINY_CANVAS, 7, root)


@pytest.fixture(scope="session")
def samples(dataset):
    return load_samples(dataset)
