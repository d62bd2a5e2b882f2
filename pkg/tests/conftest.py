"""Shared fixtures: tiny profiles, a small synthetic dataset and frozen networks."""

import pytest

from til.config import NetworkProfile, SynthConfig, TrainConfig
from til.synthdata import build_dataset
from til.training import FrozenNetworks, train_embedder, train_map_estimator

TINY_WIDTH = 4


@pytest.fixture(scope="session")
def tiny_profile():
    """64 px profile with a narrow channel multiplier."""
    return NetworkProfile(name="reduced", base_width=4, resolution=64)


@pytest.fixture(scope="session")
def micro_profile():
    """Smallest legal profile; too small for the deep-template generator."""
    return NetworkProfile(name="reduced", base_width=2, resolution=32)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_profile):
    """Four fingers, two impressions each; the last two fingers are the eval split."""
    return build_dataset(
        4, 2, tiny_profile, seed=3, eval_fingers=2, config=SynthConfig(workers=2)
    )


@pytest.fixture
def train_config(tiny_profile):
    return TrainConfig(
        profile=tiny_profile,
        batch_size=2,
        total_d_steps=1,
        supervised_epochs=1,
        checkpoint_every=0,
        device="cpu",
        seed=5,
    )


@pytest.fixture(scope="session")
def frozen_networks(tiny_dataset, tiny_profile, tmp_path_factory):
    """Embedder-A and map estimator trained for one epoch on the train split."""
    cfg = TrainConfig(
        profile=tiny_profile, batch_size=2, supervised_epochs=1, device="cpu", seed=11
    )
    train = tiny_dataset.split("train")
    root = tmp_path_factory.mktemp("frozen")
    embedder = train_embedder(train, cfg, "A", root / "embedder-a", width=TINY_WIDTH)
    estimator = train_map_estimator(train, cfg, root / "map-estimator", width=TINY_WIDTH)
    return FrozenNetworks(
        embedder_a=embedder.networks["embedder"],
        map_estimator=estimator.networks["map_estimator"],
    ), root
