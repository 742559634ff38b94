"""Shared fixtures: small architectures and quick synthetic datasets.

Full-size settings only appear in the acceptance tests; everything
else runs on shrunken nets so the suite stays fast.
"""

from __future__ import annotations

import numpy as np
import pytest

from adaptids.flows import LabeledFlow
from adaptids.heads import (KIND_DOCPP, KIND_OPENMAX, OpenMaxConfig,
                            RESERVED_TRAIN_LABEL)
from adaptids.lifecycle import train_full_model
from adaptids.model import Architecture, TrainConfig
from adaptids.synthetic import (default_profile_pool, generate_synthetic,
                                train_test_split)


def small_arch(n_classes: int, input_dim: int = 20000) -> Architecture:
    """Real input size, thin layers, long stride: fast but honest."""
    return Architecture(input_dim=input_dim, conv_width=20,
                        conv_channels=6, conv_stride=100,
                        fc1_units=32, n_classes=n_classes)


def quick_cfg(epochs: int = 5, seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=16, learning_rate=2e-3,
                       shuffle_seed=seed)


@pytest.fixture(scope="session")
def pool6():
    return default_profile_pool(6)


@pytest.fixture(scope="session")
def small_dataset(pool6):
    """60 flows per class over 5 classes, split 70/30."""
    flows = generate_synthetic(pool6[:5], flows_per_class=60, seed=41)
    return train_test_split(flows, test_fraction=0.3, seed=42)


def relabel(flows, old: str, new: str):
    return [LabeledFlow(tensor=f.tensor, label=new if f.label == old
                        else f.label, source=f.source, key=f.key)
            for f in flows]


def train_quick_model(train_flows, class_list, head, unknown_train=None,
                      epochs=5, seed=0, posttrain_epochs=0):
    """Train a small model on prepared flows."""
    data = [f for f in train_flows if f.label in class_list]
    if unknown_train is not None:
        data += relabel([f for f in train_flows
                         if f.label == unknown_train],
                        unknown_train, RESERVED_TRAIN_LABEL)
    openmax_cfg = OpenMaxConfig(tail_size=10, alpha=3) \
        if head == KIND_OPENMAX else None
    result = train_full_model(data, class_list, head, quick_cfg(epochs,
                                                                seed),
                              arch=small_arch(len(class_list)),
                              threshold=0.5, openmax_cfg=openmax_cfg,
                              seed=seed,
                              posttrain_epochs=posttrain_epochs)
    return result["model"]


@pytest.fixture(scope="session")
def quick_docpp(small_dataset):
    """3 known classes, one rejection class, one label never seen."""
    train_flows, test_flows = small_dataset
    labels = sorted({f.label for f in train_flows})
    known, unknown_train, novelty = labels[:3], labels[3], labels[4]
    model = train_quick_model(train_flows, known, KIND_DOCPP,
                              unknown_train=unknown_train)
    return {"model": model, "known": known, "unknown_train": unknown_train,
            "novelty": novelty, "train": train_flows, "test": test_flows}


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)
