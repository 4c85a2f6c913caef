"""Shared builders for the test suite."""

import numpy as np
import pytest

from mdrank.data import Item, QuerySession
from mdrank.models import ModelConfig


def make_session(
    rng: np.random.Generator,
    n_items: int,
    feature_dim: int,
    domain: int = 0,
    query_id: str = "q",
    timestamp: int = 0,
    ensure_positive: bool = True,
) -> QuerySession:
    """Random session with binary labels; at least one positive by default."""
    features = rng.normal(size=(n_items, feature_dim))
    labels = (rng.random(n_items) < 0.3).astype(float)
    if ensure_positive and labels.sum() == 0:
        labels[int(rng.integers(n_items))] = 1.0
    items = [Item(features=features[i], label=labels[i]) for i in range(n_items)]
    return QuerySession(query_id=query_id, domain=domain, timestamp=timestamp, items=items)


def tiny_config(variant: str = "baseline", **overrides) -> ModelConfig:
    """Small dimensions so gradient and equality checks stay fast."""
    base = dict(
        variant=variant,
        feature_dim=5,
        n_domains=2,
        trunk_hidden=(6,),
        token_dim=4,
        transformer_layers=1,
        heads=1,
        final_hidden=(5,),
        classifier_hidden=(4,),
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(7)
