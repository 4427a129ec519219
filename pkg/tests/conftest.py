"""Shared fixtures: tiny model configuration, frame blocks and synthetic datasets."""

from pathlib import Path

import numpy as np
import pytest

from relward.core.audio import center_block, synthesize_clip, synthesize_dataset, write_manifest
from relward.core.model import init_model, tiny_config
from relward.core.settings import RunSettings


def tiny_blocks(count: int, seed: int = 0, classes: int = 3):
    """Centered frame blocks of synthetic clips, framed for the tiny configuration."""
    cfg = tiny_config()
    labels = [i % classes for i in range(count)]
    blocks = [
        center_block(synthesize_clip(label, seed * 1_000_003 + i).buffer, cfg.frame_len, cfg.hop, cfg.frames)
        for i, label in enumerate(labels)
    ]
    return blocks, labels


def write_tiny_config(path: Path, **overrides) -> Path:
    """Settings file selecting the tiny model (plus any ``section.key`` overrides)."""
    settings = RunSettings()
    for key, value in tiny_config().to_dict().items():
        settings.set(f"model.{key}", value)
    for key, value in overrides.items():
        settings.set(key, value)
    return settings.save(path)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def make_model():
    """Factory for tiny models; relevance output layers are random unless asked otherwise."""

    def factory(variant="A-R,M-R", seed=0, zero_output=False, **overrides):
        return init_model(tiny_config(**overrides), variant, seed, zero_relevance_output=zero_output)

    return factory


@pytest.fixture
def blocks():
    return tiny_blocks(4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_dataset(tmp_path):
    """24 balanced clean clips over 3 classes plus their manifest."""
    out = tmp_path / "data"
    entries = synthesize_dataset(out, 24, seed=3, num_classes=3)
    return write_manifest(out / "manifest.tsv", entries)


@pytest.fixture
def tiny_config_file(tmp_path):
    return write_tiny_config(tmp_path / "tiny.txt")
