"""Shared fixtures: a tiny synthetic corpus and a briefly trained toy model."""

import numpy as np
import pytest

from uncertseg.dataset import GeneratorParams, generate_volume
from uncertseg.rng import RngState
from uncertseg.train import TrainConfig, train

TOY_PARAMS = GeneratorParams(
    height=32,
    width=32,
    bscans=8,
    thickness_range=(0.16, 0.28),  # thick enough for an interior at 32 px
    disruption_rate=0.10,
    shadow_rate=0.12,
    noise_level=0.30,
)


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.astype(bool).copy()
    h, w = out.shape
    for _ in range(radius):
        p = np.pad(out, 1)
        grown = np.zeros_like(out)
        for dy in (0, 1, 2):
            for dx in (0, 1, 2):
                grown |= p[dy : dy + h, dx : dx + w]
        out = grown
    return out


def boundary_band(mask: np.ndarray) -> np.ndarray:
    """One-pixel band on both sides of the layer interface."""
    m = mask.astype(bool)
    return _dilate(m, 1) & ~(~_dilate(~m, 1))


def interior_core(mask: np.ndarray, margin: int = 2) -> np.ndarray:
    """Mask pixels at least ``margin`` pixels from any background pixel."""
    return ~_dilate(~mask.astype(bool), margin)


def make_toy_volumes(n: int, seed: int, params: GeneratorParams = TOY_PARAMS):
    diseases = ("DME", "RVO", "earlyAMD")
    from dataclasses import replace

    vols = []
    for i in range(n):
        p = replace(params, disease_tag=diseases[i % len(diseases)])
        vols.append(generate_volume(p, RngState(seed).derive(i + 1), f"toy{i:02d}"))
    return vols


@pytest.fixture(scope="session")
def toy_corpus():
    train_vols = make_toy_volumes(4, seed=100)
    val_vols = make_toy_volumes(1, seed=200)
    test_vols = make_toy_volumes(2, seed=300)
    return train_vols, val_vols, test_vols


@pytest.fixture(scope="session")
def toy_trained(toy_corpus):
    """A u2net trained for a few epochs on the toy corpus (cpu-seconds)."""
    train_vols, val_vols, _ = toy_corpus
    images = np.concatenate([v.bscans for v in train_vols])
    masks = np.concatenate([v.masks for v in train_vols])
    config = TrainConfig(
        arch="u2net", lr0=2e-3, max_epochs=8, seed=5, base_channels=4, weight_decay=1e-4
    )
    best, _, history = train(config, (images, masks), [(v.bscans, v.masks) for v in val_vols])
    return best, history
