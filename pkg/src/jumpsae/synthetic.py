"""Planted-dictionary activations with known ground truth, and recovery scoring."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class PlantedDictionary:
    """``directions`` is F x n with unit-norm rows; features fire independently with ``p``."""

    directions: np.ndarray
    p: float
    magnitude_low: float = 0.5
    magnitude_high: float = 1.5
    noise_scale: float = 0.0

    def __post_init__(self):
        if not 0 < self.p < 1:
            raise ValueError("activation probability must lie in (0, 1)")
        if self.directions.ndim != 2 or self.directions.shape[0] < 1:
            raise ValueError("need at least one feature direction")
        norms = np.linalg.norm(self.directions, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-9):
            raise ValueError("feature directions must be unit norm")

    @property
    def n_features(self) -> int:
        return self.directions.shape[0]

    @property
    def dim(self) -> int:
        return self.directions.shape[1]

    @property
    def expected_l0(self) -> float:
        return self.p * self.n_features

    @classmethod
    def random(cls, n_features: int, dim: int, expected_l0: float, seed: int, **kwargs) -> PlantedDictionary:
        rng = np.random.default_rng(seed)
        d = rng.normal(size=(n_features, dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return cls(d, expected_l0 / n_features, **kwargs)


def generate_planted_activations(dictionary: PlantedDictionary, count: int, seed, dtype=np.float64):
    """Return ``(rows, codes)``: rows = codes @ directions + noise."""
    rng = np.random.default_rng(seed)
    active = rng.random((count, dictionary.n_features)) < dictionary.p
    mags = rng.uniform(dictionary.magnitude_low, dictionary.magnitude_high, size=active.shape)
    codes = np.where(active, mags, 0.0)
    rows = codes @ dictionary.directions
    if dictionary.noise_scale:
        rows += rng.normal(scale=dictionary.noise_scale, size=rows.shape)
    return rows.astype(dtype), codes


def planted_batches(dictionary: PlantedDictionary, batch_size: int, seed: int, scale: float = 1.0):
    """Endless deterministic stream of planted batches divided by ``scale``."""
    k = 0
    while True:
        rows, _ = generate_planted_activations(dictionary, batch_size, (seed, k))
        yield rows / scale
        k += 1


def greedy_match(planted: np.ndarray, w_dec: np.ndarray) -> np.ndarray:
    """Cosine of each planted direction (rows of ``planted``) with its matched decoder column.

    Pairs are taken in order of decreasing cosine, each decoder column used at
    most once. Unmatched planted directions (more features than columns) get -inf.
    """
    p = planted / np.linalg.norm(planted, axis=1, keepdims=True)
    d = w_dec / np.linalg.norm(w_dec, axis=0, keepdims=True)
    cos = p @ d
    order = np.argsort(-cos, axis=None, kind="stable")
    matched = np.full(p.shape[0], -np.inf)
    used_rows = np.zeros(p.shape[0], bool)
    used_cols = np.zeros(d.shape[1], bool)
    remaining = min(p.shape[0], d.shape[1])
    for flat in order:
        i, j = divmod(int(flat), d.shape[1])
        if used_rows[i] or used_cols[j]:
            continue
        matched[i] = cos[i, j]
        used_rows[i] = used_cols[j] = True
        remaining -= 1
        if remaining == 0:
            break
    return matched


def recovery_fraction(planted: np.ndarray, w_dec: np.ndarray, threshold: float = 0.9) -> float:
    return float(np.mean(greedy_match(planted, w_dec) > threshold))
