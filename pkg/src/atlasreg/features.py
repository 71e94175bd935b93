"""Patch feature extraction behind a pluggable interface.

Classifiers store the extractor id of the features they were trained on, so
a scoring run can look the extractor up again by name. The shipped default
is a 23-dimensional handcrafted descriptor; anything producing a fixed-size
vector per patch can be registered in its place.
"""

from __future__ import annotations

import numpy as np

_EXTRACTORS: dict = {}


def register_extractor(extractor) -> None:
    _EXTRACTORS[extractor.extractor_id] = extractor


def get_extractor(extractor_id: str):
    try:
        return _EXTRACTORS[extractor_id]
    except KeyError:
        raise KeyError(f"unknown feature extractor '{extractor_id}'; "
                       f"registered: {sorted(_EXTRACTORS)}") from None


class FeatureExtractor:
    """Deterministic mapping from patch pixels to a fixed-size vector."""

    extractor_id: str = ""
    dim: int = 0

    def extract(self, pixels: np.ndarray) -> np.ndarray:
        return self.extract_batch(pixels[None, :, :])[0]

    def extract_batch(self, pixels: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class HistGradFeatures(FeatureExtractor):
    """Intensity histogram plus gradient statistics, 23 dimensions:

    [0:16]   16-bin intensity histogram over [0, 1], normalized to sum 1
    [16]     mean intensity
    [17]     intensity standard deviation
    [18]     mean gradient magnitude
    [19:23]  gradient energy per orientation quadrant of [0, pi), normalized

    The first 18 components depend only on the intensity multiset, so they
    are invariant under patch rotation.
    """

    extractor_id = "hist-grad-23"
    n_bins = 16
    n_orientations = 4
    dim = n_bins + 3 + n_orientations

    def extract_batch(self, pixels: np.ndarray) -> np.ndarray:
        px = np.asarray(pixels, dtype=np.float64)
        if px.ndim != 3:
            raise ValueError(f"expected (N, h, w) pixel batch, got {px.shape}")
        n, h, w = px.shape
        npix = h * w

        clipped = np.clip(px, 0.0, 1.0)
        bins = np.minimum((clipped * self.n_bins).astype(np.intp), self.n_bins - 1)
        offset = (np.arange(n, dtype=np.intp)[:, None] * self.n_bins
                  + bins.reshape(n, npix))
        hist = np.bincount(offset.ravel(), minlength=n * self.n_bins)
        hist = hist.reshape(n, self.n_bins).astype(np.float64) / npix

        mean = px.reshape(n, npix).mean(axis=1)
        std = px.reshape(n, npix).std(axis=1)

        gx, gy = np.gradient(px, axis=(1, 2))
        mag2 = gx * gx + gy * gy
        grad_mean = np.sqrt(mag2).reshape(n, npix).mean(axis=1)

        ang = np.mod(np.arctan2(gy, gx), np.pi)
        obin = np.minimum((ang / (np.pi / self.n_orientations)).astype(np.intp),
                          self.n_orientations - 1)
        ooff = (np.arange(n, dtype=np.intp)[:, None] * self.n_orientations
                + obin.reshape(n, npix))
        energy = np.bincount(ooff.ravel(), weights=mag2.reshape(n, npix).ravel(),
                             minlength=n * self.n_orientations)
        energy = energy.reshape(n, self.n_orientations)
        total = energy.sum(axis=1, keepdims=True)
        orient = np.divide(energy, total, out=np.zeros_like(energy),
                           where=total > 0)

        return np.concatenate(
            [hist, mean[:, None], std[:, None], grad_mean[:, None], orient],
            axis=1)


register_extractor(HistGradFeatures())
