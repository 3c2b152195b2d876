"""Synthetic projection datasets from analytic Gaussian-blob phantoms.

A phantom is a set of 3D Gaussian blobs inside the unit ball; object
coordinates map the unit ball onto the inscribed disk of the image, so the
projection of each blob is an exact 2D Gaussian sampled on the pixel grid
(no quadrature error beyond the sampling itself). Each simulated image is
a projection at a Haar-uniform random orientation, multiplied by its
defocus group's CTF, plus white Gaussian noise scaled to the requested SNR.

Noise streams are counter-based and keyed by (seed, image index), so the
output is bit-identical no matter how the image loop is scheduled.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cryoclass.ctf import CtfParams, apply_ctf, ctf_grid
from cryoclass.geometry import quat_to_matrix
from cryoclass.stack import GroundTruth, ImageStack


@dataclass
class Phantom:
    """Gaussian blobs: centers inside the unit ball, widths and weights per blob.

    A blob contributes weight / (2 pi sigma^2) * exp(-|x - c|^2 / (2 sigma^2))
    to the 3D density.
    """

    centers: np.ndarray  # (B, 3)
    sigmas: np.ndarray  # (B,)
    weights: np.ndarray  # (B,)

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        self.sigmas = np.atleast_1d(np.asarray(self.sigmas, dtype=np.float64))
        self.weights = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        b = self.centers.shape[0]
        if b < 1 or self.centers.shape != (b, 3):
            raise ValueError("centers must have shape (B, 3) with B >= 1")
        if self.sigmas.shape != (b,) or self.weights.shape != (b,):
            raise ValueError("sigmas and weights must match the number of blobs")
        if np.any(self.sigmas <= 0):
            raise ValueError("all blob sigmas must be positive")
        if np.any(np.linalg.norm(self.centers, axis=1) > 1.0):
            raise ValueError("blob centers must lie within the unit ball")

    @property
    def n_blobs(self):
        return self.centers.shape[0]


def random_phantom(n_blobs=12, seed=7, max_radius=0.55, sigma_range=(0.07, 0.18), weight_range=(0.5, 1.5)):
    """Asymmetric blob phantom drawn deterministically from a seed."""
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_blobs, 3))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= max_radius * rng.uniform(0.15, 1.0, size=(n_blobs, 1))
    sigmas = rng.uniform(*sigma_range, size=n_blobs)
    weights = rng.uniform(*weight_range, size=n_blobs)
    return Phantom(centers=centers, sigmas=sigmas, weights=weights)


@dataclass
class SimConfig:
    """Simulation parameters: image count and side, SNR, per-group CTFs, seed."""

    n: int
    p: int
    snr: float
    groups: list[CtfParams] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if len(self.groups) < 1:
            raise ValueError("at least one defocus group is required")
        if self.n < len(self.groups):
            raise ValueError("need n >= number of defocus groups")
        if not self.snr > 0:
            raise ValueError("snr must be positive")
        if self.p % 2 == 0:
            raise ValueError("image side must be odd")


def random_rotations(count, seed):
    """count unit quaternions i.i.d. uniform on SO(3) (normalized 4D Gaussians)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((count, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def project_phantom(phantom, rotation, p, pixel_size=1.0):
    """Exact analytic projection of the rotated phantom along the z axis.

    Object coordinates put the unit ball on the inscribed disk of the p x p
    grid; pixel_size is metadata only and does not change the sampling.
    """
    if p % 2 == 0:
        raise ValueError("image side must be odd")
    del pixel_size
    h = (p - 1) // 2
    coords = (np.arange(p) - h) / h
    x, y = np.meshgrid(coords, coords)  # x along columns, y along rows
    rot = quat_to_matrix(np.asarray(rotation, dtype=np.float64))
    centers = phantom.centers @ rot.T  # row i: R @ c_i
    img = np.zeros((p, p), dtype=np.float64)
    for (cx, cy, _), sigma, weight in zip(centers, phantom.sigmas, phantom.weights):
        amp = weight / (np.sqrt(2.0 * np.pi) * sigma)
        img += amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2.0 * sigma * sigma))
    return img


def _noise_rng(seed, index):
    # Philox is counter based; the key ties the stream to (seed, image index).
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed), int(index)))))


def simulate(phantom, cfg):
    """Simulate a CTF-affected noisy stack with ground truth attached.

    Group assignment is round-robin (image i belongs to group i mod G). The
    noise variance is (mean over the stack of the per-image variance of the
    CTF-affected clean image) divided by cfg.snr.
    """
    n, p = cfg.n, cfg.p
    n_groups = len(cfg.groups)
    pixel_size = cfg.groups[0].pixel_size_ang
    quats = random_rotations(n, cfg.seed)
    grids = [ctf_grid(params, p) for params in cfg.groups]
    group_of = (np.arange(n) % n_groups).astype(np.int32)

    clean = np.empty((n, p, p), dtype=np.float64)
    ctfed = np.empty((n, p, p), dtype=np.float64)
    for i in range(n):
        clean[i] = project_phantom(phantom, quats[i], p, pixel_size)
        ctfed[i] = apply_ctf(clean[i], grids[group_of[i]])

    noise_var = float(ctfed.var(axis=(1, 2)).mean()) / cfg.snr
    noise_std = np.sqrt(noise_var)
    noisy = np.empty((n, p, p), dtype=np.float64)
    for i in range(n):
        noisy[i] = ctfed[i] + noise_std * _noise_rng(cfg.seed, i).standard_normal((p, p))

    defocus = np.array([cfg.groups[g].defocus_um for g in group_of], dtype=np.float64)
    truth = GroundTruth(rotations=quats, clean=clean.astype(np.float32))
    return ImageStack(
        noisy.astype(np.float32),
        pixel_size=pixel_size,
        group_of=group_of,
        truth=truth,
        defocus_um=defocus,
    )
