"""Contrast transfer function on the centered frequency grid.

The CTF is evaluated in generalized coordinates: with Cs and the electron
wavelength converted to Angstrom, khat = (Cs * lambda^3)^(1/4) * k is the
dimensionless generalized spatial frequency, dzhat = dz / sqrt(Cs * lambda)
the generalized defocus, and

    CTF(k) = exp(-B * khat^2) * sin(-pi * dzhat * khat^2 + (pi/2) * khat^4 + phi)

where phi = atan(alpha / sqrt(1 - alpha^2)) folds a nonzero amplitude
contrast alpha into the phase (phi = 0 recovers the pure weak-phase form,
which vanishes at k = 0). B acts on the dimensionless khat^2.

Grids are sampled at integer frequencies (u, v) in [-(p-1)/2, (p-1)/2]
scaled by 1/(p * pixel_size), so the DC sample sits at the center pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ANG_PER_UM = 1.0e4
_ANG_PER_MM = 1.0e7
_ANG_PER_PM = 1.0e-2


@dataclass(frozen=True)
class CtfParams:
    """Microscope parameters for one defocus group.

    defocus_um: defocus in micrometers; cs_mm: spherical aberration in mm;
    lambda_pm: electron wavelength in pm; b_factor: Gaussian envelope decay
    on khat^2 (dimensionless); amp_contrast: amplitude contrast in [0, 1);
    pixel_size_ang: sampling in Angstrom per pixel.
    """

    defocus_um: float
    cs_mm: float = 2.0
    lambda_pm: float = 2.51
    b_factor: float = 0.0
    amp_contrast: float = 0.0
    pixel_size_ang: float = 1.0

    def __post_init__(self):
        if not self.cs_mm > 0:
            raise ValueError("cs_mm must be positive")
        if not self.lambda_pm > 0:
            raise ValueError("lambda_pm must be positive")
        if not self.pixel_size_ang > 0:
            raise ValueError("pixel_size_ang must be positive")
        if self.b_factor < 0:
            raise ValueError("b_factor must be non-negative")
        if not 0 <= self.amp_contrast < 1:
            raise ValueError("amp_contrast must lie in [0, 1)")


@dataclass(frozen=True)
class CtfGrid:
    """Radially symmetric CTF samples on the centered p x p frequency grid."""

    values: np.ndarray
    params: CtfParams

    @property
    def p(self):
        return self.values.shape[0]


def ctf_eval(params, k):
    """CTF value at spatial frequency magnitude k (1/Angstrom).

    Accepts scalars or arrays; the dependence is on k^2, so negative inputs
    are treated as |k|.
    """
    k = np.asarray(k, dtype=np.float64)
    if not np.all(np.isfinite(k)):
        raise ValueError("spatial frequency must be finite")
    cs = params.cs_mm * _ANG_PER_MM
    lam = params.lambda_pm * _ANG_PER_PM
    dz = params.defocus_um * _ANG_PER_UM
    khat2 = np.sqrt(cs * lam**3) * k * k
    dzhat = dz / np.sqrt(cs * lam)
    gamma = -np.pi * dzhat * khat2 + 0.5 * np.pi * khat2 * khat2
    alpha = params.amp_contrast
    if alpha > 0:
        gamma = gamma + np.arctan(alpha / np.sqrt(1.0 - alpha * alpha))
    out = np.exp(-params.b_factor * khat2) * np.sin(gamma)
    return float(out) if out.ndim == 0 else out


def ctf_grid(params, p):
    """Sample the CTF on the centered integer frequency grid of an odd side p."""
    if p % 2 == 0:
        raise ValueError(f"image side must be odd, got {p}")
    h = (p - 1) // 2
    idx = np.arange(p) - h
    u, v = np.meshgrid(idx, idx)
    k = np.hypot(u, v) / (p * params.pixel_size_ang)
    return CtfGrid(values=ctf_eval(params, k), params=params)


def centered_fft2(img):
    """2D FFT with the spatial and frequency origins at the center pixel."""
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(img, axes=(-2, -1))), axes=(-2, -1))


def centered_ifft2(spec):
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(spec, axes=(-2, -1))), axes=(-2, -1))


def _check_grid_shape(img, grid):
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-2:] != grid.values.shape:
        raise ValueError(f"image shape {img.shape[-2:]} does not match grid {grid.values.shape}")
    return img


def apply_ctf(image, grid):
    """Multiply the centered Fourier transform by the CTF grid; returns a real image."""
    img = _check_grid_shape(image, grid)
    spec = centered_fft2(img) * grid.values
    return centered_ifft2(spec).real


def phase_flip(image, grid):
    """Multiply Fourier coefficients by sign(CTF); exact zeros stay suppressed."""
    img = _check_grid_shape(image, grid)
    spec = centered_fft2(img) * np.sign(grid.values)
    return centered_ifft2(spec).real
