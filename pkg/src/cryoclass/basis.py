"""Steerable Fourier-Bessel expansion of disk-supported images.

Basis functions are J_m(R_{m,q} r / radius) * exp(i m theta) sampled on the
pixels of the centered disk, kept when the Bessel root satisfies the
Nyquist-style cutoff R_{m,q} <= pi * radius. Within each angular block the
sampled radial profiles are orthonormalized (thin QR on the grid), so block
Gram matrices are exactly the identity and cross-block couplings are the
only discretization residue.

Only m >= 0 blocks are stored; real images imply the negative frequencies
by conjugate symmetry, so image-domain inner products count m > 0 blocks
twice (block weights 1 for m = 0, else 2). In-plane rotation by theta
multiplies block m by exp(i m theta); reflection about the horizontal axis
conjugates every block.

Expansion solves one joint regularized least squares problem over all
blocks on the disk pixels, which makes expand(evaluate(c)) = c to within
the tiny ridge bias.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg
import scipy.special

from cryoclass.ctf import centered_fft2, centered_ifft2

_RIDGE_REL = 1e-10


def disk_geometry(p, radius):
    """Boolean mask plus polar coordinates of the pixels inside the disk."""
    h = (p - 1) // 2
    idx = np.arange(p) - h
    x, y = np.meshgrid(idx, idx)
    r = np.hypot(x, y)
    mask = r <= radius
    theta = np.arctan2(y, x)
    return mask, r[mask].astype(np.float64), theta[mask].astype(np.float64)


class FourierBesselBasis:
    """Steerable basis on the disk of a given pixel radius inside a p x p grid."""

    def __init__(self, p, radius):
        if p % 2 == 0:
            raise ValueError("image side must be odd")
        if not 1 <= radius <= (p - 1) // 2:
            raise ValueError(f"radius must lie in [1, {(p - 1) // 2}], got {radius}")
        self.p = int(p)
        self.radius = float(radius)
        self.mask, r_disk, theta_disk = disk_geometry(self.p, self.radius)
        self.n_disk = int(self.mask.sum())

        cutoff = np.pi * self.radius
        roots_per_m = []
        m = 0
        while True:
            count_guess = max(1, int(cutoff / np.pi) + 2)
            roots = scipy.special.jn_zeros(m, count_guess)
            roots = roots[roots <= cutoff]
            if roots.size == 0:
                break
            roots_per_m.append(roots)
            m += 1

        sample_cols = []
        block_m = []
        block_sizes = []
        for m, roots in enumerate(roots_per_m):
            profiles = scipy.special.jv(m, np.outer(r_disk, roots) / self.radius)
            q, rmat = np.linalg.qr(profiles)
            sgn = np.sign(np.diag(rmat))
            sgn[sgn == 0] = 1.0
            q = q * sgn
            phase = np.exp(1j * m * theta_disk)
            sample_cols.append(q * phase[:, None])
            block_m.append(m)
            block_sizes.append(roots.size)

        self.block_m = np.array(block_m, dtype=np.int64)
        self.block_sizes = np.array(block_sizes, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.block_sizes)])
        self.total_dim = int(self.offsets[-1])
        self.sample = np.concatenate(sample_cols, axis=1)  # (n_disk, total_dim)
        self.m_of = np.repeat(self.block_m, self.block_sizes)
        self.weight_of = np.where(self.m_of == 0, 1.0, 2.0)

        design_cols = [self.sample[:, self.block_slice(0)].real]
        for b in range(1, self.n_blocks):
            cols = self.sample[:, self.block_slice(b)]
            design_cols.append(2.0 * cols.real)
            design_cols.append(-2.0 * cols.imag)
        design = np.concatenate(design_cols, axis=1)
        normal = design.T @ design
        ridge = _RIDGE_REL * np.trace(normal) / normal.shape[0]
        normal[np.diag_indices_from(normal)] += ridge
        self._design = design
        self._normal_cho = scipy.linalg.cho_factor(normal)

    @property
    def n_blocks(self):
        return len(self.block_m)

    @property
    def m_max(self):
        return int(self.block_m[-1])

    def block_slice(self, b):
        return slice(int(self.offsets[b]), int(self.offsets[b + 1]))

    def iter_blocks(self):
        for b in range(self.n_blocks):
            yield b, int(self.block_m[b]), self.block_slice(b)

    def _real_to_complex(self, w):
        coeffs = np.empty(w.shape[:-1] + (self.total_dim,), dtype=np.complex128)
        pos = 0
        for b, _m, sl in self.iter_blocks():
            size = sl.stop - sl.start
            if b == 0:
                coeffs[..., sl] = w[..., pos : pos + size]
                pos += size
            else:
                coeffs[..., sl] = w[..., pos : pos + size] + 1j * w[..., pos + size : pos + 2 * size]
                pos += 2 * size
        return coeffs

    def expand_disk(self, disk_values):
        """Least-squares coefficients of (batched) disk-pixel vectors."""
        vec = np.asarray(disk_values, dtype=np.float64)
        single = vec.ndim == 1
        if single:
            vec = vec[None]
        rhs = self._design.T @ vec.T
        w = scipy.linalg.cho_solve(self._normal_cho, rhs).T
        coeffs = self._real_to_complex(w)
        return coeffs[0] if single else coeffs

    def expand(self, images):
        """Expand (batched) images; pixels outside the disk are ignored."""
        arr = np.asarray(images, dtype=np.float64)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        if arr.shape[-2:] != (self.p, self.p):
            raise ValueError(f"expected {self.p}x{self.p} images, got {arr.shape[-2:]}")
        coeffs = self.expand_disk(arr[:, self.mask])
        return coeffs[0] if single else coeffs

    def evaluate_disk(self, coeffs):
        c = np.asarray(coeffs, dtype=np.complex128)
        return ((c * self.weight_of) @ self.sample.T).real

    def evaluate(self, coeffs):
        """Real image(s) on the disk; zero outside."""
        c = np.asarray(coeffs, dtype=np.complex128)
        single = c.ndim == 1
        if single:
            c = c[None]
        if c.shape[-1] != self.total_dim:
            raise ValueError(f"expected coefficient dim {self.total_dim}, got {c.shape[-1]}")
        imgs = np.zeros(c.shape[:-1] + (self.p, self.p), dtype=np.float64)
        imgs[..., self.mask] = self.evaluate_disk(c)
        return imgs[0] if single else imgs

    def rotate(self, coeffs, theta):
        """Multiply block m by exp(i m theta)."""
        return np.asarray(coeffs, dtype=np.complex128) * np.exp(1j * self.m_of * theta)

    def reflect(self, coeffs):
        """Conjugate every block (reflection about the horizontal axis)."""
        return np.conj(np.asarray(coeffs, dtype=np.complex128))

    def norm(self, coeffs):
        """Image-domain norm of (batched) coefficient vectors."""
        c = np.asarray(coeffs, dtype=np.complex128)
        return np.sqrt(np.sum(self.weight_of * (c.real**2 + c.imag**2), axis=-1))

    def ctf_block_operator(self, grid):
        """Per-block matrices of the CTF acting on the basis, via the FFT grid.

        Entry [q, q'] is the inner product of basis function q with the
        CTF-filtered basis function q'; blocks come out real and symmetric
        up to grid residue and are symmetrized.
        """
        if grid.values.shape != (self.p, self.p):
            raise ValueError("CTF grid side does not match the basis")
        embedded = np.zeros((self.total_dim, self.p, self.p), dtype=np.complex128)
        embedded[:, self.mask] = self.sample.T
        filtered = centered_ifft2(centered_fft2(embedded) * grid.values[None])
        filtered_disk = filtered[:, self.mask]  # (total_dim, n_disk)
        ops = []
        for b, _m, sl in self.iter_blocks():
            block = self.sample[:, sl].conj().T @ filtered_disk[sl].T
            block = block.real
            ops.append(0.5 * (block + block.T))
        return ops

    def save(self, path):
        np.savez_compressed(
            path,
            p=self.p,
            radius=self.radius,
            block_sizes=self.block_sizes,
        )

    @classmethod
    def load(cls, path):
        data = np.load(path)
        basis = cls(int(data["p"]), float(data["radius"]))
        if not np.array_equal(basis.block_sizes, data["block_sizes"]):
            raise ValueError("cached basis descriptor does not match the rebuilt basis")
        return basis


class PixelBasis:
    """Identity basis on the disk pixels: one real m = 0 block.

    Brute-force path for tiny images, used to compare blockwise linear
    algebra against dense references without basis truncation effects.
    """

    def __init__(self, p, radius):
        if p % 2 == 0:
            raise ValueError("image side must be odd")
        self.p = int(p)
        self.radius = float(radius)
        self.mask, _r, _t = disk_geometry(self.p, self.radius)
        self.n_disk = int(self.mask.sum())
        self.total_dim = self.n_disk
        self.block_m = np.array([0], dtype=np.int64)
        self.block_sizes = np.array([self.n_disk], dtype=np.int64)
        self.offsets = np.array([0, self.n_disk])
        self.m_of = np.zeros(self.n_disk, dtype=np.int64)
        self.weight_of = np.ones(self.n_disk)
        self.sample = np.eye(self.n_disk, dtype=np.complex128)

    @property
    def n_blocks(self):
        return 1

    @property
    def m_max(self):
        return 0

    def block_slice(self, b):
        return slice(0, self.n_disk)

    def iter_blocks(self):
        yield 0, 0, self.block_slice(0)

    def expand_disk(self, disk_values):
        return np.asarray(disk_values, dtype=np.float64).astype(np.complex128)

    def expand(self, images):
        arr = np.asarray(images, dtype=np.float64)
        single = arr.ndim == 2
        if single:
            arr = arr[None]
        coeffs = arr[:, self.mask].astype(np.complex128)
        return coeffs[0] if single else coeffs

    def evaluate(self, coeffs):
        c = np.asarray(coeffs, dtype=np.complex128)
        single = c.ndim == 1
        if single:
            c = c[None]
        imgs = np.zeros(c.shape[:-1] + (self.p, self.p), dtype=np.float64)
        imgs[..., self.mask] = c.real
        return imgs[0] if single else imgs

    def rotate(self, coeffs, theta):
        del theta  # m = 0 only: rotation acts as the identity phase
        return np.asarray(coeffs, dtype=np.complex128).copy()

    def reflect(self, coeffs):
        return np.conj(np.asarray(coeffs, dtype=np.complex128))

    def norm(self, coeffs):
        c = np.asarray(coeffs, dtype=np.complex128)
        return np.sqrt(np.sum(c.real**2 + c.imag**2, axis=-1))

    def ctf_block_operator(self, grid):
        if grid.values.shape != (self.p, self.p):
            raise ValueError("CTF grid side does not match the basis")
        embedded = np.zeros((self.n_disk, self.p, self.p), dtype=np.complex128)
        embedded[:, self.mask] = self.sample.T
        filtered = centered_ifft2(centered_fft2(embedded) * grid.values[None])
        block = filtered[:, self.mask].T.real
        return [0.5 * (block + block.T)]
