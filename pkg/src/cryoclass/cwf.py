"""Covariance Wiener filtering in the steerable coefficient space.

The observation model per angular block is y_i = A_g x_i + n_i with the
group's CTF block operator A_g, clean coefficients x ~ N(mean, cov) and
white noise of variance noise_var (per complex coefficient for m > 0,
per real coefficient for m = 0). Mean and covariance are least-squares
estimates from the CTF-affected data; the posterior of x_i given y_i is
Gaussian with per-image mean (the Wiener-denoised coefficients) and a
per-group covariance.

All solves go through Hermitian factorizations; no explicit inverses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, TransformerMixin

from cryoclass.basis import FourierBesselBasis, disk_geometry
from cryoclass.ctf import ctf_grid
from cryoclass.errors import NumericalError
from cryoclass.stack import ImageStack
from cryoclass.validation import check_image_batch

_MEAN_RIDGE = 1e-8
_COV_RIDGE = 1e-8


@dataclass
class CovarianceModel:
    """Estimated clean-coefficient mean, per-block covariance, and noise level.

    subspace holds, per block, the orthonormal eigenvectors of the retained
    (strictly positive) covariance eigenvalues; affinity computations are
    carried out in that principal subspace.
    """

    mean: np.ndarray  # (D,) complex
    cov_blocks: list  # per block (r, r) complex Hermitian PSD
    noise_var: float
    subspace: list = field(default_factory=list)  # per block (r, k) complex
    eigvals: list = field(default_factory=list)  # per block (k,) descending

    @classmethod
    def from_blocks(cls, mean, blocks, noise_var, shrink_tau=0.0):
        """Hermitize, floor eigenvalues at zero, apply relative shrinkage, and
        record the retained principal subspace of every block."""
        if not noise_var > 0:
            raise ValueError("noise_var must be positive")
        cov_blocks, subspace, eigvals = [], [], []
        for block in blocks:
            sym, vecs, vals = _floor_and_truncate(np.asarray(block, dtype=np.complex128), shrink_tau)
            cov_blocks.append(sym)
            subspace.append(vecs)
            eigvals.append(vals)
        return cls(
            mean=np.asarray(mean, dtype=np.complex128),
            cov_blocks=cov_blocks,
            noise_var=float(noise_var),
            subspace=subspace,
            eigvals=eigvals,
        )


@dataclass
class ConditionalMoments:
    """Posterior moments of the clean coefficients given each observation.

    post_mean[i] is the conditional mean of image i (its Wiener-denoised
    coefficients); post_cov[g][b] the conditional covariance of block b for
    every image in defocus group g.
    """

    post_mean: np.ndarray  # (n, D) complex
    post_cov: list  # [group][block] (r, r) complex
    group_of: np.ndarray  # (n,) int
    basis: object
    model: CovarianceModel

    @property
    def n_groups(self):
        return len(self.post_cov)

    @property
    def subspace(self):
        return self.model.subspace


def _floor_and_truncate(block, shrink_tau):
    sym = 0.5 * (block + block.conj().T)
    vals, vecs = np.linalg.eigh(sym)
    vals = np.maximum(vals.real, 0.0)
    top = vals.max() if vals.size else 0.0
    if shrink_tau > 0 and top > 0:
        vals[vals < shrink_tau * top] = 0.0
    keep = vals > (top * 1e-14 if top > 0 else 0.0)
    order = np.argsort(vals[keep])[::-1]
    kept_vecs = vecs[:, keep][:, order]
    kept_vals = vals[keep][order]
    rebuilt = (kept_vecs * kept_vals) @ kept_vecs.conj().T
    rebuilt = 0.5 * (rebuilt + rebuilt.conj().T)
    return rebuilt, kept_vecs, kept_vals


def estimate_noise_var(stack, radius):
    """Pooled variance of all pixels outside the disk of the given radius."""
    images = stack.images if isinstance(stack, ImageStack) else check_image_batch(stack)
    p = images.shape[-1]
    mask, _r, _t = disk_geometry(p, radius)
    outside = ~mask
    if not outside.any():
        raise ValueError(f"no pixels outside radius {radius} in a {p}x{p} image")
    vals = np.asarray(images, dtype=np.float64)[:, outside]
    return float(vals.var())


def _group_indices(group_of, n_groups=None):
    group_of = np.asarray(group_of)
    if n_groups is None:
        n_groups = int(group_of.max()) + 1
    return [np.flatnonzero(group_of == g) for g in range(n_groups)]


def estimate_mean(coeffs, ops, group_of, basis, ridge=_MEAN_RIDGE):
    """Least-squares mean of the clean coefficients under per-group CTFs.

    Solves, per block, (sum_i A_i^T A_i) mu = sum_i A_i^T y_i with a small
    ridge scaled to the mean diagonal of the normal matrix.
    """
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    idx_of = _group_indices(group_of, len(ops))
    mean = np.zeros(coeffs.shape[1], dtype=np.complex128)
    for b, m, sl in basis.iter_blocks():
        r = sl.stop - sl.start
        normal = np.zeros((r, r))
        rhs = np.zeros(r, dtype=np.complex128)
        for g, idx in enumerate(idx_of):
            if idx.size == 0:
                continue
            a = ops[g][b]
            normal += idx.size * (a.T @ a)
            rhs += a.T @ coeffs[idx, sl].sum(axis=0)
        normal[np.diag_indices_from(normal)] += ridge * np.trace(normal) / r
        try:
            mean[sl] = np.linalg.solve(normal, rhs)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"mean normal system singular for block m={m}") from exc
    return mean


def estimate_covariance(coeffs, ops, group_of, mean, noise_var, basis, shrink_tau=0.0, ridge=_COV_RIDGE):
    """Least-squares block covariance of the clean coefficients.

    Per block, solves sum_g n_g B_g Sigma B_g = sum_g A_g^T (M_g - n_g
    noise_var I) A_g with B_g = A_g^T A_g and M_g the scatter of the
    mean-centered observations of group g, via the Kronecker-structured
    linear system. The result is Hermitized, eigenvalue-floored at zero,
    and shrunk by dropping eigenvalues below shrink_tau times the block's
    largest.
    """
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    if coeffs.shape[0] < 2:
        raise ValueError("covariance estimation needs at least two images")
    if not noise_var > 0:
        raise ValueError("noise_var must be positive")
    idx_of = _group_indices(group_of, len(ops))
    blocks = []
    for b, m, sl in basis.iter_blocks():
        r = sl.stop - sl.start
        rhs = np.zeros((r, r), dtype=np.complex128)
        kron = np.zeros((r * r, r * r))
        for g, idx in enumerate(idx_of):
            if idx.size == 0:
                continue
            a = ops[g][b]
            d = coeffs[idx, sl] - (a @ mean[sl])[None, :]
            scatter = d.T @ d.conj()
            rhs += a.T @ (scatter - idx.size * noise_var * np.eye(r)) @ a
            bg = a.T @ a
            kron += idx.size * np.kron(bg, bg)
        rhs = 0.5 * (rhs + rhs.conj().T)
        kron[np.diag_indices_from(kron)] += ridge * np.trace(kron) / (r * r)
        try:
            vec = np.linalg.solve(kron, rhs.reshape(r * r))
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"covariance system singular for block m={m}") from exc
        blocks.append(vec.reshape(r, r))
    return CovarianceModel.from_blocks(mean, blocks, noise_var, shrink_tau=shrink_tau)


def conditional_moments(coeffs, ops, group_of, model, basis):
    """Posterior mean per image and posterior covariance per defocus group.

    Per group and block: with B = A Sigma A^T + noise_var I (Cholesky
    factored), the gain is K = Sigma A^T B^{-1}, the posterior mean is
    mean + K (y - A mean) and the posterior covariance Sigma - K A Sigma.
    """
    coeffs = np.asarray(coeffs, dtype=np.complex128)
    group_of = np.asarray(group_of)
    idx_of = _group_indices(group_of, len(ops))
    post_mean = np.empty_like(coeffs)
    post_cov = []
    for g, idx in enumerate(idx_of):
        cov_g = []
        for b, m, sl in basis.iter_blocks():
            a = ops[g][b]
            sigma = model.cov_blocks[b]
            asig = a @ sigma
            obs_cov = asig @ a.T
            obs_cov[np.diag_indices_from(obs_cov)] += model.noise_var
            try:
                cho = scipy.linalg.cho_factor(obs_cov)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(f"posterior factorization failed (group {g}, block m={m})") from exc
            gain = scipy.linalg.cho_solve(cho, asig).conj().T
            post = sigma - gain @ asig
            cov_g.append(0.5 * (post + post.conj().T))
            if idx.size:
                d = coeffs[idx, sl] - (a @ model.mean[sl])[None, :]
                post_mean[idx, sl] = model.mean[sl][None, :] + d @ gain.T
        post_cov.append(cov_g)
    return ConditionalMoments(post_mean=post_mean, post_cov=post_cov, group_of=group_of, basis=basis, model=model)


def denoise(moments, basis, stack=None):
    """Evaluate every posterior mean as a real image.

    With a stack given, returns an ImageStack carrying over its metadata;
    otherwise the raw (n, p, p) array.
    """
    images = basis.evaluate(moments.post_mean)
    if stack is None:
        return images
    return ImageStack(
        images.astype(np.float32),
        pixel_size=stack.pixel_size,
        group_of=stack.group_of.copy(),
        truth=stack.truth,
        defocus_um=stack.defocus_um,
    )


def ctf_block_operators(basis, ctf_params, n_groups=None):
    """Per-group block operators; identity blocks when no CTF is given."""
    if ctf_params is None:
        if n_groups is None:
            n_groups = 1
        eye = [np.eye(sl.stop - sl.start) for _b, _m, sl in basis.iter_blocks()]
        return [eye for _ in range(n_groups)]
    return [basis.ctf_block_operator(ctf_grid(params, basis.p)) for params in ctf_params]


class CovarianceWienerFilter(BaseEstimator, TransformerMixin):
    """Covariance-based Wiener denoiser with a scikit-learn style surface.

    Parameters
    ----------
    ctf_params : list of CtfParams or None
        One entry per defocus group; None treats the data as CTF-free.
    radius : int or None
        Disk radius in pixels; defaults to (p - 1) // 2.
    shrink_tau : float
        Relative eigenvalue cutoff applied per covariance block.
    noise_var : float or None
        Known noise variance; estimated from outside-disk pixels when None.

    After fit, `basis_`, `ops_`, `model_` and `moments_` expose the fitted
    pieces; transform returns the denoised stack.
    """

    def __init__(self, ctf_params=None, radius=None, shrink_tau=0.05, noise_var=None):
        self.ctf_params = ctf_params
        self.radius = radius
        self.shrink_tau = shrink_tau
        self.noise_var = noise_var

    def _as_stack(self, X):
        if isinstance(X, ImageStack):
            return X
        return ImageStack(check_image_batch(X).astype(np.float32))

    def fit(self, X, y=None):
        del y
        stack = self._as_stack(X)
        radius = self.radius if self.radius is not None else (stack.p - 1) // 2
        n_groups = stack.n_groups if self.ctf_params is None else len(self.ctf_params)
        if stack.n_groups > n_groups:
            raise ValueError("stack has more defocus groups than CTF parameter sets")
        self.basis_ = FourierBesselBasis(stack.p, radius)
        self.ops_ = ctf_block_operators(self.basis_, self.ctf_params, n_groups)
        self.noise_var_ = self.noise_var if self.noise_var is not None else estimate_noise_var(stack, radius)
        coeffs = self.basis_.expand(stack.images)
        mean = estimate_mean(coeffs, self.ops_, stack.group_of, self.basis_)
        self.model_ = estimate_covariance(
            coeffs, self.ops_, stack.group_of, mean, self.noise_var_, self.basis_, shrink_tau=self.shrink_tau
        )
        self.moments_ = conditional_moments(coeffs, self.ops_, stack.group_of, self.model_, self.basis_)
        self._fitted_stack = stack
        return self

    def transform(self, X=None):
        if not hasattr(self, "model_"):
            raise ValueError("fit must be called before transform")
        if X is None:
            return denoise(self.moments_, self.basis_, self._fitted_stack)
        stack = self._as_stack(X)
        coeffs = self.basis_.expand(stack.images)
        moments = conditional_moments(coeffs, self.ops_, stack.group_of, self.model_, self.basis_)
        return denoise(moments, self.basis_, stack)
