"""Anisotropic pairwise affinity from posterior moments.

The affinity between two images is

    -1/2 log|L_i + L_j|  -  1/2 (a_i - a_j)^T (L_i + L_j)^{-1} (a_i - a_j)

with a the posterior mean and L the posterior covariance of the clean
image given each observation. L depends only on the defocus group, so all
pairwise work reduces to one Cholesky factorization per (group, group)
pair; scoring a pair is two triangular solves.

Both terms are evaluated in the retained principal subspace of the block
covariances, per angular block, with m > 0 blocks counted twice (their
implicit negative-frequency twins). Additive constants independent of the
pair, including the real-versus-complex determinant convention factor,
are dropped; only comparisons between pairs are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import gamma as gamma_fn

from cryoclass.errors import NumericalError

_FACTOR_RIDGE = 1e-10


@dataclass
class GroupPairFactor:
    """Cached factorization of L_g + L_h in the principal subspace."""

    groups: tuple  # (g, h) with g <= h
    chol_blocks: list  # per block (k, k) complex lower triangular
    logdet: float  # sum over blocks of w_m * log|L_g + L_h|
    table: object = None  # owning PairFactorTable


@dataclass
class AffinityScore:
    value: float
    pair: tuple
    theta: float = 0.0
    reflected: bool = False


class PairFactorTable:
    """All G(G+1)/2 group-pair factorizations plus the shared subspace maps."""

    def __init__(self, moments):
        basis = moments.basis
        self.basis = basis
        self.subspace = moments.subspace
        self.block_weights = np.where(basis.block_m == 0, 1.0, 2.0)
        n_groups = moments.n_groups
        self.n_groups = n_groups
        # project every group's posterior covariance once
        projected = []
        for g in range(n_groups):
            blocks = []
            for b in range(basis.n_blocks):
                v = self.subspace[b]
                lb = moments.post_cov[g][b]
                blocks.append(v.conj().T @ lb @ v)
            projected.append(blocks)
        self.factors = {}
        for g in range(n_groups):
            for h in range(g, n_groups):
                chol_blocks = []
                logdet = 0.0
                for b in range(basis.n_blocks):
                    m = int(basis.block_m[b])
                    pair_cov = projected[g][b] + projected[h][b]
                    pair_cov = 0.5 * (pair_cov + pair_cov.conj().T)
                    if pair_cov.shape[0] == 0:
                        chol_blocks.append(pair_cov)
                        continue
                    try:
                        chol = np.linalg.cholesky(pair_cov)
                    except np.linalg.LinAlgError:
                        ridge = _FACTOR_RIDGE * np.trace(pair_cov).real / pair_cov.shape[0]
                        pair_cov = pair_cov + ridge * np.eye(pair_cov.shape[0])
                        try:
                            chol = np.linalg.cholesky(pair_cov)
                        except np.linalg.LinAlgError as exc:
                            raise NumericalError(
                                f"pair covariance factorization failed for groups ({g}, {h}), block m={m}"
                            ) from exc
                    chol_blocks.append(chol)
                    logdet += self.block_weights[b] * 2.0 * float(np.sum(np.log(np.abs(np.diag(chol)))))
                self.factors[(g, h)] = GroupPairFactor(groups=(g, h), chol_blocks=chol_blocks, logdet=logdet, table=self)

    def factor(self, g, h):
        key = (g, h) if g <= h else (h, g)
        return self.factors[key]

    def __len__(self):
        return len(self.factors)

    def project(self, coeffs):
        """Map batched full coefficient vectors into the principal subspace,
        returned as one (batch, k_b) array per block."""
        c = np.asarray(coeffs, dtype=np.complex128)
        if c.ndim == 1:
            c = c[None]
        out = []
        for b in range(self.basis.n_blocks):
            sl = self.basis.block_slice(b)
            out.append(c[:, sl] @ np.conj(self.subspace[b]))
        return out


def build_pair_factors(moments):
    """Factorize L_g + L_h once for every group pair g <= h."""
    return PairFactorTable(moments)


def affinity(coeffs_i, coeffs_j, factor):
    """Affinity of two (already aligned) coefficient vectors under a cached
    group-pair factorization."""
    table = factor.table
    ci = np.asarray(coeffs_i, dtype=np.complex128)
    cj = np.asarray(coeffs_j, dtype=np.complex128)
    if ci.shape != cj.shape or ci.shape[-1] != table.basis.total_dim:
        raise ValueError("coefficient shapes do not match the factor table")
    delta_blocks = table.project(ci - cj)
    quad = 0.0
    for b, chol in enumerate(factor.chol_blocks):
        if chol.shape[0] == 0:
            continue
        z = scipy.linalg.solve_triangular(chol, delta_blocks[b][0], lower=True)
        quad += table.block_weights[b] * float(np.sum(z.real**2 + z.imag**2))
    return -0.5 * (factor.logdet + quad)


def affinity_row(i, candidates, moments, table):
    """Score one image against aligned candidates; sorted best first.

    candidates is a sequence of (j, theta, reflected); each candidate's
    posterior mean is reflected (optionally) and rotated by theta before
    the difference is scored. Ties in the score break by ascending j.
    """
    candidates = list(candidates)
    if not candidates:
        raise ValueError("candidate list must be nonempty")
    basis = moments.basis
    j_idx = np.array([int(c[0]) for c in candidates])
    theta = np.array([float(c[1]) for c in candidates])
    refl = np.array([bool(c[2]) for c in candidates])
    aligned = moments.post_mean[j_idx].copy()
    if refl.any():
        aligned[refl] = np.conj(aligned[refl])
    aligned *= np.exp(1j * np.outer(theta, basis.m_of))
    delta = moments.post_mean[i][None, :] - aligned
    delta_blocks, _ = table.project(delta)

    gi = int(moments.group_of[i])
    gj = moments.group_of[j_idx]
    quad = np.zeros(len(candidates))
    logdets = np.empty(len(candidates))
    for h in np.unique(gj):
        rows = np.flatnonzero(gj == h)
        factor = table.factor(gi, int(h))
        logdets[rows] = factor.logdet
        for b, chol in enumerate(factor.chol_blocks):
            if chol.shape[0] == 0:
                continue
            z = scipy.linalg.solve_triangular(chol, delta_blocks[b][rows].T, lower=True)
            quad[rows] += table.block_weights[b] * np.sum(z.real**2 + z.imag**2, axis=0)
    values = -0.5 * (logdets + quad)
    order = np.lexsort((j_idx, -values))
    return [
        AffinityScore(value=float(values[k]), pair=(int(i), int(j_idx[k])), theta=float(theta[k]), reflected=bool(refl[k]))
        for k in order
    ]


def _unit_ball_volume(d, norm_p):
    if np.isinf(norm_p):
        return 2.0**d
    return (2.0 * gamma_fn(1.0 / norm_p + 1.0)) ** d / gamma_fn(d / norm_p + 1.0)


def validate_ball_probability(mean, cov, epsilon, norm_p=2, samples=1_000_000, seed=0):
    """Monte Carlo versus small-ball closed form for a Gaussian difference.

    Returns (monte_carlo, closed_form) where closed_form is
    eps^d Vol(B_p(0,1)) (2 pi)^{-d/2} |cov|^{-1/2} exp(-mean^T cov^{-1} mean / 2),
    the leading term of the probability that the vector lands within
    eps in the chosen l_p norm.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    d = mean.size
    if d > 3:
        raise ValueError("Monte Carlo validation is limited to d <= 3")
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    chol = np.linalg.cholesky(cov)
    rng = np.random.default_rng(seed)
    hits = 0
    left = int(samples)
    chunk = 1_000_000
    while left > 0:
        take = min(chunk, left)
        x = rng.standard_normal((take, d)) @ chol.T + mean
        if np.isinf(norm_p):
            nrm = np.abs(x).max(axis=1)
        elif norm_p == 1:
            nrm = np.abs(x).sum(axis=1)
        else:
            nrm = np.sqrt((x * x).sum(axis=1))
        hits += int((nrm < epsilon).sum())
        left -= take
    monte_carlo = hits / samples

    sol = np.linalg.solve(cov, mean)
    quad = float(mean @ sol)
    det = float(np.linalg.det(cov))
    closed = (
        epsilon**d
        * _unit_ball_volume(d, norm_p)
        * np.exp(-0.5 * quad)
        / ((2.0 * np.pi) ** (d / 2.0) * np.sqrt(det))
    )
    return monte_carlo, float(closed)
