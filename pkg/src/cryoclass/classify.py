"""Candidate neighbor generation, anisotropic re-ranking, class averages.

Candidates come from brute-force rotational correlation of the denoised
coefficients: the correlation of image i against a rotated (optionally
reflected) image j is a short Fourier series in the rotation angle, one
term per angular frequency, so all L grid angles cost one length-L inverse
FFT per pair. Re-ranking rescores the aligned candidates with the
anisotropic affinity and keeps the best K.

An alignment (theta, reflected) always means: reflect j first if flagged,
then rotate by theta; the aligned candidate then overlays the center image.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from cryoclass.affinity import affinity_row
from cryoclass.geometry import apply_alignment_image
from cryoclass.stack import ImageStack


@dataclass
class NeighborTable:
    """Per-image neighbor candidates with alignments, scores descending."""

    neighbors: np.ndarray  # (n, w) int32
    theta: np.ndarray  # (n, w) float64 radians
    reflected: np.ndarray  # (n, w) bool
    score: np.ndarray  # (n, w) float64
    s_initial: int
    k_final: int | None = None

    def __post_init__(self):
        self.neighbors = np.asarray(self.neighbors, dtype=np.int32)
        n, w = self.neighbors.shape
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(n, w)
        self.reflected = np.asarray(self.reflected, dtype=bool).reshape(n, w)
        self.score = np.asarray(self.score, dtype=np.float64).reshape(n, w)
        rows = np.arange(n)[:, None]
        if np.any(self.neighbors == rows):
            raise ValueError("neighbor table contains self-pairs")
        for i in range(n):
            if np.unique(self.neighbors[i]).size != w:
                raise ValueError(f"duplicate neighbors for image {i}")
        if np.any(np.diff(self.score, axis=1) > 1e-12):
            raise ValueError("scores must be non-increasing along each row")

    @property
    def n_images(self):
        return self.neighbors.shape[0]

    @property
    def width(self):
        return self.neighbors.shape[1]

    def row(self, i):
        """(j, theta, reflected, score) tuples of image i, best first."""
        return [
            (int(self.neighbors[i, k]), float(self.theta[i, k]), bool(self.reflected[i, k]), float(self.score[i, k]))
            for k in range(self.width)
        ]

    def truncated(self, k):
        if not 0 < k <= self.width:
            raise ValueError(f"cannot truncate width {self.width} to {k}")
        return NeighborTable(
            neighbors=self.neighbors[:, :k].copy(),
            theta=self.theta[:, :k].copy(),
            reflected=self.reflected[:, :k].copy(),
            score=self.score[:, :k].copy(),
            s_initial=self.s_initial,
            k_final=k,
        )

    def to_csv(self, path):
        lines = ["i,j,rank,theta_deg,reflected,score"]
        for i in range(self.n_images):
            for rank in range(self.width):
                lines.append(
                    f"{i},{self.neighbors[i, rank]},{rank},"
                    f"{np.degrees(self.theta[i, rank])!r},{int(self.reflected[i, rank])},{self.score[i, rank]!r}"
                )
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path):
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != "i,j,rank,theta_deg,reflected,score":
            raise ValueError(f"not a neighbor table CSV: {path}")
        rows = {}
        for line in lines[1:]:
            i, j, rank, theta_deg, refl, score = line.split(",")
            rows.setdefault(int(i), []).append((int(rank), int(j), float(theta_deg), bool(int(refl)), float(score)))
        n = max(rows) + 1
        width = len(rows[0])
        neighbors = np.zeros((n, width), dtype=np.int32)
        theta = np.zeros((n, width))
        reflected = np.zeros((n, width), dtype=bool)
        score = np.zeros((n, width))
        for i, entries in rows.items():
            for rank, j, theta_deg, refl, val in entries:
                neighbors[i, rank] = j
                theta[i, rank] = np.radians(theta_deg)
                reflected[i, rank] = refl
                score[i, rank] = val
        return cls(neighbors=neighbors, theta=theta, reflected=reflected, score=score, s_initial=width)


@dataclass
class ClassAverage:
    center: int
    average: np.ndarray  # (p, p)
    members: list  # (j, theta, reflected), center first with identity alignment


def _fold_phase_series(block_terms, basis, angles):
    """Sum per-block correlation terms into a length-`angles` spectrum.

    block_terms[b] holds one complex term per batch entry; block m lands in
    bin m mod angles, which keeps the evaluation exact at the grid angles
    even when angles <= m_max.
    """
    spectrum = np.zeros(np.shape(block_terms[0]) + (angles,), dtype=np.complex128)
    for b, m, _sl in basis.iter_blocks():
        spectrum[..., m % angles] += block_terms[b]
    return spectrum


def _corr_over_angles(spectrum, angles):
    # corr(theta_l) = Re sum_m t_m exp(i m theta_l), theta_l = 2 pi l / angles
    return np.fft.ifft(spectrum, axis=-1).real * angles


def align_pair(coeffs_i, coeffs_j, basis, angles=360):
    """Best rotation (and reflection) of j onto i by normalized correlation.

    Scans `angles` uniform grid angles for both the plain and reflected
    candidate; returns (theta, reflected, corr) maximizing the normalized
    image-domain correlation of i with rotate(reflect?(j), theta).
    """
    if angles < 8:
        raise ValueError("need at least 8 angles")
    ci = np.asarray(coeffs_i, dtype=np.complex128)
    cj = np.asarray(coeffs_j, dtype=np.complex128)
    ni = float(basis.norm(ci))
    nj = float(basis.norm(cj))
    if ni == 0.0 or nj == 0.0:
        raise ValueError("cannot align zero-norm coefficients")
    w = basis.weight_of
    plain_terms = []
    refl_terms = []
    for _b, _m, sl in basis.iter_blocks():
        wi = w[sl] * np.conj(ci[sl])
        plain_terms.append(np.sum(wi * cj[sl]))
        refl_terms.append(np.sum(wi * np.conj(cj[sl])))
    corr_plain = _corr_over_angles(_fold_phase_series(plain_terms, basis, angles), angles)
    corr_refl = _corr_over_angles(_fold_phase_series(refl_terms, basis, angles), angles)
    best_plain = int(np.argmax(corr_plain))
    best_refl = int(np.argmax(corr_refl))
    if corr_refl[best_refl] > corr_plain[best_plain]:
        idx, reflected, corr = best_refl, True, corr_refl[best_refl]
    else:
        idx, reflected, corr = best_plain, False, corr_plain[best_plain]
    return 2.0 * np.pi * idx / angles, reflected, float(corr / (ni * nj))


def _candidate_chunk(coeffs, conj_coeffs, norms, basis, angles, rows, s_candidates):
    n = coeffs.shape[0]
    chunk = coeffs[rows]
    plain_terms = []
    refl_terms = []
    for _b, _m, sl in basis.iter_blocks():
        w = basis.weight_of[sl][None, :]
        ci = np.conj(chunk[:, sl]) * w
        plain_terms.append(ci @ coeffs[:, sl].T)
        refl_terms.append(ci @ conj_coeffs[:, sl].T)
    corr_plain = _corr_over_angles(_fold_phase_series(plain_terms, basis, angles), angles)
    corr_refl = _corr_over_angles(_fold_phase_series(refl_terms, basis, angles), angles)
    idx_plain = np.argmax(corr_plain, axis=-1)
    idx_refl = np.argmax(corr_refl, axis=-1)
    take = np.arange(n)[None, :]
    val_plain = np.take_along_axis(corr_plain, idx_plain[..., None], axis=-1)[..., 0]
    val_refl = np.take_along_axis(corr_refl, idx_refl[..., None], axis=-1)[..., 0]
    del corr_plain, corr_refl
    use_refl = val_refl > val_plain
    best = np.where(use_refl, val_refl, val_plain)
    best_idx = np.where(use_refl, idx_refl, idx_plain)
    best /= norms[rows][:, None] * norms[None, :]
    best[np.arange(len(rows)), rows] = -np.inf

    out_j = np.empty((len(rows), s_candidates), dtype=np.int32)
    out_theta = np.empty((len(rows), s_candidates))
    out_refl = np.empty((len(rows), s_candidates), dtype=bool)
    out_score = np.empty((len(rows), s_candidates))
    del take
    for k, _i in enumerate(rows):
        order = np.lexsort((np.arange(n), -best[k]))[:s_candidates]
        out_j[k] = order
        out_theta[k] = 2.0 * np.pi * best_idx[k, order] / angles
        out_refl[k] = use_refl[k, order]
        out_score[k] = best[k, order]
    return out_j, out_theta, out_refl, out_score


def initial_candidates(moments, s_candidates, angles=360, threads=None):
    """Top-S aligned rotational-correlation candidates for every image.

    Deterministic for a given input regardless of thread count: the work is
    split into fixed row chunks whose results do not depend on scheduling.
    """
    coeffs = moments.post_mean
    basis = moments.basis
    n = coeffs.shape[0]
    if not 1 <= s_candidates < n:
        raise ValueError(f"need 1 <= S < n, got S={s_candidates} with n={n}")
    norms = basis.norm(coeffs)
    if np.any(norms == 0.0):
        raise ValueError("cannot rank zero-norm images")
    conj_coeffs = np.conj(coeffs)

    chunk_rows = max(1, min(64, (1 << 26) // max(1, n * angles)))
    chunks = [np.arange(start, min(start + chunk_rows, n)) for start in range(0, n, chunk_rows)]
    work = lambda rows: _candidate_chunk(coeffs, conj_coeffs, norms, basis, angles, rows, s_candidates)
    if threads is not None and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(rows) for rows in chunks]

    neighbors = np.concatenate([r[0] for r in results])
    theta = np.concatenate([r[1] for r in results])
    reflected = np.concatenate([r[2] for r in results])
    score = np.concatenate([r[3] for r in results])
    return NeighborTable(
        neighbors=neighbors, theta=theta, reflected=reflected, score=score, s_initial=s_candidates
    )


def rerank(table, moments, factors, k_neighbors):
    """Rescore candidates with the anisotropic affinity, keep the best K.

    Alignments carry over unchanged; only scores and order change, so the
    output rows are subsets of the input rows.
    """
    if not 0 < k_neighbors <= table.width:
        raise ValueError(f"need 0 < K <= S, got K={k_neighbors} with S={table.width}")
    n, width = table.neighbors.shape
    basis = moments.basis
    chunk_rows = max(1, (1 << 22) // max(1, width * basis.total_dim))
    out_j = np.empty((n, k_neighbors), dtype=np.int32)
    out_theta = np.empty((n, k_neighbors))
    out_refl = np.empty((n, k_neighbors), dtype=bool)
    out_score = np.empty((n, k_neighbors))

    group_of = np.asarray(moments.group_of)
    for start in range(0, n, chunk_rows):
        rows = np.arange(start, min(start + chunk_rows, n))
        flat_j = table.neighbors[rows].ravel()
        flat_theta = table.theta[rows].ravel()
        flat_refl = table.reflected[rows].ravel()
        aligned = moments.post_mean[flat_j].copy()
        if flat_refl.any():
            aligned[flat_refl] = np.conj(aligned[flat_refl])
        aligned *= np.exp(1j * np.outer(flat_theta, basis.m_of))
        centers = np.repeat(rows, width)
        delta = moments.post_mean[centers] - aligned
        delta_blocks = factors.project(delta)

        gi = group_of[centers]
        gj = group_of[flat_j]
        lo = np.minimum(gi, gj)
        hi = np.maximum(gi, gj)
        quad = np.zeros(len(flat_j))
        logdets = np.empty(len(flat_j))
        for g in np.unique(lo):
            for h in np.unique(hi[lo == g]):
                sel = np.flatnonzero((lo == g) & (hi == h))
                factor = factors.factor(int(g), int(h))
                logdets[sel] = factor.logdet
                for b, chol in enumerate(factor.chol_blocks):
                    if chol.shape[0] == 0:
                        continue
                    z = scipy.linalg.solve_triangular(chol, delta_blocks[b][sel].T, lower=True)
                    quad[sel] += factors.block_weights[b] * np.sum(z.real**2 + z.imag**2, axis=0)
        values = (-0.5 * (logdets + quad)).reshape(len(rows), width)
        for k, i in enumerate(rows):
            order = np.lexsort((table.neighbors[i], -values[k]))[:k_neighbors]
            out_j[k + start] = table.neighbors[i, order]
            out_theta[k + start] = table.theta[i, order]
            out_refl[k + start] = table.reflected[i, order]
            out_score[k + start] = values[k, order]
    return NeighborTable(
        neighbors=out_j,
        theta=out_theta,
        reflected=out_refl,
        score=out_score,
        s_initial=table.s_initial,
        k_final=k_neighbors,
    )


def class_average(center, table, denoised):
    """Mean of the center's denoised image and its aligned neighbors."""
    if not 0 <= center < table.n_images:
        raise ValueError(f"center {center} outside table of {table.n_images} images")
    images = denoised.images if isinstance(denoised, ImageStack) else np.asarray(denoised)
    members = [(int(center), 0.0, False)]
    acc = np.asarray(images[center], dtype=np.float64).copy()
    for j, theta, refl, _score in table.row(center):
        members.append((j, theta, refl))
        acc += apply_alignment_image(images[j], theta, refl)
    return ClassAverage(center=int(center), average=acc / len(members), members=members)
