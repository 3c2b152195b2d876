"""Ground-truth metrics: true-neighbor counts and angular-distance densities.

A directed neighbor pair counts as true when the clean images of the two
members correlate above a threshold after maximizing over in-plane rotation
and reflection. Correlations are Pearson-style on the disk: each clean
image is masked to the basis disk and its disk mean subtracted before the
rotational search, so constant offsets do not inflate the metric.

Angular distance between two orientations is the angle between their
viewing directions (in-plane spin is ignored). For neighbor pairs matched
through a reflection, the reported distance is folded to
min(theta, 180 - theta), since a mirrored view corresponds to the
antipodal viewing direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cryoclass.basis import FourierBesselBasis
from cryoclass.classify import _corr_over_angles, _fold_phase_series
from cryoclass.geometry import viewing_directions
from cryoclass.validation import check_unit_quaternions

REFLECTED_DISTANCE_CONVENTION = "min(theta,180-theta)"


@dataclass
class EvalReport:
    """Counts and angular-distance density over the directed pairs of a table."""

    true_neighbor_count: int
    threshold: float
    angular_distances: np.ndarray  # (n_pairs,) degrees
    density: np.ndarray  # (180,) per-degree density, integrates to 1
    n_pairs: int
    reflected_distance: str = REFLECTED_DISTANCE_CONVENTION
    bin_edges: np.ndarray = field(default_factory=lambda: np.arange(181.0))

    def mass(self, lo_deg, hi_deg):
        """Integrated density over [lo_deg, hi_deg)."""
        lo, hi = int(lo_deg), int(hi_deg)
        return float(self.density[lo:hi].sum())

    def to_csv(self, path):
        lines = [
            "metric,value",
            f"true_neighbor_count,{self.true_neighbor_count}",
            f"threshold,{self.threshold!r}",
            f"n_pairs,{self.n_pairs}",
            f"reflected_distance,{self.reflected_distance}",
            "bin_deg,density",
        ]
        for b in range(self.density.size):
            lines.append(f"{b},{self.density[b]!r}")
        Path(path).write_text("\n".join(lines) + "\n")


def angular_distance(quat_i, quat_j):
    """Angle in degrees between the two viewing directions, in [0, 180]."""
    qi = check_unit_quaternions(quat_i)
    qj = check_unit_quaternions(quat_j)
    vi = viewing_directions(qi)
    vj = viewing_directions(qj)
    dot = np.clip(np.sum(vi * vj, axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dot)))


def _processed_clean_coeffs(clean_images, basis):
    """Disk-masked, disk-mean-subtracted expansion of clean images."""
    arr = np.asarray(clean_images, dtype=np.float64)
    disk = arr[:, basis.mask]
    disk = disk - disk.mean(axis=1, keepdims=True)
    coeffs = basis.expand_disk(disk)
    norms = basis.norm(coeffs)
    if np.any(norms == 0.0):
        raise ValueError("a clean image is constant on the disk; correlation undefined")
    return coeffs, norms


def _pairwise_max_corr(coeffs, norms, basis, idx_i, idx_j, angles):
    """Max over rotation grid and reflection of the normalized correlation."""
    ci = np.conj(coeffs[idx_i])
    cj = coeffs[idx_j]
    plain_terms = []
    refl_terms = []
    for _b, _m, sl in basis.iter_blocks():
        w = basis.weight_of[sl][None, :]
        wi = ci[:, sl] * w
        plain_terms.append(np.sum(wi * cj[:, sl], axis=1))
        refl_terms.append(np.sum(wi * np.conj(cj[:, sl]), axis=1))
    corr_plain = _corr_over_angles(_fold_phase_series(plain_terms, basis, angles), angles)
    corr_refl = _corr_over_angles(_fold_phase_series(refl_terms, basis, angles), angles)
    best = np.maximum(corr_plain.max(axis=-1), corr_refl.max(axis=-1))
    return best / (norms[idx_i] * norms[idx_j])


def clean_pair_correlation(stack, i, j, basis=None, angles=360):
    """Rotation- and reflection-maximized clean-image correlation of (i, j)."""
    if stack.truth is None or stack.truth.clean is None:
        raise ValueError("stack has no clean ground-truth images")
    if basis is None:
        basis = FourierBesselBasis(stack.p, (stack.p - 1) // 2)
    coeffs, norms = _processed_clean_coeffs(stack.truth.clean[[i, j]], basis)
    val = _pairwise_max_corr(coeffs, norms, basis, np.array([0]), np.array([1]), angles)
    return float(val[0])


def evaluate(table, stack, threshold=0.9, basis=None, angles=360):
    """Score every directed pair of the table against the ground truth."""
    if stack.truth is None or stack.truth.clean is None:
        raise ValueError("evaluation requires ground truth with clean images")
    if basis is None:
        basis = FourierBesselBasis(stack.p, (stack.p - 1) // 2)
    n, width = table.neighbors.shape
    idx_i = np.repeat(np.arange(n), width)
    idx_j = table.neighbors.ravel().astype(np.int64)
    refl = table.reflected.ravel()

    coeffs, norms = _processed_clean_coeffs(stack.truth.clean, basis)
    n_pairs = idx_i.size
    corr = np.empty(n_pairs)
    chunk = max(1, (1 << 24) // max(1, angles * 8))
    for start in range(0, n_pairs, chunk):
        sel = slice(start, min(start + chunk, n_pairs))
        corr[sel] = _pairwise_max_corr(coeffs, norms, basis, idx_i[sel], idx_j[sel], angles)
    count = int(np.sum(corr > threshold))

    dirs = viewing_directions(stack.truth.rotations)
    dot = np.clip(np.sum(dirs[idx_i] * dirs[idx_j], axis=1), -1.0, 1.0)
    dist = np.degrees(np.arccos(dot))
    dist[refl] = np.minimum(dist[refl], 180.0 - dist[refl])

    counts, edges = np.histogram(dist, bins=np.arange(181.0))
    density = counts / float(n_pairs)  # 1-degree bins: density integrates to 1
    return EvalReport(
        true_neighbor_count=count,
        threshold=float(threshold),
        angular_distances=dist,
        density=density,
        n_pairs=int(n_pairs),
        bin_edges=edges,
    )
