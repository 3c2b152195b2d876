"""Quaternion and in-plane image geometry helpers.

Quaternions are scalar-first (w, x, y, z) unit 4-vectors. The projection
direction of an orientation q is the lab z-axis pulled back into the
particle frame, i.e. the third row of the rotation matrix.

Pixel coordinates use x along columns and y along rows, both measured from
the center pixel, with theta = atan2(y, x). Rotating coefficients or images
by theta means out(r, a) = in(r, a + theta); reflection flips the y axis
(row order).
"""

from __future__ import annotations

import numpy as np


def quat_to_matrix(q):
    """Rotation matrix (or batch of matrices) of scalar-first unit quaternions."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q = q[None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty(q.shape[:1] + (3, 3))
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m[0] if single else m


def quat_mul(a, b):
    """Hamilton product a * b (apply b first, then a, as rotations)."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def axis_angle_quat(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def viewing_directions(quats):
    """Unit projection directions, one per quaternion (third matrix rows)."""
    m = quat_to_matrix(quats)
    return m[..., 2, :]


def rotate_image(img, theta):
    """Bilinear in-plane rotation with out(r, a) = in(r, a + theta), zero fill.

    theta = 0 is an exact identity.
    """
    img = np.asarray(img, dtype=np.float64)
    p = img.shape[0]
    if theta == 0.0:
        return img.copy()
    h = (p - 1) / 2.0
    idx = np.arange(p) - h
    x, y = np.meshgrid(idx, idx)  # x along columns, y along rows
    c, s = np.cos(theta), np.sin(theta)
    xs = c * x - s * y
    ys = s * x + c * y
    col = xs + h
    row = ys + h
    r0 = np.floor(row).astype(np.int64)
    c0 = np.floor(col).astype(np.int64)
    fr = row - r0
    fc = col - c0
    out = np.zeros_like(img)
    for dr in (0, 1):
        for dc in (0, 1):
            rr = r0 + dr
            cc = c0 + dc
            w = (fr if dr else 1 - fr) * (fc if dc else 1 - fc)
            inside = (rr >= 0) & (rr < p) & (cc >= 0) & (cc < p)
            vals = np.zeros_like(img)
            vals[inside] = img[rr[inside], cc[inside]]
            out += w * vals
    return out


def reflect_image(img):
    """Reflection about the horizontal axis (y -> -y, i.e. flipped row order)."""
    return np.asarray(img)[::-1, :].copy()


def apply_alignment_image(img, theta, reflected):
    """Image-domain twin of the coefficient alignment rotate(reflect?(c), theta)."""
    out = reflect_image(img) if reflected else np.asarray(img, dtype=np.float64).copy()
    return rotate_image(out, theta)
