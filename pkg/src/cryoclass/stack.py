"""Image stack containers and MRC2014-subset stack I/O.

A stack holds n square images of odd side p, stored in real space as
float32 (the MRC mode-2 representation), with per-image defocus-group
labels and optional ground truth. Group labels, quaternions and per-image
defocus travel in a JSON-lines sidecar `<stem>.meta.jsonl` next to the MRC
file, one object per image. Clean reference images, when present, are
carried in memory only; the pipeline persists them as a separate stack.

The MRC subset written here: 1024-byte header with nx, ny, nz, mode as the
first four int32 words (mode 2 only), "MAP " at byte 208, little-endian
machine stamp 0x44 0x44 0x00 0x00 at byte 212, float32 pixel data directly
after the header with x fastest and z the image index.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from cryoclass.errors import MrcFormatError, NonSquareError, UnsupportedModeError

_HEADER_BYTES = 1024
_MODE_FLOAT32 = 2


@dataclass
class GroundTruth:
    """Per-image generating rotation (scalar-first unit quaternion) and
    optional noiseless, CTF-free projection."""

    rotations: np.ndarray  # (n, 4) float64
    clean: np.ndarray | None = None  # (n, p, p) float32

    def __post_init__(self):
        rot = np.ascontiguousarray(self.rotations, dtype=np.float64)
        if rot.ndim != 2 or rot.shape[1] != 4:
            raise ValueError(f"rotations must have shape (n, 4), got {rot.shape}")
        norms = np.linalg.norm(rot, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("rotation quaternions must have unit norm (within 1e-9)")
        self.rotations = rot
        if self.clean is not None:
            self.clean = np.ascontiguousarray(self.clean, dtype=np.float32)

    def __eq__(self, other):
        if not isinstance(other, GroundTruth):
            return NotImplemented
        if not np.array_equal(self.rotations, other.rotations):
            return False
        if (self.clean is None) != (other.clean is None):
            return False
        return self.clean is None or np.array_equal(self.clean, other.clean)


class ImageStack:
    """Immutable-by-convention container of n real images sharing p and pixel size."""

    def __init__(self, images, pixel_size=1.0, group_of=None, truth=None, defocus_um=None):
        images = np.ascontiguousarray(images, dtype=np.float32)
        if images.ndim != 3:
            raise ValueError(f"images must be a (n, p, p) array, got shape {images.shape}")
        n, p, q = images.shape
        if n < 1:
            raise ValueError("stack must contain at least one image")
        if p != q:
            raise ValueError(f"images must be square, got {p}x{q}")
        if p % 2 == 0:
            raise ValueError(f"image side must be odd, got {p}")
        if not np.all(np.isfinite(images)):
            raise ValueError("image pixels must be finite")
        if not pixel_size > 0:
            raise ValueError("pixel_size must be positive")
        self.images = images
        # snapped to what the float32 cell-length header word can represent,
        # so write -> read round-trips the value exactly
        self.pixel_size = float(np.float32(pixel_size * p)) / p
        if group_of is None:
            group_of = np.zeros(n, dtype=np.int32)
        group_of = np.ascontiguousarray(group_of, dtype=np.int32)
        if group_of.shape != (n,):
            raise ValueError(f"group_of must have shape ({n},), got {group_of.shape}")
        if np.any(group_of < 0):
            raise ValueError("group indices must be non-negative")
        self.group_of = group_of
        if truth is not None and truth.rotations.shape[0] != n:
            raise ValueError("ground truth length does not match image count")
        self.truth = truth
        if defocus_um is not None:
            defocus_um = np.ascontiguousarray(defocus_um, dtype=np.float64)
            if defocus_um.shape != (n,):
                raise ValueError(f"defocus_um must have shape ({n},)")
        self.defocus_um = defocus_um

    @property
    def n(self):
        return self.images.shape[0]

    @property
    def p(self):
        return self.images.shape[1]

    @property
    def n_groups(self):
        return int(self.group_of.max()) + 1

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, ImageStack):
            return NotImplemented
        if self.images.shape != other.images.shape:
            return False
        if not np.array_equal(self.images, other.images):
            return False
        if self.pixel_size != other.pixel_size:
            return False
        if not np.array_equal(self.group_of, other.group_of):
            return False
        if (self.truth is None) != (other.truth is None):
            return False
        if self.truth is not None and self.truth != other.truth:
            return False
        if (self.defocus_um is None) != (other.defocus_um is None):
            return False
        if self.defocus_um is not None and not np.array_equal(self.defocus_um, other.defocus_um):
            return False
        return True


def _meta_path(path):
    path = Path(path)
    return path.with_name(path.with_suffix("").name + ".meta.jsonl")


def split_by_group(stack):
    """Partition image indices by defocus group, ordered by group index.

    Index order within each group follows the stack order.
    """
    out = []
    for g in np.unique(stack.group_of):
        out.append((int(g), np.flatnonzero(stack.group_of == g)))
    return out


def write_mrc_stack(stack, path):
    """Write a stack as mode-2 MRC plus its `<stem>.meta.jsonl` sidecar.

    Ground-truth rotations go into the sidecar; clean images do not (the
    pipeline stores them as their own stack). I/O errors propagate as
    OSError with the offending path.
    """
    if len(stack) < 1:
        raise ValueError("cannot write an empty stack")
    path = Path(path)
    n, p = stack.n, stack.p
    header = bytearray(_HEADER_BYTES)
    struct.pack_into("<4i", header, 0, p, p, n, _MODE_FLOAT32)
    struct.pack_into("<3i", header, 28, p, p, n)  # mx, my, mz
    cell = np.float32(stack.pixel_size * p)
    struct.pack_into("<3f", header, 40, cell, cell, np.float32(stack.pixel_size * n))
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)  # mapc, mapr, maps
    struct.pack_into(
        "<3f", header, 76, float(stack.images.min()), float(stack.images.max()), float(stack.images.mean())
    )
    struct.pack_into("<i", header, 108, 20140)  # NVERSION
    header[208:212] = b"MAP "
    header[212:216] = b"\x44\x44\x00\x00"
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(np.ascontiguousarray(stack.images, dtype="<f4").tobytes())

    records = []
    for i in range(n):
        rec = {"group": int(stack.group_of[i])}
        if stack.truth is not None:
            rec["quat"] = [float(v) for v in stack.truth.rotations[i]]
        if stack.defocus_um is not None:
            rec["defocus_um"] = float(stack.defocus_um[i])
        records.append(json.dumps(rec))
    _meta_path(path).write_text("\n".join(records) + "\n")


def read_mrc_stack(path):
    """Read a mode-2 MRC stack and its sidecar, if present, back into an ImageStack."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER_BYTES:
        raise MrcFormatError("truncated header", byte_offset=len(data), path=path)
    nx, ny, nz, mode = struct.unpack_from("<4i", data, 0)
    if data[208:212] != b"MAP ":
        raise MrcFormatError("missing 'MAP ' tag", byte_offset=208, path=path)
    if data[212:214] != b"\x44\x44":
        raise MrcFormatError("unsupported machine stamp, need little-endian 0x44 0x44", byte_offset=212, path=path)
    if mode != _MODE_FLOAT32:
        raise UnsupportedModeError(f"mode {mode} unsupported, only mode 2 (float32) is handled", byte_offset=12, path=path)
    if nx != ny:
        raise NonSquareError(f"images must be square, header has nx={nx} ny={ny}", byte_offset=0, path=path)
    if nx < 1 or nz < 1:
        raise MrcFormatError(f"invalid dimensions nx={nx} nz={nz}", byte_offset=0, path=path)
    if nx % 2 == 0:
        raise MrcFormatError(f"image side must be odd, header has nx={nx}", byte_offset=0, path=path)
    count = nx * ny * nz
    if len(data) - _HEADER_BYTES < 4 * count:
        raise MrcFormatError("truncated pixel data", byte_offset=len(data), path=path)
    pixels = np.frombuffer(data, dtype="<f4", count=count, offset=_HEADER_BYTES)
    pixels = pixels.reshape(nz, ny, nx).copy()

    mx = struct.unpack_from("<i", data, 28)[0]
    xlen = struct.unpack_from("<f", data, 40)[0]
    pixel_size = float(xlen) / mx if mx > 0 and xlen > 0 else 1.0

    group_of = None
    truth = None
    defocus = None
    meta = _meta_path(path)
    if meta.exists():
        group_of, quats, defocus = _read_sidecar(meta, nz)
        if quats is not None:
            truth = GroundTruth(rotations=quats)
    return ImageStack(pixels, pixel_size=pixel_size, group_of=group_of, truth=truth, defocus_um=defocus)


def _read_sidecar(meta, n):
    lines = [ln for ln in meta.read_text().splitlines() if ln.strip()]
    if len(lines) != n:
        raise MrcFormatError(f"sidecar has {len(lines)} records for {n} images", path=meta)
    groups = np.zeros(n, dtype=np.int32)
    quats = np.zeros((n, 4), dtype=np.float64)
    defocus = np.zeros(n, dtype=np.float64)
    have_quat = 0
    have_def = 0
    for i, line in enumerate(lines):
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MrcFormatError(f"invalid sidecar JSON on line {i + 1}: {exc}", path=meta) from exc
        if "group" not in rec:
            raise MrcFormatError(f"sidecar record {i + 1} missing 'group'", path=meta)
        groups[i] = int(rec["group"])
        if "quat" in rec:
            quats[i] = rec["quat"]
            have_quat += 1
        if "defocus_um" in rec:
            defocus[i] = rec["defocus_um"]
            have_def += 1
    if have_quat not in (0, n):
        raise MrcFormatError("sidecar has quaternions for only some images", path=meta)
    if have_def not in (0, n):
        raise MrcFormatError("sidecar has defocus for only some images", path=meta)
    return groups, (quats if have_quat == n else None), (defocus if have_def == n else None)
