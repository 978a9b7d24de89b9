"""Volumes: synthetic phantoms, normalization, slice decimation, the linear
baseline, and the ISDV1 / PGM file formats.

The super-resolution axis is always axis 0 (slices); in-plane axes are H, W.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from .errors import ConfigurationError, DataError, VolumeFormatError

MAGIC = b"ISDV1\n"
RANGE_TAGS = ("raw", "normalized")


@dataclass(frozen=True)
class Volume:
    voxels: np.ndarray  # (D, H, W) float32
    spacing: tuple = (0.7, 0.7, 0.7)  # mm along (D, H, W)
    range_tag: str = "raw"
    source_range: Optional[tuple] = None  # (min, max) before normalization

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise DataError(f"volume must be 3-D, got shape {self.voxels.shape}")
        if self.range_tag not in RANGE_TAGS:
            raise DataError(f"unknown range tag {self.range_tag!r}")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise DataError(f"spacing must be three positive values, got {self.spacing}")
        if not np.isfinite(self.voxels).all():
            raise DataError("volume contains non-finite voxels")

    @property
    def shape(self) -> tuple:
        return self.voxels.shape

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]


def make_phantom_volume(seed: int, D: int, H: int, W: int, spacing=(0.7, 0.7, 0.7)) -> Volume:
    """Nested soft-edged ellipsoids with distinct intensities plus faint smooth noise.

    The first ellipsoid is the outer envelope; every later one sits inside it
    and overwrites what it covers, so all structures are nested in the first.
    Intensities lie in [0, 1].
    """
    if min(D, H, W) < 8:
        raise ConfigurationError(f"phantom dimensions must be >= 8, got {(D, H, W)}")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    dims = np.array([D, H, W], dtype=np.float64)
    # voxel coordinates centred on the volume, in voxels
    grid = np.stack(
        np.meshgrid(*[np.arange(s) - (s - 1) / 2.0 for s in (D, H, W)], indexing="ij"), axis=-1
    )
    half = (dims - 1) / 2.0

    levels = rng.permutation(np.linspace(0.25, 1.0, 7))
    vol = np.zeros((D, H, W), dtype=np.float64)
    outer_axes = half * rng.uniform(0.7, 0.9, size=3)
    outer_center = half * rng.uniform(-0.05, 0.05, size=3)
    for i in range(n):
        if i == 0:
            axes, center = outer_axes, outer_center
            rot = Rotation.from_euler("z", rng.uniform(-0.2, 0.2)).as_matrix()
            value = 0.15
        else:
            axes = outer_axes * rng.uniform(0.15, 0.5, size=3)
            room = np.clip(outer_axes - axes, 0.0, None)
            center = outer_center + room * rng.uniform(-0.6, 0.6, size=3)
            rot = Rotation.random(random_state=rng).as_matrix()
            value = levels[(i - 1) % len(levels)]
        local = (grid - center) @ rot
        r = np.sqrt(((local / axes) ** 2).sum(-1))
        # approximate signed distance to the surface in voxels, ~1 voxel soft edge
        dist = (1.0 - r) * axes.min()
        mask = 1.0 / (1.0 + np.exp(-np.clip(dist / 0.6, -50, 50)))
        vol = vol * (1.0 - mask) + value * mask

    noise = gaussian_filter(rng.standard_normal((D, H, W)), sigma=3.0)
    noise /= noise.std() + 1e-12
    vol = np.clip(vol + 0.015 * noise, 0.0, 1.0)
    return Volume(vol.astype(np.float32), tuple(float(s) for s in spacing), "raw")


def normalize_volume(v: Volume) -> Volume:
    """Min-max map to [-1, 1]; constant volumes become all zeros."""
    lo, hi = float(v.voxels.min()), float(v.voxels.max())
    if hi > lo:
        out = (v.voxels.astype(np.float64) - lo) / (hi - lo) * 2.0 - 1.0
    else:
        out = np.zeros(v.shape)
    return replace(v, voxels=out.astype(np.float32), range_tag="normalized", source_range=(lo, hi))


def denormalize_volume(v: Volume, source_range: Optional[tuple] = None) -> Volume:
    source_range = source_range or v.source_range
    if source_range is None:
        raise DataError("no source range recorded for this volume")
    lo, hi = source_range
    out = (v.voxels.astype(np.float64) + 1.0) / 2.0 * (hi - lo) + lo
    return replace(v, voxels=out.astype(np.float32), range_tag="raw", source_range=None)


def apply_normalization(v: Volume, source_range: tuple) -> Volume:
    """Normalize ``v`` with another volume's (min, max) so both share one frame."""
    lo, hi = source_range
    scale = 2.0 / (hi - lo) if hi > lo else 0.0
    out = (v.voxels.astype(np.float64) - lo) * scale - (1.0 if hi > lo else 0.0)
    return replace(v, voxels=out.astype(np.float32), range_tag="normalized", source_range=(lo, hi))


def lr_depth(d_hr: int, R: int) -> int:
    return (d_hr - 1) // R + 1


def hr_depth(d_lr: int, R: int) -> int:
    return (d_lr - 1) * R + 1


def downsample_volume(hr: Volume, R: int) -> Volume:
    """Keep slices 0, R, 2R, ... along the slice axis (thick-spacing acquisition)."""
    if int(R) != R or R < 2:
        raise ConfigurationError(f"ratio must be an integer >= 2, got {R}")
    sd, sh, sw = hr.spacing
    return replace(hr, voxels=np.ascontiguousarray(hr.voxels[::R]), spacing=(sd * R, sh, sw))


def crop_to_ratio(hr: Volume, R: int) -> Volume:
    """Trim trailing slices that fall beyond the last kept slice at ratio R."""
    d = hr_depth(lr_depth(hr.depth, R), R)
    return replace(hr, voxels=np.ascontiguousarray(hr.voxels[:d]))


def trilinear_interpolate(lr: Volume, R: int) -> Volume:
    """Linear interpolation along the slice axis; in-plane grid is unchanged."""
    if int(R) != R or R < 2:
        raise ConfigurationError(f"ratio must be an integer >= 2, got {R}")
    if lr.depth < 2:
        raise DataError("need at least two slices to interpolate")
    src = lr.voxels
    out = np.empty((hr_depth(lr.depth, R),) + src.shape[1:], dtype=src.dtype)
    lower = src[:-1].astype(np.float64)
    upper = src[1:].astype(np.float64)
    out[::R] = src
    for j in range(1, R):
        k = j / R
        out[j::R] = ((1.0 - k) * lower + k * upper).astype(src.dtype)
    sd, sh, sw = lr.spacing
    return replace(lr, voxels=out, spacing=(sd / R, sh, sw))


def generated_slice_indices(depth: int, R: int) -> np.ndarray:
    """Positions filled by super-resolution (everything not on the stride-R grid)."""
    idx = np.arange(depth)
    return idx[idx % R != 0]


def pad_to_multiple(v: Volume, multiple: int) -> tuple[Volume, tuple]:
    """Edge-pad H and W up to a multiple; returns the padded volume and (pad_h, pad_w)."""
    H, W = v.shape[1:]
    ph = (-H) % multiple
    pw = (-W) % multiple
    if ph == 0 and pw == 0:
        return v, (0, 0)
    vox = np.pad(v.voxels, ((0, 0), (0, ph), (0, pw)), mode="edge")
    return replace(v, voxels=vox), (ph, pw)


def write_volume(path, v: Volume) -> None:
    D, H, W = v.shape
    sx, sy, sz = v.spacing
    header = f"{D} {H} {W} {sx!r} {sy!r} {sz!r} {v.range_tag}\n".encode("ascii")
    payload = np.ascontiguousarray(v.voxels, dtype="<f4").tobytes()
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise VolumeFormatError(f"{path}: not an ISDV1 file")
    end = blob.find(b"\n", len(MAGIC))
    if end < 0:
        raise VolumeFormatError(f"{path}: missing header line")
    fields = blob[len(MAGIC):end].decode("ascii", errors="replace").split()
    if len(fields) != 7:
        raise VolumeFormatError(f"{path}: malformed header {fields}")
    try:
        D, H, W = (int(f) for f in fields[:3])
        spacing = tuple(float(f) for f in fields[3:6])
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: malformed header {fields}") from exc
    tag = fields[6]
    if tag not in RANGE_TAGS or min(D, H, W) < 1:
        raise VolumeFormatError(f"{path}: malformed header {fields}")
    payload = blob[end + 1:]
    expected = D * H * W * 4
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: length mismatch, header declares {D * H * W} values "
            f"({expected} bytes) but payload has {len(payload)} bytes"
        )
    vox = np.frombuffer(payload, dtype="<f4").reshape(D, H, W).astype(np.float32)
    return Volume(vox, spacing, tag)


def slice_to_bytes(slice2d: np.ndarray) -> np.ndarray:
    """[-1, 1] -> [0, 255], rounding half up."""
    scaled = (np.clip(np.asarray(slice2d, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.floor(scaled + 0.5).astype(np.uint8)


def export_slice_pgm(slice2d, path) -> None:
    img = slice_to_bytes(slice2d)
    if img.ndim != 2:
        raise DataError(f"PGM export needs a 2-D slice, got shape {img.shape}")
    H, W = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise VolumeFormatError(f"{path}: not a binary PGM")
    W, H = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(H, W)

