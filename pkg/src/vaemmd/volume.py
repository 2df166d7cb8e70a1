"""Volumes with physical spacing, the RVOL file format, preprocessing ops,
and the dataset manifest.

RVOL = one UTF-8 JSON header line (shape, spacing_mm, dtype, kind, version)
+ newline + little-endian raw voxels in row-major order. Round-trips are
bit-exact, which downstream determinism checks rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng

RVOL_VERSION = 1

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("uint8")}


class VolumeError(Exception):
    pass


class ManifestError(Exception):
    pass


@dataclass
class VolumeHeader:
    shape: tuple
    spacing_mm: tuple
    dtype: str = "f32"
    kind: str = "image"

    def validate(self):
        if len(self.shape) != 3 or any(int(s) <= 0 for s in self.shape):
            raise VolumeError(f"shape must be 3 positive ints, got {self.shape}")
        if len(self.spacing_mm) != 3 or any(s <= 0 for s in self.spacing_mm):
            raise VolumeError(f"spacing must be 3 positive reals, got {self.spacing_mm}")
        if self.dtype not in _DTYPES:
            raise VolumeError(f"dtype must be f32 or u8, got {self.dtype!r}")
        if self.kind not in ("image", "mask"):
            raise VolumeError(f"kind must be image or mask, got {self.kind!r}")
        if self.dtype == "u8" and self.kind != "mask":
            raise VolumeError("u8 dtype is reserved for masks")


@dataclass
class Volume:
    header: VolumeHeader
    voxels: np.ndarray

    def validate(self):
        self.header.validate()
        if self.voxels.shape != tuple(self.header.shape):
            raise VolumeError(
                f"voxel array shape {self.voxels.shape} != header shape {self.header.shape}"
            )
        if self.header.kind == "image" and not np.all(np.isfinite(self.voxels)):
            raise VolumeError("image voxels must be finite")
        if self.header.kind == "mask":
            vals = np.unique(self.voxels)
            if vals.size > 0 and (vals.min() < 0 or vals.max() > 255):
                raise VolumeError("mask labels must be small non-negative ints")

    @property
    def shape(self):
        return tuple(self.header.shape)

    @property
    def spacing(self):
        return tuple(self.header.spacing_mm)


def make_image(voxels: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> Volume:
    voxels = np.asarray(voxels, dtype=np.float32)
    v = Volume(VolumeHeader(voxels.shape, tuple(spacing_mm), "f32", "image"), voxels)
    v.validate()
    return v


def make_mask(voxels: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> Volume:
    voxels = np.asarray(voxels, dtype=np.uint8)
    v = Volume(VolumeHeader(voxels.shape, tuple(spacing_mm), "u8", "mask"), voxels)
    v.validate()
    return v


# ----------------------------------------------------------------------
# RVOL read/write
# ----------------------------------------------------------------------

def write_volume(volume: Volume, path):
    volume.validate()
    h = volume.header
    header = {
        "version": RVOL_VERSION,
        "shape": [int(s) for s in h.shape],
        "spacing_mm": [float(s) for s in h.spacing_mm],
        "dtype": h.dtype,
        "kind": h.kind,
    }
    payload = np.ascontiguousarray(volume.voxels).astype(_DTYPES[h.dtype], copy=False).tobytes()
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(payload)


def read_volume(path) -> Volume:
    path = Path(path)
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise VolumeError(f"malformed RVOL header in {path}: {e}") from None
        if header.get("version") != RVOL_VERSION:
            raise VolumeError(f"unsupported RVOL version in {path}")
        try:
            h = VolumeHeader(
                tuple(header["shape"]), tuple(header["spacing_mm"]), header["dtype"], header["kind"]
            )
        except KeyError as e:
            raise VolumeError(f"RVOL header missing field {e} in {path}") from None
        h.validate()
        dtype = _DTYPES[h.dtype]
        expected = int(np.prod(h.shape)) * dtype.itemsize
        raw = f.read(expected + 1)
        if len(raw) < expected:
            raise VolumeError(
                f"truncated RVOL payload in {path}: expected {expected} bytes, got {len(raw)}"
            )
        if len(raw) > expected:
            raise VolumeError(f"RVOL payload in {path} longer than header declares")
    voxels = np.frombuffer(raw, dtype=dtype).reshape(h.shape)
    voxels = voxels.astype(np.float32 if h.dtype == "f32" else np.uint8)
    vol = Volume(h, voxels)
    vol.validate()
    return vol


# ----------------------------------------------------------------------
# resampling / normalization / cropping
# ----------------------------------------------------------------------

def _target_shape(shape, spacing, target_spacing):
    return tuple(
        max(1, int(round(s * sp / tsp))) for s, sp, tsp in zip(shape, spacing, target_spacing)
    )


def _sample_coords(src_shape, dst_shape):
    """Voxel-center aligned source coordinates for each destination index.

    The source physical extent is preserved: destination voxel centers are
    spread over the same extent and mapped back to fractional source indices.
    """
    coords = []
    for s, d in zip(src_shape, dst_shape):
        scale = s / d
        c = (np.arange(d) + 0.5) * scale - 0.5
        coords.append(np.clip(c, 0.0, s - 1.0))
    return coords


def _trilinear(voxels, coords):
    cz, cy, cx = np.meshgrid(*coords, indexing="ij")
    out = np.zeros(cz.shape, dtype=np.float64)
    z0 = np.floor(cz).astype(int)
    y0 = np.floor(cy).astype(int)
    x0 = np.floor(cx).astype(int)
    sz, sy, sx = voxels.shape
    z1 = np.minimum(z0 + 1, sz - 1)
    y1 = np.minimum(y0 + 1, sy - 1)
    x1 = np.minimum(x0 + 1, sx - 1)
    fz, fy, fx = cz - z0, cy - y0, cx - x0
    v = voxels.astype(np.float64)
    for zi, wz in ((z0, 1 - fz), (z1, fz)):
        for yi, wy in ((y0, 1 - fy), (y1, fy)):
            for xi, wx in ((x0, 1 - fx), (x1, fx)):
                out += wz * wy * wx * v[zi, yi, xi]
    return out


def resample_trilinear(volume: Volume, target_spacing_mm) -> Volume:
    if volume.header.kind != "image":
        raise VolumeError("resample_trilinear expects an image volume")
    if any(s <= 0 for s in target_spacing_mm):
        raise VolumeError(f"target spacing must be positive, got {target_spacing_mm}")
    dst_shape = _target_shape(volume.shape, volume.spacing, target_spacing_mm)
    if dst_shape == volume.shape:
        return make_image(volume.voxels.copy(), target_spacing_mm)
    coords = _sample_coords(volume.shape, dst_shape)
    out = _trilinear(volume.voxels, coords)
    return make_image(out.astype(np.float32), target_spacing_mm)


def resize_trilinear(volume: Volume, target_shape) -> Volume:
    if volume.header.kind != "image":
        raise VolumeError("resize_trilinear expects an image volume")
    target_shape = tuple(int(s) for s in target_shape)
    if any(s <= 0 for s in target_shape):
        raise VolumeError(f"target shape must be positive, got {target_shape}")
    new_spacing = tuple(
        sp * s / t for sp, s, t in zip(volume.spacing, volume.shape, target_shape)
    )
    if target_shape == volume.shape:
        return make_image(volume.voxels.copy(), new_spacing)
    coords = _sample_coords(volume.shape, target_shape)
    out = _trilinear(volume.voxels, coords)
    return make_image(out.astype(np.float32), new_spacing)


def resample_nearest(mask: Volume, target_spacing_mm) -> Volume:
    if mask.header.kind != "mask":
        raise VolumeError("resample_nearest expects a mask volume")
    if any(s <= 0 for s in target_spacing_mm):
        raise VolumeError(f"target spacing must be positive, got {target_spacing_mm}")
    dst_shape = _target_shape(mask.shape, mask.spacing, target_spacing_mm)
    if dst_shape == mask.shape:
        return make_mask(mask.voxels.copy(), target_spacing_mm)
    coords = _sample_coords(mask.shape, dst_shape)
    idx = [np.clip(np.round(c).astype(int), 0, s - 1) for c, s in zip(coords, mask.shape)]
    iz, iy, ix = np.meshgrid(*idx, indexing="ij")
    return make_mask(mask.voxels[iz, iy, ix], target_spacing_mm)


def crop_to_nonzero(volume: Volume, mask: Volume | None = None):
    """Tight crop to nonzero image voxels; returns (image, mask?, bounding box).

    The box is ((z0, y0, x0), (z1, y1, x1)) inclusive, recorded so the crop
    can be inverted.
    """
    nz = np.nonzero(volume.voxels)
    if nz[0].size == 0:
        raise VolumeError("crop_to_nonzero: volume is entirely zero")
    lo = tuple(int(a.min()) for a in nz)
    hi = tuple(int(a.max()) for a in nz)
    sl = tuple(slice(a, b + 1) for a, b in zip(lo, hi))
    cropped = make_image(volume.voxels[sl].copy(), volume.spacing)
    cropped_mask = None
    if mask is not None:
        if mask.shape != volume.shape:
            raise VolumeError("crop_to_nonzero: mask shape differs from image shape")
        cropped_mask = make_mask(mask.voxels[sl].copy(), mask.spacing)
    return cropped, cropped_mask, (lo, hi)


def zscore_foreground(volume: Volume) -> Volume:
    """Standardize using mean/std of strictly positive voxels."""
    fg = volume.voxels[volume.voxels > 0]
    if fg.size < 2:
        raise VolumeError("zscore_foreground needs >= 2 foreground voxels")
    mean = float(fg.mean(dtype=np.float64))
    std = float(fg.std(dtype=np.float64))
    if std == 0.0:
        raise VolumeError("zscore_foreground: zero foreground variance")
    out = (volume.voxels.astype(np.float64) - mean) / std
    return make_image(out.astype(np.float32), volume.spacing)


def minmax_to_range(volume: Volume, lo=-1.0, hi=1.0) -> Volume:
    vmin = float(volume.voxels.min())
    vmax = float(volume.voxels.max())
    if vmax <= vmin:
        raise VolumeError("minmax_to_range: constant volume (upstream corruption?)")
    out = (volume.voxels.astype(np.float64) - vmin) / (vmax - vmin) * (hi - lo) + lo
    return make_image(out.astype(np.float32), volume.spacing)


def augment(volume: Volume, mask: Volume | None = None, flip_p=0.5, rot90_p=0.3, seed=0):
    """Random axis flips and 90-degree rotations, identical for image and mask."""
    g = rng.generator(seed)
    img = volume.voxels
    msk = mask.voxels if mask is not None else None
    for axis in range(3):
        if g.random() < flip_p:
            img = np.flip(img, axis=axis)
            if msk is not None:
                msk = np.flip(msk, axis=axis)
    if g.random() < rot90_p:
        axis = int(g.integers(3))
        k = int(g.integers(1, 4))
        plane = tuple(a for a in range(3) if a != axis)
        img = np.rot90(img, k=k, axes=plane)
        if msk is not None:
            msk = np.rot90(msk, k=k, axes=plane)
    out_img = make_image(np.ascontiguousarray(img), volume.spacing)
    out_mask = make_mask(np.ascontiguousarray(msk), mask.spacing) if mask is not None else None
    return out_img, out_mask


# ----------------------------------------------------------------------
# dataset manifest
# ----------------------------------------------------------------------

VALID_SPLITS = ("train", "val", "test")


@dataclass
class Case:
    case_id: str
    domain_id: str
    image_path: str
    mask_path: str
    split: str


@dataclass
class DatasetManifest:
    cases: list = field(default_factory=list)
    root: Path = field(default_factory=Path)

    def by_split(self, split: str):
        return [c for c in self.cases if c.split == split]

    def domains(self):
        return sorted({c.domain_id for c in self.cases})

    def resolve(self, rel_path: str) -> Path:
        return self.root / rel_path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"malformed manifest {path}: {e}") from None
    cases = []
    seen = set()
    for raw in doc.get("cases", []):
        try:
            case = Case(
                raw["case_id"], raw["domain_id"], raw["image_path"], raw["mask_path"], raw["split"]
            )
        except KeyError as e:
            raise ManifestError(f"manifest case missing field {e}") from None
        if case.split not in VALID_SPLITS:
            raise ManifestError(f"unknown split {case.split!r} for case {case.case_id!r}")
        if case.case_id in seen:
            raise ManifestError(f"duplicate case_id {case.case_id!r}")
        seen.add(case.case_id)
        for rel in (case.image_path, case.mask_path):
            if not (path.parent / rel).exists():
                raise ManifestError(f"manifest references missing file {rel!r}")
        cases.append(case)
    return DatasetManifest(cases=cases, root=path.parent)


def save_manifest(manifest: DatasetManifest, path):
    doc = {
        "cases": [
            {
                "case_id": c.case_id,
                "domain_id": c.domain_id,
                "image_path": c.image_path,
                "mask_path": c.mask_path,
                "split": c.split,
            }
            for c in manifest.cases
        ]
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
