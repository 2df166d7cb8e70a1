"""Procedural multi-domain phantom generator.

Each phantom is an ellipsoidal "head" with smooth random texture plus
spherical lesions of known position and radius; domain styles inject
institution-like appearance shifts (gain, offset, noise, bias field, blur,
lesion statistics). Ground-truth masks are the exact union of lesion
spheres, so downstream metrics have a noiseless reference.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rng
from .volume import Case, DatasetManifest, make_image, make_mask, save_manifest, write_volume


class PhantomError(Exception):
    pass


@dataclass
class DomainStyle:
    domain_id: str
    intensity_gain: float = 1.0
    intensity_offset: float = 0.0
    noise_sigma: float = 0.0
    bias_field_amplitude: float = 0.0
    blur_sigma_mm: float = 0.0
    lesion_count_mean: float = 3.0
    lesion_radius_range_mm: tuple = (2.0, 4.0)
    lesion_contrast: float = 0.8

    def validate(self):
        lo, hi = self.lesion_radius_range_mm
        if not (0 < lo <= hi):
            raise PhantomError(f"lesion radius range must satisfy 0 < lo <= hi, got ({lo}, {hi})")
        if self.noise_sigma < 0 or self.bias_field_amplitude < 0 or self.blur_sigma_mm < 0:
            raise PhantomError("noise/bias/blur magnitudes must be non-negative")
        if self.lesion_count_mean <= 0:
            raise PhantomError("lesion_count_mean must be positive")


@dataclass
class PhantomSpec:
    shape: tuple = (32, 32, 32)
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    styles: list = field(default_factory=list)
    cases_per_domain: int = 20
    seed: int = 0
    val_fraction: float = 0.25  # carved out of the 80% train slice

    def validate(self):
        if any(s < 16 for s in self.shape):
            raise PhantomError(f"phantom shape must be >= 16 per axis, got {self.shape}")
        if len(self.styles) < 2:
            raise PhantomError("need >= 2 domain styles for any adaptation experiment")
        for s in self.styles:
            s.validate()


# Preset appearance families, loosely: many small scattered lesions, mixed
# sizes with busier texture, a single large lesion, and few large noisy
# lesions. Gains/offsets/noise differ enough that simple per-volume
# statistics separate the domains.
PRESET_STYLES = {
    "miliary": DomainStyle(
        domain_id="miliary",
        intensity_gain=1.0,
        intensity_offset=0.0,
        noise_sigma=0.02,
        bias_field_amplitude=0.08,
        blur_sigma_mm=0.4,
        lesion_count_mean=8.0,
        lesion_radius_range_mm=(1.5, 2.5),
        lesion_contrast=0.9,
    ),
    "mixed": DomainStyle(
        domain_id="mixed",
        intensity_gain=1.25,
        intensity_offset=0.15,
        noise_sigma=0.05,
        bias_field_amplitude=0.15,
        blur_sigma_mm=0.6,
        lesion_count_mean=4.0,
        lesion_radius_range_mm=(2.0, 4.5),
        lesion_contrast=0.8,
    ),
    "solitary": DomainStyle(
        domain_id="solitary",
        intensity_gain=0.8,
        intensity_offset=-0.1,
        noise_sigma=0.03,
        bias_field_amplitude=0.1,
        blur_sigma_mm=0.8,
        lesion_count_mean=1.5,
        lesion_radius_range_mm=(4.0, 6.0),
        lesion_contrast=0.85,
    ),
    "lung-primary": DomainStyle(
        domain_id="lung-primary",
        intensity_gain=1.6,
        intensity_offset=0.3,
        noise_sigma=0.09,
        bias_field_amplitude=0.2,
        blur_sigma_mm=0.5,
        lesion_count_mean=2.5,
        lesion_radius_range_mm=(3.0, 5.5),
        lesion_contrast=0.75,
    ),
}


def style_from_dict(doc: dict) -> DomainStyle:
    doc = dict(doc)
    if "lesion_radius_range_mm" in doc:
        doc["lesion_radius_range_mm"] = tuple(doc["lesion_radius_range_mm"])
    style = DomainStyle(**doc)
    style.validate()
    return style


def save_styles(styles: dict, path):
    doc = {name: asdict(s) for name, s in styles.items()}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_styles(path) -> dict:
    doc = json.loads(Path(path).read_text())
    return {name: style_from_dict(d) for name, d in doc.items()}


# ----------------------------------------------------------------------
# single phantom
# ----------------------------------------------------------------------

def _smooth_field(gen, shape, sigma_vox, lo_res=6):
    """Low-frequency random field in roughly [-1, 1]: coarse noise upsampled."""
    coarse = gen.standard_normal((lo_res, lo_res, lo_res))
    zoom = [s / lo_res for s in shape]
    zi = np.minimum((np.arange(shape[0]) / zoom[0]).astype(int), lo_res - 1)
    yi = np.minimum((np.arange(shape[1]) / zoom[1]).astype(int), lo_res - 1)
    xi = np.minimum((np.arange(shape[2]) / zoom[2]).astype(int), lo_res - 1)
    field = coarse[np.ix_(zi, yi, xi)]
    field = gaussian_filter(field, sigma=max(sigma_vox, 1.0))
    scale = np.abs(field).max()
    return field / scale if scale > 0 else field


def generate_phantom(style: DomainStyle, shape=(32, 32, 32), spacing=(1.0, 1.0, 1.0), seed=0):
    """Build one (image, binary mask, lesion list) triple, deterministic from seed.

    Construction order: head texture, lesion spheres, bias field, gain/offset,
    blur, then noise.
    """
    style.validate()
    shape = tuple(int(s) for s in shape)
    spacing = tuple(float(s) for s in spacing)
    extent_mm = min(s * sp for s, sp in zip(shape, spacing))
    if style.lesion_radius_range_mm[1] > extent_mm / 2:
        raise PhantomError(
            f"lesion radius {style.lesion_radius_range_mm[1]} mm exceeds half the "
            f"volume extent ({extent_mm / 2} mm)"
        )

    gen = rng.generator(seed)
    zz, yy, xx = np.indices(shape).astype(np.float64)
    center = [(s - 1) / 2 for s in shape]
    semi_axes_vox = [0.42 * s for s in shape]
    # mild random anisotropy so heads differ between cases
    semi_axes_vox = [a * (1.0 + 0.08 * gen.uniform(-1, 1)) for a in semi_axes_vox]
    norm2 = (
        ((zz - center[0]) / semi_axes_vox[0]) ** 2
        + ((yy - center[1]) / semi_axes_vox[1]) ** 2
        + ((xx - center[2]) / semi_axes_vox[2]) ** 2
    )
    head = norm2 <= 1.0

    texture = _smooth_field(gen, shape, sigma_vox=1.5)
    image = np.where(head, 1.0 + 0.2 * texture, 0.0)

    # lesions: Poisson count, centers well inside the head, spheres in mm
    count = int(gen.poisson(style.lesion_count_mean))
    mask = np.zeros(shape, dtype=np.uint8)
    lesions = []
    min_semi_mm = min(a * sp for a, sp in zip(semi_axes_vox, spacing))
    lesion_bump = np.zeros(shape, dtype=np.float64)
    for _ in range(count):
        r_mm = float(gen.uniform(*style.lesion_radius_range_mm))
        placed = False
        for _attempt in range(64):
            c = [
                center[i] + gen.uniform(-0.7, 0.7) * semi_axes_vox[i] for i in range(3)
            ]
            cn = math.sqrt(sum(((c[i] - center[i]) / semi_axes_vox[i]) ** 2 for i in range(3)))
            if cn + r_mm / min_semi_mm <= 0.95:
                placed = True
                break
        if not placed:
            continue
        d2 = (
            ((zz - c[0]) * spacing[0]) ** 2
            + ((yy - c[1]) * spacing[1]) ** 2
            + ((xx - c[2]) * spacing[2]) ** 2
        )
        sphere = d2 <= r_mm**2
        mask[sphere] = 1
        lesion_bump[sphere] = 1.0
        lesions.append({"center_vox": [float(v) for v in c], "radius_mm": r_mm})

    image = image + style.lesion_contrast * lesion_bump

    bias = _smooth_field(gen, shape, sigma_vox=3.0)
    image = image + np.where(head, style.bias_field_amplitude * bias, 0.0)

    image = np.where(head, image * style.intensity_gain + style.intensity_offset, 0.0)

    if style.blur_sigma_mm > 0:
        image = gaussian_filter(image, sigma=[style.blur_sigma_mm / sp for sp in spacing])

    noise = gen.standard_normal(shape)
    if style.noise_sigma > 0:
        image = image + style.noise_sigma * noise

    return (
        make_image(image.astype(np.float32), spacing),
        make_mask(mask, spacing),
        lesions,
    )


# ----------------------------------------------------------------------
# dataset
# ----------------------------------------------------------------------

def generate_dataset(spec: PhantomSpec, out_dir) -> DatasetManifest:
    """Write per-domain phantom RVOL pairs plus a split manifest.

    Per domain: 20% test, the remaining 80% split into train and a
    validation slice (val_fraction of that 80%). Splits never share a case.
    """
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = []
    for style in spec.styles:
        n = spec.cases_per_domain
        n_test = max(1, round(0.2 * n))
        n_trainval = n - n_test
        n_val = max(1, round(spec.val_fraction * n_trainval))
        for i in range(n):
            case_seed = rng.spawn(spec.seed, zlib.crc32(style.domain_id.encode()), i)
            image, mask, lesions = generate_phantom(style, spec.shape, spec.spacing_mm, case_seed)
            case_id = f"{style.domain_id}_{i:03d}"
            img_path = f"{case_id}_img.rvol"
            mask_path = f"{case_id}_mask.rvol"
            write_volume(image, out_dir / img_path)
            write_volume(mask, out_dir / mask_path)
            (out_dir / f"{case_id}_lesions.json").write_text(json.dumps(lesions, sort_keys=True))
            if i < n - n_test - n_val:
                split = "train"
            elif i < n - n_test:
                split = "val"
            else:
                split = "test"
            cases.append(Case(case_id, style.domain_id, img_path, mask_path, split))
    manifest = DatasetManifest(cases=cases, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest
