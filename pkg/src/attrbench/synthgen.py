"""Synthetic lesion datasets built on a procedural brain-like phantom.

A single smooth base volume (or one deformed copy per subject) receives a
uniform intensity increase inside two mirrored ellipsoids for half of the
images, followed by white noise and Gaussian smoothing. Every image is a pure
function of the dataset seed and its index, so images can be produced lazily.
"""
from __future__ import annotations

import csv
import functools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import BinaryMask, Volume3D, gaussian_smooth, read_nifti, write_nifti

log = logging.getLogger(__name__)

DEFAULT_DIMS = (65, 77, 65)
DEFAULT_SPACING = (2.8, 2.8, 2.8)
BASE_MEAN = 2600.0
BASE_STD = 756.0
LESION_VOXELS = 350  # per hemisphere


@dataclass(frozen=True)
class PhantomSpec:
    """Grid and base statistics of the phantom.

    Smaller grids keep 2.8 mm voxels and the 2 x 350 voxel lesion, so a
    downscaled phantom crops the field of view but keeps the per-image
    detection difficulty and the meaning of millimetre smoothing widths.
    """

    dims: tuple = DEFAULT_DIMS
    spacing_mm: tuple | None = None
    mean: float = BASE_MEAN
    std: float = BASE_STD
    lesion_voxels: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) != 3 or min(self.dims) < 4:
            raise ValueError(f"phantom dims must be three values >= 4, got {self.dims}")
        if self.spacing_mm is None:
            object.__setattr__(self, "spacing_mm", DEFAULT_SPACING)
        if self.lesion_voxels is None:
            object.__setattr__(self, "lesion_voxels", float(LESION_VOXELS))


def _grid(dims):
    """Normalised coordinates in [-1, 1] along each axis."""
    axes = [np.linspace(-1.0, 1.0, d) for d in dims]
    return np.meshgrid(*axes, indexing="ij")


def brain_support(dims) -> np.ndarray:
    x, y, z = _grid(dims)
    return (x / 0.8) ** 2 + (y / 0.85) ** 2 + (z / 0.8) ** 2 <= 1.0


def _smooth_field(rng, dims, sigma_vox):
    f = ndimage.gaussian_filter(rng.standard_normal(dims), sigma_vox, mode="constant")
    return f / (f.std() or 1.0)


def make_base(spec: PhantomSpec) -> Volume3D:
    """Ellipsoidal head with a bright cortical shell, darker core and smooth texture."""
    rng = np.random.default_rng([spec.seed, 101])
    x, y, z = _grid(spec.dims)
    r = np.sqrt((x / 0.8) ** 2 + (y / 0.85) ** 2 + (z / 0.8) ** 2)
    support = r <= 1.0
    shell = np.exp(-(((r - 0.85) / 0.1) ** 2))
    core = np.exp(-((r / 0.35) ** 2))
    texture = _smooth_field(rng, spec.dims, max(min(spec.dims) / 16.0, 1.0))
    raw = 1.0 + 1.2 * shell - 0.6 * core + 0.35 * texture
    vals = raw[support]
    data = np.zeros(spec.dims)
    data[support] = spec.mean + spec.std * (vals - vals.mean()) / vals.std()
    np.clip(data, 0.0, None, out=data)
    return Volume3D(data, spec.spacing_mm)


def make_lesion_mask(spec: PhantomSpec) -> BinaryMask:
    """Two mirrored ellipsoids (long axis along y) in the lower-middle of the head."""
    dims = np.asarray(spec.dims, dtype=float)
    # volume of an ellipsoid with semi-axes (a, 2a, a) in voxels is 8*pi*a^3/3
    a = (spec.lesion_voxels / (8.0 * math.pi / 3.0)) ** (1.0 / 3.0)
    idx = np.meshgrid(*[np.arange(d) for d in spec.dims], indexing="ij")
    cy, cz = 0.45 * (dims[1] - 1), 0.38 * (dims[2] - 1)
    mask = np.zeros(spec.dims, dtype=bool)
    for cx in (0.32 * (dims[0] - 1), 0.68 * (dims[0] - 1)):
        mask |= ((idx[0] - cx) / a) ** 2 + ((idx[1] - cy) / (2 * a)) ** 2 + ((idx[2] - cz) / a) ** 2 <= 1.0
    if not mask.any():
        raise ValueError(f"lesion vanishes on grid {spec.dims}")
    if np.any(mask & ~ndimage.binary_erosion(brain_support(spec.dims))):
        raise ValueError("lesion mask is not strictly inside the phantom support")
    return BinaryMask(mask, spec.spacing_mm)


@dataclass
class SyntheticDataset:
    """Labels, effect sizes and subject ids of a synthetic cohort; images on demand."""

    spec: PhantomSpec
    mode: str
    labels: np.ndarray
    effects: np.ndarray
    subjects: np.ndarray
    lesion: BinaryMask
    noise_std: float
    smooth_fwhm: float
    seed: int
    deform: float = 0.0
    _bases: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.labels)

    def base(self, subject: int = 0) -> Volume3D:
        if subject not in self._bases:
            self._bases[subject] = _subject_base(self.spec, self.seed, int(subject), self.deform)
        return self._bases[subject]

    def image(self, i: int) -> Volume3D:
        base = self.base(int(self.subjects[i]))
        data = base.data.copy()
        if self.effects[i]:
            data[self.lesion.data] += self.effects[i]
        if self.noise_std:
            rng = np.random.default_rng([self.seed, 7, int(i)])
            data += rng.normal(0.0, self.noise_std, size=data.shape)
        vol = Volume3D(data, base.spacing_mm, base.origin_mm)
        return gaussian_smooth(vol, self.smooth_fwhm) if self.smooth_fwhm else vol

    def stack(self, indices=None, dtype=np.float32) -> np.ndarray:
        """Images as one [N, D, H, W] array."""
        indices = range(len(self)) if indices is None else indices
        out = np.empty((len(indices),) + self.spec.dims, dtype=dtype)
        for k, i in enumerate(indices):
            out[k] = self.image(i).data
        return out


@functools.lru_cache(maxsize=4)
def _cached_base(spec: PhantomSpec) -> Volume3D:
    return make_base(spec)


def _subject_base(spec: PhantomSpec, seed: int, subject: int, deform: float) -> Volume3D:
    base = _cached_base(spec)
    if not deform:
        return base
    rng = np.random.default_rng([seed, 11, subject])
    field_ = _smooth_field(rng, spec.dims, max(min(spec.dims) / 10.0, 1.0))
    data = base.data * np.clip(1.0 + deform * field_, 0.2, None)
    return Volume3D(data, base.spacing_mm, base.origin_mm)


def _balanced_labels(rng, n):
    if n % 2:
        raise ValueError("the number of images must be even")
    return rng.permutation(np.repeat([0, 1], n // 2))


def _effects(rng, labels, effect_max, effect_min):
    u = rng.uniform(effect_min, effect_max, size=len(labels))
    return np.where(labels == 1, u, 0.0)


def gen_single_subject(
    spec: PhantomSpec,
    n_images: int = 10000,
    effect_max: float = 2500.0,
    noise_std: float = 2000.0,
    smooth_fwhm: float = 4.0,
    seed: int = 0,
    effect_min: float = 0.0,
) -> SyntheticDataset:
    """Every image shares one base; half get a U(effect_min, effect_max) lesion increase."""
    rng = np.random.default_rng([seed, 1])
    labels = _balanced_labels(rng, n_images)
    return SyntheticDataset(
        spec=spec,
        mode="single",
        labels=labels,
        effects=_effects(rng, labels, effect_max, effect_min),
        subjects=np.zeros(n_images, dtype=np.int64),
        lesion=make_lesion_mask(spec),
        noise_std=noise_std,
        smooth_fwhm=smooth_fwhm,
        seed=seed,
    )


def gen_whole_cohort(
    spec: PhantomSpec,
    n_subjects: int = 250,
    images_per_subject: int = 40,
    effect_max: float = 2500.0,
    noise_std: float = 2000.0,
    smooth_fwhm: float = 4.0,
    seed: int = 0,
    deform: float = 0.15,
    effect_min: float = 0.0,
) -> SyntheticDataset:
    """Per-subject deformed bases, each contributing equal lesioned and clean images."""
    if n_subjects < 2:
        raise ValueError("need at least two subjects")
    if images_per_subject < 2 or images_per_subject % 2:
        raise ValueError("images_per_subject must be even and >= 2")
    rng = np.random.default_rng([seed, 2])
    labels = np.concatenate([rng.permutation(np.repeat([0, 1], images_per_subject // 2)) for _ in range(n_subjects)])
    return SyntheticDataset(
        spec=spec,
        mode="cohort",
        labels=labels,
        effects=_effects(rng, labels, effect_max, effect_min),
        subjects=np.repeat(np.arange(n_subjects), images_per_subject),
        lesion=make_lesion_mask(spec),
        noise_std=noise_std,
        smooth_fwhm=smooth_fwhm,
        seed=seed,
        deform=deform,
    )


# --------------------------------------------------------------------------
# on-disk layout: one NIfTI per image, a metadata CSV and the lesion mask
# --------------------------------------------------------------------------

META_FILE = "labels.csv"
MASK_FILE = "lesion_mask.nii"


def write_dataset(ds: SyntheticDataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(len(ds)):
        name = f"img_{i:05d}.nii"
        write_nifti(ds.image(i), out / name)
        rows.append((name, int(ds.labels[i]), f"{ds.effects[i]:.6f}", int(ds.subjects[i])))
    with open(out / META_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "label", "effect", "subject"])
        w.writerows(rows)
    write_nifti(ds.lesion.to_volume(), out / MASK_FILE)
    return out


@dataclass
class DiskDataset:
    """A dataset directory as written by :func:`write_dataset`."""

    root: Path
    files: list
    labels: np.ndarray
    subjects: np.ndarray

    def __len__(self):
        return len(self.files)

    def image(self, i: int) -> Volume3D:
        return read_nifti(self.root / self.files[i])

    def stack(self, indices=None, dtype=np.float32) -> np.ndarray:
        indices = range(len(self)) if indices is None else indices
        return np.stack([self.image(i).data.astype(dtype) for i in indices])

    def lesion(self) -> BinaryMask | None:
        p = self.root / MASK_FILE
        return BinaryMask.from_volume(read_nifti(p)) if p.exists() else None


def read_dataset(root) -> DiskDataset:
    root = Path(root)
    meta = root / META_FILE
    if not meta.exists():
        raise FileNotFoundError(f"{meta} not found")
    files, labels, subjects = [], [], []
    with open(meta, newline="") as fh:
        for row in csv.DictReader(fh):
            files.append(row["file"])
            labels.append(int(row["label"]))
            subjects.append(int(row.get("subject") or 0))
    return DiskDataset(root, files, np.asarray(labels, dtype=np.int64), np.asarray(subjects, dtype=np.int64))
