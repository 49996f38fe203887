"""Simplified activation likelihood estimation (ALE) from peak-coordinate tables.

Each reported focus becomes a Gaussian probability blob whose width shrinks
with the study's sample size. A study's modeled activation (MA) map is the
voxel-wise maximum over its foci and the ALE map is the probabilistic union
``1 - prod(1 - MA)`` across studies. Significance comes from relocating every
focus uniformly inside a mask and recomputing the ALE map.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import FWHM_TO_SIGMA, BinaryMask, Volume3D

log = logging.getLogger(__name__)

HEADER = ["study", "n", "contrast", "x", "y", "z"]
TEMPLATE_FWHM_MM = 5.7
SUBJECT_FWHM_MM = 11.6
_CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


class FociParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class Focus:
    study: str
    n: int
    contrast: str
    x: float
    y: float
    z: float

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"study {self.study!r}: subject count must be >= 1, got {self.n}")
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError(f"study {self.study!r}: non-finite coordinate")


@dataclass
class FociTable:
    rows: list = field(default_factory=list)

    def __len__(self):
        return len(self.rows)

    def studies(self) -> dict:
        """Rows grouped by study id, in order of first appearance."""
        out: dict = {}
        for r in self.rows:
            out.setdefault(r.study, []).append(r)
        return out


def parse_foci(path) -> FociTable:
    """Read a ``study,n,contrast,x,y,z`` CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != HEADER:
            raise FociParseError(1, f"expected header {','.join(HEADER)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != 6:
                raise FociParseError(line, f"expected 6 fields, got {len(rec)}")
            try:
                rows.append(Focus(rec[0].strip(), int(rec[1]), rec[2].strip(), float(rec[3]), float(rec[4]), float(rec[5])))
            except ValueError as exc:
                raise FociParseError(line, str(exc)) from exc
    return FociTable(rows)


def write_foci(table: FociTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HEADER)
        for r in table.rows:
            w.writerow([r.study, r.n, r.contrast, repr(r.x), repr(r.y), repr(r.z)])


def fwhm_of(n: int, template_fwhm: float = TEMPLATE_FWHM_MM, subject_fwhm: float = SUBJECT_FWHM_MM) -> float:
    """Kernel FWHM in mm for a study with ``n`` subjects."""
    return math.sqrt(template_fwhm**2 + subject_fwhm**2 / n)


def _kernel(fwhm_mm: float, spacing) -> np.ndarray:
    """Voxel probabilities of a Gaussian focus centred on a voxel, summing to one."""
    sigma = fwhm_mm * FWHM_TO_SIGMA
    axes = []
    for s in spacing:
        r = max(int(math.ceil(4.0 * sigma / s)), 1)
        off = np.arange(-r, r + 1) * s
        axes.append(np.exp(-0.5 * (off / sigma) ** 2))
    k = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return k / k.sum()


def _paint_max(out: np.ndarray, kern: np.ndarray, centre) -> None:
    """``out = max(out, kern)`` with ``kern`` centred at voxel ``centre`` (clipped at borders)."""
    src, dst = [], []
    for c, kdim, odim in zip(centre, kern.shape, out.shape):
        r = kdim // 2
        lo, hi = c - r, c + r + 1
        dst.append(slice(max(lo, 0), min(hi, odim)))
        src.append(slice(max(lo, 0) - lo, kdim - (hi - min(hi, odim))))
    np.maximum(out[tuple(dst)], kern[tuple(src)], out=out[tuple(dst)])


def mm_to_voxel(grid: Volume3D, xyz) -> tuple:
    v = [int(round((c - o) / s)) for c, o, s in zip(xyz, grid.origin_mm, grid.spacing_mm)]
    if any(i < 0 or i >= d for i, d in zip(v, grid.dims)):
        raise ValueError(f"focus {tuple(xyz)} lies outside the template grid")
    return tuple(v)


def voxel_to_mm(grid: Volume3D, ijk) -> tuple:
    return tuple(float(o + i * s) for i, o, s in zip(ijk, grid.origin_mm, grid.spacing_mm))


class _KernelCache:
    def __init__(self, spacing, template_fwhm, subject_fwhm):
        self.spacing = spacing
        self.template_fwhm = template_fwhm
        self.subject_fwhm = subject_fwhm
        self._k: dict = {}

    def __call__(self, n: int) -> np.ndarray:
        if n not in self._k:
            self._k[n] = _kernel(fwhm_of(n, self.template_fwhm, self.subject_fwhm), self.spacing)
        return self._k[n]


def _ma_from_voxels(dims, voxels, kern) -> np.ndarray:
    ma = np.zeros(dims)
    for v in voxels:
        _paint_max(ma, kern, v)
    return ma


def modeled_activation(
    rows, grid: Volume3D, template_fwhm: float = TEMPLATE_FWHM_MM, subject_fwhm: float = SUBJECT_FWHM_MM
) -> Volume3D:
    """MA map of one study: voxel-wise maximum of its foci's probability kernels."""
    rows = list(rows)
    if not rows:
        return grid.like(np.zeros(grid.dims))
    kern = _kernel(fwhm_of(rows[0].n, template_fwhm, subject_fwhm), grid.spacing_mm)
    voxels = [mm_to_voxel(grid, (r.x, r.y, r.z)) for r in rows]
    return grid.like(_ma_from_voxels(grid.dims, voxels, kern))


def ale_union(maps) -> Volume3D:
    """``1 - prod_s (1 - MA_s)`` over studies on a common grid."""
    maps = list(maps)
    if not maps:
        raise ValueError("need at least one MA map")
    acc = np.ones(maps[0].dims)
    for m in maps:
        if not m.same_grid(maps[0]):
            raise ValueError("MA maps are on different grids")
        acc *= 1.0 - m.data
    return maps[0].like(1.0 - acc)


def _canonical_studies(table: FociTable) -> list:
    """Studies in an order that does not depend on the row order of the table."""
    def key(rows):
        return (rows[0].n, len(rows), sorted((r.x, r.y, r.z) for r in rows), rows[0].study)

    return sorted(table.studies().values(), key=key)


def ale_map(table: FociTable, grid: Volume3D, **kw) -> Volume3D:
    return ale_union([modeled_activation(rows, grid, **kw) for rows in _canonical_studies(table)])


@dataclass
class Cluster:
    size: int
    peak: float
    peak_mm: tuple


@dataclass
class AleResult:
    ale: Volume3D
    thresholded: Volume3D
    mask: BinaryMask
    clusters: list
    voxel_threshold: float
    cluster_threshold: float
    null_summary: dict

    def report(self) -> dict:
        return {
            "voxel_threshold": self.voxel_threshold,
            "cluster_threshold": self.cluster_threshold,
            "surviving_voxels": self.mask.voxel_count(),
            "clusters": [asdict(c) for c in self.clusters],
            "null": self.null_summary,
        }

    def to_json(self) -> str:
        return json.dumps(self.report(), indent=2)


def _null_ale(study_sizes, n_foci, kernels, mask_idx, dims, rng) -> np.ndarray:
    acc = np.ones(dims)
    for n, k in zip(study_sizes, n_foci):
        picks = mask_idx[rng.integers(0, len(mask_idx), size=k)]
        acc *= 1.0 - _ma_from_voxels(dims, picks, kernels(n))
    return 1.0 - acc


def _largest_cluster(binary) -> int:
    labels, n = ndimage.label(binary, structure=_CONNECTIVITY_26)
    if n == 0:
        return 0
    return int(np.bincount(labels.ravel())[1:].max())


def permutation_threshold(
    table: FociTable,
    grid: Volume3D,
    mask: BinaryMask,
    n_perm: int = 1000,
    p_voxel: float = 0.001,
    p_cluster: float = 0.05,
    seed: int = 0,
    template_fwhm: float = TEMPLATE_FWHM_MM,
    subject_fwhm: float = SUBJECT_FWHM_MM,
) -> AleResult:
    """Cluster-level permutation inference on the ALE map.

    The null relocates every focus uniformly inside ``mask``. The voxel
    threshold is the (1 - p_voxel) quantile of pooled in-mask null values; the
    cluster threshold is the (1 - p_cluster) quantile of the largest null
    cluster at that threshold (26-connectivity). Clusters strictly larger than
    the cluster threshold survive.
    """
    if n_perm < 100:
        raise ValueError("n_perm must be >= 100")
    if n_perm * p_cluster < 1 or n_perm * mask.voxel_count() * p_voxel < 1:
        raise ValueError(f"n_perm={n_perm} is too small for the requested quantiles")
    if not mask.same_grid(grid):
        raise ValueError("mask and template grid differ")
    if mask.voxel_count() == 0:
        raise ValueError("the null-distribution mask is empty")
    studies = _canonical_studies(table)
    if not studies:
        raise ValueError("the foci table is empty")
    kernels = _KernelCache(grid.spacing_mm, template_fwhm, subject_fwhm)
    sizes = [rows[0].n for rows in studies]
    counts = [len(rows) for rows in studies]
    mask_idx = np.argwhere(mask.data)
    dims = grid.dims

    observed = ale_map(table, grid, template_fwhm=template_fwhm, subject_fwhm=subject_fwhm)

    # pass 1: pooled voxel-level null
    pooled = np.empty((n_perm, len(mask_idx)), dtype=np.float32)
    for p in range(n_perm):
        null = _null_ale(sizes, counts, kernels, mask_idx, dims, np.random.default_rng([seed, p]))
        pooled[p] = null[mask.data]
    voxel_thr = float(np.quantile(pooled, 1.0 - p_voxel, method="higher"))
    del pooled

    # pass 2: the same permutations, replayed from their seeds, give max cluster sizes
    max_sizes = np.empty(n_perm, dtype=np.int64)
    for p in range(n_perm):
        null = _null_ale(sizes, counts, kernels, mask_idx, dims, np.random.default_rng([seed, p]))
        max_sizes[p] = _largest_cluster((null > voxel_thr) & mask.data)
    cluster_thr = float(np.quantile(max_sizes, 1.0 - p_cluster, method="higher"))

    supra = (observed.data > voxel_thr) & mask.data
    labels, n_lab = ndimage.label(supra, structure=_CONNECTIVITY_26)
    keep = np.zeros(dims, dtype=bool)
    clusters = []
    for lab in range(1, n_lab + 1):
        members = labels == lab
        size = int(members.sum())
        if size > cluster_thr:
            keep |= members
            vals = np.where(members, observed.data, -np.inf)
            peak_ijk = np.unravel_index(int(np.argmax(vals)), dims)
            clusters.append(Cluster(size, float(observed.data[peak_ijk]), voxel_to_mm(grid, peak_ijk)))
    clusters.sort(key=lambda c: (-c.size, -c.peak))
    kept = np.where(keep, observed.data, 0.0)
    nz = kept[kept > 0]
    binary = kept >= nz.min() if nz.size else np.zeros(dims, dtype=bool)
    summary = {
        "n_perm": n_perm,
        "p_voxel": p_voxel,
        "p_cluster": p_cluster,
        "max_cluster_size_mean": float(max_sizes.mean()),
        "max_cluster_size_max": int(max_sizes.max()),
        "template_fwhm_mm": template_fwhm,
        "subject_fwhm_mm": subject_fwhm,
        "seed": seed,
    }
    log.info("ALE: voxel threshold %.4g, cluster threshold %g, %d clusters kept", voxel_thr, cluster_thr, len(clusters))
    return AleResult(
        observed, observed.like(kept), BinaryMask(binary & keep, grid.spacing_mm, grid.origin_mm),
        clusters, voxel_thr, cluster_thr, summary,
    )


def random_foci(mask: BinaryMask, grid: Volume3D, n_studies: int, foci_per_study: int, n_subjects: int, rng) -> FociTable:
    """Foci placed uniformly inside ``mask``; the null-generating process as data."""
    idx = np.argwhere(mask.data)
    rows = []
    for s in range(n_studies):
        for v in idx[rng.integers(0, len(idx), size=foci_per_study)]:
            x, y, z = voxel_to_mm(grid, v)
            rows.append(Focus(f"s{s:03d}", n_subjects, "random", x, y, z))
    return FociTable(rows)


def write_cluster_report(result: AleResult, path) -> None:
    Path(path).write_text(result.to_json())
