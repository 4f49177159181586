"""Synthetic multi-scale, multi-site cortical-thickness cohorts with known ground truth.

A latent thickness field lives on a fine grid of ``D`` cells over [0, 1].
Per subject it is

    baseline(t) - atrophy * (age - 70) * profile(t)
                - atrophy * shift_g * severity * region(t)
                + smooth Gaussian noise with squared-exponential covariance
                + white (nugget) noise

and each scale's features are means over contiguous blocks of the grid.
Shifts are in years-equivalent of normal atrophy, so a subject with shift
``s`` looks ``s`` years older inside the affected region.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .dataset import Cohort, Group, Subject, apportion, save_cohort
from .errors import DataError

AGE_PIVOT = 70.0


@dataclass(frozen=True)
class GraphonSpec:
    fine_size: int = 1500
    length_scale: float = 0.08
    variance: float = 0.01  # mm^2, smooth field
    nugget: float = 0.0  # mm^2, independent per fine cell
    seed: int = 0

    def __post_init__(self):
        if self.fine_size < 2:
            raise DataError("fine grid needs at least two cells")
        if not self.length_scale > 0:
            raise DataError("kernel length-scale must be positive")
        if self.variance < 0 or self.nugget < 0:
            raise DataError("kernel variances must be nonnegative")


@dataclass(frozen=True)
class ScaleSpec:
    scales: tuple[int, ...] = (50, 100, 300, 500)

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(int(s) for s in self.scales))
        if not self.scales or any(s < 1 for s in self.scales):
            raise DataError("scales must be positive integers")


@dataclass(frozen=True)
class PathologySpec:
    shifts: dict = field(default_factory=lambda: {"HC": 0.0, "MCI": 6.0, "AD": 12.0})
    age_slopes: dict = field(default_factory=lambda: {"HC": 0.0, "MCI": 0.0, "AD": 0.0})
    proportions: dict = field(default_factory=lambda: {"HC": 0.6, "MCI": 0.2, "AD": 0.2})
    region: tuple[float, float] = (0.15, 0.65)
    severity_range: tuple[float, float] = (0.5, 1.5)
    atrophy_per_year: float = 0.01  # mm per year of age
    baseline: float = 2.5  # mm
    age_range: tuple[float, float] = (55.0, 85.0)
    cdr_base: dict = field(default_factory=lambda: {"MCI": 1.0, "AD": 3.0})
    cdr_per_severity: float = 2.0
    cdr_noise: float = 0.5

    def __post_init__(self):
        total = sum(self.proportions.values())
        if any(p < 0 for p in self.proportions.values()) or abs(total - 1.0) > 1e-9:
            raise DataError(f"group proportions must be nonnegative and sum to 1, got {self.proportions}")
        for g in self.proportions:
            Group.parse(g)
        if self.shifts.get("HC", 0.0) != 0.0:
            raise DataError("HC shift must be zero")
        lo, hi = sorted((self.shifts.get("HC", 0.0), self.shifts.get("AD", 0.0)))
        if not lo <= self.shifts.get("MCI", 0.0) <= hi:
            raise DataError("MCI shift must lie between the HC and AD shifts")
        if not 0.0 <= self.region[0] < self.region[1] <= 1.0:
            raise DataError("region must be a subinterval of [0, 1]")
        if not 0 < self.age_range[0] < self.age_range[1]:
            raise DataError("invalid age range")

    @classmethod
    def null(cls, **kwargs) -> PathologySpec:
        return cls(shifts={"HC": 0.0, "MCI": 0.0, "AD": 0.0}, **kwargs)


@dataclass(frozen=True)
class SiteSpec:
    gain_sd: float = 0.05
    offset_sd: float = 0.05  # mm
    smoothness: float = 0.2
    m: int | None = None
    seed: int = 0
    tag: str = "siteB"


def grid(D: int) -> np.ndarray:
    return (np.arange(D) + 0.5) / D


def block_bounds(D: int, m: int) -> np.ndarray:
    """Edges of ``m`` contiguous blocks covering ``D`` cells.

    Edge i sits at floor(i D / m), so sizes differ by at most one and the
    longer blocks are spread evenly over [0, 1] rather than bunched at one end.
    """
    if not 1 <= m <= D:
        raise DataError(f"cannot split {D} fine cells into {m} blocks")
    return (np.arange(m + 1) * D) // m


def aggregate(fine: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    sums = np.add.reduceat(fine, bounds[:-1], axis=-1)
    return sums / np.diff(bounds)


@lru_cache(maxsize=8)
def _kernel_factor(D: int, length_scale: float, variance: float) -> np.ndarray:
    """Low-rank square root L (D x r) with L L^T equal to the SE kernel matrix."""
    t = grid(D)
    W = variance * np.exp(-0.5 * ((t[:, None] - t[None, :]) / length_scale) ** 2)
    vals, vecs = np.linalg.eigh(W)
    keep = vals > 1e-12 * max(vals[-1], 1e-300)
    factor = vecs[:, keep] * np.sqrt(vals[keep])
    factor.setflags(write=False)
    return factor


def smooth_profile(t: np.ndarray, length_scale: float, rng: np.random.Generator) -> np.ndarray:
    """One unit-variance squared-exponential Gaussian-process draw evaluated at ``t``."""
    K = np.exp(-0.5 * ((t[:, None] - t[None, :]) / length_scale) ** 2)
    vals, vecs = np.linalg.eigh(K)
    vals = np.clip(vals, 0.0, None)
    return vecs @ (np.sqrt(vals) * rng.standard_normal(t.size))


@dataclass
class MultiscaleSample:
    cohorts: dict[int, Cohort]
    fine: np.ndarray  # (n, D) latent field
    ground_truth: dict
    template: Cohort  # subject metadata with the fine field as features

    def at(self, m: int) -> Cohort:
        return self.cohorts[m]

    def aggregate_to(self, m: int, tag: str | None = None) -> Cohort:
        D = self.fine.shape[1]
        return self.template.with_features(aggregate(self.fine, block_bounds(D, m)), tag or f"m{m}")


def _group_labels(n: int, proportions: dict, rng: np.random.Generator) -> list[Group]:
    names = [g for g in ("HC", "MCI", "AD", "OTHER") if proportions.get(g, 0) > 0]
    counts = apportion(n, [proportions[g] for g in names])
    labels = [Group(g) for g, c in zip(names, counts) for _ in range(c)]
    return [labels[i] for i in rng.permutation(n)]


def generate_multiscale(
    gspec: GraphonSpec, sspec: ScaleSpec, n: int, pspec: PathologySpec, id_prefix: str = "S"
) -> MultiscaleSample:
    if n < 10:
        raise DataError("generate at least 10 subjects")
    D = gspec.fine_size
    for m in sspec.scales:
        block_bounds(D, m)
    rng = np.random.default_rng(gspec.seed)
    t = grid(D)

    ages = rng.uniform(*pspec.age_range, size=n)
    groups = _group_labels(n, pspec.proportions, rng)
    severity = rng.uniform(*pspec.severity_range, size=n)
    smooth = rng.standard_normal((n, _kernel_factor(D, gspec.length_scale, gspec.variance).shape[1]))
    nugget = rng.standard_normal((n, D))
    cdr_noise = rng.standard_normal(n)

    baseline = pspec.baseline + 0.25 * np.sin(2 * np.pi * t)
    profile = 1.0 + 0.3 * np.cos(2 * np.pi * t)
    region = ((t >= pspec.region[0]) & (t < pspec.region[1])).astype(float)

    shift = np.array([pspec.shifts.get(g.value, 0.0) for g in groups]) * severity
    extra_slope = np.array([pspec.age_slopes.get(g.value, 0.0) for g in groups])
    a = pspec.atrophy_per_year
    fine = (
        baseline[None, :]
        - a * ((ages - AGE_PIVOT) * (1.0 + extra_slope))[:, None] * profile[None, :]
        - a * shift[:, None] * region[None, :]
    )
    if gspec.variance > 0:
        fine = fine + smooth @ _kernel_factor(D, gspec.length_scale, gspec.variance).T
    if gspec.nugget > 0:
        fine = fine + math.sqrt(gspec.nugget) * nugget

    subjects = []
    width = len(str(n - 1))
    for i in range(n):
        g = groups[i]
        cdr = None
        if g.value in pspec.cdr_base:
            cdr = max(0.0, pspec.cdr_base[g.value] + pspec.cdr_per_severity * severity[i] + pspec.cdr_noise * cdr_noise[i])
        subjects.append(Subject(f"{id_prefix}{i:0{width}d}", float(ages[i]), g, fine[i], cdr))
    template = Cohort(D, "fine", tuple(subjects))

    cohorts = {}
    bounds_by_scale = {}
    for m in sspec.scales:
        bounds = block_bounds(D, m)
        bounds_by_scale[str(m)] = bounds.tolist()
        cohorts[m] = template.with_features(aggregate(fine, bounds), f"m{m}")

    truth = {
        "graphon": asdict(gspec),
        "scales": list(sspec.scales),
        "pathology": asdict(pspec),
        "n": n,
        "age_pivot": AGE_PIVOT,
        "region_cells": [int(cells[0]), int(cells[-1]) + 1] if (cells := np.flatnonzero(region)).size else [],
        "block_bounds": bounds_by_scale,
        "severity": {s.id: float(severity[i]) for i, s in enumerate(subjects)},
        "shift_years": {s.id: float(shift[i]) for i, s in enumerate(subjects)},
    }
    return MultiscaleSample(cohorts, fine, truth, template)


def generate_site_variant(sample: MultiscaleSample, site: SiteSpec, scale: int | None = None) -> Cohort:
    """Re-measure a sample at another site: smooth per-feature gain and offset.

    With ``site.m`` set, features are re-aggregated from the fine field at that
    dimension; otherwise the cohort at ``scale`` (default: first scale) is used.
    """
    if site.m is not None:
        base = sample.aggregate_to(site.m)
    else:
        base = sample.cohorts[scale if scale is not None else next(iter(sample.cohorts))]
    rng = np.random.default_rng(site.seed)
    centers = (np.arange(base.m) + 0.5) / base.m
    gain = 1.0 + site.gain_sd * smooth_profile(centers, site.smoothness, rng)
    offset = site.offset_sd * smooth_profile(centers, site.smoothness, rng)
    if site.gain_sd == 0 and site.offset_sd == 0:
        return base.with_features(base.X.copy(), f"{site.tag}-m{base.m}")
    return base.with_features(base.X * gain + offset, f"{site.tag}-m{base.m}")


def write_sample(sample: MultiscaleSample, out_dir: str | Path, prefix: str = "cohort") -> list[Path]:
    """Per-scale CSVs plus ``ground_truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for m, cohort in sample.cohorts.items():
        path = out / f"{prefix}_m{m}.csv"
        save_cohort(cohort, path)
        paths.append(path)
    gt = out / "ground_truth.json"
    gt.write_text(json.dumps(sample.ground_truth, indent=1, sort_keys=True), encoding="utf-8")
    paths.append(gt)
    return paths
