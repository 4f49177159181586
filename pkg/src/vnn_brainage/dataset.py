"""Cohort data model, CSV/JSON ingestion and reproducible splitting."""

from __future__ import annotations

import csv
import enum
import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError


class Group(str, enum.Enum):
    HC = "HC"
    MCI = "MCI"
    AD = "AD"
    OTHER = "OTHER"

    @classmethod
    def parse(cls, value: str | Group) -> Group:
        if isinstance(value, Group):
            return value
        try:
            return cls(value.strip().upper())
        except ValueError:
            raise DataError(f"unknown group label {value!r}") from None


CLINICAL_ORDER = (Group.HC, Group.MCI, Group.AD)


@dataclass(frozen=True)
class Subject:
    id: str
    age: float
    group: Group
    features: np.ndarray
    cdr: float | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=float)
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "group", Group.parse(self.group))
        if feats.ndim != 1:
            raise DataError(f"subject {self.id}: features must be a vector")
        if not (self.age > 0 and math.isfinite(self.age)):
            raise DataError(f"subject {self.id}: age must be positive, got {self.age}")
        if self.cdr is not None and not (self.cdr >= 0):
            raise DataError(f"subject {self.id}: cdr must be nonnegative, got {self.cdr}")


@dataclass(frozen=True)
class Cohort:
    m: int
    scale_tag: str
    subjects: tuple[Subject, ...] = field(default_factory=tuple)

    def __post_init__(self):
        subjects = tuple(self.subjects)
        object.__setattr__(self, "subjects", subjects)
        seen = set()
        for s in subjects:
            if s.features.shape[0] != self.m:
                raise DataError(
                    f"subject {s.id} has {s.features.shape[0]} features, cohort declares m={self.m}"
                )
            if s.id in seen:
                raise DataError(f"duplicate subject id {s.id!r}")
            seen.add(s.id)

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n(self) -> int:
        return len(self.subjects)

    @cached_property
    def X(self) -> np.ndarray:
        """Feature matrix, one row per subject (read-only)."""
        if not self.subjects:
            return np.zeros((0, self.m))
        out = np.stack([s.features for s in self.subjects])
        out.setflags(write=False)
        return out

    @cached_property
    def ages(self) -> np.ndarray:
        out = np.array([s.age for s in self.subjects], dtype=float)
        out.setflags(write=False)
        return out

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.subjects]

    @property
    def groups(self) -> list[Group]:
        return [s.group for s in self.subjects]

    def group_counts(self) -> dict[Group, int]:
        counts: dict[Group, int] = {}
        for s in self.subjects:
            counts[s.group] = counts.get(s.group, 0) + 1
        return counts

    def subset(self, indices: Iterable[int]) -> Cohort:
        return Cohort(self.m, self.scale_tag, tuple(self.subjects[i] for i in indices))

    def with_features(self, X: np.ndarray, scale_tag: str | None = None) -> Cohort:
        """Same subjects with replaced feature rows (possibly a different m)."""
        X = np.asarray(X, dtype=float)
        if X.shape[0] != self.n:
            raise DataError(f"expected {self.n} feature rows, got {X.shape[0]}")
        subjects = tuple(replace(s, features=row) for s, row in zip(self.subjects, X))
        return Cohort(X.shape[1], scale_tag or self.scale_tag, subjects)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    val_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0
    stratify_by_group: bool = False

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(not (0.0 < f < 1.0) for f in fracs):
            raise DataError(f"split fractions must lie in (0, 1), got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-12:
            raise DataError(f"split fractions must sum to 1, got {sum(fracs)!r}")
        if self.seed < 0:
            raise DataError("split seed must be unsigned")


# -- CSV / JSON ----------------------------------------------------------------

_BASE_COLUMNS = ("id", "age", "group")


def _parse_float(text: str, what: str, row: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}: non-numeric {what} {text!r}") from None
    if not math.isfinite(value):
        raise DataError(f"row {row}: non-finite {what} {text!r}")
    return value


def load_cohort(path: str | Path, scale_tag: str = "") -> Cohort:
    """Read a cohort CSV with header ``id,age,group[,cdr],f1,...,fm``.

    Row numbers in error messages count the header as row 1.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if tuple(header[:3]) != _BASE_COLUMNS:
            raise DataError(f"{path}: header must start with id,age,group, got {header[:3]}")
        has_cdr = len(header) > 3 and header[3] == "cdr"
        feat_cols = header[4:] if has_cdr else header[3:]
        expected = [f"f{j + 1}" for j in range(len(feat_cols))]
        if not feat_cols or feat_cols != expected:
            raise DataError(f"{path}: feature columns must be f1..fm, got {feat_cols[:5]}...")
        m = len(feat_cols)
        subjects = []
        seen: dict[str, int] = {}
        for rownum, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {rownum} has {len(row)} fields, header has {len(header)} (ragged row)"
                )
            sid = row[0].strip()
            if sid in seen:
                raise DataError(f"{path}: row {rownum} duplicates id {sid!r} from row {seen[sid]}")
            seen[sid] = rownum
            age = _parse_float(row[1], "age", rownum)
            try:
                group = Group.parse(row[2])
            except DataError as exc:
                raise DataError(f"{path}: row {rownum}: {exc}") from None
            cdr = None
            if has_cdr and row[3].strip():
                cdr = _parse_float(row[3], "cdr", rownum)
            offset = 4 if has_cdr else 3
            feats = [_parse_float(v, f"feature f{j + 1}", rownum) for j, v in enumerate(row[offset:])]
            try:
                subjects.append(Subject(sid, age, group, np.array(feats), cdr))
            except DataError as exc:
                raise DataError(f"{path}: row {rownum}: {exc}") from None
    return Cohort(m, scale_tag, tuple(subjects))


def save_cohort(cohort: Cohort, path: str | Path) -> None:
    """Write ``cohort`` as CSV; floats use shortest round-trip repr."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(_BASE_COLUMNS) + ["cdr"] + [f"f{j + 1}" for j in range(cohort.m)])
        for s in cohort.subjects:
            cdr = "" if s.cdr is None else repr(float(s.cdr))
            writer.writerow(
                [s.id, repr(float(s.age)), s.group.value, cdr] + [repr(float(v)) for v in s.features]
            )


def cohort_to_dict(cohort: Cohort) -> dict:
    return {
        "m": cohort.m,
        "scale_tag": cohort.scale_tag,
        "subjects": [
            {
                "id": s.id,
                "age": float(s.age),
                "group": s.group.value,
                "cdr": None if s.cdr is None else float(s.cdr),
                "features": [float(v) for v in s.features],
            }
            for s in cohort.subjects
        ],
    }


def cohort_from_dict(doc: dict) -> Cohort:
    subjects = tuple(
        Subject(d["id"], float(d["age"]), Group.parse(d["group"]), np.array(d["features"], dtype=float), d.get("cdr"))
        for d in doc["subjects"]
    )
    return Cohort(int(doc["m"]), doc.get("scale_tag", ""), subjects)


def save_cohort_json(cohort: Cohort, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cohort_to_dict(cohort), indent=1), encoding="utf-8")


def load_cohort_json(path: str | Path) -> Cohort:
    return cohort_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- selection -----------------------------------------------------------------


def filter_group(cohort: Cohort, groups: Iterable[Group | str]) -> Cohort:
    wanted = {Group.parse(g) for g in groups}
    return cohort.subset(i for i, s in enumerate(cohort.subjects) if s.group in wanted)


def apportion(n: int, fracs: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier part."""
    quotas = [n * f for f in fracs]
    counts = [int(math.floor(q)) for q in quotas]
    leftover = n - sum(counts)
    order = sorted(range(len(fracs)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def split(cohort: Cohort, spec: SplitSpec) -> tuple[Cohort, Cohort, Cohort]:
    """Deterministic train/validation/test partition.

    Each part keeps the subjects in their original cohort order.
    """
    rng = np.random.default_rng(spec.seed)
    fracs = (spec.train_frac, spec.val_frac, spec.test_frac)
    if spec.stratify_by_group:
        strata: dict[Group, list[int]] = {}
        for i, s in enumerate(cohort.subjects):
            strata.setdefault(s.group, []).append(i)
        blocks = [strata[g] for g in Group if g in strata]
    else:
        blocks = [list(range(cohort.n))]

    parts: list[list[int]] = [[], [], []]
    for block in blocks:
        perm = [block[i] for i in rng.permutation(len(block))]
        counts = apportion(len(block), fracs)
        start = 0
        for p, c in enumerate(counts):
            parts[p].extend(perm[start:start + c])
            start += c
    for name, idx in zip(("train", "validation", "test"), parts):
        if not idx:
            raise DataError(f"split of n={cohort.n} with fractions {fracs} leaves the {name} part empty")
    return tuple(cohort.subset(sorted(idx)) for idx in parts)  # type: ignore[return-value]


def standardize(cohort: Cohort, reference: Cohort | None = None) -> tuple[Cohort, np.ndarray, np.ndarray]:
    """Per-feature z-scoring with statistics taken from ``reference`` (default: the cohort itself).

    Constant features are centred but not rescaled.
    """
    ref = cohort if reference is None else reference
    if ref.m != cohort.m:
        raise DataError(f"reference dimension {ref.m} != cohort dimension {cohort.m}")
    if ref.n < 2:
        raise DataError("standardization needs at least two reference subjects")
    mean = ref.X.mean(axis=0)
    std = ref.X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return cohort.with_features((cohort.X - mean) / std), mean, std
