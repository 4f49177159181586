"""Age-bias correction, Delta-Age and the end-to-end brain-age pipeline."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .covariance import CovarianceModel, covariance_of
from .dataset import Cohort, Group, filter_group, standardize
from .errors import DataError
from .stats import CorrelationResult, GroupStatistics, delta_age_groups, group_statistics, pearson
from .training import Ensemble, TrainConfig, predict_ensemble, train_config_to_dict, train_ensemble
from .vnn import VnnConfig, config_to_dict

PROTOCOLS = ("hc_only", "full_cohort")
EVAL_BINDINGS = ("whole", "train_pool")


@dataclass(frozen=True)
class BiasCorrector:
    alpha: float
    beta: float
    fit_group: tuple[str, ...] = ("HC",)
    fit_n: int = 0

    def __post_init__(self):
        if self.fit_n < 2:
            raise DataError("a bias corrector must be fit on at least two subjects")
        if not (math.isfinite(self.alpha) and math.isfinite(self.beta)):
            raise DataError("bias corrector coefficients must be finite")


def fit_bias(phi: Sequence[float], y: Sequence[float], fit_group: Iterable[str] = ("HC",)) -> BiasCorrector:
    """Least-squares fit of (phi - y) = alpha * y + beta."""
    phi = np.asarray(phi, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    if phi.shape != y.shape:
        raise DataError("fit_bias needs paired estimates and ages")
    if y.size < 2:
        raise DataError("fit_bias needs at least two subjects")
    yc = y - y.mean()
    syy = float(yc @ yc)
    if syy == 0.0:
        raise DataError("fit_bias: chronological ages have zero variance")
    gap = phi - y
    alpha = float(yc @ (gap - gap.mean())) / syy
    beta = float(gap.mean() - alpha * y.mean())
    return BiasCorrector(alpha, beta, tuple(fit_group), int(y.size))


def apply_bias(bc: BiasCorrector, phi, y):
    """Returns ``(brain_age, delta_age)``; scalars in, scalars out."""
    brain = np.asarray(phi, dtype=float) - (bc.alpha * np.asarray(y, dtype=float) + bc.beta)
    delta = brain - np.asarray(y, dtype=float)
    if brain.ndim == 0:
        return float(brain), float(delta)
    return brain, delta


@dataclass(frozen=True)
class DeltaAgeRecord:
    id: str
    group: str
    age: float
    phi: float
    brain_age: float
    delta_age: float
    cdr: float | None = None


@dataclass
class DeltaAgeReport:
    records: list[DeltaAgeRecord]
    group_mae: dict[str, float] = field(default_factory=dict)
    statistics: GroupStatistics | None = None
    cdr_correlation: CorrelationResult | None = None
    metadata: dict = field(default_factory=dict)

    def group_mean_delta(self) -> dict[str, float]:
        return {g: float(np.mean(v)) for g, v in delta_age_groups(self.records).items()}

    def hc_offset(self) -> float:
        hc = [r.delta_age for r in self.records if r.group == "HC"]
        return float(np.mean(hc)) if hc else math.nan

    def to_dict(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "group_mae": self.group_mae,
            "group_mean_delta_age": self.group_mean_delta(),
            "statistics": None if self.statistics is None else self.statistics.to_dict(),
            "cdr_correlation": None if self.cdr_correlation is None else asdict(self.cdr_correlation),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=False)

    @classmethod
    def from_dict(cls, doc: dict) -> DeltaAgeReport:
        records = [DeltaAgeRecord(**r) for r in doc["records"]]
        return cls(records, dict(doc.get("group_mae", {})), metadata=dict(doc.get("metadata", {})))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "group", "age", "phi", "brain_age", "delta_age"])
        for r in self.records:
            writer.writerow([r.id, r.group, repr(r.age), repr(r.phi), repr(r.brain_age), repr(r.delta_age)])
        return buf.getvalue()

    def boxplot_csv(self) -> str:
        """Per-group box-plot summary of Delta-Age (Tukey 1.5 IQR whiskers)."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["group", "n", "q1", "median", "q3", "whisker_low", "whisker_high", "outliers"])
        for g in [lab.value for lab in Group]:
            vals = np.array([r.delta_age for r in self.records if r.group == g])
            if vals.size == 0:
                continue
            box = boxplot_stats(vals)
            writer.writerow(
                [g, vals.size]
                + [repr(box[k]) for k in ("q1", "median", "q3", "whisker_low", "whisker_high")]
                + [";".join(repr(v) for v in box["outliers"])]
            )
        return buf.getvalue()


def boxplot_stats(values: Sequence[float]) -> dict:
    v = np.sort(np.asarray(values, dtype=float))
    q1, med, q3 = (float(x) for x in np.percentile(v, [25, 50, 75]))
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    return {
        "q1": q1,
        "median": med,
        "q3": q3,
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": [float(x) for x in v[(v < lo_fence) | (v > hi_fence)]],
    }


def build_report(cohort: Cohort, phi: np.ndarray, corrector: BiasCorrector, metadata: dict | None = None) -> DeltaAgeReport:
    """Apply ``corrector`` to every subject and attach group statistics when defined."""
    phi = np.asarray(phi, dtype=float)
    brain, delta = apply_bias(corrector, phi, cohort.ages)
    records = [
        DeltaAgeRecord(s.id, s.group.value, float(s.age), float(p), float(b), float(d), s.cdr)
        for s, p, b, d in zip(cohort.subjects, phi, brain, delta)
    ]
    group_mae: dict[str, float] = {}
    for g in Group:
        vals = [abs(r.brain_age - r.age) for r in records if r.group == g.value]
        if vals:
            group_mae[g.value] = float(np.mean(vals))
    report = DeltaAgeReport(records, group_mae, metadata=dict(metadata or {}))
    groups = delta_age_groups(records)
    if len(groups) >= 2 and all(len(v) >= 2 for v in groups.values()):
        try:
            report.statistics = group_statistics(report)
        except DataError as exc:  # e.g. every Delta-Age identical, F undefined
            report.metadata["statistics_skipped"] = str(exc)
    with_cdr = [r for r in records if r.cdr is not None]
    if len(with_cdr) >= 3:
        cdr = np.array([r.cdr for r in with_cdr])
        d = np.array([r.delta_age for r in with_cdr])
        if np.ptp(cdr) > 0 and np.ptp(d) > 0:
            report.cdr_correlation = pearson(d, cdr)
    return report


def corrector_from_cohort(cohort: Cohort, phi: np.ndarray) -> BiasCorrector:
    """Fit on the HC subjects of ``cohort``."""
    mask = np.array([s.group is Group.HC for s in cohort.subjects])
    if mask.sum() < 2:
        raise DataError("bias correction needs at least two HC subjects")
    return fit_bias(np.asarray(phi)[mask], cohort.ages[mask], ("HC",))


def corrector_to_dict(bc: BiasCorrector) -> dict:
    return {"alpha": bc.alpha, "beta": bc.beta, "fit_group": list(bc.fit_group), "fit_n": bc.fit_n}


def corrector_from_dict(doc: dict) -> BiasCorrector:
    return BiasCorrector(float(doc["alpha"]), float(doc["beta"]), tuple(doc["fit_group"]), int(doc["fit_n"]))


def protocol_train_config(cohort: Cohort, protocol: str, tcfg: TrainConfig) -> TrainConfig:
    if protocol not in PROTOCOLS:
        raise DataError(f"protocol must be one of {PROTOCOLS}")
    if protocol == "hc_only":
        return replace(tcfg, train_groups=frozenset({Group.HC}))
    return replace(tcfg, train_groups=frozenset(cohort.groups))


def prepare_cohort(cohort: Cohort, standardize_features: bool) -> Cohort:
    return standardize(cohort)[0] if standardize_features else cohort


def evaluation_covariance(cohort: Cohort, binding: str, tcfg: TrainConfig) -> CovarianceModel:
    if binding not in EVAL_BINDINGS:
        raise DataError(f"evaluation binding must be one of {EVAL_BINDINGS}")
    if binding == "whole":
        return covariance_of(cohort.X)
    return covariance_of(filter_group(cohort, tcfg.train_groups).X)


@dataclass
class PipelineResult:
    report: DeltaAgeReport
    ensemble: Ensemble
    corrector: BiasCorrector
    eval_cov: CovarianceModel
    cohort: Cohort  # as evaluated, i.e. after optional standardization


def evaluate_cohort(
    ensemble: Ensemble,
    cohort: Cohort,
    tcfg: TrainConfig,
    *,
    protocol: str,
    standardize_features: bool = False,
    eval_binding: str = "whole",
) -> PipelineResult:
    """Score a cohort with a trained ensemble, fit the HC corrector, assemble the report."""
    if not any(s.group is Group.HC for s in cohort.subjects):
        raise DataError("cohort has no HC subjects to fit the bias corrector on")
    work = prepare_cohort(cohort, standardize_features)
    cov = evaluation_covariance(work, eval_binding, tcfg)
    phi = predict_ensemble(ensemble, cov, work.X)
    corrector = corrector_from_cohort(work, phi)
    metadata = {
        "protocol": protocol,
        "scale_tag": cohort.scale_tag,
        "m": cohort.m,
        "n": cohort.n,
        "train_groups": sorted(g.value for g in tcfg.train_groups),
        "train_covariance": ensemble.binding,
        "eval_covariance": eval_binding,
        "standardize_features": standardize_features,
        "ensemble_size": len(ensemble.models),
        "ensemble_reduction": "mean before bias correction",
        "corrector": {"source": "fit on all HC subjects of this cohort", **corrector_to_dict(corrector)},
        "vnn": config_to_dict(ensemble.config),
        "train": train_config_to_dict(tcfg),
    }
    report = build_report(work, phi, corrector, metadata)
    return PipelineResult(report, ensemble, corrector, cov, work)


def run_pipeline(
    cohort: Cohort,
    protocol: str,
    vcfg: VnnConfig,
    tcfg: TrainConfig,
    *,
    standardize_features: bool = False,
    eval_binding: str = "whole",
) -> PipelineResult:
    """Train the ensemble under ``protocol`` and produce the Delta-Age report for every subject."""
    if not any(s.group is Group.HC for s in cohort.subjects):
        raise DataError("cohort has no HC subjects to fit the bias corrector on")
    tcfg = protocol_train_config(cohort, protocol, tcfg)
    work = prepare_cohort(cohort, standardize_features)
    ensemble = train_ensemble(work, vcfg, tcfg)
    return evaluate_cohort(
        ensemble, cohort, tcfg, protocol=protocol, standardize_features=standardize_features, eval_binding=eval_binding
    )
