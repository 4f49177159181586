"""Re-binding trained filter taps to covariances of other dimensions and sites."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .brainage import BiasCorrector, DeltaAgeReport, build_report, corrector_from_cohort, corrector_to_dict
from .brainage import prepare_cohort
from .covariance import CovarianceModel, covariance_of
from .dataset import Cohort
from .errors import DataError
from .training import Ensemble, predict_ensemble
from .vnn import VnnModel, forward_trace

REBIAS = ("keep_source_corrector", "refit_on_target_hc")


@dataclass(frozen=True)
class TransferConfig:
    rebias: str = "refit_on_target_hc"
    eval_binding: str = "whole"
    standardize_features: bool = False

    def __post_init__(self):
        if self.rebias not in REBIAS:
            raise DataError(f"rebias must be one of {REBIAS}")
        if self.eval_binding != "whole":
            raise DataError("transfer evaluates against the whole target cohort covariance")


def transfer_model(ens: Ensemble, target_cov: CovarianceModel) -> Ensemble:
    """Bind the unchanged members to ``target_cov``. No parameter is touched."""
    if not target_cov.normalized:
        raise DataError("target covariance must be spectrally normalized")
    return Ensemble(ens.models, ens.binding, ens.reports, target_cov)


def permuted_taps_control(
    ens: Ensemble,
    seed: int = 0,
    *,
    refit: tuple[np.ndarray, np.ndarray, CovarianceModel] | None = None,
) -> Ensemble:
    """Same architecture with each layer's tap values shuffled.

    Shuffled taps under the learned readout give an almost constant output,
    whose epsilon is small for an uninteresting reason. Passing
    ``refit=(X, ages, cov)`` re-estimates each member's readout by least
    squares on that data, so the control is an age predictor in the same units
    as the trained ensemble and the two epsilons are comparable.
    """
    rng = np.random.default_rng(seed)
    models = []
    for mdl in ens.models:
        taps = [rng.permutation(t.reshape(-1)).reshape(t.shape) for t in mdl.taps]
        w, b = mdl.readout_weights.copy(), mdl.readout_bias
        if refit is not None:
            X, ages, cov = refit
            pooled = forward_trace(VnnModel(mdl.config, taps, w, b), cov, X).pooled
            design = np.column_stack([pooled, np.ones(len(ages))])
            coef = np.linalg.lstsq(design, np.asarray(ages, dtype=float), rcond=None)[0]
            w, b = coef[:-1], float(coef[-1])
        models.append(VnnModel(mdl.config, taps, w, b))
    return Ensemble(models, ens.binding, [], ens.bound_cov)


@dataclass(frozen=True)
class EpsilonResult:
    ids: tuple[str, ...]
    differences: np.ndarray
    eps_mean: float
    eps_max: float


def _paired_rows(source: Cohort, target: Cohort) -> tuple[np.ndarray, np.ndarray, list[str]]:
    if sorted(source.ids) != sorted(target.ids):
        missing = set(source.ids) ^ set(target.ids)
        raise DataError(f"cohorts are not paired; {len(missing)} unmatched ids, e.g. {sorted(missing)[:3]}")
    order = {sid: i for i, sid in enumerate(target.ids)}
    idx = [order[sid] for sid in source.ids]
    return source.X, target.X[idx], source.ids


def measure_epsilon(
    ens: Ensemble,
    source: Cohort | np.ndarray,
    target: Cohort | np.ndarray,
    cov_source: CovarianceModel,
    cov_target: CovarianceModel,
) -> EpsilonResult:
    """Per-subject |Phi(x^m1; C_m1) - Phi(x^m2; C_m2)| and its mean and max.

    Cohorts are paired by subject id; bare arrays are paired by row.
    """
    if isinstance(source, Cohort) and isinstance(target, Cohort):
        X1, X2, ids = _paired_rows(source, target)
    else:
        X1, X2 = np.atleast_2d(source), np.atleast_2d(target)
        if X1.shape[0] != X2.shape[0]:
            raise DataError("unpaired subjects: row counts differ")
        ids = [str(i) for i in range(X1.shape[0])]
    diff = np.abs(predict_ensemble(ens, cov_source, X1) - predict_ensemble(ens, cov_target, X2))
    return EpsilonResult(tuple(ids), diff, float(diff.mean()), float(diff.max()))


@dataclass
class TransferReport:
    report: DeltaAgeReport
    rebias: str
    hc_offset: float
    eps_mean: float | None = None
    eps_max: float | None = None
    paired: list[tuple[str, float, float]] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.eps_mean is not None and not (self.eps_max >= self.eps_mean >= 0):
            raise DataError("epsilon summary must satisfy max >= mean >= 0")

    def to_dict(self) -> dict:
        return {
            "rebias": self.rebias,
            "hc_offset": self.hc_offset,
            "epsilon": None
            if self.eps_mean is None
            else {"eps_mean": self.eps_mean, "eps_max": self.eps_max, "n_paired": len(self.paired)},
            "paired_outputs": [{"id": i, "phi_source": a, "phi_target": b} for i, a, b in self.paired],
            "metadata": self.metadata,
            "delta_age": self.report.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def transfer_pipeline(
    ens: Ensemble,
    source_corrector: BiasCorrector,
    target: Cohort,
    cfg: TransferConfig,
    *,
    source: Cohort | None = None,
    source_cov: CovarianceModel | None = None,
) -> TransferReport:
    """Evaluate a trained ensemble on another scale or site without retraining.

    ``source`` (same subjects at the training scale) enables the epsilon
    summary; its covariance defaults to the whole source cohort.
    """
    work = prepare_cohort(target, cfg.standardize_features)
    target_cov = covariance_of(work.X)
    bound = transfer_model(ens, target_cov)
    phi = bound.predict(work.X)

    if cfg.rebias == "refit_on_target_hc":
        corrector = corrector_from_cohort(work, phi)
        provenance = "refit on all HC subjects of the target cohort"
    else:
        corrector = source_corrector
        provenance = "carried over from the source cohort"
    metadata = {
        "target_scale_tag": target.scale_tag,
        "target_m": target.m,
        "target_n": target.n,
        "eval_covariance": "whole target cohort, normalized",
        "standardize_features": cfg.standardize_features,
        "ensemble_size": len(ens.models),
        "corrector": {"source": provenance, **corrector_to_dict(corrector)},
    }
    report = build_report(work, phi, corrector, metadata)

    result = TransferReport(report, cfg.rebias, report.hc_offset(), metadata=dict(metadata))
    if source is not None:
        src = prepare_cohort(source, cfg.standardize_features)
        cov_src = source_cov if source_cov is not None else covariance_of(src.X)
        eps = measure_epsilon(ens, src, work, cov_src, target_cov)
        phi_src = predict_ensemble(ens, cov_src, src.X)
        phi_by_id = dict(zip(work.ids, phi))
        result.eps_mean, result.eps_max = eps.eps_mean, eps.eps_max
        result.paired = [(sid, float(a), float(phi_by_id[sid])) for sid, a in zip(src.ids, phi_src)]
        result.metadata["source_scale_tag"] = source.scale_tag
        result.metadata["source_m"] = source.m
    return result
