"""MSE objective, reverse-mode gradients through filter banks, Adam, and ensembles."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .covariance import CovarianceModel, covariance_of
from .dataset import Cohort, Group, SplitSpec, filter_group, split
from .errors import DataError, NumericalError
from .vnn import ACTIVATIONS, VnnConfig, VnnModel, config_from_dict, config_to_dict, forward, forward_trace
from .vnn import init_model, model_from_dict, model_to_dict, stacked_taps

log = logging.getLogger(__name__)

BINDINGS = ("train_split", "whole")


def mse_loss(predictions: Sequence[float], targets: Sequence[float]) -> float:
    p = np.asarray(predictions, dtype=float).reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1)
    if p.size == 0:
        raise DataError("mse_loss of an empty batch")
    if p.shape != t.shape:
        raise DataError(f"length mismatch: {p.size} predictions, {t.size} targets")
    d = p - t
    return float(d @ d) / p.size


def loss_and_grad(
    model: VnnModel, cov: CovarianceModel, X: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Batch MSE and its exact gradient w.r.t. every parameter of ``model``.

    Gradients are keyed like :meth:`VnnModel.parameters`.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    n = X.shape[0]
    if y.shape[0] != n or n == 0:
        raise DataError("X and y must be nonempty with matching lengths")
    _, act_grad = ACTIVATIONS[model.config.nonlinearity]
    trace = forward_trace(model, cov, X)
    for layer, U in enumerate(trace.pre):
        if not np.all(np.isfinite(U)):
            raise NumericalError(f"non-finite activation in layer {layer}")
    resid = trace.output - y
    loss = float(resid @ resid) / n

    grads: dict[str, np.ndarray] = {}
    d_out = 2.0 * resid / n  # (n,)
    grads["readout_weights"] = trace.pooled.T @ d_out
    grads["readout_bias"] = np.array([d_out.sum()])

    m = X.shape[1]
    C = cov.matrix
    # d loss / d (final activation): the node mean spreads it uniformly over m
    dZ = np.broadcast_to((model.readout_weights[:, None] * d_out[None, :])[:, :, None] / m, trace.pre[-1].shape)
    for layer in range(len(model.taps) - 1, -1, -1):
        taps = model.taps[layer]
        f_out, f_in, K1 = taps.shape
        P = trace.powers[layer].reshape(K1 * f_in, -1)
        dU = (dZ * act_grad(trace.pre[layer])).reshape(f_out, -1)
        grads[f"taps.{layer}"] = (dU @ P.T).reshape(f_out, K1, f_in).transpose(0, 2, 1).copy()
        if layer == 0:
            break
        dP = (stacked_taps(taps).T @ dU).reshape(K1, f_in, n, m)
        # adjoint of x -> C^k x is C^k again (C symmetric); Horner over k
        acc = dP[K1 - 1]
        for k in range(K1 - 2, -1, -1):
            acc = (acc.reshape(-1, m) @ C).reshape(f_in, n, m) + dP[k]
        dZ = acc
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    return loss, grads


def backward(model: VnnModel, cov: CovarianceModel, x: np.ndarray, y: float) -> VnnModel:
    """Gradient of the squared error (Phi(x) - y)^2, returned in the shape of a model."""
    _, grads = loss_and_grad(model, cov, np.asarray(x, dtype=float)[None, :], np.array([y]))
    return VnnModel.from_parameters(model.config, grads)


class Adam:
    def __init__(self, lr: float = 0.0033, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            p -= self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.0033
    epochs: int = 100
    batch: str = "full"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    split: SplitSpec = field(default_factory=SplitSpec)
    ensemble_size: int = 100
    train_groups: frozenset = frozenset({Group.HC})
    covariance_binding: str = "train_split"
    clip_norm: float | None = None
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "train_groups", frozenset(Group.parse(g) for g in self.train_groups))
        if not self.learning_rate > 0:
            raise DataError("learning_rate must be positive")
        if self.epochs < 1 or self.ensemble_size < 1:
            raise DataError("epochs and ensemble_size must be >= 1")
        if self.batch != "full":
            raise DataError("only full-batch training is supported")
        if self.covariance_binding not in BINDINGS:
            raise DataError(f"covariance_binding must be one of {BINDINGS}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise DataError("clip_norm must be positive when set")


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs,
        "batch": cfg.batch,
        "adam_beta1": cfg.adam_beta1,
        "adam_beta2": cfg.adam_beta2,
        "adam_eps": cfg.adam_eps,
        "split": {
            "train_frac": cfg.split.train_frac,
            "val_frac": cfg.split.val_frac,
            "test_frac": cfg.split.test_frac,
            "seed": cfg.split.seed,
            "stratify_by_group": cfg.split.stratify_by_group,
        },
        "ensemble_size": cfg.ensemble_size,
        "train_groups": sorted(g.value for g in cfg.train_groups),
        "covariance_binding": cfg.covariance_binding,
        "clip_norm": cfg.clip_norm,
    }


def train_config_from_dict(doc: dict) -> TrainConfig:
    doc = dict(doc)
    if "split" in doc:
        doc["split"] = SplitSpec(**doc["split"])
    if "train_groups" in doc:
        doc["train_groups"] = frozenset(doc["train_groups"])
    return TrainConfig(**doc)


@dataclass
class TrainReport:
    train_loss: list[float]
    val_loss: list[float]
    selected_epoch: int
    test_mae: float
    test_set: str
    seed: int
    split_seed: int
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        # wall-clock is deliberately left out so reports stay byte-reproducible
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "selected_epoch": self.selected_epoch,
            "test_mae": self.test_mae,
            "test_set": self.test_set,
            "seed": self.seed,
            "split_seed": self.split_seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> TrainReport:
        return cls(**{k: doc[k] for k in ("train_loss", "val_loss", "selected_epoch", "test_mae", "test_set", "seed", "split_seed")})

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def loss_curve_csv(self) -> str:
        rows = ["epoch,train_loss,val_loss"]
        rows += [f"{e},{t!r},{v!r}" for e, (t, v) in enumerate(zip(self.train_loss, self.val_loss))]
        return "\n".join(rows) + "\n"


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def fit(
    model: VnnModel,
    cov: CovarianceModel,
    train: Cohort,
    val: Cohort,
    tcfg: TrainConfig,
) -> tuple[VnnModel, list[float], list[float], int]:
    """Full-batch Adam from ``model``; returns the snapshot with the lowest validation MSE.

    Optimization runs on standardized targets; the scaling is folded back into
    the linear readout, which is exact because the readout acts after the
    node mean.
    """
    mu = float(train.ages.mean())
    sd = float(train.ages.std())
    if not sd > 1e-12:
        sd = 1.0
    y_tr = (train.ages - mu) / sd
    y_va = (val.ages - mu) / sd

    work = model.copy()
    work.readout_weights = work.readout_weights / sd
    work.readout_bias = (work.readout_bias - mu) / sd
    params = work.parameters()
    opt = Adam(tcfg.learning_rate, tcfg.adam_beta1, tcfg.adam_beta2, tcfg.adam_eps)

    def current() -> VnnModel:
        return VnnModel.from_parameters(model.config, params)

    def folded(state: VnnModel) -> VnnModel:
        out = state.copy()
        out.readout_weights = state.readout_weights * sd
        out.readout_bias = state.readout_bias * sd + mu
        return out

    def val_mse(state: VnnModel) -> float:
        return mse_loss(forward(state, cov, val.X), y_va) * sd * sd

    train_hist: list[float] = []
    val_hist = [val_mse(current())]
    best_epoch, best_val, best_state = 0, val_hist[0], current().copy()
    for epoch in range(1, tcfg.epochs + 1):
        loss, grads = loss_and_grad(current(), cov, train.X, y_tr)
        if not np.isfinite(loss):
            raise NumericalError(f"training diverged at epoch {epoch}")
        train_hist.append(loss * sd * sd)
        if tcfg.clip_norm is not None:
            _clip(grads, tcfg.clip_norm)
        opt.step(params, grads)
        if not all(np.all(np.isfinite(p)) for p in params.values()):
            raise NumericalError(f"training diverged at epoch {epoch}")
        v = val_mse(current())
        if not np.isfinite(v):
            raise NumericalError(f"training diverged at epoch {epoch}")
        val_hist.append(v)
        if v < best_val:
            best_epoch, best_val, best_state = epoch, v, current().copy()
    train_hist.append(mse_loss(forward(current(), cov, train.X), y_tr) * sd * sd)
    return folded(best_state), train_hist, val_hist, best_epoch


def _training_cohort(cohort: Cohort, tcfg: TrainConfig) -> Cohort:
    pool = filter_group(cohort, tcfg.train_groups)
    if pool.n == 0:
        raise DataError(f"no subjects in training groups {sorted(g.value for g in tcfg.train_groups)}")
    return pool


def train_one(
    cohort: Cohort,
    vcfg: VnnConfig,
    tcfg: TrainConfig,
    cov: CovarianceModel | None = None,
    *,
    model_seed: int | None = None,
    split_seed: int | None = None,
) -> tuple[VnnModel, TrainReport]:
    """Split the training-group subjects, fit one VNN, report its own test-split MAE.

    Without an explicit ``cov`` the covariance follows ``tcfg.covariance_binding``.
    """
    start = time.perf_counter()
    model_seed = vcfg.seed if model_seed is None else model_seed
    split_seed = tcfg.split.seed if split_seed is None else split_seed
    pool = _training_cohort(cohort, tcfg)
    spec = SplitSpec(tcfg.split.train_frac, tcfg.split.val_frac, tcfg.split.test_frac, split_seed, tcfg.split.stratify_by_group)
    train, val, test = split(pool, spec)
    if cov is None:
        cov = covariance_of(train.X if tcfg.covariance_binding == "train_split" else cohort.X)
    start_model = init_model(vcfg, model_seed)
    start_model.readout_bias = float(train.ages.mean())
    model, tr_hist, va_hist, best = fit(start_model, cov, train, val, tcfg)
    test_pred = forward(model, cov, test.X)
    report = TrainReport(
        train_loss=tr_hist,
        val_loss=va_hist,
        selected_epoch=best,
        test_mae=float(np.mean(np.abs(test_pred - test.ages))),
        test_set=f"test split (n={test.n}, split_seed={split_seed})",
        seed=model_seed,
        split_seed=split_seed,
        wall_clock=time.perf_counter() - start,
    )
    log.debug("trained member seed=%d best_epoch=%d test_mae=%.3f", model_seed, best, report.test_mae)
    return model, report


@dataclass
class Ensemble:
    models: list[VnnModel]
    binding: str = "train_split"
    reports: list[TrainReport] = field(default_factory=list)
    bound_cov: CovarianceModel | None = None

    def __post_init__(self):
        if not self.models:
            raise DataError("an ensemble needs at least one model")
        cfg = self.models[0].config
        if any(mdl.config != cfg for mdl in self.models):
            raise DataError("ensemble members must share one VnnConfig")

    @property
    def config(self) -> VnnConfig:
        return self.models[0].config

    def predict(self, X: np.ndarray, cov: CovarianceModel | None = None):
        cov = cov if cov is not None else self.bound_cov
        if cov is None:
            raise DataError("ensemble has no bound covariance; pass one explicitly")
        return predict_ensemble(self, cov, X)


def train_ensemble(cohort: Cohort, vcfg: VnnConfig, tcfg: TrainConfig) -> Ensemble:
    """Member i uses model seed ``vcfg.seed + i`` and split seed ``tcfg.split.seed + i``."""

    def member(i: int):
        try:
            return train_one(cohort, vcfg, tcfg, model_seed=vcfg.seed + i, split_seed=tcfg.split.seed + i)
        except (DataError, NumericalError) as exc:
            raise type(exc)(f"ensemble member {i}: {exc}") from exc

    indices = range(tcfg.ensemble_size)
    if tcfg.workers > 1:
        with ThreadPoolExecutor(tcfg.workers) as pool:
            results = list(pool.map(member, indices))
    else:
        results = [member(i) for i in indices]
    return Ensemble([r[0] for r in results], tcfg.covariance_binding, [r[1] for r in results])


def predict_ensemble(ens: Ensemble, cov: CovarianceModel, x: np.ndarray):
    """Arithmetic mean of member outputs (float for one subject, array for a batch)."""
    outs = [forward(mdl, cov, x) for mdl in ens.models]
    if np.ndim(outs[0]) == 0:
        return float(sum(outs) / len(outs))
    return np.sum(outs, axis=0) / len(outs)


def ensemble_to_dict(ens: Ensemble) -> dict:
    return {
        "format_version": 1,
        "binding": ens.binding,
        "config": config_to_dict(ens.config),
        "models": [model_to_dict(mdl) for mdl in ens.models],
        "reports": [r.to_dict() for r in ens.reports],
    }


def ensemble_from_dict(doc: dict) -> Ensemble:
    models = [model_from_dict(d) for d in doc["models"]]
    if config_from_dict(doc["config"]) != models[0].config:
        raise DataError("ensemble config does not match its members")
    return Ensemble(models, doc.get("binding", "train_split"), [TrainReport.from_dict(r) for r in doc.get("reports", [])])


def save_ensemble(ens: Ensemble, path: str | Path) -> None:
    Path(path).write_text(json.dumps(ensemble_to_dict(ens)), encoding="utf-8")


def load_ensemble(path: str | Path) -> Ensemble:
    return ensemble_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

