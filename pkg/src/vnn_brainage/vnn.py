"""coVariance filters, filter-bank layers and the VNN forward map.

Shapes used throughout:

* a single signal is a length-``m`` vector;
* a layer activation for one subject is ``(F, m)``;
* batched activations are feature-major, ``(F, n, m)``, so that both the
  covariance shift and the filter-bank mixing are single matrix products.

The covariance is symmetric, so ``C @ x`` for a batch of row vectors is
computed as ``X @ C``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .covariance import CovarianceModel, permute as permute_cov
from .errors import DataError

FORMAT_VERSION = 1
NONLINEARITIES = ("relu", "tanh")
READOUTS = ("mean_then_linear",)


def _relu(u):
    return np.maximum(u, 0.0)


def _relu_grad(u):
    return (u > 0).astype(float)


def _tanh_grad(u):
    t = np.tanh(u)
    return 1.0 - t * t


ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


@dataclass(frozen=True)
class VnnConfig:
    layers: int = 2
    taps_per_layer: int = 1
    widths: tuple[int, ...] = (44, 44)
    nonlinearity: str = "relu"
    readout: str = "mean_then_linear"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.layers < 1:
            raise DataError("a VNN needs at least one layer")
        if self.taps_per_layer < 0:
            raise DataError("polynomial order K must be >= 0")
        if len(self.widths) != self.layers:
            raise DataError(f"{self.layers} layers but {len(self.widths)} widths")
        if any(w < 1 for w in self.widths):
            raise DataError("layer widths must be positive")
        if self.nonlinearity not in NONLINEARITIES:
            raise DataError(f"nonlinearity must be one of {NONLINEARITIES}")
        if self.readout not in READOUTS:
            raise DataError(f"readout must be one of {READOUTS}")

    def tap_shapes(self) -> list[tuple[int, int, int]]:
        f_in = (1,) + self.widths[:-1]
        return [(fo, fi, self.taps_per_layer + 1) for fo, fi in zip(self.widths, f_in)]


@dataclass
class VnnModel:
    """Learned state: per-layer tap tensors ``[F_out, F_in, K+1]`` plus the linear readout.

    Nothing here depends on the signal dimension ``m``.
    """

    config: VnnConfig
    taps: list[np.ndarray]
    readout_weights: np.ndarray
    readout_bias: float = 0.0

    def __post_init__(self):
        self.taps = [np.array(t, dtype=float) for t in self.taps]
        self.readout_weights = np.array(self.readout_weights, dtype=float).reshape(-1)
        self.readout_bias = float(self.readout_bias)
        shapes = self.config.tap_shapes()
        if [t.shape for t in self.taps] != shapes:
            raise DataError(f"tap shapes {[t.shape for t in self.taps]} do not match config {shapes}")
        if self.readout_weights.shape != (self.config.widths[-1],):
            raise DataError("readout weights must have one entry per final-layer feature")
        if not all(np.all(np.isfinite(t)) for t in self.taps) or not np.all(np.isfinite(self.readout_weights)):
            raise DataError("model parameters must be finite")

    def copy(self) -> VnnModel:
        return VnnModel(self.config, [t.copy() for t in self.taps], self.readout_weights.copy(), self.readout_bias)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {f"taps.{i}": t for i, t in enumerate(self.taps)}
        params["readout_weights"] = self.readout_weights
        params["readout_bias"] = np.array([self.readout_bias])
        return params

    @classmethod
    def from_parameters(cls, config: VnnConfig, params: dict[str, np.ndarray]) -> VnnModel:
        taps = [params[f"taps.{i}"] for i in range(config.layers)]
        return cls(config, taps, params["readout_weights"], float(params["readout_bias"][0]))


def init_model(config: VnnConfig, seed: int | None = None) -> VnnModel:
    """Taps uniform on +-1/sqrt(F_in (K+1)); readout weights zero, bias zero."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    taps = []
    for shape in config.tap_shapes():
        bound = 1.0 / math.sqrt(shape[1] * shape[2])
        taps.append(rng.uniform(-bound, bound, size=shape))
    return VnnModel(config, taps, np.zeros(config.widths[-1]), 0.0)


def random_model(config: VnnConfig, rng: np.random.Generator, readout_scale: float = 1.0) -> VnnModel:
    """Fully random model (taps and readout); used for property checks and controls."""
    taps = []
    for shape in config.tap_shapes():
        bound = 1.0 / math.sqrt(shape[1] * shape[2])
        taps.append(rng.uniform(-bound, bound, size=shape))
    w = rng.uniform(-readout_scale, readout_scale, size=config.widths[-1])
    return VnnModel(config, taps, w, float(rng.normal()))


# -- filters -------------------------------------------------------------------


def _check_signal(cov: CovarianceModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != cov.dim:
        raise DataError(f"signal length {x.shape[-1]} != covariance dimension {cov.dim}")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite input signal")
    return x


def shifted_signals(C: np.ndarray, x: np.ndarray, K: int) -> np.ndarray:
    """Stack ``[x, Cx, ..., C^K x]`` along a new leading axis, by repeated matvecs."""
    m = x.shape[-1]
    out = np.empty((K + 1,) + x.shape)
    out[0] = x
    flat = out.reshape(K + 1, -1, m)
    for k in range(1, K + 1):
        flat[k] = flat[k - 1] @ C
    return out


def apply_filter(taps: Sequence[float], cov: CovarianceModel, x: np.ndarray) -> np.ndarray:
    """sum_k h_k C^k x without forming matrix powers. ``x`` may carry leading batch axes."""
    h = np.asarray(taps, dtype=float).reshape(-1)
    if h.size == 0:
        raise DataError("a filter needs at least one tap")
    x = _check_signal(cov, x)
    C = cov.matrix
    z = x
    out = h[0] * x
    for hk in h[1:]:
        z = z @ C
        out = out + hk * z
    return out


def layer_forward(
    taps: np.ndarray, cov: CovarianceModel, x_in: np.ndarray, nonlinearity: str = "relu"
) -> np.ndarray:
    """One filter-bank layer: out[f] = sigma(sum_g H_fg(C) x_in[g]).

    ``taps`` has shape ``[F_out, F_in, K+1]``; ``x_in`` is ``(F_in, m)`` or ``(F_in, n, m)``.
    """
    taps = np.asarray(taps, dtype=float)
    x_in = _check_signal(cov, x_in)
    if taps.ndim != 3 or x_in.ndim not in (2, 3) or x_in.shape[0] != taps.shape[1]:
        raise DataError(f"layer taps {taps.shape} incompatible with input {x_in.shape}")
    act, _ = ACTIVATIONS[nonlinearity]
    return act(_filter_bank(taps, shifted_signals(cov.matrix, x_in, taps.shape[2] - 1)))


def stacked_taps(taps: np.ndarray) -> np.ndarray:
    """``[F_out, F_in, K+1]`` -> ``[F_out, (K+1) F_in]`` matching a ``(K+1, F_in, ...)`` power stack."""
    return np.ascontiguousarray(taps.transpose(0, 2, 1)).reshape(taps.shape[0], -1)


def _filter_bank(taps: np.ndarray, powers: np.ndarray) -> np.ndarray:
    # powers: (K+1, F_in, ...) -> (F_out, ...)
    rest = powers.shape[2:]
    U = stacked_taps(taps) @ powers.reshape(powers.shape[0] * powers.shape[1], -1)
    return U.reshape((taps.shape[0],) + rest)


@dataclass
class ForwardTrace:
    """Intermediates kept for reverse-mode differentiation."""

    powers: list[np.ndarray] = field(default_factory=list)  # per layer, (K+1, F_in, n, m)
    pre: list[np.ndarray] = field(default_factory=list)  # per layer, (F_out, n, m)
    pooled: np.ndarray | None = None  # (n, F_L)
    output: np.ndarray | None = None  # (n,)


def forward_trace(model: VnnModel, cov: CovarianceModel, X: np.ndarray) -> ForwardTrace:
    X = _check_signal(cov, X)
    if X.ndim != 2:
        raise DataError("forward_trace expects a batch of shape (n, m)")
    act, _ = ACTIVATIONS[model.config.nonlinearity]
    K = model.config.taps_per_layer
    trace = ForwardTrace()
    Z = X[None, :, :]
    for taps in model.taps:
        P = shifted_signals(cov.matrix, Z, K)
        U = _filter_bank(taps, P)
        trace.powers.append(P)
        trace.pre.append(U)
        Z = act(U)
    trace.pooled = Z.mean(axis=2).T
    trace.output = trace.pooled @ model.readout_weights + model.readout_bias
    return trace


def forward(model: VnnModel, cov: CovarianceModel, x: np.ndarray):
    """Age estimate for one subject (vector input -> float) or a batch (``(n, m)`` -> ``(n,)``)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return float(forward_trace(model, cov, x[None, :]).output[0])
    return forward_trace(model, cov, x).output


def permute_input(x: np.ndarray, cov: CovarianceModel, perm: Sequence[int]) -> tuple[np.ndarray, CovarianceModel]:
    """Relabel nodes: returns ``(P x, P C P^T)``; ``perm[i]`` is the old index of new node ``i``."""
    perm = np.asarray(perm)
    m = cov.dim
    if perm.shape != (m,) or not np.array_equal(np.sort(perm), np.arange(m)):
        raise DataError("perm must be a permutation of range(m)")
    x = np.asarray(x, dtype=float)
    return x[..., perm], permute_cov(cov, perm)


# -- serialization -------------------------------------------------------------


def config_to_dict(cfg: VnnConfig) -> dict:
    return {
        "layers": cfg.layers,
        "taps_per_layer": cfg.taps_per_layer,
        "widths": list(cfg.widths),
        "nonlinearity": cfg.nonlinearity,
        "readout": cfg.readout,
        "seed": cfg.seed,
    }


def config_from_dict(doc: dict) -> VnnConfig:
    return VnnConfig(
        layers=int(doc["layers"]),
        taps_per_layer=int(doc["taps_per_layer"]),
        widths=tuple(doc["widths"]),
        nonlinearity=doc.get("nonlinearity", "relu"),
        readout=doc.get("readout", "mean_then_linear"),
        seed=int(doc.get("seed", 0)),
    )


def model_to_dict(model: VnnModel) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(model.config),
        "taps": [t.tolist() for t in model.taps],
        "readout_weights": model.readout_weights.tolist(),
        "readout_bias": model.readout_bias,
    }


def model_from_dict(doc: dict) -> VnnModel:
    if doc.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported model format_version {doc.get('format_version')!r}")
    cfg = config_from_dict(doc["config"])
    return VnnModel(cfg, [np.array(t, dtype=float) for t in doc["taps"]], doc["readout_weights"], doc["readout_bias"])


def model_to_json(model: VnnModel) -> str:
    return json.dumps(model_to_dict(model))


def model_from_json(text: str) -> VnnModel:
    return model_from_dict(json.loads(text))


def save_model(model: VnnModel, path: str | Path) -> None:
    Path(path).write_text(model_to_json(model), encoding="utf-8")


def load_model(path: str | Path) -> VnnModel:
    return model_from_json(Path(path).read_text(encoding="utf-8"))
