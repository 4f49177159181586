"""Group statistics: MAE, Pearson correlation, one-way ANOVA, Tukey HSD.

Distribution tails are computed here rather than borrowed: the t and F tails
go through a continued-fraction regularized incomplete beta, and the
studentized range CDF is a nested adaptive Gauss-Legendre integral.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .errors import DataError, NumericalError

BETA_TOL = 1e-12
BETA_MAX_ITER = 10_000
QUAD_TOL = 1e-6


def mae(a: Sequence[float], b: Sequence[float]) -> float:
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.size == 0 or a.shape != b.shape:
        raise DataError("mae needs two nonempty sequences of equal length")
    return float(np.mean(np.abs(a - b)))


# -- special functions -----------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz evaluation."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < BETA_TOL:
            return h
    raise NumericalError(f"incomplete beta continued fraction failed for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise DataError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def f_sf(f: float, df1: float, df2: float) -> float:
    """Upper tail P(F >= f) of the F distribution."""
    if f <= 0:
        return 1.0
    if math.isinf(f):
        return 0.0
    return betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))


# -- adaptive Gauss-Legendre -----------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(20)


def _gl(f: Callable[[np.ndarray], np.ndarray], a: float, b: float) -> np.ndarray:
    half, mid = 0.5 * (b - a), 0.5 * (b + a)
    vals = f(mid + half * _GL_NODES)  # (..., nodes)
    return half * (vals @ _GL_WEIGHTS)


def adaptive_quad(
    f: Callable[[np.ndarray], np.ndarray],
    a: float,
    b: float,
    tol: float = QUAD_TOL,
    panels: int = 4,
    max_depth: int = 30,
) -> np.ndarray:
    """Adaptive 20-point Gauss-Legendre on [a, b].

    ``f`` maps a 1-D array of nodes to an array whose last axis runs over the
    nodes, so vector-valued integrands are handled; the error test uses the
    largest component.
    """
    edges = np.linspace(a, b, panels + 1)
    stack = [(lo, hi, _gl(f, lo, hi), tol / panels, 0) for lo, hi in zip(edges[:-1], edges[1:])]
    total = 0.0
    while stack:
        lo, hi, whole, local_tol, depth = stack.pop()
        mid = 0.5 * (lo + hi)
        left, right = _gl(f, lo, mid), _gl(f, mid, hi)
        if np.max(np.abs(left + right - whole)) <= local_tol or depth >= max_depth:
            total = total + left + right
        else:
            stack.append((lo, mid, left, local_tol / 2, depth + 1))
            stack.append((mid, hi, right, local_tol / 2, depth + 1))
    return total


# -- studentized range -------------------------------------------------------------


def _range_cdf_normal(w: np.ndarray, k: int, tol: float) -> np.ndarray:
    """P(range of k iid N(0,1) <= w), vectorized over ``w``."""
    w = np.atleast_1d(np.asarray(w, dtype=float))

    def integrand(z):
        inner = ndtr(z[None, :]) - ndtr(z[None, :] - w[:, None])
        return k * np.exp(-0.5 * z * z)[None, :] / math.sqrt(2 * math.pi) * inner ** (k - 1)

    return np.clip(adaptive_quad(integrand, -9.0, 9.0, tol / 10), 0.0, 1.0)


def studentized_range_cdf(q: float, k: int, df: float, tol: float = QUAD_TOL) -> float:
    """CDF of the studentized range Q(k, df).

    Integrates the normal-range CDF at ``q * s`` against the density of
    ``s = sqrt(chi2_df / df)``.
    """
    if k < 2:
        raise DataError("studentized range needs k >= 2 groups")
    if df <= 0:
        raise DataError("degrees of freedom must be positive")
    if q <= 0:
        return 0.0
    if math.isinf(q):
        return 1.0
    log_norm = (df / 2) * math.log(df) - math.lgamma(df / 2) - (df / 2 - 1) * math.log(2)

    def density(s):
        out = np.zeros_like(s)
        pos = s > 0
        sp = s[pos]
        out[pos] = np.exp(log_norm + (df - 1) * np.log(sp) - df * sp * sp / 2)
        return out

    def integrand(s):
        return density(s) * _range_cdf_normal(q * s, k, tol)

    spread = 15.0 / math.sqrt(2 * df)
    lo = max(0.0, 1.0 - spread)
    hi = max(1.0 + spread, math.sqrt(150.0 / df))
    val = float(adaptive_quad(integrand, lo, hi, tol))
    return min(1.0, max(0.0, val))


def studentized_range_sf(q: float, k: int, df: float, tol: float = QUAD_TOL) -> float:
    return min(1.0, max(0.0, 1.0 - studentized_range_cdf(q, k, df, tol)))


def studentized_range_ppf(p: float, k: int, df: float, xtol: float = 1e-7) -> float:
    """Quantile of Q(k, df) by bisection."""
    if not 0.0 < p < 1.0:
        raise DataError("probability must lie in (0, 1)")
    lo, hi = 0.0, 2.0
    while studentized_range_cdf(hi, k, df) < p:
        lo, hi = hi, 2 * hi
        if hi > 1e4:
            raise NumericalError("studentized range quantile out of range")
    while hi - lo > xtol:
        mid = 0.5 * (lo + hi)
        if studentized_range_cdf(mid, k, df) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- tests -------------------------------------------------------------------------


@dataclass(frozen=True)
class CorrelationResult:
    rho: float
    p_value: float
    n: int
    test: str = "two-sided t test, df = n - 2"


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    if n != y.size:
        raise DataError("pearson needs equal-length inputs")
    if n < 3:
        raise DataError("pearson needs n >= 3")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DataError("pearson is undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return CorrelationResult(r, 0.0, n)
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return CorrelationResult(r, min(1.0, t_sf_two_sided(t, n - 2)), n)


@dataclass(frozen=True)
class AnovaResult:
    f_value: float
    df_between: int
    df_within: int
    p_value: float
    ss_between: float
    ss_within: float


def _as_groups(groups: Mapping[str, Sequence[float]], min_size: int) -> dict[str, np.ndarray]:
    out = {str(k): np.asarray(v, dtype=float).reshape(-1) for k, v in groups.items()}
    if len(out) < 2:
        raise DataError(f"need at least two groups, got {len(out)}")
    for name, vals in out.items():
        if vals.size < min_size:
            raise DataError(f"group {name!r} has {vals.size} samples, need >= {min_size}")
    return out


def anova_oneway(groups: Mapping[str, Sequence[float]]) -> AnovaResult:
    gs = _as_groups(groups, 1)
    k = len(gs)
    n = sum(v.size for v in gs.values())
    if n <= k:
        raise DataError("ANOVA needs more observations than groups")
    grand = np.concatenate(list(gs.values())).mean()
    ssb = float(sum(v.size * (v.mean() - grand) ** 2 for v in gs.values()))
    ssw = float(sum(((v - v.mean()) ** 2).sum() for v in gs.values()))
    dfb, dfw = k - 1, n - k
    if ssw == 0.0:
        if ssb == 0.0:
            raise DataError("F is undefined: zero within- and between-group variance")
        return AnovaResult(math.inf, dfb, dfw, 0.0, ssb, ssw)
    f = (ssb / dfb) / (ssw / dfw)
    return AnovaResult(f, dfb, dfw, f_sf(f, dfb, dfw), ssb, ssw)


@dataclass(frozen=True)
class TukeyPair:
    group1: str
    group2: str
    mean_diff: float  # mean(group2) - mean(group1)
    q: float
    p_value: float
    reject: bool


@dataclass(frozen=True)
class TukeyResult:
    pairs: tuple[TukeyPair, ...]
    alpha: float
    k: int
    df_within: int
    msw: float

    def pair(self, a: str, b: str) -> TukeyPair:
        for p in self.pairs:
            if {p.group1, p.group2} == {a, b}:
                return p
        raise KeyError(f"no pair {a}/{b}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["pair", "mean_diff", "q", "p"])
        for p in self.pairs:
            writer.writerow([f"{p.group1}-{p.group2}", repr(p.mean_diff), repr(p.q), repr(p.p_value)])
        return buf.getvalue()


def tukey_hsd(groups: Mapping[str, Sequence[float]], alpha: float = 0.05) -> TukeyResult:
    """Tukey-Kramer pairwise comparisons with family-wise error control."""
    if not 0.0 < alpha < 1.0:
        raise DataError("alpha must lie in (0, 1)")
    gs = _as_groups(groups, 2)
    k = len(gs)
    n = sum(v.size for v in gs.values())
    dfw = n - k
    msw = float(sum(((v - v.mean()) ** 2).sum() for v in gs.values())) / dfw
    pairs = []
    for a, b in combinations(gs, 2):
        diff = float(gs[b].mean() - gs[a].mean())
        se = math.sqrt(msw / 2.0 * (1.0 / gs[a].size + 1.0 / gs[b].size))
        if se == 0.0:
            q = 0.0 if diff == 0.0 else math.inf
        else:
            q = abs(diff) / se
        p = studentized_range_sf(q, k, dfw)
        pairs.append(TukeyPair(a, b, diff, q, p, p < alpha))
    return TukeyResult(tuple(pairs), alpha, k, dfw, msw)


@dataclass
class GroupStatistics:
    anova: AnovaResult
    tukey: TukeyResult
    group_sizes: dict[str, int] = field(default_factory=dict)
    group_means: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "anova": asdict(self.anova),
            "tukey": {
                "alpha": self.tukey.alpha,
                "k": self.tukey.k,
                "df_within": self.tukey.df_within,
                "msw": self.tukey.msw,
                "pairs": [asdict(p) for p in self.tukey.pairs],
            },
            "group_sizes": self.group_sizes,
            "group_means": self.group_means,
        }


CLINICAL_LABELS = ("HC", "MCI", "AD")


def delta_age_groups(records) -> dict[str, list[float]]:
    """Delta-Age values keyed by clinical label, OTHER excluded, in HC/MCI/AD order."""
    by_group: dict[str, list[float]] = {}
    for rec in records:
        label = getattr(rec.group, "value", rec.group)
        if label in CLINICAL_LABELS:
            by_group.setdefault(label, []).append(rec.delta_age)
    return {g: by_group[g] for g in CLINICAL_LABELS if g in by_group}


def summarize_groups(report, alpha: float = 0.05) -> tuple[AnovaResult, TukeyResult]:
    """ANOVA and Tukey HSD over a report's Delta-Age grouped by clinical label."""
    groups = delta_age_groups(report.records)
    if len(groups) < 2:
        raise DataError(f"group statistics need at least two clinical groups, found {list(groups)}")
    return anova_oneway(groups), tukey_hsd(groups, alpha)


def group_statistics(report, alpha: float = 0.05) -> GroupStatistics:
    anova, tukey = summarize_groups(report, alpha)
    groups = delta_age_groups(report.records)
    return GroupStatistics(
        anova,
        tukey,
        {g: len(v) for g, v in groups.items()},
        {g: float(np.mean(v)) for g, v in groups.items()},
    )
