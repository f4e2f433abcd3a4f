"""Evaluation metrics, per-IGBP reports, paired t-tests and the linear baseline."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import catalog
from .dataio import WindowSet
from .errors import ConfigError

logger = logging.getLogger(__name__)


class DegenerateError(ValueError):
    """A statistic is undefined for the given data (zero variance)."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Normal equations are rank deficient."""


def _pair(pred, obs, min_len: int):
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if pred.shape != obs.shape:
        raise ValueError(f"pred has {pred.size} values, obs has {obs.size}")
    if pred.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {pred.size}")
    return pred, obs


def nse(pred, obs) -> float:
    """Nash-Sutcliffe efficiency: ``1 - SSE / sum((obs - mean(obs))**2)``."""
    pred, obs = _pair(pred, obs, 2)
    denom = np.sum((obs - obs.mean()) ** 2)
    if denom == 0:
        raise DegenerateError("NSE is undefined when all observations are identical")
    return float(1.0 - np.sum((obs - pred) ** 2) / denom)


def rmse(pred, obs) -> float:
    pred, obs = _pair(pred, obs, 1)
    return float(np.sqrt(np.mean((pred - obs) ** 2)))


# ---------------------------------------------------------------------------
# Student's t distribution
# ---------------------------------------------------------------------------
def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c, d = 1.0, 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
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
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta function ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must be in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if not math.isfinite(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTest:
    t: float
    p: float
    df: int


def paired_t_test(a, b) -> TTest:
    """Paired two-sided t-test on ``d = a - b`` with ``n - 1`` degrees of freedom."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length ({a.size} vs {b.size})")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0 or np.all(d == d[0]):
        raise DegenerateError("paired differences have zero variance")
    t = float(d.mean() / (sd / math.sqrt(n)))
    return TTest(t, t_two_sided_p(t, n - 1), n - 1)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------
@dataclass
class EvalRow:
    igbp: str
    seed: int
    nse: float
    rmse: float
    n: int


@dataclass
class EvalReport:
    model: str
    rows: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def igbps(self) -> list:
        return sorted({r.igbp for r in self.rows})

    def seeds(self) -> list:
        return sorted({r.seed for r in self.rows})

    def per_seed(self, igbp: str, metric: str = "nse") -> dict:
        return {r.seed: getattr(r, metric) for r in self.rows if r.igbp == igbp}

    def summary(self) -> dict:
        """IGBP -> (mean NSE, mean RMSE, number of seeds)."""
        out = {}
        for label in self.igbps():
            rows = [r for r in self.rows if r.igbp == label]
            out[label] = (float(np.mean([r.nse for r in rows])), float(np.mean([r.rmse for r in rows])), len(rows))
        return out

    def mean_nse(self) -> float:
        return float(np.mean([v[0] for v in self.summary().values()]))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "igbp", "seed", "nse", "rmse", "n"])
            for r in sorted(self.rows, key=lambda r: (r.igbp, r.seed)):
                w.writerow([self.model, r.igbp, r.seed, f"{r.nse:.6f}", f"{r.rmse:.6f}", r.n])
        return path

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        report = None
        with Path(path).open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                report = report or cls(row["model"])
                report.rows.append(EvalRow(row["igbp"], int(row["seed"]), float(row["nse"]),
                                           float(row["rmse"]), int(row["n"])))
        if report is None:
            raise ConfigError(f"{path}: empty evaluation report")
        return report


def evaluate(predictors: dict, windows: WindowSet, model_name: str = "model") -> EvalReport:
    """Score one predictor per seed on pooled test windows of each IGBP class.

    ``predictors`` maps seed -> callable returning physical-unit predictions
    for a :class:`WindowSet`. Predictions from all test sites of a class are
    pooled before computing NSE, so each class and seed gets one mean.
    """
    report = EvalReport(model_name)
    site_class = np.array([windows.site_igbp.get(s, "") for s in windows.window_site], dtype=object)
    labels = sorted(set(windows.site_igbp.values()))
    obs_all = windows.targets
    for seed in sorted(predictors):
        pred_all = np.asarray(predictors[seed](windows), dtype=np.float64)
        for label in labels:
            sel = site_class == label
            if not sel.any():
                msg = f"IGBP {label} has no test samples; excluded"
                if msg not in report.warnings:
                    report.warnings.append(msg)
                    logger.warning(msg)
                continue
            obs, pred = obs_all[sel], pred_all[sel]
            report.rows.append(EvalRow(label, int(seed), nse(pred, obs), rmse(pred, obs), int(sel.sum())))
    return report


@dataclass
class ComparisonRow:
    igbp: str
    a_nse: float
    a_rmse: float
    b_nse: float
    b_rmse: float
    test: TTest | None


def compare(a: EvalReport, b: EvalReport) -> list:
    """Side-by-side means per IGBP with a paired t-test on per-seed NSE.

    The test is omitted (``None``) when fewer than two seeds are shared.
    """
    sa, sb = a.summary(), b.summary()
    rows = []
    for label in sorted(set(sa) & set(sb)):
        na, nb = a.per_seed(label), b.per_seed(label)
        seeds = sorted(set(na) & set(nb))
        test = paired_t_test([na[s] for s in seeds], [nb[s] for s in seeds]) if len(seeds) >= 2 else None
        rows.append(ComparisonRow(label, sa[label][0], sa[label][1], sb[label][0], sb[label][1], test))
    return rows


def comparison_csv(rows: list, path, a_name: str = "a", b_name: str = "b") -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["igbp", f"{a_name}_nse", f"{a_name}_rmse", f"{b_name}_nse", f"{b_name}_rmse",
                    "t", "p_two_sided", "df"])
        for r in rows:
            t = [f"{r.test.t:.4f}", f"{r.test.p:.4g}", r.test.df] if r.test else ["", "", ""]
            w.writerow([r.igbp, f"{r.a_nse:.4f}", f"{r.a_rmse:.4f}", f"{r.b_nse:.4f}", f"{r.b_rmse:.4f}", *t])
    return path


# ---------------------------------------------------------------------------
# linear baseline
# ---------------------------------------------------------------------------
def baseline_feature_names() -> list:
    """Column names of :func:`baseline_features`."""
    return list(catalog.PREDICTOR_CODES) + [f"{code}_mean" for code in catalog.BAND_CODES]


def baseline_features(windows: WindowSet) -> tuple[np.ndarray, np.ndarray]:
    """Final-hour tabular values and per-band pixel means, with presence flags.

    Returns ``(X, present)``; absent entries of ``X`` are 0.
    """
    end = windows.ends
    tab = windows.values[end].astype(np.float64)
    tab_ok = windows.value_mask[end]
    days = windows.day_index[end]
    has = days >= 0
    if len(windows.images) == 0:
        px = np.zeros((len(end),) + windows.images.shape[1:])
        pm = np.zeros(px.shape, bool)
    else:
        safe = np.where(has, days, 0)
        px = windows.images[safe].astype(np.float64)      # (W, 9, 64)
        pm = windows.image_mask[safe] & has[:, None, None]
    counts = pm.sum(axis=-1)
    band_mean = np.where(counts > 0, (px * pm).sum(axis=-1) / np.maximum(counts, 1), 0.0)
    return np.concatenate([tab, band_mean], axis=1), np.concatenate([tab_ok, counts > 0], axis=1)


@dataclass
class LinearBaseline:
    weights: np.ndarray
    intercept: float
    fill: np.ndarray          # training means used for imputation
    lam: float

    def predict_features(self, X: np.ndarray, present: np.ndarray | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if present is not None:
            X = np.where(present, X, self.fill)
        return X @ self.weights + self.intercept

    def predict(self, windows: WindowSet) -> np.ndarray:
        X, present = baseline_features(windows)
        return self.predict_features(X, present)


def fit_ridge(X, y, lam: float = 1e-6) -> tuple[np.ndarray, float]:
    """Centred ridge regression solved through a QR factorisation.

    Solves ``(Xc'Xc + lam I) w = Xc'yc`` as the least-squares problem on
    ``[Xc; sqrt(lam) I]``; the intercept is left unpenalised.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, p = X.shape
    if n < p + 1:
        raise ConfigError(f"need at least {p + 1} samples for {p} features, got {n}")
    if lam < 0:
        raise ConfigError("ridge damping must be non-negative")
    x_mean, y_mean = X.mean(axis=0), y.mean()
    Xc, yc = X - x_mean, y - y_mean
    A = np.vstack([Xc, math.sqrt(lam) * np.eye(p)]) if lam > 0 else Xc
    b = np.concatenate([yc, np.zeros(p)]) if lam > 0 else yc
    Q, R = np.linalg.qr(A)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise SingularMatrixError("normal equations are singular; use a ridge damping lam > 0")
    w = np.linalg.solve(R, Q.T @ b)
    return w, float(y_mean - x_mean @ w)


def fit_linear_baseline(windows: WindowSet, lam: float = 1e-6) -> LinearBaseline:
    X, present = baseline_features(windows)
    counts = present.sum(axis=0)
    fill = np.where(counts > 0, (X * present).sum(axis=0) / np.maximum(counts, 1), 0.0)
    X = np.where(present, X, fill)
    w, b = fit_ridge(X, windows.targets, lam)
    return LinearBaseline(w, b, fill, lam)
