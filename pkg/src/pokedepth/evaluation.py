"""Error metrics at poke points, calibration diagnostics and report tables."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import DomainError

DEFAULT_FRACTIONS = tuple(round(1.0 - 0.1 * i, 1) for i in range(10))   # 1.0 ... 0.1

# row order of the results table; unknown predictors are appended alphabetically
ROW_ORDER = (
    "raw", "raw-bc", "gf", "gf-bc", "ae", "ae-bc",
    "m-dbp-rgb", "m-dbp-rgbd", "ll-dbp-rgb", "ll-dbp-rgbd", "dbp-rgb", "dbp-rgbd",
)
ROW_LABELS = {
    "raw": "Sensor raw",
    "raw-bc": "Sensor BC",
    "gf": "Gaussian filter",
    "gf-bc": "Gaussian filter BC",
    "ae": "Autoencoder",
    "ae-bc": "Autoencoder BC",
    "m-dbp-rgb": "M-DbP (RGB only)",
    "m-dbp-rgbd": "M-DbP (RGB-D)",
    "ll-dbp-rgb": "LL-DbP (RGB only)",
    "ll-dbp-rgbd": "LL-DbP (RGB-D)",
    "dbp-rgb": "DbP (RGB only)",
    "dbp-rgbd": "DbP (RGB-D)",
}


def _pair(pred, labels) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if pred.shape != labels.shape:
        raise ValueError(f"{pred.size} predictions for {labels.size} labels")
    if pred.size == 0:
        raise ValueError("need at least one prediction")
    return pred, labels


def rmse_at_pokes(pred, labels) -> float:
    pred, labels = _pair(pred, labels)
    return float(np.sqrt(np.mean((pred - labels) ** 2)))


def mean_signed_error(pred, labels) -> float:
    """Mean of ``pred - label``: positive means the predictor over-estimates depth."""
    pred, labels = _pair(pred, labels)
    return float(np.mean(pred - labels))


@dataclass
class Histogram:
    edges: np.ndarray     # (2m + 1,) bin edges, symmetric about 0
    counts: np.ndarray    # (2m,) raw counts; log scaling is left to the plot

    def rows(self):
        return zip(self.edges[:-1], self.edges[1:], self.counts)


def error_histogram(errors, bin_width: float) -> Histogram:
    """Signed errors in half-open bins ``[lo, lo + bin_width)`` laid out symmetrically about 0."""
    if not bin_width > 0:
        raise ValueError("bin_width must be positive")
    e = np.asarray(errors, dtype=np.float64).ravel()
    m = int(np.floor(np.max(np.abs(e)) / bin_width)) + 1 if e.size else 1
    edges = np.arange(-m, m + 1) * float(bin_width)
    idx = np.floor(e / bin_width).astype(np.int64) + m
    counts = np.bincount(idx, minlength=2 * m)
    return Histogram(edges, counts)


def studentize(pred, labels, variance) -> np.ndarray:
    """``(pred - label) / sqrt(variance)``, elementwise."""
    pred, labels = _pair(pred, labels)
    v = np.asarray(variance, dtype=np.float64).ravel()
    if v.shape != pred.shape:
        raise ValueError(f"{v.size} variances for {pred.size} predictions")
    bad = np.flatnonzero(~(v > 0))
    if bad.size:
        raise DomainError(f"variance must be positive, got {v[bad[0]]} at index {bad[0]}")
    return (pred - labels) / np.sqrt(v)


# Rational approximation of the standard normal quantile (P. J. Acklam),
# relative error below 1.15e-9 in exact arithmetic; about 1.5e-7 absolute in float64 here.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425


def normal_quantile(p):
    """Inverse CDF of the standard normal for ``0 < p < 1`` (scalar or array)."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(~((p > 0) & (p < 1))):
        raise DomainError("probabilities must lie strictly between 0 and 1")
    out = np.empty_like(p)

    low = p < _P_LOW
    high = p > 1 - _P_LOW
    mid = ~(low | high)

    q = np.sqrt(-2 * np.log(np.where(low, p, 1 - p)))
    tail = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
           ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    out[low] = tail[low]
    out[high] = -tail[high]

    q = p - 0.5
    r = q * q
    centre = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
             (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)
    out[mid] = centre[mid]
    return out if out.ndim else float(out)


def qq_points(residuals) -> tuple[np.ndarray, np.ndarray]:
    """Normal quantiles at plotting positions ``(i - 0.5) / n`` against sorted residuals."""
    r = np.sort(np.asarray(residuals, dtype=np.float64).ravel())
    n = r.size
    if n < 2:
        raise ValueError("need at least two residuals")
    theoretical = normal_quantile((np.arange(1, n + 1) - 0.5) / n)
    return theoretical, r


def discard_curve(residuals, variance, fractions: Sequence[float] = DEFAULT_FRACTIONS):
    """RMSE of the samples kept when only the lowest-variance fraction is retained.

    For each fraction ``f`` the ``round(f * n)`` samples with the smallest
    predicted variance are kept; ties keep the earlier sample.  Returns a
    list of ``(f, rmse)``.
    """
    r = np.asarray(residuals, dtype=np.float64).ravel()
    v = np.asarray(variance, dtype=np.float64).ravel()
    if r.shape != v.shape:
        raise ValueError(f"{r.size} residuals for {v.size} variances")
    fractions = [float(f) for f in fractions]
    if not fractions or fractions[0] != 1.0 or any(b >= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must start at 1.0 and strictly decrease")
    if fractions[-1] <= 0:
        raise ValueError("fractions must be positive")
    if r.size < len(fractions):
        raise ValueError(f"need at least {len(fractions)} samples for {len(fractions)} fractions")
    order = np.argsort(v, kind="stable")
    sq = r[order] ** 2
    out = []
    for f in fractions:
        k = max(1, int(math.floor(f * r.size + 0.5)))
        # the full set is summed in input order so it matches rmse_at_pokes bit for bit
        kept = r ** 2 if k == r.size else sq[:k]
        out.append((f, float(np.sqrt(np.mean(kept)))))
    return out


def full_map_rmse(pred_map, true_depth, offset: float = 0.0, mask=None) -> float:
    """RMSE of a dense prediction against ``true_depth + offset`` (the tooltip depth everywhere)."""
    pred_map = np.asarray(pred_map, dtype=np.float64)
    target = np.asarray(true_depth, dtype=np.float64) + offset
    if pred_map.shape != target.shape:
        raise ValueError(f"prediction {pred_map.shape} vs ground truth {target.shape}")
    err = pred_map - target
    if mask is not None:
        err = err[np.asarray(mask, dtype=bool)]
    return float(np.sqrt(np.mean(err ** 2)))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    predictor: str
    dataset: str
    rmse: float
    mean_signed_error: float
    histogram: Histogram
    studentized: np.ndarray | None = None
    qq: tuple[np.ndarray, np.ndarray] | None = None
    discard: list[tuple[float, float]] | None = None
    seed_rmse: list[float] = field(default_factory=list)

    @property
    def rmse_std(self) -> float:
        return float(np.std(self.seed_rmse)) if len(self.seed_rmse) > 1 else 0.0

    @property
    def rmse_mean(self) -> float:
        return float(np.mean(self.seed_rmse)) if self.seed_rmse else self.rmse


def evaluate(predictor: str, dataset: str, pred, labels, variance=None, bin_width: float = 10.0,
             fractions: Sequence[float] = DEFAULT_FRACTIONS) -> EvalReport:
    pred, labels = _pair(pred, labels)
    err = pred - labels
    report = EvalReport(
        predictor=predictor, dataset=dataset,
        rmse=rmse_at_pokes(pred, labels),
        mean_signed_error=float(np.mean(err)),
        histogram=error_histogram(err, bin_width),
    )
    if variance is not None:
        report.studentized = studentize(pred, labels, variance)
        report.qq = qq_points(report.studentized)
        report.discard = discard_curve(err, variance, fractions)
    return report


def write_histogram_csv(hist: Histogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in hist.rows():
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def write_qq_csv(qq, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["theoretical", "empirical"])
        for t, e in zip(*qq):
            w.writerow([repr(float(t)), repr(float(e))])


def write_discard_csv(curve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["retained_fraction", "rmse_mm"])
        for f, r in curve:
            w.writerow([repr(f), repr(r)])


@dataclass(frozen=True)
class TableRow:
    predictor: str
    dataset: str
    rmse: float
    std: float
    seeds: int = 1


def _row_key(predictor: str):
    return (ROW_ORDER.index(predictor), "") if predictor in ROW_ORDER else (len(ROW_ORDER), predictor)


def report_table(rows: Sequence[TableRow]) -> tuple[str, list[list[str]]]:
    """Format rows as a predictor-by-dataset text table plus CSV records.

    Values are in millimetres to two decimals; a cell aggregated over more
    than one seed reads ``mean ± std``.
    """
    if not rows:
        raise ValueError("need at least one row")
    cells: dict[tuple[str, str], TableRow] = {}
    datasets: list[str] = []
    for r in rows:
        cells[(r.predictor, r.dataset)] = r
        if r.dataset not in datasets:
            datasets.append(r.dataset)
    predictors = sorted({r.predictor for r in rows}, key=_row_key)

    def cell(r: TableRow | None) -> str:
        if r is None:
            return "-"
        return f"{r.rmse:.2f} ± {r.std:.2f}" if r.seeds > 1 else f"{r.rmse:.2f}"

    header = ["predictor"] + datasets
    body = [[ROW_LABELS.get(p, p)] + [cell(cells.get((p, d))) for d in datasets] for p in predictors]
    widths = [max(len(line[i]) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(s.ljust(w) for s, w in zip(line, widths)).rstrip() for line in [header] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))

    records = [[p, d, f"{cells[(p, d)].rmse:.2f}", f"{cells[(p, d)].std:.2f}", str(cells[(p, d)].seeds)]
               for p in predictors for d in datasets if (p, d) in cells]
    return "\n".join(lines) + "\n", records


TABLE_COLUMNS = ["predictor", "dataset", "rmse_mm", "std_mm"]


def write_table_csv(records, path) -> None:
    """Records are ``[predictor, dataset, rmse_mm, std_mm, seeds]``; ``seeds`` is a trailing extra column."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE_COLUMNS + ["seeds"])
        w.writerows(records)


def read_table_csv(path) -> list[TableRow]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"table file not found: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[:4] != TABLE_COLUMNS:
            raise ValueError(f"{path}: expected columns {','.join(TABLE_COLUMNS)}")
        rows = []
        for rec in reader:
            seeds = int(rec["seeds"]) if rec.get("seeds") else 1
            rows.append(TableRow(rec["predictor"], rec["dataset"], float(rec["rmse_mm"]),
                                 float(rec["std_mm"]), seeds))
    return rows
