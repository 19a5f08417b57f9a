"""
Edcurate Trend - Sampling schedules, monthly abundance series and regression fits

Regression x values are months since an origin month (by default the first
point of the series). Polynomial fits are solved on x mapped to [-1, 1] by QR
decomposition and reported in the original x units.
"""

import calendar
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular
from scipy.special import betainc

from .corpus import parse_timestamp
from .types import (
    Dataset,
    DataError,
    InsufficientDataError,
    Label,
    MonthKey,
    MonthlyPoint,
    MonthlySeries,
    PolyFit,
    RankDeficientError,
)
from .utils import make_rng

logger = logging.getLogger(__name__)

STUDY_START = MonthKey(2014, 1)
STUDY_END = MonthKey(2023, 4)
LINEAR_FROM = MonthKey(2018, 1)
DAYS_PER_MONTH = 3
FIT_DEGREE_COLUMNS = 4
ALL_SERIES = "all"
SOURCE_PREFIX = "source:"
PREDICTION_COLUMNS = ("source", "posted_at", "label")


def days_in_month(m: MonthKey) -> int:
    return calendar.monthrange(m.year, m.month)[1]


def sampling_schedule(m: MonthKey, seed: int = 0) -> Tuple[int, int, int]:
    """Three sorted, pairwise non-adjacent days of the month.

    Non-adjacent triples of 1..n correspond one to one with 3-subsets of
    1..n-2 (subtract 0, 1 and 2 from the sorted days), so a uniform subset
    gives a uniform schedule.
    """
    rng = make_rng(seed, m.year, m.month)
    picks = sorted(int(v) for v in rng.choice(days_in_month(m) - 2, DAYS_PER_MONTH, replace=False))
    return tuple(pick + 1 + offset for offset, pick in enumerate(picks))


def apply_schedule(d: Dataset, seed: int = 0) -> Dataset:
    """Keep posts made on one of the sampled days of their (UTC) month"""
    schedules: Dict[MonthKey, Tuple[int, ...]] = {}
    kept = []
    for post in d.posts:
        moment = post.posted_at.astimezone(timezone.utc)
        month = MonthKey.of(moment)
        if month not in schedules:
            schedules[month] = sampling_schedule(month, seed)
        if moment.day in schedules[month]:
            kept.append(post)
    logger.info(f"Sampling schedule kept {len(kept)} of {len(d)} posts over {len(schedules)} months")
    return d.derive(kept, f"apply_schedule(seed={seed})")


def aggregate_monthly(rows: Iterable[Tuple[datetime, Label]], series_id: str = "all") -> MonthlySeries:
    """Monthly counts and Pro-ED abundance; months without posts carry no point"""
    counts: Dict[MonthKey, List[int]] = {}
    for posted_at, label in rows:
        tally = counts.setdefault(MonthKey.of(posted_at.astimezone(timezone.utc)), [0, 0])
        tally[0] += 1
        if label == Label.PRO_ED:
            tally[1] += 1
    return MonthlySeries(
        series_id=series_id,
        points=[MonthlyPoint(month, examined, pro_ed) for month, (examined, pro_ed) in sorted(counts.items())],
    )


def aggregate_by_series(rows: Iterable[Tuple[str, datetime, Label]]) -> Dict[str, MonthlySeries]:
    """One series per source tag, keys sorted"""
    grouped: Dict[str, List[Tuple[datetime, Label]]] = {}
    for series_id, posted_at, label in rows:
        grouped.setdefault(series_id, []).append((posted_at, label))
    return {series_id: aggregate_monthly(grouped[series_id], series_id) for series_id in sorted(grouped)}


def source_series_id(source: str) -> str:
    """Per-source series id, kept apart from the aggregate 'all' series"""
    return f"{SOURCE_PREFIX}{source}"


def read_predictions(path: str) -> List[Tuple[str, datetime, Label]]:
    """(source, posted_at, label) rows of a classification table"""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Cannot read predictions file {path}: {e}") from None
    missing = [column for column in PREDICTION_COLUMNS if column not in frame.columns]
    if missing:
        raise DataError(f"Predictions file {path} lacks column(s): {', '.join(missing)}")

    rows = []
    for line, (source, posted_at, label) in enumerate(
        zip(frame["source"], frame["posted_at"], frame["label"]), start=2
    ):
        try:
            rows.append((source, parse_timestamp(posted_at), Label(label)))
        except ValueError as e:
            raise DataError(f"Predictions file {path} line {line}: {e}") from None
    return rows


def class_composition(labels: Iterable[Label]) -> Dict[str, float]:
    """Percent of examined posts per class"""
    labels = list(labels)
    composition: Dict[str, float] = {"examined": len(labels)}
    for label in Label:
        hits = sum(1 for value in labels if value == label)
        composition[label.value] = 100.0 * hits / len(labels) if labels else 0.0
    return composition


def restrict_window(
    series: MonthlySeries, start: MonthKey = STUDY_START, end: MonthKey = STUDY_END
) -> MonthlySeries:
    return MonthlySeries(
        series_id=series.series_id,
        points=[p for p in series.points if start <= p.month <= end],
    )


def month_index(series: MonthlySeries, origin: Optional[MonthKey] = None) -> np.ndarray:
    if not series.points:
        return np.zeros(0)
    origin = origin or series.points[0].month
    return np.array([p.month.ordinal - origin.ordinal for p in series.points], dtype=np.float64)


def abundances(series: MonthlySeries) -> np.ndarray:
    return np.array([p.abundance for p in series.points], dtype=np.float64)


def polyfit(xs: Sequence[float], ys: Sequence[float], degree: int = 3) -> PolyFit:
    """Least-squares polynomial with overall F-test p-value"""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise DataError(f"xs and ys must be equal-length vectors, got {xs.shape} and {ys.shape}")
    if not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise DataError("Regression inputs must be finite")
    if degree < 1:
        raise DataError(f"Polynomial degree must be >= 1, got {degree}")
    n = len(xs)
    if n <= degree + 1:
        raise InsufficientDataError(f"Degree-{degree} fit needs more than {degree + 1} points, got {n}")

    distinct = len(np.unique(xs))
    if distinct <= degree:
        raise RankDeficientError(
            f"Rank-deficient design: {distinct} distinct x value(s) for a degree-{degree} fit"
        )

    lo, hi = float(xs.min()), float(xs.max())
    scaled = (2.0 * xs - (lo + hi)) / (hi - lo)
    design = np.vander(scaled, degree + 1, increasing=True)
    q, r = np.linalg.qr(design)
    diagonal = np.abs(np.diag(r))
    if diagonal.min() <= 1e-12 * diagonal.max():
        raise RankDeficientError(f"Rank-deficient design for degree-{degree} fit (collinear columns)")
    scaled_coef = solve_triangular(r, q.T @ ys)

    fitted = design @ scaled_coef
    rss = float(np.sum((ys - fitted) ** 2))
    tss = float(np.sum((ys - ys.mean()) ** 2))
    converted = np.polynomial.Polynomial(scaled_coef, domain=[lo, hi], window=[-1.0, 1.0]).convert()
    coefficients = np.zeros(degree + 1)
    coefficients[: len(converted.coef)] = converted.coef

    fit = PolyFit(
        degree=degree,
        coefficients=[float(c) for c in coefficients],
        rss=rss,
        tss=tss,
        r2=1.0 - rss / tss if tss > 0 else 1.0,
        n=n,
    )
    fit.p_value = regression_pvalue(fit, n)
    return fit


def evaluate_fit(fit: PolyFit, xs: Sequence[float]) -> np.ndarray:
    return np.polynomial.polynomial.polyval(np.asarray(xs, dtype=np.float64), fit.coefficients)


def regression_pvalue(fit: PolyFit, n: Optional[int] = None) -> float:
    """Upper-tail probability of the overall F statistic against the intercept-only model"""
    n = fit.n if n is None else n
    d1 = fit.degree
    d2 = n - fit.degree - 1
    if d2 <= 0:
        raise InsufficientDataError(f"F-test needs more than {fit.degree + 1} points, got {n}")
    if fit.rss == 0.0:
        return 0.0
    explained = fit.tss - fit.rss
    if explained <= 0.0:
        return 1.0
    f_stat = (explained / d1) / (fit.rss / d2)
    return float(betainc(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f_stat)))


def linear_fit(
    series: MonthlySeries, from_: MonthKey = LINEAR_FROM, origin: Optional[MonthKey] = None
) -> PolyFit:
    """Straight line through the points at or after `from_`"""
    if not series.points:
        raise InsufficientDataError(f"Series '{series.series_id}' is empty")
    xs = month_index(series, origin)
    ys = abundances(series)
    keep = np.array([p.month >= from_ for p in series.points])
    if keep.sum() < 3:
        raise InsufficientDataError(
            f"Linear fit needs at least 3 points from {from_}, series '{series.series_id}' has {int(keep.sum())}"
        )
    return polyfit(xs[keep], ys[keep], degree=1)


@dataclass
class SeriesFits:
    series_id: str
    polynomial: Optional[PolyFit]
    linear: Optional[PolyFit]


def fit_series(series: MonthlySeries, degree: int = 3, linear_from: MonthKey = LINEAR_FROM) -> SeriesFits:
    """Whole-window polynomial and late-window linear fits; unfittable parts are skipped"""
    fits = SeriesFits(series.series_id, None, None)
    try:
        fits.polynomial = polyfit(month_index(series), abundances(series), degree)
    except (InsufficientDataError, RankDeficientError) as e:
        logger.warning(f"Skipped degree-{degree} fit for '{series.series_id}': {e}")
    try:
        fits.linear = linear_fit(series, linear_from)
    except (InsufficientDataError, RankDeficientError) as e:
        logger.warning(f"Skipped linear fit for '{series.series_id}': {e}")
    return fits


def series_frame(series: Iterable[MonthlySeries]) -> pd.DataFrame:
    rows = [
        {
            "series_id": s.series_id,
            "year": p.month.year,
            "month": p.month.month,
            "examined": p.examined,
            "pro_ed": p.pro_ed,
            "abundance": p.abundance,
        }
        for s in series
        for p in s.points
    ]
    return pd.DataFrame(rows, columns=["series_id", "year", "month", "examined", "pro_ed", "abundance"])


def fits_frame(fits: Iterable[SeriesFits]) -> pd.DataFrame:
    """One row per fit; coefficient columns beyond the degree are empty"""
    coef_columns = [f"c{i}" for i in range(FIT_DEGREE_COLUMNS)]
    rows = []
    for entry in fits:
        for fit in (entry.polynomial, entry.linear):
            if fit is None:
                continue
            row = {"series_id": entry.series_id, "degree": fit.degree}
            for i, column in enumerate(coef_columns):
                row[column] = fit.coefficients[i] if i < len(fit.coefficients) else np.nan
            row.update({"rss": fit.rss, "r2": fit.r2, "p_value": fit.p_value})
            rows.append(row)
    return pd.DataFrame(rows, columns=["series_id", "degree", *coef_columns, "rss", "r2", "p_value"])
