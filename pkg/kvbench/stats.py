"""
Welch's two-sample t-test with Welch-Satterthwaite degrees of freedom.

Student's t CDF is evaluated through the regularized incomplete beta
function, whose continued fraction is summed with the modified Lentz method.
"""

import logging
import math
from collections import defaultdict
from typing import Any, Iterable, Sequence, Union

import numpy as np

from .exceptions import InvalidParameterError
from .structs import Metric, RunResult, SampleSet, TTestReport

logger = logging.getLogger()

ALPHA = 0.05
CONFIDENCE = 0.95

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITERATIONS = 10_000
_DEGENERATE_RTOL = 1e-12
_QUANTILE_TOLERANCE = 1e-10


def _beta_continued_fraction(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITERATIONS + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    logger.warning(f"incomplete beta did not converge for a={a} b={b} x={x}")
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if not (a > 0 and b > 0):
        raise InvalidParameterError(f"beta parameters must be positive, got a={a} b={b}")
    if not (0.0 <= x <= 1.0):
        raise InvalidParameterError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    # the fraction converges fast only on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def t_cdf(x: float, df: float) -> float:
    if not math.isfinite(x):
        raise InvalidParameterError(f"t value must be finite, got {x}")
    if not (df > 0 and math.isfinite(df)):
        raise InvalidParameterError(f"degrees of freedom must be positive, got {df}")
    if x == 0.0:
        return 0.5
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, df / (df + x * x))
    return 1.0 - tail if x > 0 else tail


def t_quantile(p: float, df: float) -> float:
    """Inverse of t_cdf by bisection."""
    if not (0.0 < p < 1.0):
        raise InvalidParameterError(f"probability must lie in (0, 1), got {p}")
    if p == 0.5:
        return 0.0
    if p < 0.5:
        return -t_quantile(1.0 - p, df)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < p:
        lo, hi = hi, hi * 2.0
        if hi > 1e12:
            break
    while hi - lo > _QUANTILE_TOLERANCE * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _moments(samples: SampleSet) -> tuple[int, float, float]:
    values = np.asarray(samples.values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise InvalidParameterError(f"sample set '{samples.label}' holds non-finite values")
    return len(values), float(np.mean(values)), float(np.var(values, ddof=1))


def welch_test(
    a: SampleSet,
    b: SampleSet,
    alpha: float = ALPHA,
    confidence: float = CONFIDENCE,
) -> TTestReport:
    """Two-sided Welch test of mean(a) against mean(b)."""
    n, mean_a, var_a = _moments(a)
    m, mean_b, var_b = _moments(b)
    diff = mean_a - mean_b
    se_a, se_b = var_a / n, var_b / m
    se = math.sqrt(se_a + se_b)

    common: dict[str, Any] = dict(
        label_a=a.label,
        label_b=b.label,
        n_a=n,
        n_b=m,
        mean_a=mean_a,
        mean_b=mean_b,
        var_a=var_a,
        var_b=var_b,
        standard_error=se,
    )

    # variances at float-noise level count as zero
    tolerance = _DEGENERATE_RTOL * max(abs(mean_a), abs(mean_b), 1.0)
    if se <= tolerance:
        if abs(diff) <= tolerance:
            return TTestReport(
                **common,
                t_statistic=0.0,
                degrees_of_freedom=float(n + m - 2),
                p_value=1.0,
                significant=False,
                confidence_interval=(0.0, 0.0),
                degenerate="equal",
            )
        return TTestReport(
            **common,
            t_statistic=math.copysign(math.inf, diff),
            degrees_of_freedom=float(n + m - 2),
            p_value=0.0,
            significant=True,
            confidence_interval=(diff, diff),
            degenerate="separated",
        )

    t = diff / se
    df = (se_a + se_b) ** 2 / (se_a**2 / (n - 1) + se_b**2 / (m - 1))
    p = min(1.0, 2.0 * t_cdf(-abs(t), df))
    half_width = t_quantile(0.5 + confidence / 2.0, df) * se
    return TTestReport(
        **common,
        t_statistic=t,
        degrees_of_freedom=df,
        p_value=p,
        significant=p < alpha,
        confidence_interval=(diff - half_width, diff + half_width),
    )


def metric_samples(
    results: Iterable[RunResult], metric: Union[Metric, str]
) -> dict[tuple[str, int, str], list[float]]:
    """Metric values of successful runs keyed by (workload, concurrency, system)."""
    metric = _as_metric(metric)
    grouped: dict[tuple[str, int, str], list[float]] = defaultdict(list)
    for result in results:
        if result.failed:
            continue
        value = result.metric(metric.value)
        if value is None:
            continue
        grouped[(result.workload, result.concurrency, result.system)].append(value)
    return grouped


def _as_metric(metric: Union[Metric, str]) -> Metric:
    try:
        return Metric(metric)
    except ValueError:
        valid = ", ".join(m.value for m in Metric)
        raise InvalidParameterError(f"unknown metric '{metric}' (valid: {valid})")


def compare_cells(
    results: Sequence[RunResult],
    metric: Union[Metric, str],
    baseline_system: str,
) -> list[TTestReport]:
    """Welch test of every non-baseline system against the baseline, per cell."""
    metric = _as_metric(metric)
    grouped = metric_samples(results, metric)
    cells = sorted({(r.workload, r.concurrency) for r in results})
    systems = sorted({r.system for r in results} - {baseline_system})

    reports = []
    for workload, concurrency in cells:
        baseline = grouped.get((workload, concurrency, baseline_system), [])
        if len(baseline) < 2:
            logger.warning(
                f"missing cell: baseline {baseline_system} has {len(baseline)} "
                f"repetition(s) at workload={workload} concurrency={concurrency}, skipped"
            )
            continue
        for system in systems:
            values = grouped.get((workload, concurrency, system), [])
            if len(values) < 2:
                logger.warning(
                    f"missing cell: {system} has {len(values)} repetition(s) "
                    f"at workload={workload} concurrency={concurrency}, skipped"
                )
                continue
            report = welch_test(
                SampleSet(label=system, values=values),
                SampleSet(label=baseline_system, values=baseline),
            )
            reports.append(
                report.model_copy(
                    update={
                        "workload": workload,
                        "concurrency": concurrency,
                        "metric": metric.value,
                    }
                )
            )
    return reports

