"""
Two-sample t-tests over per-fold metrics.
"""

from typing import Sequence

import numpy as np
from pydantic import BaseModel
from scipy.special import betainc

from neurospike.errors import ShapeError


class TTestResult(BaseModel):
    t: float
    df: float
    p: float


def t_two_tailed_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if np.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def _sample(values: Sequence[float], name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise ShapeError(f"{name} needs at least two values")
    return values


def _zero_spread(difference: float, df: float) -> TTestResult:
    # equal means: p = 1; otherwise t = +-inf and p = 0
    if difference == 0:
        return TTestResult(t=0.0, df=df, p=1.0)
    t = float(np.copysign(np.inf, difference))
    return TTestResult(t=t, df=df, p=0.0)


def welch_ttest(
    sample_a: Sequence[float], sample_b: Sequence[float]
) -> TTestResult:
    """
    Unequal-variance two-sample t-test with Welch-Satterthwaite degrees
    of freedom.
    """
    a = _sample(sample_a, "sample_a")
    b = _sample(sample_b, "sample_b")
    va, vb = a.var(ddof=1) / a.size, b.var(ddof=1) / b.size
    difference = float(a.mean() - b.mean())
    if va + vb == 0:
        return _zero_spread(difference, float(a.size + b.size - 2))
    df = (va + vb) ** 2 / (va**2 / (a.size - 1) + vb**2 / (b.size - 1))
    t = difference / np.sqrt(va + vb)
    return TTestResult(t=float(t), df=float(df), p=t_two_tailed_p(t, df))


def paired_ttest(
    sample_a: Sequence[float], sample_b: Sequence[float]
) -> TTestResult:
    """t-test on the fold-by-fold differences of two matched samples."""
    a = _sample(sample_a, "sample_a")
    b = _sample(sample_b, "sample_b")
    if a.size != b.size:
        raise ShapeError(
            f"paired samples differ in size ({a.size} vs {b.size})"
        )
    d = a - b
    df = float(d.size - 1)
    spread = d.std(ddof=1)
    if spread == 0:
        return _zero_spread(float(d.mean()), df)
    t = d.mean() / (spread / np.sqrt(d.size))
    return TTestResult(t=float(t), df=df, p=t_two_tailed_p(t, df))
