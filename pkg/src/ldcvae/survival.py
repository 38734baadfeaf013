"""Discrete-time hazard modelling and survival statistics.

Censoring convention: ``censored=True`` is ``c = 1`` in the likelihood,
so only uncensored patients contribute the hazard term and only they
anchor comparable pairs in the concordance index.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import BinningError, NoComparablePairs, NoEventsError


@dataclass(frozen=True)
class SurvivalLabel:
    time_months: float
    censored: bool
    bin: int = -1

    def __post_init__(self):
        if not self.time_months > 0:
            raise ValueError(f"survival time must be positive, got {self.time_months}")

    def with_bin(self, b: int) -> "SurvivalLabel":
        return SurvivalLabel(self.time_months, self.censored, int(b))


def label_arrays(labels: Sequence[SurvivalLabel]) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([lab.time_months for lab in labels], dtype=float)
    censored = np.array([lab.censored for lab in labels], dtype=bool)
    return times, censored


# ---------------------------------------------------------------------------
# binning
# ---------------------------------------------------------------------------

def bin_edges(times, censored, n_bins: int) -> np.ndarray:
    """Interior bin edges at the ``k / n_bins`` quantiles of uncensored times."""
    times = np.asarray(times, dtype=float)
    events = times[~np.asarray(censored, dtype=bool)]
    if n_bins < 1:
        raise BinningError("need at least one bin")
    if len(np.unique(events)) < n_bins:
        raise BinningError(f"{len(np.unique(events))} distinct uncensored times; need >= {n_bins}")
    edges = np.quantile(events, np.arange(1, n_bins) / n_bins)
    if np.any(np.diff(edges) <= 0):
        raise BinningError(f"quantile edges not strictly increasing: {edges}")
    return edges


def apply_bins(times, edges: np.ndarray) -> np.ndarray:
    """Bin index per time; a time equal to an edge falls in the upper bin."""
    return np.searchsorted(edges, np.asarray(times, dtype=float), side="right").astype(int)


def assign_bins(times, censored, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    edges = bin_edges(times, censored, n_bins)
    return apply_bins(times, edges), edges


# ---------------------------------------------------------------------------
# hazards, survival, likelihood
# ---------------------------------------------------------------------------

@dataclass
class SurvivalOutput:
    logits: Tensor
    hazards: Tensor
    survival: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> "SurvivalOutput":
        logits = ad.as_tensor(logits)
        hazards = ad.sigmoid(logits)
        keep = 1.0 - hazards
        running = keep[0:1]
        cols = [running]
        for b in range(1, logits.shape[0]):
            running = running * keep[b:b + 1]
            cols.append(running)
        return cls(logits, hazards, ad.concat(cols))

    @property
    def n_bins(self) -> int:
        return self.logits.shape[0]

    def risk(self) -> float:
        return risk_score(self.survival.data)


def risk_score(survival: np.ndarray) -> float:
    """Higher is riskier: negative sum of the per-bin survival probabilities."""
    return -float(np.sum(survival))


def nll_survival(outputs: Sequence[SurvivalOutput], labels: Sequence[SurvivalLabel]) -> Tensor:
    """Summed discrete-time negative log-likelihood.

    Censored patients contribute ``-log S(t)``; uncensored ones
    ``-log S(t-1) - log h(t)`` with ``S(-1) = 1``.
    """
    if not outputs or len(outputs) != len(labels):
        raise ValueError("need a non-empty batch with one label per output")
    total = None
    for out, lab in zip(outputs, labels):
        b = lab.bin
        if not 0 <= b < out.n_bins:
            raise ValueError(f"bin {b} outside [0, {out.n_bins})")
        log_keep = ad.log(ad.sigmoid(-out.logits))
        if lab.censored:
            term = ad.sum_(log_keep[: b + 1])
        else:
            term = ad.log(ad.sigmoid(out.logits[b:b + 1]))
            term = ad.sum_(term) if b == 0 else ad.sum_(log_keep[:b]) + ad.sum_(term)
        total = -term if total is None else total - term
    return total


# ---------------------------------------------------------------------------
# concordance
# ---------------------------------------------------------------------------

def concordance_counts(risks, times, censored) -> tuple[float, int]:
    """(concordant + 0.5 * tied, comparable) over pairs with i uncensored and
    t_i < t_j."""
    risks = np.asarray(risks, dtype=float)
    times = np.asarray(times, dtype=float)
    events = ~np.asarray(censored, dtype=bool)
    comparable = events[:, None] & (times[:, None] < times[None, :])
    n = int(comparable.sum())
    conc = int((comparable & (risks[:, None] > risks[None, :])).sum())
    ties = int((comparable & (risks[:, None] == risks[None, :])).sum())
    return conc + 0.5 * ties, n


def c_index(risks, times, censored) -> float:
    """Harrell's concordance index; risk ties count one half."""
    score, n = concordance_counts(risks, times, censored)
    if n == 0:
        raise NoComparablePairs("no comparable pairs (need an uncensored patient with a later observed time)")
    return score / n


# ---------------------------------------------------------------------------
# Kaplan-Meier and log-rank
# ---------------------------------------------------------------------------

@dataclass
class KMCurve:
    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.times, t, side="right")
        return np.concatenate([[1.0], self.survival])[idx]

    def steps(self) -> list[tuple[float, float]]:
        return [(0.0, 1.0)] + list(zip(self.times.tolist(), self.survival.tolist()))


def km_curve(times, censored) -> KMCurve:
    """Product-limit estimate; one step per distinct event time."""
    times = np.asarray(times, dtype=float)
    censored = np.asarray(censored, dtype=bool)
    if times.size == 0:
        raise ValueError("empty cohort")
    event_times = np.unique(times[~censored])
    s = 1.0
    surv, at_risk, events = [], [], []
    for t in event_times:
        n = int((times >= t).sum())
        d = int(((times == t) & ~censored).sum())
        s *= 1.0 - d / n
        surv.append(s)
        at_risk.append(n)
        events.append(d)
    return KMCurve(event_times, np.array(surv), np.array(at_risk, dtype=int), np.array(events, dtype=int))


@dataclass(frozen=True)
class LogRankResult:
    chi_square: float
    p_value: float
    observed_a: float
    expected_a: float
    variance: float


def logrank_test(times_a, censored_a, times_b, censored_b) -> LogRankResult:
    ta, ca = np.asarray(times_a, float), np.asarray(censored_a, bool)
    tb, cb = np.asarray(times_b, float), np.asarray(censored_b, bool)
    if ta.size == 0 or tb.size == 0:
        raise ValueError("both groups must be non-empty")
    event_times = np.unique(np.concatenate([ta[~ca], tb[~cb]]))
    if event_times.size == 0:
        raise NoEventsError("log-rank test needs at least one event")
    obs = exp_ = var = 0.0
    for t in event_times:
        na, nb = (ta >= t).sum(), (tb >= t).sum()
        da = ((ta == t) & ~ca).sum()
        d = da + ((tb == t) & ~cb).sum()
        n = na + nb
        obs += da
        exp_ += d * na / n
        if n > 1:
            var += na * nb * d * (n - d) / (n * n * (n - 1))
    chi = 0.0 if var == 0 else (obs - exp_) ** 2 / var
    return LogRankResult(float(chi), float(chi2_sf(chi, 1)), float(obs), float(exp_), float(var))


def _gamma_p_series(a: float, x: float) -> float:
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    # modified Lentz
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def chi2_sf(x: float, df: int = 1) -> float:
    """Upper tail of the chi-square distribution via the regularised
    incomplete gamma function Q(df/2, x/2)."""
    if x <= 0:
        return 1.0
    a, y = df / 2.0, x / 2.0
    if y < a + 1.0:
        return max(0.0, 1.0 - _gamma_p_series(a, y))
    return _gamma_q_contfrac(a, y)


def stratify_median(risks) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the high- and low-risk groups; risks equal to the median go low."""
    risks = np.asarray(risks, dtype=float)
    if risks.size < 2:
        raise ValueError("need at least two patients to stratify")
    high = risks > np.median(risks)
    return np.flatnonzero(high), np.flatnonzero(~high)


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def write_km_csv(curves: Mapping[str, KMCurve], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "survival", "group", "at_risk", "events"])
        for group, curve in curves.items():
            w.writerow([0.0, 1.0, group, "", ""])
            for t, s, n, d in zip(curve.times, curve.survival, curve.at_risk, curve.events):
                w.writerow([repr(float(t)), repr(float(s)), group, int(n), int(d)])


_SVG_COLORS = ("#d62728", "#2ca02c", "#1f77b4", "#ff7f0e")


def write_km_svg(curves: Mapping[str, KMCurve], path, width: int = 480, height: int = 320,
                 title: str = "") -> None:
    pad = 40
    t_max = max([float(c.times.max()) for c in curves.values() if c.times.size] + [1.0])

    def xy(t, s):
        return pad + (width - 2 * pad) * t / t_max, height - pad - (height - 2 * pad) * s

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>']
    if title:
        parts.append(f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>')
    for i, (group, curve) in enumerate(curves.items()):
        color = _SVG_COLORS[i % len(_SVG_COLORS)]
        pts, prev = [], 1.0
        for t, s in curve.steps():
            pts.append(xy(t, prev))
            pts.append(xy(t, s))
            prev = s
        pts.append(xy(t_max, prev))
        path_d = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{path_d}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 16 * i}" text-anchor="end" fill="{color}" '
                     f'font-size="12">{group}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))
