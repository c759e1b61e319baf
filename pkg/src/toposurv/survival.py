"""Discrete-time binning, concordance, Kaplan-Meier and risk stratification."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class TooFewEvents(ValueError):
    pass


class NoComparablePairs(ValueError):
    pass


@dataclass(frozen=True)
class SurvivalRecord:
    """Observed time, event flag (1 = event, 0 = right-censored), covariates."""

    time: float
    event: int
    covariates: tuple[float, ...] = ()

    def __post_init__(self):
        if self.time <= 0:
            raise ValueError(f"time must be positive, got {self.time}")
        if self.event not in (0, 1):
            raise ValueError(f"event must be 0 or 1, got {self.event}")


def _times_events(records) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.int64)
    return times, events


@dataclass
class BinEdges:
    """Strictly increasing time cut points: 0 = e[0] < ... < e[K] = inf."""

    edges: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.float64)
        if e[0] != 0.0 or not np.isinf(e[-1]) or np.any(np.diff(e) <= 0):
            raise ValueError(f"bad bin edges {e}")
        self.edges = e

    @property
    def num_bins(self) -> int:
        return len(self.edges) - 1


def make_bin_edges(records, num_bins: int) -> BinEdges:
    """Interior edges at the j/K quantiles of uncensored training times."""
    times, events = _times_events(records)
    event_times = times[events == 1]
    if len(np.unique(event_times)) < num_bins:
        raise TooFewEvents(
            f"need >= {num_bins} distinct event times, have {len(np.unique(event_times))}")
    interior = np.quantile(event_times, [j / num_bins for j in range(1, num_bins)])
    # restore strict monotonicity if quantiles collide
    for j in range(1, len(interior)):
        if interior[j] <= interior[j - 1]:
            interior[j] = np.nextafter(interior[j - 1], np.inf)
    return BinEdges(np.concatenate([[0.0], interior, [np.inf]]))


def bin_label(t: float, edges: BinEdges) -> int:
    """Largest k with edges[k] <= t."""
    if t <= 0:
        raise ValueError(f"time must be positive, got {t}")
    return int(np.searchsorted(edges.edges[1:-1], t, side="right"))


def c_index(risks, records) -> float:
    """Harrell's concordance over comparable pairs (t_i < t_j, e_i = 1).

    Risk ties earn half credit; pairs with equal times are excluded.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times, events = _times_events(records)
    comparable = (times[:, None] < times[None, :]) & (events[:, None] == 1)
    n_comp = int(comparable.sum())
    if n_comp == 0:
        raise NoComparablePairs("no pair with t_i < t_j and e_i = 1")
    higher = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    concordant = float((comparable & higher).sum())
    half = float((comparable & tied).sum())
    return (concordant + 0.5 * half) / n_comp


@dataclass
class KMCurve:
    """Survival estimate over the distinct event times."""

    times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    survival: np.ndarray = field(default_factory=lambda: np.zeros(0))
    at_risk: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def value_at(self, t: float) -> float:
        idx = np.searchsorted(self.times, t, side="right")
        return 1.0 if idx == 0 else float(self.survival[idx - 1])


def kaplan_meier(records) -> KMCurve:
    """Product-limit estimator; censored-at-t patients stay at risk at t."""
    if not len(records):
        raise ValueError("empty cohort")
    times, events = _times_events(records)
    out_t, out_s, out_n, out_d = [], [], [], []
    s = 1.0
    for t in np.unique(times[events == 1]):
        n = int((times >= t).sum())
        d = int(((times == t) & (events == 1)).sum())
        s *= 1.0 - d / n
        out_t.append(float(t))
        out_s.append(s)
        out_n.append(n)
        out_d.append(d)
    return KMCurve(np.array(out_t), np.array(out_s),
                   np.array(out_n, dtype=np.int64), np.array(out_d, dtype=np.int64))


def stratify_median(risks) -> np.ndarray:
    """Boolean high-risk assignment: risk strictly above the median."""
    risks = np.asarray(risks, dtype=np.float64)
    if risks.size < 2:
        raise ValueError("need at least 2 patients to stratify")
    return risks > np.median(risks)
