"""Checks that a fitted model or a synthetic dataset reproduces the source.

* Error distributions of statistics against targets (absolute and relative).
* Per-week statistics and their Pearson correlations across weeks, which
  quantify how stationary a population is.
* The distribution of the number of distinct topics a user holds over
  several weeks, a statistic the model is never fitted to.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import SequenceDataset
from .dp_stats import StatisticsBundle, count_marginals, n_pairs, pair_index, raw_statistics
from .model import model_statistics

FAMILIES = ("single", "within", "across")
DEFAULT_REL_THRESHOLD = 0.001


@dataclasses.dataclass
class ErrorDistribution:
    """Signed errors (value minus target) per term family, with the targets.

    Relative errors are only defined for targets ``>= rel_threshold``.
    """

    errors: dict[str, np.ndarray]
    targets: dict[str, np.ndarray]
    rel_threshold: float = DEFAULT_REL_THRESHOLD

    def all_errors(self) -> np.ndarray:
        return np.concatenate([self.errors[f].ravel() for f in FAMILIES])

    def all_targets(self) -> np.ndarray:
        return np.concatenate([self.targets[f].ravel() for f in FAMILIES])

    def __len__(self) -> int:
        return self.all_errors().size

    def relative_errors(self) -> np.ndarray:
        err, tgt = self.all_errors(), self.all_targets()
        keep = tgt >= self.rel_threshold
        return np.abs(err[keep]) / tgt[keep]

    def abs_cdf(self, thresholds) -> np.ndarray:
        """Fraction of terms with ``|error| <= t`` for every threshold ``t``."""
        return _cdf(np.abs(self.all_errors()), thresholds)

    def rel_cdf(self, thresholds) -> np.ndarray:
        """Fraction of eligible terms with relative error ``<= t``."""
        return _cdf(self.relative_errors(), thresholds)

    def fraction_abs_below(self, t: float) -> float:
        """Fraction of terms with ``|error| < t`` (strict)."""
        e = np.abs(self.all_errors())
        return float(np.mean(e < t)) if e.size else 1.0


def _cdf(values: np.ndarray, thresholds) -> np.ndarray:
    t = np.atleast_1d(np.asarray(thresholds, dtype=np.float64))
    if values.size == 0:
        return np.ones_like(t)
    v = np.sort(values)
    return np.searchsorted(v, t, side="right") / v.size


def _bundle_tables(stats: StatisticsBundle) -> dict[str, np.ndarray]:
    return {"single": stats.q_single, "within": stats.q_within, "across": stats.q_across}


def statistic_errors(
    stats: StatisticsBundle | dict[str, np.ndarray],
    targets: StatisticsBundle,
    rel_threshold: float = DEFAULT_REL_THRESHOLD,
) -> ErrorDistribution:
    """Errors of ``stats`` against ``targets``.

    ``stats`` is either a bundle (one value per statistic) or the per-week
    output of ``model_statistics``; in the latter case every week is a term
    and is compared to the week-averaged target, as in the training objective.
    """
    tgt = _bundle_tables(targets)
    if isinstance(stats, StatisticsBundle):
        values = _bundle_tables(stats)
        shapes_ok = all(values[f].shape == tgt[f].shape for f in FAMILIES)
        per_week = False
    else:
        values = {f: np.asarray(stats[f], dtype=np.float64) for f in FAMILIES}
        shapes_ok = all(values[f].shape[1:] == tgt[f].shape for f in FAMILIES)
        per_week = True
    if not shapes_ok:
        raise ValueError("statistics and targets have different shapes")
    errors, targets_out = {}, {}
    for f in FAMILIES:
        t = np.broadcast_to(tgt[f], values[f].shape) if per_week else tgt[f]
        errors[f] = values[f] - t
        targets_out[f] = np.array(t, dtype=np.float64)
    return ErrorDistribution(errors, targets_out, rel_threshold)


def objective_term_errors(
    theta: np.ndarray, targets: StatisticsBundle, rel_threshold: float = DEFAULT_REL_THRESHOLD
) -> ErrorDistribution:
    """Errors over every term of the training objective."""
    return statistic_errors(model_statistics(theta), targets, rel_threshold)


def error_histogram(errors: np.ndarray, bins: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Counts of signed errors over ``bins`` equal-width bins; returns ``(edges, counts)``."""
    errors = np.asarray(errors, dtype=np.float64)
    lim = float(np.abs(errors).max()) if errors.size else 0.0
    lim = lim if lim > 0 else 1.0
    counts, edges = np.histogram(errors, bins=bins, range=(-lim, lim))
    return edges, counts


# --------------------------------------------------------------------------
# Stationarity


@dataclasses.dataclass
class PerWeekStatistics:
    """Noiseless single-week tables.

    ``single`` [r, V], ``within`` [r, pairs] and ``across`` [r-1, V, V] where
    ``across[j]`` covers the transition from week ``j`` to ``j + 1``.
    """

    single: np.ndarray
    within: np.ndarray
    across: np.ndarray


def per_week_statistics(pop: SequenceDataset, taxonomy_size: int) -> PerWeekStatistics:
    """Population frequencies of each statistic for every week separately."""
    n, r, k = pop.sets.shape
    if r < 2:
        raise ValueError(f"need at least 2 weeks, got {r}")
    if n == 0:
        raise ValueError("empty population")
    V = taxonomy_size
    single = np.zeros((r, V))
    within = np.zeros((r, n_pairs(V)))
    across = np.zeros((r - 1, V, V))
    for j in range(r):
        week = pop.sets[:, j]
        single[j] = np.bincount(week[week > 0] - 1, minlength=V)[:V]
        for s1 in range(k):
            for s2 in range(s1 + 1, k):
                a, b = week[:, s1], week[:, s2]
                ok = (a > 0) & (b > 0)
                within[j] += np.bincount(pair_index(a[ok], b[ok], V), minlength=within.shape[1])
        if j + 1 < r:
            nxt = pop.sets[:, j + 1]
            for s1 in range(k):
                for s2 in range(k):
                    a, b = week[:, s1], nxt[:, s2]
                    ok = (a > 0) & (b > 0)
                    idx = (a[ok].astype(np.int64) - 1) * V + (b[ok] - 1)
                    across[j] += np.bincount(idx, minlength=V * V).reshape(V, V)
    return PerWeekStatistics(single / n, within / n, across / n)


def pearson(x, y) -> float:
    """Pearson correlation; raises on constant input instead of returning 0."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("need at least 2 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(dx @ dx), np.sqrt(dy @ dy)
    if sx == 0 or sy == 0:
        raise ValueError("zero variance: correlation undefined")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def correlation_matrix(tables: np.ndarray) -> np.ndarray:
    """Pearson correlation between the flattened tables along the first axis."""
    m = tables.shape[0]
    out = np.eye(m)
    for a in range(m):
        for b in range(a + 1, m):
            out[a, b] = out[b, a] = pearson(tables[a], tables[b])
    return out


@dataclasses.dataclass
class StationarityReport:
    single: np.ndarray
    within: np.ndarray
    across: np.ndarray

    def min_offdiagonal(self) -> float:
        vals = [
            m[~np.eye(m.shape[0], dtype=bool)]
            for m in (self.single, self.within, self.across)
        ]
        vals = np.concatenate(vals)
        return float(vals.min()) if vals.size else 1.0


def stationarity_report(pop: SequenceDataset, taxonomy_size: int) -> StationarityReport:
    """Week-by-week correlation of every statistic family."""
    pw = per_week_statistics(pop, taxonomy_size)
    return StationarityReport(
        correlation_matrix(pw.single),
        correlation_matrix(pw.within),
        correlation_matrix(pw.across.reshape(pw.across.shape[0], -1)),
    )


# --------------------------------------------------------------------------
# Unconstrained statistic


def distinct_topics_distribution(pop: SequenceDataset, weeks: int) -> np.ndarray:
    """Fraction of users holding ``d`` distinct topics over the first ``weeks`` weeks.

    Entry ``d`` of the result is the fraction for count ``d`` (``0 .. weeks*k``).
    """
    if weeks > pop.weeks:
        raise ValueError(f"population has {pop.weeks} weeks, asked for {weeks}")
    n = len(pop)
    size = weeks * pop.k + 1
    if n == 0:
        return np.zeros(size)
    s = np.sort(pop.sets[:, :weeks].reshape(n, -1), axis=1)
    distinct = (s > 0) & np.concatenate([np.ones((n, 1), bool), s[:, 1:] != s[:, :-1]], axis=1)
    counts = distinct.sum(axis=1)
    return np.bincount(counts, minlength=size) / n


def empirical_statistics(ds: SequenceDataset, taxonomy_size: int) -> StatisticsBundle:
    """Noiseless statistics of a dataset (for example a synthetic sample)."""
    return raw_statistics(count_marginals(ds, taxonomy_size))
