"""Marginal counts, the Gaussian mechanism and normalized target statistics.

Count tables are computed on the first two weeks of a population:

* ``f11`` / ``f22``: for every unordered topic pair, the number of users whose
  week-0 (resp. week-1) set holds both topics. Stored as a flat vector in
  ``numpy.triu_indices(V, 1)`` order.
* ``f12``: a ``V x V`` table, users with topic ``a`` in week 0 and ``b`` in
  week 1.

Noise is calibrated with the exact Gaussian-mechanism condition (the
Balle-Wang characterization) evaluated in log space, so budgets such as
``delta = 1e-15`` are handled without cancellation.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from itertools import combinations

import numpy as np
from scipy.special import log_ndtr

from .core import SequenceDataset

TABLES = ("f11", "f22", "f12")


def n_pairs(V: int) -> int:
    return V * (V - 1) // 2


def pair_topics(V: int) -> tuple[np.ndarray, np.ndarray]:
    """1-based ``(a, b)`` arrays listing every pair ``a < b`` in storage order."""
    a, b = np.triu_indices(V, 1)
    return a + 1, b + 1


def pair_index(a, b, V: int):
    """Storage position of the unordered pair ``{a, b}`` (1-based ids, a != b)."""
    a = np.asarray(a, dtype=np.int64) - 1
    b = np.asarray(b, dtype=np.int64) - 1
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return lo * (2 * V - lo - 1) // 2 + (hi - lo - 1)


def pairs_to_dense(values: np.ndarray, V: int) -> np.ndarray:
    """Symmetric ``V x V`` matrix with zero diagonal from a pair vector."""
    out = np.zeros((V, V), dtype=np.asarray(values).dtype)
    a, b = np.triu_indices(V, 1)
    out[a, b] = values
    out[b, a] = values
    return out


@dataclasses.dataclass
class RawCounts:
    f11: np.ndarray
    f22: np.ndarray
    f12: np.ndarray
    n_users: int
    k: int

    @property
    def taxonomy_size(self) -> int:
        return self.f12.shape[0]


def count_marginals(pop: SequenceDataset, taxonomy_size: int) -> RawCounts:
    """Counts f11, f22 and f12 on the first two weeks of ``pop``."""
    V = taxonomy_size
    if len(pop) and pop.weeks < 2:
        raise ValueError(f"need at least 2 weeks, population has {pop.weeks}")
    k = pop.k
    f11 = np.zeros(n_pairs(V), dtype=np.int64)
    f22 = np.zeros(n_pairs(V), dtype=np.int64)
    f12 = np.zeros(V * V, dtype=np.int64)
    if len(pop):
        w0, w1 = pop.sets[:, 0], pop.sets[:, 1]
        for table, week in ((f11, w0), (f22, w1)):
            for s1, s2 in combinations(range(k), 2):
                a, b = week[:, s1], week[:, s2]
                ok = (a > 0) & (b > 0)
                table += np.bincount(pair_index(a[ok], b[ok], V), minlength=table.size)
        for s1 in range(k):
            for s2 in range(k):
                a, b = w0[:, s1], w1[:, s2]
                ok = (a > 0) & (b > 0)
                f12 += np.bincount(
                    (a[ok].astype(np.int64) - 1) * V + (b[ok] - 1), minlength=f12.size
                )
    return RawCounts(f11, f22, f12.reshape(V, V), len(pop), k)


def l2_sensitivity(which: str, k: int) -> float:
    """Add-one-user l2 sensitivity of a count table for sets of size ``k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if which in ("f11", "f22"):
        return math.sqrt(k * (k - 1) / 2)
    if which == "f12":
        return float(k)
    if which == "n_users":
        return 1.0
    raise ValueError(f"unknown table {which!r}")


# --------------------------------------------------------------------------
# Gaussian mechanism


def gaussian_delta(sigma: float, delta2: float, epsilon: float) -> float:
    """Smallest delta for which N(0, sigma^2) noise on an l2-``delta2`` query is (eps, delta)-DP.

    Computes ``Phi(a) - exp(eps) * Phi(b)`` with ``a = D/2s - eps*s/D`` and
    ``b = -D/2s - eps*s/D`` as ``Phi(a) * (1 - exp(eps + log Phi(b) - log Phi(a)))``.
    """
    if sigma <= 0:
        return 1.0
    ratio = delta2 / sigma
    a = ratio / 2 - epsilon / ratio
    b = -ratio / 2 - epsilon / ratio
    la, lb = float(log_ndtr(a)), float(log_ndtr(b))
    gap = epsilon + lb - la
    if gap >= 0:
        return 0.0
    return math.exp(la) * -math.expm1(gap)


def calibrate_gaussian_sigma(
    delta2: float, epsilon: float, delta: float, rtol: float = 1e-12
) -> float:
    """Smallest sigma meeting the exact Gaussian-mechanism condition, by bisection.

    The returned value always satisfies the condition (it is the upper end of
    the final bracket).
    """
    if delta2 <= 0 or epsilon <= 0 or not 0 < delta <= 1:
        raise ValueError("need delta2 > 0, epsilon > 0 and 0 < delta <= 1")
    if delta >= 1:
        return 0.0
    hi = delta2
    while gaussian_delta(hi, delta2, epsilon) > delta:
        hi *= 2
    lo = hi / 2
    while gaussian_delta(lo, delta2, epsilon) <= delta:
        hi, lo = lo, lo / 2
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if gaussian_delta(mid, delta2, epsilon) <= delta:
            hi = mid
        else:
            lo = mid
    return hi


def classical_gaussian_sigma(delta2: float, epsilon: float, delta: float) -> float:
    """The textbook bound ``sqrt(2 ln(1.25/delta)) * delta2 / epsilon``."""
    return math.sqrt(2 * math.log(1.25 / delta)) * delta2 / epsilon


@dataclasses.dataclass(frozen=True)
class PrivacyParams:
    """Total budget and how it is shared between the releases.

    The user count takes ``count_fraction`` of epsilon and delta (nothing when
    ``public_count``); the remainder is split over f11, f22 and f12 by
    ``split``. Basic composition adds the shares back to the total.
    """

    epsilon: float = math.log(3)
    delta: float = 1e-15
    split: tuple[float, float, float] = (0.25, 0.25, 0.5)
    count_fraction: float = 0.01
    public_count: bool = False

    def __post_init__(self):
        if self.epsilon <= 0 or not 0 < self.delta <= 1:
            raise ValueError("need epsilon > 0 and 0 < delta <= 1")
        if len(self.split) != 3 or min(self.split) <= 0:
            raise ValueError("split needs three positive fractions")
        if abs(sum(self.split) - 1.0) > 1e-12:
            raise ValueError(f"split must sum to 1, got {sum(self.split)}")
        if not 0 < self.count_fraction < 1:
            raise ValueError("count_fraction must lie in (0, 1)")

    def shares(self) -> dict[str, float]:
        """Fraction of (epsilon, delta) given to each release."""
        table_part = 1.0 if self.public_count else 1.0 - self.count_fraction
        out = {name: table_part * f for name, f in zip(TABLES, self.split)}
        if not self.public_count:
            out["n_users"] = self.count_fraction
        return out

    def sigmas(self, k: int) -> dict[str, float]:
        return {
            name: calibrate_gaussian_sigma(
                l2_sensitivity(name, k), share * self.epsilon, share * self.delta
            )
            for name, share in self.shares().items()
        }


@dataclasses.dataclass
class NoisyCounts:
    f11: np.ndarray
    f22: np.ndarray
    f12: np.ndarray
    n_users_dp: float
    k: int
    sigmas: dict[str, float]


def add_gaussian_noise(
    counts: RawCounts,
    params: PrivacyParams,
    rng: np.random.Generator,
    sigmas: dict[str, float] | None = None,
) -> NoisyCounts:
    """Adds i.i.d. Gaussian noise to every count (tables in f11, f22, f12 order).

    ``sigmas`` overrides the calibrated scales; all zeros gives the exact
    counts back, which is only meant for testing.
    """
    if sigmas is None:
        sigmas = params.sigmas(counts.k)
    missing = [t for t in TABLES if t not in sigmas]
    if missing:
        raise ValueError(f"no noise scale for {missing}")
    noisy = {}
    for name in TABLES:
        table = getattr(counts, name).astype(np.float64)
        noisy[name] = table + rng.normal(0.0, 1.0, size=table.shape) * sigmas[name]
    if "n_users" in sigmas:
        n_dp = counts.n_users + rng.normal() * sigmas["n_users"]
    else:
        n_dp = float(counts.n_users)
    return NoisyCounts(noisy["f11"], noisy["f22"], noisy["f12"], float(n_dp), counts.k, dict(sigmas))


# --------------------------------------------------------------------------
# Statistics


@dataclasses.dataclass
class StatisticsBundle:
    """Target statistics ``q_single`` [V], ``q_within`` [pairs] and ``q_across`` [V, V]."""

    q_single: np.ndarray
    q_within: np.ndarray
    q_across: np.ndarray
    k: int
    provenance: dict = dataclasses.field(default_factory=lambda: {"kind": "raw"})

    @property
    def taxonomy_size(self) -> int:
        return self.q_single.shape[0]

    @property
    def is_private(self) -> bool:
        return self.provenance.get("kind") == "dp"

    def within_dense(self) -> np.ndarray:
        return pairs_to_dense(self.q_within, self.taxonomy_size)


def derive_q_single(q_within: np.ndarray, V: int, k: int) -> np.ndarray:
    """``q_single(o) = sum_{o' != o} q_within(o, o') / (k - 1)``."""
    if k < 2:
        raise ValueError("q_single can only be derived from pairs when k >= 2")
    return pairs_to_dense(np.asarray(q_within, dtype=np.float64), V).sum(axis=1) / (k - 1)


def normalize_to_statistics(
    f11: np.ndarray,
    f22: np.ndarray,
    f12: np.ndarray,
    n_users_dp: float,
    k: int,
    provenance: dict | None = None,
) -> StatisticsBundle:
    """Turns (noisy) count tables into probabilities.

    Negative counts are clipped to zero and the results to [0, 1]. The
    function sees only count tables and the released user count.
    """
    if n_users_dp <= 0:
        raise ValueError(f"user count must be positive, got {n_users_dp}")
    V = np.asarray(f12).shape[0]
    q_within = np.clip(np.clip(np.asarray(f11) + np.asarray(f22), 0, None) / (2 * n_users_dp), 0, 1)
    q_across = np.clip(np.clip(np.asarray(f12, dtype=np.float64), 0, None) / n_users_dp, 0, 1)
    q_single = np.clip(derive_q_single(q_within, V, k), 0, 1)
    return StatisticsBundle(
        q_single, q_within.astype(np.float64), q_across, k, dict(provenance or {"kind": "raw"})
    )


def raw_statistics(counts: RawCounts) -> StatisticsBundle:
    """Noiseless statistics; not differentially private."""
    return normalize_to_statistics(
        counts.f11, counts.f22, counts.f12, counts.n_users, counts.k, {"kind": "raw"}
    )


def private_statistics(
    counts: RawCounts, params: PrivacyParams, rng: np.random.Generator, seed: int | None = None
) -> StatisticsBundle:
    noisy = add_gaussian_noise(counts, params, rng)
    n_dp = max(noisy.n_users_dp, 1.0)
    provenance = {
        "kind": "dp",
        "epsilon": params.epsilon,
        "delta": params.delta,
        "split": list(params.split),
        "count_fraction": None if params.public_count else params.count_fraction,
        "sigmas": noisy.sigmas,
        "n_users_dp": n_dp,
        "seed": seed,
    }
    return normalize_to_statistics(noisy.f11, noisy.f22, noisy.f12, n_dp, counts.k, provenance)


SIDECAR = "stats.json"


def write_statistics(out_dir: str | os.PathLike, stats: StatisticsBundle) -> None:
    """Writes q_single.csv, q_within.csv, q_across.csv and a JSON sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    V = stats.taxonomy_size
    with open(os.path.join(out_dir, "q_single.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["topic", "value"])
        for o, v in enumerate(stats.q_single, 1):
            w.writerow([o, repr(float(v))])
    a, b = pair_topics(V)
    with open(os.path.join(out_dir, "q_within.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["topic_a", "topic_b", "value"])
        for x, y, v in zip(a, b, stats.q_within):
            w.writerow([int(x), int(y), repr(float(v))])
    with open(os.path.join(out_dir, "q_across.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["topic_week1", "topic_week2", "value"])
        for x in range(V):
            for y in range(V):
                w.writerow([x + 1, y + 1, repr(float(stats.q_across[x, y]))])
    meta = {"k": stats.k, "taxonomy_size": V, **stats.provenance}
    with open(os.path.join(out_dir, SIDECAR), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_statistics(stats_dir: str | os.PathLike) -> StatisticsBundle:
    with open(os.path.join(stats_dir, SIDECAR)) as fh:
        meta = json.load(fh)
    V, k = int(meta.pop("taxonomy_size")), int(meta.pop("k"))

    def rows(name):
        with open(os.path.join(stats_dir, name), newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            return [r for r in reader]

    q_single = np.zeros(V)
    for o, v in rows("q_single.csv"):
        q_single[int(o) - 1] = float(v)
    q_within = np.zeros(n_pairs(V))
    for x, y, v in rows("q_within.csv"):
        q_within[pair_index(int(x), int(y), V)] = float(v)
    q_across = np.zeros((V, V))
    for x, y, v in rows("q_across.csv"):
        q_across[int(x) - 1, int(y) - 1] = float(v)
    return StatisticsBundle(q_single, q_within, q_across, k, meta)
