"""Cross-site re-identification game and the two linkage attacks.

The adversary holds a table of traces observed on site ``w1`` for every user.
A user is drawn uniformly at random and observed on site ``w2``; the attack
predicts which table row produced the query. The Hamming attack minimizes the
number of mismatched weeks, the asymmetric attack minimizes a sum of learned
per-(topic on w1, topic on w2) costs. Ties are broken uniformly at random.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from .api import ApiConfig, observe_traces
from .core import SequenceDataset, Taxonomy, Trace, child_seed, make_rng, pad_sets_array

ATTACKS = ("hamming", "asymmetric")


def _outputs(trace) -> tuple[int, ...]:
    return tuple(trace.outputs) if isinstance(trace, Trace) else tuple(int(t) for t in trace)


def hamming_distance(a, b) -> int:
    """Number of weeks on which two traces disagree."""
    a, b = _outputs(a), _outputs(b)
    if len(a) != len(b):
        raise ValueError(f"trace lengths differ: {len(a)} vs {len(b)}")
    return sum(x != y for x, y in zip(a, b))


@dataclasses.dataclass(frozen=True)
class AttackTable:
    """The adversary's view of site ``w1``: one trace per user.

    ``outputs`` is an ``[n, r]`` integer array; row ``j`` belongs to ``users[j]``.
    """

    users: tuple[str, ...]
    outputs: np.ndarray

    def __post_init__(self):
        out = np.asarray(self.outputs, dtype=np.int32)
        if out.ndim != 2 or out.shape[0] != len(self.users):
            raise ValueError("outputs must be [n, r] with one row per user")
        if len(set(self.users)) != len(self.users):
            raise ValueError("user ids in an attack table must be unique")
        out.setflags(write=False)
        object.__setattr__(self, "users", tuple(self.users))
        object.__setattr__(self, "outputs", out)

    @classmethod
    def from_traces(cls, traces: Sequence[Trace]) -> "AttackTable":
        traces = list(traces)
        r = {len(t.outputs) for t in traces}
        if len(r) > 1:
            raise ValueError(f"traces of different lengths {sorted(r)}")
        outputs = np.array([t.outputs for t in traces], dtype=np.int32).reshape(len(traces), -1)
        return cls(tuple(t.user for t in traces), outputs)

    def __len__(self) -> int:
        return len(self.users)

    @property
    def weeks(self) -> int:
        return self.outputs.shape[1]


def _pick(scores: np.ndarray, rng: np.random.Generator) -> int:
    ties = np.flatnonzero(scores == scores.min())
    return int(ties[0]) if ties.size == 1 else int(rng.choice(ties))


def _check_query(table: AttackTable, o) -> np.ndarray:
    if len(table) == 0:
        raise ValueError("empty attack table")
    q = np.asarray(_outputs(o), dtype=np.int32)
    if q.size != table.weeks:
        raise ValueError(f"query has {q.size} weeks, table has {table.weeks}")
    return q


def hamming_scores(table: AttackTable, o) -> np.ndarray:
    q = _check_query(table, o)
    return (table.outputs != q[None, :]).sum(axis=1)


def hamming_attack(table: AttackTable, o, rng: np.random.Generator) -> str:
    """User id of a row at minimum Hamming distance from ``o``."""
    return table.users[_pick(hamming_scores(table, o), rng)]


def learn_asymmetric_weights(
    training_pairs, taxonomy: Taxonomy | int, alpha: float = 1.0
) -> np.ndarray:
    """Smoothed negative log conditional frequencies of (topic on w1, topic on w2).

    ``w[a-1, b-1] = -log((C[a, b] + alpha) / (sum_b' C[a, b'] + alpha * V))``,
    where ``C`` counts the training pairs.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    V = taxonomy.size if isinstance(taxonomy, Taxonomy) else int(taxonomy)
    pairs = np.asarray(training_pairs, dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        raise ValueError("no training pairs")
    if pairs.min() < 1 or pairs.max() > V:
        raise ValueError(f"training pair topic outside [1, {V}]")
    C = np.bincount((pairs[:, 0] - 1) * V + pairs[:, 1] - 1, minlength=V * V).reshape(V, V)
    C = C.astype(np.float64)
    return -np.log((C + alpha) / (C.sum(axis=1, keepdims=True) + alpha * V))


def asymmetric_scores(table: AttackTable, o, weights: np.ndarray) -> np.ndarray:
    q = _check_query(table, o)
    w = np.asarray(weights, dtype=np.float64)
    V = w.shape[0]
    if w.shape != (V, V) or table.outputs.max(initial=1) > V or q.max(initial=1) > V:
        raise ValueError("weights do not cover the taxonomy")
    score = np.zeros(len(table))
    for i, b in enumerate(q):
        score += w[table.outputs[:, i] - 1, b - 1]
    return score


def asymmetric_attack(table: AttackTable, o, weights: np.ndarray, rng: np.random.Generator) -> str:
    """User id of a row minimizing ``sum_i w[o_i(row), o_i(query)]``."""
    return table.users[_pick(asymmetric_scores(table, o, weights), rng)]


def attack_rows(
    table: AttackTable,
    queries: np.ndarray,
    seed: int,
    weights: np.ndarray | None = None,
    chunk: int = 32,
    jobs: int = 1,
) -> np.ndarray:
    """Predicted row index for every query trace (vectorized over chunks of queries).

    Each chunk draws its tie breaks from its own child seed, so the result does
    not depend on ``jobs``.
    """
    if len(table) == 0:
        raise ValueError("empty attack table")
    queries = np.asarray(queries, dtype=np.int32).reshape(-1, table.weeks)
    T = table.outputs
    if weights is not None:
        # Column gathers: cost of every table row against every possible query topic.
        wT = np.ascontiguousarray(np.asarray(weights, dtype=np.float64).T)

    def run(start: int) -> np.ndarray:
        q = queries[start:start + chunk]
        rng = make_rng(child_seed(seed, "attack-chunk", start))
        if weights is None:
            scores = np.zeros((q.shape[0], len(table)), dtype=np.int32)
            for i in range(table.weeks):
                scores += T[None, :, i] != q[:, i, None]
        else:
            scores = np.zeros((q.shape[0], len(table)))
            for i in range(table.weeks):
                scores += wT[q[:, i] - 1][:, T[:, i] - 1]
        return np.array([_pick(row, rng) for row in scores], dtype=np.int64)

    starts = range(0, queries.shape[0], chunk)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


@dataclasses.dataclass
class ReidReport:
    """Per-trial correct-identification rates of one attack."""

    attack: str
    population: int
    weeks: int
    trials: list[float]
    mean: float
    std: float
    queries: int

    @classmethod
    def from_trials(cls, attack: str, population: int, weeks: int, rates, queries: int):
        rates = [float(x) for x in rates]
        std = float(np.std(rates, ddof=1)) if len(rates) > 1 else 0.0
        return cls(attack, population, weeks, rates, float(np.mean(rates)), std, queries)

    @property
    def standard_error(self) -> float:
        """Binomial standard error of the mean rate, pooled over all queries."""
        n = self.queries * len(self.trials)
        return float(np.sqrt(max(self.mean * (1 - self.mean), 0.0) / n)) if n else 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def measure_reid_risk(
    population: SequenceDataset,
    cfg: ApiConfig,
    attack: str,
    n_queries: int = 10240,
    n_trials: int = 10,
    seed: int = 0,
    alpha: float = 1.0,
    holdout_frac: float = 0.1,
    sites: tuple[str, str] = ("w1", "w2"),
    jobs: int = 1,
) -> ReidReport:
    """Monte-Carlo estimate of the re-identification risk of ``attack``.

    Every trial pads undersized sets to ``k``, splits off a holdout of
    ``holdout_frac`` of the users (weights for the asymmetric attack are
    learned on it, never on the table), builds the table from site
    ``sites[0]`` for the remaining users and scores ``n_queries`` uniformly
    drawn users observed on ``sites[1]``. API calls are salted with the trial
    index, so trials use independent API randomness.

    The split only depends on ``seed`` and the trial index, so both attacks
    run on the same table for the same seed.
    """
    if attack not in ATTACKS:
        raise ValueError(f"unknown attack {attack!r}; expected one of {ATTACKS}")
    n = len(population)
    if n < 1:
        raise ValueError("empty population")
    if n < 2 and attack == "asymmetric":
        raise ValueError("the asymmetric attack needs at least 2 users (holdout and table)")
    if not 0 <= holdout_frac < 1:
        raise ValueError("holdout_frac must lie in [0, 1)")
    if attack == "asymmetric" and holdout_frac == 0:
        raise ValueError("the asymmetric attack needs a holdout to learn weights")
    if population.weeks != cfg.r:
        population = population.first_weeks(cfg.r)
    V = cfg.taxonomy.size
    n_hold = 0 if n < 2 else min(n - 1, max(1 if holdout_frac > 0 else 0, round(holdout_frac * n)))

    rates = []
    for trial in range(n_trials):
        rng = make_rng(child_seed(seed, "trial", trial))
        sets = pad_sets_array(population.sets, V, rng)
        padded = SequenceDataset(population.users, sets)
        order = rng.permutation(n)
        hold, table_rows = order[:n_hold], np.sort(order[n_hold:])
        salt = f"trial{trial}"
        table_ds = padded.subset(table_rows)
        table = AttackTable(tuple(table_ds.users), observe_traces(table_ds, sites[0], cfg, salt))
        weights = None
        if attack == "asymmetric":
            hold_ds = padded.subset(hold)
            a = observe_traces(hold_ds, sites[0], cfg, salt)
            b = observe_traces(hold_ds, sites[1], cfg, salt)
            weights = learn_asymmetric_weights(np.stack([a.ravel(), b.ravel()], axis=1), V, alpha)
        truth = rng.integers(len(table), size=n_queries)
        q_users = np.unique(truth)
        q_out = observe_traces(table_ds.subset(q_users), sites[1], cfg, salt)
        queries = q_out[np.searchsorted(q_users, truth)]
        pred = attack_rows(table, queries, child_seed(seed, "ties", trial), weights, jobs=jobs)
        rates.append(float(np.mean(pred == truth)) if n_queries else 0.0)
    return ReidReport.from_trials(attack, n - n_hold, cfg.r, rates, n_queries)
