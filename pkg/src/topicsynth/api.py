"""Topics API simulation and a synthetic ground-truth population.

``get_topic`` and ``observe_trace`` implement the per-call behaviour of the
API: each (site, week, user) call is seeded independently, returns a random
taxonomy topic with probability ``p`` and otherwise a uniform member of the
user's profile from the previous week.

The population generator is a stand-in for a real browsing log. It is not a
model of real users; it only produces the three effects the trace statistics
are meant to capture: skewed topic popularity (Zipf archetypes over Dirichlet
topic mixtures), within-week co-occurrence (users sharing an archetype), and
week-over-week persistence (per-topic retention).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .core import (
    DEFAULT_TAXONOMY_SIZE,
    GroundTruthPopulation,
    SequenceDataset,
    Taxonomy,
    Trace,
    TopicSetSequence,
    derive_call_seed,
    splitmix64_uniforms,
    splitmix64_uniforms_array,
)


@dataclasses.dataclass(frozen=True)
class ApiConfig:
    """Topics API parameters.

    Attributes:
      taxonomy: The topic taxonomy.
      p: Probability that a call returns a uniformly random topic.
      k: Size of the weekly top topic set.
      r: Number of observed weeks.
    """

    taxonomy: Taxonomy = Taxonomy(DEFAULT_TAXONOMY_SIZE)
    p: float = 0.05
    k: int = 5
    r: int = 4

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.k < 1 or self.r < 1:
            raise ValueError("k and r must be positive")
        if self.k > self.taxonomy.size:
            raise ValueError(f"k={self.k} exceeds taxonomy size {self.taxonomy.size}")


@dataclasses.dataclass(frozen=True)
class PopulationConfig:
    """Knobs of the synthetic ground-truth generator.

    ``weekly_visit_topics`` caps how many topics of a week's set come from the
    user's archetype; the remaining slots are padded with uniform topics, as the
    API does for users with sparse browsing. ``None`` means no cap (``k``).
    """

    n_users: int = 10_000
    n_archetypes: int = 200
    zipf_exponent: float = 1.0
    dirichlet_concentration: float = 0.1
    persistence_rho: float = 0.9
    weekly_visit_topics: int | None = None

    def __post_init__(self):
        if self.n_users < 0:
            raise ValueError("n_users must be non-negative")
        if self.n_archetypes < 1:
            raise ValueError("n_archetypes must be >= 1")
        if not 0.0 <= self.persistence_rho <= 1.0:
            raise ValueError("persistence_rho must lie in [0, 1]")
        if self.dirichlet_concentration <= 0:
            raise ValueError("dirichlet_concentration must be positive")
        if self.weekly_visit_topics is not None and self.weekly_visit_topics < 0:
            raise ValueError("weekly_visit_topics must be non-negative")


def _smallest_k(keys: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Per row, ids (1-based) of the ``counts[row]`` smallest keys, else 0."""
    kmax = int(counts.max(initial=0))
    if kmax == 0:
        return np.zeros((keys.shape[0], 0), dtype=np.int32)
    if kmax < keys.shape[1]:
        order = np.argpartition(keys, kmax - 1, axis=1)[:, :kmax]
    else:
        order = np.tile(np.arange(keys.shape[1]), (keys.shape[0], 1))
    # The partition leaves the first kmax unordered; order them by key.
    part = np.take_along_axis(keys, order, axis=1)
    order = np.take_along_axis(order, np.argsort(part, axis=1, kind="stable"), axis=1)
    picked = order[:, :kmax] + 1
    picked[np.arange(kmax)[None, :] >= counts[:, None]] = 0
    return picked.astype(np.int32)


def generate_population(
    cfg: PopulationConfig,
    api: ApiConfig,
    rng: np.random.Generator,
    chunk: int = 4096,
) -> GroundTruthPopulation:
    """Samples a synthetic population of topic set sequences.

    Each user gets an archetype from a Zipf law; each archetype owns a topic
    distribution drawn once from a symmetric Dirichlet. Week 0 draws ``k``
    distinct topics proportionally to the archetype weights (without
    replacement). Later weeks keep every topic with probability
    ``persistence_rho`` and redraw the rest from the archetype, excluding the
    kept ones.
    """
    V, k, r = api.taxonomy.size, api.k, api.r
    visit_cap = k if cfg.weekly_visit_topics is None else min(cfg.weekly_visit_topics, k)

    ranks = np.arange(1, cfg.n_archetypes + 1, dtype=np.float64)
    arch_p = ranks ** -cfg.zipf_exponent
    arch_p /= arch_p.sum()
    gam = rng.standard_gamma(cfg.dirichlet_concentration, size=(cfg.n_archetypes, V))
    gam = np.maximum(gam, 1e-300)
    arch_topics = gam / gam.sum(axis=1, keepdims=True)
    archetype = rng.choice(cfg.n_archetypes, size=cfg.n_users, p=arch_p)

    sets = np.zeros((cfg.n_users, r, k), dtype=np.int32)
    for start in range(0, cfg.n_users, chunk):
        a = archetype[start:start + chunk]
        w = arch_topics[a]
        c = a.size
        current = np.zeros((c, k), dtype=np.int32)
        for week in range(r):
            if week == 0:
                kept = np.zeros((c, k), dtype=bool)
            else:
                kept = (rng.random((c, k)) < cfg.persistence_rho) & (current > 0)
            n_kept = kept.sum(axis=1)
            n_visit = np.clip(visit_cap - n_kept, 0, None)
            n_pad = k - n_kept - n_visit

            excluded = np.zeros((c, V + 1), dtype=bool)
            np.put_along_axis(excluded, np.where(kept, current, 0), True, axis=1)
            excluded[:, 0] = True
            # Exponential keys scaled by weight: smallest-first order is a
            # weighted draw without replacement.
            visit_keys = rng.exponential(size=(c, V)) / w
            visit_keys[excluded[:, 1:]] = np.inf
            visited = _smallest_k(visit_keys, n_visit)

            np.put_along_axis(excluded, visited, True, axis=1)
            excluded[:, 0] = True
            pad_keys = rng.random((c, V))
            pad_keys[excluded[:, 1:]] = np.inf
            padded = _smallest_k(pad_keys, n_pad)

            new = np.concatenate([np.where(kept, current, 0), visited, padded], axis=1)
            new = np.sort(new, axis=1)[:, -k:]
            current = new
            sets[start:start + chunk, week] = new
    users = [f"u{j}" for j in range(cfg.n_users)]
    return GroundTruthPopulation(users, sets)


# --------------------------------------------------------------------------
# The API itself


def _draw(u_coin: float, u_pick: float, profile: np.ndarray, p: float, V: int) -> int:
    if u_coin < p:
        return 1 + int(u_pick * V)
    return int(profile[int(u_pick * profile.size)])


def get_topic(profile, site, week: int, user, cfg: ApiConfig, salt: object = b"") -> int:
    """One GetTopic() call by ``site`` in ``week`` for ``user``.

    The call is a pure function of its arguments: the first two SplitMix64
    uniforms of the (site, week, user) seed decide the coin and the pick.
    """
    prof = np.sort(np.asarray(sorted(set(int(t) for t in profile)), dtype=np.int64))
    if prof.size != cfg.k:
        raise ValueError(f"profile has {prof.size} topics, expected k={cfg.k}")
    cfg.taxonomy.check(prof)
    u_coin, u_pick = splitmix64_uniforms(derive_call_seed(site, week, user, salt), 2)
    return _draw(u_coin, u_pick, prof, cfg.p, cfg.taxonomy.size)


def observe_trace(seq: TopicSetSequence, site, cfg: ApiConfig, salt: object = b"") -> Trace:
    """The trace ``site`` sees for one user: week ``i`` uses profile ``S_{i-1}``."""
    if not seq.sets:
        raise ValueError("empty topic set sequence")
    outputs = tuple(
        get_topic(profile, site, i, seq.user, cfg, salt)
        for i, profile in enumerate(seq.sets, start=1)
    )
    return Trace(seq.user, str(site), outputs)


def observe_traces(
    dataset: SequenceDataset, site, cfg: ApiConfig, salt: object = b""
) -> np.ndarray:
    """Bulk ``observe_trace`` for a whole dataset; returns outputs ``[n, r]``.

    All profiles must already be padded to ``k`` topics. Results agree
    call-by-call with ``get_topic``.
    """
    sets = dataset.sets
    n, r, k = sets.shape
    if k != cfg.k:
        raise ValueError(f"dataset has k={k}, config has k={cfg.k}")
    if n and (sets == 0).any():
        raise ValueError("profiles must be padded to k topics before observation")
    seeds = np.array(
        [[derive_call_seed(site, i, u, salt) for i in range(1, r + 1)] for u in dataset.users],
        dtype=np.uint64,
    ).reshape(n, r)
    u = splitmix64_uniforms_array(seeds, 2)
    heads = u[..., 0] < cfg.p
    noise = 1 + (u[..., 1] * cfg.taxonomy.size).astype(np.int64)
    slot = (u[..., 1] * k).astype(np.int64)
    picked = np.take_along_axis(sets, slot[..., None], axis=2)[..., 0]
    return np.where(heads, noise, picked).astype(np.int32)


def trace_distribution(seq: TopicSetSequence, cfg: ApiConfig) -> np.ndarray:
    """Exact output distribution per week, shape ``[r, |T|]`` (column j-1 = topic j)."""
    V = cfg.taxonomy.size
    out = np.full((len(seq.sets), V), cfg.p / V)
    for i, profile in enumerate(seq.sets):
        prof = sorted(set(int(t) for t in profile))
        if len(prof) != cfg.k:
            raise ValueError(f"profile has {len(prof)} topics, expected k={cfg.k}")
        cfg.taxonomy.check(prof)
        out[i, np.asarray(prof) - 1] += (1.0 - cfg.p) / cfg.k
    return out
