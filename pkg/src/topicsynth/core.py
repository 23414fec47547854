"""Topic taxonomy, set/trace value types and seeded randomness.

Topic ids are 1-based and dense. Inside arrays, ``0`` marks an empty slot of a
topic set that holds fewer than ``k`` topics.

Randomness comes from two sources, both portable and documented:

* ``make_rng(seed)`` returns a ``numpy.random.Generator`` backed by PCG64.
  It drives every bulk sampling step (population generation, noise, model
  sampling, shuffling, tie breaking).
* Per-call Topics API draws are seeded from a BLAKE2b hash of the
  (site, week, user) triple and expanded with SplitMix64, so that a single
  call can be replayed without materializing a generator object.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
from typing import Iterable, Iterator, Sequence

import numpy as np

DEFAULT_TAXONOMY_SIZE = 469

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_TWO_M53 = 1.0 / (1 << 53)


class TaxonomyError(ValueError):
    """Raised for malformed taxonomy files or invalid topic ids."""


@dataclasses.dataclass(frozen=True)
class Taxonomy:
    """A topic taxonomy with dense ids ``1..size``.

    Attributes:
      size: Number of topics.
      names: Optional display names, ``names[j - 1]`` belongs to topic ``j``.
    """

    size: int
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.size < 2:
            raise TaxonomyError(f"taxonomy size must be >= 2, got {self.size}")
        if self.names is not None and len(self.names) != self.size:
            raise TaxonomyError(
                f"taxonomy has {len(self.names)} names for {self.size} topics"
            )

    @property
    def ids(self) -> range:
        return range(1, self.size + 1)

    def check(self, topics: Iterable[int]) -> None:
        for t in topics:
            if not 1 <= int(t) <= self.size:
                raise TaxonomyError(f"topic id {t} outside [1, {self.size}]")


def load_taxonomy(path: str | os.PathLike) -> Taxonomy:
    """Reads a taxonomy file.

    The file is either a single integer (the taxonomy size) or one topic per
    line as ``id<TAB>name`` (the name is optional). Ids must be exactly
    ``1..n`` with no gaps or repeats; line order does not matter.
    """
    with open(path, encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh if ln.strip()]
    if not lines:
        raise TaxonomyError(f"{path}: empty taxonomy file")
    if len(lines) == 1 and "\t" not in lines[0]:
        try:
            return Taxonomy(size=int(lines[0].strip()))
        except ValueError as exc:
            raise TaxonomyError(f"{path}: expected an integer size") from exc

    entries: dict[int, str] = {}
    for lineno, line in enumerate(lines, 1):
        head, _, name = line.partition("\t")
        try:
            tid = int(head.strip())
        except ValueError as exc:
            raise TaxonomyError(f"{path}:{lineno}: bad topic id {head!r}") from exc
        if tid in entries:
            raise TaxonomyError(f"{path}:{lineno}: duplicate topic id {tid}")
        entries[tid] = name.strip()
    n = len(entries)
    if sorted(entries) != list(range(1, n + 1)):
        raise TaxonomyError(f"{path}: topic ids are not dense 1..{n}")
    return Taxonomy(size=n, names=tuple(entries[i] for i in range(1, n + 1)))


@dataclasses.dataclass(frozen=True)
class TopicSetSequence:
    """One user's weekly top topic sets ``S_0 .. S_{r-1}`` (sorted tuples)."""

    user: str
    sets: tuple[tuple[int, ...], ...]

    @property
    def weeks(self) -> int:
        return len(self.sets)


@dataclasses.dataclass(frozen=True)
class Trace:
    """The per-week API outputs one site observes for one user."""

    user: str
    site: str
    outputs: tuple[int, ...]


# --------------------------------------------------------------------------
# Randomness


def make_rng(seed: int) -> np.random.Generator:
    """The generator used for all bulk sampling: PCG64 seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(int(seed) & _MASK64))


def _hash64(*parts: object) -> int:
    h = hashlib.blake2b(digest_size=8, person=b"topicsynth")
    for part in parts:
        data = part if isinstance(part, bytes) else str(part).encode("utf-8")
        # Length prefix keeps ("ab", "c") and ("a", "bc") apart.
        h.update(struct.pack("<Q", len(data)))
        h.update(data)
    return int.from_bytes(h.digest(), "little")


def child_seed(seed: int, *labels: object) -> int:
    """Derives an independent 64-bit seed from a parent seed and labels."""
    return _hash64(b"child", int(seed) & _MASK64, *labels)


def derive_call_seed(site: object, week: int, user: object, salt: object = b"") -> int:
    """Seed for one GetTopic call, a BLAKE2b-64 hash of (site, week, user).

    ``salt`` is an extra key (empty by default) that lets experiment harnesses
    run independent replicas of the same (site, week, user) calls.
    """
    return _hash64(b"call", salt, site, int(week), user)


def splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns ``(new_state, output)``."""
    state = (state + _GOLDEN) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
    return state, z ^ (z >> 31)


def splitmix64_uniforms(seed: int, n: int) -> list[float]:
    """The first ``n`` doubles in [0, 1) of the SplitMix64 stream at ``seed``."""
    out = []
    state = seed & _MASK64
    for _ in range(n):
        state, z = splitmix64(state)
        out.append((z >> 11) * _TWO_M53)
    return out


def splitmix64_uniforms_array(seeds: np.ndarray, n: int) -> np.ndarray:
    """Vectorized ``splitmix64_uniforms``; returns shape ``seeds.shape + (n,)``."""
    state = np.asarray(seeds, dtype=np.uint64).copy()
    out = np.empty(state.shape + (n,), dtype=np.float64)
    with np.errstate(over="ignore"):
        for j in range(n):
            state += np.uint64(_GOLDEN)
            z = state.copy()
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
            z ^= z >> np.uint64(31)
            out[..., j] = (z >> np.uint64(11)).astype(np.float64) * _TWO_M53
    return out


# --------------------------------------------------------------------------
# Topic sets


def pad_topic_set(
    partial: Iterable[int], k: int, taxonomy: Taxonomy, rng: np.random.Generator
) -> tuple[int, ...]:
    """Pads a topic set to exactly ``k`` distinct topics.

    Missing topics are drawn uniformly without replacement from the topics not
    already in ``partial``.
    """
    members = sorted(set(int(t) for t in partial))
    taxonomy.check(members)
    if len(members) > k:
        raise ValueError(f"set of size {len(members)} exceeds capacity {k}")
    if k > taxonomy.size:
        raise ValueError(f"k={k} exceeds taxonomy size {taxonomy.size}")
    missing = k - len(members)
    if missing == 0:
        return tuple(members)
    pool = np.setdiff1d(np.arange(1, taxonomy.size + 1), members)
    extra = rng.choice(pool, size=missing, replace=False)
    return tuple(sorted(members + [int(x) for x in extra]))


def pad_sets_array(
    sets: np.ndarray, taxonomy_size: int, rng: np.random.Generator, chunk: int = 8192
) -> np.ndarray:
    """Bulk version of ``pad_topic_set`` over an ``[n, r, k]`` array.

    Zeros are empty slots. Each row is completed by random-key selection,
    which draws uniformly without replacement from the absent topics.
    """
    sets = np.asarray(sets)
    n, r, k = sets.shape
    out = np.sort(sets, axis=-1)
    need = (out == 0).any(axis=-1)
    rows = np.flatnonzero(need.reshape(-1))
    flat = out.reshape(n * r, k)
    for start in range(0, rows.size, chunk):
        idx = rows[start:start + chunk]
        cur = flat[idx]
        keys = rng.random((idx.size, taxonomy_size + 1))
        keys[:, 0] = np.inf
        np.put_along_axis(keys, cur, np.inf, axis=1)
        order = np.argsort(keys, axis=1, kind="stable")[:, :k]
        # Zeros lead each sorted row, so slot j < m takes the j-th smallest key.
        filled = np.where(cur == 0, order, cur)
        flat[idx] = np.sort(filled, axis=1)
    return flat.reshape(n, r, k)


# --------------------------------------------------------------------------
# Datasets and file formats


class SequenceDataset:
    """Topic set sequences for many users, stored as an ``[n, r, k]`` array.

    Args:
      users: One identifier per row.
      sets: Integer array of topic ids; ``0`` marks an empty slot. Each row
        is kept sorted with the zeros first.
    """

    def __init__(self, users: Sequence[str], sets: np.ndarray):
        sets = np.asarray(sets, dtype=np.int32)
        if sets.ndim != 3:
            raise ValueError(f"sets must be [n, r, k], got shape {sets.shape}")
        if len(users) != sets.shape[0]:
            raise ValueError("users and sets disagree on the number of rows")
        self.users = [str(u) for u in users]
        self.sets = np.sort(sets, axis=-1)

    def __len__(self) -> int:
        return self.sets.shape[0]

    @property
    def weeks(self) -> int:
        return self.sets.shape[1]

    @property
    def k(self) -> int:
        return self.sets.shape[2]

    def subset(self, rows) -> "SequenceDataset":
        rows = np.asarray(rows)
        return type(self)([self.users[i] for i in rows], self.sets[rows])

    def first_weeks(self, weeks: int) -> "SequenceDataset":
        if weeks > self.weeks:
            raise ValueError(f"dataset has {self.weeks} weeks, asked for {weeks}")
        return type(self)(self.users, self.sets[:, :weeks])

    def sequences(self) -> Iterator[TopicSetSequence]:
        for user, row in zip(self.users, self.sets):
            yield TopicSetSequence(
                user, tuple(tuple(int(t) for t in week if t) for week in row)
            )

    @classmethod
    def from_sequences(cls, seqs: Iterable[TopicSetSequence], k: int | None = None):
        seqs = list(seqs)
        if not seqs:
            return cls([], np.zeros((0, 0, k or 0), dtype=np.int32))
        r = seqs[0].weeks
        if k is None:
            k = max(len(s) for q in seqs for s in q.sets)
        arr = np.zeros((len(seqs), r, k), dtype=np.int32)
        for n, seq in enumerate(seqs):
            if seq.weeks != r:
                raise ValueError(f"user {seq.user}: {seq.weeks} weeks, expected {r}")
            for i, s in enumerate(seq.sets):
                if len(set(s)) != len(s) or len(s) > k:
                    raise ValueError(f"user {seq.user}: malformed set {s}")
                arr[n, i, k - len(s):] = sorted(s)
        return cls([q.user for q in seqs], arr)


class GroundTruthPopulation(SequenceDataset):
    """The private source population. Only the DP statistics stage reads it."""


def write_sequences(path: str | os.PathLike, dataset: SequenceDataset) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in dataset.sequences():
            fh.write(json.dumps({"user": seq.user, "sets": [list(s) for s in seq.sets]}))
            fh.write("\n")


def read_sequences(
    path: str | os.PathLike, k: int | None = None, cls: type = SequenceDataset
) -> SequenceDataset:
    seqs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                seqs.append(
                    TopicSetSequence(
                        str(obj["user"]), tuple(tuple(int(t) for t in s) for s in obj["sets"])
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad sequence record") from exc
    return cls.from_sequences(seqs, k=k)


def write_traces(path: str | os.PathLike, traces: Iterable[Trace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tr in traces:
            fh.write(
                json.dumps({"user": tr.user, "site": tr.site, "outputs": list(tr.outputs)})
            )
            fh.write("\n")


def read_traces(path: str | os.PathLike) -> list[Trace]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                out.append(
                    Trace(str(obj["user"]), str(obj["site"]), tuple(int(t) for t in obj["outputs"]))
                )
    return out
