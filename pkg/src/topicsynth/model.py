"""Mixture-of-types distribution over topic set sequences.

The parameters are a logit tensor ``theta`` of shape ``[T, r, k, V]``: ``T``
types, ``r`` weeks, ``k`` slots per week, ``V`` topics. A user is sampled by
picking a type uniformly, drawing one topic per slot from the slot's softmax
and keeping the set of distinct topics of every week.

All marginal statistics have closed forms built from the survival function

    N(t, i, A) = prod_s (1 - sum_{x in A} P[t, i, s, x]),

the probability that week ``i`` of type ``t`` contains none of the topics in
``A``. Weeks are 0-based, topic ids 1-based.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os

import numpy as np

from .core import SequenceDataset, TopicSetSequence

CHECKPOINT_FORMAT = "topicsynth-model"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A model file whose header and payload disagree."""


def softmax_slots(theta: np.ndarray) -> np.ndarray:
    """Per-slot softmax over the topic axis, stabilized by the slot maximum."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta has non-finite entries")
    z = np.exp(theta - theta.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _topic_index(o, V: int) -> int:
    o = int(o)
    if not 1 <= o <= V:
        raise ValueError(f"topic id {o} outside [1, {V}]")
    return o - 1


def _check_week(i, r: int) -> int:
    i = int(i)
    if not 0 <= i < r:
        raise ValueError(f"week {i} outside [0, {r})")
    return i


def survival(theta: np.ndarray, t: int, i: int, A) -> float:
    """Probability that week ``i`` of type ``t`` contains no topic of ``A``."""
    P = softmax_slots(theta)
    T, r, k, V = P.shape
    idx = [_topic_index(o, V) for o in set(A)]
    if not 0 <= t < T:
        raise ValueError(f"type {t} outside [0, {T})")
    i = _check_week(i, r)
    mass = P[t, i][:, idx].sum(axis=1) if idx else np.zeros(k)
    return float(np.prod(np.clip(1.0 - mass, 0.0, 1.0)))


def _inclusion(P: np.ndarray, i: int, o: int) -> np.ndarray:
    """Per type, ``1 - N(t, i, {o})``."""
    return 1.0 - np.prod(1.0 - P[:, i, :, o], axis=1)


def q_single_model(theta: np.ndarray, i: int, o: int) -> float:
    """``Pr(o in S_i)``."""
    P = softmax_slots(theta)
    i = _check_week(i, P.shape[1])
    return float(_inclusion(P, i, _topic_index(o, P.shape[3])).mean())


def q_within_model(theta: np.ndarray, i: int, o1: int, o2: int) -> float:
    """``Pr({o1, o2} subset of S_i)`` by inclusion-exclusion over survival terms."""
    if int(o1) == int(o2):
        raise ValueError("q_within needs distinct topics; use q_single_model")
    P = softmax_slots(theta)
    V = P.shape[3]
    i = _check_week(i, P.shape[1])
    a, b = _topic_index(o1, V), _topic_index(o2, V)
    n1 = np.prod(1.0 - P[:, i, :, a], axis=1)
    n2 = np.prod(1.0 - P[:, i, :, b], axis=1)
    n12 = np.prod(np.clip(1.0 - P[:, i, :, a] - P[:, i, :, b], 0.0, 1.0), axis=1)
    return float((1.0 - n1 - n2 + n12).mean())


def q_across_model(theta: np.ndarray, i1: int, i2: int, o1: int, o2: int) -> float:
    """``Pr(o1 in S_i1 and o2 in S_i2)`` for distinct weeks; independent given the type."""
    if int(i1) == int(i2):
        raise ValueError("q_across needs distinct weeks")
    P = softmax_slots(theta)
    T, r, k, V = P.shape
    i1, i2 = _check_week(i1, r), _check_week(i2, r)
    a = _inclusion(P, i1, _topic_index(o1, V))
    b = _inclusion(P, i2, _topic_index(o2, V))
    return float((a * b).mean())


def model_statistics(theta: np.ndarray, pair_chunk: int = 4096) -> dict[str, np.ndarray]:
    """All closed-form statistics of the model at once.

    Returns ``single`` [r, V], ``within`` [r, V(V-1)/2] in
    ``triu_indices(V, 1)`` order and ``across`` [r-1, V, V] for consecutive
    week pairs (i, i+1).
    """
    P = softmax_slots(theta)
    T, r, k, V = P.shape
    incl = 1.0 - np.prod(1.0 - P, axis=2)  # [T, r, V]
    single = incl.mean(axis=0)
    a, b = np.triu_indices(V, 1)
    within = np.empty((r, a.size))
    for i in range(r):
        N1 = 1.0 - incl[:, i]  # [T, V]
        for start in range(0, a.size, pair_chunk):
            aa, bb = a[start:start + pair_chunk], b[start:start + pair_chunk]
            Pa, Pb = P[:, i][:, :, aa], P[:, i][:, :, bb]  # [T, k, c]
            n12 = np.prod(np.clip(1.0 - Pa - Pb, 0.0, 1.0), axis=1)
            within[i, start:start + aa.size] = (1.0 - N1[:, aa] - N1[:, bb] + n12).mean(axis=0)
    if r > 1:
        across = np.stack([incl[:, i].T @ incl[:, i + 1] / T for i in range(r - 1)])
    else:
        across = np.zeros((0, V, V))
    return {"single": single, "within": within, "across": across}


# --------------------------------------------------------------------------
# Sampling


def _dedupe_weeks(x: np.ndarray) -> np.ndarray:
    """Replaces repeated topics inside each week's slots by 0, zeros first."""
    x = np.sort(x, axis=-1)
    dup = np.zeros_like(x, dtype=bool)
    dup[..., 1:] = x[..., 1:] == x[..., :-1]
    x = np.where(dup, 0, x)
    return np.sort(x, axis=-1)


def sample_sequence(theta: np.ndarray, rng: np.random.Generator, user: str = "s0") -> TopicSetSequence:
    """Draws one topic set sequence: a uniform type, one topic per slot, set semantics per week."""
    P = softmax_slots(theta)
    T, r, k, V = P.shape
    t = int(rng.integers(T))
    sets = []
    for i in range(r):
        picks = {int(rng.choice(V, p=P[t, i, s])) + 1 for s in range(k)}
        sets.append(tuple(sorted(picks)))
    return TopicSetSequence(user, tuple(sets))


def sample_dataset(
    theta: np.ndarray, n: int, rng: np.random.Generator, prefix: str = "s"
) -> SequenceDataset:
    """Draws ``n`` i.i.d. users. Undersized weeks keep zeros (no padding here)."""
    P = softmax_slots(theta)
    T, r, k, V = P.shape
    cdf = np.cumsum(P, axis=-1)
    cdf[..., -1] = 1.0
    out = np.zeros((n, r, k), dtype=np.int32)
    chunk = max(1, 4_000_000 // (r * k * V))
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        types = rng.integers(T, size=m)
        u = rng.random((m, r, k))
        x = (u[..., None] >= cdf[types]).sum(axis=-1) + 1
        out[start:start + m] = _dedupe_weeks(np.minimum(x, V))
    return SequenceDataset([f"{prefix}{j}" for j in range(n)], out)


# --------------------------------------------------------------------------
# Checkpoints


@dataclasses.dataclass
class ModelParams:
    """Logits plus the metadata stored alongside them in a checkpoint."""

    theta: np.ndarray
    seed: int | None = None
    meta: dict = dataclasses.field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.theta.shape)

    @property
    def num_types(self) -> int:
        return self.theta.shape[0]

    @property
    def weeks(self) -> int:
        return self.theta.shape[1]

    @property
    def k(self) -> int:
        return self.theta.shape[2]

    @property
    def taxonomy_size(self) -> int:
        return self.theta.shape[3]


def save_model(path: str | os.PathLike, params: ModelParams) -> None:
    """One JSON header line, then the logits as little-endian float64 in C order."""
    payload = np.ascontiguousarray(params.theta, dtype="<f8").tobytes()
    T, r, k, V = params.shape
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "T": T,
        "r": r,
        "k": k,
        "taxonomy_size": V,
        "seed": params.seed,
        "dtype": "<f8",
        "sha256": hashlib.sha256(payload).hexdigest(),
        "meta": params.meta,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def load_model(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as fh:
        line = fh.readline()
        payload = fh.read()
    try:
        header = json.loads(line)
    except ValueError as exc:
        raise CheckpointError(f"{path}: missing JSON header") from exc
    if not isinstance(header, dict) or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a model checkpoint")
    try:
        shape = tuple(int(header[key]) for key in ("T", "r", "k", "taxonomy_size"))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: incomplete header") from exc
    if len(payload) != 8 * int(np.prod(shape)):
        raise CheckpointError(
            f"{path}: payload holds {len(payload) // 8} floats, header declares shape {shape}"
        )
    if header.get("sha256") and hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload digest mismatch")
    theta = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return ModelParams(theta, header.get("seed"), header.get("meta") or {})
