"""Objective over marginal statistics and its minibatch Adam optimizer.

The objective is the mean squared difference between model statistics and the
targets over three term families:

* ``single``: every week ``i`` and topic ``o``;
* ``within``: every week ``i`` and pair ``o1 < o2``;
* ``across``: every consecutive pair of weeks ``(i, i + 1)`` and ordered
  topic pair ``(o1, o2)``.

The same week-averaged target is imposed on every week (or week pair).

Gradients are analytic. For a batch the derivative with respect to the slot
probabilities is assembled from exclusive products of the survival factors
(the product over all slots but one) and pushed back through the softmax with
``dtheta = P * (g - <g, P>)``.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time

import numpy as np

from .core import make_rng
from .dp_stats import StatisticsBundle, n_pairs, pair_topics
from .model import ModelParams, softmax_slots

logger = logging.getLogger(__name__)

SINGLE, WITHIN, ACROSS = 0, 1, 2
KIND_NAMES = ("single", "within", "across")

# Caps B * T * k elements per gathered block.
_BLOCK_ELEMS = 2_000_000


class TrainingDiverged(RuntimeError):
    pass


@dataclasses.dataclass
class TermSet:
    """Objective terms as parallel arrays.

    ``o2`` is 0 for single terms; for across terms ``week`` is the first week
    of the pair.
    """

    kind: np.ndarray
    week: np.ndarray
    o1: np.ndarray
    o2: np.ndarray
    target: np.ndarray

    def __len__(self) -> int:
        return self.kind.size

    def take(self, idx) -> "TermSet":
        return TermSet(self.kind[idx], self.week[idx], self.o1[idx], self.o2[idx], self.target[idx])


def num_terms(r: int, V: int) -> int:
    return r * V + r * n_pairs(V) + (r - 1) * V * V


def enumerate_terms(targets: StatisticsBundle, r: int) -> TermSet:
    """All objective terms, ordered single, within, across and week-major in each."""
    V = targets.taxonomy_size
    if r < 1:
        raise ValueError("need at least one week")
    qs, qw, qa = (np.asarray(x, dtype=np.float64) for x in (targets.q_single, targets.q_within, targets.q_across))
    if qs.shape != (V,) or qw.shape != (n_pairs(V),) or qa.shape != (V, V):
        raise ValueError("target tables have inconsistent shapes")
    if not (np.all(np.isfinite(qs)) and np.all(np.isfinite(qw)) and np.all(np.isfinite(qa))):
        raise ValueError("target tables have missing (non-finite) entries")

    topics = np.arange(1, V + 1)
    pa, pb = pair_topics(V)
    xa, xb = np.meshgrid(topics, topics, indexing="ij")
    kinds, weeks, o1s, o2s, tgts = [], [], [], [], []

    def add(kind, count, week, o1, o2, target):
        kinds.append(np.full(count, kind, dtype=np.int8))
        weeks.append(np.full(count, week, dtype=np.int32))
        o1s.append(np.asarray(o1, dtype=np.int32))
        o2s.append(np.asarray(o2, dtype=np.int32))
        tgts.append(np.asarray(target, dtype=np.float64))

    for i in range(r):
        add(SINGLE, V, i, topics, np.zeros(V), qs)
    for i in range(r):
        add(WITHIN, pa.size, i, pa, pb, qw)
    for i in range(r - 1):
        add(ACROSS, V * V, i, xa.ravel(), xb.ravel(), qa.ravel())
    terms = TermSet(*(np.concatenate(x) for x in (kinds, weeks, o1s, o2s, tgts)))
    assert len(terms) == num_terms(r, V)
    return terms


def _exclusive_prod(F: np.ndarray) -> np.ndarray:
    """``out[s] = prod_{s' != s} F[s']`` along the leading (slot) axis, without division."""
    k = F.shape[0]
    out = np.empty_like(F)
    acc = np.ones_like(F[0])
    for s in range(k):
        out[s] = acc
        acc = acc * F[s]
    acc = np.ones_like(F[0])
    for s in range(k - 1, -1, -1):
        out[s] *= acc
        acc = acc * F[s]
    return out


def _prod(F: np.ndarray) -> np.ndarray:
    out = F[0].copy()
    for s in range(1, F.shape[0]):
        out *= F[s]
    return out


def _blocks(n_terms: int, T: int, k: int):
    step = max(1, _BLOCK_ELEMS // (T * k))
    for start in range(0, n_terms, step):
        yield slice(start, min(n_terms, start + step))


def _batch_pass(theta: np.ndarray, terms: TermSet, coef_fn=None):
    """Model values of ``terms`` and, if ``coef_fn`` is given, a gradient.

    ``coef_fn(values)`` must return dLoss/dvalue per term. Single terms, across
    terms and the ``1 - N({o1}) - N({o2})`` part of within terms depend on
    theta only through the per-type inclusion probabilities
    ``incl[t, i, o] = 1 - N(t, i, {o})``; their gradient is aggregated on that
    dense table. The pair survival ``N(t, i, {o1, o2})`` is handled per term
    on slot-major gathers of shape [k, B, T].
    """
    P = softmax_slots(theta)
    T, r, k, V = P.shape
    Fk = 1.0 - np.ascontiguousarray(P.transpose(2, 1, 3, 0))  # [k, r, V, T]
    incl = 1.0 - _prod(Fk)  # [r, V, T]

    values = np.empty(len(terms))
    single = np.flatnonzero(terms.kind == SINGLE)
    within = np.flatnonzero(terms.kind == WITHIN)
    across = np.flatnonzero(terms.kind == ACROSS)
    wk, o1, o2 = terms.week, terms.o1 - 1, terms.o2 - 1
    wi, wa, wb = wk[within], o1[within], o2[within]

    def pair_factors(blk):
        return np.clip(Fk[:, wi[blk], wa[blk]] - (1.0 - Fk[:, wi[blk], wb[blk]]), 0.0, 1.0)

    values[single] = incl[wk[single], o1[single]].mean(axis=1)
    values[across] = (incl[wk[across], o1[across]] * incl[wk[across] + 1, o2[across]]).mean(axis=1)
    pair_surv = np.empty(within.size)
    for blk in _blocks(within.size, T, k):
        pair_surv[blk] = _prod(pair_factors(blk)).mean(axis=1)
    values[within] = incl[wi, wa].mean(axis=1) + incl[wi, wb].mean(axis=1) - 1.0 + pair_surv
    if coef_fn is None:
        return values, None

    coef = coef_fn(values)
    # dLoss/dincl, aggregated over terms.
    rows = np.concatenate([wk[single] * V + o1[single], wi * V + wa, wi * V + wb]).astype(np.int64)
    g = np.bincount(
        rows, weights=np.concatenate([coef[single], coef[within], coef[within]]), minlength=r * V
    )
    g_incl = np.repeat((g / T).reshape(r, V, 1), T, axis=2)
    for i in range(r - 1):
        sel = across[wk[across] == i]
        if sel.size == 0:
            continue
        C = np.bincount(
            o1[sel].astype(np.int64) * V + o2[sel], weights=coef[sel], minlength=V * V
        ).reshape(V, V) / T
        g_incl[i] += C @ incl[i + 1]
        g_incl[i + 1] += C.T @ incl[i]
    # d incl / dP[s] is the product of the other slots' factors.
    gPk = g_incl[None] * _exclusive_prod(Fk)  # [k, r, V, T]

    gflat = gPk.reshape(-1)
    type_slot = np.arange(k)[:, None] * (r * V * T) + np.arange(T)[None, :]  # [k, T]
    for blk in _blocks(within.size, T, k):
        d = _exclusive_prod(pair_factors(blk)) * (-coef[within[blk]] / T)[None, :, None]
        d = d.ravel()
        for topic in (wa[blk], wb[blk]):
            base = (wi[blk].astype(np.int64) * V + topic) * T
            idx = (type_slot[:, None, :] + base[None, :, None]).ravel()
            gflat += np.bincount(idx, weights=d, minlength=gflat.size)
    gP = gPk.transpose(3, 1, 0, 2)  # back to [T, r, k, V]
    grad = P * (gP - (gP * P).sum(axis=-1, keepdims=True))
    return values, grad


def model_term_values(theta: np.ndarray, terms: TermSet) -> np.ndarray:
    """The model's value of every term's statistic."""
    return _batch_pass(theta, terms)[0]


def evaluate_objective(theta: np.ndarray, terms: TermSet) -> float:
    """Mean squared error over ``terms`` (the full objective when given all terms)."""
    if len(terms) == 0:
        return 0.0
    err = model_term_values(theta, terms) - terms.target
    return float(np.mean(err * err))


def gradient_minibatch(theta: np.ndarray, batch: TermSet) -> tuple[float, np.ndarray]:
    """Loss and exact gradient of the batch mean squared error.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``theta``.
    """
    B = len(batch)
    if B == 0:
        raise ValueError("empty batch")
    values, grad = _batch_pass(theta, batch, lambda v: 2.0 * (v - batch.target) / B)
    if not np.all(np.isfinite(grad)):
        raise TrainingDiverged("non-finite gradient")
    err = values - batch.target
    return float(err @ err) / B, grad


# --------------------------------------------------------------------------
# Adam


@dataclasses.dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def zeros_like(cls, theta: np.ndarray, **hyper) -> "AdamState":
        return cls(np.zeros_like(theta), np.zeros_like(theta), **hyper)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam update. Updates ``state`` in place and returns new logits."""
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise ValueError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, state {state.m.shape}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat), state


# --------------------------------------------------------------------------
# Training


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings; defaults are the full-scale values.

    ``eval_size`` picks a fixed random subset of terms on which the objective
    is logged (``None`` logs the full objective). ``target_loss`` stops early
    once the logged objective falls below it.
    """

    num_types: int = 500
    batch_size: int = 8192
    learning_rate: float = 1.0
    epochs: int = 8000
    init_std: float = 0.001
    seed: int = 0
    eval_every: int = 1
    eval_size: int | None = None
    target_loss: float | None = None

    def __post_init__(self):
        if self.num_types < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ValueError("num_types and batch_size must be positive, epochs non-negative")
        if self.learning_rate <= 0 or self.init_std < 0 or self.eval_every < 1:
            raise ValueError("invalid learning rate, init_std or eval_every")


def train(
    targets: StatisticsBundle,
    cfg: TrainConfig,
    weeks: int,
    rng: np.random.Generator | None = None,
    log: list | None = None,
) -> ModelParams:
    """Fits a ``[T, weeks, k, V]`` model to the target statistics.

    Every epoch shuffles the terms, cuts them into batches of
    ``cfg.batch_size`` and applies one Adam step per batch. Rows appended to
    ``log`` hold the epoch, the mean batch loss of that epoch, the logged
    objective and the elapsed seconds.
    """
    rng = make_rng(cfg.seed) if rng is None else rng
    V, k = targets.taxonomy_size, targets.k
    terms = enumerate_terms(targets, weeks)
    theta = rng.normal(0.0, cfg.init_std, size=(cfg.num_types, weeks, k, V))
    state = AdamState.zeros_like(theta, lr=cfg.learning_rate)
    if cfg.eval_size is None or cfg.eval_size >= len(terms):
        eval_terms = terms
    else:
        eval_terms = terms.take(np.sort(rng.choice(len(terms), cfg.eval_size, replace=False)))

    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(terms))
        batch_losses = []
        for start in range(0, len(terms), cfg.batch_size):
            batch = terms.take(order[start:start + cfg.batch_size])
            loss, grad = gradient_minibatch(theta, batch)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            theta, state = adam_step(state, theta, grad)
            batch_losses.append(loss * len(batch))
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            j = evaluate_objective(theta, eval_terms)
            if not math.isfinite(j):
                raise TrainingDiverged(f"objective became non-finite at epoch {epoch}")
            row = {
                "epoch": epoch,
                "batch_loss": sum(batch_losses) / len(terms),
                "objective": j,
                "wall_time": time.perf_counter() - t0,
            }
            if log is not None:
                log.append(row)
            logger.debug("epoch %d objective %.3e", epoch, j)
            if cfg.target_loss is not None and j < cfg.target_loss:
                break
    return ModelParams(
        theta,
        cfg.seed,
        {
            "epochs": cfg.epochs,
            "num_types": cfg.num_types,
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "init_std": cfg.init_std,
            "targets": dict(targets.provenance),
        },
    )
