import itertools
import math

import numpy as np
import pytest

from topicsynth.core import make_rng
from topicsynth.dp_stats import count_marginals, pair_index, raw_statistics
from topicsynth.model import (
    CheckpointError,
    ModelParams,
    load_model,
    model_statistics,
    q_across_model,
    q_single_model,
    q_within_model,
    sample_dataset,
    sample_sequence,
    save_model,
    softmax_slots,
    survival,
)

BIG = 60.0  # logit gap that makes a slot a point mass to double precision


def point_mass(T, r, k, V, topics):
    """theta whose slot (t, i, s) puts all mass on topics[t][i][s] (1-based)."""
    theta = np.zeros((T, r, k, V))
    for t, i, s in itertools.product(range(T), range(r), range(k)):
        theta[t, i, s, topics[t][i][s] - 1] = BIG
    return theta


def enumerate_model(theta):
    """Exact statistics by summing over every slot assignment of every type."""
    P = softmax_slots(theta)
    T, r, k, V = P.shape
    single = np.zeros((r, V))
    within = np.zeros((r, V, V))
    across = np.zeros((max(r - 1, 0), V, V))
    for t in range(T):
        week_dists = []
        for i in range(r):
            dist = {}
            for combo in itertools.product(range(V), repeat=k):
                p = math.prod(P[t, i, s, x] for s, x in enumerate(combo))
                key = frozenset(combo)
                dist[key] = dist.get(key, 0.0) + p
            week_dists.append(dist)
            for S, p in dist.items():
                for a in S:
                    single[i, a] += p / T
                for a, b in itertools.permutations(S, 2):
                    within[i, a, b] += p / T
        for i in range(r - 1):
            for S1, p1 in week_dists[i].items():
                for S2, p2 in week_dists[i + 1].items():
                    for a in S1:
                        for b in S2:
                            across[i, a, b] += p1 * p2 / T
    return single, within, across


def test_softmax_examples():
    assert np.allclose(softmax_slots(np.zeros((1, 1, 1, 4))), 0.25)
    assert np.allclose(softmax_slots(np.full((1, 1, 1, 5), 123.4)), 0.2)
    p = softmax_slots(np.log(np.array([1.0, 2.0, 3.0])).reshape(1, 1, 1, 3))
    assert np.allclose(p.ravel(), [1 / 6, 2 / 6, 3 / 6], atol=1e-12)
    with pytest.raises(ValueError):
        softmax_slots(np.array([[[[np.nan, 0.0]]]]))


def test_softmax_stable_for_large_logits():
    p = softmax_slots(np.array([[[[1000.0, 0.0, -1000.0]]]]))
    assert np.isfinite(p).all() and abs(p.sum() - 1) < 1e-12


def test_survival_examples():
    theta = np.zeros((1, 1, 2, 3))
    assert survival(theta, 0, 0, set()) == 1.0
    assert survival(theta, 0, 0, {1, 2, 3}) == 0.0
    assert survival(theta, 0, 0, {1}) == pytest.approx(4 / 9, abs=1e-15)
    with pytest.raises(ValueError):
        survival(theta, 0, 0, {4})


def test_q_single_examples():
    theta = np.log(np.array([0.3, 0.7])).reshape(1, 1, 1, 2)
    assert q_single_model(theta, 0, 1) == pytest.approx(0.3, abs=1e-15)
    assert q_single_model(np.zeros((1, 1, 2, 3)), 0, 1) == pytest.approx(5 / 9, abs=1e-15)


def test_q_within_examples():
    assert q_within_model(np.zeros((1, 1, 1, 4)), 0, 1, 2) == 0.0
    theta = point_mass(1, 1, 2, 4, [[[1, 2]]])
    assert q_within_model(theta, 0, 1, 2) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        q_within_model(theta, 0, 1, 1)


def test_q_across_examples():
    theta = np.full((1, 2, 1, 3), -BIG)
    theta[0, 0, 0, 0] = BIG  # week 0: topic 1 surely
    theta[0, 1, 0] = np.log([0.7, 0.3, 1e-300])  # week 1: topic 1 with probability 0.7
    assert q_across_model(theta, 0, 1, 1, 1) == pytest.approx(0.7, abs=1e-12)
    two = point_mass(2, 2, 1, 3, [[[1], [3]], [[2], [2]]])
    assert q_across_model(two, 0, 1, 1, 2) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        q_across_model(two, 0, 0, 1, 2)


def test_closed_forms_match_enumeration():
    rng = make_rng(0)
    for _ in range(10):
        T, r, k, V = rng.integers(1, 5), rng.integers(1, 3), rng.integers(1, 4), rng.integers(2, 7)
        theta = rng.normal(size=(T, r, k, V)) * 1.5
        single, within, across = enumerate_model(theta)
        stats = model_statistics(theta)
        a, b = np.triu_indices(V, 1)
        assert np.allclose(stats["single"], single, atol=1e-12, rtol=0)
        assert np.allclose(stats["within"], within[:, a, b], atol=1e-12, rtol=0)
        assert np.allclose(stats["across"], across, atol=1e-12, rtol=0)
        i, o1, o2 = 0, 1, V
        assert q_single_model(theta, i, o1) == pytest.approx(single[i, 0], abs=1e-12)
        assert q_within_model(theta, i, o1, o2) == pytest.approx(within[i, 0, V - 1], abs=1e-12)
        if r > 1:
            assert q_across_model(theta, 0, 1, o1, o2) == pytest.approx(across[0, 0, V - 1], abs=1e-12)


def test_invariants_on_random_models():
    rng = make_rng(1)
    for _ in range(20):
        theta = rng.normal(size=(3, 2, 3, 5)) * 2
        st = model_statistics(theta)
        # Expected set size is at most k.
        assert np.all(st["single"].sum(axis=1) <= 3 + 1e-12)
        a, b = np.triu_indices(5, 1)
        assert np.all(st["within"] <= np.minimum(st["single"][:, a], st["single"][:, b]) + 1e-15)
        # Mixture linearity.
        parts = [model_statistics(theta[t:t + 1]) for t in range(3)]
        for fam in ("single", "within", "across"):
            assert np.allclose(st[fam], np.mean([p[fam] for p in parts], axis=0), atol=1e-15)


def test_one_type_per_user_reproduces_empirical_statistics():
    users = [((1, 2, 3), (2, 3, 4)), ((4, 5, 6), (1, 5, 6)), ((1, 3, 5), (1, 3, 5))]
    theta = point_mass(3, 2, 3, 6, [[list(w) for w in u] for u in users])
    from topicsynth.core import SequenceDataset, TopicSetSequence

    ds = SequenceDataset.from_sequences([TopicSetSequence(str(j), u) for j, u in enumerate(users)])
    raw = raw_statistics(count_marginals(ds, 6))
    st = model_statistics(theta)
    assert np.allclose(st["within"].mean(axis=0), raw.q_within, atol=1e-6)
    assert np.allclose(st["across"][0], raw.q_across, atol=1e-6)
    assert np.allclose(st["single"].mean(axis=0), raw.q_single, atol=1e-6)


def test_sample_sequence_point_masses():
    theta = point_mass(1, 2, 2, 10, [[[3, 7], [9, 9]]])
    seq = sample_sequence(theta, make_rng(0))
    assert seq.sets == ((3, 7), (9,))


def test_sample_dataset_basics():
    theta = make_rng(2).normal(size=(3, 2, 3, 6))
    assert len(sample_dataset(theta, 0, make_rng(0))) == 0
    a = sample_dataset(theta, 500, make_rng(4))
    b = sample_dataset(theta, 500, make_rng(4))
    assert np.array_equal(a.sets, b.sets)
    srt = a.sets
    nz = (srt[..., 1:] > 0)
    assert np.all(srt[..., 1:][nz] != srt[..., :-1][nz])


def test_sampling_matches_closed_forms():
    theta = make_rng(3).normal(size=(4, 2, 3, 6)) * 1.5
    n = 200_000
    ds = sample_dataset(theta, n, make_rng(5))
    st = model_statistics(theta)
    for i in range(2):
        freq = np.array([(ds.sets[:, i] == o).any(axis=1).mean() for o in range(1, 7)])
        se = np.sqrt(st["single"][i] * (1 - st["single"][i]) / n)
        assert np.all(np.abs(freq - st["single"][i]) < 4 * se + 1e-12)
    wk = ds.sets[:, 0]
    for o1, o2 in [(1, 2), (3, 5), (4, 6)]:
        both = ((wk == o1).any(axis=1) & (wk == o2).any(axis=1)).mean()
        q = st["within"][0, pair_index(o1, o2, 6)]
        assert abs(both - q) < 4 * np.sqrt(q * (1 - q) / n)


def test_sample_sequence_agrees_with_q_single():
    theta = make_rng(7).normal(size=(2, 1, 2, 4))
    rng = make_rng(8)
    n = 20_000
    hits = sum(1 in sample_sequence(theta, rng).sets[0] for _ in range(n))
    q = q_single_model(theta, 0, 1)
    assert abs(hits / n - q) < 4 * math.sqrt(q * (1 - q) / n)


def test_checkpoint_roundtrip(tmp_path):
    theta = make_rng(0).normal(size=(2, 3, 4, 5))
    path = tmp_path / "m.bin"
    save_model(path, ModelParams(theta, seed=9, meta={"note": "x"}))
    back = load_model(path)
    assert np.array_equal(back.theta, theta)
    assert back.seed == 9 and back.meta == {"note": "x"} and back.shape == (2, 3, 4, 5)


def test_checkpoint_layout_is_little_endian_row_major(tmp_path):
    theta = np.arange(2 * 1 * 2 * 3, dtype=np.float64).reshape(2, 1, 2, 3)
    path = tmp_path / "m.bin"
    save_model(path, ModelParams(theta))
    payload = path.read_bytes().split(b"\n", 1)[1]
    assert np.array_equal(np.frombuffer(payload, dtype="<f8"), np.arange(12.0))


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "m.bin"
    save_model(path, ModelParams(np.zeros((2, 2, 2, 2))))
    header, payload = path.read_bytes().split(b"\n", 1)
    path.write_bytes(header.replace(b'"T": 2', b'"T": 3') + b"\n" + payload)
    with pytest.raises(CheckpointError):
        load_model(path)


def test_checkpoint_corrupt_payload(tmp_path):
    path = tmp_path / "m.bin"
    save_model(path, ModelParams(np.zeros((1, 1, 1, 4))))
    data = bytearray(path.read_bytes())
    data[-1] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_model(path)


def test_checkpoint_rejects_other_files(tmp_path):
    path = tmp_path / "x.jsonl"
    path.write_text('{"user": "a", "sets": [[1]]}\n')
    with pytest.raises(CheckpointError):
        load_model(path)
