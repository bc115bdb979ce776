import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oetrade import model, sampling
from oetrade.errors import BoundsError, FormatError, ParameterError, PreconditionError
from oetrade.sampling import SamplePlan, ScoredPool


def logit_passthrough(k):
    """A model whose logits equal its inputs."""
    p = model.init(model.Dims(k, k, 2, k), hidden_sizes=(), seed=0)
    p.encoder[0].weight.data = np.eye(k)
    p.classifier.weight.data = np.eye(k)
    return p


def pool_from_hardness(h):
    h = np.asarray(h, float)
    return ScoredPool(np.arange(len(h), dtype=float)[:, None], h, np.argsort(h, kind="stable"))


def test_hardness_examples():
    assert sampling.hardness(np.full(10, 0.1)) == pytest.approx(0.1)
    assert sampling.hardness(np.eye(4)[2]) == 1.0
    assert sampling.hardness([0.5, 0.3, 0.2]) == 0.5
    np.testing.assert_array_equal(sampling.hardness(np.array([[0.5, 0.5], [0.9, 0.1]])), [0.5, 0.9])


def test_score_pool_hand_set_logits():
    k = 5
    rows = [
        np.log([0.9] + [0.025] * 4),
        np.zeros(k),
        np.log([0.5] + [0.125] * 4),
    ]
    scored = sampling.score_pool(logit_passthrough(k), np.array(rows))
    np.testing.assert_allclose(scored.hardness, [0.9, 0.2, 0.5], atol=1e-12)
    np.testing.assert_array_equal(scored.sorted_index, [1, 2, 0])


def test_score_pool_zero_teacher_and_identical_samples():
    t = model.init(model.Dims(3, 4, 2, 6), (5,), seed=1)
    for p in t.parameters():
        p.data[...] = 0.0
    scored = sampling.score_pool(t, np.random.default_rng(0).normal(size=(20, 3)))
    np.testing.assert_allclose(scored.hardness, 1 / 6, atol=1e-15)
    t2 = model.init(model.Dims(3, 4, 2, 6), (5,), seed=1)
    same = sampling.score_pool(t2, np.ones((7, 3)))
    assert np.all(same.hardness == same.hardness[0])
    np.testing.assert_array_equal(same.sorted_index, np.arange(7))


def test_score_pool_leaves_teacher_untouched_and_rejects_empty():
    t = model.init(model.Dims(3, 4, 2, 6), (5,), seed=1)
    before = t.checksum()
    sampling.score_pool(t, np.random.default_rng(0).normal(size=(50, 3)))
    assert t.checksum() == before
    with pytest.raises(PreconditionError):
        sampling.score_pool(t, np.zeros((0, 3)))


def test_select_examples():
    pool = pool_from_hardness(np.linspace(0.1, 1.0, 10)[::-1])
    assert list(SamplePlan(0.5, 1, 3).positions(10)) == [5, 6, 7]
    assert list(SamplePlan(0.5, 2, 2).positions(10)) == [5, 7]
    samples, idx = sampling.select(pool, SamplePlan(0.0, 1, 10))
    np.testing.assert_array_equal(idx, pool.sorted_index)
    assert np.all(np.diff(pool.hardness[idx]) >= 0)


def test_plan_validation_and_bounds_error_message():
    with pytest.raises(ParameterError):
        SamplePlan(1.0, 1, 1)
    with pytest.raises(ParameterError):
        SamplePlan(0.5, 0, 1)
    with pytest.raises(ParameterError):
        SamplePlan(0.5, 1, 0)
    with pytest.raises(BoundsError, match=r"q=0.9.*step=2.*m=10.*M=20"):
        sampling.select(pool_from_hardness(np.random.default_rng(0).random(20)), SamplePlan(0.9, 2, 10))


def test_floor_of_q_times_m():
    assert SamplePlan(0.7, 1, 1).start(10) == 7
    assert SamplePlan(0.35, 1, 1).start(10) == 3
    assert SamplePlan(0.05, 1, 1).start(5000) == 250


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.sampled_from(sampling.Q_GRID), st.sampled_from(sampling.STEP_GRID),
       st.integers(1, 100), st.integers(0, 2**31 - 1))
def test_select_contract(M, q, step, m, seed):
    rng = np.random.default_rng(seed)
    h = np.round(rng.uniform(0.1, 1.0, size=M), 2)  # rounding forces ties
    pool = pool_from_hardness(h)
    plan = SamplePlan(q, step, m)
    if not plan.fits(M):
        with pytest.raises(BoundsError):
            sampling.select(pool, plan)
        return
    samples, idx = sampling.select(pool, plan)
    start = math.floor(q * M + 1e-9)
    assert len(idx) == m and len(set(idx.tolist())) == m
    sel = h[idx]
    assert np.all(np.diff(sel) >= 0)
    hs = np.sort(h)
    assert sel.min() >= hs[start] and sel.max() <= hs[start + (m - 1) * step]
    assert sel.min() >= np.quantile(h, q, method="inverted_cdf") - 1e-12 or start == 0
    again = sampling.select(pool_from_hardness(h.copy()), plan)
    np.testing.assert_array_equal(again[1], idx)
    np.testing.assert_array_equal(samples, pool.samples[idx])


def test_random_subset():
    a = sampling.random_subset(100, 10, seed=3)
    assert len(set(a.tolist())) == 10 and np.array_equal(a, sampling.random_subset(100, 10, seed=3))
    with pytest.raises(BoundsError):
        sampling.random_subset(5, 6, seed=0)


def test_grid_values():
    assert len(sampling.Q_GRID) == 19 and sampling.Q_GRID[0] == 0.0 and sampling.Q_GRID[-1] == 0.9
    assert sampling.STEP_GRID == (1, 2)


def test_scored_pool_sidecar_roundtrip(tmp_path):
    t = model.init(model.Dims(3, 4, 2, 6), (5,), seed=1)
    x = np.random.default_rng(0).normal(size=(30, 3))
    scored = sampling.score_pool(t, x, pool_id="pool-abc")
    sampling.save_scored_pool(scored, tmp_path / "s.json")
    back = sampling.load_scored_pool(tmp_path / "s.json", x)
    np.testing.assert_array_equal(back.hardness, scored.hardness)
    np.testing.assert_array_equal(back.sorted_index, scored.sorted_index)
    assert back.pool_id == "pool-abc" and back.teacher_hash == t.checksum()
    with pytest.raises(FormatError):
        sampling.load_scored_pool(tmp_path / "s.json", x[:10])
    (tmp_path / "bad.json").write_text('{"format": "other"}')
    with pytest.raises(FormatError):
        sampling.load_scored_pool(tmp_path / "bad.json", x)
