import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from okapi import lm, reward
from okapi.records import InstructionExample, RankedResponseSet
from okapi.reward import RewardConfig, pairs_from_ranked, ranking_loss

finite = st.floats(-30, 30, allow_nan=False)


def test_published_defaults():
    c = RewardConfig()
    assert (c.epochs, c.batch_size, c.lr) == (2, 64, 1e-5)


def test_ranking_loss_examples():
    assert ranking_loss(0.0, 0.0) == pytest.approx(math.log(2), abs=1e-15)
    assert ranking_loss(1.0, 0.0) == pytest.approx(0.313262, abs=1e-6)
    assert ranking_loss(1.0, 0.0) == pytest.approx(math.log1p(math.exp(-1)), abs=1e-15)
    assert ranking_loss(-50.0, 0.0) == pytest.approx(50.0, abs=1e-12)
    assert math.isfinite(ranking_loss(-1e6, 0.0))


@given(finite, finite)
def test_ranking_loss_symmetric_sum(a, b):
    s = ranking_loss(a, b) + ranking_loss(b, a)
    assert s >= 2 * math.log(2) - 1e-12
    if a == b:
        assert s == pytest.approx(2 * math.log(2), abs=1e-12)


@given(finite, finite, finite)
def test_ranking_loss_shift_invariant(a, b, c):
    assert ranking_loss(a + c, b + c) == pytest.approx(ranking_loss(a, b), abs=1e-12)


def _rset(ranks, responses=("r1", "r2", "r3", "r4")):
    base = InstructionExample("s", "en", "Do it", "", "", "translated")
    return RankedResponseSet(base, tuple(responses), tuple(ranks))


def test_pairs_for_3142():
    got = {(c + 1, r + 1) for c, r in reward.pair_indices([3, 1, 4, 2])}
    assert got == {(2, 1), (2, 3), (2, 4), (4, 1), (4, 3), (1, 3)}
    pairs = pairs_from_ranked(_rset([3, 1, 4, 2]))
    assert len(pairs) == 6
    for p in pairs:
        assert p.source_ranks[0] < p.source_ranks[1]


def test_pairs_t2_and_errors():
    assert reward.pair_indices([1, 2]) == [(0, 1)]
    with pytest.raises(ValueError):
        reward.pair_indices([1, 1, 2, 3])
    with pytest.raises(ValueError):
        _rset([1, 1, 2, 3])
    with pytest.raises(ValueError):
        reward.PreferencePair((1,), (2,), (3,), (2, 1))


@given(st.permutations([1, 2, 3, 4]))
def test_every_pair_respects_rank_order(perm):
    pairs = reward.pair_indices(perm)
    assert len(pairs) == 6
    assert all(perm[c] < perm[r] for c, r in pairs)


@pytest.fixture(scope="module")
def sft():
    base = lm.new_base(lm.ModelConfig(n_layers=2, d_model=16, n_heads=2, context_len=64, seed=4))
    return base.derive("sft")


def _sets(n, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        k = rng.permutation(4)
        resp = tuple("ab" + "*" * int(c) for c in k)
        ranks = tuple(int(4 - c) for c in k)
        out.append(RankedResponseSet(InstructionExample(f"s{i}", "en", "mark", "", "", "translated"), resp, ranks))
    return out


def test_zero_head_scores_zero_and_loss_ln2(sft):
    rm = lm.PolicyCheckpoint(sft.config, reward.with_reward_head(sft), "reward")
    assert reward.reward_score(rm, [1, 2, 3], [4, 5]) == 0.0
    rm0 = reward.train_reward(sft, _sets(5), RewardConfig(epochs=0))
    for s in _sets(5):
        for p in pairs_from_ranked(s):
            d = reward.reward_score(rm0, p.x, p.y_c) - reward.reward_score(rm0, p.x, p.y_r)
            assert abs(ranking_loss(d, 0.0) - math.log(2)) < 1e-9


def test_score_equals_head_dot_final_state(sft):
    params = reward.with_reward_head(sft)
    rng = np.random.default_rng(0)
    params[reward.HEAD_W] = rng.normal(size=sft.config.d_model)
    params[reward.HEAD_B] = np.array([0.3])
    rm = lm.PolicyCheckpoint(sft.config, params, "reward")
    x, y = [256, 10, 20], [30, 40, 50]
    h = reward.final_states(rm, x, y)
    expect = float(params[reward.HEAD_W] @ h + 0.3)
    assert reward.reward_score(rm, x, y) == pytest.approx(expect, abs=1e-9)
    assert reward.reward_score(rm, x, y) == reward.reward_score(rm, x, y)
    # batching with a longer neighbour must not change the score
    batch = reward.reward_scores(rm, [(x, y), (x, y + [60, 61, 62])])
    assert batch[0] == pytest.approx(expect, abs=1e-9)


def test_reward_errors(sft):
    with pytest.raises(ValueError):
        reward.train_reward(sft, [], RewardConfig())
    with pytest.raises(ValueError):
        reward.train_reward(sft.derive("reward"), _sets(2), RewardConfig())
    rm = lm.PolicyCheckpoint(sft.config, reward.with_reward_head(sft), "reward")
    with pytest.raises(ValueError):
        reward.reward_score(rm, [1] * 40, [2] * 40)
    with pytest.raises(ValueError):
        reward.reward_score(sft, [1], [2])


def test_training_is_deterministic_and_learns(sft):
    data = _sets(40)
    cfg = RewardConfig(epochs=2, batch_size=6, lr=3e-3, seed=1)
    hist = []
    a = reward.train_reward(sft, data, cfg, history=hist)
    b = reward.train_reward(sft, data, cfg)
    assert a.role == "reward" and a.fingerprint() == b.fingerprint()
    assert hist[-1]["train_loss"] < math.log(2)
    assert a.provenance[-1]["n_heldout_sets"] == 4


def test_split_sets_is_a_partition():
    data = list(range(50))
    tr, ho = reward.split_sets(data, 0.1, 3)
    assert sorted(tr + ho) == data and len(ho) == 5
