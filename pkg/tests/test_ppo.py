import numpy as np
import pytest
from hypothesis import given, strategies as st

from okapi import lm, ppo, reward
from okapi import sft as S
from okapi.ppo import PpoConfig, Rollout
from okapi.records import InstructionExample

MARK = ord("*")


def _rollout(n, rng, reward_final=0.0):
    return Rollout([lm.BOS], list(range(n)), -rng.uniform(0, 3, n), -rng.uniform(0, 3, n), reward_final,
                   rng.normal(size=n + 1) * np.r_[np.ones(n), 0.0])


def test_published_defaults():
    c = PpoConfig()
    assert (c.epochs, c.kl_beta, c.clip_eps, c.batch_size, c.lr, c.weight_decay) == (5, 0.05, 0.2, 32, 1e-6, 0.1)
    assert c.adam_betas == (0.9, 0.95) and c.adam_eps == 1e-8 and c.trainable_top_layers == 4


def test_config_invariants():
    for bad in ({"clip_eps": 0.0}, {"clip_eps": 1.0}, {"kl_beta": -0.1}):
        with pytest.raises(ValueError):
            PpoConfig(**bad)


def test_kl_term_examples():
    r = Rollout([1], [5, 6], np.array([-1.0, -2.0]), np.array([-1.1, -1.95]), 0.0)
    assert ppo.kl_term(r) == pytest.approx(0.05, abs=1e-12)
    same = Rollout([1], [5, 6], np.array([-1.0, -2.0]), np.array([-1.0, -2.0]), 0.0)
    assert ppo.kl_term(same) == 0.0
    with pytest.raises(ValueError):
        ppo.kl_term(Rollout([1], [5], np.array([-1.0, -2.0]), np.array([-1.0, -2.0]), 0.0))


def test_kl_term_matches_straight_line_sum():
    rng = np.random.default_rng(0)
    for _ in range(20):
        r = _rollout(int(rng.integers(1, 20)), rng)
        expect = 0.0
        for a, b in zip(r.per_token_logp_policy, r.per_token_logp_ref):
            expect += a - b
        assert ppo.kl_term(r) == pytest.approx(expect, abs=1e-10)


def test_shaped_rewards():
    r = Rollout([1], [5, 6, 7], np.full(3, -1.0), np.full(3, -1.5), 1.3)
    np.testing.assert_array_equal(ppo.shaped_rewards(r, 0.0), [0, 0, 1.3])
    same = Rollout([1], [5, 6, 7], np.full(3, -1.0), np.full(3, -1.0), 0.7)
    np.testing.assert_array_equal(ppo.shaped_rewards(same, 0.05), [0, 0, 0.7])
    rng = np.random.default_rng(1)
    for _ in range(20):
        ro = _rollout(int(rng.integers(1, 15)), rng, float(rng.normal()))
        assert ppo.shaped_rewards(ro, 0.05).sum() == pytest.approx(ro.reward_final - 0.05 * ppo.kl_term(ro), abs=1e-10)


def test_gae_examples():
    cfg = PpoConfig(gae_gamma=1.0, gae_lambda=1.0)
    r = Rollout([1], [5, 6, 7], np.zeros(3), np.zeros(3), 2.5, np.zeros(4))
    adv, ret = ppo.gae_advantages(r, cfg)
    np.testing.assert_array_equal(adv, [2.5, 2.5, 2.5])
    np.testing.assert_array_equal(ret, adv)
    zero = Rollout([1], [5, 6], np.zeros(2), np.zeros(2), 0.0, np.zeros(3))
    a, _ = ppo.gae_advantages(zero, PpoConfig())
    assert [x.tolist() for x in ppo.whiten([a])] == [[0.0, 0.0]]
    with pytest.raises(ValueError):
        ppo.gae_advantages(Rollout([1], [], np.zeros(0), np.zeros(0), 0.0, np.zeros(1)), cfg)
    with pytest.raises(ValueError):
        ppo.gae_advantages(Rollout([1], [5], np.zeros(1), np.zeros(1), 0.0, np.zeros(1)), cfg)


def _brute_gae(rew, v, gamma, lam):
    n = len(rew)
    deltas = [rew[t] + gamma * v[t + 1] - v[t] for t in range(n)]
    return np.array([sum((gamma * lam) ** (k - t) * deltas[k] for k in range(t, n)) for t in range(n)])


@pytest.mark.parametrize("seed", range(10))
def test_gae_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 25))
    gamma, lam = rng.uniform(0.8, 1.0), rng.uniform(0.5, 1.0)
    cfg = PpoConfig(gae_gamma=gamma, gae_lambda=lam, kl_beta=rng.uniform(0, 0.2))
    ro = _rollout(n, rng, float(rng.normal()))
    adv, ret = ppo.gae_advantages(ro, cfg)
    expect = _brute_gae(ppo.shaped_rewards(ro, cfg.kl_beta), ro.values, gamma, lam)
    np.testing.assert_allclose(adv, expect, atol=1e-9)
    np.testing.assert_allclose(ret, adv + ro.values[:-1], atol=1e-12)
    if gamma == 1.0 or lam == 1.0:
        return
    # gamma = lambda = 1 reduces returns to the undiscounted reward-to-go
    ones = PpoConfig(gae_gamma=1.0, gae_lambda=1.0, kl_beta=cfg.kl_beta)
    _, ret1 = ppo.gae_advantages(ro, ones)
    np.testing.assert_allclose(ret1, np.cumsum(ppo.shaped_rewards(ro, cfg.kl_beta)[::-1])[::-1], atol=1e-9)


def test_whiten_batch_statistics():
    rng = np.random.default_rng(0)
    chunks = [rng.normal(3, 2, size=k) for k in (3, 5, 1)]
    flat = np.concatenate(ppo.whiten(chunks))
    assert abs(flat.mean()) < 1e-12 and abs(flat.std() - 1) < 1e-6


def test_policy_loss_examples():
    assert ppo.ppo_policy_loss([1.0], [2.0], 0.2) == -2.0
    assert ppo.ppo_policy_loss([1.5], [1.0], 0.2) == pytest.approx(-1.2)
    assert ppo.ppo_policy_loss([0.5], [-1.0], 0.2) == pytest.approx(0.8)


@given(st.lists(st.tuples(st.floats(0.01, 5), st.floats(-5, 5)), min_size=1, max_size=10))
def test_policy_loss_is_pessimistic_min(pairs):
    ratio = np.array([p[0] for p in pairs])
    adv = np.array([p[1] for p in pairs])
    for i in range(len(ratio)):
        li = ppo.ppo_policy_loss(ratio[i:i + 1], adv[i:i + 1], 0.2)
        assert li >= -ratio[i] * adv[i] - 1e-12
        assert li >= -np.clip(ratio[i], 0.8, 1.2) * adv[i] - 1e-12


def test_trainable_names():
    cfg = lm.ModelConfig(n_layers=6, d_model=8, n_heads=2, context_len=16)
    params = ppo.with_value_head(lm.new_base(cfg).derive("sft"))
    names = ppo.trainable_names(params, 6, 4)
    assert not any(n.startswith(("blocks.0.", "blocks.1.", "tok_emb", "pos_emb", "lm_head")) for n in names)
    assert all(any(n.startswith(f"blocks.{i}.") for n in names) for i in range(2, 6))
    assert "ln_f.g" in names and ppo.VALUE_W in names


# --- small end-to-end runs on a marker-count reward ------------------------

@pytest.fixture(scope="module")
def marker_sft():
    cfg = lm.ModelConfig(n_layers=2, d_model=16, n_heads=2, context_len=48, seed=0)
    rng = np.random.default_rng(0)
    seqs = [lm.tokenizer.encode("".join(rng.choice(list("ab*"), p=[.45, .45, .1], size=12)), bos=True)
            for _ in range(64)]
    return S.train_lm(lm.new_base(cfg), seqs, 60, lr=1e-2).derive("sft")


PROMPTS = [InstructionExample(f"p{i}", "en", f"go {i}") for i in range(8)]


def marker_reward(xs, ys):
    return [float(sum(t == MARK for t in y)) for y in ys]


def _marker_freq(model, seed=99):
    vals = []
    for i, p in enumerate(PROMPTS):
        x = S.DEFAULT_FORMAT.prompt_tokens(p.instruction)
        for k in range(8):
            y = ppo.sample_response(model, x, 8, 1.0, ppo._subseed(seed, i, k))
            vals.append(sum(t == MARK for t in y))
    return float(np.mean(vals))


def _cfg(seed, **kw):
    base = dict(epochs=6, batch_size=8, lr=1e-2, trainable_top_layers=1, max_new_tokens=8, seed=seed,
                weight_decay=0.0)
    base.update(kw)
    return PpoConfig(**base)


def test_zero_epochs_keeps_sft_params(marker_sft):
    out = ppo.run_ppo(marker_sft, None, PROMPTS, _cfg(0, epochs=0), reward_fn=marker_reward)
    assert out.role == "ppo"
    for k, v in marker_sft.params.items():
        assert out.params[k].tobytes() == v.tobytes()
    assert np.all(out.params[ppo.VALUE_W] == 0)


@pytest.mark.parametrize("seed", range(3))
def test_marker_frequency_increases_and_trunk_stays_frozen(marker_sft, seed):
    hist = []
    out = ppo.run_ppo(marker_sft, None, PROMPTS, _cfg(seed), reward_fn=marker_reward, history=hist)
    assert _marker_freq(out) > _marker_freq(marker_sft)
    trainable = set(ppo.trainable_names(out.params, 2, 1))
    for k, v in marker_sft.params.items():
        if k not in trainable:
            assert out.params[k].tobytes() == v.tobytes(), k
    assert any(not np.array_equal(out.params[k], marker_sft.params[k]) for k in trainable if k in marker_sft.params)
    assert len(hist) == 6 and set(hist[0]) == {"epoch", "mean_reward", "mean_kl", "policy_loss", "value_loss"}


def test_large_beta_keeps_kl_lower(marker_sft):
    prompts = [S.DEFAULT_FORMAT.prompt_tokens(p.instruction) for p in PROMPTS]
    kls = {}
    for beta in (0.05, 1e3):
        out = ppo.run_ppo(marker_sft, None, PROMPTS, _cfg(0, kl_beta=beta), reward_fn=marker_reward)
        kls[beta] = ppo.mean_kl_to(out, marker_sft, prompts, 8, seed=5)
    assert kls[1e3] < kls[0.05]


def test_self_kl_is_zero(marker_sft):
    prompts = [S.DEFAULT_FORMAT.prompt_tokens(p.instruction) for p in PROMPTS]
    assert ppo.mean_kl_to(marker_sft, marker_sft, prompts, 8) == 0.0


def test_run_ppo_is_deterministic(marker_sft):
    a = ppo.run_ppo(marker_sft, None, PROMPTS, _cfg(1, epochs=2), reward_fn=marker_reward)
    b = ppo.run_ppo(marker_sft, None, PROMPTS, _cfg(1, epochs=2), reward_fn=marker_reward)
    assert a.fingerprint() == b.fingerprint()


def test_run_ppo_errors(marker_sft):
    with pytest.raises(ValueError):
        ppo.run_ppo(marker_sft.derive("reward"), None, PROMPTS, _cfg(0), reward_fn=marker_reward)
    with pytest.raises(ValueError):
        ppo.run_ppo(marker_sft, None, PROMPTS, _cfg(0))
    with pytest.raises(ValueError):
        ppo.run_ppo(marker_sft, None, PROMPTS, _cfg(0, trainable_top_layers=3), reward_fn=marker_reward)
    with pytest.raises(ValueError):
        ppo.run_ppo(marker_sft, marker_sft, PROMPTS, _cfg(0))


def test_reward_model_context_too_short(marker_sft):
    small = lm.ModelConfig(n_layers=2, d_model=16, n_heads=2, context_len=16, seed=0)
    rm = lm.new_base(small).derive("sft")
    rm = lm.PolicyCheckpoint(small, reward.with_reward_head(rm), "reward")
    with pytest.raises(ValueError, match="reward model context"):
        ppo.run_ppo(marker_sft, rm, PROMPTS, _cfg(0, epochs=1))
