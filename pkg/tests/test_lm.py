import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from okapi import autodiff as ad
from okapi import lm, optim
from conftest import numeric_grad, uniform_model


@given(st.binary(max_size=64))
def test_tokenizer_roundtrip_bytes(b):
    ids = lm.tokenizer.encode(b)
    assert lm.tokenizer.decode_bytes(ids) == b
    assert all(0 <= i < 256 for i in ids)


@given(st.text(max_size=40))
def test_tokenizer_roundtrip_text(s):
    assert lm.tokenizer.decode(lm.tokenizer.encode(s, bos=True, eos=True)) == s


def test_special_tokens_do_not_collide():
    specials = {lm.BOS, lm.EOS, lm.PAD, lm.SEP}
    assert len(specials) == 4 and min(specials) >= 256
    assert lm.VOCAB_SIZE == 260


def test_config_invariants():
    with pytest.raises(ValueError):
        lm.ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ValueError):
        lm.ModelConfig(context_len=8)


def test_uniform_model_loss_is_ln_256():
    m = uniform_model(256)
    batch = [lm.tokenizer.encode("hello world"), lm.tokenizer.encode("abc")]
    assert abs(lm.lm_loss(m, batch) - math.log(256)) < 1e-12


def test_zero_head_checkpoint_is_uniform():
    cfg = lm.ModelConfig(n_layers=1, d_model=16, n_heads=2, context_len=32, vocab_size=256)
    base = lm.new_base(cfg)
    params = dict(base.params, lm_head=np.zeros_like(base.params["lm_head"]))
    m = lm.PolicyCheckpoint(cfg, params)
    assert abs(lm.lm_loss(m, [list(b"some bytes here")]) - math.log(256)) < 1e-9


def test_one_hot_model_has_zero_loss():
    seq = lm.tokenizer.encode("abcabc")

    def fn(t):
        z = np.full(t.shape + (260,), -1e9)
        for b in range(t.shape[0]):
            for i in range(t.shape[1]):
                z[b, i, seq[i + 1]] = 0.0
        return z

    m = lm.ScriptedModel(uniform_model().config, fn)
    assert lm.lm_loss(m, [seq]) == pytest.approx(0.0, abs=1e-12)


def test_lm_loss_matches_independent_nll(tiny_model):
    rng = np.random.default_rng(0)
    batch = [list(rng.integers(0, 256, size=n)) for n in (12, 7, 9)]
    z = lm.logits(tiny_model, lm.pad_batch(batch)[:, :-1])
    total, count = 0.0, 0
    for b, s in enumerate(batch):
        for t in range(1, len(s)):
            row = z[b, t - 1]
            total += -(row[s[t]] - (row.max() + np.log(np.exp(row - row.max()).sum())))
            count += 1
    assert lm.lm_loss(tiny_model, batch) == pytest.approx(total / count, abs=1e-8)


def test_lm_loss_errors(tiny_model):
    with pytest.raises(ValueError):
        lm.lm_loss(tiny_model, [])
    with pytest.raises(ValueError):
        lm.lm_loss(tiny_model, [[1] * 65])


def test_pad_positions_do_not_count(tiny_model):
    a = [5, 6, 7, 8]
    b = [9, 10]
    solo = lm.lm_loss(tiny_model, [a])
    # pad extends b; a's per-token loss enters with weight 3/(3+1)
    both = lm.lm_loss(tiny_model, [a, b])
    other = lm.lm_loss(tiny_model, [b])
    assert both == pytest.approx((3 * solo + other) / 4, abs=1e-12)


def test_causality(tiny_model):
    seq = np.array([[1, 2, 3, 4, 5, 6]])
    alt = seq.copy()
    alt[0, 4:] = [99, 100]
    a, b = lm.logits(tiny_model, seq), lm.logits(tiny_model, alt)
    np.testing.assert_array_equal(a[0, :4], b[0, :4])
    assert not np.allclose(a[0, 4:], b[0, 4:])


def test_full_model_gradient_two_layers(tiny_cfg):
    cfg = lm.ModelConfig(n_layers=2, d_model=8, n_heads=2, context_len=16, vocab_size=260, seed=5)
    model = lm.new_base(cfg)
    params = {k: v + np.random.default_rng(1).normal(scale=0.05, size=v.shape) for k, v in model.params.items()}
    batch = [[256, 10, 20, 30, 40, 257], [256, 11, 21, 257]]
    _, _, grads = optim.value_and_grad(params, lambda p: lm.lm_loss_tensor(p, cfg, batch))

    def f():
        with ad.no_grad():
            return lm.lm_loss_tensor(lm.as_tensors(params), cfg, batch).item()

    rng = np.random.default_rng(2)
    for name in ["tok_emb", "pos_emb", "blocks.0.attn.w_qkv", "blocks.1.mlp.w_in", "blocks.0.ln1.g",
                 "blocks.1.attn.b_out", "ln_f.b", "lm_head"]:
        arr = params[name]
        # check a random subset of coordinates of each tensor
        flat = arr.reshape(-1)
        for j in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + 1e-5
            fp = f()
            flat[j] = old - 1e-5
            fm = f()
            flat[j] = old
            num = (fp - fm) / 2e-5
            assert grads[name].reshape(-1)[j] == pytest.approx(num, rel=1e-4, abs=1e-6), name


def test_frozen_blocks_receive_no_gradient(tiny_model):
    cfg = tiny_model.config
    p = lm.as_tensors(tiny_model.params)
    out = ad.sum_(lm.trunk(p, cfg, [[1, 2, 3]], frozen_blocks=1))
    ad.backward(out)
    assert np.all(p["blocks.0.mlp.w_in"].grad == 0)
    assert np.all(p["tok_emb"].grad == 0)
    assert np.any(p["blocks.1.mlp.w_in"].grad != 0)


def test_frozen_trunk_forward_equals_full_forward(tiny_model):
    p = lm.as_tensors(tiny_model.params)
    a = lm.trunk(p, tiny_model.config, [[4, 5, 6, 7]]).data
    b = lm.trunk(p, tiny_model.config, [[4, 5, 6, 7]], frozen_blocks=2).data
    np.testing.assert_array_equal(a, b)


def test_generate_determinism(tiny_model):
    prompt = lm.tokenizer.encode("hi", bos=True)
    assert lm.generate(tiny_model, prompt, 8, 0.0) == lm.generate(tiny_model, prompt, 8, 0.0)
    assert lm.generate(tiny_model, prompt, 8, 1.0, seed=4) == lm.generate(tiny_model, prompt, 8, 1.0, seed=4)


def test_generate_rigged_model_emits_sevens():
    cfg = uniform_model().config
    m = lm.ScriptedModel(cfg, lambda t: np.where(np.arange(260) == 7, 0.0, -np.inf) * np.ones(t.shape + (1,)))
    assert lm.generate(m, [lm.BOS], 5, 1.0, seed=1) == [7] * 5
    assert lm.generate(m, [lm.BOS], 5, 0.0) == [7] * 5


def test_generate_greedy_tie_goes_to_lowest_index():
    m = uniform_model(260)
    assert lm.generate(m, [lm.BOS], 3, 0.0) == [0, 0, 0]


def test_generate_never_emits_pad():
    def fn(t):
        z = np.full(t.shape + (260,), -50.0)
        z[..., lm.PAD] = 50.0
        z[..., 65] = 0.0
        return z

    m = lm.ScriptedModel(uniform_model().config, fn)
    out = lm.generate(m, [lm.BOS], 10, 1.0, seed=0)
    assert lm.PAD not in out and len(out) <= 10


def test_generate_errors(tiny_model):
    with pytest.raises(ValueError):
        lm.generate(tiny_model, [], 3)
    with pytest.raises(ValueError):
        lm.generate(tiny_model, [1] * 65, 3)
    with pytest.raises(ValueError):
        lm.generate(tiny_model, [1], 3, temperature=-1)


def test_sequence_logprob_uniform():
    s, n = lm.sequence_logprob(uniform_model(256), [1, 2], [3, 4, 5])
    assert n == 3 and s == pytest.approx(-3 * math.log(256), abs=1e-12)


def test_sequence_logprob_matches_gather_oracle(tiny_model):
    ctx, cont = [256, 40, 41, 42], [50, 51, 52]
    z = lm.logits(tiny_model, np.array([ctx + cont[:-1]]))[0]
    expect = 0.0
    for k, tok in enumerate(cont):
        row = z[len(ctx) - 1 + k]
        expect += row[tok] - np.log(np.exp(row).sum())
    s, n = lm.sequence_logprob(tiny_model, ctx, cont)
    assert s == pytest.approx(expect, abs=1e-8)


def test_single_token_continuations_sum_to_one(tiny_model):
    ctx = [256, 70, 71]
    total = sum(math.exp(lm.sequence_logprob(tiny_model, ctx, [t])[0]) for t in range(260))
    assert total == pytest.approx(1.0, abs=1e-6)


def test_sequence_logprob_errors(tiny_model):
    with pytest.raises(ValueError):
        lm.sequence_logprob(tiny_model, [1], [])
    with pytest.raises(ValueError):
        lm.sequence_logprob(tiny_model, [1] * 60, [2] * 10)


def test_role_transitions(tiny_model):
    s = tiny_model.derive("sft")
    assert s.derive("reward").role == "reward"
    assert s.derive("ppo").role == "ppo"
    with pytest.raises(ValueError):
        tiny_model.derive("ppo")
    with pytest.raises(ValueError):
        s.derive("reward").derive("ppo")


def test_checkpoint_param_shapes_validated(tiny_cfg, tiny_model):
    bad = dict(tiny_model.params, lm_head=np.zeros((3, 3)))
    with pytest.raises(ValueError):
        lm.PolicyCheckpoint(tiny_cfg, bad)


def test_checkpoint_roundtrip(tmp_path, tiny_model):
    ck = tiny_model.derive("sft", record={"stage": "sft", "x": [1, 2]})
    lm.save_checkpoint(ck, tmp_path / "a")
    back = lm.load_checkpoint(tmp_path / "a")
    assert back.role == "sft" and back.config == ck.config and back.provenance == ck.provenance
    for k in ck.params:
        assert back.params[k].tobytes() == ck.params[k].tobytes()
    lm.save_checkpoint(back, tmp_path / "b")
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    manifest = (tmp_path / "a" / "manifest.txt").read_text()
    assert "param=lm_head shape=16x260 file=lm_head.f64 offset=0 dtype=float64-le" in manifest


def test_training_halves_loss():
    from okapi.sft import train_lm

    cfg = lm.ModelConfig(n_layers=1, d_model=16, n_heads=2, context_len=32, seed=0)
    rng = np.random.default_rng(0)
    words = ["alpha", "beta", "gamma", "delta"]
    corpus = [lm.tokenizer.encode(" ".join(rng.choice(words, 3)), bos=True, eos=True) for _ in range(50)]
    base = lm.new_base(cfg)
    before = lm.lm_loss(base, corpus)
    after = lm.lm_loss(train_lm(base, corpus, 300, lr=1e-2, batch_size=8), corpus)
    assert after <= 0.5 * before


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_init_is_a_pure_function_of_seed(seed):
    cfg = lm.ModelConfig(n_layers=1, d_model=8, n_heads=2, context_len=16, seed=seed)
    assert lm.new_base(cfg).fingerprint() == lm.new_base(cfg).fingerprint()
