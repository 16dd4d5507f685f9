import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from okapi import lm
from okapi.records import InstructionExample
from okapi.sft import DEFAULT_FORMAT, SftConfig, lr_at, run_sft

CFG = SftConfig()


def test_published_defaults():
    assert (CFG.epochs, CFG.peak_lr, CFG.warmup_steps, CFG.batch_size, CFG.weight_decay) == (3, 2e-5, 200, 128, 0.05)


def test_lr_examples():
    assert lr_at(0, 1000, CFG) == 0.0
    assert lr_at(100, 1000, CFG) == pytest.approx(1e-5, abs=1e-18)
    assert lr_at(200 + 400, 1000, CFG) == pytest.approx(1e-5, abs=1e-18)
    assert lr_at(200, 1000, CFG) == 2e-5
    assert lr_at(1000, 1000, CFG) == pytest.approx(0.0, abs=1e-20)


def test_lr_errors():
    with pytest.raises(ValueError):
        lr_at(0, 200, CFG)
    with pytest.raises(ValueError):
        lr_at(1001, 1000, CFG)
    with pytest.raises(ValueError):
        SftConfig(warmup_steps=-1)
    with pytest.raises(ValueError):
        SftConfig(peak_lr=0.0)


def test_lr_schedule_is_continuous():
    total = 1000
    lrs = np.array([lr_at(s, total, CFG) for s in range(total + 1)])
    assert np.all(lrs >= 0) and lrs.max() == CFG.peak_lr
    assert np.abs(np.diff(lrs)).max() < CFG.peak_lr / min(CFG.warmup_steps, 1)
    # the largest step is at most one warmup increment
    assert np.abs(np.diff(lrs)).max() <= CFG.peak_lr / CFG.warmup_steps + 1e-18


def test_lr_matches_closed_form():
    cfg = SftConfig(warmup_steps=10, peak_lr=1.0)
    for s in range(10, 51):
        assert lr_at(s, 50, cfg) == pytest.approx(0.5 * (1 + math.cos(math.pi * (s - 10) / 40)), abs=1e-15)


_text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=20)


@given(_text.filter(bool), _text, _text)
def test_render_then_split_recovers_response(ins, inp, out):
    fmt = DEFAULT_FORMAT
    if fmt.response_marker in ins + "\x00" + inp:
        return
    rec = InstructionExample("x", "en", ins, inp, out)
    prompt, resp = fmt.split(fmt.render(rec))
    assert resp == out and prompt == fmt.prompt(ins, inp)


def test_marker_in_instruction_rejected():
    with pytest.raises(ValueError):
        DEFAULT_FORMAT.prompt("a\nResponse: b")


def test_loss_masks():
    rec = InstructionExample("x", "en", "Say hi", "", "hi")
    toks, mask = DEFAULT_FORMAT.encode(rec, "response_only")
    assert toks[0] == lm.BOS and toks[-1] == lm.EOS and len(mask) == len(toks)
    assert sum(mask) == 3  # "h", "i", EOS
    assert lm.tokenizer.decode([t for t, m in zip(toks, mask) if m]) == "hi"
    _, full = DEFAULT_FORMAT.encode(rec, "full_sequence")
    assert full[0] == 0 and sum(full) == len(toks) - 1


def _corpus(n=50):
    rng = np.random.default_rng(1)
    words = ["red", "blue", "cat", "dog", "sun"]
    out = []
    for i in range(n):
        a, b = rng.choice(words, 2)
        out.append(InstructionExample(f"r{i}", "en", f"Repeat {a}", "", f"{a} {a}" if b != "sun" else a))
    return out


DESK = SftConfig(epochs=3, peak_lr=3e-3, warmup_steps=2, batch_size=8, weight_decay=0.0)


@pytest.fixture(scope="module")
def base():
    return lm.new_base(lm.ModelConfig(n_layers=1, d_model=16, n_heads=2, context_len=48, seed=0))


def test_zero_epochs_is_identity(base):
    out = run_sft(base, _corpus(10), SftConfig(epochs=0, warmup_steps=0))
    assert out.role == "sft"
    for k in base.params:
        assert out.params[k].tobytes() == base.params[k].tobytes()


def test_sft_reduces_training_loss_and_is_deterministic(base):
    corpus = _corpus()
    seqs = [DEFAULT_FORMAT.encode(r)[0] for r in corpus]
    masks = [DEFAULT_FORMAT.encode(r)[1] for r in corpus]
    hist = []
    a = run_sft(base, corpus, DESK, history=hist)
    b = run_sft(base, corpus, DESK)
    assert lm.lm_loss(a, seqs, masks) < lm.lm_loss(base, seqs, masks)
    assert a.fingerprint() == b.fingerprint()
    rec = a.provenance[-1]
    assert rec["stage"] == "sft" and rec["config"]["batch_size"] == 8 and len(rec["corpus_fingerprint"]) == 64
    # every parameter tensor moved
    assert all(not np.array_equal(a.params[k], base.params[k]) for k in base.params)
    # per-epoch mean loss mostly goes down
    per_epoch = [np.mean([h["loss"] for h in hist if h["epoch"] == e]) for e in range(DESK.epochs)]
    drops = sum(y <= x for x, y in zip(per_epoch, per_epoch[1:]))
    assert drops >= 0.8 * (len(per_epoch) - 1)


def test_sft_errors(base):
    with pytest.raises(ValueError):
        run_sft(base, [], DESK)
    with pytest.raises(ValueError):
        run_sft(base.derive("sft"), _corpus(3), DESK)
    long = InstructionExample("l", "en", "x" * 60, "", "y")
    with pytest.raises(ValueError):
        run_sft(base, [long], DESK)


def test_sft_aborts_on_non_finite_loss(base):
    params = dict(base.params, lm_head=np.full_like(base.params["lm_head"], np.nan))
    bad = lm.PolicyCheckpoint(base.config, params)
    with pytest.raises(FloatingPointError, match="step"):
        run_sft(bad, _corpus(4), DESK)
